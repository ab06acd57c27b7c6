use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

use qtd_core::coincidence::{self, AnalysisMode, AnalysisOptions, CoincidenceResult, Prepared};
use qtd_core::eventio::config_digest;
use qtd_core::pipeline::{self, TimewalkTable};
use qtd_core::roc::{self, RocConfig, RocCurve};
use qtd_core::sim::{self, Origin};
use qtd_core::theory::{self, CellCount, TheoryParams};
use qtd_core::{EventFile, EventWriter, PhotonEvent};

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{CellsArg, Cli, Command, Failure, ModeArg};

/// False-alarm probabilities reported in the ROC operating-point table.
const PFA_TARGETS: [f64; 3] = [1e-2, 1e-3, 1e-4];

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    manifest: RunManifest,
}

impl Ctx<'_> {
    fn path(&mut self, name: &str) -> std::path::PathBuf {
        self.manifest.output(name);
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn write_csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), Failure> {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{}", header.join(","))?;
        for row in rows {
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let name = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Calibrate { .. } => "calibrate",
        Command::Analyze { .. } => "analyze",
        Command::SweepW { .. } => "sweep-w",
        Command::SnrVsT { .. } => "snr-vs-t",
        Command::Roc { .. } => "roc",
        Command::Theory { .. } => "theory",
    };
    // argument checks that clap cannot express, before touching the disk
    if let Command::Analyze { mode, w: Some(_), .. } = &cli.command {
        if *mode != ModeArg::Ts {
            return Err(Failure::Usage("--w requires --mode ts".into()));
        }
    }

    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut ctx = Ctx {
        cfg,
        out: &cli.out,
        manifest: RunManifest::new(name, cfg.digest(), cfg.source().seed),
    };
    if let Some(p) = &cli.config {
        ctx.manifest.input(p);
    }
    let metrics = match &cli.command {
        Command::Simulate { duration, no_truth } => simulate(&mut ctx, *duration, !no_truth)?,
        Command::Calibrate { events, t } => calibrate(&mut ctx, events, *t)?,
        Command::Analyze {
            events,
            table,
            mode,
            w,
            t,
        } => analyze(&mut ctx, events, table.as_deref(), *mode, *w, *t)?,
        Command::SweepW {
            w_min,
            w_max,
            cells,
            events,
            table,
        } => sweep_w(&mut ctx, *w_min, *w_max, *cells, events.as_deref(), table.as_deref())?,
        Command::SnrVsT {
            times,
            w,
            cells,
            events,
            table,
        } => snr_vs_t(&mut ctx, times, *w, *cells, events.as_deref(), table.as_deref())?,
        Command::Roc { events, table, w, cells } => roc_cmd(&mut ctx, events.as_deref(), table.as_deref(), *w, *cells)?,
        Command::Theory { w, cells } => theory_cmd(&mut ctx, *w, *cells)?,
    };
    // a closed stdout (e.g. piped into `head`) is not a failure
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&metrics)?);
    ctx.manifest.metrics = metrics;
    ctx.manifest.write(&cli.out)?;
    Ok(())
}

fn simulate(ctx: &mut Ctx, duration: Option<f64>, truth: bool) -> Result<Value, Failure> {
    let cfg = ctx.cfg;
    let mut src = cfg.source();
    if let Some(d) = duration {
        src.duration_s = d;
    }
    src.validate()?;
    let digest = config_digest(&cfg.spectrometer);

    let events_path = ctx.path("events.tpxe");
    let mut writer = EventWriter::new(BufWriter::new(File::create(events_path)?), &digest)?;
    let mut hit_detection = if truth {
        Some(BufWriter::new(File::create(ctx.path("hit_detection.u32"))?))
    } else {
        None
    };
    let detections = ctx.manifest.time("simulate", || {
        sim::stream(&src, cfg.intensifier(), &cfg.spectrometer, truth, |chunk| {
            writer.push(&chunk.hits)?;
            if let Some(w) = hit_detection.as_mut() {
                for d in &chunk.hit_detection {
                    w.write_all(&d.to_le_bytes())?;
                }
            }
            Ok(())
        })
    })?;
    let n_hits = writer.finish()?;
    if let Some(mut w) = hit_detection {
        w.flush()?;
    }

    if truth {
        let mut w = BufWriter::new(File::create(ctx.path("truth.csv"))?);
        writeln!(w, "detection,origin,pair_id,arm,true_time_ps,detected_time_ps,col,row,hits")?;
        for (i, d) in detections.iter().enumerate() {
            let (origin, pair) = match d.origin {
                Origin::Pair(id) => ("pair", id.to_string()),
                Origin::Background => ("background", String::new()),
            };
            writeln!(
                w,
                "{i},{origin},{pair},{:?},{},{},{},{},{}",
                d.arm, d.true_time_ps, d.detected_time_ps, d.col, d.row, d.hits
            )?;
        }
        w.flush()?;
    }
    let mut resolved = cfg.clone();
    resolved.source = Some(src.clone());
    ctx.write_json("config.json", &resolved)?;

    Ok(json!({
        "hits": n_hits,
        "detections": truth.then_some(detections.len()),
        "duration_s": src.duration_s,
        "seed": src.seed,
        "expected_rates": src.expected_rates(&cfg.spectrometer),
    }))
}

/// Loads an event file, keeping hits before `t_s` seconds.
fn load_hits(ctx: &mut Ctx, path: &Path, t_s: Option<f64>) -> Result<EventFile, Failure> {
    ctx.manifest.input(path);
    let mut file = ctx
        .manifest
        .time("read", || EventFile::read(path))
        .with_context(|| format!("reading {}", path.display()))?;
    if file.digest != config_digest(&ctx.cfg.spectrometer) {
        eprintln!("warning: {} was produced with a different spectrometer configuration", path.display());
    }
    if let Some(t) = t_s {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Failure::Usage("--T must be positive".into()));
        }
        let limit = (t * 1e12).round() as u64;
        let keep = file.hits.partition_point(|h| h.toa_ps < limit);
        file.hits.truncate(keep);
    }
    Ok(file)
}

fn load_table(ctx: &mut Ctx, path: Option<&Path>) -> Result<TimewalkTable, Failure> {
    let Some(path) = path else {
        return Ok(TimewalkTable::identity());
    };
    ctx.manifest.input(path);
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: TimewalkTable = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    table.validate()?;
    Ok(table)
}

struct Streams {
    signal: Vec<PhotonEvent>,
    herald: Vec<PhotonEvent>,
    n_hits: usize,
    n_events: usize,
    /// Time of the last hit, seconds.
    span_s: f64,
}

fn load_streams(ctx: &mut Ctx, events: &Path, table: Option<&Path>, t_s: Option<f64>) -> Result<Streams, Failure> {
    let table = load_table(ctx, table)?;
    let file = load_hits(ctx, events, t_s)?;
    let cfg = ctx.cfg;
    let photons = ctx
        .manifest
        .time("cluster", || pipeline::process(&file.hits, &table, &cfg.pipeline, &cfg.spectrometer));
    let (herald, signal) = pipeline::split_arms(&photons);
    Ok(Streams {
        signal,
        herald,
        n_hits: file.hits.len(),
        n_events: photons.len(),
        span_s: file.hits.last().map_or(0.0, |h| h.toa_ps as f64 / 1e12),
    })
}

fn calibrate(ctx: &mut Ctx, events: &Path, t: Option<f64>) -> Result<Value, Failure> {
    let file = load_hits(ctx, events, t)?;
    let cfg = ctx.cfg;
    let clusters = ctx.manifest.time("cluster", || pipeline::cluster(&file.hits, &cfg.pipeline));
    let table = ctx
        .manifest
        .time("calibrate", || pipeline::calibrate_timewalk(&clusters, &cfg.pipeline))?;
    ctx.write_json("timewalk.json", &table)?;
    let multi = clusters.iter().filter(|c| c.len() > 1).count();
    let calibrated = table.calibrated.iter().flatten().filter(|&&c| c).count();
    Ok(json!({
        "hits": file.hits.len(),
        "clusters": clusters.len(),
        "multi_hit_clusters": multi,
        "calibrated_cells": calibrated,
        "bins_per_axis": table.bins(),
    }))
}

fn summary(r: &CoincidenceResult) -> Value {
    json!({
        "mode": r.mode,
        "peak_ns": r.peak_ns,
        "gate_ns": [r.gate_start_ns, r.gate_end_ns],
        "duration_s": r.duration_s,
        "n_cells": r.n_cells,
        "c_tot": r.c_tot,
        "c_b": r.c_b,
        "sbr": r.sbr,
        "snr": r.snr,
    })
}

fn analysis_mode(mode: ModeArg, w: Option<f64>, default_w: f64) -> AnalysisMode {
    match mode {
        ModeArg::T => AnalysisMode::TemporalOnly,
        ModeArg::Ts => AnalysisMode::TemporalSpectral { w: w.unwrap_or(default_w) },
    }
}

fn analyze(
    ctx: &mut Ctx,
    events: &Path,
    table: Option<&Path>,
    mode: ModeArg,
    w: Option<f64>,
    t: Option<f64>,
) -> Result<Value, Failure> {
    let streams = load_streams(ctx, events, table, None)?;
    let cfg = ctx.cfg;
    let mut opts = cfg.analysis.clone();
    if t.is_some() {
        opts.duration_s = t;
    }
    let prepared = ctx
        .manifest
        .time("match", || coincidence::prepare(&streams.signal, &streams.herald, &opts))?;
    let mode = analysis_mode(mode, w, cfg.theory.w_px);
    let (result, spectrum) = ctx
        .manifest
        .time("analyze", || coincidence::analyze_prepared(&prepared, &cfg.spectrometer, mode, &opts))?;

    // the band profile needs the unfiltered gated spectrum
    let fit = match mode {
        AnalysisMode::TemporalOnly => coincidence::fit_band_profile(&spectrum, &cfg.spectrometer),
        AnalysisMode::TemporalSpectral { .. } => {
            let fixed = AnalysisOptions {
                gate_center_ns: Some(result.peak_ns),
                ..opts.clone()
            };
            coincidence::analyze_prepared(&prepared, &cfg.spectrometer, AnalysisMode::TemporalOnly, &fixed)
                .and_then(|(_, js)| coincidence::fit_band_profile(&js, &cfg.spectrometer))
        }
    };

    ctx.write_json("analysis.json", &result)?;
    let p = ctx.path("histogram.csv");
    result.histogram.write_csv(&p)?;
    let p = ctx.path("joint_spectrum.csv");
    spectrum.write_csv(&p)?;

    Ok(json!({
        "hits": streams.n_hits,
        "events": streams.n_events,
        "signal_events": prepared.n_signal,
        "herald_events": prepared.n_herald,
        "matches": prepared.matches.len(),
        "result": summary(&result),
        "true_coincidences": result.true_coincidences(),
        "band_fit": fit.ok(),
    }))
}

fn cell_count(ctx: &Ctx, cells: CellsArg) -> CellCount {
    match cells {
        CellsArg::Linear => CellCount::Linear {
            l: ctx.cfg.spectrometer.band_length_l,
        },
        CellsArg::Exact => CellCount::Exact(ctx.cfg.spectrometer.clone()),
    }
}

/// Theory constants with the band set to width `w`.
fn theory_at(ctx: &Ctx, w: Option<f64>, cells: CellsArg) -> Result<TheoryParams, Failure> {
    let mut p = ctx.cfg.theory.clone();
    if let Some(w) = w {
        if !(w > 0.0) {
            return Err(Failure::Usage("--w must be positive".into()));
        }
        p.w_px = w;
        p.n_prime = cell_count(ctx, cells).n_prime(w)?;
    }
    p.validate()?;
    Ok(p)
}

/// Matches `streams` and fixes the gate centre from a temporal-only pass,
/// so that every mode and width uses the same gate.
fn reference_gate(ctx: &mut Ctx, streams: &Streams, opts: &AnalysisOptions) -> Result<(Prepared, AnalysisOptions), Failure> {
    let cfg = ctx.cfg;
    let prepared = ctx
        .manifest
        .time("match", || coincidence::prepare(&streams.signal, &streams.herald, opts))?;
    let (t_only, _) = coincidence::analyze_prepared(&prepared, &cfg.spectrometer, AnalysisMode::TemporalOnly, opts)?;
    let fixed = AnalysisOptions {
        gate_center_ns: Some(t_only.peak_ns),
        ..opts.clone()
    };
    Ok((prepared, fixed))
}

fn f(x: f64) -> String {
    x.to_string()
}

fn sweep_w(
    ctx: &mut Ctx,
    w_min: u32,
    w_max: u32,
    cells: CellsArg,
    events: Option<&Path>,
    table: Option<&Path>,
) -> Result<Value, Failure> {
    let p = ctx.cfg.theory.clone();
    let counts = cell_count(ctx, cells);
    let scan = theory::sweep_width(&p, w_min, w_max, &counts)?;
    let best = theory::optimal_width(&p, w_min, w_max, &counts)?;
    ctx.write_csv(
        "sweep_w.csv",
        &["w", "n_prime", "eta", "e_sbr", "e_snr", "sbr_ts", "snr_ts"],
        scan.iter()
            .map(|s| vec![s.w.to_string(), f(s.n_prime), f(s.eta), f(s.e_sbr), f(s.e_snr), f(s.sbr_ts), f(s.snr_ts)]),
    )?;

    let mut measured = Value::Null;
    if let Some(events) = events {
        let streams = load_streams(ctx, events, table, None)?;
        let cfg = ctx.cfg;
        let (prepared, opts) = reference_gate(ctx, &streams, &cfg.analysis)?;
        let (t_only, _) = coincidence::analyze_prepared(&prepared, &cfg.spectrometer, AnalysisMode::TemporalOnly, &opts)?;
        let rows = ctx.manifest.time("sweep", || {
            (w_min..=w_max)
                .map(|w| {
                    let mode = AnalysisMode::TemporalSpectral { w: f64::from(w) };
                    coincidence::analyze_prepared(&prepared, &cfg.spectrometer, mode, &opts).map(|(r, _)| (w, r))
                })
                .collect::<qtd_core::Result<Vec<_>>>()
        })?;
        let best_measured = rows
            .iter()
            .fold(None::<(u32, f64)>, |b, (w, r)| match b {
                Some((_, v)) if v >= r.snr.value => b,
                _ => Some((*w, r.snr.value)),
            });
        ctx.write_csv(
            "sweep_w_measured.csv",
            &["w", "n_cells", "c_tot", "c_b", "sbr", "sbr_sigma", "snr", "snr_sigma", "e_sbr", "e_snr"],
            rows.iter().map(|(w, r)| {
                vec![
                    w.to_string(),
                    r.n_cells.to_string(),
                    r.c_tot.to_string(),
                    f(r.c_b),
                    f(r.sbr.value),
                    f(r.sbr.sigma),
                    f(r.snr.value),
                    f(r.snr.sigma),
                    f(r.sbr.value / t_only.sbr.value),
                    f(r.snr.value / t_only.snr.value),
                ]
            }),
        )?;
        measured = json!({
            "temporal_only": summary(&t_only),
            "best_w": best_measured.map(|b| b.0),
            "best_snr": best_measured.map(|b| b.1),
        });
    }
    Ok(json!({
        "optimal_w": best.w,
        "optimal_e_snr": best.e_snr,
        "improves_snr": best.improves_snr,
        "e_sbr_at_min_w": scan[0].e_sbr,
        "measured": measured,
    }))
}

fn snr_vs_t(
    ctx: &mut Ctx,
    times: &[f64],
    w: Option<f64>,
    cells: CellsArg,
    events: Option<&Path>,
    table: Option<&Path>,
) -> Result<Value, Failure> {
    if times.is_empty() || times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Failure::Usage("--times must be positive".into()));
    }
    let p = theory_at(ctx, w, cells)?;
    let points = theory::snr_vs_time(&p, times);
    ctx.write_csv(
        "snr_vs_t.csv",
        &["t_s", "snr_t", "snr_ts", "ratio"],
        points.iter().map(|s| vec![f(s.t_s), f(s.snr_t), f(s.snr_ts), f(s.ratio)]),
    )?;

    let mut measured = Value::Null;
    if let Some(events) = events {
        let streams = load_streams(ctx, events, table, None)?;
        let cfg = ctx.cfg;
        let (_, fixed) = reference_gate(ctx, &streams, &cfg.analysis)?;
        let mode_ts = AnalysisMode::TemporalSpectral { w: p.w_px };
        let mut rows = Vec::new();
        for &t in times.iter().filter(|&&t| t <= streams.span_s) {
            let opts = AnalysisOptions {
                duration_s: Some(t),
                ..fixed.clone()
            };
            let prepared = ctx
                .manifest
                .time("match", || coincidence::prepare(&streams.signal, &streams.herald, &opts))?;
            let (rt, _) = coincidence::analyze_prepared(&prepared, &cfg.spectrometer, AnalysisMode::TemporalOnly, &opts)?;
            let (rts, _) = coincidence::analyze_prepared(&prepared, &cfg.spectrometer, mode_ts, &opts)?;
            rows.push((t, rt, rts));
        }
        ctx.write_csv(
            "snr_vs_t_measured.csv",
            &["t_s", "snr_t", "snr_t_sigma", "snr_ts", "snr_ts_sigma", "ratio"],
            rows.iter().map(|(t, a, b)| {
                vec![
                    f(*t),
                    f(a.snr.value),
                    f(a.snr.sigma),
                    f(b.snr.value),
                    f(b.snr.sigma),
                    f(b.snr.value / a.snr.value),
                ]
            }),
        )?;
        measured = json!({ "times_measured": rows.len(), "span_s": streams.span_s });
    }
    Ok(json!({
        "w": p.w_px,
        "ratio": points.first().map(|s| s.ratio),
        "measured": measured,
    }))
}

/// Poisson means per segment from the closed-form rates: true counts `C η`
/// and accidentals `N' τ S_s S_h` (`N` for temporal-only).
fn model_means(p: &TheoryParams, spectral: bool, segment_s: f64) -> (f64, f64) {
    let accidental_per_cell = p.tau_s * p.s_s * p.s_h;
    if spectral {
        (p.c * p.eta() * segment_s, p.n_prime * accidental_per_cell * segment_s)
    } else {
        (p.c * segment_s, p.n * accidental_per_cell * segment_s)
    }
}

/// Thresholds covering both tails of the larger Poisson mean.
fn k_max(lambda: f64) -> u64 {
    (lambda + 12.0 * lambda.sqrt() + 20.0).ceil() as u64
}

fn operating_rows(curves: &[(&str, &RocCurve)]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (name, curve) in curves {
        for target in PFA_TARGETS {
            if let Some(op) = curve.operating_point(target) {
                rows.push(vec![
                    name.to_string(),
                    f(target),
                    op.threshold.to_string(),
                    f(op.p_d),
                    f(op.p_fa),
                    f(curve.pd_at_pfa(target)),
                ]);
            }
        }
    }
    rows
}

fn roc_cmd(ctx: &mut Ctx, events: Option<&Path>, table: Option<&Path>, w: f64, cells: CellsArg) -> Result<Value, Failure> {
    let cfg = ctx.cfg;
    let mut roc_cfg: RocConfig = cfg.roc.clone();
    let p = theory_at(ctx, Some(w), cells)?;

    let (ls_t, lb_t) = model_means(&p, false, roc_cfg.segment_s);
    let (ls_ts, lb_ts) = model_means(&p, true, roc_cfg.segment_s);
    let k = k_max(ls_t + lb_t).max(k_max(ls_ts + lb_ts));
    let n_seg = Some(roc_cfg.n_segments());
    let model_t = roc::model_roc(ls_t, lb_t, 0..=k, n_seg)?;
    let model_ts = roc::model_roc(ls_ts, lb_ts, 0..=k, n_seg)?;
    let p_path = ctx.path("roc_model_t.csv");
    model_t.write_csv(&p_path)?;
    let p_path = ctx.path("roc_model_ts.csv");
    model_ts.write_csv(&p_path)?;
    let mut curves: Vec<(String, RocCurve)> = vec![("model_t".into(), model_t), ("model_ts".into(), model_ts)];

    let mut measured = Value::Null;
    if let Some(events) = events {
        let streams = load_streams(ctx, events, table, None)?;
        // whole segments of recorded data only
        let usable = (streams.span_s / roc_cfg.segment_s).floor() * roc_cfg.segment_s;
        roc_cfg.duration_s = roc_cfg.duration_s.min(usable);
        roc_cfg.validate()?;
        let opts = AnalysisOptions {
            duration_s: Some(roc_cfg.duration_s),
            gate_center_ns: Some(roc_cfg.signal_window.center_ns),
            ..cfg.analysis.clone()
        };
        let prepared = ctx
            .manifest
            .time("match", || coincidence::prepare(&streams.signal, &streams.herald, &opts))?;
        let band = qtd_core::SelectionBand::new(&cfg.spectrometer, w)?;
        let n = roc_cfg.n_segments();
        let mut fitted = Vec::new();
        for (name, mode, band) in [
            ("t", AnalysisMode::TemporalOnly, None),
            ("ts", AnalysisMode::TemporalSpectral { w }, Some(&band)),
        ] {
            let empirical = ctx
                .manifest
                .time("roc", || roc::empirical_roc(&prepared.matches, &roc_cfg, band))?;
            // Poisson means measured on the same data: accidentals from the
            // singles spectra, true counts from the excess over them
            let (r, _) = coincidence::analyze_prepared(&prepared, &cfg.spectrometer, mode, &opts)?;
            let lb = r.c_b / n as f64;
            let ls = ((r.c_tot as f64 - r.c_b) / n as f64).max(0.0);
            let model = roc::model_roc(ls, lb, 0..=k_max(ls + lb), Some(n))?;
            let dev = roc::max_deviation_sigma(&empirical, &model);
            let path = ctx.path(&format!("roc_empirical_{name}.csv"));
            empirical.write_csv(&path)?;
            let path = ctx.path(&format!("roc_model_measured_{name}.csv"));
            model.write_csv(&path)?;
            fitted.push(json!({
                "mode": name,
                "lambda_sig": ls,
                "lambda_bg": lb,
                "max_deviation_sigma": dev,
            }));
            curves.push((format!("empirical_{name}"), empirical));
            curves.push((format!("model_measured_{name}"), model));
        }
        measured = json!({ "segments": n, "curves": fitted });
    }

    let named: Vec<(&str, &RocCurve)> = curves.iter().map(|(n, c)| (n.as_str(), c)).collect();
    let rows = operating_rows(&named);
    ctx.write_csv(
        "operating_points.csv",
        &["curve", "target_p_fa", "threshold", "p_d", "p_fa", "best_p_d_below_target"],
        rows,
    )?;
    let op = |c: &RocCurve| c.operating_point(1e-3);
    Ok(json!({
        "w": w,
        "segment_s": roc_cfg.segment_s,
        "model_t": { "lambda_sig": ls_t, "lambda_bg": lb_t, "operating_point": op(&curves[0].1) },
        "model_ts": { "lambda_sig": ls_ts, "lambda_bg": lb_ts, "operating_point": op(&curves[1].1) },
        "measured": measured,
    }))
}

fn theory_cmd(ctx: &mut Ctx, w: Option<f64>, cells: CellsArg) -> Result<Value, Failure> {
    let p = theory_at(ctx, w, cells)?;
    let report = theory::report(&p)?;
    ctx.write_json("theory.json", &report)?;
    Ok(serde_json::to_value(&report)?)
}
