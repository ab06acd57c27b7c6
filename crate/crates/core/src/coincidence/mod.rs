//! Signal-herald coincidences: nearest-herald matching, the Δt histogram,
//! the joint column spectrum, accidental estimation and SBR/SNR.

mod fit;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fit::{fit_band_profile, fit_gaussian_profile, BandFit, BandProfile, PROFILE_HALF_WIDTH};

use crate::error::{Error, Result};
use crate::model::{PhotonEvent, SelectionBand, SpectrometerConfig, SENSOR_SIZE};

const PS_PER_NS: f64 = 1e3;
const PS_PER_S: f64 = 1e12;
const MATCH_CHUNK: usize = 1 << 16;

/// A signal event paired with its nearest herald.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub signal_index: u32,
    pub herald_index: u32,
    pub signal_col: u16,
    pub herald_col: u16,
    pub signal_toa_ps: i64,
    /// Signal ToA minus herald ToA.
    pub dt_ps: i64,
}

impl Match {
    pub fn dt_ns(&self) -> f64 {
        self.dt_ps as f64 / PS_PER_NS
    }
}

/// Pairs every signal event with the herald closest in time. Equidistant
/// heralds resolve to the earlier one, and among heralds sharing a
/// timestamp to the first in stream order. Both streams must be sorted.
pub fn match_coincidences(signal: &[PhotonEvent], herald: &[PhotonEvent]) -> Result<Vec<Match>> {
    if herald.is_empty() {
        return Err(Error::Analysis("herald stream is empty".into()));
    }
    let sorted = |e: &[PhotonEvent]| e.windows(2).all(|w| w[0].toa_ps <= w[1].toa_ps);
    if !sorted(signal) || !sorted(herald) {
        return Err(Error::Analysis("event streams must be sorted by time".into()));
    }
    if signal.len() > u32::MAX as usize || herald.len() > u32::MAX as usize {
        return Err(Error::Analysis("stream too long for 32-bit match indices".into()));
    }
    let parts: Vec<Vec<Match>> = signal
        .par_chunks(MATCH_CHUNK)
        .enumerate()
        .map(|(k, chunk)| match_chunk(chunk, k * MATCH_CHUNK, herald))
        .collect();
    Ok(parts.concat())
}

fn match_chunk(signal: &[PhotonEvent], base: usize, herald: &[PhotonEvent]) -> Vec<Match> {
    let mut out = Vec::with_capacity(signal.len());
    let Some(first) = signal.first() else { return out };
    // `hi`: first herald strictly after the current signal time
    let mut hi = herald.partition_point(|h| h.toa_ps <= first.toa_ps);
    let group_start = |hi: usize| {
        let t = herald[hi - 1].toa_ps;
        herald[..hi].partition_point(|h| h.toa_ps < t)
    };
    let mut before = (hi > 0).then(|| group_start(hi));
    for (i, s) in signal.iter().enumerate() {
        let mut moved = false;
        while hi < herald.len() && herald[hi].toa_ps <= s.toa_ps {
            hi += 1;
            moved = true;
        }
        if moved {
            before = Some(group_start(hi));
        }
        let j = match (before, herald.get(hi)) {
            (Some(b), Some(a)) => {
                if s.toa_ps - herald[b].toa_ps <= a.toa_ps - s.toa_ps {
                    b
                } else {
                    hi
                }
            }
            (Some(b), None) => b,
            (None, Some(_)) => hi,
            (None, None) => unreachable!("herald stream is non-empty"),
        };
        let h = &herald[j];
        out.push(Match {
            signal_index: (base + i) as u32,
            herald_index: j as u32,
            signal_col: s.col,
            herald_col: h.col,
            signal_toa_ps: s.toa_ps,
            dt_ps: s.toa_ps - h.toa_ps,
        });
    }
    out
}

/// Δt histogram over `[start_ns, start_ns + bins * bin_ns)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtHistogram {
    pub start_ns: f64,
    pub bin_ns: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    /// Centre of the bin with the most counts after a 3-bin moving average.
    pub peak_ns: Option<f64>,
}

impl DtHistogram {
    pub fn end_ns(&self) -> f64 {
        self.start_ns + self.bin_ns * self.counts.len() as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.start_ns + (k as f64 + 0.5) * self.bin_ns
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_start_ns", "bin_end_ns", "count"])?;
        for (k, c) in self.counts.iter().enumerate() {
            let lo = self.start_ns + k as f64 * self.bin_ns;
            w.write_record([lo.to_string(), (lo + self.bin_ns).to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Range and gating options of an analysis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    pub range_start_ns: f64,
    pub range_end_ns: f64,
    /// Fixed gate centre; the located peak is used when absent.
    pub gate_center_ns: Option<f64>,
    /// Only events before this time are analysed, and it is used as the
    /// acquisition time. Defaults to the last event time.
    pub duration_s: Option<f64>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            range_start_ns: 0.0,
            range_end_ns: 100.0,
            gate_center_ns: None,
            duration_s: None,
        }
    }
}

impl AnalysisOptions {
    fn validate(&self) -> Result<()> {
        if !(self.range_start_ns < self.range_end_ns) || !self.range_end_ns.is_finite() || !self.range_start_ns.is_finite()
        {
            return Err(Error::Config("analysis range: start must be below end".into()));
        }
        if let Some(t) = self.duration_s {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config("analysis duration_s: must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Bins Δt values. The bin count is the range divided by the bin width,
/// rounded up.
pub fn histogram_dt(dts_ps: &[i64], bin_ns: f64, start_ns: f64, end_ns: f64) -> Result<DtHistogram> {
    if !(bin_ns > 0.0 && bin_ns.is_finite()) {
        return Err(Error::Config("histogram_bin_ns: must be positive".into()));
    }
    if !(start_ns < end_ns) {
        return Err(Error::Config("histogram range: start must be below end".into()));
    }
    let n = ((end_ns - start_ns) / bin_ns - 1e-9).ceil().max(1.0) as usize;
    let (counts, underflow, overflow) = dts_ps
        .par_chunks(1 << 16)
        .fold(
            || (vec![0u64; n], 0u64, 0u64),
            |(mut c, mut u, mut o), chunk| {
                for &dt in chunk {
                    let x = (dt as f64 / PS_PER_NS - start_ns) / bin_ns;
                    if x < 0.0 {
                        u += 1;
                    } else if x >= n as f64 {
                        o += 1;
                    } else {
                        c[x as usize] += 1;
                    }
                }
                (c, u, o)
            },
        )
        .reduce(
            || (vec![0u64; n], 0, 0),
            |(mut a, au, ao), (b, bu, bo)| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                (a, au + bu, ao + bo)
            },
        );
    let mut h = DtHistogram {
        start_ns,
        bin_ns,
        counts,
        underflow,
        overflow,
        peak_ns: None,
    };
    h.peak_ns = locate_peak(&h.counts).map(|k| h.bin_center(k));
    Ok(h)
}

/// Argmax of the 3-bin moving average, ties broken by the raw count and
/// then towards the lower bin.
fn locate_peak(counts: &[u64]) -> Option<usize> {
    if counts.iter().all(|&c| c == 0) {
        return None;
    }
    let smoothed = |k: usize| -> f64 {
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(counts.len() - 1);
        counts[lo..=hi].iter().sum::<u64>() as f64 / (hi - lo + 1) as f64
    };
    let mut best = 0;
    for k in 1..counts.len() {
        if (smoothed(k), counts[k]) > (smoothed(best), counts[best]) {
            best = k;
        }
    }
    Some(best)
}

/// Coincidence counts per (signal column, herald column) and per-column
/// singles rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpectrum {
    /// `counts[i][j]`: signal column `i`, herald column `j`.
    pub counts: Vec<Vec<u64>>,
    /// Signal singles per column per second.
    pub signal_rates: Vec<f64>,
    /// Herald singles per column per second.
    pub herald_rates: Vec<f64>,
    pub duration_s: f64,
}

impl JointSpectrum {
    /// Marginal rates from the singles streams and an empty count matrix.
    pub fn from_singles(signal: &[PhotonEvent], herald: &[PhotonEvent], duration_s: f64) -> Result<Self> {
        if !(duration_s > 0.0) {
            return Err(Error::Analysis("joint spectrum needs a positive duration".into()));
        }
        let rates = |ev: &[PhotonEvent]| {
            let mut c = vec![0u64; SENSOR_SIZE];
            for e in ev {
                c[usize::from(e.col)] += 1;
            }
            c.into_iter().map(|n| n as f64 / duration_s).collect()
        };
        Ok(Self {
            counts: vec![vec![0; SENSOR_SIZE]; SENSOR_SIZE],
            signal_rates: rates(signal),
            herald_rates: rates(herald),
            duration_s,
        })
    }

    pub fn add<'a>(&mut self, matches: impl IntoIterator<Item = &'a Match>) {
        for m in matches {
            self.counts[usize::from(m.signal_col)][usize::from(m.herald_col)] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Dense long-format export, one line per column pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "signal_col,herald_col,count")?;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                writeln!(w, "{i},{j},{c}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected accidental coincidences per second, `τ Σ S_i S_j` over the
/// allowed column pairs. A missing or full mask allows every pair.
pub fn estimate_background(js: &JointSpectrum, tau_ns: f64, mask: Option<&SelectionBand>) -> f64 {
    let tau_s = tau_ns * 1e-9;
    match mask.filter(|m| !m.is_full()) {
        None => tau_s * js.signal_rates.iter().sum::<f64>() * js.herald_rates.iter().sum::<f64>(),
        Some(band) => {
            let mut prefix = vec![0.0; js.signal_rates.len() + 1];
            for (i, s) in js.signal_rates.iter().enumerate() {
                prefix[i + 1] = prefix[i] + s;
            }
            let sum: f64 = js
                .herald_rates
                .iter()
                .enumerate()
                .filter_map(|(j, &sh)| {
                    band.accepted_range(j as u16)
                        .map(|(lo, hi)| sh * (prefix[usize::from(hi) + 1] - prefix[usize::from(lo)]))
                })
                .sum();
            tau_s * sum
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalysisMode {
    TemporalOnly,
    /// Band width in pixels; an infinite width is no spectral filter.
    TemporalSpectral { w: f64 },
}

/// Value with a one-standard-deviation uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceResult {
    pub mode: AnalysisMode,
    pub histogram: DtHistogram,
    pub peak_ns: f64,
    pub gate_start_ns: f64,
    pub gate_end_ns: f64,
    pub duration_s: f64,
    pub n_signal: u64,
    pub n_herald: u64,
    /// Matches surviving the spectral filter.
    pub n_matches: u64,
    /// Column pairs allowed by the selection band.
    pub n_cells: u64,
    pub c_tot: u64,
    /// Expected accidental coincidences in the gate.
    pub c_b: f64,
    pub c_b_rate: f64,
    pub sbr: Measured,
    pub snr: Measured,
}

impl CoincidenceResult {
    pub fn true_coincidences(&self) -> Measured {
        Measured {
            value: self.c_tot as f64 - self.c_b,
            sigma: (self.c_tot as f64 + self.c_b).sqrt(),
        }
    }
}

/// SBR and SNR with first-order Poisson propagation, taking the variance of
/// both `c_tot` and `c_b` equal to their values.
pub fn sbr_snr(c_tot: f64, c_b: f64) -> (Measured, Measured) {
    let (x, y) = (c_tot, c_b);
    let sbr = if y > 0.0 {
        Measured {
            value: (x - y) / y,
            sigma: (x / (y * y) + x * x / (y * y * y)).sqrt(),
        }
    } else {
        Measured { value: f64::INFINITY, sigma: f64::NAN }
    };
    let s = (x + y).sqrt();
    let snr = if s > 0.0 {
        let d = x - y;
        let dx = 1.0 / s - d / (2.0 * s * s * s);
        let dy = -1.0 / s - d / (2.0 * s * s * s);
        Measured {
            value: d / s,
            sigma: (x * dx * dx + y * dy * dy).sqrt(),
        }
    } else {
        Measured { value: 0.0, sigma: 0.0 }
    };
    (sbr, snr)
}

/// Events before `limit_ps` (the streams are sorted).
fn truncate(ev: &[PhotonEvent], limit_ps: Option<i64>) -> &[PhotonEvent] {
    match limit_ps {
        Some(l) => &ev[..ev.partition_point(|e| e.toa_ps < l)],
        None => ev,
    }
}

/// Shared preprocessing for analyses of one stream pair under several modes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub matches: Vec<Match>,
    pub spectrum: JointSpectrum,
    pub n_signal: u64,
    pub n_herald: u64,
}

/// Truncates to the analysis duration, matches and computes the singles
/// marginals.
pub fn prepare(signal: &[PhotonEvent], herald: &[PhotonEvent], opts: &AnalysisOptions) -> Result<Prepared> {
    opts.validate()?;
    let limit = opts.duration_s.map(|t| (t * PS_PER_S).round() as i64);
    let (signal, herald) = (truncate(signal, limit), truncate(herald, limit));
    if signal.is_empty() || herald.is_empty() {
        return Err(Error::Analysis("signal and herald streams must be non-empty".into()));
    }
    let duration_s = match opts.duration_s {
        Some(t) => t,
        None => {
            let last = signal.last().unwrap().toa_ps.max(herald.last().unwrap().toa_ps);
            last as f64 / PS_PER_S
        }
    };
    let matches = match_coincidences(signal, herald)?;
    let spectrum = JointSpectrum::from_singles(signal, herald, duration_s)?;
    Ok(Prepared {
        matches,
        spectrum,
        n_signal: signal.len() as u64,
        n_herald: herald.len() as u64,
    })
}

/// Full coincidence analysis of one stream pair.
pub fn analyze(
    signal: &[PhotonEvent],
    herald: &[PhotonEvent],
    cfg: &SpectrometerConfig,
    mode: AnalysisMode,
    opts: &AnalysisOptions,
) -> Result<CoincidenceResult> {
    let prepared = prepare(signal, herald, opts)?;
    analyze_prepared(&prepared, cfg, mode, opts).map(|(r, _)| r)
}

/// Analysis of already matched streams. Also returns the joint spectrum of
/// gated, band-filtered matches.
pub fn analyze_prepared(
    p: &Prepared,
    cfg: &SpectrometerConfig,
    mode: AnalysisMode,
    opts: &AnalysisOptions,
) -> Result<(CoincidenceResult, JointSpectrum)> {
    cfg.validate()?;
    opts.validate()?;
    let band = match mode {
        AnalysisMode::TemporalOnly => None,
        AnalysisMode::TemporalSpectral { w } => Some(SelectionBand::new(cfg, w)?),
    };
    let keep = |m: &Match| band.as_ref().map_or(true, |b| b.contains(m.signal_col, m.herald_col));
    let kept: Vec<&Match> = p.matches.par_iter().filter(|m| keep(m)).collect();
    let dts: Vec<i64> = kept.iter().map(|m| m.dt_ps).collect();
    let histogram = histogram_dt(&dts, cfg.histogram_bin_ns, opts.range_start_ns, opts.range_end_ns)?;

    let peak_ns = match opts.gate_center_ns.or(histogram.peak_ns) {
        Some(c) => c,
        None => return Err(Error::Analysis("no coincidences in the histogram range to locate a peak".into())),
    };
    let gate_lo = ((peak_ns - cfg.tau_ns / 2.0) * PS_PER_NS).round() as i64;
    let gate_hi = gate_lo + (cfg.tau_ns * PS_PER_NS).round() as i64;
    let (gate_start_ns, gate_end_ns) = (gate_lo as f64 / PS_PER_NS, gate_hi as f64 / PS_PER_NS);
    if gate_start_ns < histogram.start_ns - 1e-9 || gate_end_ns > histogram.end_ns() + 1e-9 {
        return Err(Error::Config(format!(
            "gate [{gate_start_ns}, {gate_end_ns}) ns extends beyond the histogram range [{}, {}) ns",
            histogram.start_ns,
            histogram.end_ns()
        )));
    }

    let mut gated = p.spectrum.clone();
    gated.add(kept.iter().copied().filter(|m| (gate_lo..gate_hi).contains(&m.dt_ps)));
    let c_tot = gated.total();
    let c_b_rate = estimate_background(&p.spectrum, cfg.tau_ns, band.as_ref());
    let c_b = c_b_rate * p.spectrum.duration_s;
    let (sbr, snr) = sbr_snr(c_tot as f64, c_b);
    let n_cells = band.as_ref().map_or(crate::model::COLUMN_PAIRS, |b| {
        if b.is_full() {
            crate::model::COLUMN_PAIRS
        } else {
            b.cell_count()
        }
    });
    let result = CoincidenceResult {
        mode,
        peak_ns,
        gate_start_ns,
        gate_end_ns,
        duration_s: p.spectrum.duration_s,
        n_signal: p.n_signal,
        n_herald: p.n_herald,
        n_matches: kept.len() as u64,
        n_cells,
        c_tot,
        c_b,
        c_b_rate,
        sbr,
        snr,
        histogram,
    };
    Ok((result, gated))
}
