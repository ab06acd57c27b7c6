//! Times simulation and the analysis chain on a reference-regime run.
//!
//! `cargo run --release -p qtd-core --example throughput -- [seconds]`

use std::time::Instant;

use qtd_core::coincidence::{histogram_dt, match_coincidences};
use qtd_core::pipeline::{cluster, correct_and_centroid, split_arms, PipelineConfig, TimewalkTable};
use qtd_core::sim::{simulate, IntensifierParams, SourceParams};
use qtd_core::SpectrometerConfig;

fn main() -> qtd_core::Result<()> {
    let seconds: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let cfg = SpectrometerConfig::default();
    let src = SourceParams {
        duration_s: seconds,
        ..SourceParams::reference_regime(cfg.tau_ns)
    };
    let t0 = Instant::now();
    let file = simulate(&src, &IntensifierParams::default(), &cfg)?;
    let sim_s = t0.elapsed().as_secs_f64();
    let n = file.hits.len();
    println!("simulated {n} hits in {sim_s:.2} s ({:.3e} hits/s)", n as f64 / sim_s);

    let t1 = Instant::now();
    let clusters = cluster(&file.hits, &PipelineConfig::default());
    let t_cluster = t1.elapsed().as_secs_f64();
    let events = correct_and_centroid(&clusters, &TimewalkTable::identity(), &cfg);
    let (herald, signal) = split_arms(&events);
    let t2 = Instant::now();
    let matches = match_coincidences(&signal, &herald)?;
    let dts: Vec<i64> = matches.iter().map(|m| m.dt_ps).collect();
    let h = histogram_dt(&dts, cfg.histogram_bin_ns, 0.0, 100.0)?;
    let t_match = t2.elapsed().as_secs_f64();
    let total = t1.elapsed().as_secs_f64();
    println!(
        "cluster {t_cluster:.2} s, match+histogram {t_match:.2} s, total {total:.2} s: {:.3e} hits/s, peak {:?} ns",
        n as f64 / total,
        h.peak_ns
    );
    Ok(())
}
