//! Seeded Monte Carlo generator of raw camera hit streams.
//!
//! Pairs are emitted by a CW source as a homogeneous Poisson process. Every
//! pair independently yields a herald detection with probability `mu_h` and
//! a signal detection with probability `mu_s`; by Poisson thinning the three
//! detected sub-populations (both, herald only, signal only) are independent
//! Poisson processes, which is how they are drawn here. Broadband background
//! photons arrive in the signal stripe only.
//!
//! The run is cut into fixed one-second slabs. Slab `k` draws from its own
//! ChaCha stream `(seed, k)`, so the output does not depend on how many
//! slabs are generated concurrently or how the caller consumes the chunks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventio::{config_digest, EventFile};
use crate::model::{Arm, PixelHit, RowRange, SpectrometerConfig, MAX_PIXEL};

const SLAB_PS: f64 = 1e12;
const SLABS_PER_BATCH: u64 = 4;
const PS_PER_NS: f64 = 1e3;

/// Marginal herald spectrum: a Gaussian truncated to the imaged range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeraldSpectrum {
    pub center_nm: f64,
    pub fwhm_nm: f64,
}

impl Default for HeraldSpectrum {
    fn default() -> Self {
        Self {
            center_nm: 810.0,
            fwhm_nm: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceParams {
    /// Pair emission rate at the source, pairs/s.
    #[serde(rename = "pair_rate_P")]
    pub pair_rate: f64,
    /// Background photons/s detected in the signal stripe.
    #[serde(rename = "bg_rate_B")]
    pub bg_rate: f64,
    pub mu_s: f64,
    pub mu_h: f64,
    pub herald_spectrum: HeraldSpectrum,
    /// Cross-section parameter of the spectral correlation band, pixels. The
    /// band profile is `exp[-2 (x / alpha)^2]`.
    pub alpha_px: f64,
    pub jitter_ns_rms: f64,
    pub tof_delay_ns: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            pair_rate: 4e6,
            bg_rate: 6e4,
            mu_s: 3e-4,
            mu_h: 0.01,
            herald_spectrum: HeraldSpectrum::default(),
            alpha_px: 10.0,
            jitter_ns_rms: 5.0,
            tof_delay_ns: 25.0,
            duration_s: 10.0,
            seed: 0,
        }
    }
}

/// Rates the analysis should see for a given source, with the gate applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRates {
    /// True pair coincidences per second falling inside a gate of width tau
    /// centred on the time-of-flight delay.
    pub coincidences_gated: f64,
    /// All pairs with both photons detected, per second.
    pub coincidences_raw: f64,
    /// Mean singles rate per column in the signal stripe.
    pub s_s: f64,
    /// Mean singles rate per column in the herald stripe.
    pub s_h: f64,
    pub signal_total: f64,
    pub herald_total: f64,
    pub background_fraction: f64,
}

impl SourceParams {
    /// Source tuned to the reference experiment's operating point: about
    /// 10.6 gated coincidences/s, 221/s and 148/s singles per column in the
    /// signal and herald stripes, and a ~98% background fraction in the
    /// signal arm.
    pub fn reference_regime(tau_ns: f64) -> Self {
        let base = Self::default();
        let gate = gate_efficiency(base.jitter_ns_rms, tau_ns);
        let herald_total = 148.0 * 256.0;
        let signal_total = 221.0 * 256.0;
        let raw_coincidences = 10.6 / gate;
        let pair_rate = 4e6;
        let mu_h = herald_total / pair_rate;
        let mu_s = raw_coincidences / herald_total;
        Self {
            pair_rate,
            mu_h,
            mu_s,
            bg_rate: signal_total - mu_s * pair_rate,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("source.{field}: {msg}")));
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.pair_rate) {
            return bad("pair_rate_P", "must be a non-negative rate");
        }
        if !nonneg(self.bg_rate) {
            return bad("bg_rate_B", "must be a non-negative rate");
        }
        if !(0.0..=1.0).contains(&self.mu_s) {
            return bad("mu_s", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mu_h) {
            return bad("mu_h", "must lie in [0, 1]");
        }
        if !(self.alpha_px > 0.0 && self.alpha_px.is_finite()) {
            return bad("alpha_px", "must be positive");
        }
        if !nonneg(self.jitter_ns_rms) {
            return bad("jitter_ns_rms", "must be non-negative");
        }
        if !self.tof_delay_ns.is_finite() {
            return bad("tof_delay_ns", "must be finite");
        }
        if !nonneg(self.duration_s) {
            return bad("duration_s", "must be non-negative");
        }
        if !(self.herald_spectrum.fwhm_nm > 0.0) {
            return bad("herald_spectrum.fwhm_nm", "must be positive");
        }
        Ok(())
    }

    /// Closed-form expectations for this source seen through `cfg`.
    pub fn expected_rates(&self, cfg: &SpectrometerConfig) -> ExpectedRates {
        let coincidences_raw = self.pair_rate * self.mu_s * self.mu_h;
        let signal_total = self.pair_rate * self.mu_s + self.bg_rate;
        let herald_total = self.pair_rate * self.mu_h;
        ExpectedRates {
            coincidences_gated: coincidences_raw * gate_efficiency(self.jitter_ns_rms, cfg.tau_ns),
            coincidences_raw,
            s_s: signal_total / 256.0,
            s_h: herald_total / 256.0,
            signal_total,
            herald_total,
            background_fraction: if signal_total > 0.0 { self.bg_rate / signal_total } else { 0.0 },
        }
    }
}

/// Fraction of true pairs whose time difference lands in a gate of width
/// `tau_ns` centred on the mean delay, given independent Gaussian jitter of
/// `jitter_ns` on both detections.
pub fn gate_efficiency(jitter_ns: f64, tau_ns: f64) -> f64 {
    if jitter_ns == 0.0 {
        return 1.0;
    }
    let sigma_dt = std::f64::consts::SQRT_2 * jitter_ns;
    libm::erf(tau_ns / 2.0 / (std::f64::consts::SQRT_2 * sigma_dt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClusterSizeLaw {
    /// Geometric on 1, 2, ... with the given untruncated mean, cut at `max`.
    Geometric { mean: f64, max: u32 },
    Fixed { size: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TotLaw {
    /// Log-normal truncated to `[min_ns, max_ns]` and rounded to multiples
    /// of `step_ns` (the camera's ToT clock).
    LogNormal {
        median_ns: f64,
        sigma_ln: f64,
        min_ns: u16,
        max_ns: u16,
        step_ns: u16,
    },
    Fixed { tot_ns: u16 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensifierParams {
    pub cluster_size_law: ClusterSizeLaw,
    pub tot_law: TotLaw,
    pub timewalk_c0_ns: f64,
    pub timewalk_c1_ns: f64,
}

impl Default for IntensifierParams {
    fn default() -> Self {
        Self {
            cluster_size_law: ClusterSizeLaw::Geometric { mean: 4.0, max: 16 },
            tot_law: TotLaw::LogNormal {
                median_ns: 150.0,
                sigma_ln: 0.8,
                min_ns: 25,
                max_ns: 2000,
                step_ns: 25,
            },
            timewalk_c0_ns: 600.0,
            timewalk_c1_ns: 50.0,
        }
    }
}

impl IntensifierParams {
    /// Injected time-walk delay for a hit with the given ToT.
    #[inline]
    pub fn timewalk_ns(&self, tot_ns: f64) -> f64 {
        self.timewalk_c0_ns / (tot_ns + self.timewalk_c1_ns)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("intensifier.{field}: {msg}")));
        match self.cluster_size_law {
            ClusterSizeLaw::Geometric { mean, max } if !(mean >= 1.0) || max == 0 || max > 25 => {
                return bad("cluster_size_law", "geometric law needs mean >= 1 and 1 <= max <= 25")
            }
            ClusterSizeLaw::Fixed { size } if size == 0 || size > 25 => {
                return bad("cluster_size_law", "fixed size must lie in [1, 25]")
            }
            _ => {}
        }
        match self.tot_law {
            TotLaw::LogNormal {
                median_ns,
                sigma_ln,
                min_ns,
                max_ns,
                step_ns,
            } => {
                if !(median_ns > 0.0) || !(sigma_ln >= 0.0) || min_ns == 0 || min_ns > max_ns || step_ns == 0 {
                    return bad("tot_law", "log-normal needs median > 0, sigma >= 0, 0 < min <= max, step > 0");
                }
            }
            TotLaw::Fixed { tot_ns } if tot_ns == 0 => return bad("tot_law", "fixed ToT must be positive"),
            _ => {}
        }
        if !(self.timewalk_c0_ns >= 0.0) {
            return bad("timewalk_c0_ns", "must be non-negative");
        }
        if !(self.timewalk_c1_ns > 0.0) {
            return bad("timewalk_c1_ns", "must be positive");
        }
        Ok(())
    }

    fn draw_size<R: Rng>(&self, rng: &mut R) -> u32 {
        match self.cluster_size_law {
            ClusterSizeLaw::Fixed { size } => size,
            ClusterSizeLaw::Geometric { mean, max } => {
                let p = 1.0 / mean;
                if p >= 1.0 {
                    return 1;
                }
                // inverse CDF conditioned on n <= max
                let q = 1.0 - p;
                let cap = 1.0 - q.powi(max as i32);
                let u: f64 = rng.gen::<f64>() * cap;
                let n = ((1.0 - u).ln() / q.ln()).floor() as u32 + 1;
                n.clamp(1, max)
            }
        }
    }

    fn draw_tot<R: Rng>(&self, rng: &mut R) -> u16 {
        match self.tot_law {
            TotLaw::Fixed { tot_ns } => tot_ns,
            TotLaw::LogNormal {
                median_ns,
                sigma_ln,
                min_ns,
                max_ns,
                step_ns,
            } => {
                let normal = Normal::new(median_ns.ln(), sigma_ln).expect("validated");
                let lo = f64::from(min_ns) - 0.5 * f64::from(step_ns);
                let hi = f64::from(max_ns) + 0.5 * f64::from(step_ns);
                for _ in 0..64 {
                    let v = normal.sample(rng).exp();
                    if (lo..hi).contains(&v) {
                        let steps = (v / f64::from(step_ns)).round();
                        let tot = (steps * f64::from(step_ns)).clamp(f64::from(min_ns), f64::from(max_ns));
                        return tot as u16;
                    }
                }
                // pathological parameters: fall back to the nearer bound
                if median_ns < f64::from(min_ns) {
                    min_ns
                } else {
                    max_ns
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Pair(u64),
    Background,
}

/// Ground truth for one detected photon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub origin: Origin,
    pub arm: Arm,
    /// Arrival time without detector jitter: emission time, plus the
    /// time-of-flight delay for signal photons.
    pub true_time_ps: f64,
    /// Arrival time including jitter, before time-walk.
    pub detected_time_ps: f64,
    pub col: u16,
    pub row: u16,
    pub hits: u32,
}

/// Ground truth of a run. `hit_detection[k]` indexes `detections` for the
/// k-th hit of the sorted stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub detections: Vec<Detection>,
    pub hit_detection: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub events: EventFile,
    pub truth: GroundTruth,
}

/// A sorted piece of the output stream. Chunks arrive in time order and
/// concatenate to the full stream.
#[derive(Debug, Default)]
pub struct SimChunk {
    pub hits: Vec<PixelHit>,
    /// Parallel to `hits`; empty unless ground truth was requested.
    pub hit_detection: Vec<u32>,
}

/// Generates the hit stream for `src` with the given intensifier model.
pub fn simulate(src: &SourceParams, intf: &IntensifierParams, cfg: &SpectrometerConfig) -> Result<EventFile> {
    Ok(collect(src, Some(intf), cfg, false)?.events)
}

/// Same as [`simulate`], also returning per-hit ground truth.
pub fn simulate_with_truth(
    src: &SourceParams,
    intf: &IntensifierParams,
    cfg: &SpectrometerConfig,
) -> Result<Simulation> {
    collect(src, Some(intf), cfg, true)
}

/// Bypasses the intensifier: one hit per photon and no time-walk.
pub fn simulate_ideal(src: &SourceParams, cfg: &SpectrometerConfig) -> Result<EventFile> {
    Ok(collect(src, None, cfg, false)?.events)
}

pub fn simulate_ideal_with_truth(src: &SourceParams, cfg: &SpectrometerConfig) -> Result<Simulation> {
    collect(src, None, cfg, true)
}

fn collect(
    src: &SourceParams,
    intf: Option<&IntensifierParams>,
    cfg: &SpectrometerConfig,
    truth: bool,
) -> Result<Simulation> {
    let mut hits = Vec::new();
    let mut hit_detection = Vec::new();
    let detections = stream(src, intf, cfg, truth, |chunk| {
        hits.extend_from_slice(&chunk.hits);
        hit_detection.extend_from_slice(&chunk.hit_detection);
        Ok(())
    })?;
    Ok(Simulation {
        events: EventFile::new(config_digest(cfg), hits),
        truth: GroundTruth {
            detections,
            hit_detection,
        },
    })
}

/// Streams the run to `sink` in sorted chunks, keeping memory bounded to a
/// few slabs. Returns the detection ground truth (empty unless `truth`).
pub fn stream<F>(
    src: &SourceParams,
    intf: Option<&IntensifierParams>,
    cfg: &SpectrometerConfig,
    truth: bool,
    mut sink: F,
) -> Result<Vec<Detection>>
where
    F: FnMut(SimChunk) -> Result<()>,
{
    src.validate()?;
    cfg.validate()?;
    if let Some(i) = intf {
        i.validate()?;
    }
    let model = Model::new(src, intf, cfg)?;
    let duration_ps = src.duration_s * 1e12;
    let n_slabs = (duration_ps / SLAB_PS).ceil() as u64;
    let walk_max = intf.map_or(0.0, |i| i.timewalk_ns(0.0));
    let margin_ps = 1e9 + (64.0 * src.jitter_ns_rms + src.tof_delay_ns.abs() + walk_max) * PS_PER_NS;

    let mut detections = Vec::new();
    let mut pending: Vec<(PixelHit, u32)> = Vec::new();
    let mut slab = 0;
    while slab < n_slabs {
        let batch_end = (slab + SLABS_PER_BATCH).min(n_slabs);
        let outputs: Vec<SlabOutput> = (slab..batch_end)
            .into_par_iter()
            .map(|k| model.generate_slab(k, duration_ps))
            .collect();
        for (k, out) in (slab..batch_end).zip(outputs) {
            let base = detections.len() as u32;
            if truth {
                detections.extend_from_slice(&out.detections);
            }
            let fresh: Vec<(PixelHit, u32)> = out.hits.into_iter().map(|(h, d)| (h, d + base)).collect();
            pending = merge_sorted(pending, fresh);
            let cut = if k + 1 == n_slabs {
                u64::MAX
            } else {
                let t = (k + 1) as f64 * SLAB_PS - margin_ps;
                if t <= 0.0 {
                    0
                } else {
                    t as u64
                }
            };
            let split = pending.partition_point(|(h, _)| h.toa_ps < cut);
            if split > 0 {
                let rest = pending.split_off(split);
                let ready = std::mem::replace(&mut pending, rest);
                let mut chunk = SimChunk {
                    hits: Vec::with_capacity(ready.len()),
                    hit_detection: Vec::with_capacity(if truth { ready.len() } else { 0 }),
                };
                for (h, d) in ready {
                    chunk.hits.push(h);
                    if truth {
                        chunk.hit_detection.push(d);
                    }
                }
                sink(chunk)?;
            }
        }
        slab = batch_end;
    }
    Ok(detections)
}

fn merge_sorted(a: Vec<(PixelHit, u32)>, b: Vec<(PixelHit, u32)>) -> Vec<(PixelHit, u32)> {
    if a.is_empty() {
        return b;
    }
    if b.is_empty() {
        return a;
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if b[j].0.sort_key() < a[i].0.sort_key() {
            out.push(b[j]);
            j += 1;
        } else {
            out.push(a[i]);
            i += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

struct SlabOutput {
    hits: Vec<(PixelHit, u32)>,
    detections: Vec<Detection>,
}

/// Everything a slab needs, resolved once.
struct Model<'a> {
    src: &'a SourceParams,
    intf: Option<&'a IntensifierParams>,
    cfg: &'a SpectrometerConfig,
    herald_interior: RowRange,
    signal_interior: RowRange,
    spectrum: Normal<f64>,
    band_noise: Normal<f64>,
    jitter: Option<Normal<f64>>,
}

fn interior(r: RowRange) -> RowRange {
    // keep cluster spread (one pixel) inside the stripe
    if r.len() >= 3 {
        RowRange {
            start: r.start + 1,
            end: r.end - 1,
        }
    } else {
        r
    }
}

impl<'a> Model<'a> {
    fn new(src: &'a SourceParams, intf: Option<&'a IntensifierParams>, cfg: &'a SpectrometerConfig) -> Result<Self> {
        let hs = src.herald_spectrum;
        let sigma_nm = hs.fwhm_nm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        // exp[-2 (x/alpha)^2] is a Gaussian with sigma = alpha / 2
        let band_sigma = src.alpha_px / 2.0;
        let jitter = (src.jitter_ns_rms > 0.0)
            .then(|| Normal::new(0.0, src.jitter_ns_rms * PS_PER_NS))
            .transpose()
            .map_err(|e| Error::Config(format!("source.jitter_ns_rms: {e}")))?;
        if !(cfg.lambda_min_nm..=cfg.lambda_max_nm).contains(&hs.center_nm)
            && (hs.center_nm - cfg.lambda_min_nm).abs().min((hs.center_nm - cfg.lambda_max_nm).abs()) > 6.0 * sigma_nm
        {
            return Err(Error::Config(
                "source.herald_spectrum: spectrum does not overlap the imaged range".into(),
            ));
        }
        Ok(Self {
            src,
            intf,
            cfg,
            herald_interior: interior(cfg.herald_rows),
            signal_interior: interior(cfg.signal_rows),
            spectrum: Normal::new(hs.center_nm, sigma_nm).map_err(|e| Error::Config(e.to_string()))?,
            band_noise: Normal::new(0.0, band_sigma).map_err(|e| Error::Config(e.to_string()))?,
            jitter,
        })
    }

    fn rng(&self, slab: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.src.seed);
        rng.set_stream(slab);
        rng
    }

    fn draw_jitter(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.jitter.as_ref().map_or(0.0, |d| d.sample(rng))
    }

    /// Herald column drawn from the truncated marginal spectrum.
    fn draw_herald_column(&self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let lambda = self.spectrum.sample(rng);
            if (self.cfg.lambda_min_nm..=self.cfg.lambda_max_nm).contains(&lambda) {
                return self.cfg.column_at_wavelength(lambda);
            }
        }
    }

    fn draw_row(rng: &mut ChaCha8Rng, rows: RowRange) -> u16 {
        rng.gen_range(rows.start..=rows.end)
    }

    fn generate_slab(&self, slab: u64, duration_ps: f64) -> SlabOutput {
        let mut rng = self.rng(slab);
        let t0 = slab as f64 * SLAB_PS;
        let t1 = (t0 + SLAB_PS).min(duration_ps);
        let dt_s = (t1 - t0) / 1e12;
        let src = self.src;
        let p = src.pair_rate;
        let rates = [
            p * src.mu_h * src.mu_s,
            p * src.mu_h * (1.0 - src.mu_s),
            p * src.mu_s * (1.0 - src.mu_h),
            src.bg_rate,
        ];
        let counts: Vec<u64> = rates
            .iter()
            .map(|&r| {
                let mean = r * dt_s;
                if mean > 0.0 {
                    Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64
                } else {
                    0
                }
            })
            .collect();

        let mut dets: Vec<Detection> = Vec::with_capacity((2 * counts[0] + counts[1] + counts[2] + counts[3]) as usize);
        let mut pair_id = slab << 32;
        let tof_ps = src.tof_delay_ns * PS_PER_NS;
        let tof_ps = if src.tof_delay_ns.is_finite() { tof_ps } else { 0.0 };

        for (kind, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let emit = rng.gen_range(t0..t1);
                if kind == 3 {
                    let col = rng.gen_range(-0.5..(f64::from(MAX_PIXEL) + 0.5));
                    let row = Self::draw_row(&mut rng, self.signal_interior);
                    dets.push(Detection {
                        origin: Origin::Background,
                        arm: Arm::Signal,
                        true_time_ps: emit,
                        detected_time_ps: emit,
                        col: round_col(col),
                        row,
                        hits: 0,
                    });
                    continue;
                }
                let id = pair_id;
                pair_id += 1;
                let herald_col = self.draw_herald_column(&mut rng);
                if kind == 0 || kind == 1 {
                    let row = Self::draw_row(&mut rng, self.herald_interior);
                    let detected = emit + self.draw_jitter(&mut rng);
                    dets.push(Detection {
                        origin: Origin::Pair(id),
                        arm: Arm::Herald,
                        true_time_ps: emit,
                        detected_time_ps: detected,
                        col: round_col(herald_col),
                        row,
                        hits: 0,
                    });
                }
                if kind == 0 || kind == 2 {
                    let expected = self
                        .cfg
                        .expected_signal_column(herald_col.clamp(0.0, f64::from(MAX_PIXEL)))
                        .unwrap_or(f64::NAN);
                    let col = expected + self.band_noise.sample(&mut rng);
                    let row = Self::draw_row(&mut rng, self.signal_interior);
                    let jitter = self.draw_jitter(&mut rng);
                    // partner wavelength outside the imaged range: not detected
                    if !(-0.5..f64::from(MAX_PIXEL) + 0.5).contains(&col) {
                        continue;
                    }
                    dets.push(Detection {
                        origin: Origin::Pair(id),
                        arm: Arm::Signal,
                        true_time_ps: emit + tof_ps,
                        detected_time_ps: emit + tof_ps + jitter,
                        col: round_col(col),
                        row,
                        hits: 0,
                    });
                }
            }
        }
        dets.retain(|d| (0.0..duration_ps).contains(&d.detected_time_ps));

        let mut hits = Vec::with_capacity(dets.len() * 4);
        for (idx, det) in dets.iter_mut().enumerate() {
            let before = hits.len();
            match self.intf {
                None => {
                    let tot = IntensifierParams::default().draw_tot(&mut rng);
                    hits.push((
                        PixelHit::new(det.col, det.row, det.detected_time_ps.round() as u64, tot),
                        idx as u32,
                    ));
                }
                Some(intf) => expand_cluster(intf, det, idx as u32, &mut rng, &mut hits),
            }
            det.hits = (hits.len() - before) as u32;
        }
        hits.sort_unstable_by_key(|(h, d)| (h.sort_key(), *d));
        SlabOutput { hits, detections: dets }
    }
}

#[inline]
fn round_col(c: f64) -> u16 {
    c.round().clamp(0.0, f64::from(MAX_PIXEL)) as u16
}

const NEIGHBORS: [(i32, i32); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Spreads one photon over a connected blob of pixels. The brightest hit
/// lands on the photon's own pixel; later, dimmer hits grow outwards.
fn expand_cluster(
    intf: &IntensifierParams,
    det: &Detection,
    idx: u32,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<(PixelHit, u32)>,
) {
    let n = intf.draw_size(rng) as usize;
    let mut tots: Vec<u16> = (0..n).map(|_| intf.draw_tot(rng)).collect();
    tots.sort_unstable_by(|a, b| b.cmp(a));

    let mut pixels: Vec<(u16, u16)> = Vec::with_capacity(n);
    pixels.push((det.col, det.row));
    let mut attempts = 0;
    while pixels.len() < n && attempts < 64 * n {
        attempts += 1;
        let (c, r) = pixels[rng.gen_range(0..pixels.len())];
        let (dc, dr) = NEIGHBORS[rng.gen_range(0..NEIGHBORS.len())];
        let (nc, nr) = (i32::from(c) + dc, i32::from(r) + dr);
        if !(0..=i32::from(MAX_PIXEL)).contains(&nc) || !(0..=i32::from(MAX_PIXEL)).contains(&nr) {
            continue;
        }
        let p = (nc as u16, nr as u16);
        if !pixels.contains(&p) {
            pixels.push(p);
        }
    }
    for (&(col, row), &tot) in pixels.iter().zip(&tots) {
        let toa = det.detected_time_ps + intf.timewalk_ns(f64::from(tot)) * PS_PER_NS;
        out.push((PixelHit::new(col, row, toa.round() as u64, tot), idx));
    }
}
