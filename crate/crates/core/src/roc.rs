//! Receiver operating characteristics of a count-threshold detector.
//!
//! The run is cut into equal segments. A segment "detects" when its count
//! in the signal window reaches the threshold; the same count in a window
//! far from the coincidence peak gives the false-alarm rate.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coincidence::Match;
use crate::error::{Error, Result};
use crate::model::SelectionBand;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: u64,
    pub p_d: f64,
    pub p_d_sigma: f64,
    pub p_fa: f64,
    pub p_fa_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub center_ns: f64,
    pub width_ns: f64,
}

impl Window {
    fn bounds_ps(&self) -> (i64, i64) {
        let lo = ((self.center_ns - self.width_ns / 2.0) * 1e3).round() as i64;
        (lo, lo + (self.width_ns * 1e3).round() as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub segment_s: f64,
    pub n_segments: u64,
    pub signal_window: Option<Window>,
    pub false_window: Option<Window>,
    /// Poisson means behind a model curve.
    pub lambda_sig: Option<f64>,
    pub lambda_bg: Option<f64>,
}

/// Segmenting and window options for [`empirical_roc`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RocConfig {
    pub segment_s: f64,
    pub signal_window: Window,
    pub false_window: Window,
    /// Length of the run; segments are counted from time zero.
    pub duration_s: f64,
}

impl Default for RocConfig {
    fn default() -> Self {
        Self {
            segment_s: 0.5,
            signal_window: Window { center_ns: 25.0, width_ns: 20.0 },
            false_window: Window { center_ns: 75.0, width_ns: 20.0 },
            duration_s: 300.0,
        }
    }
}

impl RocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.segment_s > 0.0 && self.segment_s.is_finite()) {
            return Err(Error::Config("roc.segment_s: must be positive".into()));
        }
        if !(self.duration_s >= 2.0 * self.segment_s) {
            return Err(Error::Config("roc.duration_s: need at least two segments".into()));
        }
        for (name, w) in [("signal_window", self.signal_window), ("false_window", self.false_window)] {
            if !(w.width_ns > 0.0 && w.width_ns.is_finite() && w.center_ns.is_finite()) {
                return Err(Error::Config(format!("roc.{name}: width must be positive")));
            }
        }
        let (a, b) = (self.signal_window.bounds_ps(), self.false_window.bounds_ps());
        if a.0 < b.1 && b.0 < a.1 {
            return Err(Error::Config("roc: signal and false-alarm windows overlap".into()));
        }
        Ok(())
    }

    pub fn n_segments(&self) -> u64 {
        (self.duration_s / self.segment_s + 1e-9).floor() as u64
    }
}

/// Per-segment counts in the signal and false-alarm windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub signal: Vec<u64>,
    pub false_alarm: Vec<u64>,
}

pub fn segment_counts(matches: &[Match], cfg: &RocConfig, band: Option<&SelectionBand>) -> Result<SegmentCounts> {
    cfg.validate()?;
    let n = cfg.n_segments() as usize;
    let seg_ps = cfg.segment_s * 1e12;
    let (sw, fw) = (cfg.signal_window.bounds_ps(), cfg.false_window.bounds_ps());
    let (signal, false_alarm) = matches
        .par_chunks(1 << 16)
        .fold(
            || (vec![0u64; n], vec![0u64; n]),
            |(mut s, mut f), chunk| {
                for m in chunk {
                    if m.signal_toa_ps < 0 || band.is_some_and(|b| !b.contains(m.signal_col, m.herald_col)) {
                        continue;
                    }
                    let k = (m.signal_toa_ps as f64 / seg_ps) as usize;
                    if k >= n {
                        continue;
                    }
                    if (sw.0..sw.1).contains(&m.dt_ps) {
                        s[k] += 1;
                    } else if (fw.0..fw.1).contains(&m.dt_ps) {
                        f[k] += 1;
                    }
                }
                (s, f)
            },
        )
        .reduce(
            || (vec![0u64; n], vec![0u64; n]),
            |(mut a, mut b), (c, d)| {
                a.iter_mut().zip(&c).for_each(|(x, y)| *x += y);
                b.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                (a, b)
            },
        );
    Ok(SegmentCounts { signal, false_alarm })
}

fn binomial_sigma(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Fractions of segments reaching each threshold from 0 to one past the
/// largest count.
pub fn roc_from_counts(counts: &SegmentCounts, cfg: &RocConfig) -> RocCurve {
    let n = counts.signal.len() as u64;
    let max = counts.signal.iter().chain(&counts.false_alarm).copied().max().unwrap_or(0);
    let survival = |c: &[u64]| {
        let mut hist = vec![0u64; max as usize + 2];
        for &x in c {
            hist[x as usize] += 1;
        }
        let mut at_least = vec![0u64; hist.len()];
        let mut acc = 0;
        for k in (0..hist.len()).rev() {
            acc += hist[k];
            at_least[k] = acc;
        }
        at_least
    };
    let (sd, sf) = (survival(&counts.signal), survival(&counts.false_alarm));
    let frac = |x: u64| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    let points = (0..sd.len())
        .map(|k| {
            let (p_d, p_fa) = (frac(sd[k]), frac(sf[k]));
            RocPoint {
                threshold: k as u64,
                p_d,
                p_d_sigma: binomial_sigma(p_d, n.max(1)),
                p_fa,
                p_fa_sigma: binomial_sigma(p_fa, n.max(1)),
            }
        })
        .collect();
    RocCurve {
        points,
        segment_s: cfg.segment_s,
        n_segments: n,
        signal_window: Some(cfg.signal_window),
        false_window: Some(cfg.false_window),
        lambda_sig: None,
        lambda_bg: None,
    }
}

/// ROC from matched coincidences, optionally restricted to a selection band.
pub fn empirical_roc(matches: &[Match], cfg: &RocConfig, band: Option<&SelectionBand>) -> Result<RocCurve> {
    Ok(roc_from_counts(&segment_counts(matches, cfg, band)?, cfg))
}

/// Poisson model: `P_d(k) = P[Pois(λ_sig + λ_bg) >= k]`,
/// `P_fa(k) = P[Pois(λ_bg) >= k]` for each `k` in `k_range`. With a
/// segment count the points carry binomial errors for that many trials.
pub fn model_roc(lambda_sig: f64, lambda_bg: f64, k_range: std::ops::RangeInclusive<u64>, n_segments: Option<u64>) -> Result<RocCurve> {
    if !(lambda_sig >= 0.0 && lambda_bg >= 0.0) || !(lambda_sig + lambda_bg).is_finite() {
        return Err(Error::Config("roc model: Poisson means must be finite and non-negative".into()));
    }
    let n = n_segments.unwrap_or(0);
    let sigma = |p: f64| if n == 0 { 0.0 } else { binomial_sigma(p, n) };
    let points = k_range
        .map(|k| {
            let p_d = poisson_sf(k, lambda_sig + lambda_bg);
            let p_fa = poisson_sf(k, lambda_bg);
            RocPoint {
                threshold: k,
                p_d,
                p_d_sigma: sigma(p_d),
                p_fa,
                p_fa_sigma: sigma(p_fa),
            }
        })
        .collect();
    Ok(RocCurve {
        points,
        segment_s: 0.0,
        n_segments: n,
        signal_window: None,
        false_window: None,
        lambda_sig: Some(lambda_sig),
        lambda_bg: Some(lambda_bg),
    })
}

impl RocCurve {
    /// Point whose false-alarm probability is closest to `target` on a log
    /// scale; points with zero false alarms count as infinitely far.
    pub fn operating_point(&self, target: f64) -> Option<RocPoint> {
        self.points
            .iter()
            .filter(|p| p.p_fa > 0.0)
            .min_by(|a, b| {
                let d = |p: &RocPoint| (p.p_fa.ln() - target.ln()).abs();
                d(a).total_cmp(&d(b))
            })
            .copied()
    }

    /// Best detection probability among thresholds with `P_fa <= target`.
    pub fn pd_at_pfa(&self, target: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.p_fa <= target)
            .map(|p| p.p_d)
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "p_d", "p_d_sigma", "p_fa", "p_fa_sigma"])?;
        for p in &self.points {
            w.write_record([
                p.threshold.to_string(),
                p.p_d.to_string(),
                p.p_d_sigma.to_string(),
                p.p_fa.to_string(),
                p.p_fa_sigma.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest deviation of an empirical curve from a model curve at shared
/// thresholds, in binomial standard deviations of the model probability
/// for the empirical segment count. The deviation unit never drops below
/// one segment, the resolution of the empirical fractions.
pub fn max_deviation_sigma(empirical: &RocCurve, model: &RocCurve) -> f64 {
    let n = empirical.n_segments.max(1);
    let unit = |p: f64| binomial_sigma(p, n).max(1.0 / n as f64);
    empirical
        .points
        .iter()
        .filter_map(|e| model.points.iter().find(|m| m.threshold == e.threshold).map(|m| (e, m)))
        .map(|(e, m)| ((e.p_d - m.p_d).abs() / unit(m.p_d)).max((e.p_fa - m.p_fa).abs() / unit(m.p_fa)))
        .fold(0.0, f64::max)
}

/// Stirling-series remainder `ln n! - [(n + 1/2) ln n - n + ln √(2π)]`.
fn stirlerr(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        return libm::lgamma(n + 1.0) - (n + 0.5) * n.ln() + n - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    let nn = n * n;
    if n > 500.0 {
        return (S0 - S1 / nn) / n;
    }
    if n > 80.0 {
        return (S0 - (S1 - S2 / nn) / nn) / n;
    }
    if n > 35.0 {
        return (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n;
    }
    (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
}

/// Deviance term `x ln(x/m) + m - x`, accurate when `x ≈ m`.
fn bd0(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        for j in 1..1000 {
            ej *= v2;
            let s1 = s + ej / f64::from(2 * j + 1);
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        return s;
    }
    x * (x / m).ln() + m - x
}

/// Poisson probability mass `P[X = k]`.
pub fn poisson_pmf(k: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if k == 0 {
        return (-lambda).exp();
    }
    let x = k as f64;
    (-stirlerr(x) - bd0(x, lambda)).exp() / (2.0 * std::f64::consts::PI * x).sqrt()
}

/// Upper tail `P[X >= k]` of a Poisson variable with mean `lambda`.
///
/// Sums the pmf away from the mode in the direction of the smaller tail,
/// so no cancellation occurs where the result is small.
pub fn poisson_sf(k: u64, lambda: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if lambda == 0.0 {
        return 0.0;
    }
    if k as f64 > lambda {
        let mut term = poisson_pmf(k, lambda);
        let mut sum = 0.0;
        let mut j = k as f64;
        while term > 0.0 && term > 1e-17 * sum {
            sum += term;
            j += 1.0;
            term *= lambda / j;
        }
        sum
    } else {
        // 1 - P[X <= k - 1]; the lower tail is at most about one half here
        let mut term = poisson_pmf(k - 1, lambda);
        let mut sum = 0.0;
        let mut j = (k - 1) as f64;
        while term > 0.0 && term > 1e-17 * sum {
            sum += term;
            if j == 0.0 {
                break;
            }
            term *= j / lambda;
            j -= 1.0;
        }
        (1.0 - sum).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Log-space summation with the library log-gamma, as an independent check.
    fn sf_oracle(k: u64, lambda: f64) -> f64 {
        let ln_pmf = |j: u64| j as f64 * lambda.ln() - lambda - libm::lgamma(j as f64 + 1.0);
        if k as f64 > lambda {
            let mut s = 0.0;
            let mut j = k;
            loop {
                let t = ln_pmf(j).exp();
                s += t;
                if t < 1e-18 * s || t == 0.0 {
                    return s;
                }
                j += 1;
            }
        } else {
            1.0 - (0..k).map(|j| ln_pmf(j).exp()).sum::<f64>()
        }
    }

    #[test]
    fn analytic_values() {
        assert_relative_eq!(poisson_sf(1, 1.0), 1.0 - (-1f64).exp(), max_relative = 1e-14);
        assert!((poisson_sf(1, 1.0) - 0.63212).abs() < 1e-5);
        assert_eq!(poisson_sf(0, 5.0), 1.0);
        assert_eq!(poisson_sf(3, 0.0), 0.0);
        assert_relative_eq!(poisson_pmf(3, 2.0), 8.0 / 6.0 * (-2f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn matches_oracle_on_grid() {
        for &lambda in &[0.3, 1.0, 4.4, 21.4, 100.0, 1e3, 1e4] {
            for &k in &[1u64, 2, 5, 10, 30, 60, 120, 900, 1100, 9_800, 10_300] {
                let a = poisson_sf(k, lambda);
                let b = sf_oracle(k, lambda);
                if b > 1e-250 {
                    assert_relative_eq!(a, b, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn deep_tail_is_finite() {
        let p = poisson_sf(100_000, 1e4);
        assert!(p >= 0.0 && p < 1e-300);
        assert!(poisson_sf(10_500, 1e4) > 0.0);
    }

    proptest! {
        #[test]
        fn sf_differences_are_pmf(k in 0u64..2000, lambda in 0.01f64..1e4) {
            let d = poisson_sf(k, lambda) - poisson_sf(k + 1, lambda);
            let pmf = poisson_pmf(k, lambda);
            prop_assert!((d - pmf).abs() <= 1e-12 + 1e-8 * pmf);
        }

        #[test]
        fn sf_nonincreasing(k in 0u64..500, lambda in 0.0f64..300.0) {
            prop_assert!(poisson_sf(k + 1, lambda) <= poisson_sf(k, lambda));
        }
    }

    #[test]
    fn model_edges() {
        let c = model_roc(3.0, 0.0, 0..=10, None).unwrap();
        assert!(c.points[1..].iter().all(|p| p.p_fa == 0.0));
        assert_eq!((c.points[0].p_d, c.points[0].p_fa), (1.0, 1.0));
        assert!(model_roc(-1.0, 0.0, 0..=3, None).is_err());
    }

    #[test]
    fn reference_operating_points() {
        let tau_ss_sh = 20e-9 * 221.0 * 148.0;
        let seg = 0.5;
        let eta = crate::theory::eta(14.0, 10.0);
        let ts = model_roc(eta * 10.6 * seg, 244.0 * 14.0 * tau_ss_sh * seg, 0..=200, None).unwrap();
        let t = model_roc(10.6 * seg, 65_536.0 * tau_ss_sh * seg, 0..=200, None).unwrap();
        let (a, b) = (ts.operating_point(1e-3).unwrap(), t.operating_point(1e-3).unwrap());
        assert!((a.p_d - 0.5).abs() < 0.1, "{a:?}");
        assert!((b.p_d - 0.04).abs() < 0.1, "{b:?}");
        for g in [1e-4, 1e-3, 1e-2, 0.1, 0.5] {
            assert!(ts.pd_at_pfa(g) >= t.pd_at_pfa(g));
        }
    }

    fn m(toa_s: f64, dt_ns: f64) -> Match {
        Match {
            signal_index: 0,
            herald_index: 0,
            signal_col: 0,
            herald_col: 0,
            signal_toa_ps: (toa_s * 1e12) as i64,
            dt_ps: (dt_ns * 1e3) as i64,
        }
    }

    #[test]
    fn empirical_counts() {
        let cfg = RocConfig { duration_s: 2.0, ..RocConfig::default() };
        let matches = [m(0.1, 25.0), m(0.2, 30.0), m(0.7, 74.0), m(1.2, 50.0), m(1.9, 20.0), m(2.5, 25.0)];
        let c = segment_counts(&matches, &cfg, None).unwrap();
        assert_eq!(c.signal, [2, 0, 0, 1]);
        assert_eq!(c.false_alarm, [0, 1, 0, 0]);
        let r = roc_from_counts(&c, &cfg);
        assert_eq!((r.points[0].p_d, r.points[0].p_fa), (1.0, 1.0));
        assert_eq!(r.points[1].p_d, 0.5);
        assert_eq!(r.points[2].p_d, 0.25);
        let last = r.points.last().unwrap();
        assert_eq!((last.p_d, last.p_fa), (0.0, 0.0));
        assert!(r.points.windows(2).all(|w| w[1].p_d <= w[0].p_d && w[1].p_fa <= w[0].p_fa));
    }

    #[test]
    fn bad_configs() {
        let overlap = RocConfig {
            false_window: Window { center_ns: 40.0, width_ns: 20.0 },
            ..RocConfig::default()
        };
        assert!(matches!(empirical_roc(&[], &overlap, None), Err(Error::Config(_))));
        let short = RocConfig { duration_s: 0.7, ..RocConfig::default() };
        assert!(empirical_roc(&[], &short, None).is_err());
    }

    #[test]
    fn poisson_segments_converge_to_model() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (ls, lb) = (4.0, 1.5);
        let n = 4000;
        let d = Poisson::new(ls + lb).unwrap();
        let f = Poisson::new(lb).unwrap();
        let counts = SegmentCounts {
            signal: (0..n).map(|_| d.sample(&mut rng) as u64).collect(),
            false_alarm: (0..n).map(|_| f.sample(&mut rng) as u64).collect(),
        };
        let emp = roc_from_counts(&counts, &RocConfig::default());
        let model = model_roc(ls, lb, 0..=40, Some(n as u64)).unwrap();
        assert!(max_deviation_sigma(&emp, &model) < 4.0);
    }

    #[test]
    fn csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let c = model_roc(1.0, 0.5, 0..=3, Some(10)).unwrap();
        c.write_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("threshold,p_d,p_d_sigma,p_fa,p_fa_sigma\n0,1,0,1,0\n"));
    }
}
