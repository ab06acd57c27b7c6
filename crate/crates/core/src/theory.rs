//! Closed-form rate model of temporal and spectro-temporal coincidence
//! detection.
//!
//! With true pair coincidences at rate `C` and uniform per-column singles
//! `S_s`, `S_h`, a gate `τ` over `N` column pairs accumulates accidentals
//! at `NτS_sS_h`. A selection band keeps `N'` pairs and the fraction
//! `η = erf(w / (√2 α))` of true coincidences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SelectionBand, SpectrometerConfig, COLUMN_PAIRS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryParams {
    /// True pair coincidence rate, per second.
    #[serde(rename = "C")]
    pub c: f64,
    /// Signal singles per column per second.
    #[serde(rename = "S_s")]
    pub s_s: f64,
    /// Herald singles per column per second.
    #[serde(rename = "S_h")]
    pub s_h: f64,
    pub tau_s: f64,
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "N_prime")]
    pub n_prime: f64,
    pub w_px: f64,
    pub alpha_px: f64,
    #[serde(rename = "T_s")]
    pub t_s: f64,
    /// Pair generation rate.
    #[serde(rename = "P")]
    pub p: f64,
    /// Background photons per second in the signal arm.
    #[serde(rename = "B")]
    pub b: f64,
    pub mu_s: f64,
    pub mu_h: f64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self {
            c: 10.6,
            s_s: 221.0,
            s_h: 148.0,
            tau_s: 20e-9,
            n: COLUMN_PAIRS as f64,
            n_prime: 4636.0,
            w_px: 19.0,
            alpha_px: 10.0,
            t_s: 200.0,
            p: 4e6,
            b: 6e4,
            mu_s: 3e-4,
            mu_h: 0.01,
        }
    }
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("C", self.c),
            ("S_s", self.s_s),
            ("S_h", self.s_h),
            ("tau_s", self.tau_s),
            ("N", self.n),
            ("N_prime", self.n_prime),
            ("w_px", self.w_px),
            ("alpha_px", self.alpha_px),
            ("T_s", self.t_s),
            ("P", self.p),
            ("B", self.b),
            ("mu_s", self.mu_s),
            ("mu_h", self.mu_h),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || (v.is_infinite() && name != "w_px") {
                return Err(Error::Config(format!("theory.{name}: must be finite and non-negative")));
            }
        }
        if self.n_prime > self.n {
            return Err(Error::Config("theory.N_prime: must not exceed N".into()));
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        eta(self.w_px, self.alpha_px)
    }

    /// Accidental rate without spectral filtering.
    pub fn background_rate(&self) -> f64 {
        self.n * self.tau_s * self.s_s * self.s_h
    }
}

/// Fraction of a Gaussian band of parameter `alpha_px` (profile
/// `exp[-2 (x/α)^2]`) inside a window of width `w_px`.
pub fn eta(w_px: f64, alpha_px: f64) -> f64 {
    if w_px <= 0.0 {
        return 0.0;
    }
    if alpha_px <= 0.0 {
        return 1.0;
    }
    libm::erf(w_px / (std::f64::consts::SQRT_2 * alpha_px))
}

/// Temporal-only `(SBR_t, SNR_t)`.
pub fn sbr_snr_t(p: &TheoryParams) -> (f64, f64) {
    let sbr = p.c / p.background_rate();
    let snr = if p.c == 0.0 { 0.0 } else { (sbr * p.c * p.t_s / (sbr + 2.0)).sqrt() };
    (sbr, snr)
}

/// Spectro-temporal `(SBR_ts, SNR_ts)`.
pub fn sbr_snr_ts(p: &TheoryParams) -> (f64, f64) {
    sbr_snr_ts_with(p, p.eta())
}

/// As [`sbr_snr_ts`] with an explicit band efficiency.
pub fn sbr_snr_ts_with(p: &TheoryParams, eta: f64) -> (f64, f64) {
    if eta == 0.0 || p.c == 0.0 {
        return (0.0, 0.0);
    }
    let (sbr_t, _) = sbr_snr_t(p);
    let sbr = eta * p.c / (p.n_prime * p.tau_s * p.s_s * p.s_h);
    let snr = (sbr_t * eta * p.c * p.t_s / (sbr_t + 2.0 * p.n_prime / (eta * p.n))).sqrt();
    (sbr, snr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Enhancements {
    pub e_sbr: f64,
    pub e_snr: f64,
    /// Factor by which the acquisition time shrinks at equal SNR.
    pub dat_reduction: f64,
}

pub fn enhancements(p: &TheoryParams) -> Enhancements {
    enhancements_with(p, p.eta())
}

pub fn enhancements_with(p: &TheoryParams, eta: f64) -> Enhancements {
    let (sbr_t, _) = sbr_snr_t(p);
    let e_sbr = eta * p.n / p.n_prime;
    let e_snr = (eta * (sbr_t + 2.0) / (sbr_t + 2.0 * p.n_prime / (eta * p.n))).sqrt();
    Enhancements {
        e_sbr,
        e_snr,
        dat_reduction: e_snr * e_snr,
    }
}

/// Acquisition-time reduction written out in rates:
/// `η² (C + 2NτS_sS_h) / (ηC + 2N'τS_sS_h)`.
pub fn dat_reduction_from_rates(p: &TheoryParams) -> f64 {
    let eta = p.eta();
    let k = p.tau_s * p.s_s * p.s_h;
    eta * eta * (p.c + 2.0 * p.n * k) / (eta * p.c + 2.0 * p.n_prime * k)
}

/// Low-background limit of the SNR enhancement, `η √(N/N')`.
pub fn e_snr_limit(p: &TheoryParams) -> f64 {
    p.eta() * (p.n / p.n_prime).sqrt()
}

/// How the selection-band cell count `N'` is obtained for a width.
#[derive(Debug, Clone, PartialEq)]
pub enum CellCount {
    /// Count cells of the band on the sensor.
    Exact(SpectrometerConfig),
    /// `N' = l w`.
    Linear { l: f64 },
}

impl CellCount {
    pub fn n_prime(&self, w: f64) -> Result<f64> {
        match self {
            CellCount::Exact(cfg) => Ok(SelectionBand::new(cfg, w)?.cell_count() as f64),
            CellCount::Linear { l } => Ok((l * w).min(COLUMN_PAIRS as f64)),
        }
    }
}

/// One row of a band-width scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthPoint {
    pub w: u32,
    pub n_prime: f64,
    pub eta: f64,
    pub e_sbr: f64,
    pub e_snr: f64,
    pub sbr_ts: f64,
    pub snr_ts: f64,
}

/// Enhancements for each integer width in `w_min..=w_max`.
pub fn sweep_width(p: &TheoryParams, w_min: u32, w_max: u32, cells: &CellCount) -> Result<Vec<WidthPoint>> {
    if w_min == 0 || w_min > w_max {
        return Err(Error::Config(format!("width range {w_min}..={w_max}: need 1 <= min <= max")));
    }
    (w_min..=w_max)
        .map(|w| {
            let q = TheoryParams {
                w_px: f64::from(w),
                n_prime: cells.n_prime(f64::from(w))?,
                ..p.clone()
            };
            let e = enhancements(&q);
            let (sbr_ts, snr_ts) = sbr_snr_ts(&q);
            Ok(WidthPoint {
                w,
                n_prime: q.n_prime,
                eta: q.eta(),
                e_sbr: e.e_sbr,
                e_snr: e.e_snr,
                sbr_ts,
                snr_ts,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalWidth {
    pub w: u32,
    pub e_snr: f64,
    /// False when even the best width does not improve the SNR.
    pub improves_snr: bool,
}

/// Integer width maximising `E_SNR`; ties go to the smaller width.
pub fn optimal_width(p: &TheoryParams, w_min: u32, w_max: u32, cells: &CellCount) -> Result<OptimalWidth> {
    let scan = sweep_width(p, w_min, w_max, cells)?;
    let best = scan.iter().fold(scan[0], |b, x| if x.e_snr > b.e_snr { *x } else { b });
    Ok(OptimalWidth {
        w: best.w,
        e_snr: best.e_snr,
        improves_snr: best.e_snr > 1.0,
    })
}

/// Number of resolvable spectral bins along a band of `n_prime` cells and
/// width `w`: band length over the width, rounded down.
pub fn spectral_modes(n_prime: f64, w: f64) -> u32 {
    (n_prime / w / w).floor() as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub t_s: f64,
    pub snr_t: f64,
    pub snr_ts: f64,
    pub ratio: f64,
}

pub fn snr_vs_time(p: &TheoryParams, times: &[f64]) -> Vec<SnrPoint> {
    times
        .iter()
        .map(|&t_s| {
            let q = TheoryParams { t_s, ..p.clone() };
            let (_, snr_t) = sbr_snr_t(&q);
            let (_, snr_ts) = sbr_snr_ts(&q);
            SnrPoint {
                t_s,
                snr_t,
                snr_ts,
                ratio: snr_ts / snr_t,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalComparison {
    pub sbr_c: f64,
    pub snr_c: f64,
    pub sbr_q: f64,
    pub snr_q: f64,
    /// Large-background approximations.
    pub sbr_c_approx: f64,
    pub snr_c_approx: f64,
    pub sbr_q_approx: f64,
    pub snr_q_approx: f64,
    pub sbr_ratio: f64,
    pub snr_ratio: f64,
    /// Quantum figures after spectral filtering at the parameters' width.
    pub sbr_q_spectral: f64,
    pub snr_q_spectral: f64,
    pub sbr_ratio_spectral: f64,
    pub snr_ratio_spectral: f64,
    /// Whether `B >> μ_s P`, so the approximations apply.
    pub approximations_valid: bool,
}

/// Signal-only detection against heralded detection for a source of `P`
/// pairs per second with arm efficiencies `μ_s`, `μ_h` and background `B`.
/// Ratios with a zero classical denominator are infinite.
pub fn classical_comparison(p: &TheoryParams) -> ClassicalComparison {
    let (mu_s, mu_h, pr, b, tau, t) = (p.mu_s, p.mu_h, p.p, p.b, p.tau_s, p.t_s);
    let signal = mu_s * pr;
    let div = |a: f64, b: f64| if b == 0.0 { f64::INFINITY } else { a / b };

    let sbr_c = div(signal, b);
    let snr_c = div(signal * t, ((signal + 2.0 * b) * t).sqrt());
    let sbr_q = div(mu_s, (signal + b) * tau);
    let snr_q = div(mu_s * mu_h * pr * t, (mu_s * mu_h * pr * t + 2.0 * (mu_s * mu_h * pr * pr + mu_h * pr * b) * tau * t).sqrt());

    let sbr_c_approx = div(signal, b);
    let snr_c_approx = signal * div(t, 2.0 * b).sqrt();
    let sbr_q_approx = div(mu_s, b * tau);
    let snr_q_approx = mu_s * div(mu_h * pr * t, mu_s + 2.0 * b * tau).sqrt();

    // the temporal SBR of the heralded scheme feeds the enhancement factors
    let q = TheoryParams {
        c: mu_s * mu_h * pr,
        s_s: (signal + b) / p.n,
        s_h: mu_h * pr / p.n,
        ..p.clone()
    };
    let e = enhancements(&q);
    let sbr_q_spectral = sbr_q * e.e_sbr;
    let snr_q_spectral = snr_q * e.e_snr;
    ClassicalComparison {
        sbr_c,
        snr_c,
        sbr_q,
        snr_q,
        sbr_c_approx,
        snr_c_approx,
        sbr_q_approx,
        snr_q_approx,
        sbr_ratio: div(sbr_q, sbr_c),
        snr_ratio: div(snr_q, snr_c),
        sbr_q_spectral,
        snr_q_spectral,
        sbr_ratio_spectral: div(sbr_q_spectral, sbr_c),
        snr_ratio_spectral: div(snr_q_spectral, snr_c),
        approximations_valid: b > 10.0 * signal,
    }
}

/// Every closed-form quantity for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub params: TheoryParams,
    pub eta: f64,
    pub background_rate: f64,
    pub background_rate_band: f64,
    pub sbr_t: f64,
    pub snr_t: f64,
    pub sbr_ts: f64,
    pub snr_ts: f64,
    pub enhancements: Enhancements,
    pub e_snr_limit: f64,
    pub spectral_modes: u32,
    pub classical: ClassicalComparison,
}

pub fn report(p: &TheoryParams) -> Result<TheoryReport> {
    p.validate()?;
    let (sbr_t, snr_t) = sbr_snr_t(p);
    let (sbr_ts, snr_ts) = sbr_snr_ts(p);
    Ok(TheoryReport {
        params: p.clone(),
        eta: p.eta(),
        background_rate: p.background_rate(),
        background_rate_band: p.n_prime * p.tau_s * p.s_s * p.s_h,
        sbr_t,
        snr_t,
        sbr_ts,
        snr_ts,
        enhancements: enhancements(p),
        e_snr_limit: e_snr_limit(p),
        spectral_modes: spectral_modes(p.n_prime, p.w_px),
        classical: classical_comparison(p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn eta_values() {
        assert_eq!(eta(0.0, 10.0), 0.0);
        assert_eq!(eta(f64::INFINITY, 10.0), 1.0);
        assert!((eta(19.0, 10.0) - 0.9427).abs() < 5e-4);
        // erf(1) to double precision
        assert!((eta(std::f64::consts::SQRT_2, 1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
    }

    #[test]
    fn default_constants() {
        let p = TheoryParams::default();
        let (sbr_t, snr_t) = sbr_snr_t(&p);
        assert!((sbr_t - 0.247).abs() < 1e-3);
        assert!((snr_t - 15.3).abs() < 0.05);
        let (sbr_ts, snr_ts) = sbr_snr_ts(&p);
        assert!((sbr_ts - 3.29).abs() < 0.01);
        assert!((snr_ts - 35.2).abs() < 0.1);
        let e = enhancements(&p);
        assert!((e.e_sbr - 13.3).abs() < 0.05);
        assert!((e.e_snr - 2.31).abs() < 0.01);
        assert!((e.dat_reduction - 5.33).abs() < 0.05);
    }

    #[test]
    fn zero_cases() {
        let p = TheoryParams { c: 0.0, ..TheoryParams::default() };
        assert_eq!(sbr_snr_t(&p), (0.0, 0.0));
        let p = TheoryParams { w_px: 0.0, ..TheoryParams::default() };
        assert_eq!(sbr_snr_ts(&p), (0.0, 0.0));
    }

    #[test]
    fn narrow_band_enhancement() {
        let p = TheoryParams {
            w_px: 1.0,
            n_prime: 244.0,
            ..TheoryParams::default()
        };
        assert!((enhancements(&p).e_sbr - 21.4).abs() < 0.05);
    }

    #[test]
    fn low_background_limit() {
        let mut p = TheoryParams::default();
        // SBR_t = 1e-6 via a large accidental rate
        p.s_s = p.c / (1e-6 * p.n * p.tau_s * p.s_h);
        assert_relative_eq!(sbr_snr_t(&p).0, 1e-6, max_relative = 1e-12);
        assert_relative_eq!(enhancements(&p).e_snr, e_snr_limit(&p), max_relative = 1e-3);
    }

    #[test]
    fn optimum_near_nineteen() {
        let p = TheoryParams::default();
        let best = optimal_width(&p, 1, 60, &CellCount::Linear { l: 244.0 }).unwrap();
        assert!((16..=22).contains(&best.w), "{best:?}");
        assert!((best.e_snr - 2.31).abs() < 0.01);
        assert!(best.improves_snr);
        let exact = optimal_width(&p, 1, 60, &CellCount::Exact(SpectrometerConfig::default())).unwrap();
        assert!((14..=24).contains(&exact.w), "{exact:?}");
    }

    #[test]
    fn sharp_band_prefers_smallest_width() {
        let p = TheoryParams { alpha_px: 1e-9, ..TheoryParams::default() };
        assert_eq!(optimal_width(&p, 3, 30, &CellCount::Linear { l: 244.0 }).unwrap().w, 3);
    }

    #[test]
    fn bright_regime_flagged() {
        let mut p = TheoryParams::default();
        p.s_s = p.c / (1e3 * p.n * p.tau_s * p.s_h);
        let best = optimal_width(&p, 1, 30, &CellCount::Linear { l: 244.0 }).unwrap();
        assert!(best.e_snr <= 1.0);
        assert!(!best.improves_snr);
    }

    #[test]
    fn e_snr_below_one_past_threshold() {
        // scanning SBR_t: E_SNR < 1 sets in near (2/η)|(η² − N'/N)/(1 − η)|
        let base = TheoryParams::default();
        let eta = base.eta();
        let r = base.n_prime / base.n;
        let threshold = 2.0 / eta * ((eta * eta - r) / (1.0 - eta)).abs();
        let at = |sbr_t: f64| {
            let mut p = base.clone();
            p.s_s = p.c / (sbr_t * p.n * p.tau_s * p.s_h);
            enhancements(&p).e_snr
        };
        assert!(at(threshold * 0.99) > 1.0);
        assert!(at(threshold * 1.01) < 1.0);
    }

    #[test]
    fn spectral_mode_count() {
        let n = CellCount::Exact(SpectrometerConfig::default()).n_prime(19.0).unwrap();
        assert!((12..=14).contains(&spectral_modes(n, 19.0)));
        assert_eq!(spectral_modes(244.0 * 19.0, 19.0), 12);
    }

    #[test]
    fn classical_appendix_constants() {
        let c = classical_comparison(&TheoryParams::default());
        assert!((c.sbr_ratio - 12.5).abs() < 0.5, "{c:?}");
        assert!((c.snr_ratio - 0.33).abs() < 0.03, "{c:?}");
        assert_relative_eq!(c.sbr_c, 0.02, max_relative = 1e-12);
        assert!((c.snr_c - 49.0).abs() < 0.5);
        assert!(c.approximations_valid);
    }

    #[test]
    fn classical_without_background() {
        let c = classical_comparison(&TheoryParams { b: 0.0, ..TheoryParams::default() });
        assert!(c.sbr_c.is_infinite());
        assert!(c.sbr_q.is_finite());
        assert!(!c.approximations_valid);
    }

    #[test]
    fn report_round_trip() {
        let r = report(&TheoryParams::default()).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"N_prime\":4636"));
        let back: TheoryReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(report(&TheoryParams { n_prime: 1e6, ..TheoryParams::default() }).is_err());
    }

    fn arb_params() -> impl Strategy<Value = TheoryParams> {
        (0.1f64..100.0, 1.0f64..1e3, 1.0f64..1e3, 1e-9f64..1e-7, 10.0f64..65536.0, 1.0f64..60.0, 1.0f64..30.0, 1.0f64..1e4)
            .prop_map(|(c, s_s, s_h, tau_s, n_prime, w_px, alpha_px, t_s)| TheoryParams {
                c,
                s_s,
                s_h,
                tau_s,
                n_prime,
                w_px,
                alpha_px,
                t_s,
                ..TheoryParams::default()
            })
    }

    proptest! {
        #[test]
        fn full_band_identity(p in arb_params()) {
            let q = TheoryParams { n_prime: p.n, ..p };
            let (a, b) = sbr_snr_t(&q);
            let (c, d) = sbr_snr_ts_with(&q, 1.0);
            prop_assert!((a - c).abs() <= 1e-12 * a.abs());
            prop_assert!((b - d).abs() <= 1e-12 * b.abs());
        }

        #[test]
        fn dat_identity(p in arb_params()) {
            let e = enhancements(&p);
            prop_assert!((e.e_snr * e.e_snr - e.dat_reduction).abs() <= 1e-12 * e.dat_reduction);
            let r = dat_reduction_from_rates(&p);
            prop_assert!((r - e.dat_reduction).abs() <= 1e-10 * r);
        }

        #[test]
        fn snr_scales_with_root_time(p in arb_params()) {
            let q = TheoryParams { t_s: 4.0 * p.t_s, ..p.clone() };
            prop_assert!((sbr_snr_t(&q).1 / sbr_snr_t(&p).1 - 2.0).abs() < 1e-12);
            prop_assert!((sbr_snr_ts(&q).1 / sbr_snr_ts(&p).1 - 2.0).abs() < 1e-12);
        }

        #[test]
        fn sbr_independent_of_time(p in arb_params()) {
            let q = TheoryParams { t_s: 10.0 * p.t_s, ..p.clone() };
            prop_assert_eq!(sbr_snr_t(&q).0.to_bits(), sbr_snr_t(&p).0.to_bits());
            prop_assert_eq!(sbr_snr_ts(&q).0.to_bits(), sbr_snr_ts(&p).0.to_bits());
        }

        #[test]
        fn e_sbr_decreasing_in_width(alpha in 1.0f64..30.0, w in 1u32..200) {
            let p = TheoryParams { alpha_px: alpha, ..TheoryParams::default() };
            let pts = sweep_width(&p, w, w + 1, &CellCount::Linear { l: 244.0 }).unwrap();
            prop_assert!(pts[1].e_sbr < pts[0].e_sbr);
        }
    }
}
