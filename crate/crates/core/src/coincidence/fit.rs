use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::JointSpectrum;
use crate::error::{Error, Result};
use crate::model::{SpectrometerConfig, MAX_PIXEL};

/// Offsets from the band centre kept in the profile, in pixels. Only herald
/// columns whose band centre lies at least this far from both sensor edges
/// contribute, so every offset sees the same set of columns.
pub const PROFILE_HALF_WIDTH: i32 = 40;

const REL_TOL: f64 = 1e-8;
const MAX_ITER: usize = 200;

/// Band cross-section: mean coincidences per cell against the signal-column
/// offset from the energy-conservation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandProfile {
    /// Mean offset of the cells in each unit-wide bin.
    pub offsets: Vec<f64>,
    pub values: Vec<f64>,
    pub cells: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandFit {
    pub alpha: f64,
    pub alpha_sigma: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub residual_rms: f64,
    pub iterations: usize,
    /// False when the golden-section fallback produced the result.
    pub gauss_newton: bool,
}

impl BandProfile {
    pub fn from_spectrum(js: &JointSpectrum, cfg: &SpectrometerConfig) -> Result<Self> {
        let r = PROFILE_HALF_WIDTH;
        let n = (2 * r + 1) as usize;
        let (mut sum_x, mut sum_c, mut cells) = (vec![0.0; n], vec![0u64; n], vec![0u64; n]);
        let edge = f64::from(r);
        for j in 0..=MAX_PIXEL {
            let e = cfg.expected_signal_column(f64::from(j))?;
            if !(edge..=f64::from(MAX_PIXEL) - edge).contains(&e) {
                continue;
            }
            for (i, row) in js.counts.iter().enumerate() {
                let x = i as f64 - e;
                if x.abs() > edge {
                    continue;
                }
                let k = (x.round() as i32 + r) as usize;
                sum_x[k] += x;
                sum_c[k] += row[usize::from(j)];
                cells[k] += 1;
            }
        }
        if cells.iter().all(|&c| c == 0) {
            return Err(Error::Fit {
                message: "no herald column has its band inside the profile window".into(),
                residual_rms: f64::NAN,
            });
        }
        let mut p = BandProfile { offsets: Vec::new(), values: Vec::new(), cells: Vec::new() };
        for k in 0..n {
            if cells[k] > 0 {
                p.offsets.push(sum_x[k] / cells[k] as f64);
                p.values.push(sum_c[k] as f64 / cells[k] as f64);
                p.cells.push(cells[k]);
            }
        }
        Ok(p)
    }
}

/// Aligns every herald column's band and fits `A exp(-2 (x/α)^2) + c` to
/// the summed cross-section.
pub fn fit_band_profile(js: &JointSpectrum, cfg: &SpectrometerConfig) -> Result<BandFit> {
    let p = BandProfile::from_spectrum(js, cfg)?;
    fit_gaussian_profile(&p.offsets, &p.values)
}

fn model(x: f64, a: f64, alpha: f64, c: f64) -> f64 {
    a * (-2.0 * (x / alpha).powi(2)).exp() + c
}

fn rss(x: &[f64], y: &[f64], a: f64, alpha: f64, c: f64) -> f64 {
    x.iter().zip(y).map(|(&x, &y)| (y - model(x, a, alpha, c)).powi(2)).sum()
}

/// Least-squares fit of `A exp(-2 (x/α)^2) + c`. Gauss-Newton from moment
/// estimates, with a golden-section search over α as fallback.
pub fn fit_gaussian_profile(x: &[f64], y: &[f64]) -> Result<BandFit> {
    let n = x.len();
    if n != y.len() || n < 4 {
        return Err(Error::Fit {
            message: format!("need at least 4 profile points, got {n}"),
            residual_rms: f64::NAN,
        });
    }
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let flat_rms = {
        let mean = y.iter().sum::<f64>() / n as f64;
        (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    if !(ymax - ymin > 1e-12 * ymax.abs().max(1.0)) || xmax == 0.0 {
        return Err(Error::Fit {
            message: "profile is flat; no band to fit".into(),
            residual_rms: flat_rms,
        });
    }

    let tails: Vec<f64> = x.iter().zip(y).filter(|(x, _)| x.abs() > 0.6 * xmax).map(|(_, &y)| y).collect();
    let c0 = if tails.is_empty() { ymin } else { tails.iter().sum::<f64>() / tails.len() as f64 };
    let (mut m0, mut m2) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let w = (yi - c0).max(0.0);
        m0 += w;
        m2 += w * xi * xi;
    }
    let alpha0 = if m0 > 0.0 && m2 > 0.0 { 2.0 * (m2 / m0).sqrt() } else { xmax / 4.0 };
    let start = Vector3::new(ymax - c0, alpha0, c0);

    let fit = gauss_newton(x, y, start).or_else(|| golden_section(x, y, xmax));
    let Some((p, iterations, gauss_newton)) = fit else {
        return Err(Error::Fit {
            message: "least-squares fit did not converge".into(),
            residual_rms: flat_rms,
        });
    };
    let (a, alpha, c) = (p[0], p[1], p[2]);
    let res = rss(x, y, a, alpha, c);
    let residual_rms = (res / n as f64).sqrt();
    if !(a > 0.0) || !(alpha > 0.0 && alpha <= 4.0 * xmax) {
        return Err(Error::Fit {
            message: format!("fit gave no resolvable band (A = {a}, alpha = {alpha})"),
            residual_rms,
        });
    }
    let jtj = normal_matrix(x, a, alpha);
    let alpha_sigma = match jtj.try_inverse() {
        Some(inv) => (res / (n as f64 - 3.0) * inv[(1, 1)]).max(0.0).sqrt(),
        None => f64::NAN,
    };
    Ok(BandFit {
        alpha,
        alpha_sigma,
        amplitude: a,
        offset: c,
        residual_rms,
        iterations,
        gauss_newton,
    })
}

fn jacobian_row(x: f64, a: f64, alpha: f64) -> Vector3<f64> {
    let g = (-2.0 * (x / alpha).powi(2)).exp();
    Vector3::new(g, a * g * 4.0 * x * x / alpha.powi(3), 1.0)
}

fn normal_matrix(x: &[f64], a: f64, alpha: f64) -> Matrix3<f64> {
    x.iter().fold(Matrix3::zeros(), |m, &xi| {
        let j = jacobian_row(xi, a, alpha);
        m + j * j.transpose()
    })
}

fn gauss_newton(x: &[f64], y: &[f64], start: Vector3<f64>) -> Option<(Vector3<f64>, usize, bool)> {
    let mut p = start;
    let mut cost = rss(x, y, p[0], p[1], p[2]);
    for iter in 1..=MAX_ITER {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&xi, &yi) in x.iter().zip(y) {
            let j = jacobian_row(xi, p[0], p[1]);
            jtj += j * j.transpose();
            jtr += j * (yi - model(xi, p[0], p[1], p[2]));
        }
        let step = jtj.lu().solve(&jtr)?;
        let mut scale = 1.0;
        let mut next = p + step;
        let mut next_cost = rss(x, y, next[0], next[1], next[2]);
        while !(next_cost <= cost && next[1] > 0.0) {
            scale *= 0.5;
            if scale < 1e-10 {
                break;
            }
            next = p + step * scale;
            next_cost = rss(x, y, next[0], next[1], next[2]);
        }
        if !(next_cost <= cost && next[1] > 0.0) {
            // no downhill step left: converged if the gradient has vanished
            return (jtr.norm() <= 1e-10 * (1.0 + cost.sqrt())).then_some((p, iter, true));
        }
        let rel = (0..3)
            .map(|k| (next[k] - p[k]).abs() / p[k].abs().max(1e-12))
            .fold(0.0, f64::max);
        p = next;
        cost = next_cost;
        if rel < REL_TOL {
            return Some((p, iter, true));
        }
    }
    None
}

/// Best `(A, c)` for a fixed α and the resulting cost.
fn linear_solve(x: &[f64], y: &[f64], alpha: f64) -> Option<(f64, f64, f64)> {
    let mut m = Matrix2::zeros();
    let mut v = Vector2::zeros();
    for (&xi, &yi) in x.iter().zip(y) {
        let g = (-2.0 * (xi / alpha).powi(2)).exp();
        m += Matrix2::new(g * g, g, g, 1.0);
        v += Vector2::new(g * yi, yi);
    }
    let s = m.lu().solve(&v)?;
    Some((s[0], s[1], rss(x, y, s[0], alpha, s[1])))
}

fn golden_section(x: &[f64], y: &[f64], xmax: f64) -> Option<(Vector3<f64>, usize, bool)> {
    let cost = |alpha: f64| linear_solve(x, y, alpha).map_or(f64::INFINITY, |s| s.2);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (1e-3 * xmax, 4.0 * xmax);
    let mut m1 = hi - phi * (hi - lo);
    let mut m2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (cost(m1), cost(m2));
    let mut iter = 0;
    while (hi - lo) > REL_TOL * (lo + hi) && iter < 500 {
        iter += 1;
        if f1 <= f2 {
            hi = m2;
            m2 = m1;
            f2 = f1;
            m1 = hi - phi * (hi - lo);
            f1 = cost(m1);
        } else {
            lo = m1;
            m1 = m2;
            f1 = f2;
            m2 = lo + phi * (hi - lo);
            f2 = cost(m2);
        }
    }
    let alpha = 0.5 * (lo + hi);
    let (a, c, _) = linear_solve(x, y, alpha)?;
    Some((Vector3::new(a, alpha, c), iter, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> Vec<f64> {
        (-40..=40).map(f64::from).collect()
    }

    #[test]
    fn exact_profile_recovered() {
        let x = grid();
        let y: Vec<f64> = x.iter().map(|&v| model(v, 50.0, 10.0, 3.0)).collect();
        let f = fit_gaussian_profile(&x, &y).unwrap();
        assert_relative_eq!(f.alpha, 10.0, max_relative = 1e-6);
        assert_relative_eq!(f.amplitude, 50.0, max_relative = 1e-6);
        assert_relative_eq!(f.offset, 3.0, max_relative = 1e-6);
        assert!(f.gauss_newton);
    }

    #[test]
    fn golden_section_agrees() {
        let x = grid();
        let y: Vec<f64> = x.iter().map(|&v| model(v, 20.0, 6.5, 1.0)).collect();
        let (p, _, gn) = golden_section(&x, &y, 40.0).unwrap();
        assert!(!gn);
        assert_relative_eq!(p[1], 6.5, max_relative = 1e-6);
    }

    #[test]
    fn flat_profile_is_rejected() {
        let x = grid();
        let y = vec![4.0; x.len()];
        assert!(matches!(fit_gaussian_profile(&x, &y), Err(Error::Fit { .. })));
    }

    #[test]
    fn noisy_profile_sigma_is_sane() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = grid();
        let y: Vec<f64> = x.iter().map(|&v| model(v, 30.0, 10.0, 5.0) + rng.gen_range(-1.0..1.0)).collect();
        let f = fit_gaussian_profile(&x, &y).unwrap();
        assert!((f.alpha - 10.0).abs() < 5.0 * f.alpha_sigma);
        assert!(f.alpha_sigma > 0.0 && f.alpha_sigma < 1.0);
    }

    #[test]
    fn band_from_spectrum() {
        let cfg = SpectrometerConfig::default();
        let mut js = JointSpectrum {
            counts: vec![vec![0; 256]; 256],
            signal_rates: vec![0.0; 256],
            herald_rates: vec![0.0; 256],
            duration_s: 1.0,
        };
        // deterministic band: expected counts rounded, large scale so rounding is small
        for j in 0..256u16 {
            let e = cfg.expected_signal_column(f64::from(j)).unwrap();
            for i in 0..256usize {
                let v = model(i as f64 - e, 1e6, 8.0, 1e4);
                js.counts[i][usize::from(j)] = v.round() as u64;
            }
        }
        let f = fit_band_profile(&js, &cfg).unwrap();
        assert_relative_eq!(f.alpha, 8.0, max_relative = 1e-2);
    }
}
