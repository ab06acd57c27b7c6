use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Cluster, PipelineConfig};
use crate::error::{Error, Result};

/// ToT-dependent arrival-time correction, indexed `[anchor bin][pixel bin]`.
///
/// Relative offsets `relative_ns[a][h]` are mean (hit ToA − anchor ToA) of
/// non-anchor hits. They are tied together into absolute corrections by
/// `anchor_walk_ns[a]`, the walk of an anchor in bin `a` relative to the
/// brightest calibrated anchor bin, which is taken as zero. The diagonal
/// `correction_ns[a][a]` is an anchor's own correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimewalkTable {
    /// `bins + 1` increasing ToT edges in ns; empty for the identity table.
    pub edges_ns: Vec<f64>,
    pub min_samples: u64,
    /// Non-anchor hit counts per cell.
    pub counts: Vec<Vec<u64>>,
    pub relative_ns: Vec<Vec<Option<f64>>>,
    pub mean_pixel_tot_ns: Vec<Vec<Option<f64>>>,
    pub anchor_counts: Vec<u64>,
    pub mean_anchor_tot_ns: Vec<Option<f64>>,
    pub anchor_walk_ns: Vec<Option<f64>>,
    /// Anchor bin whose walk is the zero reference.
    pub reference_bin: Option<usize>,
    /// Cells without a correction hold 0.
    pub correction_ns: Vec<Vec<f64>>,
    pub calibrated: Vec<Vec<bool>>,
}

impl TimewalkTable {
    /// A table that corrects nothing.
    pub fn identity() -> Self {
        Self {
            edges_ns: Vec::new(),
            min_samples: 0,
            counts: Vec::new(),
            relative_ns: Vec::new(),
            mean_pixel_tot_ns: Vec::new(),
            anchor_counts: Vec::new(),
            mean_anchor_tot_ns: Vec::new(),
            anchor_walk_ns: Vec::new(),
            reference_bin: None,
            correction_ns: Vec::new(),
            calibrated: Vec::new(),
        }
    }

    pub fn bins(&self) -> usize {
        self.edges_ns.len().saturating_sub(1)
    }

    /// Bin of a ToT value; values outside the edges clamp to the end bins.
    pub fn bin_of(&self, tot_ns: f64) -> Option<usize> {
        let n = self.bins();
        if n == 0 {
            return None;
        }
        let k = self.edges_ns.partition_point(|&e| e <= tot_ns);
        Some(k.saturating_sub(1).min(n - 1))
    }

    /// Correction in ns for a hit of `pixel_tot` in a cluster whose anchor
    /// has `anchor_tot`.
    pub fn correction_ns(&self, pixel_tot: u16, anchor_tot: u16) -> f64 {
        match (self.bin_of(f64::from(pixel_tot)), self.bin_of(f64::from(anchor_tot))) {
            (Some(h), Some(a)) => self.correction_ns[a][h],
            _ => 0.0,
        }
    }

    pub fn anchor_correction_ns(&self, anchor_tot: u16) -> f64 {
        self.correction_ns(anchor_tot, anchor_tot)
    }

    pub fn is_identity(&self) -> bool {
        self.calibrated.iter().flatten().all(|c| !c)
    }

    /// Shape and ordering checks for tables read from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Calibration(format!("time-walk table: {m}")));
        if self.edges_ns.is_empty() {
            return if self.correction_ns.is_empty() { Ok(()) } else { bad("corrections without bin edges") };
        }
        let n = self.bins();
        if n == 0 || !self.edges_ns.windows(2).all(|w| w[0] < w[1]) || !self.edges_ns.iter().all(|e| e.is_finite()) {
            return bad("bin edges must be finite and strictly increasing");
        }
        let square = |rows: usize, cols: &[usize]| rows == n && cols.iter().all(|&c| c == n);
        let ok = square(self.counts.len(), &self.counts.iter().map(Vec::len).collect::<Vec<_>>())
            && square(self.relative_ns.len(), &self.relative_ns.iter().map(Vec::len).collect::<Vec<_>>())
            && square(self.mean_pixel_tot_ns.len(), &self.mean_pixel_tot_ns.iter().map(Vec::len).collect::<Vec<_>>())
            && square(self.correction_ns.len(), &self.correction_ns.iter().map(Vec::len).collect::<Vec<_>>())
            && square(self.calibrated.len(), &self.calibrated.iter().map(Vec::len).collect::<Vec<_>>())
            && self.anchor_counts.len() == n
            && self.mean_anchor_tot_ns.len() == n
            && self.anchor_walk_ns.len() == n
            && self.reference_bin.map_or(true, |r| r < n);
        if !ok {
            return bad("array shapes do not match the bin count");
        }
        if !self.correction_ns.iter().flatten().all(|c| c.is_finite()) {
            return bad("non-finite correction");
        }
        Ok(())
    }
}

/// Integer accumulators, so the reduction is exact in any order.
#[derive(Clone)]
struct Sums {
    n: usize,
    count: Vec<u64>,
    dt_ps: Vec<i128>,
    tot: Vec<u64>,
    anchor_count: Vec<u64>,
    anchor_tot: Vec<u64>,
}

impl Sums {
    fn new(n: usize) -> Self {
        Self {
            n,
            count: vec![0; n * n],
            dt_ps: vec![0; n * n],
            tot: vec![0; n * n],
            anchor_count: vec![0; n],
            anchor_tot: vec![0; n],
        }
    }

    fn merge(mut self, o: Self) -> Self {
        for i in 0..self.n * self.n {
            self.count[i] += o.count[i];
            self.dt_ps[i] += o.dt_ps[i];
            self.tot[i] += o.tot[i];
        }
        for a in 0..self.n {
            self.anchor_count[a] += o.anchor_count[a];
            self.anchor_tot[a] += o.anchor_tot[a];
        }
        self
    }
}

/// Learns the time-walk table from multi-hit clusters.
pub fn calibrate_timewalk(clusters: &[Cluster], cfg: &PipelineConfig) -> Result<TimewalkTable> {
    cfg.validate()?;
    let multi: Vec<&Cluster> = clusters.iter().filter(|c| c.len() > 1).collect();
    if multi.is_empty() {
        return Err(Error::Calibration("no multi-hit clusters to calibrate from".into()));
    }
    let (lo, hi) = multi
        .par_iter()
        .flat_map_iter(|c| c.hits.iter().map(|h| h.tot_ns))
        .fold(|| (u16::MAX, 0u16), |(lo, hi), t| (lo.min(t), hi.max(t)))
        .reduce(|| (u16::MAX, 0u16), |a, b| (a.0.min(b.0), a.1.max(b.1)));

    let n = cfg.bins_per_axis;
    let (lo, hi) = (f64::from(lo.max(1)), f64::from(hi) + 1.0);
    let ratio = (hi / lo).powf(1.0 / n as f64);
    let mut edges_ns: Vec<f64> = (0..=n).map(|k| lo * ratio.powi(k as i32)).collect();
    edges_ns[0] = lo;
    edges_ns[n] = hi;

    let mut table = TimewalkTable { edges_ns, ..TimewalkTable::identity() };
    let sums = multi
        .par_iter()
        .fold(
            || Sums::new(n),
            |mut s, c| {
                let anchor = c.anchor_hit();
                let a = table.bin_of(f64::from(anchor.tot_ns)).unwrap();
                s.anchor_count[a] += 1;
                s.anchor_tot[a] += u64::from(anchor.tot_ns);
                for (i, hit) in c.hits.iter().enumerate() {
                    if i == c.anchor {
                        continue;
                    }
                    let h = table.bin_of(f64::from(hit.tot_ns)).unwrap();
                    let k = a * n + h;
                    s.count[k] += 1;
                    s.dt_ps[k] += i128::from(hit.toa_ps) - i128::from(anchor.toa_ps);
                    s.tot[k] += u64::from(hit.tot_ns);
                }
                s
            },
        )
        .reduce(|| Sums::new(n), Sums::merge);

    let min = cfg.min_samples.max(1);
    table.min_samples = cfg.min_samples;
    table.counts = (0..n).map(|a| sums.count[a * n..(a + 1) * n].to_vec()).collect();
    table.relative_ns = (0..n)
        .map(|a| {
            (0..n)
                .map(|h| {
                    let k = a * n + h;
                    (sums.count[k] >= min).then(|| sums.dt_ps[k] as f64 / sums.count[k] as f64 * 1e-3)
                })
                .collect()
        })
        .collect();
    table.mean_pixel_tot_ns = (0..n)
        .map(|a| {
            (0..n)
                .map(|h| {
                    let k = a * n + h;
                    (sums.count[k] > 0).then(|| sums.tot[k] as f64 / sums.count[k] as f64)
                })
                .collect()
        })
        .collect();
    table.anchor_counts = sums.anchor_count.clone();
    table.mean_anchor_tot_ns = (0..n)
        .map(|a| (sums.anchor_count[a] > 0).then(|| sums.anchor_tot[a] as f64 / sums.anchor_count[a] as f64))
        .collect();

    let (reference, walk) = chain_anchor_walk(&table.relative_ns, &table.counts);
    table.reference_bin = reference;
    table.anchor_walk_ns = walk;

    table.correction_ns = vec![vec![0.0; n]; n];
    table.calibrated = vec![vec![false; n]; n];
    for a in 0..n {
        let Some(w) = table.anchor_walk_ns[a] else { continue };
        // (bin, value, weight) over calibrated cells, in pixel-ToT order
        let mut row: Vec<(usize, f64, f64)> = Vec::new();
        for h in 0..n {
            if h == a {
                row.push((h, w, sums.anchor_count[a].max(1) as f64));
            } else if let Some(d) = table.relative_ns[a][h] {
                row.push((h, d + w, table.counts[a][h] as f64));
            }
        }
        let fitted = nonincreasing_fit(&row.iter().map(|r| (r.1, r.2)).collect::<Vec<_>>());
        for (&(h, _, _), v) in row.iter().zip(fitted) {
            table.correction_ns[a][h] = v;
            table.calibrated[a][h] = true;
        }
    }
    Ok(table)
}

/// Walk of each anchor bin relative to the brightest anchor bin with a
/// calibrated cell. Two anchor bins are linked through every pixel bin both
/// have calibrated: `D(h,b) - D(h,a)` is the walk of `a` relative to `b`.
fn chain_anchor_walk(rel: &[Vec<Option<f64>>], counts: &[Vec<u64>]) -> (Option<usize>, Vec<Option<f64>>) {
    let n = rel.len();
    let mut walk = vec![None; n];
    let Some(reference) = (0..n).rev().find(|&a| rel[a].iter().any(Option::is_some)) else {
        return (None, walk);
    };
    walk[reference] = Some(0.0);
    // brighter bins never saw a calibrated cell; by monotonic decay they sit at the reference
    for w in walk.iter_mut().skip(reference + 1) {
        *w = Some(0.0);
    }
    loop {
        let mut progressed = false;
        for a in (0..reference).rev() {
            if walk[a].is_some() {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for b in 0..=reference {
                let Some(wb) = walk[b] else { continue };
                if b == a || rel[b].iter().all(Option::is_none) {
                    continue;
                }
                for h in 0..n {
                    if let (Some(da), Some(db)) = (rel[a][h], rel[b][h]) {
                        let (na, nb) = (counts[a][h] as f64, counts[b][h] as f64);
                        let weight = na * nb / (na + nb);
                        num += weight * (db + wb - da);
                        den += weight;
                    }
                }
            }
            if den > 0.0 {
                walk[a] = Some(num / den);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    (Some(reference), walk)
}

/// Weighted least-squares nonincreasing fit (pool adjacent violators).
fn nonincreasing_fit(points: &[(f64, f64)]) -> Vec<f64> {
    // blocks of (mean, weight, len)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(points.len());
    for &(v, w) in points {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, l2) = blocks[blocks.len() - 1];
            let (m1, w1, l1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 + m2 * w2) / w, w, l1 + l2);
        }
    }
    blocks.into_iter().flat_map(|(m, _, l)| std::iter::repeat(m).take(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PixelHit;
    use crate::pipeline::AnchorMode;
    use proptest::prelude::*;

    fn walk_ps(tot: u16) -> u64 {
        (600_000.0 / (f64::from(tot) + 50.0)).round() as u64
    }

    /// Clusters with an exact, noise-free walk law.
    fn synthetic(tots: &[Vec<u16>]) -> Vec<Cluster> {
        tots.iter()
            .enumerate()
            .map(|(k, ts)| {
                let t0 = k as u64 * 1_000_000;
                let hits = ts
                    .iter()
                    .enumerate()
                    .map(|(i, &tot)| PixelHit::new(10 + i as u16, 10, t0 + walk_ps(tot), tot))
                    .collect();
                Cluster::from_hits(hits, 0, AnchorMode::MaxTot)
            })
            .collect()
    }

    fn family() -> Vec<Vec<u16>> {
        let levels = [25u16, 50, 100, 200, 400, 800, 1600];
        let mut out = Vec::new();
        for (i, &a) in levels.iter().enumerate() {
            for &h in &levels[..=i] {
                for _ in 0..30 {
                    out.push(vec![a, h]);
                }
            }
        }
        out
    }

    #[test]
    fn singles_are_rejected() {
        let c = synthetic(&[vec![100], vec![300]]);
        assert!(matches!(calibrate_timewalk(&c, &PipelineConfig::default()), Err(Error::Calibration(_))));
        assert!(matches!(calibrate_timewalk(&[], &PipelineConfig::default()), Err(Error::Calibration(_))));
    }

    #[test]
    fn constant_tot_gives_zero_corrections() {
        let c = synthetic(&vec![vec![300, 300, 300]; 50]);
        let t = calibrate_timewalk(&c, &PipelineConfig::default()).unwrap();
        assert!(t.correction_ns.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(t.anchor_correction_ns(300), 0.0);
    }

    #[test]
    fn recovers_exact_law() {
        let t = calibrate_timewalk(&synthetic(&family()), &PipelineConfig::default()).unwrap();
        t.validate().unwrap();
        let law = |x: f64| 600.0 / (x + 50.0);
        let reference = law(1600.0);
        for tot in [25u16, 50, 100, 200, 400, 800, 1600] {
            for anchor in [25u16, 50, 100, 200, 400, 800, 1600] {
                if tot > anchor {
                    continue;
                }
                let got = t.correction_ns(tot, anchor);
                approx::assert_abs_diff_eq!(got, law(f64::from(tot)) - reference, epsilon = 2e-3);
            }
        }
    }

    #[test]
    fn sparse_cells_stay_identity() {
        let mut f = family();
        f.push(vec![1200, 75]);
        let t = calibrate_timewalk(&synthetic(&f), &PipelineConfig::default()).unwrap();
        let (h, a) = (t.bin_of(75.0).unwrap(), t.bin_of(1200.0).unwrap());
        assert_eq!(t.counts[a][h], 1);
        assert!(!t.calibrated[a][h]);
        assert_eq!(t.correction_ns[a][h], 0.0);
    }

    #[test]
    fn order_independent() {
        let c = synthetic(&family());
        let mut rev = c.clone();
        rev.reverse();
        let cfg = PipelineConfig::default();
        assert_eq!(calibrate_timewalk(&c, &cfg).unwrap(), calibrate_timewalk(&rev, &cfg).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let t = calibrate_timewalk(&synthetic(&family()), &PipelineConfig::default()).unwrap();
        let back: TimewalkTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back.correction_ns, t.correction_ns);
        back.validate().unwrap();
        TimewalkTable::identity().validate().unwrap();
        assert!(TimewalkTable::identity().is_identity());
    }

    #[test]
    fn pava_examples() {
        assert_eq!(nonincreasing_fit(&[(3.0, 1.0), (2.0, 1.0), (1.0, 1.0)]), [3.0, 2.0, 1.0]);
        assert_eq!(nonincreasing_fit(&[(1.0, 1.0), (3.0, 1.0)]), [2.0, 2.0]);
        assert_eq!(nonincreasing_fit(&[(1.0, 3.0), (5.0, 1.0), (0.0, 1.0)]), [2.0, 2.0, 0.0]);
    }

    proptest! {
        #[test]
        fn pava_is_monotone_and_mean_preserving(v in proptest::collection::vec((-10.0f64..10.0, 0.1f64..5.0), 1..40)) {
            let fit = nonincreasing_fit(&v);
            prop_assert!(fit.windows(2).all(|w| w[0] >= w[1] - 1e-12));
            let before: f64 = v.iter().map(|(x, w)| x * w).sum();
            let after: f64 = fit.iter().zip(&v).map(|(f, (_, w))| f * w).sum();
            prop_assert!((before - after).abs() < 1e-9 * (1.0 + before.abs()));
        }

        #[test]
        fn rows_nonincreasing(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tots: Vec<Vec<u16>> = (0..600)
                .map(|_| (0..rng.gen_range(2..6)).map(|_| rng.gen_range(1..80u16) * 25).collect())
                .collect();
            // jitter the hit times so the raw means are not monotone by construction
            let mut clusters = synthetic(&tots);
            for c in &mut clusters {
                for h in &mut c.hits {
                    h.toa_ps += rng.gen_range(0..3_000);
                }
                *c = Cluster::from_hits(c.hits.clone(), 0, AnchorMode::MaxTot);
            }
            let t = calibrate_timewalk(&clusters, &PipelineConfig::default()).unwrap();
            for a in 0..t.bins() {
                let vals: Vec<f64> = (0..t.bins()).filter(|&h| t.calibrated[a][h]).map(|h| t.correction_ns[a][h]).collect();
                prop_assert!(vals.windows(2).all(|w| w[0] >= w[1] - 1e-9));
                for h in 0..t.bins() {
                    if !t.calibrated[a][h] {
                        prop_assert_eq!(t.correction_ns[a][h], 0.0);
                    }
                    if h != a && t.counts[a][h] < t.min_samples {
                        prop_assert!(!t.calibrated[a][h]);
                    }
                }
            }
        }
    }
}
