use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnchorMode, PipelineConfig};
use crate::model::{PixelHit, SENSOR_SIZE};

/// Hits belonging to one photon.
///
/// Two hits are linked when they are at most one pixel apart (Chebyshev
/// distance) and at most the cluster window apart in time; a cluster is a
/// connected component of that relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Member hits in stream order.
    pub hits: Vec<PixelHit>,
    /// ToT-weighted mean column.
    pub centroid_col: f64,
    /// ToT-weighted mean row.
    pub centroid_row: f64,
    /// Index of the time-reference hit within `hits`.
    pub anchor: usize,
    /// ToA of the anchor hit.
    pub raw_toa_ps: u64,
    /// Position of the anchor hit in the input stream.
    pub anchor_index: usize,
}

impl Cluster {
    /// Builds a cluster from its member hits. `first_index` is the stream
    /// position of `hits[0]`; members are assumed to keep stream order, so
    /// the anchor's stream position is only exact when the members were
    /// contiguous. [`cluster`] fills it in properly.
    pub fn from_hits(hits: Vec<PixelHit>, first_index: usize, mode: AnchorMode) -> Self {
        let mut c = Self::assemble(hits, mode);
        c.anchor_index = first_index + c.anchor;
        c
    }

    /// Centroid and anchor; `anchor_index` is left for the caller.
    fn assemble(hits: Vec<PixelHit>, mode: AnchorMode) -> Self {
        debug_assert!(!hits.is_empty());
        let (mut wc, mut wr, mut wsum) = (0.0, 0.0, 0.0);
        for h in &hits {
            let w = f64::from(h.tot_ns);
            wc += w * f64::from(h.col);
            wr += w * f64::from(h.row);
            wsum += w;
        }
        let (centroid_col, centroid_row) = (wc / wsum, wr / wsum);

        // ties: brighter, then earlier, then lower (col, row)
        let max_tot_key = |h: &PixelHit| (std::cmp::Reverse(h.tot_ns), h.toa_ps, h.col, h.row);
        let anchor = match mode {
            AnchorMode::MaxTot => (0..hits.len()).min_by_key(|&i| max_tot_key(&hits[i])).unwrap(),
            AnchorMode::NearestCentroid => (0..hits.len())
                .min_by(|&a, &b| {
                    let d = |h: &PixelHit| {
                        (f64::from(h.col) - centroid_col).powi(2) + (f64::from(h.row) - centroid_row).powi(2)
                    };
                    d(&hits[a])
                        .total_cmp(&d(&hits[b]))
                        .then_with(|| max_tot_key(&hits[a]).cmp(&max_tot_key(&hits[b])))
                })
                .unwrap(),
        };
        Self {
            raw_toa_ps: hits[anchor].toa_ps,
            anchor_index: 0,
            hits,
            centroid_col,
            centroid_row,
            anchor,
        }
    }

    #[inline]
    pub fn anchor_hit(&self) -> &PixelHit {
        &self.hits[self.anchor]
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    fn order_key(&self) -> (u64, u16, u16, usize) {
        let a = self.anchor_hit();
        (self.raw_toa_ps, a.col, a.row, self.anchor_index)
    }
}

const NO_HIT: u32 = u32::MAX;
const MIN_SLAB: usize = 1 << 15;

/// Clusters a time-sorted hit stream. Output is ordered by anchor ToA.
///
/// Large streams are cut at time gaps wider than the cluster window and the
/// pieces are clustered in parallel; such cuts never separate linked hits,
/// so the result equals [`cluster_sequential`].
pub fn cluster(hits: &[PixelHit], cfg: &PipelineConfig) -> Vec<Cluster> {
    let window = cfg.window_ps();
    let target = (hits.len() / (4 * rayon::current_num_threads()).max(1)).max(MIN_SLAB);
    let bounds = gap_bounds(hits, window, target);
    if bounds.len() <= 2 {
        return cluster_sequential(hits, cfg);
    }
    let parts: Vec<Vec<Cluster>> = bounds
        .par_windows(2)
        .map(|w| cluster_slab(&hits[w[0]..w[1]], w[0], window, cfg.anchor))
        .collect();
    parts.into_iter().flatten().collect()
}

/// Single-threaded clustering of the whole stream.
pub fn cluster_sequential(hits: &[PixelHit], cfg: &PipelineConfig) -> Vec<Cluster> {
    cluster_slab(hits, 0, cfg.window_ps(), cfg.anchor)
}

/// Incremental [`cluster`] over a sorted stream delivered in pieces.
///
/// Hits are held back until a time gap wider than the cluster window
/// proves that no later hit can join them.
#[derive(Debug, Clone)]
pub struct StreamingClusterer {
    cfg: PipelineConfig,
    pending: Vec<PixelHit>,
    /// Stream position of `pending[0]`.
    offset: usize,
}

impl StreamingClusterer {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            pending: Vec::new(),
            offset: 0,
        }
    }

    /// Adds the next piece of the stream and returns the clusters that are
    /// now complete.
    pub fn push(&mut self, hits: &[PixelHit]) -> Vec<Cluster> {
        debug_assert!(match (self.pending.last(), hits.first()) {
            (Some(a), Some(b)) => a.toa_ps <= b.toa_ps,
            _ => true,
        });
        self.pending.extend_from_slice(hits);
        let window = self.cfg.window_ps();
        let Some(cut) = (1..self.pending.len())
            .rev()
            .find(|&i| self.pending[i].toa_ps - self.pending[i - 1].toa_ps > window)
        else {
            return Vec::new();
        };
        let done: Vec<PixelHit> = self.pending.drain(..cut).collect();
        self.emit(&done)
    }

    /// Clusters whatever is still held back.
    pub fn finish(mut self) -> Vec<Cluster> {
        let rest = std::mem::take(&mut self.pending);
        self.emit(&rest)
    }

    fn emit(&mut self, hits: &[PixelHit]) -> Vec<Cluster> {
        let mut out = cluster(hits, &self.cfg);
        for c in &mut out {
            c.anchor_index += self.offset;
        }
        self.offset += hits.len();
        out
    }
}

/// Slab boundaries `[0, .., n]`, each interior cut placed at a gap wider
/// than `window`, roughly `target` hits apart.
fn gap_bounds(hits: &[PixelHit], window: u64, target: usize) -> Vec<usize> {
    let mut bounds = vec![0];
    let mut i = target;
    while i < hits.len() {
        while i < hits.len() && hits[i].toa_ps.saturating_sub(hits[i - 1].toa_ps) <= window {
            i += 1;
        }
        if i < hits.len() {
            bounds.push(i);
        }
        i += target;
    }
    bounds.push(hits.len());
    bounds
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

/// Above this many hits inside the window, neighbours are looked up in a
/// per-pixel grid instead of by scanning the window.
const SCAN_LIMIT: usize = 16;

fn cluster_slab(hits: &[PixelHit], base: usize, window: u64, mode: AnchorMode) -> Vec<Cluster> {
    debug_assert!(hits.windows(2).all(|w| w[0].toa_ps <= w[1].toa_ps), "hits must be time-sorted");
    let n = hits.len();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    // most recent hit per pixel, with its time kept inline to avoid a
    // lookup into `hits` for stale neighbours
    let mut last = vec![(0u64, NO_HIT); SENSOR_SIZE * SENSOR_SIZE];
    let union = |parent: &mut [u32], i: u32, j: u32| {
        let (a, b) = (find(parent, i), find(parent, j));
        if a != b {
            // the root is always the earliest member
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            parent[hi as usize] = lo;
        }
    };

    // first hit still inside the window of the current one
    let mut lo = 0;
    for (i, h) in hits.iter().enumerate() {
        while hits[lo].toa_ps + window < h.toa_ps {
            lo += 1;
        }
        if i - lo <= SCAN_LIMIT {
            for (j, g) in hits[lo..i].iter().enumerate() {
                if g.col.abs_diff(h.col) <= 1 && g.row.abs_diff(h.row) <= 1 {
                    union(&mut parent, i as u32, (lo + j) as u32);
                }
            }
        } else {
            let (c, r) = (usize::from(h.col), usize::from(h.row));
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(SENSOR_SIZE - 1));
            for rr in r.saturating_sub(1)..=(r + 1).min(SENSOR_SIZE - 1) {
                for &(toa, j) in &last[rr * SENSOR_SIZE + c0..=rr * SENSOR_SIZE + c1] {
                    // Any earlier in-window hit on that pixel is linked to
                    // `j`, so checking the most recent one suffices.
                    if j != NO_HIT && h.toa_ps - toa <= window {
                        union(&mut parent, i as u32, j);
                    }
                }
            }
        }
        last[usize::from(h.row) * SENSOR_SIZE + usize::from(h.col)] = (h.toa_ps, i as u32);
    }

    // component sizes, numbered in order of their first hit (the root)
    let mut slot = vec![NO_HIT; n];
    let mut sizes: Vec<u32> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i as u32) as usize;
        if root == i {
            slot[i] = sizes.len() as u32;
            sizes.push(0);
        } else {
            slot[i] = slot[root];
        }
        sizes[slot[i] as usize] += 1;
    }

    let mut clusters: Vec<Cluster> = Vec::with_capacity(sizes.len());
    // stragglers: members of components that are not contiguous in the stream
    let mut scattered: Vec<Vec<usize>> = Vec::new();
    let mut scattered_slot = vec![NO_HIT; 0];
    let mut i = 0;
    while i < n {
        let k = slot[i] as usize;
        let size = sizes[k] as usize;
        if parent[i] as usize == i && slot[i..i + size].iter().all(|&s| s as usize == k) {
            let mut c = Cluster::assemble(hits[i..i + size].to_vec(), mode);
            c.anchor_index = base + i + c.anchor;
            clusters.push(c);
            i += size;
            continue;
        }
        if scattered_slot.is_empty() {
            scattered_slot = vec![NO_HIT; sizes.len()];
        }
        if scattered_slot[k] == NO_HIT {
            scattered_slot[k] = scattered.len() as u32;
            scattered.push(Vec::with_capacity(size));
        }
        scattered[scattered_slot[k] as usize].push(i);
        i += 1;
    }
    for members in scattered {
        let mut c = Cluster::assemble(members.iter().map(|&p| hits[p]).collect(), mode);
        c.anchor_index = base + members[c.anchor];
        clusters.push(c);
    }
    // emitted in order of first hit; the anchor may come a few ns later
    clusters.sort_by_key(Cluster::order_key);
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    #[test]
    fn single_hit() {
        let c = cluster(&[PixelHit::new(5, 5, 100, 30)], &cfg());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 1);
        assert_eq!(c[0].raw_toa_ps, 100);
    }

    #[test]
    fn chebyshev_boundary() {
        let near = [PixelHit::new(5, 5, 0, 30), PixelHit::new(6, 6, 10, 30)];
        assert_eq!(cluster(&near, &cfg()).len(), 1);
        let far = [PixelHit::new(5, 5, 0, 30), PixelHit::new(7, 5, 10, 30)];
        assert_eq!(cluster(&far, &cfg()).len(), 2);
    }

    #[test]
    fn time_window_boundary() {
        let w = cfg().window_ps();
        let inside = [PixelHit::new(5, 5, 0, 30), PixelHit::new(5, 6, w, 30)];
        assert_eq!(cluster(&inside, &cfg()).len(), 1);
        let outside = [PixelHit::new(5, 5, 0, 30), PixelHit::new(5, 6, w + 1, 30)];
        assert_eq!(cluster(&outside, &cfg()).len(), 2);
    }

    #[test]
    fn chain_links_through_middle() {
        // 0 and 2 are two pixels apart but both touch 1
        let hits = [
            PixelHit::new(5, 5, 0, 30),
            PixelHit::new(7, 5, 1, 30),
            PixelHit::new(6, 5, 2, 90),
        ];
        let c = cluster(&hits, &cfg());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].anchor_hit().col, 6);
        assert_eq!(c[0].anchor_index, 2);
        assert_eq!(c[0].raw_toa_ps, 2);
    }

    #[test]
    fn anchor_modes() {
        let hits = vec![
            PixelHit::new(10, 10, 0, 500),
            PixelHit::new(11, 10, 0, 100),
            PixelHit::new(12, 10, 0, 100),
            PixelHit::new(13, 10, 0, 100),
        ];
        let a = Cluster::from_hits(hits.clone(), 0, AnchorMode::MaxTot);
        assert_eq!(a.anchor, 0);
        let b = Cluster::from_hits(hits, 0, AnchorMode::NearestCentroid);
        // centroid col = (5000 + 1100 + 1200 + 1300) / 800 = 10.75
        assert_eq!(b.anchor, 1);
    }

    #[test]
    fn sensor_edges() {
        let hits = [PixelHit::new(0, 0, 0, 30), PixelHit::new(255, 255, 0, 30), PixelHit::new(1, 1, 5, 30)];
        let c = cluster(&hits, &cfg());
        assert_eq!(c.len(), 2);
    }

    /// Connected components by exhaustive pairwise linking.
    fn brute_force(hits: &[PixelHit], window: u64) -> Vec<Vec<usize>> {
        let n = hits.len();
        let linked = |a: &PixelHit, b: &PixelHit| {
            a.col.abs_diff(b.col) <= 1 && a.row.abs_diff(b.row) <= 1 && a.toa_ps.abs_diff(b.toa_ps) <= window
        };
        let mut label = vec![usize::MAX; n];
        let mut comps = Vec::new();
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![s];
            let mut comp = Vec::new();
            label[s] = id;
            while let Some(u) = stack.pop() {
                comp.push(u);
                for v in 0..n {
                    if label[v] == usize::MAX && linked(&hits[u], &hits[v]) {
                        label[v] = id;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort();
        comps
    }

    fn partition(clusters: &[Cluster], hits: &[PixelHit]) -> Vec<Vec<usize>> {
        // hits are distinct records here, so positions can be recovered by value
        let mut out: Vec<Vec<usize>> = clusters
            .iter()
            .map(|c| {
                let mut v: Vec<usize> = c.hits.iter().map(|h| hits.iter().position(|x| x == h).unwrap()).collect();
                v.sort_unstable();
                v
            })
            .collect();
        out.sort();
        out
    }

    fn arb_stream() -> impl Strategy<Value = Vec<PixelHit>> {
        // dense little patch so that components are non-trivial
        proptest::collection::vec((0u16..12, 0u16..12, 0u64..2_000_000, 1u16..200), 1..400).prop_map(|v| {
            let mut hits: Vec<PixelHit> = v.into_iter().map(|(c, r, t, tot)| PixelHit::new(c, r, t, tot)).collect();
            hits.sort_by_key(PixelHit::sort_key);
            hits.dedup();
            hits
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(hits in arb_stream()) {
            let cfg = cfg();
            let fast = cluster(&hits, &cfg);
            prop_assert_eq!(fast.iter().map(Cluster::len).sum::<usize>(), hits.len());
            prop_assert_eq!(partition(&fast, &hits), brute_force(&hits, cfg.window_ps()));
            prop_assert!(fast.windows(2).all(|w| w[0].raw_toa_ps <= w[1].raw_toa_ps));
            for c in &fast {
                prop_assert_eq!(hits[c.anchor_index], *c.anchor_hit());
                let max = c.hits.iter().map(|h| h.tot_ns).max().unwrap();
                prop_assert_eq!(c.anchor_hit().tot_ns, max);
            }
        }

        #[test]
        fn translation_invariant(hits in arb_stream(), shift in 0u64..1_000_000_000) {
            let cfg = cfg();
            let moved: Vec<PixelHit> = hits.iter().map(|h| PixelHit { toa_ps: h.toa_ps + shift, ..*h }).collect();
            let a = cluster(&hits, &cfg);
            let b = cluster(&moved, &cfg);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.raw_toa_ps + shift, y.raw_toa_ps);
                prop_assert_eq!(x.len(), y.len());
                prop_assert_eq!(x.anchor_index, y.anchor_index);
            }
        }

        #[test]
        fn equal_timestamp_order_is_irrelevant(hits in arb_stream(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let cfg = cfg();
            // shuffle within runs of equal timestamps
            let mut shuffled = hits.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut i = 0;
            while i < shuffled.len() {
                let j = i + shuffled[i..].iter().take_while(|h| h.toa_ps == shuffled[i].toa_ps).count();
                shuffled[i..j].shuffle(&mut rng);
                i = j;
            }
            let key = |cs: &[Cluster]| {
                let mut v: Vec<(u64, PixelHit, Vec<PixelHit>)> = cs
                    .iter()
                    .map(|c| {
                        let mut m = c.hits.clone();
                        m.sort_by_key(PixelHit::sort_key);
                        (c.raw_toa_ps, *c.anchor_hit(), m)
                    })
                    .collect();
                v.sort_by_key(|x| (x.0, x.1.sort_key()));
                v
            };
            let a = cluster(&hits, &cfg);
            let b = cluster(&shuffled, &cfg);
            prop_assert_eq!(key(&a), key(&b));
            let a_order: Vec<_> = a.iter().map(|c| (c.raw_toa_ps, *c.anchor_hit())).collect();
            let b_order: Vec<_> = b.iter().map(|c| (c.raw_toa_ps, *c.anchor_hit())).collect();
            prop_assert_eq!(a_order, b_order);
        }
    }

    #[test]
    fn streaming_equals_batch() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut t = 0u64;
        let mut hits = Vec::new();
        for _ in 0..20_000 {
            t += rng.gen_range(0..150_000);
            hits.push(PixelHit::new(rng.gen_range(0..8), rng.gen_range(0..8), t, rng.gen_range(1..300)));
        }
        let cfg = cfg();
        let batch = cluster(&hits, &cfg);
        let mut s = StreamingClusterer::new(&cfg);
        let mut streamed = Vec::new();
        let mut i = 0;
        while i < hits.len() {
            let j = (i + rng.gen_range(0..3000)).min(hits.len());
            streamed.extend(s.push(&hits[i..j]));
            i = j;
        }
        streamed.extend(s.finish());
        assert_eq!(streamed, batch);
    }

    #[test]
    fn parallel_equals_sequential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = 0u64;
        let mut hits = Vec::new();
        for _ in 0..200_000 {
            t += rng.gen_range(0..300_000);
            let (c, r) = (rng.gen_range(0..256), rng.gen_range(0..256));
            hits.push(PixelHit::new(c, r, t, rng.gen_range(1..500)));
            if rng.gen_bool(0.5) {
                hits.push(PixelHit::new(c.saturating_add(1).min(255), r, t + 3_000, 20));
            }
        }
        hits.sort_by_key(PixelHit::sort_key);
        let cfg = cfg();
        let seq = cluster_sequential(&hits, &cfg);
        for threads in [1, 2, 4] {
            let par = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| cluster(&hits, &cfg));
            assert_eq!(par, seq);
        }
        assert!(gap_bounds(&hits, cfg.window_ps(), MIN_SLAB).len() > 3);
    }
}
