//! Raw hits to photon events.
//!
//! An intensified photon lights a blob of neighbouring pixels within a few
//! nanoseconds. [`cluster`] regroups those hits, [`calibrate_timewalk`]
//! learns the ToT-dependent arrival-time bias from the clusters themselves,
//! and [`correct_and_centroid`] collapses every cluster to one event.

mod cluster;
mod timewalk;

use serde::{Deserialize, Serialize};

pub use cluster::{cluster, cluster_sequential, Cluster, StreamingClusterer};
pub use timewalk::{calibrate_timewalk, TimewalkTable};

use crate::error::{Error, Result};
use crate::model::{Arm, PhotonEvent, PixelHit, SpectrometerConfig};

/// Which member hit provides a cluster's time reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// The hit with the largest ToT.
    #[default]
    MaxTot,
    /// The hit closest to the ToT-weighted centroid.
    NearestCentroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub cluster_window_ns: f64,
    pub anchor: AnchorMode,
    /// Logarithmic ToT bins per axis of the time-walk table.
    pub bins_per_axis: usize,
    /// Cells with fewer samples carry no correction.
    pub min_samples: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cluster_window_ns: 100.0,
            anchor: AnchorMode::MaxTot,
            bins_per_axis: 16,
            min_samples: 20,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_window_ns >= 0.0 && self.cluster_window_ns.is_finite()) {
            return Err(Error::Config("pipeline.cluster_window_ns: must be non-negative".into()));
        }
        if self.bins_per_axis == 0 {
            return Err(Error::Config("pipeline.bins_per_axis: must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn window_ps(&self) -> u64 {
        (self.cluster_window_ns * 1e3).round() as u64
    }
}

/// Rounds to the nearest integer, exact halves going down.
#[inline]
fn round_half_down(x: f64) -> f64 {
    let f = x.floor();
    if x - f > 0.5 {
        f + 1.0
    } else {
        f
    }
}

/// One event per cluster, in cluster order. The event time is the anchor
/// ToA minus the anchor's own time-walk correction; the position is the
/// ToT-weighted centroid rounded to a pixel.
pub fn correct_and_centroid(clusters: &[Cluster], table: &TimewalkTable, cfg: &SpectrometerConfig) -> Vec<PhotonEvent> {
    clusters
        .iter()
        .map(|c| {
            let anchor = c.anchor_hit();
            let walk_ps = (table.anchor_correction_ns(anchor.tot_ns) * 1e3).round() as i64;
            let col = round_half_down(c.centroid_col) as u16;
            let row = round_half_down(c.centroid_row) as u16;
            PhotonEvent {
                col,
                row,
                toa_ps: c.raw_toa_ps as i64 - walk_ps,
                arm: cfg.arm_of_row(row),
                cluster_size: c.hits.len() as u32,
            }
        })
        .collect()
}

/// Hits per piece in [`process`]; bounds the clusters held at once.
const PROCESS_CHUNK: usize = 1 << 20;

/// Clusters, corrects and centroids a sorted hit stream.
pub fn process(
    hits: &[PixelHit],
    table: &TimewalkTable,
    pipeline: &PipelineConfig,
    cfg: &SpectrometerConfig,
) -> Vec<PhotonEvent> {
    let mut clusterer = StreamingClusterer::new(pipeline);
    let mut events = Vec::new();
    for piece in hits.chunks(PROCESS_CHUNK) {
        events.extend(correct_and_centroid(&clusterer.push(piece), table, cfg));
    }
    events.extend(correct_and_centroid(&clusterer.finish(), table, cfg));
    events
}

/// Splits events into time-sorted herald and signal streams. Unassigned
/// events are dropped.
pub fn split_arms(events: &[PhotonEvent]) -> (Vec<PhotonEvent>, Vec<PhotonEvent>) {
    let mut herald: Vec<PhotonEvent> = events.iter().filter(|e| e.arm == Arm::Herald).copied().collect();
    let mut signal: Vec<PhotonEvent> = events.iter().filter(|e| e.arm == Arm::Signal).copied().collect();
    herald.sort_by_key(|e| (e.toa_ps, e.col, e.row));
    signal.sort_by_key(|e| (e.toa_ps, e.col, e.row));
    (herald, signal)
}
