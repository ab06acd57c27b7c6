//! Domain types and spectrometer geometry.
//!
//! The camera images two horizontal spectrum stripes: the herald stripe and
//! the signal stripe. Along a stripe the pixel column maps linearly onto
//! wavelength. A signal/herald pair produced by down-conversion of a pump
//! photon obeys energy conservation, `1/λp = 1/λs + 1/λh`, so every herald
//! column has an expected partner column in the signal stripe. The set of
//! (signal, herald) column pairs near that curve is the selection band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera side length in pixels.
pub const SENSOR_SIZE: usize = 256;
/// Largest valid pixel coordinate.
pub const MAX_PIXEL: u16 = (SENSOR_SIZE - 1) as u16;
/// Number of (signal column, herald column) combinations on the sensor.
pub const COLUMN_PAIRS: u64 = (SENSOR_SIZE * SENSOR_SIZE) as u64;

/// One raw camera hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelHit {
    pub col: u16,
    pub row: u16,
    /// Time of arrival in picoseconds from the start of the run.
    pub toa_ps: u64,
    /// Time over threshold in nanoseconds.
    pub tot_ns: u16,
}

impl PixelHit {
    pub fn new(col: u16, row: u16, toa_ps: u64, tot_ns: u16) -> Self {
        Self {
            col,
            row,
            toa_ps,
            tot_ns,
        }
    }

    /// Checks the pixel-range and positive-ToT invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.col > MAX_PIXEL {
            return Err(format!("column {} outside [0, {MAX_PIXEL}]", self.col));
        }
        if self.row > MAX_PIXEL {
            return Err(format!("row {} outside [0, {MAX_PIXEL}]", self.row));
        }
        if self.tot_ns == 0 {
            return Err("time over threshold must be positive".into());
        }
        Ok(())
    }

    /// Stream ordering key: time first, ties broken by (col, row), then ToT
    /// so that the order is total.
    #[inline]
    pub fn sort_key(&self) -> (u64, u16, u16, u16) {
        (self.toa_ps, self.col, self.row, self.tot_ns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Herald,
    Signal,
    Unassigned,
}

/// A centroided, time-walk-corrected single-photon detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonEvent {
    pub col: u16,
    pub row: u16,
    /// Corrected time of arrival in picoseconds. Signed because a correction
    /// can move an event recorded at the very start of a run below zero.
    pub toa_ps: i64,
    pub arm: Arm,
    pub cluster_size: u32,
}

/// Inclusive range of sensor rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u16; 2]", into = "[u16; 2]")]
pub struct RowRange {
    pub start: u16,
    pub end: u16,
}

impl RowRange {
    pub fn new(start: u16, end: u16) -> Result<Self> {
        if start > end {
            return Err(Error::Config(format!("row range [{start}, {end}] is reversed")));
        }
        if end > MAX_PIXEL {
            return Err(Error::Config(format!("row range [{start}, {end}] leaves the sensor")));
        }
        Ok(Self { start, end })
    }

    #[inline]
    pub fn contains(&self, row: u16) -> bool {
        (self.start..=self.end).contains(&row)
    }

    pub fn len(&self) -> usize {
        usize::from(self.end - self.start) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &RowRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl TryFrom<[u16; 2]> for RowRange {
    type Error = String;

    fn try_from(v: [u16; 2]) -> std::result::Result<Self, Self::Error> {
        RowRange::new(v[0], v[1]).map_err(|e| e.to_string())
    }
}

impl From<RowRange> for [u16; 2] {
    fn from(r: RowRange) -> Self {
        [r.start, r.end]
    }
}

/// Spectrometer geometry and the constants shared by every analysis step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrometerConfig {
    /// Wavelength imaged at column 0.
    pub lambda_min_nm: f64,
    /// Wavelength imaged at column 255.
    pub lambda_max_nm: f64,
    pub lambda_pump_nm: f64,
    pub herald_rows: RowRange,
    pub signal_rows: RowRange,
    /// Coincidence gate width.
    pub tau_ns: f64,
    /// Total number of column pairs, always 256 x 256.
    pub n_total: u64,
    /// Length of the selection band in pixels, used by the `244 w`
    /// approximation of the band cell count.
    pub band_length_l: f64,
    pub histogram_bin_ns: f64,
    /// Expected signal time-of-flight delay relative to the herald.
    pub peak_offset_ns: f64,
}

impl Default for SpectrometerConfig {
    fn default() -> Self {
        Self {
            lambda_min_nm: 775.0,
            lambda_max_nm: 845.0,
            lambda_pump_nm: 405.0,
            herald_rows: RowRange { start: 96, end: 111 },
            signal_rows: RowRange { start: 144, end: 175 },
            tau_ns: 20.0,
            n_total: COLUMN_PAIRS,
            band_length_l: 244.0,
            histogram_bin_ns: 1.5625,
            peak_offset_ns: 25.0,
        }
    }
}

impl SpectrometerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.lambda_pump_nm > 0.0 && self.lambda_pump_nm.is_finite()) {
            return bad("lambda_pump_nm", "must be a positive finite wavelength");
        }
        if !(self.lambda_min_nm < self.lambda_max_nm) || !self.lambda_max_nm.is_finite() {
            return bad("lambda_min_nm", "must be below lambda_max_nm");
        }
        if self.lambda_min_nm <= self.lambda_pump_nm {
            return bad("lambda_min_nm", "imaged range must lie above the pump wavelength");
        }
        if self.herald_rows.overlaps(&self.signal_rows) {
            return bad("herald_rows", "herald and signal row bands overlap");
        }
        if !(self.tau_ns > 0.0 && self.tau_ns.is_finite()) {
            return bad("tau_ns", "must be positive");
        }
        if self.n_total != COLUMN_PAIRS {
            return bad("n_total", "must equal 256 x 256 = 65536");
        }
        if !(self.band_length_l > 0.0) {
            return bad("band_length_l", "must be positive");
        }
        if !(self.histogram_bin_ns > 0.0 && self.histogram_bin_ns.is_finite()) {
            return bad("histogram_bin_ns", "must be positive");
        }
        if !self.peak_offset_ns.is_finite() {
            return bad("peak_offset_ns", "must be finite");
        }
        Ok(())
    }

    pub fn arm_of_row(&self, row: u16) -> Arm {
        if self.herald_rows.contains(row) {
            Arm::Herald
        } else if self.signal_rows.contains(row) {
            Arm::Signal
        } else {
            Arm::Unassigned
        }
    }

    fn nm_per_column(&self) -> f64 {
        (self.lambda_max_nm - self.lambda_min_nm) / f64::from(MAX_PIXEL)
    }

    /// Wavelength imaged at a (fractional) column.
    pub fn wavelength_at_column(&self, col: f64) -> Result<f64> {
        if !(0.0..=f64::from(MAX_PIXEL)).contains(&col) {
            return Err(Error::Domain(format!("column {col} outside [0, {MAX_PIXEL}]")));
        }
        Ok(self.lambda_min_nm + col * self.nm_per_column())
    }

    /// Inverse of [`wavelength_at_column`](Self::wavelength_at_column).
    /// Wavelengths outside the imaged range give columns outside [0, 255].
    pub fn column_at_wavelength(&self, lambda_nm: f64) -> f64 {
        (lambda_nm - self.lambda_min_nm) / self.nm_per_column()
    }

    /// Signal column expected for a herald detected at `herald_col`. May lie
    /// outside the sensor, in which case the partner is not imaged.
    pub fn expected_signal_column(&self, herald_col: f64) -> Result<f64> {
        let lambda_h = self.wavelength_at_column(herald_col)?;
        let lambda_s = conjugate_wavelength(lambda_h, self.lambda_pump_nm)?;
        Ok(self.column_at_wavelength(lambda_s))
    }

    pub fn in_selection_band(&self, signal_col: u16, herald_col: u16, w: f64) -> bool {
        if signal_col > MAX_PIXEL {
            return false;
        }
        match self.expected_signal_column(f64::from(herald_col)) {
            Ok(e) => on_sensor(e) && (f64::from(signal_col) - e).abs() <= w / 2.0,
            Err(_) => false,
        }
    }
}

#[inline]
fn on_sensor(col: f64) -> bool {
    (0.0..=f64::from(MAX_PIXEL)).contains(&col)
}

/// Energy-conservation partner of `lambda_h` for a pump at `lambda_p`:
/// `λs = λp λh / (λh − λp)`. Applying it twice returns the input.
pub fn conjugate_wavelength(lambda_h: f64, lambda_p: f64) -> Result<f64> {
    if !(lambda_h > lambda_p) || !(lambda_p > 0.0) {
        return Err(Error::Domain(format!(
            "wavelength {lambda_h} nm must exceed pump wavelength {lambda_p} nm"
        )));
    }
    Ok(lambda_p * lambda_h / (lambda_h - lambda_p))
}

/// Precomputed selection band of width `w` over all herald columns.
///
/// An infinite width selects every column pair, including herald columns
/// whose partner falls off the sensor, so it is identical to no spectral
/// filtering at all.
#[derive(Debug, Clone)]
pub struct SelectionBand {
    width: f64,
    /// Expected signal column per herald column, `None` when off-sensor.
    expected: Vec<Option<f64>>,
    /// Inclusive signal-column interval accepted for each herald column.
    accepted: Vec<Option<(u16, u16)>>,
}

impl SelectionBand {
    pub fn new(cfg: &SpectrometerConfig, w: f64) -> Result<Self> {
        if !(w >= 1.0) {
            return Err(Error::Config(format!("selection band width {w} must be >= 1")));
        }
        let mut expected = Vec::with_capacity(SENSOR_SIZE);
        let mut accepted = Vec::with_capacity(SENSOR_SIZE);
        for j in 0..SENSOR_SIZE {
            let e = cfg.expected_signal_column(j as f64)?;
            if w.is_infinite() {
                expected.push(on_sensor(e).then_some(e));
                accepted.push(Some((0, MAX_PIXEL)));
                continue;
            }
            if !on_sensor(e) {
                expected.push(None);
                accepted.push(None);
                continue;
            }
            expected.push(Some(e));
            let lo = (e - w / 2.0).ceil().max(0.0);
            let hi = (e + w / 2.0).floor().min(f64::from(MAX_PIXEL));
            accepted.push((lo <= hi).then(|| (lo as u16, hi as u16)));
        }
        Ok(Self {
            width: w,
            expected,
            accepted,
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn is_full(&self) -> bool {
        self.width.is_infinite()
    }

    #[inline]
    pub fn contains(&self, signal_col: u16, herald_col: u16) -> bool {
        match self.accepted.get(usize::from(herald_col)) {
            Some(Some((lo, hi))) => (*lo..=*hi).contains(&signal_col),
            _ => false,
        }
    }

    pub fn expected_column(&self, herald_col: u16) -> Option<f64> {
        self.expected.get(usize::from(herald_col)).copied().flatten()
    }

    /// Accepted signal-column interval for a herald column.
    pub fn accepted_range(&self, herald_col: u16) -> Option<(u16, u16)> {
        self.accepted.get(usize::from(herald_col)).copied().flatten()
    }

    /// Number of column pairs inside the band (N').
    pub fn cell_count(&self) -> u64 {
        self.accepted
            .iter()
            .flatten()
            .map(|(lo, hi)| u64::from(hi - lo) + 1)
            .sum()
    }
}
