//! Simulation and analysis of spectro-temporal photon-pair coincidences.
//!
//! A correlated-pair source illuminates a target while a broadband jammer
//! floods the signal arm. Both arms are imaged by a time-stamping camera
//! behind a grating, so every photon carries an arrival time and a
//! wavelength. Gating on the arrival-time difference rejects most of the
//! background; additionally requiring the pair to satisfy energy
//! conservation rejects far more.
//!
//! - [`model`]: domain types and spectrometer geometry
//! - [`eventio`]: binary and CSV event files
//! - [`sim`]: seeded Monte Carlo generator of raw hit streams
//! - [`pipeline`]: clustering, time-walk calibration and centroiding
//! - [`coincidence`]: matching, histograms, accidentals, SBR/SNR
//! - [`theory`]: closed-form SBR/SNR, enhancement factors, classical comparison
//! - [`roc`]: receiver operating characteristics

pub mod coincidence;
pub mod error;
pub mod eventio;
pub mod model;
pub mod pipeline;
pub mod roc;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};
pub use eventio::{EventFile, EventWriter};
pub use model::{Arm, PhotonEvent, PixelHit, SelectionBand, SpectrometerConfig};
