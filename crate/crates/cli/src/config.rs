use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qtd_core::coincidence::AnalysisOptions;
use qtd_core::pipeline::PipelineConfig;
use qtd_core::roc::RocConfig;
use qtd_core::sim::{IntensifierParams, SourceParams};
use qtd_core::theory::TheoryParams;
use qtd_core::SpectrometerConfig;

use crate::Failure;

/// Everything a run needs. Missing sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub spectrometer: SpectrometerConfig,
    /// When absent, the source is tuned to the reference operating point
    /// for the configured gate width.
    pub source: Option<SourceParams>,
    pub intensifier: IntensifierParams,
    /// Bypass the intensifier: one hit per photon and no time-walk.
    pub ideal: bool,
    pub pipeline: PipelineConfig,
    pub analysis: AnalysisOptions,
    pub roc: RocConfig,
    pub theory: TheoryParams,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.spectrometer
            .validate()
            .map_err(|e| Failure::Usage(format!("spectrometer.{}", e.to_string().trim_start_matches("invalid configuration: "))))?;
        self.source().validate()?;
        if !self.ideal {
            self.intensifier.validate()?;
        }
        self.pipeline.validate()?;
        self.theory.validate()?;
        self.roc.validate()?;
        Ok(())
    }

    pub fn source(&self) -> SourceParams {
        self.source
            .clone()
            .unwrap_or_else(|| SourceParams::reference_regime(self.spectrometer.tau_ns))
    }

    pub fn intensifier(&self) -> Option<&IntensifierParams> {
        (!self.ideal).then_some(&self.intensifier)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
