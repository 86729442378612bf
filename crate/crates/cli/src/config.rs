use std::path::Path;

use detinv::attribution::ExtremalConfig;
use detinv::detector::{Arch, DetectorConfig};
use detinv::inversion::InversionConfig;
use detinv::shapes::{splitmix, DatasetSpec};
use detinv::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Settings of the analysis protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Layouts inverted per model by `transfer`.
    pub transfer_layouts: usize,
    pub context_runs: usize,
    /// Side of the anchor visualized by `context` when no row is given.
    pub context_anchor_side: f64,
    pub sweep_runs: usize,
    /// Iterations of single-anchor runs (`inversion.iterations` is used for layouts).
    pub anchor_iterations: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self { transfer_layouts: 50, context_runs: 200, context_anchor_side: 48.0, sweep_runs: 5, anchor_iterations: 200 }
    }
}

/// Full experiment configuration; every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DatasetSpec,
    /// Architecture settings; categories are always taken from the data.
    pub detector: Option<DetectorConfig>,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
    pub extremal: ExtremalConfig,
    pub analysis: AnalysisSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data: DatasetSpec::default(),
            detector: None,
            train: TrainConfig::default(),
            inversion: InversionConfig { iterations: 300, ..InversionConfig::default() },
            extremal: ExtremalConfig::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

/// Seed of one named component derived from the master seed.
pub fn component_seed(master: u64, component: &str) -> u64 {
    let mut h = master;
    for b in component.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().to_string();
            CliError::Config(if path == "." { message } else { format!("{path}: {message}") })
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Overwrite every component seed from one master seed.
    pub fn apply_master_seed(&mut self, master: u64) {
        self.seed = Some(master);
        self.data.seed = component_seed(master, "data");
        self.train.seed = component_seed(master, "train");
        self.inversion.seed = component_seed(master, "inversion");
        if let Some(d) = &mut self.detector {
            d.init_seed = component_seed(master, "init");
        }
    }

    /// Checks that need no model; model-dependent checks run after loading.
    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate().map_err(|e| CliError::Config(format!("data: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        if let Some(d) = &self.detector {
            d.validate().map_err(|e| CliError::Config(format!("detector: {e}")))?;
        }
        let e = &self.extremal;
        if !(e.area > 0.0 && e.area <= 1.0) || e.grid == 0 || e.lr <= 0.0 || e.baseline_sigma < 0.0 {
            return Err(CliError::Config("extremal: area must lie in (0, 1], grid and lr positive".into()));
        }
        Ok(())
    }

    pub fn detector_config(&self, two_stage: bool) -> DetectorConfig {
        let mut cfg = match &self.detector {
            Some(d) => d.clone(),
            None if two_stage => DetectorConfig::two_stage(),
            None => DetectorConfig::single_stage(),
        };
        cfg.arch = if two_stage { Arch::TwoStage } else { Arch::SingleStage };
        if let Some(master) = self.seed {
            cfg.init_seed = component_seed(master, "init");
        }
        cfg.categories = self.data.category_names();
        cfg.image_width = self.data.image_width;
        cfg.image_height = self.data.image_height;
        cfg
    }
}
