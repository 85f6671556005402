//! Per-subcommand experiment configurations, loaded from JSON with defaults
//! that reproduce the desk-scale experiments.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use deepgp_core::data::{self, Dataset};
use deepgp_core::deepgp::{two_layer_add_rbf, DeepGpArchitecture};
use deepgp_core::{Error, Result};

/// HMC settings with desk-scale defaults; the paper-scale 500/500 protocol is
/// a config change away.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcSettings {
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    pub init_step_size: f64,
    pub integration_time: f64,
}

impl Default for HmcSettings {
    fn default() -> Self {
        HmcSettings {
            warmup: 200,
            samples: 200,
            target_accept: 0.8,
            max_leapfrog: 1024,
            init_step_size: 0.1,
            integration_time: 0.3,
        }
    }
}

impl HmcSettings {
    pub fn to_config(&self, seed: u64) -> deepgp_core::HmcConfig {
        deepgp_core::HmcConfig {
            warmup: self.warmup,
            samples: self.samples,
            target_accept: self.target_accept,
            max_leapfrog: self.max_leapfrog,
            init_step_size: self.init_step_size,
            integration_time: self.integration_time,
            seed,
        }
    }
}

/// Where a subcommand's data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    SynthStep {
        n: usize,
        noise: f64,
    },
    SynthDgp {
        n: usize,
        d: usize,
        gen_width: usize,
        gen_noise: f64,
    },
    Csv {
        path: PathBuf,
        target: String,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::SynthStep { n: 100, noise: 0.05 }
    }
}

impl DatasetSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSource::SynthStep { n, noise } => data::synth_step(*n, *noise, seed),
            DatasetSource::SynthDgp {
                n,
                d,
                gen_width,
                gen_noise,
            } => {
                let arch = two_layer_add_rbf(*d, *gen_width, 1.0, 1.0, 1.0, 1.0, *gen_noise)?;
                data::synth_dgp(&arch, *n, *d, seed)
            }
            DatasetSource::Csv { path, target } => {
                let raw = data::load_csv(path, target)?;
                data::prepare(
                    &raw,
                    data::DEFAULT_FRACTIONS,
                    data::DEFAULT_MAX_TRAIN,
                    seed,
                    &format!("csv:{}", path.display()),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensityPreset {
    TwoLayer { width: usize },
    ThreeLayer { width: usize },
    Limit,
}

impl DensityPreset {
    pub fn name(&self) -> String {
        match self {
            DensityPreset::TwoLayer { width } => format!("two_layer_w{width}"),
            DensityPreset::ThreeLayer { width } => format!("three_layer_w{width}"),
            DensityPreset::Limit => "limit".to_string(),
        }
    }

    /// All presets share the prior covariance of the width-1 three-layer model
    /// (unit hyperparameters).
    pub fn architecture(&self) -> Result<DeepGpArchitecture> {
        use deepgp_core::deepgp::{matched_two_layer, three_layer_add_rbf, LayerSpec};
        use deepgp_core::KernelSpec;
        match self {
            DensityPreset::TwoLayer { width } => matched_two_layer(1, *width, 1.0),
            DensityPreset::ThreeLayer { width } => {
                three_layer_add_rbf(1, *width, *width, [1.0; 6], 1.0)
            }
            DensityPreset::Limit => DeepGpArchitecture::new(
                1,
                1.0,
                vec![LayerSpec {
                    width: 1,
                    kernel: KernelSpec::Quadrature3Layer {
                        o1: 1.0,
                        ell1: 1.0,
                        o2: 1.0,
                        ell2: 1.0,
                        o3: 1.0,
                        ell3: 1.0,
                        width: 1,
                        nodes: 21,
                    },
                }],
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityGridConfig {
    pub presets: Vec<DensityPreset>,
    pub x1: f64,
    pub x2: f64,
    pub grid_points: usize,
    pub half_range: f64,
    pub nodes: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for DensityGridConfig {
    fn default() -> Self {
        DensityGridConfig {
            presets: vec![
                DensityPreset::TwoLayer { width: 1 },
                DensityPreset::TwoLayer { width: 2 },
                DensityPreset::TwoLayer { width: 4 },
                DensityPreset::TwoLayer { width: 8 },
                DensityPreset::ThreeLayer { width: 1 },
                DensityPreset::ThreeLayer { width: 2 },
                DensityPreset::Limit,
            ],
            x1: -0.5,
            x2: 0.5,
            grid_points: 20,
            half_range: 3.0,
            nodes: 7,
            seed: 0,
            out: PathBuf::from("out/density-grid"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WidthSweepConfig {
    pub dataset: DatasetSource,
    pub widths: Vec<usize>,
    pub hmc: HmcSettings,
    pub map_steps: usize,
    pub map_lr: f64,
    pub hyper_steps: usize,
    pub hyper_lr: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for WidthSweepConfig {
    fn default() -> Self {
        WidthSweepConfig {
            dataset: DatasetSource::default(),
            widths: vec![1, 2, 4, 8, 16],
            hmc: HmcSettings::default(),
            map_steps: 1000,
            map_lr: 0.01,
            hyper_steps: 100,
            hyper_lr: 0.1,
            seed: 0,
            out: PathBuf::from("out/width-sweep"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthCompareConfig {
    /// Defaults to data generated from the 3-layer prior itself.
    pub dataset: Option<DatasetSource>,
    pub n: usize,
    pub input_dim: usize,
    pub hmc: HmcSettings,
    pub map_steps: usize,
    pub map_lr: f64,
    pub hyper_steps: usize,
    pub hyper_lr: f64,
    /// First-layer width of the 3-layer model (H2 fixed at 8).
    pub h1: usize,
    pub h2: usize,
    pub quadrature_nodes: usize,
    pub moment_check_samples: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for DepthCompareConfig {
    fn default() -> Self {
        DepthCompareConfig {
            dataset: None,
            n: 80,
            input_dim: 1,
            hmc: HmcSettings::default(),
            map_steps: 1000,
            map_lr: 0.01,
            hyper_steps: 100,
            hyper_lr: 0.1,
            h1: 2,
            h2: 8,
            quadrature_nodes: 11,
            moment_check_samples: 200_000,
            seed: 0,
            out: PathBuf::from("out/depth-compare"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub widths: Vec<usize>,
    pub concentration_samples: usize,
    pub invariance_widths: Vec<usize>,
    pub invariance_samples: usize,
    pub cf_samples: usize,
    pub cf_scales: Vec<f64>,
    pub x1: f64,
    pub x2: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            widths: vec![1, 4, 16, 64, 256],
            concentration_samples: 100_000,
            invariance_widths: vec![1, 2, 8, 32],
            invariance_samples: 200_000,
            cf_samples: 200_000,
            cf_scales: vec![0.75, 1.0, 1.5, 2.0, 2.5],
            x1: -0.5,
            x2: 0.5,
            seed: 0,
            out: PathBuf::from("out/convergence-check"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub gen_widths: Vec<usize>,
    pub fit_widths: Vec<usize>,
    pub n: usize,
    pub input_dim: usize,
    pub gen_noise: f64,
    pub hmc: HmcSettings,
    pub map_steps: usize,
    pub map_lr: f64,
    pub hyper_steps: usize,
    pub hyper_lr: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            gen_widths: vec![1, 2, 4, 8],
            fit_widths: vec![1, 2, 4, 8],
            n: 120,
            input_dim: 4,
            gen_noise: 0.05,
            hmc: HmcSettings::default(),
            map_steps: 1000,
            map_lr: 0.01,
            hyper_steps: 100,
            hyper_lr: 0.1,
            seed: 0,
            out: PathBuf::from("out/control"),
        }
    }
}

/// Load a config from an optional JSON file, then apply `--seed`/`--out`
/// overrides.
pub fn load_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&std::path::Path>,
) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::data(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::data(format!("invalid config {}: {e}", p.display())))
        }
        None => Ok(T::default()),
    }
}
