//! Run configuration: one JSON document with a section per command. Every
//! field has a default, unknown keys are rejected, and command-line flags
//! override whatever the document sets.

use std::path::{Path, PathBuf};

use condflow::diagnostics::StatsOptions;
use condflow::toy::ToyProblem;
use condflow::training::AdamConfig;
use condflow::{ScaleVariant, SplineConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ToyProblem,
    pub data: DataSettings,
    pub train: TrainSettings,
    pub sample: SampleSettings,
    pub variance_trace: TraceSettings,
    pub ood_rank: RankSettings,
    pub convex_demo: ConvexSettings,
    pub evaluate: EvaluateSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// Where the training pairs come from: a CSV/blob file, or regenerated from
/// `seed` with `problem.n_samples` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub path: Option<PathBuf>,
    pub seed: u64,
    /// Add measurement noise to `y`.
    pub noisy: bool,
    /// Seed of the held-out measurements used for evaluation. Defaults to a
    /// value derived from `seed`.
    pub heldout_seed: Option<u64>,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            path: None,
            seed: 0,
            noisy: true,
            heldout_seed: None,
        }
    }
}

impl DataSettings {
    pub fn heldout_seed(&self) -> u64 {
        self.heldout_seed
            .unwrap_or_else(|| condflow::rng::derive(self.seed, "heldout"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransformChoice {
    Affine,
    Spline,
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VariantChoice {
    UnitBounded,
    ShiftedBounded,
    Unbounded,
}

impl From<VariantChoice> for ScaleVariant {
    fn from(v: VariantChoice) -> Self {
        match v {
            VariantChoice::UnitBounded => ScaleVariant::UnitBounded,
            VariantChoice::ShiftedBounded => ScaleVariant::ShiftedBounded,
            VariantChoice::Unbounded => ScaleVariant::Unbounded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub seed: u64,
    pub transform: TransformChoice,
    /// Scale bound for the affine transform.
    pub variant: VariantChoice,
    pub spline: SplineConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    /// Iterations averaged into the reported final NLL.
    pub final_nll_window: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            transform: TransformChoice::Affine,
            variant: VariantChoice::UnitBounded,
            spline: SplineConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 1000,
            iterations: 8000,
            final_nll_window: 100,
        }
    }
}

/// How conditions are chosen for sampling: one fixed `y`, or one held-out
/// measurement per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
    pub y: Option<[f64; 2]>,
    /// Apply the OOD shift to the conditions.
    pub ood: bool,
    pub margin: f64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            n: 10_000,
            tau: 1.0,
            seed: 0,
            y: None,
            ood: false,
            margin: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSettings {
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
    /// Fixed in-distribution condition; held-out measurements when absent.
    pub y: Option<[f64; 2]>,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            n: 10_000,
            tau: 1.0,
            seed: 0,
            y: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSettings {
    pub n_in: usize,
    pub n_ood: usize,
    pub samples_per_input: usize,
    pub tau: f64,
    pub seed: u64,
    pub margin: f64,
    pub stats: StatsOptions,
    /// Share of the ranking compared at each end.
    pub decile: f64,
}

impl Default for RankSettings {
    fn default() -> Self {
        Self {
            n_in: 1000,
            n_ood: 1000,
            samples_per_input: 100,
            tau: 1.0,
            seed: 0,
            margin: 0.0,
            stats: StatsOptions::default(),
            decile: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexSettings {
    pub x: Vec<f64>,
    pub sigma_z: f64,
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Variant used by `--bounded`.
    pub bounded_variant: VariantChoice,
}

impl Default for ConvexSettings {
    fn default() -> Self {
        let d = condflow::training::ConvexDemoConfig::new(ScaleVariant::UnitBounded);
        Self {
            x: d.x,
            sigma_z: d.sigma_z,
            iterations: d.iterations,
            adam: d.adam,
            bounded_variant: VariantChoice::UnitBounded,
        }
    }
}

/// Pass/fail thresholds applied by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub affine_min_ood_ratio: f64,
    pub max_in_ratio: f64,
    pub affine_min_ood_escape: f64,
    pub affine_max_in_escape: f64,
    pub spline_max_ood_escape: f64,
    pub spline_max_ood_ratio: f64,
    pub max_nll_gap: f64,
    pub min_score_factor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            affine_min_ood_ratio: 100.0,
            max_in_ratio: 10.0,
            affine_min_ood_escape: 0.01,
            affine_max_in_escape: 0.005,
            spline_max_ood_escape: 0.001,
            spline_max_ood_ratio: 10.0,
            max_nll_gap: 0.5,
            min_score_factor: 2.0,
        }
    }
}

impl Thresholds {
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), CliError> {
        let slot = match name {
            "affine_min_ood_ratio" => &mut self.affine_min_ood_ratio,
            "max_in_ratio" => &mut self.max_in_ratio,
            "affine_min_ood_escape" => &mut self.affine_min_ood_escape,
            "affine_max_in_escape" => &mut self.affine_max_in_escape,
            "spline_max_ood_escape" => &mut self.spline_max_ood_escape,
            "spline_max_ood_ratio" => &mut self.spline_max_ood_ratio,
            "max_nll_gap" => &mut self.max_nll_gap,
            "min_score_factor" => &mut self.min_score_factor,
            _ => return Err(CliError::usage(format!("unknown threshold `{name}`"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
    pub margin: f64,
    pub thresholds: Thresholds,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            n: 10_000,
            tau: 1.0,
            seed: 0,
            margin: 0.0,
            thresholds: Thresholds::default(),
        }
    }
}
