//! Summary metrics for trained checkpoints and the pass/fail checks applied
//! to them.

use condflow::diagnostics::{
    decile_escape, escape_rate, fit_feature_stats, ood_ranking, variance_trace_each, ErrorPolicy, RankRecord,
};
use condflow::io::Checkpoint;
use condflow::{FlowModel64, Tensor64};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Thresholds};
use crate::CliError;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub checkpoint: String,
    pub transform: String,
    pub seed: u64,
    pub final_nll: Option<f64>,
    pub escape_in: f64,
    pub escape_ood: f64,
    pub max_ratio_in: f64,
    pub max_ratio_ood: f64,
    pub nonfinite_ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean_in: f64,
    pub mean_ood: f64,
    pub top_decile_escape: Option<f64>,
    pub bottom_decile_escape: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub comparison: String,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub samples: usize,
    pub tau: f64,
    pub seed: u64,
    pub heldout_seed: u64,
    pub affine: Vec<ModelSummary>,
    pub spline: Option<ModelSummary>,
    pub ood_scores: ScoreSummary,
    pub thresholds: Thresholds,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Held-out measurements drawn from the configured problem, `n x 2`.
pub fn heldout_conditions(cfg: &RunConfig, n: usize) -> Result<Tensor64, CliError> {
    Ok(cfg
        .problem
        .gen_training_pairs(n, cfg.data.heldout_seed(), cfg.data.noisy)?
        .y)
}

/// Escape fractions and variance ratios with one held-out condition per
/// sample, unshifted and shifted.
pub fn summarize_model(
    cfg: &RunConfig,
    label: &str,
    checkpoint: &Checkpoint,
    model: &FlowModel64,
) -> Result<ModelSummary, CliError> {
    let ev = &cfg.evaluate;
    let y_in = heldout_conditions(cfg, ev.n)?;
    let y_ood = cfg.problem.make_ood_batch(&y_in);
    let policy = ErrorPolicy {
        margin: ev.margin,
        ..ErrorPolicy::toy(2)
    };
    let esc = |ys: &Tensor64| -> Result<f64, CliError> {
        let samples = model.sample_each(ys, ev.tau, ev.seed)?;
        Ok(escape_rate(&samples, &policy)?.fraction)
    };
    let trace_in = variance_trace_each(model, &y_in, ev.tau, ev.seed)?;
    let trace_ood = variance_trace_each(model, &y_ood, ev.tau, ev.seed)?;
    Ok(ModelSummary {
        checkpoint: label.to_string(),
        transform: model.config().transform.label().to_string(),
        seed: checkpoint.rng.seed,
        final_nll: checkpoint.training.as_ref().and_then(|t| t.final_nll),
        escape_in: esc(&y_in)?,
        escape_ood: esc(&y_ood)?,
        max_ratio_in: trace_in.max_ratio(),
        max_ratio_ood: trace_ood.max_ratio(),
        nonfinite_ood: trace_ood.records.iter().map(|r| r.nonfinite_count).sum(),
    })
}

/// The ranking inputs: `n_in` held-out measurements followed by the first
/// `n_ood` of them shifted.
pub fn ranking_conditions(cfg: &RunConfig) -> Result<(Tensor64, usize), CliError> {
    let r = &cfg.ood_rank;
    let base = heldout_conditions(cfg, r.n_in.max(r.n_ood))?;
    let shifted = cfg.problem.make_ood_batch(&base);
    let mut data = base.data()[..2 * r.n_in].to_vec();
    data.extend_from_slice(&shifted.data()[..2 * r.n_ood]);
    Ok((Tensor64::new(r.n_in + r.n_ood, 2, data)?, r.n_in))
}

/// OOD ranking of [`ranking_conditions`] with stats fitted on `train_y`.
pub fn rank_conditions(cfg: &RunConfig, model: &FlowModel64, train_y: &Tensor64) -> Result<Vec<RankRecord>, CliError> {
    let r = &cfg.ood_rank;
    let stats = fit_feature_stats(model.encoder(), train_y, r.stats)?;
    let (ys, _) = ranking_conditions(cfg)?;
    let policy = ErrorPolicy {
        margin: r.margin,
        ..ErrorPolicy::toy(2)
    };
    Ok(ood_ranking(model, &stats, &ys, r.samples_per_input, r.tau, r.seed, &policy)?)
}

pub fn score_summary(cfg: &RunConfig, records: &[RankRecord]) -> ScoreSummary {
    let n_in = cfg.ood_rank.n_in;
    let mean = |pick: &dyn Fn(usize) -> bool| {
        let s: Vec<f64> = records.iter().filter(|r| pick(r.input_index)).map(|r| r.score).collect();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    };
    let (top, bottom) = decile_escape(records, cfg.ood_rank.decile);
    ScoreSummary {
        mean_in: mean(&|i| i < n_in),
        mean_ood: mean(&|i| i >= n_in),
        top_decile_escape: Some(top),
        bottom_decile_escape: Some(bottom),
    }
}

fn check(name: &str, value: f64, comparison: &str, threshold: f64) -> Check {
    let passed = match comparison {
        ">=" => value >= threshold,
        ">" => value > threshold,
        _ => value <= threshold,
    };
    Check {
        name: name.to_string(),
        value,
        comparison: comparison.to_string(),
        threshold,
        passed,
    }
}

/// Applies the thresholds. The ratio check passes if any affine model
/// reaches it while staying flat in distribution; the others use the first
/// affine model.
pub fn checks(
    t: &Thresholds,
    affine: &[ModelSummary],
    spline: Option<&ModelSummary>,
    scores: &ScoreSummary,
) -> Vec<Check> {
    let mut out = Vec::new();
    if !affine.is_empty() {
        let best = affine
            .iter()
            .filter(|m| m.max_ratio_in <= t.max_in_ratio)
            .map(|m| m.max_ratio_ood)
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(check("affine_ood_variance_ratio", best, ">=", t.affine_min_ood_ratio));
        let first = &affine[0];
        out.push(check("affine_in_variance_ratio", first.max_ratio_in, "<=", t.max_in_ratio));
        out.push(check("affine_ood_escape", first.escape_ood, ">=", t.affine_min_ood_escape));
        out.push(check("affine_in_escape", first.escape_in, "<=", t.affine_max_in_escape));
    }
    if let Some(s) = spline {
        out.push(check("spline_ood_escape", s.escape_ood, "<=", t.spline_max_ood_escape));
        out.push(check("spline_ood_variance_ratio", s.max_ratio_ood, "<=", t.spline_max_ood_ratio));
        out.push(check("spline_in_variance_ratio", s.max_ratio_in, "<=", t.max_in_ratio));
        if let Some(a) = affine.first() {
            let gap = match (s.final_nll, a.final_nll) {
                (Some(x), Some(y)) => (x - y).abs(),
                _ => f64::INFINITY,
            };
            out.push(check("nll_gap", gap, "<=", t.max_nll_gap));
        }
    }
    let factor = scores.mean_ood / scores.mean_in;
    out.push(check("ood_score_factor", factor, ">=", t.min_score_factor));
    if let (Some(top), Some(bottom)) = (scores.top_decile_escape, scores.bottom_decile_escape) {
        out.push(check("decile_escape_gap", top - bottom, ">", 0.0));
    }
    out
}
