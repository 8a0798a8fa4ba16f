use std::path::{Path, PathBuf};

use condflow::diagnostics::{self as diag, convex_oracle, escape_rate, ErrorPolicy, VarianceTrace};
use condflow::flow::{repeat_row, FlowConfig};
use condflow::io::{load_checkpoint, Checkpoint, TrainingMeta};
use condflow::toy::Dataset;
use condflow::training::{
    convex_demo as run_convex, convex_trajectory_csv, init_model, loss_curve_csv, train as run_train,
    ConvexDemoConfig, TrainConfig,
};
use condflow::{FlowModel64, ScaleVariant, Tensor64, TransformKind};
use serde_json::json;

use crate::config::{RunConfig, TransformChoice};
use crate::evaluate::{self, heldout_conditions, Summary};
use crate::{
    set, CliError, ConvexArgs, Done, ErrorKind, EvaluateArgs, GenDataArgs, Outputs, RankArgs, SampleArgs, TraceArgs,
    TrainArgs,
};

/// Training pairs from the configured file, or regenerated from the seed.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data.path {
        Some(path) => {
            let is_blob = path.extension().is_some_and(|e| e == "bin");
            let read = || -> condflow::Result<Dataset> {
                if is_blob {
                    Dataset::read_blob(std::io::BufReader::new(std::fs::File::open(path)?))
                } else {
                    Dataset::from_csv(&std::fs::read_to_string(path)?)
                }
            };
            read().map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
        }
        None => Ok(cfg
            .problem
            .gen_training_pairs(cfg.problem.n_samples, cfg.data.seed, cfg.data.noisy)?),
    }
}

pub fn transform_kind(cfg: &RunConfig) -> TransformKind {
    match cfg.train.transform {
        TransformChoice::Affine => TransformKind::Affine {
            variant: cfg.train.variant.into(),
        },
        TransformChoice::Spline => TransformKind::Spline(cfg.train.spline),
        TransformChoice::Additive => TransformKind::Additive,
    }
}

/// Output of [`train_checkpoint`].
pub struct Trained {
    pub model: FlowModel64,
    pub checkpoint: Checkpoint,
    pub loss_curve_csv: String,
}

/// Trains the configured toy model and packs it into a checkpoint.
pub fn train_checkpoint(cfg: &RunConfig) -> Result<Trained, CliError> {
    let t = &cfg.train;
    let data = load_dataset(cfg)?;
    let config = TrainConfig {
        adam: t.adam,
        batch_size: t.batch_size,
        iterations: t.iterations,
        seed: t.seed,
        model: FlowConfig::toy(transform_kind(cfg)),
    };
    let report = run_train(&config, &data.x, &data.y, init_model(&config)?, |_| {})?;
    let final_nll = report.final_nll(t.final_nll_window);
    let meta = TrainingMeta {
        config,
        final_nll: final_nll.is_finite().then_some(final_nll),
        iterations: t.iterations,
        skipped: report.skipped,
        unstable: report.unstable,
    };
    Ok(Trained {
        checkpoint: Checkpoint::from_model(&report.model, t.seed, Some(meta))?,
        loss_curve_csv: loss_curve_csv(&report.curve),
        model: report.model,
    })
}

fn open_model(path: &Path) -> Result<(Checkpoint, FlowModel64), CliError> {
    let checkpoint = load_checkpoint(path).map_err(|e| CliError {
        message: format!("{}: {e}", path.display()),
        ..CliError::from(e)
    })?;
    let model = checkpoint.to_model()?;
    Ok((checkpoint, model))
}

fn json_text(value: &impl serde::Serialize) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn gen_data(cfg: &mut RunConfig, a: GenDataArgs, out: &mut Outputs) -> Result<Done, CliError> {
    set(&mut cfg.data.seed, a.seed);
    set(&mut cfg.problem.n_samples, a.n);
    if a.noise_free {
        cfg.data.noisy = false;
    }
    let data = cfg
        .problem
        .gen_training_pairs(cfg.problem.n_samples, cfg.data.seed, cfg.data.noisy)?;
    let mut blob = Vec::new();
    data.write_blob(&mut blob)?;
    out.add(&a.out, data.to_csv());
    out.add(&a.blob.unwrap_or_else(|| a.out.with_extension("bin")), blob);
    Done::print(&json!({ "samples": data.len(), "seed": cfg.data.seed }))
}

pub fn train(cfg: &mut RunConfig, a: TrainArgs, out: &mut Outputs) -> Result<Done, CliError> {
    let t = &mut cfg.train;
    set(&mut t.seed, a.seed);
    set(&mut t.transform, a.transform);
    set(&mut t.variant, a.variant);
    set(&mut t.iterations, a.iterations);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.adam.learning_rate, a.learning_rate);
    a.data.apply(cfg);
    let Trained {
        checkpoint,
        loss_curve_csv,
        ..
    } = train_checkpoint(cfg)?;
    out.add(&a.checkpoint, checkpoint.to_json()?);
    out.add(&a.loss_curve, loss_curve_csv);
    let meta = checkpoint.training.as_ref().expect("training metadata is always set");
    Done::print(&json!({
        "final_nll": meta.final_nll,
        "skipped": meta.skipped,
        "unstable": meta.unstable,
    }))
}

/// Conditions for `n` samples: a fixed `y` repeated, or held-out
/// measurements, optionally shifted.
fn conditions(cfg: &RunConfig, y: Option<[f64; 2]>, n: usize, ood: bool) -> Result<Tensor64, CliError> {
    let ys = match y {
        Some(y) => repeat_row(&y, n),
        None => heldout_conditions(cfg, n)?,
    };
    Ok(if ood { cfg.problem.make_ood_batch(&ys) } else { ys })
}

fn samples_csv(samples: &Tensor64, escaped: &[bool]) -> String {
    let mut s = String::from("sample_index,x1,x2,escaped\n");
    for (i, &e) in escaped.iter().enumerate() {
        s.push_str(&format!(
            "{i},{:.16e},{:.16e},{}\n",
            samples.get(i, 0),
            samples.get(i, 1),
            u8::from(e)
        ));
    }
    s
}

fn clipped_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_clipped.{}", ext.to_string_lossy()),
        None => format!("{stem}_clipped"),
    };
    out.with_file_name(name)
}

pub fn sample(cfg: &mut RunConfig, a: SampleArgs, out: &mut Outputs) -> Result<Done, CliError> {
    let s = &mut cfg.sample;
    set(&mut s.n, a.n);
    set(&mut s.tau, a.tau);
    set(&mut s.seed, a.seed);
    set(&mut s.margin, a.margin);
    if a.y.is_some() {
        s.y = a.y;
    }
    s.ood |= a.ood;
    a.data.apply(cfg);
    let s = &cfg.sample;
    let (_, model) = open_model(&a.checkpoint)?;
    let ys = conditions(cfg, s.y, s.n, s.ood)?;
    let samples = model.sample_each(&ys, s.tau, s.seed)?;
    let policy = ErrorPolicy {
        margin: s.margin,
        ..ErrorPolicy::toy(2)
    };
    let report = escape_rate(&samples, &policy)?;
    out.add(&a.out, samples_csv(&samples, &report.escaped));
    let clipped = a.clipped_out.unwrap_or_else(|| clipped_path(&a.out));
    out.add(&clipped, samples_csv(&report.clipped, &report.escaped));
    Done::print(&json!({
        "escape_fraction": report.fraction,
        "per_dim_counts": report.per_dim_counts,
    }))
}

/// In-distribution and shifted traces under the `variance_trace` settings.
pub fn traces(cfg: &RunConfig, model: &FlowModel64) -> Result<(VarianceTrace, VarianceTrace), CliError> {
    let v = &cfg.variance_trace;
    Ok(match v.y {
        Some(y) => (
            diag::variance_trace(model, &y, v.n, v.tau, v.seed)?,
            diag::variance_trace(model, &cfg.problem.make_ood(y), v.n, v.tau, v.seed)?,
        ),
        None => (
            diag::variance_trace_each(model, &conditions(cfg, None, v.n, false)?, v.tau, v.seed)?,
            diag::variance_trace_each(model, &conditions(cfg, None, v.n, true)?, v.tau, v.seed)?,
        ),
    })
}

pub fn variance_trace(cfg: &mut RunConfig, a: TraceArgs, out: &mut Outputs) -> Result<Done, CliError> {
    let v = &mut cfg.variance_trace;
    set(&mut v.n, a.n);
    set(&mut v.tau, a.tau);
    set(&mut v.seed, a.seed);
    if a.y.is_some() {
        v.y = a.y;
    }
    a.data.apply(cfg);
    let (_, model) = open_model(&a.checkpoint)?;
    let (trace_in, trace_ood) = traces(cfg, &model)?;
    out.add(&a.out_in, trace_in.to_csv());
    out.add(&a.out_ood, trace_ood.to_csv());
    Done::print(&json!({
        "max_ratio_in": trace_in.max_ratio(),
        "max_ratio_ood": trace_ood.max_ratio(),
    }))
}

pub fn ood_rank(cfg: &mut RunConfig, a: RankArgs, out: &mut Outputs) -> Result<Done, CliError> {
    let r = &mut cfg.ood_rank;
    set(&mut r.n_in, a.n_in);
    set(&mut r.n_ood, a.n_ood);
    set(&mut r.samples_per_input, a.samples_per_input);
    set(&mut r.tau, a.tau);
    set(&mut r.seed, a.seed);
    set(&mut r.margin, a.margin);
    if a.uncentered {
        r.stats.centered = false;
    }
    a.data.apply(cfg);
    let (_, model) = open_model(&a.checkpoint)?;
    let data = load_dataset(cfg)?;
    let records = evaluate::rank_conditions(cfg, &model, &data.y)?;
    out.add(&a.out, diag::ranking_csv(&records));
    Done::print(&evaluate::score_summary(cfg, &records))
}

pub fn convex_demo(cfg: &mut RunConfig, a: ConvexArgs, out: &mut Outputs) -> Result<Done, CliError> {
    let c = &mut cfg.convex_demo;
    set(&mut c.iterations, a.iterations);
    set(&mut c.adam.learning_rate, a.learning_rate);
    let variant = if a.unbounded {
        ScaleVariant::Unbounded
    } else {
        c.bounded_variant.into()
    };
    let demo = ConvexDemoConfig {
        variant,
        x: c.x.clone(),
        sigma_z: c.sigma_z,
        iterations: c.iterations,
        adam: c.adam,
    };
    let steps = run_convex(&demo)?;
    out.add(&a.out, convex_trajectory_csv(&steps));
    let last = steps.last().expect("trajectory includes the start");
    let mut summary = json!({ "variant": variant, "final_s": last.s, "final_t": last.t });
    if variant != ScaleVariant::Unbounded {
        let s_max = variant.interval().1;
        let opt = convex_oracle(&demo.x, demo.sigma_z, s_max)?;
        summary["oracle_s"] = json!(opt.s);
        summary["oracle_t"] = json!(opt.t);
    }
    Done::print(&summary)
}

pub fn evaluate_checkpoints(
    cfg: &RunConfig,
    affine: &[PathBuf],
    spline: Option<&Path>,
) -> Result<Summary, CliError> {
    if affine.is_empty() && spline.is_none() {
        return Err(CliError::usage("evaluate needs --affine and/or --spline checkpoints"));
    }
    let mut affine_summaries = Vec::new();
    let mut first_affine = None;
    for path in affine {
        let (ck, model) = open_model(path)?;
        affine_summaries.push(evaluate::summarize_model(cfg, &path.display().to_string(), &ck, &model)?);
        first_affine.get_or_insert(model);
    }
    let mut spline_model = None;
    let spline_summary = match spline {
        Some(path) => {
            let (ck, model) = open_model(path)?;
            let s = evaluate::summarize_model(cfg, &path.display().to_string(), &ck, &model)?;
            spline_model = Some(model);
            Some(s)
        }
        None => None,
    };
    let ranked_model = first_affine.as_ref().or(spline_model.as_ref()).expect("at least one model");
    let data = load_dataset(cfg)?;
    let records = evaluate::rank_conditions(cfg, ranked_model, &data.y)?;
    let scores = evaluate::score_summary(cfg, &records);
    let t = &cfg.evaluate.thresholds;
    let checks = evaluate::checks(t, &affine_summaries, spline_summary.as_ref(), &scores);
    Ok(Summary {
        schema_version: evaluate::SUMMARY_SCHEMA_VERSION,
        samples: cfg.evaluate.n,
        tau: cfg.evaluate.tau,
        seed: cfg.evaluate.seed,
        heldout_seed: cfg.data.heldout_seed(),
        passed: checks.iter().all(|c| c.passed),
        affine: affine_summaries,
        spline: spline_summary,
        ood_scores: scores,
        thresholds: t.clone(),
        checks,
    })
}

pub fn evaluate(cfg: &mut RunConfig, a: EvaluateArgs, out: &mut Outputs) -> Result<Done, CliError> {
    let e = &mut cfg.evaluate;
    set(&mut e.n, a.n);
    set(&mut e.tau, a.tau);
    set(&mut e.seed, a.seed);
    for (name, value) in &a.threshold {
        e.thresholds.set(name, *value)?;
    }
    a.data.apply(cfg);
    let summary = evaluate_checkpoints(cfg, &a.affine, a.spline.as_deref())?;
    out.add(&a.out, json_text(&summary)?);
    let failed: Vec<&str> = summary.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let mut done = Done::print(&json!({ "passed": summary.passed, "failed": failed }))?;
    if !failed.is_empty() {
        done.failure = Some(CliError {
            kind: ErrorKind::Acceptance,
            message: format!("failed checks: {}", failed.join(", ")),
        });
    }
    Ok(done)
}
