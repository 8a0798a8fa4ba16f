use condflow::io::{Checkpoint, TrainingMeta};
use condflow::toy::{Dataset, ToyProblem};
use condflow::training::{init_model, train, TrainConfig, TrainReport};
use condflow::transforms::Transform;
use condflow::{FlowConfig, FlowModel64, Layer, ScaleVariant, SplineConfig, Tensor64, TransformKind};

fn small_config(kind: TransformKind, iterations: usize) -> TrainConfig {
    let model = FlowConfig {
        hidden_widths: vec![16, 16],
        ..FlowConfig::toy(kind)
    };
    TrainConfig {
        batch_size: 200,
        iterations,
        ..TrainConfig::toy(model, 4)
    }
}

fn data() -> Dataset {
    ToyProblem::default().gen_training_pairs(2000, 11, true).unwrap()
}

fn run(cfg: &TrainConfig, d: &Dataset) -> TrainReport<f64> {
    let model = init_model::<f64>(cfg).unwrap();
    train(cfg, &d.x, &d.y, model, |_| {}).unwrap()
}

const UNIT: TransformKind = TransformKind::Affine {
    variant: ScaleVariant::UnitBounded,
};

#[test]
fn identical_seeds_give_bitwise_identical_runs() {
    let d = data();
    let cfg = small_config(TransformKind::Spline(SplineConfig::default()), 60);
    let (a, b) = (run(&cfg, &d), run(&cfg, &d));
    let bits = |r: &TrainReport<f64>| r.curve.iter().map(|c| c.nll.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.model, b.model);

    let other = run(&TrainConfig { seed: 5, ..cfg }, &d);
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn zero_iterations_leave_the_model_untouched() {
    let d = data();
    let cfg = small_config(UNIT, 0);
    let fresh = init_model::<f64>(&cfg).unwrap();
    let report = run(&cfg, &d);
    assert_eq!(report.model, fresh);
    assert!(report.curve.is_empty());
}

#[test]
fn training_lowers_the_loss() {
    let d = data();
    let report = run(&small_config(UNIT, 400), &d);
    let first = report.curve[0].nll;
    let last = report.final_nll(20);
    assert!(first - last >= 1.0, "first {first} last {last}");
    assert_eq!(report.skipped, 0);
    assert!(!report.unstable);
}

/// Every coupling scale the model applies to the rows of `x`.
fn coupling_scales(model: &FlowModel64, x: &Tensor64, y: &Tensor64) -> Vec<f64> {
    let pass = model.forward_batch(x, y, true).unwrap();
    let features = pass.features.unwrap();
    let y_enc = model.encoder().encode(y).unwrap();
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let Layer::Coupling(c) = layer else { continue };
        let input = &features[i];
        for r in 0..input.rows() {
            let h = c
                .net
                .conditioner_forward(&input.row_slice(r)[..c.split - 1], y_enc.row_slice(r))
                .unwrap();
            match c.kind.parameterize(&h) {
                Transform::Affine(p) => out.push(p.s),
                other => panic!("expected an affine coupling, got {other:?}"),
            }
        }
    }
    out
}

#[test]
fn unit_bounded_scales_stay_in_the_unit_interval_while_training() {
    let d = data();
    let probe = d.slice(0, 500);
    // runs with a shared seed are prefixes of one another
    for iterations in [0, 1, 50, 150, 300] {
        let report = run(&small_config(UNIT, iterations), &d);
        let scales = coupling_scales(&report.model, &probe.x, &probe.y);
        assert!(!scales.is_empty());
        for s in scales {
            assert!(s > 0.0 && s <= 1.0, "s = {s} after {iterations} iterations");
        }
    }
}

#[test]
fn trained_checkpoint_reloads_with_identical_densities() {
    let d = data();
    let cfg = small_config(TransformKind::Spline(SplineConfig::default()), 40);
    let report = run(&cfg, &d);
    let meta = TrainingMeta {
        config: cfg.clone(),
        final_nll: Some(report.final_nll(10)),
        iterations: cfg.iterations,
        skipped: report.skipped,
        unstable: report.unstable,
    };
    let ck = Checkpoint::from_model(&report.model, cfg.seed, Some(meta)).unwrap();
    let text = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back.to_json().unwrap(), text);
    let model: FlowModel64 = back.to_model().unwrap();
    assert_eq!(model, report.model);
    let probe = d.slice(100, 300);
    let a = report.model.log_prob_batch(&probe.x, &probe.y).unwrap();
    let b = model.log_prob_batch(&probe.x, &probe.y).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn datasets_survive_csv_and_blob_round_trips() {
    let d = ToyProblem::default().gen_training_pairs(257, 3, true).unwrap();
    assert_eq!(Dataset::from_csv(&d.to_csv()).unwrap(), d);
    let mut blob = Vec::new();
    d.write_blob(&mut blob).unwrap();
    assert_eq!(Dataset::read_blob(blob.as_slice()).unwrap(), d);

    let last = blob.len() - 40;
    blob[last] ^= 1;
    assert!(Dataset::read_blob(blob.as_slice()).is_err());
}

#[test]
fn too_small_a_dataset_is_rejected() {
    let d = ToyProblem::default().gen_training_pairs(100, 0, true).unwrap();
    let cfg = small_config(UNIT, 5);
    let model = init_model::<f64>(&cfg).unwrap();
    assert!(train(&cfg, &d.x, &d.y, model, |_| {}).is_err());
}
