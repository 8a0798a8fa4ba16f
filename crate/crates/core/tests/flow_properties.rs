use condflow::rng::seeded;
use condflow::{FlowConfig, FlowModel64, ScaleVariant, SplineConfig, Tensor64, TransformKind};
use proptest::prelude::*;
use rand::Rng;

fn kind(i: usize) -> TransformKind {
    match i {
        0 => TransformKind::Affine {
            variant: ScaleVariant::UnitBounded,
        },
        1 => TransformKind::Affine {
            variant: ScaleVariant::ShiftedBounded,
        },
        2 => TransformKind::Affine {
            variant: ScaleVariant::Unbounded,
        },
        3 => TransformKind::Additive,
        _ => TransformKind::Spline(SplineConfig::default()),
    }
}

/// A toy-shaped model with narrow conditioners and every trainable tensor
/// except the mixers shifted by up to `scale`.
fn random_model(kind: TransformKind, seed: u64, scale: f64) -> FlowModel64 {
    let cfg = FlowConfig {
        hidden_widths: vec![16, 16],
        ..FlowConfig::toy(kind)
    };
    let mut r = seeded(seed);
    let mut model = FlowModel64::new(cfg, &mut r).unwrap();
    for (name, p) in model.params_mut() {
        if !name.contains(".net.") && name.ends_with(".weight") {
            continue;
        }
        for v in p.data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
    model
}

fn jacobian_det(model: &FlowModel64, x: [f64; 2], y: [f64; 2]) -> f64 {
    let h = 1e-5;
    let mut cols = [[0.0; 2]; 2];
    for (j, col) in cols.iter_mut().enumerate() {
        let (mut hi, mut lo) = (x, x);
        hi[j] += h;
        lo[j] -= h;
        let zp = model.flow_forward(&hi, &y).unwrap().0;
        let zm = model.flow_forward(&lo, &y).unwrap().0;
        for i in 0..2 {
            col[i] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    cols[0][0] * cols[1][1] - cols[1][0] * cols[0][1]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_undoes_forward(
        k in 0usize..5,
        seed in any::<u64>(),
        x in prop::array::uniform2(-3.0f64..3.0),
        y in prop::array::uniform2(-3.0f64..3.0),
    ) {
        let model = random_model(kind(k), seed, 0.1);
        let (z, _) = model.flow_forward(&x, &y).unwrap();
        let back = model.flow_inverse(&z, &y).unwrap();
        for i in 0..2 {
            prop_assert!((back[i] - x[i]).abs() <= 1e-8, "{:?} vs {:?}", back, x);
        }
    }

    #[test]
    fn logdet_matches_numerical_jacobian(
        k in 0usize..5,
        seed in any::<u64>(),
        x in prop::array::uniform2(-2.0f64..2.0),
        y in prop::array::uniform2(-2.0f64..2.0),
    ) {
        let model = random_model(kind(k), seed, 0.1);
        let (_, logdet) = model.flow_forward(&x, &y).unwrap();
        let det = jacobian_det(&model, x, y).abs();
        let rel = (logdet.exp() - det).abs() / det;
        prop_assert!(rel <= 1e-5, "exp(logdet) {} vs {} (rel {:e})", logdet.exp(), det, rel);
    }

    #[test]
    fn log_prob_is_base_density_plus_logdet(
        k in 0usize..5,
        seed in any::<u64>(),
        x in prop::array::uniform2(-2.0f64..2.0),
        y in prop::array::uniform2(-2.0f64..2.0),
    ) {
        let model = random_model(kind(k), seed, 0.1);
        let (z, logdet) = model.flow_forward(&x, &y).unwrap();
        let base = -(z[0] * z[0] + z[1] * z[1]) / 2.0 - (2.0 * std::f64::consts::PI).ln();
        let lp = model.log_prob(&x, &y).unwrap();
        prop_assert!((lp - (base + logdet)).abs() <= 1e-10);
    }
}

#[test]
fn zero_temperature_samples_are_the_inverse_of_the_origin() {
    let model = random_model(kind(4), 9, 0.3);
    let y = [0.4, -0.2];
    let samples = model.sample(&y, 5, 0.0, 3).unwrap();
    let at_zero = model.flow_inverse(&[0.0, 0.0], &y).unwrap();
    for r in 0..5 {
        assert_eq!(samples.row_slice(r), at_zero.as_slice());
    }
}

#[test]
fn sampling_is_reproducible_from_the_seed() {
    let model = random_model(kind(0), 2, 0.3);
    let a = model.sample(&[0.1, 0.2], 100, 1.0, 17).unwrap();
    let b = model.sample(&[0.1, 0.2], 100, 1.0, 17).unwrap();
    let c = model.sample(&[0.1, 0.2], 100, 1.0, 18).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn batch_and_single_row_passes_agree() {
    let model = random_model(kind(4), 5, 0.3);
    let mut r = seeded(1);
    let xs: Vec<f64> = (0..40).map(|_| r.random_range(-2.0..2.0)).collect();
    let ys: Vec<f64> = (0..40).map(|_| r.random_range(-2.0..2.0)).collect();
    let (x, y) = (Tensor64::new(20, 2, xs).unwrap(), Tensor64::new(20, 2, ys).unwrap());
    let pass = model.forward_batch(&x, &y, false).unwrap();
    for i in 0..20 {
        let (z, ld) = model.flow_forward(x.row_slice(i), y.row_slice(i)).unwrap();
        assert_eq!(pass.output.row_slice(i), z.as_slice());
        assert_eq!(pass.logdet[i], ld);
    }
}
