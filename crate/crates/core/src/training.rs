//! Maximum-likelihood training with Adam.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::transforms::ScaleVariant;

/// Fraction of skipped iterations above which a run is marked unstable.
pub const UNSTABLE_SKIP_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.eps > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad optimizer constants {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub model: FlowConfig,
}

impl TrainConfig {
    pub fn toy(model: FlowConfig, seed: u64) -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 1000,
            iterations: 8000,
            seed,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.model.validate()
    }
}

/// First and second moments for every parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<_> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::DimMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let one = T::one();
    let c1 = one - b1.powi(state.step as i32);
    let c2 = one - b2.powi(state.step as i32);
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `-(1/N) sum log q(x_n | y_n)`. Non-finite values are returned as they are
/// so the caller can decide to skip.
pub fn nll_loss<T: Scalar>(model: &FlowModel<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    if x.rows() == 0 {
        return Err(Error::Dataset("empty batch".into()));
    }
    let lp = model.log_prob_batch(x, y)?;
    Ok(-lp.iter().copied().sum::<T>() / T::lit(lp.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub nll: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub model: FlowModel<T>,
    pub curve: Vec<LossRecord>,
    pub skipped: usize,
    pub unstable: bool,
}

impl<T> TrainReport<T> {
    /// Mean NLL over the last `window` non-skipped iterations.
    pub fn final_nll(&self, window: usize) -> f64 {
        let tail: Vec<f64> = self
            .curve
            .iter()
            .rev()
            .filter(|r| !r.skipped)
            .take(window)
            .map(|r| r.nll)
            .collect();
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

/// Loss curve as CSV with header `iteration,nll,grad_norm,skipped_flag`.
pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from("iteration,nll,grad_norm,skipped_flag\n");
    for r in curve {
        out.push_str(&format!(
            "{},{:e},{:e},{}\n",
            r.iteration,
            r.nll,
            r.grad_norm,
            u8::from(r.skipped)
        ));
    }
    out
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(idx.len(), c, data).expect("gathered rows")
}

/// Builds a fresh model for `config` with its seed-derived initialization.
pub fn init_model<T: Scalar>(config: &TrainConfig) -> Result<FlowModel<T>> {
    let mut r = rng::seeded(rng::derive(config.seed, "init"));
    FlowModel::new(config.model.clone(), &mut r)
}

/// Runs `config.iterations` Adam steps on minibatches of `(x, y)`.
///
/// Batches come from a seeded permutation, reshuffled every epoch. Actnorm
/// layers are initialized on the first batch. Steps whose loss or gradient
/// is non-finite leave the parameters untouched and are counted.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    x: &Tensor<T>,
    y: &Tensor<T>,
    mut model: FlowModel<T>,
    mut on_iteration: impl FnMut(&LossRecord),
) -> Result<TrainReport<T>> {
    config.validate()?;
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: y.rows(),
        });
    }
    if n < config.batch_size {
        return Err(Error::Dataset(format!(
            "dataset has {n} samples, fewer than batch size {}",
            config.batch_size
        )));
    }
    let mut shuffle_rng = rng::seeded(rng::derive(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let per_epoch = n / config.batch_size;
    let mut state = AdamState::new(model.params().into_iter().map(|(_, t)| t));
    let mut curve = Vec::with_capacity(config.iterations);
    let mut skipped = 0;

    for it in 0..config.iterations {
        let pos = it % per_epoch;
        if pos == 0 {
            order.shuffle(&mut shuffle_rng);
        }
        let idx = &order[pos * config.batch_size..(pos + 1) * config.batch_size];
        let xb = gather_rows(x, idx);
        let yb = gather_rows(y, idx);
        if it == 0 {
            model.actnorm_init(&xb, &yb)?;
        }

        let mut g = Graph::new();
        let lp = model.log_prob_on_tape(&mut g, &xb, &yb)?;
        let mean = g.mean(lp, None)?;
        let loss = g.neg(mean)?;
        let nll = g.value(loss).item();
        let grads = g.backward(loss)?;
        let grad_norm = grads.global_norm();
        let skip = grads.nonfinite || !nll.is_finite() || !grad_norm.is_finite();
        if skip {
            skipped += 1;
        } else {
            let grads = grads.into_vec();
            let mut params = model.params_mut();
            debug_assert!(params.iter().zip(&grads).all(|(p, g)| p.0 == g.0));
            let mut refs: Vec<&mut Tensor<T>> = params.iter_mut().map(|(_, p)| &mut **p).collect();
            let grefs: Vec<&Tensor<T>> = grads.iter().map(|(_, g)| g).collect();
            adam_step(&mut refs, &grefs, &mut state, &config.adam)?;
        }
        let record = LossRecord {
            iteration: it,
            nll: nll.as_f64(),
            grad_norm: grad_norm.as_f64(),
            skipped: skip,
        };
        on_iteration(&record);
        curve.push(record);
    }
    let unstable =
        config.iterations > 0 && skipped as f64 > UNSTABLE_SKIP_FRACTION * config.iterations as f64;
    Ok(TrainReport {
        model,
        curve,
        skipped,
        unstable,
    })
}

/// Setting for the one-layer problem `min E[(s x + t)^2 / (2 sigma^2)] - log s`,
/// with `s` produced from a raw parameter by the given scale variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexDemoConfig {
    pub variant: ScaleVariant,
    /// Transformed-coordinate samples. A single value gives the degenerate case.
    pub x: Vec<f64>,
    pub sigma_z: f64,
    pub iterations: usize,
    pub adam: AdamConfig,
}

impl ConvexDemoConfig {
    pub fn new(variant: ScaleVariant) -> Self {
        Self {
            variant,
            x: vec![0.5],
            sigma_z: 1.0,
            iterations: 8000,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexStep {
    pub iteration: usize,
    pub s: f64,
    pub t: f64,
    pub objective: f64,
}

/// Convex-problem objective at `(s, t)`.
pub fn convex_objective(x: &[f64], sigma_z: f64, s: f64, t: f64) -> f64 {
    let m = x.iter().map(|&v| (s * v + t).powi(2)).sum::<f64>() / x.len() as f64;
    m / (2.0 * sigma_z * sigma_z) - s.ln()
}

/// Trains the raw scale parameter and the shift directly with Adam from
/// `(raw, t) = (0, 0)`. Records the state before each step and after the last.
pub fn convex_demo(config: &ConvexDemoConfig) -> Result<Vec<ConvexStep>> {
    config.adam.validate()?;
    if config.x.is_empty() || !(config.sigma_z > 0.0) {
        return Err(Error::Config("convex demo needs samples and sigma_z > 0".into()));
    }
    let xs = Tensor::column(config.x.clone());
    let mut raw = Tensor::scalar(0.0_f64);
    let mut shift = Tensor::scalar(0.0_f64);
    let mut state = AdamState::new([&raw, &shift]);
    let mut out = Vec::with_capacity(config.iterations + 1);
    let inv = 1.0 / (2.0 * config.sigma_z * config.sigma_z);
    for it in 0..=config.iterations {
        let mut g = Graph::new();
        let r = g.parameter("raw", raw.clone());
        let t = g.parameter("t", shift.clone());
        let xn = g.constant(xs.clone());
        let (s, log_s) = crate::transforms::graph::scale_on_tape(&mut g, config.variant, r)?;
        let sx = g.mul(xn, s)?;
        let z = g.add(sx, t)?;
        let z2 = g.square(z)?;
        let quad = g.mean(z2, None)?;
        let quad = g.scale(quad, inv)?;
        let loss = g.sub(quad, log_s)?;
        out.push(ConvexStep {
            iteration: it,
            s: g.value(s).item(),
            t: shift.item(),
            objective: g.value(loss).item(),
        });
        if it == config.iterations {
            break;
        }
        let grads = g.backward(loss)?;
        if grads.nonfinite {
            continue;
        }
        let (gr, gt) = (grads.get("raw").unwrap().clone(), grads.get("t").unwrap().clone());
        adam_step(&mut [&mut raw, &mut shift], &[&gr, &gt], &mut state, &config.adam)?;
    }
    Ok(out)
}

/// Trajectory as CSV with header `iteration,s,t,objective`.
pub fn convex_trajectory_csv(steps: &[ConvexStep]) -> String {
    let mut out = String::from("iteration,s,t,objective\n");
    for s in steps {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", s.iteration, s.s, s.t, s.objective));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Layer, MixerInit};
    use crate::transforms::{SplineConfig, TransformKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2PI: f64 = 1.8378770664093453;

    fn identity_model() -> FlowModel<f64> {
        let cfg = FlowConfig {
            mixer_init: MixerInit::Identity,
            ..FlowConfig::toy_affine(ScaleVariant::Unbounded)
        };
        FlowModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    /// Straight-line Adam on flat vectors.
    fn adam_oracle(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32) {
        let (lr, b1, b2, eps) = (5e-4, 0.9, 0.999, 1e-8);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - f64::powi(b1, t));
            let vh = v[i] / (1.0 - f64::powi(b2, t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    #[test]
    fn adam_matches_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut a = Tensor::new(3, 2, (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let mut b = Tensor::row((0..4).map(|_| r.random_range(-1.0..1.0)).collect());
        let mut flat: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let (mut m, mut v) = (vec![0.0; 10], vec![0.0; 10]);
        let mut state = AdamState::new([&a, &b]);
        for step in 1..=2 {
            let ga = Tensor::new(3, 2, (0..6).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
            let gb = Tensor::row((0..4).map(|_| r.random_range(-3.0..3.0)).collect());
            let gflat: Vec<f64> = ga.data().iter().chain(gb.data()).copied().collect();
            adam_step(&mut [&mut a, &mut b], &[&ga, &gb], &mut state, &AdamConfig::default()).unwrap();
            adam_oracle(&mut flat, &gflat, &mut m, &mut v, step);
        }
        let got: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in got.iter().zip(&flat) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!(state.second.iter().all(|t| t.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = Tensor::row(vec![0.3_f64, -0.2]);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&Tensor::zeros(1, 2)], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);

        let mut st = AdamState::new([&p]);
        let g = Tensor::row(vec![1e-3, -40.0]);
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert!((a - b).abs() <= 5e-4 * (1.0 + 1e-6));
        }
        assert!(adam_step(&mut [&mut p], &[&Tensor::zeros(2, 1)], &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn nll_examples() {
        let m = identity_model();
        let nll = nll_loss(&m, &Tensor::zeros(5, 2), &Tensor::zeros(5, 2)).unwrap();
        assert!((nll - LN_2PI).abs() < 1e-14);

        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(4, 2, (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(4, 2, (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let a = nll_loss(&m, &x, &y).unwrap();
        let xx = Tensor::hcat(&[&x.transpose(), &x.transpose()]).unwrap().transpose();
        let yy = Tensor::hcat(&[&y.transpose(), &y.transpose()]).unwrap().transpose();
        assert!((nll_loss(&m, &xx, &yy).unwrap() - a).abs() < 1e-14);
        assert!(nll_loss(&m, &Tensor::zeros(0, 2), &Tensor::zeros(0, 2)).is_err());
    }

    #[test]
    fn single_affine_layer_at_analytic_optimum() {
        // passed coordinate x1, transformed coordinate x2 mapped to s x2 + t
        let cfg = FlowConfig::single_coupling(TransformKind::Affine {
            variant: ScaleVariant::UnitBounded,
        });
        let mut m = FlowModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (x1, x2) = (0.37, -0.6);
        let Layer::Coupling(c) = &mut m.layers_mut()[0] else { panic!() };
        let last = c.net.layers().len() - 1;
        // s = sigmoid(60) == 1 in f64
        c.net.layers_mut()[last].bias = Tensor::row(vec![60.0, -x2]);
        let nll = nll_loss(&m, &Tensor::row(vec![x1, x2]), &Tensor::zeros(1, 2)).unwrap();
        assert!((nll - (x1 * x1 / 2.0 + LN_2PI)).abs() < 1e-14);
    }

    fn toy_data(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::zeros(n, 2);
        let mut y = Tensor::zeros(n, 2);
        for i in 0..n {
            let (a, b): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            x.set(i, 0, 0.5 * a);
            x.set(i, 1, 0.3 * a + 0.2 * b);
            y.set(i, 0, x.get(i, 0) + x.get(i, 1));
            y.set(i, 1, x.get(i, 0) - x.get(i, 1));
        }
        (x, y)
    }

    fn small_config(transform: TransformKind, iterations: usize) -> TrainConfig {
        let mut model = FlowConfig::toy(transform);
        model.hidden_widths = vec![16, 16];
        model.steps = 2;
        TrainConfig {
            adam: AdamConfig {
                learning_rate: 5e-3,
                ..AdamConfig::default()
            },
            batch_size: 100,
            iterations,
            seed: 11,
            model,
        }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let cfg = small_config(TransformKind::Additive, 0);
        let (x, y) = toy_data(200, 1);
        let m0: FlowModel<f64> = init_model(&cfg).unwrap();
        let rep = train(&cfg, &x, &y, m0.clone(), |_| {}).unwrap();
        assert_eq!(rep.model, m0);
        assert!(rep.curve.is_empty());
        assert!(!rep.unstable);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        for transform in [
            TransformKind::Affine {
                variant: ScaleVariant::UnitBounded,
            },
            TransformKind::Spline(SplineConfig::default()),
        ] {
            let cfg = small_config(transform, 150);
            let (x, y) = toy_data(1000, 2);
            let run = || train(&cfg, &x, &y, init_model::<f64>(&cfg).unwrap(), |_| {}).unwrap();
            let a = run();
            let b = run();
            let bits = |r: &TrainReport<f64>| -> Vec<(u64, u64)> {
                r.curve.iter().map(|c| (c.nll.to_bits(), c.grad_norm.to_bits())).collect()
            };
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(a.model, b.model);
            let first = a.curve[..10].iter().map(|r| r.nll).sum::<f64>() / 10.0;
            assert!(a.final_nll(10) < first - 0.5, "{transform:?}: {first} -> {}", a.final_nll(10));
            assert_eq!(a.skipped, 0);
        }
    }

    #[test]
    fn unit_bounded_scales_stay_in_unit_interval() {
        let cfg = small_config(TransformKind::Affine { variant: ScaleVariant::UnitBounded }, 60);
        let (x, y) = toy_data(500, 3);
        let mut worst: (f64, f64) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut model: FlowModel<f64> = init_model(&cfg).unwrap();
        let mut check = |m: &FlowModel<f64>| {
            for l in m.layers() {
                if let Layer::Coupling(c) = l {
                    let input = Tensor::hcat(&[&x.columns(0, 1), &y]).unwrap();
                    let h = c.net.forward(&input).unwrap();
                    for r in 0..h.rows() {
                        let s = ScaleVariant::UnitBounded.scale(h.get(r, 0));
                        worst = (worst.0.min(s), worst.1.max(s));
                    }
                }
            }
        };
        for _ in 0..3 {
            check(&model);
            let step = TrainConfig { iterations: 20, ..cfg.clone() };
            model = train(&step, &x, &y, model, |_| {}).unwrap().model;
        }
        check(&model);
        assert!(worst.0 > 0.0 && worst.1 <= 1.0, "{worst:?}");
    }

    #[test]
    fn rejects_small_dataset() {
        let cfg = small_config(TransformKind::Additive, 1);
        let (x, y) = toy_data(50, 1);
        assert!(train(&cfg, &x, &y, init_model::<f64>(&cfg).unwrap(), |_| {}).is_err());
    }

    #[test]
    fn unbounded_single_sample_degenerates() {
        let steps = convex_demo(&ConvexDemoConfig::new(ScaleVariant::Unbounded)).unwrap();
        assert!(steps.last().unwrap().s > 10.0);
        assert!(steps.windows(2).all(|w| w[1].s >= w[0].s));
    }

    #[test]
    fn bounded_single_sample_reaches_analytic_optimum() {
        let cfg = ConvexDemoConfig::new(ScaleVariant::UnitBounded);
        let last = *convex_demo(&cfg).unwrap().last().unwrap();
        assert!(last.s <= 1.0);
        assert!((last.s - 1.0).abs() <= 1e-2);
        assert!((last.t + 0.5).abs() <= 1e-2);
    }

    #[test]
    fn convex_csv_header() {
        let steps = convex_demo(&ConvexDemoConfig {
            iterations: 2,
            ..ConvexDemoConfig::new(ScaleVariant::UnitBounded)
        })
        .unwrap();
        let csv = convex_trajectory_csv(&steps);
        assert!(csv.starts_with("iteration,s,t,objective\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
