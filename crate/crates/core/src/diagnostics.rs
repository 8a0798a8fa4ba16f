//! Measurements on trained models: per-layer variance traces, escape
//! rates, non-finite scans, Mahalanobis OOD scores and the closed-form
//! optimum of the one-layer problem.

use serde::{Deserialize, Serialize};

use crate::conditioner::Encoder;
use crate::error::{Error, Result};
use crate::flow::{repeat_row, FlowModel};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::convex_objective;

/// Valid region for samples: a per-dimension interval widened by `margin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorPolicy {
    pub bounds: Vec<(f64, f64)>,
    pub margin: f64,
}

impl ErrorPolicy {
    /// `[-1, 1]` per dimension with no margin.
    pub fn toy(dim: usize) -> Self {
        Self {
            bounds: vec![(-1.0, 1.0); dim],
            margin: 0.0,
        }
    }

    /// `[0, 1]` intensities with a 0.5 margin.
    pub fn image(dim: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); dim],
            margin: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || self.bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Config(format!("bad error policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EscapeReport<T> {
    /// Fraction of rows with any coordinate outside the widened bounds.
    /// Non-finite coordinates count as outside.
    pub fraction: f64,
    pub per_dim_counts: Vec<usize>,
    pub escaped: Vec<bool>,
    /// Samples with every coordinate clamped to the bounds.
    pub clipped: Tensor<T>,
}

pub fn escape_rate<T: Scalar>(samples: &Tensor<T>, policy: &ErrorPolicy) -> Result<EscapeReport<T>> {
    policy.validate()?;
    if samples.rows() == 0 {
        return Err(Error::Config("escape rate of an empty sample set".into()));
    }
    if samples.cols() != policy.bounds.len() {
        return Err(Error::DimMismatch {
            expected: policy.bounds.len(),
            got: samples.cols(),
        });
    }
    let mut per_dim = vec![0; samples.cols()];
    let mut escaped = vec![false; samples.rows()];
    let mut clipped = samples.clone();
    for r in 0..samples.rows() {
        for (c, &(lo, hi)) in policy.bounds.iter().enumerate() {
            let v = samples.get(r, c).as_f64();
            if !(v >= lo - policy.margin && v <= hi + policy.margin) {
                per_dim[c] += 1;
                escaped[r] = true;
            }
            let clamped = if v.is_nan() { v } else { v.max(lo).min(hi) };
            clipped.set(r, c, T::lit(clamped));
        }
    }
    let count = escaped.iter().filter(|&&e| e).count();
    Ok(EscapeReport {
        fraction: count as f64 / samples.rows() as f64,
        per_dim_counts: per_dim,
        escaped,
        clipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub layer_index: usize,
    pub layer_label: String,
    pub variance: f64,
    pub nonfinite_count: usize,
}

/// Feature variances at every layer boundary of a sampling pass, latent
/// input first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTrace {
    pub records: Vec<VarianceRecord>,
}

impl VarianceTrace {
    pub fn input_variance(&self) -> f64 {
        self.records[0].variance
    }

    /// Largest `variance / input variance` over all boundaries. Non-finite
    /// variances make the ratio infinite.
    pub fn max_ratio(&self) -> f64 {
        let v0 = self.input_variance();
        self.records
            .iter()
            .map(|r| if r.variance.is_finite() { r.variance / v0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_index,layer_label,variance,nonfinite_count\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.16e},{}\n",
                r.layer_index, r.layer_label, r.variance, r.nonfinite_count
            ));
        }
        out
    }
}

/// Mean over columns of the per-column sample variance, each computed over
/// that column's finite entries. `NaN` when a column has fewer than two.
pub fn feature_variance<T: Scalar>(f: &Tensor<T>) -> f64 {
    let mut total = 0.0;
    for c in 0..f.cols() {
        let col: Vec<f64> = (0..f.rows())
            .map(|r| f.get(r, c).as_f64())
            .filter(|v| v.is_finite())
            .collect();
        if col.len() < 2 {
            return f64::NAN;
        }
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        total += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
    }
    total / f.cols() as f64
}

/// Samples `n` latents at temperature `tau`, inverts them at condition `y`
/// and records the variance after every layer.
pub fn variance_trace<T: Scalar>(
    model: &FlowModel<T>,
    y: &[T],
    n: usize,
    tau: T,
    seed: u64,
) -> Result<VarianceTrace> {
    variance_trace_each(model, &repeat_row(y, n), tau, seed)
}

/// Like [`variance_trace`], with one latent per row of `ys`, each inverted at
/// its own condition.
pub fn variance_trace_each<T: Scalar>(
    model: &FlowModel<T>,
    ys: &Tensor<T>,
    tau: T,
    seed: u64,
) -> Result<VarianceTrace> {
    let n = ys.rows();
    if n < 2 {
        return Err(Error::Config("variance trace needs at least 2 samples".into()));
    }
    let z = model.latent(n, tau, seed);
    let pass = model.inverse_batch(&z, ys, true)?;
    let features = pass.features.expect("features were requested");
    let labels = model.layer_labels();
    let order = (0..labels.len()).rev();
    let names = std::iter::once("input".to_string()).chain(order.map(|i| labels[i].clone()));
    Ok(VarianceTrace {
        records: features
            .iter()
            .zip(names)
            .enumerate()
            .map(|(i, (f, label))| VarianceRecord {
                layer_index: i,
                layer_label: label,
                variance: feature_variance(f),
                nonfinite_count: f.count_nonfinite(),
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonfiniteScan {
    pub counts: Vec<usize>,
    /// First boundary holding a non-finite value.
    pub first: Option<usize>,
    /// Counts never decrease after the first corrupted boundary.
    pub spreading: bool,
}

pub fn nonfinite_scan<T: Scalar>(features: &[Tensor<T>]) -> NonfiniteScan {
    let counts: Vec<usize> = features.iter().map(Tensor::count_nonfinite).collect();
    let first = counts.iter().position(|&c| c > 0);
    let spreading = match first {
        Some(k) => counts[k..].windows(2).all(|w| w[1] >= w[0]),
        None => false,
    };
    NonfiniteScan {
        counts,
        first,
        spreading,
    }
}

/// Gaussian summary of encoder features for Mahalanobis scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats<T> {
    pub mean: Vec<T>,
    /// Regularized covariance (or second moment when uncentered).
    pub covariance: Tensor<T>,
    pub dim: usize,
    pub count: usize,
    pub ridge: T,
    /// Feature indices with zero sample variance before regularization.
    pub zero_variance: Vec<usize>,
    cholesky: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsOptions {
    /// `false` uses the second moment about the origin instead of the covariance.
    pub centered: bool,
    /// Ridge added to the diagonal, relative to the mean diagonal.
    pub ridge_fraction: f64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            centered: true,
            ridge_fraction: 1e-6,
        }
    }
}

/// Fits mean and (co)variance of `encoder(ys)`.
pub fn fit_feature_stats<T: Scalar>(
    encoder: &Encoder<T>,
    ys: &Tensor<T>,
    options: StatsOptions,
) -> Result<FeatureStats<T>> {
    let centered = options.centered;
    if ys.rows() < 2 {
        return Err(Error::Config("feature stats need at least 2 samples".into()));
    }
    let v = encoder.encode(ys)?;
    let (n, d) = (v.rows(), v.cols());
    let nt = T::lit(n as f64);
    let mean: Vec<T> = (0..d)
        .map(|c| (0..n).map(|r| v.get(r, c)).sum::<T>() / nt)
        .collect();
    let mut cov = Tensor::zeros(d, d);
    for r in 0..n {
        let row = v.row_slice(r);
        for i in 0..d {
            let a = if centered { row[i] - mean[i] } else { row[i] };
            for j in 0..d {
                let b = if centered { row[j] - mean[j] } else { row[j] };
                cov.set(i, j, cov.get(i, j) + a * b);
            }
        }
    }
    for x in cov.data_mut() {
        *x /= nt;
    }
    let var_check = |i: usize| {
        let c = (0..n).map(|r| v.get(r, i)).collect::<Vec<_>>();
        c.iter().all(|&x| x == c[0])
    };
    let zero_variance = (0..d).filter(|&i| var_check(i)).collect();
    let trace: T = (0..d).map(|i| cov.get(i, i)).sum();
    let mut ridge = T::lit(options.ridge_fraction) * trace / T::lit(d as f64);
    if ridge <= T::zero() {
        ridge = T::lit(options.ridge_fraction);
    }
    for i in 0..d {
        cov.set(i, i, cov.get(i, i) + ridge);
    }
    let cholesky = linalg::cholesky(&cov)?;
    Ok(FeatureStats {
        mean,
        covariance: cov,
        dim: d,
        count: n,
        ridge,
        zero_variance,
        cholesky,
    })
}

impl<T: Scalar> FeatureStats<T> {
    /// Mahalanobis distance of a feature vector from the fitted summary.
    pub fn mahalanobis(&self, v: &[T]) -> Result<T> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let d: Vec<T> = v.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        let w = linalg::forward_substitute(&self.cholesky, &d);
        Ok(w.iter().map(|&x| x * x).sum::<T>().sqrt())
    }
}

pub fn ood_score<T: Scalar>(encoder: &Encoder<T>, stats: &FeatureStats<T>, y: &[T]) -> Result<T> {
    stats.mahalanobis(&encoder.encode_one(y)?)
}

/// Input indices with scores, highest score first; ties keep index order.
pub fn rank_by_ood<T: Scalar>(
    encoder: &Encoder<T>,
    stats: &FeatureStats<T>,
    ys: &Tensor<T>,
) -> Result<Vec<(usize, T)>> {
    let mut ranked = (0..ys.rows())
        .map(|i| Ok((i, ood_score(encoder, stats, ys.row_slice(i))?)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub rank: usize,
    pub input_index: usize,
    pub score: f64,
    pub escape_rate: f64,
}

/// Ranks `ys` by OOD score and attaches, for each input, the escape rate of
/// `samples_per_input` model samples drawn at that input.
pub fn ood_ranking<T: Scalar>(
    model: &FlowModel<T>,
    stats: &FeatureStats<T>,
    ys: &Tensor<T>,
    samples_per_input: usize,
    tau: T,
    seed: u64,
    policy: &ErrorPolicy,
) -> Result<Vec<RankRecord>> {
    let ranked = rank_by_ood(model.encoder(), stats, ys)?;
    let m = samples_per_input;
    if m == 0 {
        return Err(Error::Config("samples_per_input must be positive".into()));
    }
    // one batched pass: input i owns rows i*m..(i+1)*m
    let mut rep = Vec::with_capacity(ys.rows() * m * ys.cols());
    for i in 0..ys.rows() {
        for _ in 0..m {
            rep.extend_from_slice(ys.row_slice(i));
        }
    }
    let rep = Tensor::new(ys.rows() * m, ys.cols(), rep)?;
    let samples = model.sample_each(&rep, tau, seed)?;
    let esc = escape_rate(&samples, policy)?;
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (i, score))| RankRecord {
            rank,
            input_index: i,
            score: score.as_f64(),
            escape_rate: esc.escaped[i * m..(i + 1) * m].iter().filter(|&&e| e).count() as f64
                / m as f64,
        })
        .collect())
}

pub fn ranking_csv(records: &[RankRecord]) -> String {
    let mut out = String::from("rank,input_index,score,escape_rate\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e}\n",
            r.rank, r.input_index, r.score, r.escape_rate
        ));
    }
    out
}

/// Mean escape rate of the top and bottom `fraction` of a ranking.
pub fn decile_escape(records: &[RankRecord], fraction: f64) -> (f64, f64) {
    let k = ((records.len() as f64 * fraction).round() as usize).clamp(1, records.len());
    let mean = |rs: &[RankRecord]| rs.iter().map(|r| r.escape_rate).sum::<f64>() / rs.len() as f64;
    (mean(&records[..k]), mean(&records[records.len() - k..]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexOptimum {
    pub s: f64,
    pub t: f64,
    pub objective: f64,
}

/// Closed-form minimizer of `E[(s x + t)^2 / (2 sigma_z^2)] - log s` over
/// `0 < s <= s_max`: `s = min(s_max, sigma_z / std x)`, `t = -s mean x`.
pub fn convex_oracle(x: &[f64], sigma_z: f64, s_max: f64) -> Result<ConvexOptimum> {
    if x.is_empty() || !(s_max > 0.0) || !(sigma_z > 0.0) {
        return Err(Error::Config("convex oracle needs samples, sigma_z > 0, s_max > 0".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let s = if std > 0.0 { s_max.min(sigma_z / std) } else { s_max };
    let t = -s * mean;
    Ok(ConvexOptimum {
        s,
        t,
        objective: convex_objective(x, sigma_z, s, t),
    })
}
