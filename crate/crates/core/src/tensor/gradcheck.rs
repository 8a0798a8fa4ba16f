use super::Tensor;
use crate::scalar::Scalar;

/// Central-difference gradient of `f` at `p`, one coordinate at a time.
pub fn finite_diff_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    p: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    assert!(h > T::zero(), "step must be positive");
    let two_h = h + h;
    let mut probe = p.clone();
    let mut out = Tensor::zeros(p.rows(), p.cols());
    for i in 0..p.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / two_h;
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps near-zero gradients
/// from reporting huge relative errors caused by truncation noise.
pub fn rel_err<T: Scalar>(a: T, b: T, floor: T) -> T {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: T) -> T {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(T::zero(), T::max)
}
