use super::Direction;
use crate::scalar::Scalar;

/// `c(x) = x + t`; unit Jacobian in both directions.
pub fn additive_transform<T: Scalar>(x: T, t: T, direction: Direction) -> (T, T) {
    match direction {
        Direction::Forward => (x + t, T::zero()),
        Direction::Inverse => (x - t, T::zero()),
    }
}
