//! Dense math substrate: tensors, small MLPs with hand-written reverse mode,
//! Adam, and a splittable seeded RNG.
//!
//! Everything numeric is generic over [`Scalar`]; the rest of the crate uses
//! the `f64` instantiation through the aliases in the crate root.

mod adam;
mod mlp;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Activation, ForwardTrace, Mlp};
pub use params::Params;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Numerically stable `log(sum(exp(v)))` over the finite entries of `v`.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s = v
        .iter()
        .filter(|x| x.is_finite())
        .fold(T::zero(), |acc, &x| acc + (x - m).exp());
    m + s.ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests;
