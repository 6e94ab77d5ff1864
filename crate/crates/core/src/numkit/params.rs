use sha2::{Digest, Sha256};

use super::Scalar;

/// Anything that owns named trainable parameter buffers.
///
/// A value of the same type with zeroed buffers doubles as its gradient
/// accumulator, so optimizers only need this one trait.
pub trait Params<T: Scalar> {
    fn param_slices(&self) -> Vec<(String, &[T])>;
    fn param_slices_mut(&mut self) -> Vec<(String, &mut [T])>;

    /// Same structure, every parameter zero.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|(_, s)| s.len()).sum()
    }

    fn flatten(&self) -> Vec<T> {
        self.param_slices()
            .into_iter()
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }

    /// Overwrites all parameters from a flat vector produced by [`Params::flatten`].
    fn assign_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for (_, s) in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }

    fn fill_zero(&mut self) {
        for (_, s) in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += scale * other`, slot by slot.
    fn add_scaled(&mut self, other: &Self, scale: T)
    where
        Self: Sized,
    {
        let src = other.param_slices();
        for ((_, dst), (_, src)) in self.param_slices_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
    }

    /// SHA-256 over the little-endian bit patterns of every parameter.
    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, s) in self.param_slices() {
            h.update(name.as_bytes());
            for v in s {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
