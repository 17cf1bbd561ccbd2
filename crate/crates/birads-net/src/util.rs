//! Shared numeric trait and seed-derivation helpers.

use ndarray::NdFloat;
use rand::distr::uniform::SampleUniform;

/// Floating-point element type for images, activations, and parameters.
///
/// The production pipeline runs in `f32`; tests that compare analytic
/// gradients against finite differences instantiate the same code in `f64`.
pub trait Scalar: NdFloat + SampleUniform {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand conversion from `f64` literals into the working scalar type.
pub(crate) fn s<T: Scalar>(v: f64) -> T {
    T::of_f64(v)
}

/// SplitMix64 step; the standard stateless mixer for deriving sub-seeds.
pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a master seed and a stream index.
///
/// Used so per-record, per-epoch, and per-tensor random streams do not depend
/// on worker count or evaluation order.
pub(crate) fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0x51ed_270b)))
}
