use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Result};

fn c<T: Float>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

// Below this |z| the Taylor series is used; above it `exp(z) - 1` loses at
// most a few ulps relative to `z`.
const SERIES_CUTOFF: f64 = 0.25;

// 1/(n+1)!, n = 0..=10
const PHI_SERIES: [f64; 11] = [
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
];

// n/(n+1)! for the derivative, n = 1..=10
const PHI_PRIME_SERIES: [f64; 10] = [
    1.0 / 2.0,
    2.0 / 6.0,
    3.0 / 24.0,
    4.0 / 120.0,
    5.0 / 720.0,
    6.0 / 5040.0,
    7.0 / 40320.0,
    8.0 / 362880.0,
    9.0 / 3628800.0,
    10.0 / 39916800.0,
];

fn horner<T: Float>(coef: &[f64], z: T) -> T {
    coef.iter().rev().fold(T::zero(), |acc, &k| acc * z + c(k))
}

/// `(exp(z), expm1(z) / z)` from one exponential.
#[inline]
pub fn exp_phi<T: Float>(z: T) -> (T, T) {
    let e = z.exp();
    if z.abs() < c(SERIES_CUTOFF) {
        (e, horner(&PHI_SERIES, z))
    } else {
        (e, (e - T::one()) / z)
    }
}

/// `expm1(z) / z`, the ZOH input gain divided by the step.
pub fn phi<T: Float>(z: T) -> T {
    exp_phi(z).1
}

/// `(exp(z), phi(z), phi'(z))` from one exponential.
#[inline]
pub fn exp_phi_prime(z: f64) -> (f64, f64, f64) {
    let (e, ph) = exp_phi(z);
    let dph = if z.abs() < SERIES_CUTOFF {
        horner(&PHI_PRIME_SERIES, z)
    } else {
        (e - ph) / z
    };
    (e, ph, dph)
}

/// Derivative of [`phi`].
pub fn phi_prime(z: f64) -> f64 {
    exp_phi_prime(z).2
}

/// Per-element `(exp(a Δ), B̄)` for one state-gain pair.
#[inline]
pub(crate) fn zoh_pair<T: Float>(a: T, delta: T, b: T, simplified_b: bool) -> (T, T) {
    let z = a * delta;
    if simplified_b {
        (z.exp(), delta * b)
    } else {
        let (e, ph) = exp_phi(z);
        (e, ph * delta * b)
    }
}

/// Zero-order-hold discretisation of a diagonal system:
/// `Ā = exp(AΔ)`, `B̄ = (AΔ)⁻¹(exp(AΔ) − 1)·Δ·B`.
/// With `simplified_b`, `B̄ = Δ·B` instead.
pub fn zoh_discretize(
    a: &[f64],
    b: &[f64],
    delta: f64,
    simplified_b: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(
            "zoh_discretize",
            "step must be positive and finite",
        ));
    }
    if a.len() != b.len() {
        return Err(Error::shape(
            "zoh_discretize",
            "A and B must have the same length",
        ));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&a, &b)| zoh_pair(a, delta, b, simplified_b))
        .unzip())
}
