//! Naive reference compositor for tests.
//!
//! Deliberately written with explicit loops over running products and no
//! shared helpers, so agreement with the production compositor is evidence
//! rather than tautology.

use crate::real::Real;
use crate::render::{PatchBuffers, RenderMode};

/// Reference color of `pixel`, straight from the discrete sums:
/// `sum_i prod_{j<i} [exp(-sigma_j delta) * omega_j * theta_j] * (1 - exp(-sigma_i delta)) * c_i`.
pub fn oracle_composite<T: Real>(
    buffers: &PatchBuffers<T>,
    pixel: usize,
    mode: RenderMode,
) -> [T; 3] {
    let n = buffers.n_samples;
    let mut rgb = [T::zero(); 3];
    let mut survive = T::one();
    for i in 0..n {
        let s = pixel * n + i;
        let sigma = buffers.sigmas[s];
        let opacity = T::one() - (-(sigma * buffers.delta)).exp();
        for c in 0..3 {
            rgb[c] = rgb[c] + survive * opacity * buffers.colors[3 * s + c];
        }
        let mut pass = (-(sigma * buffers.delta)).exp();
        if mode == RenderMode::Lowlight {
            pass = pass * buffers.omegas[s] * buffers.theta_g[i];
        }
        survive = survive * pass;
    }
    rgb
}

/// Oracle over plain slices for a single ray.
pub fn oracle_ray<T: Real>(
    sigmas: &[T],
    colors: &[T],
    omegas: Option<&[T]>,
    theta_g: Option<&[T]>,
    delta: T,
) -> [T; 3] {
    let mut rgb = [T::zero(); 3];
    let mut survive = T::one();
    for i in 0..sigmas.len() {
        let opacity = T::one() - (-(sigmas[i] * delta)).exp();
        for c in 0..3 {
            rgb[c] = rgb[c] + survive * opacity * colors[3 * i + c];
        }
        let mut pass = (-(sigmas[i] * delta)).exp();
        if let Some(o) = omegas {
            pass = pass * o[i];
        }
        if let Some(t) = theta_g {
            pass = pass * t[i];
        }
        survive = survive * pass;
    }
    rgb
}
