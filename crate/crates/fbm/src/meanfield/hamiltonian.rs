//! The effective two-field Hamiltonian of the pair loss and its derivatives.
//!
//! For one pair with labels `(y₁, y₂)` and pre-activations `(z₁, z₂)` the
//! loss reduces to
//!
//! ```text
//! H(z₁, z₂) = ½ [ σ·D² + (1−σ)·hinge(d_F − D²) ],   D = tanh z₁ − tanh z₂,
//! ```
//!
//! with `σ = (1+y₁y₂)/2`. All saddle-point equations need `H` and its first
//! and second partial derivatives in the two fields; they have closed forms
//! in `t_x = tanh z_x` and `s_x = 1 − t_x²`.

use crate::network::{smooth_hinge, smooth_hinge_d1, smooth_hinge_d2};

/// `H` and its first/second partial derivatives at one point.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianDerivs {
    pub h: f64,
    /// ∂H/∂z₁
    pub h1: f64,
    /// ∂H/∂z₂
    pub h2: f64,
    /// ∂²H/∂z₁²
    pub h11: f64,
    /// ∂²H/∂z₂²
    pub h22: f64,
    /// ∂²H/∂z₁∂z₂
    pub h12: f64,
}

/// Boson/fermion indicator `σ = (1+y₁y₂)/2` for ±1 labels.
#[inline]
pub(crate) fn sigma_of(y1: i32, y2: i32) -> f64 {
    debug_assert!(y1 == 1 || y1 == -1);
    debug_assert!(y2 == 1 || y2 == -1);
    if y1 == y2 {
        1.0
    } else {
        0.0
    }
}

/// Hot-path form taking precomputed `t_x = tanh z_x`, `s_x = 1 − t_x²`.
#[inline]
pub(crate) fn derivs_from_tanh(
    sigma: f64,
    t1: f64,
    s1: f64,
    t2: f64,
    s2: f64,
    d_f: f64,
    a: f64,
) -> HamiltonianDerivs {
    let d = t1 - t2;
    let d2 = d * d;
    let w = d_f - d2;
    let one_ms = 1.0 - sigma;
    let (h, g, curv) = if sigma == 1.0 {
        (0.5 * d2, 1.0, 0.0)
    } else {
        (
            0.5 * one_ms * smooth_hinge(w, a),
            -one_ms * smooth_hinge_d1(w, a),
            2.0 * one_ms * smooth_hinge_d2(w, a) * d2,
        )
    };
    // For mixed σ the general forms are
    //   H   = ½[σd² + (1−σ)hinge(w)]
    //   g   = σ − (1−σ)hinge′(w)
    // which the branches above specialize for σ ∈ {0, 1}.
    HamiltonianDerivs {
        h,
        h1: g * d * s1,
        h2: -g * d * s2,
        h11: curv * s1 * s1 + g * (s1 * s1 - 2.0 * t1 * d * s1),
        h22: curv * s2 * s2 + g * (s2 * s2 + 2.0 * t2 * d * s2),
        h12: -curv * s1 * s2 - g * s1 * s2,
    }
}

/// Value of the effective Hamiltonian.
pub fn effective_hamiltonian(y1: i32, y2: i32, z1: f64, z2: f64, d_f: f64, a: f64) -> f64 {
    let sigma = sigma_of(y1, y2);
    let d = z1.tanh() - z2.tanh();
    let d2 = d * d;
    0.5 * (sigma * d2 + (1.0 - sigma) * smooth_hinge(d_f - d2, a))
}

/// The Hamiltonian together with all first and second partial derivatives.
pub fn hamiltonian_derivs(
    y1: i32,
    y2: i32,
    z1: f64,
    z2: f64,
    d_f: f64,
    a: f64,
) -> HamiltonianDerivs {
    let sigma = sigma_of(y1, y2);
    let t1 = z1.tanh();
    let t2 = z2.tanh();
    derivs_from_tanh(sigma, t1, 1.0 - t1 * t1, t2, 1.0 - t2 * t2, d_f, a)
}
