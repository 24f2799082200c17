//! Replica-symmetric mean-field theory of the single contrastive neuron.
//!
//! In the high-dimensional limit of the Gaussian-mixture pair task, the
//! typical behavior of the trained weight vector is captured by a handful of
//! order parameters: the cluster alignment `M = m·w/N`, the self-overlap
//! `q = ‖w‖²/N`, and the inter-replica overlap `Q` (at zero temperature the
//! rescaled fluctuation `χ = β(q − Q)` stays finite instead). These solve
//! coupled saddle-point equations in which the pair loss enters through an
//! *effective Hamiltonian* of just two scalar fields — the pre-activations of
//! the two pair members.
//!
//! [`finite_t::solve_sde_finite_t`] iterates the finite-temperature
//! equations, [`zero_t::solve_sde_zero_t`] the zero-temperature limit, and
//! [`observables`] turns a solution into predictions (generalization loss,
//! representation distances, classification error, adversarial accuracy)
//! that finite instances can be tested against.

pub mod finite_t;
pub mod hamiltonian;
pub mod observables;
pub mod zero_t;

pub use finite_t::{solve_sde_finite_t, thermal_moments, ThermalMoments};
pub use hamiltonian::{effective_hamiltonian, hamiltonian_derivs, HamiltonianDerivs};
pub use observables::{
    adversarial_accuracy, classification_error, fermion_distance, generalization_loss,
    MacroOrder,
};
pub use zero_t::solve_sde_zero_t;

use serde::{Deserialize, Serialize};

use crate::data::MixtureParams;
use crate::error::{FbmError, Result};

/// Problem definition for the saddle-point solvers and observables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryProblem {
    /// Task distribution (only `m`, `delta`, `rho`, `alpha` enter; `n` is a
    /// finite-size notion the theory has already taken to infinity).
    pub mixture: MixtureParams,
    /// Fermion margin of the pair loss.
    pub d_f: f64,
    /// Weight-decay strength.
    pub lambda_w: f64,
    /// Smoothing scale of the hinge.
    pub a: f64,
    /// Gauss-Hermite nodes per axis for thermal / minimizer fluctuations
    /// (the inner two-dimensional integral) and for observables.
    pub n_quad_inner: usize,
    /// Low-discrepancy points for the quenched disorder average (the outer
    /// two-dimensional integral). At low temperature the inner averages
    /// develop near-steps in the disorder variables, so this average uses an
    /// equal-weight lattice, whose accuracy degrades gracefully for such
    /// integrands, rather than a tensor polynomial rule, which does not
    /// converge on them.
    pub n_disorder: usize,
}

impl TheoryProblem {
    pub fn new(mixture: MixtureParams, d_f: f64, lambda_w: f64) -> TheoryProblem {
        TheoryProblem {
            mixture,
            d_f,
            lambda_w,
            a: 0.01,
            n_quad_inner: 40,
            n_disorder: 16384,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if !(self.a > 0.0) {
            return Err(FbmError::Config(format!(
                "hinge smoothing a must be > 0, got {}",
                self.a
            )));
        }
        if self.d_f < 0.0 {
            return Err(FbmError::Config(format!(
                "margin d_f must be >= 0, got {}",
                self.d_f
            )));
        }
        if !(self.lambda_w > 0.0) {
            return Err(FbmError::Config(format!(
                "weight decay lambda_w must be > 0, got {}",
                self.lambda_w
            )));
        }
        if self.n_quad_inner == 0 || self.n_disorder == 0 {
            return Err(FbmError::Config(
                "quadrature orders must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Label configurations entering disorder averages with their weights:
    /// a boson pair `(+1,+1)` with weight ρ and a fermion pair `(+1,−1)`
    /// with weight 1−ρ. The mirrored configurations contribute identically
    /// by the symmetry of the Gaussian measure.
    pub(crate) fn label_configs(&self) -> [(i32, i32, f64); 2] {
        [
            (1, 1, self.mixture.rho),
            (1, -1, 1.0 - self.mixture.rho),
        ]
    }
}

/// Finite-temperature order parameters and their conjugates.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrderParams {
    /// Cluster alignment `M`.
    pub M: f64,
    /// Self-overlap `q` (squared weight norm per dimension).
    pub q: f64,
    /// Inter-replica overlap `Q`.
    pub Q: f64,
    pub hatM: f64,
    pub hatq: f64,
    pub hatQ: f64,
    /// Inverse temperature this solution belongs to.
    pub beta: f64,
}

/// Zero-temperature order parameters and their conjugates.
///
/// `chi` is the rescaled thermal fluctuation `lim β(q − Q)`.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ZeroTOrderParams {
    pub M: f64,
    pub q: f64,
    pub chi: f64,
    pub hatM: f64,
    pub hatQ: f64,
    pub hatchi: f64,
}

/// Convergence diagnostics of a fixed-point iteration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveInfo {
    pub iterations: usize,
    /// Largest absolute raw update of any order parameter at the last step.
    pub residual: f64,
}
