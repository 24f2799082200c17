//! Fermi-Bose machine (FBM) toolkit.
//!
//! An FBM is a feed-forward network trained layer by layer with a contrastive
//! pair loss: inputs of the same class form *boson* pairs whose hidden
//! representations are pulled together, inputs of different classes form
//! *fermion* pairs pushed apart toward a target squared distance `d_F`. No
//! error signal crosses layer boundaries during training; a linear softmax
//! readout is fitted on the frozen features afterwards.
//!
//! The crate bundles everything needed to study this learning rule end to end:
//!
//! - [`data`] — Gaussian-mixture pair sampling, exhaustive boson/fermion
//!   pairing of labeled minibatches, and an MNIST IDX reader.
//! - [`network`] — the layer-local trainer, the jointly backpropagated MLP
//!   baseline, and model checkpoints.
//! - [`meanfield`] — replica-symmetric saddle-point solvers (finite and zero
//!   temperature) for the N-to-1 machine on the Gaussian mixture, plus
//!   closed-form observables (generalization loss, fermion distance,
//!   classification error, adversarial accuracy).
//! - [`cavity`] — a belief-propagation solver for single finite-N instances,
//!   used to validate the mean-field predictions.
//! - [`attacks`] — FGSM, Gaussian-noise, and analytic l2 perturbations with
//!   robustness curves and their AUC.
//! - [`analysis`] — PCA of hidden representations, pair-distance statistics,
//!   and the `d_F` sweep.
//!
//! All stochastic operations take an explicit seeded RNG (see [`rng`]) and are
//! deterministic given the seed. Heavy loops honor the `FBM_THREADS`
//! environment variable; results are identical for any thread count.

// Validation guards write `!(x > 0.0)` on purpose: unlike `x <= 0.0`, the
// negated form also rejects NaN. The suggested rewrite would let NaN pass.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attacks;
pub mod cavity;
pub mod data;
pub mod error;
pub mod meanfield;
pub mod network;
pub mod quad;
pub mod rng;
pub(crate) mod threads;

pub use error::{FbmError, Result};
