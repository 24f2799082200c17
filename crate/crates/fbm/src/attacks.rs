//! Perturbation attacks on trained models and robustness measurement.
//!
//! Three perturbations are implemented: the fast gradient sign method on the
//! cross-entropy cost of the readout (ℓ∞ budget), isotropic Gaussian noise,
//! and the closed-form ℓ2 attack on a single tanh unit under mean-squared
//! loss. Training in this codebase is layer-local, but an attacker is free
//! to differentiate the frozen network end to end — the input gradient here
//! is full-chain backprop and exists only in this module.
//!
//! Conventions fixed by this implementation (the figures the harness
//! reproduces do not state them): attack strengths are in normalized pixel
//! units for image data, perturbed images are clipped back to the valid
//! pixel range *after* the budgeted step, and the sign of a zero gradient
//! component is 0 so dead pixels never spend budget.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FbmError, Result};
use crate::network::{classify_batch, LayerStack};
use crate::rng::substream;

/// Which perturbation a robustness curve sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// One-step sign attack on the cross-entropy cost, ℓ∞ budget.
    Fgsm,
    /// `x + ε·ξ` with `ξ ~ N(0, I)`, averaged over independent draws.
    Noise {
        /// Independent noise draws averaged per test point.
        draws: usize,
    },
}

impl AttackKind {
    /// Tag used in CSV output.
    pub fn tag(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Noise { .. } => "noise",
        }
    }
}

/// Accuracy as a function of attack strength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub kind: AttackKind,
    /// Attack strengths, ascending, starting at 0.
    pub eps: Vec<f64>,
    /// Test accuracy at each strength; `accuracy[0]` is clean accuracy.
    pub accuracy: Vec<f64>,
}

/// Sign with `sign(0) = 0`, unlike `f64::signum` which maps `+0.0` to `1.0`.
#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the cross-entropy cost `C = −log softmax(logits)[label]`
/// with respect to the input, differentiating through the frozen stack.
pub fn input_gradient(
    stack: &LayerStack,
    x: ArrayView1<f64>,
    label: u8,
) -> Result<Array1<f64>> {
    let readout = stack
        .readout
        .as_ref()
        .ok_or_else(|| FbmError::Config("stack has no trained readout".into()))?;
    if x.len() != stack.in_dim() {
        return Err(FbmError::Dimension(format!(
            "input has {} components, stack expects {}",
            x.len(),
            stack.in_dim()
        )));
    }
    if usize::from(label) >= readout.nrows() {
        return Err(FbmError::Label(format!(
            "label {label} out of range for {} classes",
            readout.nrows()
        )));
    }

    // Forward, keeping pre-activations.
    let mut h = x.to_owned();
    let mut zs = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let (z, hn) = layer.forward(h.view());
        zs.push(z);
        h = hn;
    }
    let logits = readout.dot(&h);

    // Softmax minus one-hot, stabilized against overflow.
    let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let expz = logits.mapv(|v| (v - zmax).exp());
    let norm = expz.sum();
    let mut delta = expz / norm;
    delta[usize::from(label)] -= 1.0;

    // Back through the readout, then each layer.
    let mut g = readout.t().dot(&delta);
    for (layer, z) in stack.layers.iter().zip(&zs).rev() {
        let gz = ndarray::Zip::from(&g)
            .and(z)
            .map_collect(|&gk, &zk| gk * layer.activation.deriv(zk));
        g = layer.weights.t().dot(&gz);
    }
    Ok(g)
}

/// Fast gradient sign method: `x + ε·sign(∇_x C)` against the true label.
///
/// Every component moves by exactly `ε`, `0`, or `−ε`; the output is not
/// clipped here, so the ℓ∞ budget holds exactly (callers that need a valid
/// pixel range clip afterwards).
pub fn fgsm(
    stack: &LayerStack,
    x: ArrayView1<f64>,
    y_true: u8,
    eps: f64,
) -> Result<Array1<f64>> {
    if eps < 0.0 {
        return Err(FbmError::Config(format!(
            "attack strength must be >= 0, got {eps}"
        )));
    }
    let g = input_gradient(stack, x, y_true)?;
    Ok(ndarray::Zip::from(&x)
        .and(&g)
        .map_collect(|&xi, &gi| xi + eps * sign0(gi)))
}

/// Additive white noise `x + ε·ξ`, `ξ_i ~ N(0, 1)` i.i.d.
pub fn gaussian_noise(x: ArrayView1<f64>, eps: f64, rng: &mut impl Rng) -> Array1<f64> {
    x.map(|&xi| {
        let z: f64 = StandardNormal.sample(rng);
        xi + eps * z
    })
}

/// Closed-form ℓ2 attack on a single tanh unit with mean-squared loss
/// `L = ½[y − tanh(wᵀx)]²`: step of length `ε` up the input gradient,
/// `δx = ε·∇_x L/‖∇_x L‖₂ = ε·sgn(K_y(z))·w/‖w‖` with
/// `K_y(z) = −[y − tanh z]·(1 − tanh²z)`.
///
/// At `K_y(z) = 0` (or `w = 0`) the gradient vanishes and the attack is
/// undefined; the input is returned unchanged.
pub fn l2_attack(
    weights: ArrayView1<f64>,
    x: ArrayView1<f64>,
    y: f64,
    eps: f64,
) -> Result<Array1<f64>> {
    if weights.len() != x.len() {
        return Err(FbmError::Dimension(format!(
            "{} weights vs {} input components",
            weights.len(),
            x.len()
        )));
    }
    if eps < 0.0 {
        return Err(FbmError::Config(format!(
            "attack strength must be >= 0, got {eps}"
        )));
    }
    let z = weights.dot(&x);
    let t = z.tanh();
    let k_y = -(y - t) * (1.0 - t * t);
    let norm = weights.dot(&weights).sqrt();
    if k_y == 0.0 || norm == 0.0 {
        return Ok(x.to_owned());
    }
    let scale = eps * sign0(k_y) / norm;
    Ok(ndarray::Zip::from(&x)
        .and(&weights)
        .map_collect(|&xi, &wi| xi + scale * wi))
}

/// Accuracy of the sign classifier `ŷ = sgn(wᵀx)` under the ℓ2 attack, for
/// ±1-labeled inputs, at each strength of an ascending grid starting at 0.
pub fn l2_robustness(
    weights: ArrayView1<f64>,
    inputs: &Array2<f64>,
    labels: &[f64],
    eps_grid: &[f64],
) -> Result<RobustnessCurve> {
    validate_grid(eps_grid)?;
    if inputs.nrows() != labels.len() || inputs.nrows() == 0 {
        return Err(FbmError::Size(format!(
            "{} inputs vs {} labels (need at least one of each)",
            inputs.nrows(),
            labels.len()
        )));
    }
    let mut accuracy = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let mut hits = 0usize;
        for (row, &y) in inputs.rows().into_iter().zip(labels) {
            let xp = l2_attack(weights, row, y, eps)?;
            let z = weights.dot(&xp);
            if z * y > 0.0 {
                hits += 1;
            }
        }
        accuracy.push(hits as f64 / labels.len() as f64);
    }
    Ok(RobustnessCurve {
        kind: AttackKind::Fgsm, // tag unused for the analytic attack
        eps: eps_grid.to_vec(),
        accuracy,
    })
}

fn validate_grid(eps_grid: &[f64]) -> Result<()> {
    if eps_grid.is_empty() {
        return Err(FbmError::Size("attack grid is empty".into()));
    }
    if eps_grid[0] != 0.0 {
        return Err(FbmError::Config(format!(
            "attack grid must start at 0, got {}",
            eps_grid[0]
        )));
    }
    if eps_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FbmError::Order(
            "attack grid must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Evenly spaced grid of `points` strengths over `[0, eps_max]`.
pub fn eps_grid(eps_max: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 || !(eps_max > 0.0) {
        return Err(FbmError::Config(format!(
            "grid needs >= 2 points and a positive maximum, got {points} \
             points up to {eps_max}"
        )));
    }
    Ok((0..points)
        .map(|i| eps_max * i as f64 / (points - 1) as f64)
        .collect())
}

/// Test accuracy at every strength of an ascending grid starting at 0.
///
/// FGSM perturbs each input against its true label; noise averages accuracy
/// over the configured number of independent draws. Each (sample, draw)
/// takes its own RNG stream derived from `seed`, so results do not depend
/// on thread scheduling. When `pixel_range` is given, perturbed inputs are
/// clipped back into it componentwise (valid-image constraint); leave it
/// `None` for unconstrained data.
pub fn robustness_curve(
    stack: &LayerStack,
    test: &LabeledDataset,
    kind: AttackKind,
    eps_grid: &[f64],
    pixel_range: Option<(f64, f64)>,
    seed: u64,
) -> Result<RobustnessCurve> {
    validate_grid(eps_grid)?;
    if test.inputs.nrows() == 0 {
        return Err(FbmError::Size("test set is empty".into()));
    }
    if let AttackKind::Noise { draws } = kind {
        if draws == 0 {
            return Err(FbmError::Config("need at least one noise draw".into()));
        }
    }
    if let Some((lo, hi)) = pixel_range {
        if !(lo < hi) {
            return Err(FbmError::Config(format!(
                "pixel range [{lo}, {hi}] is empty"
            )));
        }
    }
    crate::threads::ensure_pool();

    let clip = |mut x: Array1<f64>| -> Array1<f64> {
        if let Some((lo, hi)) = pixel_range {
            x.mapv_inplace(|v| v.clamp(lo, hi));
        }
        x
    };

    let n_test = test.inputs.nrows();
    let mut accuracy = Vec::with_capacity(eps_grid.len());
    for (ei, &eps) in eps_grid.iter().enumerate() {
        // ε = 0 short-circuits to the clean batch accuracy: both attacks
        // leave the input bit-identical at zero strength.
        if eps == 0.0 {
            let preds = classify_batch(stack, test.inputs.view())?;
            let hits = preds
                .iter()
                .zip(&test.labels)
                .filter(|(p, l)| p == l)
                .count();
            accuracy.push(hits as f64 / n_test as f64);
            continue;
        }
        let per_sample: Vec<f64> = (0..n_test)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let x = test.inputs.row(i);
                let label = test.labels[i];
                match kind {
                    AttackKind::Fgsm => {
                        let xp = clip(fgsm(stack, x, label, eps)?);
                        let pred = crate::network::classify(stack, xp.view())?;
                        Ok(if pred == label { 1.0 } else { 0.0 })
                    }
                    AttackKind::Noise { draws } => {
                        let mut hits = 0usize;
                        for d in 0..draws {
                            let mut rng = substream(
                                seed,
                                (ei * n_test * draws + i * draws + d) as u64,
                            );
                            let xp = clip(gaussian_noise(x, eps, &mut rng));
                            if crate::network::classify(stack, xp.view())? == label {
                                hits += 1;
                            }
                        }
                        Ok(hits as f64 / draws as f64)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(per_sample.iter().sum::<f64>() / n_test as f64);
    }
    Ok(RobustnessCurve {
        kind,
        eps: eps_grid.to_vec(),
        accuracy,
    })
}

/// Area under the accuracy-versus-strength curve by the trapezoid rule,
/// normalized by the ε range so a constant accuracy of 1 scores 1.
pub fn auc(curve: &RobustnessCurve) -> Result<f64> {
    if curve.eps.len() < 2 || curve.eps.len() != curve.accuracy.len() {
        return Err(FbmError::Size(format!(
            "curve needs >= 2 matching points, got {} strengths and {} \
             accuracies",
            curve.eps.len(),
            curve.accuracy.len()
        )));
    }
    if curve.eps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FbmError::Order(
            "attack grid must be strictly ascending".into(),
        ));
    }
    let mut area = 0.0;
    for i in 1..curve.eps.len() {
        let de = curve.eps[i] - curve.eps[i - 1];
        area += 0.5 * (curve.accuracy[i] + curve.accuracy[i - 1]) * de;
    }
    Ok(area / (curve.eps[curve.eps.len() - 1] - curve.eps[0]))
}
