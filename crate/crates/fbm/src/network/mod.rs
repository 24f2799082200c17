//! Feed-forward stacks trained by layer-local contrastive pair comparison.
//!
//! Each layer maps `h = φ(W·x)` with no bias. Training pulls same-class
//! (boson) pairs together and pushes different-class (fermion) pairs apart
//! until their squared representation distance reaches a margin `d_F`,
//! enforced through a smooth hinge. The gradient of this objective for one
//! layer only involves that layer's inputs and outputs, so layers train
//! independently from the bottom up; a linear softmax readout is fit on the
//! frozen features afterwards.
//!
//! [`train::train_mlp_backprop`] builds the end-to-end backprop baseline of
//! the same architecture for comparisons.

pub mod checkpoint;
pub mod train;

pub use checkpoint::{load_stack, save_stack};
pub use train::{
    accuracy, classify, classify_batch, train_fbm, train_layer, train_mlp_backprop,
    train_readout, TrainReport,
};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::PairSample;
use crate::error::{FbmError, Result};

/// Smooth hinge: `(x + √(x² + a)) / 2`.
///
/// Behaves like `max(0, x)` with curvature scale `√a` near the kink;
/// everywhere differentiable, which the saddle-point analysis requires.
pub fn smooth_hinge(x: f64, a: f64) -> f64 {
    0.5 * (x + (x * x + a).sqrt())
}

/// First derivative of [`smooth_hinge`]: `(1 + x/√(x² + a)) / 2`.
pub fn smooth_hinge_d1(x: f64, a: f64) -> f64 {
    0.5 * (1.0 + x / (x * x + a).sqrt())
}

/// Second derivative of [`smooth_hinge`]: `a / (2 (x² + a)^{3/2})`.
pub fn smooth_hinge_d2(x: f64, a: f64) -> f64 {
    let s = x * x + a;
    0.5 * a / (s * s.sqrt())
}

/// Pointwise nonlinearity of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `tanh(z)`, range (−1, 1) — the form the mean-field theory analyzes.
    Tanh,
    /// `(tanh(z) + 1)/2`, range (0, 1) — the practical form for image data.
    ShiftedTanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::ShiftedTanh => 0.5 * (z.tanh() + 1.0),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    pub fn deriv(self, z: f64) -> f64 {
        let t = z.tanh();
        match self {
            Activation::Tanh => 1.0 - t * t,
            Activation::ShiftedTanh => 0.5 * (1.0 - t * t),
        }
    }
}

/// One bias-free dense layer `h = φ(W·x)`.
#[derive(Debug, Clone)]
pub struct Layer {
    /// Weight matrix, shape (out, in).
    pub weights: Array2<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Gaussian init with standard deviation `1/√fan_in`.
    pub fn new_gaussian(
        out_dim: usize,
        in_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Layer {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        });
        Layer {
            weights,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Pre-activations and activations for one input.
    pub fn forward(&self, x: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let z = self.weights.dot(&x);
        let h = z.mapv(|v| self.activation.apply(v));
        (z, h)
    }

    /// Pre-activations and activations for a batch (rows are items).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let z = x.dot(&self.weights.t());
        let h = z.mapv(|v| self.activation.apply(v));
        (z, h)
    }
}

/// A stack of locally trained layers plus an optional linear readout.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
    /// Linear classifier on the top features, shape (classes, top_dim).
    pub readout: Option<Array2<f64>>,
}

impl LayerStack {
    /// Build an untrained stack for `dims = [in, h1, ..., hk]` (no readout).
    pub fn new_gaussian(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> LayerStack {
        let layers = dims
            .windows(2)
            .map(|w| Layer::new_gaussian(w[1], w[0], activation, rng))
            .collect();
        LayerStack {
            layers,
            readout: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    /// Output dimension of the top feature layer.
    pub fn top_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    /// Features of one input after all layers.
    pub fn features(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(h.view()).1;
        }
        h
    }

    /// Features of a batch (rows are items) after the first `up_to` layers.
    pub fn features_batch_up_to(&self, x: ArrayView2<f64>, up_to: usize) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers[..up_to] {
            h = layer.forward_batch(h.view()).1;
        }
        h
    }

    /// Features of a batch after all layers.
    pub fn features_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.features_batch_up_to(x, self.layers.len())
    }

    /// Readout logits for a batch of inputs.
    pub fn logits_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let readout = self
            .readout
            .as_ref()
            .ok_or_else(|| FbmError::Config("stack has no trained readout".into()))?;
        Ok(self.features_batch(x).dot(&readout.t()))
    }
}

/// Pre- and post-activations of both branches of a pair.
///
/// `h*[0]` is the raw input; `h*[l+1] = φ(z*[l])` is the output of layer `l`.
#[derive(Debug, Clone)]
pub struct PairedActivations {
    pub z1: Vec<Array1<f64>>,
    pub z2: Vec<Array1<f64>>,
    pub h1: Vec<Array1<f64>>,
    pub h2: Vec<Array1<f64>>,
}

impl PairedActivations {
    /// The top-layer representation pair.
    pub fn top(&self) -> (&Array1<f64>, &Array1<f64>) {
        (
            self.h1.last().expect("forward_pair stores the input"),
            self.h2.last().expect("forward_pair stores the input"),
        )
    }
}

/// Run both branches of a pair through the first `up_to_layer` layers.
pub fn forward_pair(stack: &LayerStack, pair: &PairSample, up_to_layer: usize) -> PairedActivations {
    let mut acts = PairedActivations {
        z1: Vec::with_capacity(up_to_layer),
        z2: Vec::with_capacity(up_to_layer),
        h1: vec![pair.x1.clone()],
        h2: vec![pair.x2.clone()],
    };
    for layer in &stack.layers[..up_to_layer] {
        let (z1, h1) = layer.forward(acts.h1.last().unwrap().view());
        let (z2, h2) = layer.forward(acts.h2.last().unwrap().view());
        acts.z1.push(z1);
        acts.h1.push(h1);
        acts.z2.push(z2);
        acts.h2.push(h2);
    }
    acts
}

/// Hyperparameters of contrastive training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fermion margin: target squared distance for different-class pairs.
    pub d_f: f64,
    /// Weight-decay strength.
    pub lambda_w: f64,
    /// Smoothing scale of the hinge.
    pub a: f64,
    pub batch_size: usize,
    /// Epochs per locally trained layer.
    pub epochs: usize,
    /// Epochs for the readout (and the extra budget of the backprop baseline).
    pub readout_epochs: usize,
    /// Adam step size.
    pub lr: f64,
    /// Relative epoch-loss improvement below which an epoch counts as flat.
    pub plateau_tol: f64,
    /// Stop a layer after this many consecutive flat epochs (0 disables).
    pub plateau_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_f: 0.455,
            lambda_w: 0.01,
            a: 0.01,
            batch_size: 50,
            epochs: 50,
            readout_epochs: 100,
            lr: 1e-3,
            plateau_tol: 1e-5,
            plateau_epochs: 5,
        }
    }
}

/// Squared Euclidean distance between two representations.
pub fn pair_distance_sq(h_l: ArrayView1<f64>, h_r: ArrayView1<f64>) -> f64 {
    h_l.iter()
        .zip(h_r.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Contrastive loss of one pair at one layer:
/// `½[σ·D² + (1−σ)·hinge(d_F − D²)]` with `D² = ‖h_L − h_R‖²`.
///
/// Weight decay is applied at the batch level, not here.
pub fn pair_loss(h_l: ArrayView1<f64>, h_r: ArrayView1<f64>, sigma: u8, cfg: &TrainConfig) -> f64 {
    let d2 = pair_distance_sq(h_l, h_r);
    if sigma == 1 {
        0.5 * d2
    } else {
        0.5 * smooth_hinge(cfg.d_f - d2, cfg.a)
    }
}

/// Attraction/repulsion coefficient of a pair:
/// `c = σ − (1−σ)·hinge′(d_F − D²)`.
///
/// Bosons give `c = 1` (pull together); fermions give `c ∈ (−1, 0)`
/// (push apart until the margin d_F is reached, then release).
pub fn pair_coefficient(d2: f64, sigma: u8, cfg: &TrainConfig) -> f64 {
    if sigma == 1 {
        1.0
    } else {
        -smooth_hinge_d1(cfg.d_f - d2, cfg.a)
    }
}

/// Gradient of [`pair_loss`] with respect to the weights of `layer`.
///
/// The pair is forwarded through layers `0..=layer`; the gradient involves
/// only that layer's inputs, pre-activations and outputs (the rule is local:
/// nothing propagates back through earlier layers, and deeper layers do not
/// exist yet when this layer trains). Weight decay is not included.
pub fn local_gradient(
    stack: &LayerStack,
    pair: &PairSample,
    layer: usize,
    cfg: &TrainConfig,
) -> Array2<f64> {
    let acts = forward_pair(stack, pair, layer + 1);
    let act = stack.layers[layer].activation;
    let (a1, a2) = (&acts.h1[layer], &acts.h2[layer]);
    let (z1, z2) = (&acts.z1[layer], &acts.z2[layer]);
    let (h1, h2) = (&acts.h1[layer + 1], &acts.h2[layer + 1]);

    let d = h1 - h2;
    let c = pair_coefficient(d.dot(&d), pair.sigma, cfg);

    // ∂L/∂W = c·(d ⊙ φ′(z₁))·a₁ᵀ − c·(d ⊙ φ′(z₂))·a₂ᵀ
    let g1 = ndarray::Zip::from(&d)
        .and(z1)
        .map_collect(|&dk, &zk| c * dk * act.deriv(zk));
    let g2 = ndarray::Zip::from(&d)
        .and(z2)
        .map_collect(|&dk, &zk| -c * dk * act.deriv(zk));

    let mut grad = outer(&g1, a1);
    grad += &outer(&g2, a2);
    grad
}

fn outer(u: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
    let uc = u.view().insert_axis(Axis(1));
    let vc = v.view().insert_axis(Axis(0));
    uc.dot(&vc)
}
