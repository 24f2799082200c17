//! Optimizers and training loops: layer-local contrastive training, softmax
//! readout fitting, and the end-to-end backprop baseline.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{pair_indices, LabeledDataset};
use crate::error::{FbmError, Result};
use crate::network::{pair_coefficient, Activation, LayerStack, TrainConfig};

/// Adam optimizer state for one weight matrix.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(shape: (usize, usize), lr: f64) -> Adam {
        Adam {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply one update `w ← w − lr·m̂/(√v̂ + ε)` in place.
    pub fn step(&mut self, weights: &mut Array2<f64>, grad: &Array2<f64>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        self.v
            .zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let eps = self.eps;
        ndarray::Zip::from(weights)
            .and(&self.m)
            .and(&self.v)
            .for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
    }
}

/// Outcome of one training loop.
#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean objective of the final epoch (pair or cross-entropy loss plus
    /// the weight-decay term).
    pub final_loss: f64,
}

fn shuffled_batches(
    n: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> impl Iterator<Item = Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let bs = batch_size.max(1);
    (0..n.div_ceil(bs)).map(move |b| order[b * bs..((b + 1) * bs).min(n)].to_vec())
}

/// Mean contrastive gradient of one minibatch at one layer, plus the loss.
///
/// Features are shared: the batch is forwarded once, and every unordered
/// in-batch pair contributes `c·(d ⊙ φ′)` rows to a per-item accumulator,
/// which turns into the weight gradient with a single matrix product.
/// Returns `None` when the batch has no pairs.
fn batch_gradient(
    stack: &LayerStack,
    layer: usize,
    batch: &LabeledDataset,
    cfg: &TrainConfig,
) -> Option<(Array2<f64>, f64)> {
    let pairs = pair_indices(&batch.labels);
    if pairs.is_empty() {
        return None;
    }
    let act = stack.layers[layer].activation;
    let a = stack.features_batch_up_to(batch.inputs.view(), layer);
    let (z, h) = stack.layers[layer].forward_batch(a.view());
    let phi: Array2<f64> = z.mapv(|v| act.deriv(v));

    let out = h.ncols();
    let mut acc = Array2::<f64>::zeros((batch.len(), out));
    let mut loss = 0.0;
    for &(i, j, sigma) in &pairs {
        let hi = h.row(i);
        let hj = h.row(j);
        let mut d2 = 0.0;
        for k in 0..out {
            let d = hi[k] - hj[k];
            d2 += d * d;
        }
        loss += if sigma == 1 {
            0.5 * d2
        } else {
            0.5 * crate::network::smooth_hinge(cfg.d_f - d2, cfg.a)
        };
        let c = pair_coefficient(d2, sigma, cfg);
        let (pi, pj) = (phi.row(i), phi.row(j));
        let mut acc_i = acc.row_mut(i);
        for k in 0..out {
            acc_i[k] += c * (hi[k] - hj[k]) * pi[k];
        }
        let mut acc_j = acc.row_mut(j);
        for k in 0..out {
            acc_j[k] -= c * (hi[k] - hj[k]) * pj[k];
        }
    }

    let n_pairs = pairs.len() as f64;
    let mut grad = acc.t().dot(&a);
    grad.mapv_inplace(|g| g / n_pairs);
    grad.scaled_add(cfg.lambda_w, &stack.layers[layer].weights);

    let w = &stack.layers[layer].weights;
    let objective = loss / n_pairs + 0.5 * cfg.lambda_w * w.iter().map(|v| v * v).sum::<f64>();
    Some((grad, objective))
}

/// Train one layer on exhaustive in-batch pairs with Adam.
///
/// Earlier layers are frozen feature extractors; later layers are ignored.
/// Stops early when the epoch objective improves by less than
/// `plateau_tol` (relatively) for `plateau_epochs` consecutive epochs.
pub fn train_layer(
    stack: &mut LayerStack,
    layer: usize,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if layer >= stack.layers.len() {
        return Err(FbmError::Config(format!(
            "layer index {layer} out of range for a {}-layer stack",
            stack.layers.len()
        )));
    }
    if data.is_empty() {
        return Err(FbmError::Size("cannot train on an empty dataset".into()));
    }
    let shape = {
        let w = &stack.layers[layer].weights;
        (w.nrows(), w.ncols())
    };
    let mut adam = Adam::new(shape, cfg.lr);
    let mut best = f64::INFINITY;
    let mut flat = 0usize;
    let mut epoch_loss = f64::NAN;
    let mut epochs_run = 0;

    for _ in 0..cfg.epochs {
        epochs_run += 1;
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in shuffled_batches(data.len(), cfg.batch_size, rng) {
            let batch = data.select(&idx, data.split);
            if let Some((grad, loss)) = batch_gradient(stack, layer, &batch, cfg) {
                adam.step(&mut stack.layers[layer].weights, &grad);
                sum += loss;
                batches += 1;
            }
        }
        if batches == 0 {
            return Err(FbmError::Size(
                "no trainable pairs: every minibatch has fewer than two items".into(),
            ));
        }
        epoch_loss = sum / batches as f64;
        if best - epoch_loss > cfg.plateau_tol * best.abs().max(1e-300) {
            flat = 0;
        } else {
            flat += 1;
        }
        best = best.min(epoch_loss);
        if cfg.plateau_epochs > 0 && flat >= cfg.plateau_epochs {
            break;
        }
    }
    Ok(TrainReport {
        epochs_run,
        final_loss: epoch_loss,
    })
}

/// Row-wise softmax of a logits matrix.
fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// Mean cross-entropy of softmax probabilities against integer labels.
fn cross_entropy(probs: &Array2<f64>, labels: &[u8]) -> f64 {
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y as usize]].max(1e-300).ln();
    }
    loss / labels.len() as f64
}

/// Fit the linear softmax readout on frozen features.
///
/// Replaces `stack.readout` with a `(n_classes, top_dim)` matrix trained by
/// Adam on the cross-entropy plus weight decay.
pub fn train_readout(
    stack: &mut LayerStack,
    data: &LabeledDataset,
    n_classes: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(FbmError::Size("cannot train on an empty dataset".into()));
    }
    if let Some(&worst) = data.labels.iter().max() {
        if (worst as usize) >= n_classes {
            return Err(FbmError::Label(format!(
                "label {worst} outside the {n_classes}-class readout"
            )));
        }
    }
    let top = stack.top_dim();
    let features = stack.features_batch(data.inputs.view());
    let std = 1.0 / (top as f64).sqrt();
    let mut readout = Array2::from_shape_fn((n_classes, top), |_| {
        use rand_distr::Distribution;
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        std * z
    });
    let mut adam = Adam::new((n_classes, top), cfg.lr);
    let mut epoch_loss = f64::NAN;
    let mut epochs_run = 0;

    for _ in 0..cfg.readout_epochs {
        epochs_run += 1;
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in shuffled_batches(data.len(), cfg.batch_size, rng) {
            let mut x = Array2::zeros((idx.len(), top));
            let mut labels = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&features.row(i));
                labels.push(data.labels[i]);
            }
            let mut probs = x.dot(&readout.t());
            softmax_rows(&mut probs);
            let loss = cross_entropy(&probs, &labels)
                + 0.5 * cfg.lambda_w * readout.iter().map(|v| v * v).sum::<f64>();
            // δ = (p − onehot)/B;  ∂L/∂W = δᵀ·x + λ_w·W
            for (r, &y) in labels.iter().enumerate() {
                probs[[r, y as usize]] -= 1.0;
            }
            probs.mapv_inplace(|v| v / labels.len() as f64);
            let mut grad = probs.t().dot(&x);
            grad.scaled_add(cfg.lambda_w, &readout);
            adam.step(&mut readout, &grad);
            sum += loss;
            batches += 1;
        }
        epoch_loss = sum / batches as f64;
    }
    stack.readout = Some(readout);
    Ok(TrainReport {
        epochs_run,
        final_loss: epoch_loss,
    })
}

/// Train a full stack bottom-up — each layer locally, then the readout.
pub fn train_fbm(
    dims: &[usize],
    activation: Activation,
    data: &LabeledDataset,
    n_classes: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LayerStack, Vec<TrainReport>)> {
    if dims.len() < 2 {
        return Err(FbmError::Config(
            "need at least input and one feature dimension".into(),
        ));
    }
    let mut stack = LayerStack::new_gaussian(dims, activation, rng);
    let mut reports = Vec::with_capacity(stack.layers.len() + 1);
    for layer in 0..stack.layers.len() {
        reports.push(train_layer(&mut stack, layer, data, cfg, rng)?);
    }
    reports.push(train_readout(&mut stack, data, n_classes, cfg, rng)?);
    Ok((stack, reports))
}

/// Forward pass of the backprop baseline, keeping every pre-activation.
fn mlp_forward(
    stack: &LayerStack,
    x: ArrayView2<f64>,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Array2<f64>) {
    let mut hs = vec![x.to_owned()];
    let mut zs = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let (z, h) = layer.forward_batch(hs.last().unwrap().view());
        zs.push(z);
        hs.push(h);
    }
    let logits = hs
        .last()
        .unwrap()
        .dot(&stack.readout.as_ref().expect("baseline has a readout").t());
    (zs, hs, logits)
}

/// Cross-entropy gradients of the baseline for one batch, by backprop.
///
/// Returns per-layer weight gradients (hidden layers in order, then the
/// readout) and the batch loss including weight decay.
fn mlp_gradients(
    stack: &LayerStack,
    x: ArrayView2<f64>,
    labels: &[u8],
    lambda_w: f64,
) -> (Vec<Array2<f64>>, Array2<f64>, f64) {
    let batch = labels.len() as f64;
    let (zs, hs, mut probs) = mlp_forward(stack, x);
    softmax_rows(&mut probs);
    let readout = stack.readout.as_ref().expect("baseline has a readout");

    let mut decay = readout.iter().map(|v| v * v).sum::<f64>();
    for layer in &stack.layers {
        decay += layer.weights.iter().map(|v| v * v).sum::<f64>();
    }
    let loss = cross_entropy(&probs, labels) + 0.5 * lambda_w * decay;

    for (r, &y) in labels.iter().enumerate() {
        probs[[r, y as usize]] -= 1.0;
    }
    probs.mapv_inplace(|v| v / batch);
    let mut grad_readout = probs.t().dot(hs.last().unwrap());
    grad_readout.scaled_add(lambda_w, readout);

    // δ_top = (p − onehot)/B · W_r, then walk the hidden layers backwards.
    let mut delta = probs.dot(readout);
    let mut grads = vec![Array2::zeros((0, 0)); stack.layers.len()];
    for l in (0..stack.layers.len()).rev() {
        let act = stack.layers[l].activation;
        ndarray::Zip::from(&mut delta)
            .and(&zs[l])
            .for_each(|d, &z| *d *= act.deriv(z));
        let mut g = delta.t().dot(&hs[l]);
        g.scaled_add(lambda_w, &stack.layers[l].weights);
        grads[l] = g;
        if l > 0 {
            delta = delta.dot(&stack.layers[l].weights);
        }
    }
    (grads, grad_readout, loss)
}

/// Train an end-to-end backprop MLP of the given dimensions.
///
/// The architecture mirrors the locally trained stack (same nonlinearity,
/// no biases, linear softmax head) and gets the same total epoch budget:
/// `epochs` per hidden layer plus `readout_epochs`, all spent on joint
/// training.
pub fn train_mlp_backprop(
    dims: &[usize],
    data: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LayerStack> {
    if dims.len() < 3 {
        return Err(FbmError::Config(
            "baseline needs input, at least one hidden, and output dims".into(),
        ));
    }
    if data.is_empty() {
        return Err(FbmError::Size("cannot train on an empty dataset".into()));
    }
    let n_classes = dims[dims.len() - 1];
    if let Some(&worst) = data.labels.iter().max() {
        if (worst as usize) >= n_classes {
            return Err(FbmError::Label(format!(
                "label {worst} outside the {n_classes}-class output"
            )));
        }
    }
    let hidden_dims = &dims[..dims.len() - 1];
    let mut stack = LayerStack::new_gaussian(hidden_dims, Activation::ShiftedTanh, rng);
    let top = stack.top_dim();
    let std = 1.0 / (top as f64).sqrt();
    stack.readout = Some(Array2::from_shape_fn((n_classes, top), |_| {
        use rand_distr::Distribution;
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        std * z
    }));

    let n_hidden = stack.layers.len();
    let epochs = cfg.epochs * n_hidden + cfg.readout_epochs;
    let mut adams: Vec<Adam> = stack
        .layers
        .iter()
        .map(|l| Adam::new((l.out_dim(), l.in_dim()), cfg.lr))
        .collect();
    let mut adam_r = Adam::new((n_classes, top), cfg.lr);

    for _ in 0..epochs {
        for idx in shuffled_batches(data.len(), cfg.batch_size, rng) {
            let mut x = Array2::zeros((idx.len(), data.dim()));
            let mut labels = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&data.inputs.row(i));
                labels.push(data.labels[i]);
            }
            let (grads, grad_r, _) = mlp_gradients(&stack, x.view(), &labels, cfg.lambda_w);
            for (l, grad) in grads.iter().enumerate() {
                adams[l].step(&mut stack.layers[l].weights, grad);
            }
            adam_r.step(stack.readout.as_mut().unwrap(), &grad_r);
        }
    }
    Ok(stack)
}

/// Predicted classes for a batch of inputs (argmax of the readout logits).
pub fn classify_batch(stack: &LayerStack, inputs: ArrayView2<f64>) -> Result<Vec<u8>> {
    let logits = stack.logits_batch(inputs)?;
    Ok(logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Predicted class of a single input.
pub fn classify(stack: &LayerStack, x: ArrayView1<f64>) -> Result<u8> {
    let batch = x.insert_axis(Axis(0));
    Ok(classify_batch(stack, batch)?[0])
}

/// Fraction of a dataset classified correctly.
pub fn accuracy(stack: &LayerStack, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(FbmError::Size("cannot score an empty dataset".into()));
    }
    let pred = classify_batch(stack, data.inputs.view())?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
