//! Datasets: Gaussian-mixture pairs, exhaustive minibatch pairing, MNIST.
//!
//! Two data regimes are supported. The *mixture* regime draws labeled pairs
//! from a two-cluster Gaussian mixture in dimension `N` (the setting the
//! mean-field and cavity solvers analyze). The *image* regime loads MNIST
//! digits from IDX files and builds boson/fermion pairs exhaustively inside
//! each minibatch.
//!
//! Conventions: pair labels are stored as σ ∈ {0,1} with σ = 1 for a boson
//! pair (same class) and σ = 0 for a fermion pair (different classes). For
//! ±1 labels this equals (1 + y₁y₂)/2.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FbmError, Result};

/// Parameters of the two-cluster Gaussian mixture.
///
/// A pair's labels follow P(y₁,y₂) = ½ρ·δ(y₁−y₂) + ½(1−ρ)·δ(y₁+y₂) over
/// {−1,+1}; inputs are drawn componentwise as x_i ~ N(m·y/N, Δ²/N).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Input dimension N.
    pub n: usize,
    /// Cluster mean scale m.
    pub m: f64,
    /// Cluster standard-deviation scale Δ.
    pub delta: f64,
    /// Boson-pair fraction ρ ∈ [0,1].
    pub rho: f64,
    /// Pair load α = P/N.
    pub alpha: f64,
}

impl MixtureParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(FbmError::Config("mixture dimension n must be >= 1".into()));
        }
        if !(self.delta > 0.0) {
            return Err(FbmError::Config(format!(
                "mixture delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(FbmError::Config(format!(
                "mixture rho must lie in [0,1], got {}",
                self.rho
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(FbmError::Config(format!(
                "pair load alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Number of pairs P = round(αN).
    pub fn n_pairs(&self) -> usize {
        (self.alpha * self.n as f64).round() as usize
    }
}

/// One input pair with class labels and the boson/fermion tag.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x1: Array1<f64>,
    pub x2: Array1<f64>,
    /// Class labels: ±1 in the mixture regime, 0..=9 for images.
    pub y1: i32,
    pub y2: i32,
    /// 1 for a boson pair (y1 == y2), 0 for a fermion pair.
    pub sigma: u8,
}

impl PairSample {
    pub fn dim(&self) -> usize {
        self.x1.len()
    }
}

/// Tag distinguishing fitted from held-out data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// A flat labeled dataset: one input vector per row.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(FbmError::Dimension(format!(
                "{} input rows vs {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input dimension (columns).
    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    /// The subset given by `indices`, in that order.
    pub fn select(&self, indices: &[usize], split: Split) -> LabeledDataset {
        let mut inputs = Array2::zeros((indices.len(), self.dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            inputs.row_mut(row).assign(&self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            inputs,
            labels,
            split,
        }
    }
}

/// Draw one labeled pair from the mixture.
pub fn sample_pair(params: &MixtureParams, rng: &mut impl Rng) -> PairSample {
    let y1: i32 = if rng.random::<bool>() { 1 } else { -1 };
    let y2: i32 = if rng.random::<f64>() < params.rho { y1 } else { -y1 };
    let sd = params.delta / (params.n as f64).sqrt();
    let mut draw = |y: i32| -> Array1<f64> {
        let mean = params.m * y as f64 / params.n as f64;
        Array1::from_iter((0..params.n).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mean + sd * z
        }))
    };
    let x1 = draw(y1);
    let x2 = draw(y2);
    PairSample {
        x1,
        x2,
        y1,
        y2,
        sigma: u8::from(y1 == y2),
    }
}

/// Draw `p` independent pairs.
pub fn sample_dataset(params: &MixtureParams, p: usize, rng: &mut impl Rng) -> Vec<PairSample> {
    (0..p).map(|_| sample_pair(params, rng)).collect()
}

/// Exhaustive unordered index pairs of a label slice, tagged boson/fermion.
///
/// Returns every (i, j) with i < j once, σ = 1 when labels match. This is the
/// cheap form used by the trainer; [`build_pairs`] materializes the vectors.
pub fn pair_indices(labels: &[u8]) -> Vec<(usize, usize, u8)> {
    let n = labels.len();
    let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((i, j, u8::from(labels[i] == labels[j])));
        }
    }
    out
}

/// Exhaustively pair every two distinct items of a batch.
///
/// All C(B,2) unordered pairs are emitted: same-class pairs with σ = 1,
/// cross-class pairs with σ = 0. A batch of fewer than two items yields an
/// empty list (a degenerate minibatch contributes nothing).
pub fn build_pairs(batch: &LabeledDataset) -> Vec<PairSample> {
    pair_indices(&batch.labels)
        .into_iter()
        .map(|(i, j, sigma)| PairSample {
            x1: batch.inputs.row(i).to_owned(),
            x2: batch.inputs.row(j).to_owned(),
            y1: batch.labels[i] as i32,
            y2: batch.labels[j] as i32,
            sigma,
        })
        .collect()
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Read a file fully, transparently gunzipping when it carries a gzip header.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| FbmError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], offset: usize, what: &str, path: &Path) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| {
            FbmError::Length(format!("{}: truncated before {what}", path.display()))
        })?;
    Ok(u32::from_be_bytes(bytes))
}

/// Load an MNIST image/label file pair in IDX layout (plain or gzipped).
///
/// Images are flattened row-major to length rows×cols vectors and scaled to
/// [0,1] by dividing the raw bytes by 255.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, "image magic", images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(FbmError::Format(format!(
            "{}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}",
            images_path.display()
        )));
    }
    let count = be_u32(&img, 4, "image count", images_path)? as usize;
    let rows = be_u32(&img, 8, "row count", images_path)? as usize;
    let cols = be_u32(&img, 12, "column count", images_path)? as usize;
    let dim = rows * cols;
    let need = 16 + count * dim;
    if img.len() < need {
        return Err(FbmError::Length(format!(
            "{}: {} bytes, need {need} for {count} images of {rows}x{cols}",
            images_path.display(),
            img.len()
        )));
    }

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, "label magic", labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(FbmError::Format(format!(
            "{}: label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}",
            labels_path.display()
        )));
    }
    let lab_count = be_u32(&lab, 4, "label count", labels_path)? as usize;
    if lab_count != count {
        return Err(FbmError::Dimension(format!(
            "{count} images vs {lab_count} labels"
        )));
    }
    if lab.len() < 8 + count {
        return Err(FbmError::Length(format!(
            "{}: {} bytes, need {} for {count} labels",
            labels_path.display(),
            lab.len(),
            8 + count
        )));
    }

    let mut inputs = Array2::zeros((count, dim));
    for (i, chunk) in img[16..16 + count * dim].chunks_exact(dim).enumerate() {
        for (j, &b) in chunk.iter().enumerate() {
            inputs[[i, j]] = f64::from(b) / 255.0;
        }
    }
    let labels = lab[8..8 + count].to_vec();
    LabeledDataset::new(inputs, labels, Split::Train)
}

/// Draw disjoint uniform train/test subsets of sizes `n_train` and `n_test`.
pub fn subsample(
    dataset: &LabeledDataset,
    n_train: usize,
    n_test: usize,
    rng: &mut impl Rng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let total = n_train + n_test;
    if total > dataset.len() {
        return Err(FbmError::Size(format!(
            "requested {n_train}+{n_test} items from a dataset of {}",
            dataset.len()
        )));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let (chosen, _) = indices.partial_shuffle(rng, total);
    let train = dataset.select(&chosen[..n_train], Split::Train);
    let test = dataset.select(&chosen[n_train..total], Split::Test);
    Ok((train, test))
}
