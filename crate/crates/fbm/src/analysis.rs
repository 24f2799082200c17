//! Representation-geometry diagnostics and the margin sweep.
//!
//! [`pca`] measures how concentrated a set of hidden representations is
//! (the explained-variance ratio of the top components is the headline
//! geometry statistic), [`pair_distance_stats`] tracks how far
//! same-class and different-class pairs sit in a given layer, and
//! [`sweep_df`] retrains the contrastive network across a grid of fermion
//! margins to map accuracy and measured distances against `d_F`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FbmError, Result};
use crate::network::{accuracy, pair_distance_sq, train_fbm, Activation, LayerStack, TrainConfig};
use crate::rng::seeded;

/// Top-`k` principal components of a representation sample.
#[derive(Debug, Clone)]
pub struct PcaResult {
    /// Component directions, one per row, orthonormal, shape `(k, width)`.
    pub eigenvectors: Array2<f64>,
    /// Matching covariance eigenvalues, descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// Centered data projected on the components, shape `(samples, k)`.
    pub projections: Array2<f64>,
    /// Explained variance ratio: top-`k` eigenvalue mass over the total.
    pub r: f64,
}

/// Principal component analysis of `reps` (rows are samples), keeping the
/// `k` directions of largest variance.
///
/// The covariance is the centered `width × width` matrix; widths here stay
/// ≤ 1000, so a full symmetric eigendecomposition is the simplest correct
/// tool. Eigenvalues are clamped at zero (roundoff can drive degenerate
/// directions slightly negative).
pub fn pca(reps: ArrayView2<f64>, k: usize) -> Result<PcaResult> {
    let n = reps.nrows();
    let width = reps.ncols();
    if k == 0 || k > width {
        return Err(FbmError::Dimension(format!(
            "cannot keep {k} components of width-{width} representations"
        )));
    }
    if n < k + 1 {
        return Err(FbmError::Size(format!(
            "need at least {} samples for {k} components, got {n}",
            k + 1
        )));
    }

    // Center columns.
    let mut centered = reps.to_owned();
    for mut col in centered.columns_mut() {
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|v| v - mean);
    }

    let mut cov = DMatrix::zeros(width, width);
    for a in 0..width {
        for b in a..width {
            let mut acc = 0.0;
            for i in 0..n {
                acc += centered[[i, a]] * centered[[i, b]];
            }
            let c = acc / (n as f64 - 1.0);
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let mut eigenvalues = Vec::with_capacity(k);
    let mut eigenvectors = Array2::zeros((k, width));
    for (row, &idx) in order[..k].iter().enumerate() {
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
        for a in 0..width {
            eigenvectors[[row, a]] = eig.eigenvectors[(a, idx)];
        }
    }
    let kept: f64 = eigenvalues.iter().sum();
    let r = if total > 0.0 { kept / total } else { 0.0 };

    let projections = centered.dot(&eigenvectors.t());
    Ok(PcaResult {
        eigenvectors,
        eigenvalues,
        projections,
        r,
    })
}

/// Mean squared distances of different-class and same-class pairs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistanceStats {
    /// Mean `‖h_L − h_R‖²` over different-class pairs; `None` if the batch
    /// holds no such pair.
    pub fermion: Option<f64>,
    /// Same for same-class pairs.
    pub boson: Option<f64>,
}

/// Average squared representation distances over every unordered pair of a
/// batch, measured after the first `layer` layers (`0` = raw inputs).
pub fn pair_distance_stats(
    stack: &LayerStack,
    batch: &LabeledDataset,
    layer: usize,
) -> Result<DistanceStats> {
    if layer > stack.layers.len() {
        return Err(FbmError::Dimension(format!(
            "layer {layer} out of range for a {}-layer stack",
            stack.layers.len()
        )));
    }
    if batch.is_empty() {
        return Err(FbmError::Size("empty evaluation batch".into()));
    }
    let reps = stack.features_batch_up_to(batch.inputs.view(), layer);
    let n = reps.nrows();
    let (mut f_sum, mut f_cnt, mut b_sum, mut b_cnt) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = pair_distance_sq(reps.row(i), reps.row(j));
            if batch.labels[i] == batch.labels[j] {
                b_sum += d2;
                b_cnt += 1;
            } else {
                f_sum += d2;
                f_cnt += 1;
            }
        }
    }
    Ok(DistanceStats {
        fermion: (f_cnt > 0).then(|| f_sum / f_cnt as f64),
        boson: (b_cnt > 0).then(|| b_sum / b_cnt as f64),
    })
}

/// One margin setting of a sweep, aggregated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub d_f: f64,
    /// Mean test accuracy over the seeds.
    pub acc_mean: f64,
    /// Sample standard deviation of the test accuracy (0 for one seed).
    pub acc_std: f64,
    /// Mean measured fermion distance at the top layer, over seeds.
    pub fermion_d2: f64,
    /// Mean measured boson distance at the top layer, over seeds.
    pub boson_d2: f64,
}

/// Retrain across a margin grid: for every `(d_F, seed)` cell, train the
/// full stack plus readout from scratch, measure test accuracy and the
/// top-layer pair distances on a fixed evaluation batch, then aggregate
/// each grid point over seeds.
///
/// Each cell's generator is `seeded(seed)`, independent of `d_F`, so moving
/// along the grid changes the margin and nothing else.
#[allow(clippy::too_many_arguments)]
pub fn sweep_df(
    dims: &[usize],
    activation: Activation,
    train: &LabeledDataset,
    test: &LabeledDataset,
    n_classes: usize,
    base: &TrainConfig,
    d_f_grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if d_f_grid.is_empty() || seeds.is_empty() {
        return Err(FbmError::Size(
            "sweep needs at least one margin and one seed".into(),
        ));
    }
    if d_f_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FbmError::Order(
            "margin grid must be strictly ascending".into(),
        ));
    }
    // Fixed evaluation batch for the distance statistics.
    let eval_n = test.len().min(200);
    let eval = LabeledDataset::new(
        test.inputs.slice(ndarray::s![..eval_n, ..]).to_owned(),
        test.labels[..eval_n].to_vec(),
        test.split,
    )?;

    let mut rows = Vec::with_capacity(d_f_grid.len());
    for &d_f in d_f_grid {
        let cfg = TrainConfig {
            d_f,
            ..base.clone()
        };
        let mut accs = Vec::with_capacity(seeds.len());
        let mut f_d2 = Vec::with_capacity(seeds.len());
        let mut b_d2 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut rng = seeded(seed);
            let (stack, _) =
                train_fbm(dims, activation, train, n_classes, &cfg, &mut rng)?;
            accs.push(accuracy(&stack, test)?);
            let stats = pair_distance_stats(&stack, &eval, stack.layers.len())?;
            f_d2.push(stats.fermion.unwrap_or(0.0));
            b_d2.push(stats.boson.unwrap_or(0.0));
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = if accs.len() > 1 {
            accs.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(SweepRow {
            d_f,
            acc_mean: mean,
            acc_std: var.sqrt(),
            fermion_d2: f_d2.iter().sum::<f64>() / n,
            boson_d2: b_d2.iter().sum::<f64>() / n,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::network::Layer;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn planar_data_is_fully_explained_by_two_components() {
        // Points on an exact 2-plane embedded in 5 dimensions.
        let mut rng = seeded(3);
        let mut reps = Array2::zeros((40, 5));
        for i in 0..40 {
            let u: f64 = StandardNormal.sample(&mut rng);
            let v: f64 = StandardNormal.sample(&mut rng);
            // Plane spanned by (1,1,0,0,0)/√2 and (0,0,1,−1,0)/√2.
            reps[[i, 0]] = u;
            reps[[i, 1]] = u;
            reps[[i, 2]] = v;
            reps[[i, 3]] = -v;
        }
        let res = pca(reps.view(), 2).unwrap();
        assert_abs_diff_eq!(res.r, 1.0, epsilon = 1e-12);
        assert!(res.eigenvalues[0] >= res.eigenvalues[1]);
        assert!(res.eigenvalues[1] > 0.0);
    }

    #[test]
    fn isotropic_data_explains_k_over_width() {
        let mut rng = seeded(5);
        let width = 100;
        let n = 20_000;
        let reps = Array2::from_shape_fn((n, width), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let res = pca(reps.view(), 3).unwrap();
        // Expectation k/width = 0.03; sampling spread at n = 2·10⁴ is well
        // under 0.005.
        assert_abs_diff_eq!(res.r, 0.03, epsilon = 5e-3);
    }

    #[test]
    fn projections_reconstruct_centered_data_with_all_components() {
        let mut rng = seeded(7);
        let reps = Array2::from_shape_fn((30, 6), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let res = pca(reps.view(), 6).unwrap();
        let recon = res.projections.dot(&res.eigenvectors);
        let mut centered = reps.clone();
        for mut col in centered.columns_mut() {
            let mean = col.sum() / 30.0;
            col.mapv_inplace(|v| v - mean);
        }
        for (a, b) in recon.iter().zip(centered.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn explained_ratio_is_rotation_invariant() {
        let mut rng = seeded(11);
        let reps = Array2::from_shape_fn((200, 4), |(_, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (1.0 + j as f64)
        });
        let r_plain = pca(reps.view(), 2).unwrap().r;
        // Rotate by a fixed orthogonal matrix (Givens in two planes).
        let (c, s) = (0.8f64, 0.6f64);
        let rot = array![
            [c, -s, 0.0, 0.0],
            [s, c, 0.0, 0.0],
            [0.0, 0.0, c, s],
            [0.0, 0.0, -s, c],
        ];
        let r_rot = pca(reps.dot(&rot).view(), 2).unwrap().r;
        assert_abs_diff_eq!(r_plain, r_rot, epsilon = 1e-12);
    }

    #[test]
    fn pca_rejects_bad_shapes() {
        let reps = Array2::<f64>::zeros((5, 3));
        assert!(matches!(
            pca(reps.view(), 4),
            Err(FbmError::Dimension(_))
        ));
        assert!(matches!(pca(reps.view(), 0), Err(FbmError::Dimension(_))));
        let few = Array2::<f64>::zeros((2, 3));
        assert!(matches!(pca(few.view(), 2), Err(FbmError::Size(_))));
    }

    fn two_blob_batch() -> LabeledDataset {
        let mut rng = seeded(13);
        let n = 16;
        let mut inputs = Array2::zeros((n, 3));
        let mut labels = Vec::new();
        for i in 0..n {
            let class = (i % 2) as u8;
            let center = if class == 0 { -0.5 } else { 0.5 };
            for j in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs[[i, j]] = center + 0.1 * z;
            }
            labels.push(class);
        }
        LabeledDataset::new(inputs, labels, Split::Test).unwrap()
    }

    #[test]
    fn distance_stats_match_a_brute_force_loop() {
        let batch = two_blob_batch();
        let mut rng = seeded(17);
        let stack = LayerStack::new_gaussian(&[3, 4], Activation::Tanh, &mut rng);
        let stats = pair_distance_stats(&stack, &batch, 1).unwrap();

        let reps = stack.features_batch(batch.inputs.view());
        let (mut fs, mut bs) = (Vec::new(), Vec::new());
        for i in 0..16 {
            for j in (i + 1)..16 {
                let mut d2 = 0.0;
                for k in 0..4 {
                    let d = reps[[i, k]] - reps[[j, k]];
                    d2 += d * d;
                }
                if batch.labels[i] == batch.labels[j] {
                    bs.push(d2);
                } else {
                    fs.push(d2);
                }
            }
        }
        let f_mean = fs.iter().sum::<f64>() / fs.len() as f64;
        let b_mean = bs.iter().sum::<f64>() / bs.len() as f64;
        assert_abs_diff_eq!(stats.fermion.unwrap(), f_mean, epsilon = 1e-13);
        assert_abs_diff_eq!(stats.boson.unwrap(), b_mean, epsilon = 1e-13);
    }

    #[test]
    fn zero_weights_collapse_all_distances() {
        let batch = two_blob_batch();
        let stack = LayerStack {
            layers: vec![Layer {
                weights: Array2::zeros((4, 3)),
                activation: Activation::Tanh,
            }],
            readout: None,
        };
        let stats = pair_distance_stats(&stack, &batch, 1).unwrap();
        assert_abs_diff_eq!(stats.fermion.unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.boson.unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn single_class_batch_has_no_fermion_statistic() {
        let inputs = Array2::from_elem((4, 2), 0.3);
        let batch =
            LabeledDataset::new(inputs, vec![1, 1, 1, 1], Split::Test).unwrap();
        let mut rng = seeded(19);
        let stack = LayerStack::new_gaussian(&[2, 2], Activation::Tanh, &mut rng);
        let stats = pair_distance_stats(&stack, &batch, 1).unwrap();
        assert!(stats.fermion.is_none());
        assert!(stats.boson.is_some());
    }

    #[test]
    fn raw_input_layer_counts_as_depth_zero() {
        let batch = two_blob_batch();
        let mut rng = seeded(23);
        let stack = LayerStack::new_gaussian(&[3, 4], Activation::Tanh, &mut rng);
        let stats = pair_distance_stats(&stack, &batch, 0).unwrap();
        // At depth 0 the representations are the inputs themselves.
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = batch.inputs[[0, k]] - batch.inputs[[1, k]];
            d2 += d * d;
        }
        // Pair (0, 1) is a fermion pair in the alternating layout; the
        // statistic is an average, so just check it is in a sane range and
        // the call accepts depth 0.
        assert!(stats.fermion.unwrap() > 0.0);
        assert!(d2 > 0.0);
        assert!(matches!(
            pair_distance_stats(&stack, &batch, 2),
            Err(FbmError::Dimension(_))
        ));
    }

    fn sweep_fixture() -> (LabeledDataset, LabeledDataset) {
        let mut rng = seeded(29);
        let make = |n: usize, split: Split, rng: &mut crate::rng::SeedRng| {
            let mut inputs = Array2::zeros((n, 4));
            let mut labels = Vec::new();
            for i in 0..n {
                let class = (i % 2) as u8;
                let sign = if class == 0 { -1.0 } else { 1.0 };
                for j in 0..4 {
                    let z: f64 = StandardNormal.sample(rng);
                    inputs[[i, j]] = sign * 0.4 + 0.15 * z;
                }
                labels.push(class);
            }
            LabeledDataset::new(inputs, labels, split).unwrap()
        };
        (make(40, Split::Train, &mut rng), make(40, Split::Test, &mut rng))
    }

    #[test]
    fn sweep_is_deterministic_and_aggregates_seeds() {
        let (train, test) = sweep_fixture();
        let cfg = TrainConfig {
            epochs: 3,
            readout_epochs: 10,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let grid = [0.3, 0.8];
        let seeds = [5, 6];
        let run = || {
            sweep_df(
                &[4, 5],
                Activation::Tanh,
                &train,
                &test,
                2,
                &cfg,
                &grid,
                &seeds,
            )
            .unwrap()
        };
        let rows1 = run();
        let rows2 = run();
        assert_eq!(rows1.len(), 2);
        for (a, b) in rows1.iter().zip(&rows2) {
            assert_eq!(a.acc_mean, b.acc_mean);
            assert_eq!(a.acc_std, b.acc_std);
            assert_eq!(a.fermion_d2, b.fermion_d2);
        }
        for row in &rows1 {
            assert!(row.acc_std >= 0.0);
            assert!(row.fermion_d2 >= 0.0 && row.boson_d2 >= 0.0);
        }
    }

    #[test]
    fn single_seed_single_margin_reduces_to_one_run() {
        let (train, test) = sweep_fixture();
        let cfg = TrainConfig {
            epochs: 3,
            readout_epochs: 10,
            batch_size: 10,
            d_f: 0.5,
            ..TrainConfig::default()
        };
        let rows = sweep_df(
            &[4, 5],
            Activation::Tanh,
            &train,
            &test,
            2,
            &cfg,
            &[0.5],
            &[9],
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].acc_std, 0.0);

        let mut rng = seeded(9);
        let (stack, _) =
            train_fbm(&[4, 5], Activation::Tanh, &train, 2, &cfg, &mut rng)
                .unwrap();
        let direct = accuracy(&stack, &test).unwrap();
        assert_abs_diff_eq!(rows[0].acc_mean, direct, epsilon = 1e-12);
    }

    #[test]
    fn bad_sweep_inputs_are_rejected() {
        let (train, test) = sweep_fixture();
        let cfg = TrainConfig::default();
        assert!(matches!(
            sweep_df(
                &[4, 5],
                Activation::Tanh,
                &train,
                &test,
                2,
                &cfg,
                &[],
                &[1]
            ),
            Err(FbmError::Size(_))
        ));
        assert!(matches!(
            sweep_df(
                &[4, 5],
                Activation::Tanh,
                &train,
                &test,
                2,
                &cfg,
                &[0.5, 0.2],
                &[1]
            ),
            Err(FbmError::Order(_))
        ));
    }
}
