//! `train` / `train-mlp`: fit models on an image dataset, one per seed.
//!
//! Both commands share the data pipeline: load the IDX files, carve a fixed
//! train/test split with `data.data_seed` (so every seed sees the same data),
//! then train with per-seed initialization and shuffling. Checkpoints are
//! written per seed; accuracies land in `summary.json`.

use std::collections::BTreeMap;
use std::path::Path;

use fbm::data::{load_mnist, subsample};
use fbm::network::checkpoint::save_stack;
use fbm::network::train::{accuracy, train_fbm, train_mlp_backprop};
use fbm::rng::seeded;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::fmt;

/// Sample standard deviation (n − 1 denominator; 0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    mlp: bool,
) -> Result<(Vec<String>, BTreeMap<String, f64>), CliError> {
    let d = &cfg.data;
    let t = &cfg.train;
    let activation = t.parsed_activation().expect("validated upstream");
    let train_cfg = t.train_config();

    let full = load_mnist(
        d.images.as_deref().expect("validated upstream"),
        d.labels.as_deref().expect("validated upstream"),
    )?;
    let (train_set, test_set) = subsample(&full, d.n_train, d.n_test, &mut seeded(d.data_seed))?;

    let mut summary = BTreeMap::new();
    let mut outputs = Vec::new();
    let mut writer = csv::Writer::from_path(out_dir.join("train.csv"))?;
    writer.write_record(["seed", "stage", "epochs_run", "final_loss"])?;

    let mut accs = Vec::new();
    for &seed in &cfg.seeds {
        let mut rng = seeded(seed);
        let stack = if mlp {
            let stack = train_mlp_backprop(&t.mlp_dims, &train_set, &train_cfg, &mut rng)?;
            // The baseline reports no per-stage losses; record the epoch
            // budget it was given and leave the loss cell empty.
            writer.write_record([
                seed.to_string(),
                "backprop".into(),
                (t.epochs + t.readout_epochs).to_string(),
                String::new(),
            ])?;
            stack
        } else {
            let (stack, reports) =
                train_fbm(&t.dims, activation, &train_set, t.n_classes, &train_cfg, &mut rng)?;
            let n_layers = stack.layers.len();
            for (i, report) in reports.iter().enumerate() {
                let stage = if i < n_layers {
                    format!("layer{}", i + 1)
                } else {
                    "readout".to_string()
                };
                writer.write_record([
                    seed.to_string(),
                    stage,
                    report.epochs_run.to_string(),
                    fmt(report.final_loss),
                ])?;
            }
            stack
        };

        let acc = accuracy(&stack, &test_set)?;
        summary.insert(format!("accuracy@seed={seed}"), acc);
        accs.push(acc);

        if t.save_models {
            let name = format!("model-seed{seed}.json");
            save_stack(&out_dir.join(&name), &stack)?;
            outputs.push(name);
        }
    }
    writer.flush()?;
    outputs.insert(0, "train.csv".into());

    let (mean, std) = mean_std(&accs);
    summary.insert("accuracy_mean".into(), mean);
    summary.insert("accuracy_std".into(), std);
    summary.insert("n_train".into(), train_set.len() as f64);
    summary.insert("n_test".into(), test_set.len() as f64);

    Ok((outputs, summary))
}
