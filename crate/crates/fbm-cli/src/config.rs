//! Declarative run configuration.
//!
//! Precedence, lowest to highest:
//!   1. built-in defaults (every field has one),
//!   2. the TOML file passed with `--config`,
//!   3. `--set section.key=value` overrides, applied in order,
//!   4. dedicated flags (`--out-dir`, `--seeds`).
//!
//! Unknown keys are rejected so typos fail loudly, and semantic validation
//! reports every problem at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Which subcommand the config is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Theory,
    ZeroT,
    Bp,
    Train,
    TrainMlp,
    Attack,
    Sweep,
    Pca,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory all artifacts are written into.
    pub out_dir: PathBuf,
    /// Seeds for everything stochastic; one full repetition per seed where a
    /// command supports repetition.
    pub seeds: Vec<u64>,
    pub mixture: MixtureSection,
    pub theory: TheorySection,
    pub bp: BpSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
    pub pca: PcaSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("fbm-out"),
            seeds: vec![1, 2, 3, 4, 5],
            mixture: MixtureSection::default(),
            theory: TheorySection::default(),
            bp: BpSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            sweep: SweepSection::default(),
            pca: PcaSection::default(),
        }
    }
}

/// Two-cluster Gaussian mixture the theory and message-passing runs draw from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    /// Input dimension N (finite-size runs only; the theory is its N→∞ limit).
    pub n: usize,
    /// Cluster mean scale.
    pub m: f64,
    /// Cluster standard-deviation scale.
    pub delta: f64,
    /// Boson-pair fraction in [0,1].
    pub rho: f64,
}

impl Default for MixtureSection {
    fn default() -> Self {
        MixtureSection {
            n: 200,
            m: 1.0,
            delta: 0.5,
            rho: 0.5,
        }
    }
}

/// Saddle-point solver settings shared by `theory` and `zero-t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    /// Fermion margin of the pair loss.
    pub d_f: f64,
    /// Weight-decay strength.
    pub lambda_w: f64,
    /// Inverse temperature (`theory` only; `zero-t` is the T→0 limit).
    pub beta: f64,
    /// Pair-load values α = P/N to sweep, ascending.
    pub alpha_grid: Vec<f64>,
    /// Fixed-point damping in [0, 1).
    pub damping: f64,
    /// Convergence tolerance on the largest raw update.
    pub tol: f64,
    pub max_iter: usize,
    /// Low-discrepancy points for the disorder average.
    pub n_disorder: usize,
    /// Gauss-Hermite nodes per axis for the inner integrals.
    pub n_quad_inner: usize,
    /// Starting point `[M, q, Q]` (finite T) or `[M, q, chi]` (zero T) for
    /// the first grid point; later points warm-start from the previous one.
    pub init: Vec<f64>,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            d_f: 1.0,
            lambda_w: 0.05,
            beta: 50.0,
            alpha_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5],
            damping: 0.5,
            tol: 1e-10,
            max_iter: 20_000,
            n_disorder: 16_384,
            n_quad_inner: 40,
            init: vec![0.1, 1.0, 0.5],
        }
    }
}

/// Message-passing settings for finite instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpSection {
    pub d_f: f64,
    pub lambda_w: f64,
    /// Inverse temperature of the weight posterior.
    pub beta: f64,
    /// Smoothing scale of the hinge.
    pub a: f64,
    /// Pair-load values α = P/N to sweep, ascending.
    pub alpha_grid: Vec<f64>,
    /// Use the O(P) evidence schedule instead of the exact O(P·N) one.
    pub relaxed: bool,
    /// Update messages pair by pair instead of in parallel sweeps.
    pub sequential: bool,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Annealing ladder length (0 disables annealing).
    pub anneal_stages: usize,
    /// Inverse temperature the ladder starts from.
    pub anneal_beta0: f64,
    /// Convergence tolerance of intermediate ladder stages.
    pub stage_tol: f64,
    /// Gauss-Hermite nodes per axis for the pair integrals.
    pub n_quad: usize,
    /// Fresh pairs drawn per run to measure the generalization loss.
    pub n_test_pairs: usize,
}

impl Default for BpSection {
    fn default() -> Self {
        BpSection {
            d_f: 1.0,
            lambda_w: 0.05,
            beta: 50.0,
            a: 0.01,
            alpha_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5],
            relaxed: true,
            sequential: false,
            damping: 0.5,
            tol: 1e-6,
            max_iter: 1000,
            anneal_stages: 6,
            anneal_beta0: 2.0,
            stage_tol: 1e-3,
            n_quad: 24,
            n_test_pairs: 2000,
        }
    }
}

/// Image dataset location and split sizes (train / attack / sweep / pca).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// IDX image file, plain or gzipped.
    pub images: Option<PathBuf>,
    /// IDX label file, plain or gzipped.
    pub labels: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the train/test split, separate from the model seeds so every
    /// seed trains on the same data.
    pub data_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            images: None,
            labels: None,
            n_train: 1000,
            n_test: 4000,
            data_seed: 0,
        }
    }
}

/// Network and optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Input plus hidden widths for the layer-wise model (readout is added on
    /// top with `n_classes` outputs).
    pub dims: Vec<usize>,
    /// Full widths, input through output, for the backprop baseline.
    pub mlp_dims: Vec<usize>,
    pub n_classes: usize,
    /// "tanh" or "shifted-tanh".
    pub activation: String,
    pub d_f: f64,
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
    /// Write one checkpoint per seed into the output directory.
    pub save_models: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = fbm::network::TrainConfig::default();
        TrainSection {
            dims: vec![784, 1000],
            mlp_dims: vec![784, 1000, 10],
            n_classes: 10,
            activation: "tanh".into(),
            d_f: t.d_f,
            lambda_w: t.lambda_w,
            a: t.a,
            batch_size: t.batch_size,
            epochs: t.epochs,
            readout_epochs: t.readout_epochs,
            lr: t.lr,
            plateau_tol: t.plateau_tol,
            plateau_epochs: t.plateau_epochs,
            save_models: true,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> fbm::network::TrainConfig {
        fbm::network::TrainConfig {
            d_f: self.d_f,
            lambda_w: self.lambda_w,
            a: self.a,
            batch_size: self.batch_size,
            epochs: self.epochs,
            readout_epochs: self.readout_epochs,
            lr: self.lr,
            plateau_tol: self.plateau_tol,
            plateau_epochs: self.plateau_epochs,
        }
    }

    pub fn parsed_activation(&self) -> Option<fbm::network::Activation> {
        match self.activation.as_str() {
            "tanh" => Some(fbm::network::Activation::Tanh),
            "shifted-tanh" => Some(fbm::network::Activation::ShiftedTanh),
            _ => None,
        }
    }
}

/// Robustness evaluation of one saved checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Checkpoint to attack (as written by `train` / `train-mlp`).
    pub model: Option<PathBuf>,
    /// "fgsm" or "noise".
    pub kind: String,
    /// Largest perturbation budget of the ε grid.
    pub eps_max: f64,
    /// Grid points, ε = 0 included.
    pub points: usize,
    /// Noise draws averaged per sample ("noise" only).
    pub draws: usize,
    /// Valid input range perturbed images are clipped to; empty disables
    /// clipping, two values `[lo, hi]` enable it.
    pub clip: Vec<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            model: None,
            kind: "fgsm".into(),
            eps_max: 0.5,
            points: 21,
            draws: 5,
            clip: vec![0.0, 1.0],
        }
    }
}

/// Fermion-margin sweep settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Margin values to train at, ascending.
    pub d_f_grid: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            d_f_grid: vec![0.05, 0.1, 0.2, 0.3, 0.455, 0.6, 0.8, 1.0, 1.5, 2.0],
        }
    }
}

/// Principal-component analysis of hidden representations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSection {
    /// Checkpoint whose representations are analyzed.
    pub model: Option<PathBuf>,
    /// Leading components kept.
    pub k: usize,
    /// Representation depth: number of layers applied (0 = raw inputs);
    /// omitted = the full stack.
    pub layer: Option<usize>,
    /// Evaluation samples taken from the test split.
    pub n_samples: usize,
}

impl Default for PcaSection {
    fn default() -> Self {
        PcaSection {
            model: None,
            k: 3,
            layer: None,
            n_samples: 2000,
        }
    }
}

/// Load the config with full precedence applied.
pub fn load(
    config_path: Option<&Path>,
    sets: &[String],
    out_dir: Option<&Path>,
    seeds: Option<&[u64]>,
) -> Result<ExperimentConfig, CliError> {
    let mut table: toml::Table = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::msg("config", format!("cannot read {}: {e}", p.display()))
            })?;
            text.parse()?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_set(&mut table, s)?;
    }
    let mut cfg: ExperimentConfig = table.try_into()?;
    if let Some(d) = out_dir {
        cfg.out_dir = d.to_path_buf();
    }
    if let Some(s) = seeds {
        cfg.seeds = s.to_vec();
    }
    Ok(cfg)
}

/// Apply one `section.key=value` override onto the raw TOML table.
///
/// The value is parsed as TOML (so lists and floats work); something that
/// fails to parse is taken as a bare string.
fn apply_set(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key_path, raw_value) = spec.split_once('=').ok_or_else(|| {
        CliError::msg(
            "config",
            format!("--set expects key=value, got {spec:?}"),
        )
    })?;
    let key_path = key_path.trim();
    if key_path.is_empty() {
        return Err(CliError::msg("config", "--set key must be non-empty"));
    }
    let value: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table has the key it defined"),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };

    let parts: Vec<&str> = key_path.split('.').collect();
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            CliError::msg(
                "config",
                format!("--set {key_path}: {part} is not a table"),
            )
        })?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Collect every semantic problem for the given mode.
pub fn validate(cfg: &ExperimentConfig, mode: Mode) -> Vec<String> {
    let mut errs = Vec::new();
    let mut err = |msg: String| errs.push(msg);

    if cfg.seeds.is_empty() {
        err("seeds: need at least one seed".into());
    }
    if cfg.out_dir.as_os_str().is_empty() {
        err("out_dir: must be non-empty".into());
    }

    let uses_mixture = matches!(mode, Mode::Theory | Mode::ZeroT | Mode::Bp);
    if uses_mixture {
        let m = &cfg.mixture;
        if !(m.delta > 0.0) {
            err(format!("mixture.delta: must be > 0, got {}", m.delta));
        }
        if !(0.0..=1.0).contains(&m.rho) {
            err(format!("mixture.rho: must lie in [0,1], got {}", m.rho));
        }
        if !m.m.is_finite() {
            err(format!("mixture.m: must be finite, got {}", m.m));
        }
    }
    if mode == Mode::Bp && cfg.mixture.n < 2 {
        err(format!(
            "mixture.n: message passing needs n >= 2, got {}",
            cfg.mixture.n
        ));
    }

    match mode {
        Mode::Theory | Mode::ZeroT => {
            let t = &cfg.theory;
            if !(t.d_f > 0.0) {
                err(format!("theory.d_f: must be > 0, got {}", t.d_f));
            }
            if !(t.lambda_w > 0.0) {
                err(format!("theory.lambda_w: must be > 0, got {}", t.lambda_w));
            }
            if mode == Mode::Theory && !(t.beta > 0.0) {
                err(format!("theory.beta: must be > 0, got {}", t.beta));
            }
            check_grid(&mut errs, "theory.alpha_grid", &t.alpha_grid);
            if !(0.0..1.0).contains(&t.damping) {
                err(format!("theory.damping: must lie in [0,1), got {}", t.damping));
            }
            if !(t.tol > 0.0) {
                err(format!("theory.tol: must be > 0, got {}", t.tol));
            }
            if t.max_iter == 0 {
                err("theory.max_iter: must be >= 1".into());
            }
            if t.n_disorder == 0 {
                err("theory.n_disorder: must be >= 1".into());
            }
            if t.n_quad_inner < 2 {
                err(format!(
                    "theory.n_quad_inner: need at least 2 nodes, got {}",
                    t.n_quad_inner
                ));
            }
            if t.init.len() != 3 {
                err(format!(
                    "theory.init: need exactly three values [M, q, {}], got {}",
                    if mode == Mode::Theory { "Q" } else { "chi" },
                    t.init.len()
                ));
            }
        }
        Mode::Bp => {
            let b = &cfg.bp;
            if !(b.d_f > 0.0) {
                err(format!("bp.d_f: must be > 0, got {}", b.d_f));
            }
            if !(b.lambda_w > 0.0) {
                err(format!("bp.lambda_w: must be > 0, got {}", b.lambda_w));
            }
            if !(b.beta > 0.0) {
                err(format!("bp.beta: must be > 0, got {}", b.beta));
            }
            check_grid(&mut errs, "bp.alpha_grid", &b.alpha_grid);
            if !(0.0..1.0).contains(&b.damping) {
                err(format!("bp.damping: must lie in [0,1), got {}", b.damping));
            }
            if b.sequential && b.relaxed {
                err("bp.sequential: incompatible with bp.relaxed (the relaxed schedule updates whole sweeps)".into());
            }
            if b.n_test_pairs == 0 {
                err("bp.n_test_pairs: must be >= 1".into());
            }
        }
        Mode::Train | Mode::TrainMlp | Mode::Sweep => {
            require_dataset(&mut errs, cfg, mode);
            let t = &cfg.train;
            if mode == Mode::TrainMlp {
                if t.mlp_dims.len() < 3 {
                    err(format!(
                        "train.mlp_dims: backprop baseline needs input, hidden, and output widths, got {:?}",
                        t.mlp_dims
                    ));
                }
            } else if t.dims.len() < 2 {
                err(format!(
                    "train.dims: need input plus at least one feature width, got {:?}",
                    t.dims
                ));
            }
            if t.n_classes < 2 {
                err(format!("train.n_classes: must be >= 2, got {}", t.n_classes));
            }
            if t.parsed_activation().is_none() {
                err(format!(
                    "train.activation: expected \"tanh\" or \"shifted-tanh\", got {:?}",
                    t.activation
                ));
            }
            if !(t.d_f > 0.0) {
                err(format!("train.d_f: must be > 0, got {}", t.d_f));
            }
            if t.batch_size == 0 {
                err("train.batch_size: must be >= 1".into());
            }
            if t.epochs == 0 {
                err("train.epochs: must be >= 1".into());
            }
            if !(t.lr > 0.0) {
                err(format!("train.lr: must be > 0, got {}", t.lr));
            }
            if mode == Mode::Sweep {
                check_grid(&mut errs, "sweep.d_f_grid", &cfg.sweep.d_f_grid);
            }
        }
        Mode::Attack => {
            require_dataset(&mut errs, cfg, mode);
            let a = &cfg.attack;
            if a.model.is_none() {
                err("attack.model: required (checkpoint path written by train/train-mlp)".into());
            }
            if a.kind != "fgsm" && a.kind != "noise" {
                err(format!(
                    "attack.kind: expected \"fgsm\" or \"noise\", got {:?}",
                    a.kind
                ));
            }
            if !(a.eps_max > 0.0) {
                err(format!("attack.eps_max: must be > 0, got {}", a.eps_max));
            }
            if a.points < 2 {
                err(format!("attack.points: need at least 2 grid points, got {}", a.points));
            }
            if a.draws == 0 {
                err("attack.draws: must be >= 1".into());
            }
            match a.clip.len() {
                0 => {}
                2 => {
                    if !(a.clip[0] < a.clip[1]) {
                        err(format!(
                            "attack.clip: need lo < hi, got [{}, {}]",
                            a.clip[0], a.clip[1]
                        ));
                    }
                }
                n => err(format!(
                    "attack.clip: empty (no clipping) or [lo, hi], got {n} values"
                )),
            }
        }
        Mode::Pca => {
            require_dataset(&mut errs, cfg, mode);
            let p = &cfg.pca;
            if p.model.is_none() {
                err("pca.model: required (checkpoint path written by train/train-mlp)".into());
            }
            if p.k == 0 {
                err("pca.k: must be >= 1".into());
            }
            if p.n_samples < p.k + 1 {
                err(format!(
                    "pca.n_samples: need at least k+1 = {} samples, got {}",
                    p.k + 1,
                    p.n_samples
                ));
            }
        }
    }

    errs
}

fn check_grid(errs: &mut Vec<String>, name: &str, grid: &[f64]) {
    if grid.is_empty() {
        errs.push(format!("{name}: must be non-empty"));
        return;
    }
    if grid.iter().any(|&g| !(g > 0.0)) {
        errs.push(format!("{name}: every value must be > 0"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        errs.push(format!("{name}: must be strictly ascending"));
    }
}

fn require_dataset(errs: &mut Vec<String>, cfg: &ExperimentConfig, mode: Mode) {
    let what = match mode {
        Mode::Train => "train",
        Mode::TrainMlp => "train-mlp",
        Mode::Attack => "attack",
        Mode::Sweep => "sweep",
        Mode::Pca => "pca",
        _ => unreachable!("only dataset-backed modes call this"),
    };
    if cfg.data.images.is_none() {
        errs.push(format!(
            "data.images: required for {what} runs (IDX image file, plain or gzipped)"
        ));
    }
    if cfg.data.labels.is_none() {
        errs.push(format!(
            "data.labels: required for {what} runs (IDX label file, plain or gzipped)"
        ));
    }
    if cfg.data.n_train == 0 {
        errs.push("data.n_train: must be >= 1".into());
    }
    if cfg.data.n_test == 0 {
        errs.push("data.n_test: must be >= 1".into());
    }
}
