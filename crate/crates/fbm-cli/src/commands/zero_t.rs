//! `zero-t`: ground-state (T → 0) mean-field sweep over the pair load α.

use std::collections::BTreeMap;
use std::path::Path;

use fbm::data::MixtureParams;
use fbm::meanfield::observables::{classification_error, fermion_distance, generalization_loss};
use fbm::meanfield::solve_sde_zero_t;
use fbm::meanfield::TheoryProblem;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::fmt;

pub fn run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(Vec<String>, BTreeMap<String, f64>), CliError> {
    let t = &cfg.theory;
    let mut summary = BTreeMap::new();
    let mut writer = csv::Writer::from_path(out_dir.join("zero_t.csv"))?;
    writer.write_record([
        "alpha",
        "M",
        "q",
        "chi",
        "eps_g",
        "class_error",
        "fermion_d2",
        "iterations",
        "residual",
    ])?;

    let mut init = (t.init[0], t.init[1], t.init[2]);
    for &alpha in &t.alpha_grid {
        let mixture = MixtureParams {
            n: cfg.mixture.n,
            m: cfg.mixture.m,
            delta: cfg.mixture.delta,
            rho: cfg.mixture.rho,
            alpha,
        };
        let mut problem = TheoryProblem::new(mixture, t.d_f, t.lambda_w);
        problem.n_disorder = t.n_disorder;
        problem.n_quad_inner = t.n_quad_inner;

        let (params, info) = solve_sde_zero_t(&problem, init, t.damping, t.tol, t.max_iter)?;
        let eps_g = generalization_loss(&params, &problem)?;
        let class_error = classification_error(&params, &problem)?;
        let fermion_d2 = fermion_distance(&params, &problem)?;

        writer.write_record([
            fmt(alpha),
            fmt(params.M),
            fmt(params.q),
            fmt(params.chi),
            fmt(eps_g),
            fmt(class_error),
            fmt(fermion_d2),
            info.iterations.to_string(),
            fmt(info.residual),
        ])?;

        let tag = fmt(alpha);
        summary.insert(format!("M@alpha={tag}"), params.M);
        summary.insert(format!("q@alpha={tag}"), params.q);
        summary.insert(format!("eps_g@alpha={tag}"), eps_g);
        summary.insert(format!("class_error@alpha={tag}"), class_error);
        summary.insert(format!("fermion_d2@alpha={tag}"), fermion_d2);

        init = (params.M, params.q, params.chi);
    }
    writer.flush()?;

    Ok((vec!["zero_t.csv".into()], summary))
}
