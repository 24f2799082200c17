//! Finite-temperature saddle-point equations and their fixed-point solver.
//!
//! At inverse temperature β the conjugate order parameters are disorder
//! averages of *thermal* moments of the two pre-activation fields. For given
//! labels `(y₁, y₂)` and disorder `(v₁, v₂)` the fields are
//!
//! ```text
//! z_x = m·y_x·M + Δ√Q·v_x + Δ√(q−Q)·u_x,
//! ```
//!
//! and the thermal measure over `u ∈ R²` weights the Gaussian by `e^{−βH}`.
//! The update map reads
//!
//! ```text
//! hatq = (αβΔ²/2)·E[⟨H₁₁+H₂₂ − β(H₁²+H₂²)⟩]       E = E_{y,v}
//! hatQ = −αβ²Δ²·E[⟨H₁⟩² + ⟨H₂⟩²]
//! hatM = αβm·E[y₁⟨H₁⟩ + y₂⟨H₂⟩]
//! ```
//!
//! followed by the Gaussian closure with `e = 2·hatq − hatQ + βλ_w`:
//! `q = 1/e + (hatM² − hatQ)/e²`, `Q = (hatM² − hatQ)/e²`, `M = −hatM/e`.

use rayon::prelude::*;

use crate::error::{FbmError, Result};
use crate::meanfield::hamiltonian::{derivs_from_tanh, sigma_of};
use crate::meanfield::{OrderParams, SolveInfo, TheoryProblem};
use crate::quad::{GaussHermite, GaussianPairSet};

/// Thermal averages of the Hamiltonian and its derivatives at one
/// label/disorder configuration.
#[derive(Debug, Clone, Copy)]
pub struct ThermalMoments {
    /// ⟨∂H/∂z₁⟩
    pub h1: f64,
    /// ⟨∂H/∂z₂⟩
    pub h2: f64,
    /// ⟨H₁₁ + H₂₂ − β(H₁² + H₂²)⟩
    pub curvature: f64,
    /// ⟨H⟩
    pub energy: f64,
    /// log ∫Du e^{−βH}
    pub log_z: f64,
}

/// Thermal moments at labels `(y₁,y₂)` and disorder `(v₁,v₂)`.
///
/// Builds its own quadrature rule; the solver reuses a cached rule through
/// the internal variant.
pub fn thermal_moments(
    y1: i32,
    y2: i32,
    v1: f64,
    v2: f64,
    params: &OrderParams,
    problem: &TheoryProblem,
) -> Result<ThermalMoments> {
    let rule = GaussHermite::new(problem.n_quad_inner)?;
    thermal_moments_with(&rule, y1, y2, v1, v2, params, problem)
}

pub(crate) fn thermal_moments_with(
    rule: &GaussHermite,
    y1: i32,
    y2: i32,
    v1: f64,
    v2: f64,
    params: &OrderParams,
    problem: &TheoryProblem,
) -> Result<ThermalMoments> {
    let mix = &problem.mixture;
    let fluct = params.q - params.Q;
    if params.Q < -1e-12 || fluct < -1e-9 {
        return Err(FbmError::Order(format!(
            "thermal fields need q >= Q >= 0, got q = {}, Q = {}",
            params.q, params.Q
        )));
    }
    let beta = params.beta;
    let sigma = sigma_of(y1, y2);
    let s_v = mix.delta * params.Q.max(0.0).sqrt();
    let s_u = mix.delta * fluct.max(0.0).sqrt();
    let c1 = mix.m * y1 as f64 * params.M + s_v * v1;
    let c2 = mix.m * y2 as f64 * params.M + s_v * v2;

    let n = rule.len();
    // Per-axis caches of (tanh, 1 − tanh²) at every node.
    let mut ts1 = Vec::with_capacity(n);
    let mut ts2 = Vec::with_capacity(n);
    for &u in &rule.nodes {
        let t1 = (c1 + s_u * u).tanh();
        let t2 = (c2 + s_u * u).tanh();
        ts1.push((t1, 1.0 - t1 * t1));
        ts2.push((t2, 1.0 - t2 * t2));
    }

    // First pass: Hamiltonian on the grid and its minimum (shifts the
    // exponent so e^{−β(H−H_min)} never underflows where it matters).
    let mut h_grid = vec![0.0f64; n * n];
    let mut h_min = f64::INFINITY;
    for i in 0..n {
        let (t1, _) = ts1[i];
        for j in 0..n {
            let (t2, _) = ts2[j];
            let d = t1 - t2;
            let d2 = d * d;
            let h = if sigma == 1.0 {
                0.5 * d2
            } else {
                0.5 * crate::network::smooth_hinge(problem.d_f - d2, problem.a)
            };
            h_grid[i * n + j] = h;
            if h < h_min {
                h_min = h;
            }
        }
    }

    // Second pass: Boltzmann-weighted Gaussian moments. Integration by
    // parts against the weight turns the derivative averages into moments
    // of the fluctuation variables themselves,
    //
    //   ⟨H₁⟩ = −⟨u₁⟩/(βs_u),
    //   ⟨H₁₁+H₂₂ − β(H₁²+H₂²)⟩ = −(⟨u₁²+u₂²⟩ − 2)/(βs_u²),
    //
    // whose integrands are free of the hinge's sharp second derivative and
    // converge at far lower node counts (the identities are exact in the
    // continuum). When βs_u is too small for the cancellation to be safe,
    // the direct derivative averages are used instead — in that regime the
    // weight is nearly flat and they are well behaved.
    let mut z = 0.0;
    let mut mu1 = 0.0;
    let mut mu2 = 0.0;
    let mut muu = 0.0;
    let mut energy = 0.0;
    for i in 0..n {
        let u1 = rule.nodes[i];
        let wi = rule.weights[i];
        for j in 0..n {
            let u2 = rule.nodes[j];
            let h = h_grid[i * n + j];
            let w = wi * rule.weights[j] * (-beta * (h - h_min)).exp();
            z += w;
            mu1 += w * u1;
            mu2 += w * u2;
            muu += w * (u1 * u1 + u2 * u2);
            energy += w * h;
        }
    }
    if !(z > 0.0) || !z.is_finite() {
        return Err(FbmError::Numeric(format!(
            "thermal partition function degenerate (z = {z})"
        )));
    }

    let bs = beta * s_u;
    let bs2 = beta * s_u * s_u;
    let (mut h1, mut h2, mut curv) = (0.0, 0.0, 0.0);
    let need_direct_first = bs < 1e-6;
    let need_direct_curv = bs2 < 1e-6;
    if bs >= 1e-6 {
        h1 = -(mu1 / z) / bs;
        h2 = -(mu2 / z) / bs;
    }
    if bs2 >= 1e-6 {
        curv = -(muu / z - 2.0) / bs2;
    }
    if need_direct_first || need_direct_curv {
        let (mut d1, mut d2, mut dc) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (t1, s1) = ts1[i];
            let wi = rule.weights[i];
            for j in 0..n {
                let (t2, s2) = ts2[j];
                let h = h_grid[i * n + j];
                let w = wi * rule.weights[j] * (-beta * (h - h_min)).exp();
                let d = derivs_from_tanh(sigma, t1, s1, t2, s2, problem.d_f, problem.a);
                d1 += w * d.h1;
                d2 += w * d.h2;
                dc += w * (d.h11 + d.h22 - beta * (d.h1 * d.h1 + d.h2 * d.h2));
            }
        }
        if need_direct_first {
            h1 = d1 / z;
            h2 = d2 / z;
        }
        if need_direct_curv {
            curv = dc / z;
        }
    }
    Ok(ThermalMoments {
        h1,
        h2,
        curvature: curv,
        energy: energy / z,
        log_z: z.ln() - beta * h_min,
    })
}

/// Disorder-averaged ingredients of the conjugate updates.
struct HatIntegrals {
    /// E[⟨H₁₁+H₂₂ − β(H₁²+H₂²)⟩]
    curvature: f64,
    /// E[⟨H₁⟩² + ⟨H₂⟩²]
    grad_sq: f64,
    /// E[y₁⟨H₁⟩ + y₂⟨H₂⟩]
    alignment: f64,
}

fn hat_integrals(
    inner: &GaussHermite,
    disorder: &GaussianPairSet,
    params: &OrderParams,
    problem: &TheoryProblem,
) -> Result<HatIntegrals> {
    let inv_n = 1.0 / disorder.len() as f64;
    let mut out = HatIntegrals {
        curvature: 0.0,
        grad_sq: 0.0,
        alignment: 0.0,
    };
    for (y1, y2, wy) in problem.label_configs() {
        // Fixed-size chunks in lattice order: parallel evaluation with a
        // deterministic reduction.
        let partials: Vec<(f64, f64, f64)> = disorder
            .points
            .par_chunks(256)
            .map(|chunk| -> Result<(f64, f64, f64)> {
                let mut acc = (0.0, 0.0, 0.0);
                for &(v1, v2) in chunk {
                    let tm = thermal_moments_with(inner, y1, y2, v1, v2, params, problem)?;
                    acc.0 += tm.curvature;
                    acc.1 += tm.h1 * tm.h1 + tm.h2 * tm.h2;
                    acc.2 += y1 as f64 * tm.h1 + y2 as f64 * tm.h2;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        for (c, g, a) in partials {
            out.curvature += wy * inv_n * c;
            out.grad_sq += wy * inv_n * g;
            out.alignment += wy * inv_n * a;
        }
    }
    Ok(out)
}

/// Iterate the finite-temperature saddle-point equations to a fixed point.
///
/// `init` is the starting `(M, q, Q)`; `damping ∈ [0,1)` is the weight kept
/// on the previous iterate at each update. Convergence is declared when the
/// largest raw update falls below `tol`; exceeding `max_iter` is an error
/// carrying the residual reached.
pub fn solve_sde_finite_t(
    problem: &TheoryProblem,
    beta: f64,
    init: (f64, f64, f64),
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(OrderParams, SolveInfo)> {
    problem.validate()?;
    if !(beta > 0.0) {
        return Err(FbmError::Config(format!(
            "inverse temperature must be > 0, got {beta}"
        )));
    }
    if !(0.0..1.0).contains(&damping) {
        return Err(FbmError::Config(format!(
            "damping must lie in [0,1), got {damping}"
        )));
    }
    let (m0, q0, qq0) = init;
    if !(q0 > 0.0) || qq0 < 0.0 || q0 < qq0 {
        return Err(FbmError::Config(format!(
            "initial order parameters need q > 0 and 0 <= Q <= q, got q = {q0}, Q = {qq0}"
        )));
    }
    crate::threads::ensure_pool();

    let inner = GaussHermite::new(problem.n_quad_inner)?;
    let disorder = GaussianPairSet::golden_lattice(problem.n_disorder)?;
    let mix = problem.mixture;
    let alpha = mix.alpha;
    let d2 = mix.delta * mix.delta;

    let mut params = OrderParams {
        M: m0,
        q: q0,
        Q: qq0,
        hatM: 0.0,
        hatq: 0.0,
        hatQ: 0.0,
        beta,
    };
    let mut residual = f64::INFINITY;

    for iter in 1..=max_iter {
        let e = hat_integrals(&inner, &disorder, &params, problem)?;
        let hatq = 0.5 * alpha * beta * d2 * e.curvature;
        let hat_qq = -alpha * beta * beta * d2 * e.grad_sq;
        let hatm = alpha * beta * mix.m * e.alignment;

        let denom = 2.0 * hatq - hat_qq + beta * problem.lambda_w;
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(FbmError::Stability(format!(
                "effective stiffness 2·hatq − hatQ + βλ_w = {denom} is not positive \
                 (iteration {iter})"
            )));
        }
        let spread = (hatm * hatm - hat_qq) / (denom * denom);
        let q_new = 1.0 / denom + spread;
        let qq_new = spread;
        let m_new = -hatm / denom;

        residual = (m_new - params.M)
            .abs()
            .max((q_new - params.q).abs())
            .max((qq_new - params.Q).abs());

        params.M = damping * params.M + (1.0 - damping) * m_new;
        params.q = damping * params.q + (1.0 - damping) * q_new;
        params.Q = damping * params.Q + (1.0 - damping) * qq_new;
        params.hatM = hatm;
        params.hatq = hatq;
        params.hatQ = hat_qq;

        if residual < tol {
            return Ok((
                params,
                SolveInfo {
                    iterations: iter,
                    residual,
                },
            ));
        }
    }
    Err(FbmError::Convergence {
        message: "finite-temperature saddle-point iteration did not converge".into(),
        residual,
        iterations: max_iter,
    })
}
