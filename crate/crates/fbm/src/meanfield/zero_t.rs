//! Zero-temperature saddle-point equations.
//!
//! As β → ∞ the thermal average over the fluctuation fields collapses onto
//! the minimizer of
//!
//! ```text
//! F(u₁, u₂) = (u₁² + u₂²)/2 + H(z₁, z₂),   z_x = m·y_x·M + Δ√q·v_x + Δ√χ·u_x,
//! ```
//!
//! where `χ = lim β(q − Q)` stays finite. With starred quantities evaluated
//! at the minimizer, the conjugates become
//!
//! ```text
//! hatM   = α·m·E[y₁H₁* + y₂H₂*]
//! hatQ   = −α·Δ²·E[H₁*² + H₂*²]                       (≤ 0)
//! hatchi = α·Δ²·E[ tr(H″(I + Δ²χ·H″)⁻¹) ]
//! ```
//!
//! and close through `M = −hatM/(hatchi+λ_w)`, `q = (hatM²−hatQ)/(hatchi+λ_w)²`,
//! `χ = 1/(hatchi+λ_w)`. The trace form of `hatchi` is the exact β → ∞ limit
//! of the finite-temperature curvature average: it accounts for the shift of
//! the minimizer itself when the disorder moves, which a bare `E[H₁₁*+H₂₂*]`
//! misses whenever the coupling `Δ²χ·H″` is not negligible. That bare form is
//! kept alongside only as a diagnostic.

use rayon::prelude::*;

use crate::error::{FbmError, Result};
use crate::meanfield::hamiltonian::{derivs_from_tanh, sigma_of, HamiltonianDerivs};
use crate::meanfield::{SolveInfo, TheoryProblem, ZeroTOrderParams};
use crate::quad::GaussianPairSet;

/// One inner optimization problem: labels and disorder are frozen into the
/// field offsets `c_x`; `s_u = Δ√χ` scales the fluctuation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct InnerProblem {
    pub c1: f64,
    pub c2: f64,
    pub s_u: f64,
    pub sigma: f64,
    pub d_f: f64,
    pub a: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct InnerSolution {
    #[cfg_attr(not(test), allow(dead_code))]
    pub u1: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    pub u2: f64,
    pub value: f64,
    /// Hamiltonian derivatives at the minimizing fields.
    pub derivs: HamiltonianDerivs,
}

impl InnerProblem {
    fn derivs_at(&self, u1: f64, u2: f64) -> HamiltonianDerivs {
        let t1 = (self.c1 + self.s_u * u1).tanh();
        let t2 = (self.c2 + self.s_u * u2).tanh();
        derivs_from_tanh(
            self.sigma,
            t1,
            1.0 - t1 * t1,
            t2,
            1.0 - t2 * t2,
            self.d_f,
            self.a,
        )
    }

    pub(crate) fn value_at(&self, u1: f64, u2: f64) -> f64 {
        0.5 * (u1 * u1 + u2 * u2) + self.derivs_at(u1, u2).h
    }

    /// Gradient of `F` (for tests and the Newton iteration).
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn grad_at(&self, u1: f64, u2: f64) -> (f64, f64) {
        let d = self.derivs_at(u1, u2);
        (u1 + self.s_u * d.h1, u2 + self.s_u * d.h2)
    }
}

/// Levenberg-damped Newton from one starting point. Returns the reached
/// stationary point, or `None` if the iteration failed to settle.
fn newton_from(p: &InnerProblem, mut u1: f64, mut u2: f64) -> Option<InnerSolution> {
    let su2 = p.s_u * p.s_u;
    let mut tau = 0.0f64;
    for _ in 0..120 {
        let d = p.derivs_at(u1, u2);
        let f = 0.5 * (u1 * u1 + u2 * u2) + d.h;
        let g1 = u1 + p.s_u * d.h1;
        let g2 = u2 + p.s_u * d.h2;
        if g1.abs().max(g2.abs()) < 1e-11 {
            return Some(InnerSolution {
                u1,
                u2,
                value: f,
                derivs: d,
            });
        }
        // Hessian of F: I + Δ²χ·H″.
        let (a, b, c) = (1.0 + su2 * d.h11, su2 * d.h12, 1.0 + su2 * d.h22);
        loop {
            let (aa, cc) = (a + tau, c + tau);
            let det = aa * cc - b * b;
            if det <= 1e-12 || aa <= 0.0 {
                tau = (tau * 10.0).max(1e-4);
                if tau > 1e12 {
                    return None;
                }
                continue;
            }
            let s1 = -(cc * g1 - b * g2) / det;
            let s2 = -(aa * g2 - b * g1) / det;
            let f_try = p.value_at(u1 + s1, u2 + s2);
            if f_try <= f + 1e-12 {
                u1 += s1;
                u2 += s2;
                tau = if tau < 1e-8 { 0.0 } else { tau / 10.0 };
                break;
            }
            tau = (tau * 10.0).max(1e-4);
            if tau > 1e12 {
                return None;
            }
        }
    }
    None
}

/// Global minimizer of the inner problem by multistart damped Newton.
///
/// Any stationary point satisfies `u_x = −Δ√χ·H_x*`, which bounds the
/// minimizer's norm; the start grid covers that box with margin.
pub(crate) fn minimize_inner(p: &InnerProblem) -> Result<InnerSolution> {
    let reach = 1.0 + 2.05 * p.s_u;
    let mut best: Option<InnerSolution> = None;
    for i in 0..5 {
        for j in 0..5 {
            let u1 = -reach + 2.0 * reach * i as f64 / 4.0;
            let u2 = -reach + 2.0 * reach * j as f64 / 4.0;
            if let Some(sol) = newton_from(p, u1, u2) {
                if best.as_ref().is_none_or(|b| sol.value < b.value) {
                    best = Some(sol);
                }
            }
        }
    }
    best.ok_or_else(|| {
        FbmError::Numeric(format!(
            "inner minimization failed from every start (c1 = {}, c2 = {}, s_u = {})",
            p.c1, p.c2, p.s_u
        ))
    })
}

/// Disorder-averaged conjugate ingredients at fixed `(M, q, χ)`.
pub(crate) struct ZeroTIntegrals {
    /// E[y₁H₁* + y₂H₂*]
    pub alignment: f64,
    /// E[H₁*² + H₂*²]
    pub grad_sq: f64,
    /// E[tr(H″(I + Δ²χH″)⁻¹)] — the exact susceptibility integrand.
    pub susceptibility: f64,
    /// E[H₁₁* + H₂₂*] — diagnostic bare curvature (ignores minimizer shift).
    pub bare_curvature: f64,
}

pub(crate) fn zero_t_integrals(
    disorder: &GaussianPairSet,
    problem: &TheoryProblem,
    m_align: f64,
    q: f64,
    chi: f64,
) -> Result<ZeroTIntegrals> {
    let mix = &problem.mixture;
    let s_v = mix.delta * q.max(0.0).sqrt();
    let s_u = mix.delta * chi.max(0.0).sqrt();
    let su2 = s_u * s_u;
    let inv_n = 1.0 / disorder.len() as f64;

    let mut out = ZeroTIntegrals {
        alignment: 0.0,
        grad_sq: 0.0,
        susceptibility: 0.0,
        bare_curvature: 0.0,
    };
    for (y1, y2, wy) in problem.label_configs() {
        let partials: Vec<(f64, f64, f64, f64)> = disorder
            .points
            .par_chunks(256)
            .map(|chunk| -> Result<(f64, f64, f64, f64)> {
                let mut acc = (0.0, 0.0, 0.0, 0.0);
                for &(v1, v2) in chunk {
                    let inner = InnerProblem {
                        c1: mix.m * y1 as f64 * m_align + s_v * v1,
                        c2: mix.m * y2 as f64 * m_align + s_v * v2,
                        s_u,
                        sigma: sigma_of(y1, y2),
                        d_f: problem.d_f,
                        a: problem.a,
                    };
                    let sol = minimize_inner(&inner)?;
                    let d = sol.derivs;
                    // tr(H″ A⁻¹) with A = I + Δ²χH″ for the 2×2 block.
                    let det = (1.0 + su2 * d.h11) * (1.0 + su2 * d.h22)
                        - su2 * su2 * d.h12 * d.h12;
                    if det <= 0.0 {
                        return Err(FbmError::Stability(format!(
                            "inner Hessian lost positivity (det = {det}) at v = ({v1}, {v2})"
                        )));
                    }
                    let hh = d.h11 * d.h22 - d.h12 * d.h12;
                    let trace = (d.h11 + d.h22 + 2.0 * su2 * hh) / det;
                    acc.0 += y1 as f64 * d.h1 + y2 as f64 * d.h2;
                    acc.1 += d.h1 * d.h1 + d.h2 * d.h2;
                    acc.2 += trace;
                    acc.3 += d.h11 + d.h22;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        for (al, gs, su, bc) in partials {
            out.alignment += wy * inv_n * al;
            out.grad_sq += wy * inv_n * gs;
            out.susceptibility += wy * inv_n * su;
            out.bare_curvature += wy * inv_n * bc;
        }
    }
    Ok(out)
}

/// Iterate the zero-temperature saddle-point equations to a fixed point.
///
/// `init` is the starting `(M, q, χ)`; `damping ∈ [0,1)` is the weight kept
/// on the previous iterate. Convergence and failure reporting mirror the
/// finite-temperature solver.
pub fn solve_sde_zero_t(
    problem: &TheoryProblem,
    init: (f64, f64, f64),
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(ZeroTOrderParams, SolveInfo)> {
    problem.validate()?;
    if !(0.0..1.0).contains(&damping) {
        return Err(FbmError::Config(format!(
            "damping must lie in [0,1), got {damping}"
        )));
    }
    let (m0, q0, chi0) = init;
    if q0 < 0.0 || !(chi0 > 0.0) {
        return Err(FbmError::Config(format!(
            "initial order parameters need q >= 0 and chi > 0, got q = {q0}, chi = {chi0}"
        )));
    }
    crate::threads::ensure_pool();

    let disorder = GaussianPairSet::golden_lattice(problem.n_disorder)?;
    let mix = problem.mixture;
    let alpha = mix.alpha;
    let d2 = mix.delta * mix.delta;

    let mut params = ZeroTOrderParams {
        M: m0,
        q: q0,
        chi: chi0,
        hatM: 0.0,
        hatQ: 0.0,
        hatchi: 0.0,
    };
    let mut residual = f64::INFINITY;

    for iter in 1..=max_iter {
        let e = zero_t_integrals(&disorder, problem, params.M, params.q, params.chi)?;
        let hatm = alpha * mix.m * e.alignment;
        let hat_qq = -alpha * d2 * e.grad_sq;
        let hatchi = alpha * d2 * e.susceptibility;

        let denom = hatchi + problem.lambda_w;
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(FbmError::Stability(format!(
                "effective stiffness hatchi + λ_w = {denom} is not positive (iteration {iter})"
            )));
        }
        let m_new = -hatm / denom;
        let q_new = (hatm * hatm - hat_qq) / (denom * denom);
        let chi_new = 1.0 / denom;

        residual = (m_new - params.M)
            .abs()
            .max((q_new - params.q).abs())
            .max((chi_new - params.chi).abs());

        params.M = damping * params.M + (1.0 - damping) * m_new;
        params.q = damping * params.q + (1.0 - damping) * q_new;
        params.chi = damping * params.chi + (1.0 - damping) * chi_new;
        params.hatM = hatm;
        params.hatQ = hat_qq;
        params.hatchi = hatchi;

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
        message: "zero-temperature saddle-point iteration did not converge".into(),
        residual,
        iterations: max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MixtureParams;
    use approx::assert_abs_diff_eq;

    fn fig_problem(alpha: f64) -> TheoryProblem {
        TheoryProblem::new(
            MixtureParams {
                n: 200,
                m: 1.0,
                delta: 0.5,
                rho: 0.5,
                alpha,
            },
            1.0,
            0.05,
        )
    }

    #[test]
    fn inner_gradient_matches_finite_differences() {
        let p = InnerProblem {
            c1: 0.4,
            c2: -0.7,
            s_u: 0.9,
            sigma: 0.0,
            d_f: 1.0,
            a: 0.01,
        };
        let h = 1e-6;
        for &(u1, u2) in &[(0.0, 0.0), (0.8, -1.2), (-2.0, 0.3)] {
            let (g1, g2) = p.grad_at(u1, u2);
            let fd1 = (p.value_at(u1 + h, u2) - p.value_at(u1 - h, u2)) / (2.0 * h);
            let fd2 = (p.value_at(u1, u2 + h) - p.value_at(u1, u2 - h)) / (2.0 * h);
            assert_abs_diff_eq!(g1, fd1, epsilon = 1e-8);
            assert_abs_diff_eq!(g2, fd2, epsilon = 1e-8);
        }
    }

    #[test]
    fn minimizer_beats_a_brute_force_grid() {
        // The multistart Newton must find a value at least as low as a dense
        // grid scan, with a (near-)vanishing gradient.
        let cases = [
            (0.3, -0.2, 0.4, 0.0),
            (-1.1, 0.9, 1.4, 0.0),
            (0.05, 0.1, 2.2, 0.0),
            (0.5, 0.5, 0.8, 1.0),
            (-0.4, 1.3, 1.9, 1.0),
        ];
        for &(c1, c2, s_u, sigma) in &cases {
            let p = InnerProblem {
                c1,
                c2,
                s_u,
                sigma,
                d_f: 1.0,
                a: 0.01,
            };
            let sol = minimize_inner(&p).unwrap();
            let (g1, g2) = p.grad_at(sol.u1, sol.u2);
            assert!(g1.abs() < 1e-9 && g2.abs() < 1e-9, "gradient ({g1}, {g2})");

            let reach = 1.0 + 2.05 * s_u;
            let mut grid_min = f64::INFINITY;
            let steps = 240;
            for i in 0..=steps {
                for j in 0..=steps {
                    let u1 = -reach + 2.0 * reach * i as f64 / steps as f64;
                    let u2 = -reach + 2.0 * reach * j as f64 / steps as f64;
                    grid_min = grid_min.min(p.value_at(u1, u2));
                }
            }
            assert!(
                sol.value <= grid_min + 1e-6,
                "Newton {} vs grid {grid_min}",
                sol.value
            );
        }
    }

    #[test]
    fn symmetric_boson_block_minimizes_at_the_origin() {
        // Identical labels and identical disorder: H ≥ 0 with H = 0 on the
        // diagonal, so F is minimized exactly at u = 0 with value 0.
        let p = InnerProblem {
            c1: 0.37,
            c2: 0.37,
            s_u: 1.1,
            sigma: 1.0,
            d_f: 1.0,
            a: 0.01,
        };
        let sol = minimize_inner(&p).unwrap();
        assert_abs_diff_eq!(sol.value, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.u1, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.u2, 0.0, epsilon = 1e-6);
        // Stationarity maps the minimizer back through the gradient.
        assert_abs_diff_eq!(sol.u1, -p.s_u * sol.derivs.h1, epsilon = 1e-9);
    }

    #[test]
    fn without_data_the_weight_is_pure_ridge() {
        // α → 0: M = 0, q = 0 and χ = 1/λ_w.
        let mut problem = fig_problem(1e-12);
        problem.n_disorder = 128;
        let (p, _) = solve_sde_zero_t(&problem, (0.1, 1.0, 0.5), 0.3, 1e-10, 400).unwrap();
        assert_abs_diff_eq!(p.M, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(p.q, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(p.chi, 1.0 / problem.lambda_w, epsilon = 1e-6);
    }

    #[test]
    fn benchmark_point_converges_to_a_sane_state() {
        let mut problem = fig_problem(2.5);
        problem.n_disorder = 4096;
        let (p, info) = solve_sde_zero_t(&problem, (0.1, 1.0, 0.5), 0.5, 1e-9, 2000).unwrap();
        assert!(p.M > 0.0, "M = {}", p.M);
        assert!(p.q > 0.0, "q = {}", p.q);
        assert!(p.chi > 0.0, "chi = {}", p.chi);
        assert!(p.hatQ <= 0.0, "hatQ = {}", p.hatQ);
        assert!(info.residual < 1e-9);
        // Self-consistency: q − M² is the disorder variance of the weight
        // overlap and must stay nonnegative.
        assert!(p.q >= p.M * p.M - 1e-12);
    }

    #[test]
    fn susceptibility_coupling_is_not_negligible() {
        // The exact susceptibility integrand differs measurably from the
        // bare curvature at a converged benchmark point; collapsing the two
        // would change the fixed point.
        let mut problem = fig_problem(2.5);
        problem.n_disorder = 4096;
        let (p, _) = solve_sde_zero_t(&problem, (0.1, 1.0, 0.5), 0.5, 1e-9, 2000).unwrap();
        let disorder = GaussianPairSet::golden_lattice(problem.n_disorder).unwrap();
        let e = zero_t_integrals(&disorder, &problem, p.M, p.q, p.chi).unwrap();
        let rel = (e.susceptibility - e.bare_curvature).abs() / e.susceptibility.abs();
        assert!(
            rel > 1e-3,
            "exact {} vs bare {} (rel {rel})",
            e.susceptibility,
            e.bare_curvature
        );
    }

    #[test]
    fn invalid_arguments_are_config_errors() {
        let problem = fig_problem(1.0);
        assert!(matches!(
            solve_sde_zero_t(&problem, (0.1, -1.0, 0.5), 0.5, 1e-8, 10),
            Err(FbmError::Config(_))
        ));
        assert!(matches!(
            solve_sde_zero_t(&problem, (0.1, 1.0, 0.0), 0.5, 1e-8, 10),
            Err(FbmError::Config(_))
        ));
    }
}
