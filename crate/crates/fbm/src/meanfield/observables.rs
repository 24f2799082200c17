//! Closed-form and quadrature observables of a mean-field solution.
//!
//! All predictions depend on the solution only through the alignment `M` and
//! the self-overlap `q`: a fresh example from cluster `y` produces the
//! pre-activation `z = m·y·M + Δ√q·u` with `u ~ N(0,1)`, independently for
//! the two members of a test pair.

use libm::erf;

use crate::error::{FbmError, Result};
use crate::meanfield::hamiltonian::effective_hamiltonian;
use crate::meanfield::{OrderParams, TheoryProblem, ZeroTOrderParams};
use crate::quad::GaussHermite;

/// Access to the macroscopic `(M, q)` of either solver's solution.
pub trait MacroOrder {
    /// Cluster alignment `M`.
    fn m_align(&self) -> f64;
    /// Self-overlap `q`.
    fn overlap(&self) -> f64;
}

impl MacroOrder for OrderParams {
    fn m_align(&self) -> f64 {
        self.M
    }
    fn overlap(&self) -> f64 {
        self.q
    }
}

impl MacroOrder for ZeroTOrderParams {
    fn m_align(&self) -> f64 {
        self.M
    }
    fn overlap(&self) -> f64 {
        self.q
    }
}

/// Standard normal CDF `Φ(x)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn field_scales(params: &impl MacroOrder, problem: &TheoryProblem) -> Result<(f64, f64)> {
    let q = params.overlap();
    if q < 0.0 {
        return Err(FbmError::Order(format!("self-overlap q = {q} is negative")));
    }
    Ok((
        problem.mixture.m * params.m_align(),
        problem.mixture.delta * q.sqrt(),
    ))
}

/// Expected pair loss on fresh pairs: `E_y ∬Du H(y, z)` with independent
/// Gaussian fields for the two members.
pub fn generalization_loss(params: &impl MacroOrder, problem: &TheoryProblem) -> Result<f64> {
    problem.validate()?;
    let (mm, sq) = field_scales(params, problem)?;
    let rule = GaussHermite::new(problem.n_quad_inner)?;
    let mut total = 0.0;
    for (y1, y2, wy) in problem.label_configs() {
        if wy == 0.0 {
            continue;
        }
        let (c1, c2) = (mm * y1 as f64, mm * y2 as f64);
        let mut acc = 0.0;
        for (&u1, &w1) in rule.nodes.iter().zip(&rule.weights) {
            let z1 = c1 + sq * u1;
            for (&u2, &w2) in rule.nodes.iter().zip(&rule.weights) {
                let z2 = c2 + sq * u2;
                acc += w1 * w2 * effective_hamiltonian(y1, y2, z1, z2, problem.d_f, problem.a);
            }
        }
        total += wy * acc;
    }
    Ok(total)
}

/// Typical squared representation distance of a fresh fermion pair:
/// `∬Du [tanh(mM + Δ√q·u₁) − tanh(−mM + Δ√q·u₂)]²`.
///
/// The two fields are independent, so the integral separates into
/// one-dimensional moments of `tanh`.
pub fn fermion_distance(params: &impl MacroOrder, problem: &TheoryProblem) -> Result<f64> {
    problem.validate()?;
    let (mm, sq) = field_scales(params, problem)?;
    let rule = GaussHermite::new(problem.n_quad_inner)?;
    let (mut p1, mut p2, mut m1, mut m2) = (0.0, 0.0, 0.0, 0.0);
    for (&u, &w) in rule.nodes.iter().zip(&rule.weights) {
        let tp = (mm + sq * u).tanh();
        let tm = (-mm + sq * u).tanh();
        p1 += w * tp;
        p2 += w * tp * tp;
        m1 += w * tm;
        m2 += w * tm * tm;
    }
    Ok(p2 + m2 - 2.0 * p1 * m1)
}

/// Classification error of the sign readout on fresh single examples:
/// `P(sign(z) ≠ y) = ½[1 − erf(mM / (Δ√(2q)))]`.
pub fn classification_error(params: &impl MacroOrder, problem: &TheoryProblem) -> Result<f64> {
    problem.validate()?;
    let (mm, sq) = field_scales(params, problem)?;
    if sq == 0.0 {
        // Deterministic field: an error iff the alignment points the wrong way.
        return Ok(if mm > 0.0 {
            0.0
        } else if mm < 0.0 {
            1.0
        } else {
            0.5
        });
    }
    Ok(normal_cdf(-mm / sq))
}

/// Accuracy under the optimal norm-`ε` input perturbation:
/// `½[1 + erf((mM − ε√q) / (Δ√(2q)))]`.
///
/// The attack moves the input along the weight direction, shifting the field
/// by `ε‖w‖/√N = ε√q` against the margin (`ε` on the scale where the input
/// perturbation has norm `ε/√N`). At `ε = 0` this is one minus the
/// classification error.
pub fn adversarial_accuracy(
    params: &impl MacroOrder,
    problem: &TheoryProblem,
    eps: f64,
) -> Result<f64> {
    problem.validate()?;
    if eps < 0.0 {
        return Err(FbmError::Config(format!(
            "attack strength must be >= 0, got {eps}"
        )));
    }
    let (mm, sq) = field_scales(params, problem)?;
    let q = params.overlap();
    let margin = mm - eps * q.sqrt();
    if sq == 0.0 {
        return Ok(if margin > 0.0 {
            1.0
        } else if margin < 0.0 {
            0.0
        } else {
            0.5
        });
    }
    Ok(normal_cdf(margin / sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MixtureParams;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn problem(rho: f64) -> TheoryProblem {
        TheoryProblem::new(
            MixtureParams {
                n: 200,
                m: 1.0,
                delta: 0.5,
                rho,
                alpha: 1.0,
            },
            1.0,
            0.05,
        )
    }

    struct Macro {
        m: f64,
        q: f64,
    }
    impl MacroOrder for Macro {
        fn m_align(&self) -> f64 {
            self.m
        }
        fn overlap(&self) -> f64 {
            self.q
        }
    }

    #[test]
    fn generalization_loss_matches_monte_carlo() {
        let problem = problem(0.4);
        let p = Macro { m: 0.45, q: 0.8 };
        let want = generalization_loss(&p, &problem).unwrap();

        let mut rng = seeded(77);
        let n = 2_000_000usize;
        let mm = problem.mixture.m * p.m;
        let sq = problem.mixture.delta * p.q.sqrt();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let boson = rng.random::<f64>() < problem.mixture.rho;
            let (y1, y2) = if boson { (1, 1) } else { (1, -1) };
            let u1: f64 = StandardNormal.sample(&mut rng);
            let u2: f64 = StandardNormal.sample(&mut rng);
            let h = effective_hamiltonian(
                y1,
                y2,
                mm * y1 as f64 + sq * u1,
                mm * y2 as f64 + sq * u2,
                problem.d_f,
                problem.a,
            );
            sum += h;
            sum2 += h * h;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (want - mean).abs() < 4.0 * se,
            "quadrature {want} vs MC {mean} (4σ = {})",
            4.0 * se
        );
        use rand::Rng as _;
        let _ = &mut rng;
    }

    #[test]
    fn fermion_distance_at_zero_alignment_is_twice_the_tanh_power() {
        // M = 0 makes both branches identically distributed and independent:
        // D²_F = 2·E[tanh²(Δ√q·u)] − 2·E[tanh]² with E[tanh] = 0 by symmetry.
        let problem = problem(0.5);
        let p = Macro { m: 0.0, q: 1.3 };
        let got = fermion_distance(&p, &problem).unwrap();

        let rule = GaussHermite::new(problem.n_quad_inner).unwrap();
        let sq = problem.mixture.delta * p.q.sqrt();
        let t2: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&u, &w)| {
                let t = (sq * u).tanh();
                w * t * t
            })
            .sum();
        assert_abs_diff_eq!(got, 2.0 * t2, epsilon = 1e-12);
    }

    #[test]
    fn fermion_distance_saturates_with_strong_alignment() {
        // Perfectly separated clusters with small noise: tanh saturates at
        // ±1 so the squared distance approaches 4.
        let problem = problem(0.5);
        let p = Macro { m: 20.0, q: 0.01 };
        let d2 = fermion_distance(&p, &problem).unwrap();
        assert!((d2 - 4.0).abs() < 1e-3, "D²_F = {d2}");
    }

    #[test]
    fn classification_error_matches_monte_carlo() {
        let problem = problem(0.5);
        let p = Macro { m: 0.35, q: 0.9 };
        let want = classification_error(&p, &problem).unwrap();

        let mut rng = seeded(78);
        let n = 2_000_000usize;
        let mm = problem.mixture.m * p.m;
        let sq = problem.mixture.delta * p.q.sqrt();
        let mut errors = 0usize;
        for _ in 0..n {
            let u: f64 = StandardNormal.sample(&mut rng);
            if mm + sq * u < 0.0 {
                errors += 1;
            }
        }
        let frac = errors as f64 / n as f64;
        let se = (frac * (1.0 - frac) / n as f64).sqrt();
        assert!(
            (want - frac).abs() < 4.0 * se.max(1e-6),
            "closed form {want} vs MC {frac}"
        );
    }

    #[test]
    fn classification_error_limits() {
        let problem = problem(0.5);
        assert!(classification_error(&Macro { m: 50.0, q: 0.5 }, &problem).unwrap() < 1e-12);
        assert_abs_diff_eq!(
            classification_error(&Macro { m: 0.0, q: 0.5 }, &problem).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        // Zero variance: a step function of the alignment.
        assert_abs_diff_eq!(
            classification_error(&Macro { m: 0.3, q: 0.0 }, &problem).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn unattacked_accuracy_complements_the_error() {
        let problem = problem(0.5);
        let p = Macro { m: 0.4, q: 1.1 };
        let acc = adversarial_accuracy(&p, &problem, 0.0).unwrap();
        let err = classification_error(&p, &problem).unwrap();
        assert_abs_diff_eq!(acc, 1.0 - err, epsilon = 1e-15);
    }

    #[test]
    fn attack_strength_monotonically_degrades_accuracy() {
        let problem = problem(0.5);
        let p = Macro { m: 0.4, q: 1.1 };
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let eps = 2.0 * k as f64 / 49.0;
            let acc = adversarial_accuracy(&p, &problem, eps).unwrap();
            assert!(acc < prev + 1e-15, "accuracy rose at eps = {eps}");
            prev = acc;
        }
        assert!(matches!(
            adversarial_accuracy(&p, &problem, -0.1),
            Err(FbmError::Config(_))
        ));
    }
}
