//! Gaussian quadrature and low-discrepancy sets for Gaussian expectations.
//!
//! Nodes and weights are prepared for the *standard normal* measure, so that
//! for smooth `f`,
//!
//! ```text
//! E[f(u)] = ∫ f(u) e^{-u²/2}/√(2π) du  ≈  Σ_i w_i f(x_i),   Σ_i w_i = 1.
//! ```
//!
//! Nodes are the eigenvalues of the Jacobi matrix of the (probabilists')
//! Hermite recurrence and weights come from the first eigenvector components
//! (Golub-Welsch), which stays exact-by-construction at any practical order —
//! Newton iterations on extrapolated root seeds silently merge neighboring
//! roots beyond order ≈190. Multi-dimensional Gaussian integrals are taken
//! as tensor products of these rules by the callers.

use crate::error::{FbmError, Result};

/// A quadrature rule for the standard normal measure.
///
/// `nodes` are sorted ascending and exactly antisymmetric; `weights` are
/// positive and sum to 1.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an `n`-point rule. Exact for polynomials up to degree `2n-1`.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FbmError::Size("quadrature order must be at least 1".into()));
        }
        if n == 1 {
            return Ok(GaussHermite {
                nodes: vec![0.0],
                weights: vec![1.0],
            });
        }

        // Golub-Welsch on the probabilists' Hermite recurrence
        // u·He_j = √(j+1)·He_{j+1} + √j·He_{j−1}: the Jacobi matrix has zero
        // diagonal and off-diagonal entries √j. Its eigenvalues are the
        // nodes; squared first eigenvector components are the weights
        // (zeroth moment of the standard normal measure is 1).
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 1..n {
            let b = (j as f64).sqrt();
            jac[(j - 1, j)] = b;
            jac[(j, j - 1)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(jac);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut nodes = vec![0.0f64; n];
        let mut weights = vec![0.0f64; n];
        for (i, &k) in order.iter().enumerate() {
            nodes[i] = eig.eigenvalues[k];
            let v0 = eig.eigenvectors[(0, k)];
            weights[i] = v0 * v0;
        }
        // The spectrum is symmetric about zero; enforce that exactly so
        // callers can rely on antisymmetric nodes and mirrored weights.
        for i in 0..n / 2 {
            let z = 0.5 * (nodes[n - 1 - i] - nodes[i]);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 0.5 * (weights[i] + weights[n - 1 - i]);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        for (i, w) in weights.iter().enumerate() {
            if !(*w > 0.0) || !w.is_finite() {
                return Err(FbmError::Numeric(format!(
                    "quadrature weight {i} of order {n} degenerate ({w})"
                )));
            }
        }
        Ok(GaussHermite { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One-dimensional expectation E[f(u)], u ~ N(0,1).
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Inverse standard normal CDF.
///
/// A three-branch rational approximation supplies the initial guess, and two
/// Newton steps against the erfc-based CDF polish it to full double
/// precision (relative accuracy in the tails, absolute near the center).
pub fn normal_inverse_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must lie in (0,1)");
    let q = p - 0.5;
    let mut x = if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        q * poly(&NUM_A, r) / poly(&DEN_B, r)
    } else {
        let r = if q < 0.0 { p } else { 1.0 - p };
        let r = (-r.ln()).sqrt();
        let v = if r <= 5.0 {
            let r = r - 1.6;
            poly(&NUM_C, r) / poly(&DEN_D, r)
        } else {
            let r = r - 5.0;
            poly(&NUM_E, r) / poly(&DEN_F, r)
        };
        if q < 0.0 {
            -v
        } else {
            v
        }
    };
    // Newton polish: x ← x − (Φ(x) − p)/φ(x). Φ(x) = ½·erfc(−x/√2) is
    // absolutely accurate everywhere and relatively accurate in the left
    // tail, which bounds the quantile error by ~1 ulp of p.
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for _ in 0..2 {
        let cdf = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * x * x - half_ln_2pi).exp();
        if pdf > 0.0 {
            let step = (cdf - p) / pdf;
            x -= step.clamp(-1.0, 1.0);
        }
    }
    x
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

#[allow(clippy::excessive_precision)]
const NUM_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
#[allow(clippy::excessive_precision)]
const DEN_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
#[allow(clippy::excessive_precision)]
const NUM_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
#[allow(clippy::excessive_precision)]
const DEN_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
#[allow(clippy::excessive_precision)]
const NUM_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
#[allow(clippy::excessive_precision)]
const DEN_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

/// Deterministic low-discrepancy set of Gaussian pairs for two-dimensional
/// disorder averages: `E[f(v₁,v₂)] ≈ (1/n)·Σ f(p_i)`.
///
/// A golden-ratio lattice in the unit square is mapped through the inverse
/// normal CDF. Unlike a tensor polynomial rule, its accuracy degrades
/// gracefully when the integrand has narrow ridges or steps (which thermal
/// averages develop at low temperature), and the point set is fixed, so
/// integrals vary smoothly with solver parameters.
#[derive(Debug, Clone)]
pub struct GaussianPairSet {
    pub points: Vec<(f64, f64)>,
}

impl GaussianPairSet {
    pub fn golden_lattice(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FbmError::Size(
                "disorder average needs at least one point".into(),
            ));
        }
        // Conjugate golden ratio; frac(i·γ) equidistributes maximally well.
        let gamma = 0.5 * (5f64.sqrt() - 1.0);
        let nf = n as f64;
        let points = (0..n)
            .map(|i| {
                let t1 = (i as f64 + 0.5) / nf;
                let t2 = ((i as f64 + 0.5) * gamma).fract();
                (normal_inverse_cdf(t1), normal_inverse_cdf(t2))
            })
            .collect();
        Ok(GaussianPairSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
