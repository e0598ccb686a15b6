//! Quadratic-programming weight step.
//!
//! For a fixed support, the criterion `g(ω)` is a weighted sum of inner
//! infima — concave but expensive, since every evaluation re-solves the
//! inner problems. This module replaces each kernel by its second-order
//! model around the cached inner minimizer `θ̂`:
//!
//! `I(x_k, θ̂ + α) ≈ b_k + g_k·α + (1/2) α'H_k α`
//!
//! with `b_k` the kernel value, `g_k` its gradient in the rival parameters
//! and `H_k` the positive-semidefinite Fisher-type curvature. Minimizing the
//! model over `α` in closed form turns the criterion into the concave
//! quadratic surrogate
//!
//! `ḡ(ω) = Σ_e p_e [ b_e'ω − (1/2) ω'G_e M_e(ω̄)^{-1} G_e' ω ]`
//!
//! where `G_e` stacks the gradients, `M_e(ω̄) = Σ_k ω̄_k H_k` is the
//! design-weighted curvature at the anchor weights `ω̄`, and the surrogates
//! share their maximizers with `g` at fixed points (the anchor's first-order
//! condition is `G'ω̄ = 0`). Maximizing `ḡ` over the simplex is a small QP
//! solved exactly by an active-set method ([`solve_simplex_qp`]); the weight
//! step ([`qp_weight_step`]) re-anchors and repeats a few times, keeping the
//! best weights as measured by the true criterion.

use nalgebra::{Cholesky, DMatrix, DVector, LU};
use thiserror::Error;

use crate::criterion::{
    kl_criterion_warm, ComparisonTable, CriterionError, CriterionValue, InnerOpts, InnerStatus,
    StartPolicy,
};
use crate::design::{Design, DesignError};
use crate::models::{fisher_from_derivs, kl_grad_from_derivs};

#[derive(Debug, Error)]
pub enum QpError {
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("design-weighted curvature matrix is singular beyond repair for entry {entry}")]
    SingularGram { entry: usize },
    #[error("simplex QP did not meet the KKT tolerance within {0} iterations")]
    MaxIter(usize),
    #[error("invalid QP input: {0}")]
    BadInput(String),
}

/// Second-order data of one comparison at the current support and anchor:
/// kernel values, gradients and curvature blocks per support point.
#[derive(Debug, Clone)]
pub struct EntryLinearization {
    /// Comparison weight `p_e`.
    pub weight: f64,
    /// Rival parameter dimension.
    pub dim: usize,
    /// Kernel values at the support points (length `n`).
    pub b: Vec<f64>,
    /// Kernel gradients, row-major `n x d`.
    pub grads: Vec<f64>,
    /// Per-point curvature blocks, `n` stacked row-major `d x d` matrices.
    pub fishers: Vec<f64>,
    /// The anchoring inner solution sat on the rival box boundary; its
    /// first-order condition (and hence the surrogate's fixed-point
    /// property) is then only approximate.
    pub hit_bound: bool,
}

/// Linearization of the whole criterion at a support + inner solutions.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub n_points: usize,
    pub entries: Vec<EntryLinearization>,
}

/// The simplex QP `max b'ω − ω'Qω` with `Q` symmetric positive
/// semidefinite.
#[derive(Debug, Clone)]
pub struct QpData {
    q: DMatrix<f64>,
    b: DVector<f64>,
}

impl QpData {
    pub fn new(q: DMatrix<f64>, b: DVector<f64>) -> Result<Self, QpError> {
        if !q.is_square() || q.nrows() != b.len() {
            return Err(QpError::BadInput(format!(
                "Q is {}x{} but b has length {}",
                q.nrows(),
                q.ncols(),
                b.len()
            )));
        }
        let scale = q.amax().max(1.0);
        for r in 0..q.nrows() {
            for c in 0..r {
                if (q[(r, c)] - q[(c, r)]).abs() > 1e-12 * scale {
                    return Err(QpError::BadInput(format!(
                        "Q is asymmetric at ({r}, {c})"
                    )));
                }
            }
        }
        // Symmetrize exactly so the solver sees Q = Q'.
        let q = (&q + q.transpose()) * 0.5;
        Ok(Self { q, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Surrogate objective `b'ω − ω'Qω`.
    pub fn objective(&self, omega: &[f64]) -> f64 {
        let w = DVector::from_column_slice(omega);
        self.b.dot(&w) - (&self.q * &w).dot(&w)
    }

    /// Coordinate with the largest linear coefficient. The linear part is the
    /// vector of directional values `Ψ(x_k, ξ)`, so this is the steepest
    /// vertex of the simplex for the true criterion as well.
    pub fn steepest_vertex(&self) -> usize {
        let mut k = 0;
        for i in 1..self.b.len() {
            if self.b[i] > self.b[k] {
                k = i;
            }
        }
        k
    }
}

/// Build the per-comparison second-order data at the design's support,
/// anchored at the inner minimizers cached in `cv`.
pub fn linearize(
    design: &Design,
    table: &ComparisonTable,
    cv: &CriterionValue,
) -> Result<Linearization, QpError> {
    let points = design.points();
    let n = points.len();
    let mut entries = Vec::with_capacity(table.entries().len());
    for (e, sol) in table.entries().iter().zip(&cv.per_entry) {
        let true_model = &table.models()[e.true_index];
        let rival = &table.models()[e.rival_index];
        let d = rival.dim();
        let mut b = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n * d);
        let mut fishers = Vec::with_capacity(n * d * d);
        for &x in points {
            let tp = true_model
                .dist_params(x, &e.theta_true)
                .map_err(CriterionError::from)?;
            let rd = rival
                .dist_derivs(x, &sol.theta_hat)
                .map_err(CriterionError::from)?;
            let (value, grad) =
                kl_grad_from_derivs(true_model.family, tp, &rd).map_err(CriterionError::from)?;
            b.push(value);
            grads.extend_from_slice(&grad);
            fishers.extend_from_slice(&fisher_from_derivs(true_model.family, &rd));
        }
        entries.push(EntryLinearization {
            weight: e.weight,
            dim: d,
            b,
            grads,
            fishers,
            hit_bound: sol.status == InnerStatus::HitBound,
        });
    }
    Ok(Linearization { n_points: n, entries })
}

/// Assemble the simplex QP at anchor weights `omega_bar`:
/// `Q = Σ_e p_e (1/2) G_e M_e(ω̄)^{-1} G_e'`, `b = Σ_e p_e b_e`.
///
/// Each `M_e` is regularized by a relative ridge before factorization; a
/// comparison whose curvature vanishes entirely contributes only its linear
/// part.
pub fn assemble_qp(lin: &Linearization, omega_bar: &[f64]) -> Result<QpData, QpError> {
    let n = lin.n_points;
    if omega_bar.len() != n {
        return Err(QpError::BadInput(format!(
            "anchor weights have length {}, support has {n} points",
            omega_bar.len()
        )));
    }
    let mut q = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for (idx, e) in lin.entries.iter().enumerate() {
        let d = e.dim;
        for k in 0..n {
            b[k] += e.weight * e.b[k];
        }
        // Design-weighted curvature M(ω̄) = Σ_k ω̄_k H_k.
        let mut m = DMatrix::zeros(d, d);
        for k in 0..n {
            let w = omega_bar[k];
            if w == 0.0 {
                continue;
            }
            let block = &e.fishers[k * d * d..(k + 1) * d * d];
            for r in 0..d {
                for c in 0..d {
                    m[(r, c)] += w * block[r * d + c];
                }
            }
        }
        let trace: f64 = (0..d).map(|i| m[(i, i)]).sum();
        if trace <= 0.0 {
            // No curvature anywhere on the support: the surrogate for this
            // comparison is purely linear.
            continue;
        }
        let g = DMatrix::from_row_slice(n, d, &e.grads);
        // Ridge keeps near-flat rival directions from blowing up Q.
        let mut ridge = 1e-10 * trace / d as f64;
        let mut solved = None;
        for _ in 0..4 {
            let mut m_reg = m.clone();
            for i in 0..d {
                m_reg[(i, i)] += ridge;
            }
            if let Some(chol) = Cholesky::new(m_reg.clone()) {
                solved = Some(chol.solve(&g.transpose()));
                break;
            }
            ridge *= 100.0;
        }
        let x = match solved {
            Some(x) => x,
            None => {
                let mut m_reg = m.clone();
                for i in 0..d {
                    m_reg[(i, i)] += ridge;
                }
                LU::new(m_reg)
                    .solve(&g.transpose())
                    .ok_or(QpError::SingularGram { entry: idx })?
            }
        };
        // Q += p · (1/2) G M^{-1} G'.
        q += (&g * &x) * (0.5 * e.weight);
    }
    QpData::new(q, b)
}

/// Maximize `b'ω − ω'Qω` over the probability simplex.
///
/// Deterministic pairwise exchange with exact line search: each iteration
/// moves mass from the support coordinate with the smallest gradient to the
/// coordinate with the largest one, stepping to the 1-D optimum (or until
/// the donor empties). For concave objectives the duality gap
/// `max_i ∇φ_i − ω'∇φ` bounds the suboptimality, which gives a clean
/// stopping rule; each iteration costs O(n). This handles the rank-deficient
/// `Q` that arise when rivals have fewer parameters than the design has
/// support points — an equality-constrained active-set step would stall on
/// the flat directions.
pub fn solve_simplex_qp(qp: &QpData) -> Result<Vec<f64>, QpError> {
    let n = qp.dim();
    if n == 0 {
        return Err(QpError::BadInput("empty QP".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let scale = 1.0 + qp.b.amax() + qp.q.amax();
    let gap_tol = 1e-12 * scale;
    let max_iters = 200 * n * n + 10_000;

    let mut omega = DVector::from_element(n, 1.0 / n as f64);
    // ∇φ(ω) = b − 2Qω, maintained incrementally.
    let mut grad = &qp.b - 2.0 * (&qp.q * &omega);
    for _ in 0..max_iters {
        let mut s = 0;
        for i in 1..n {
            if grad[i] > grad[s] {
                s = i;
            }
        }
        let mut v = usize::MAX;
        for i in 0..n {
            if omega[i] > 0.0 && (v == usize::MAX || grad[i] < grad[v]) {
                v = i;
            }
        }
        // Suboptimality bound for the concave objective.
        let fw_gap = grad[s] - omega.dot(&grad);
        if fw_gap <= gap_tol || s == v {
            break;
        }
        let delta = grad[s] - grad[v];
        if delta <= 0.0 {
            break;
        }
        // φ(ω + γ(e_s − e_v)) = φ(ω) + γ·δ − γ²·d'Qd.
        let curv = qp.q[(s, s)] - 2.0 * qp.q[(s, v)] + qp.q[(v, v)];
        let gamma_max = omega[v];
        let gamma = if curv > 0.0 {
            (delta / (2.0 * curv)).min(gamma_max)
        } else {
            gamma_max
        };
        if gamma <= 0.0 {
            break;
        }
        omega[s] += gamma;
        omega[v] -= gamma;
        if gamma == gamma_max {
            omega[v] = 0.0;
        }
        for i in 0..n {
            grad[i] -= 2.0 * gamma * (qp.q[(i, s)] - qp.q[(i, v)]);
        }
    }
    let total: f64 = omega.iter().sum();
    Ok(omega.iter().map(|w| w / total).collect())
}

/// Backtracking commit along the segment from `cur_design`'s weights to
/// `target`: halve the step until the criterion genuinely improves. Screens
/// with a cheap warm pass, but commits only a value from the caller's
/// (multistart) policy: a warm-only evaluation can overstate the criterion
/// by riding a stale inner minimizer after a large weight move, and
/// accepting such a phantom value would poison every later comparison.
fn backtrack_toward(
    cur_design: &Design,
    cur_cv: &CriterionValue,
    target: &[f64],
    table: &ComparisonTable,
    warm_opts: &InnerOpts,
    opts: &InnerOpts,
) -> Result<Option<(Design, CriterionValue)>, QpError> {
    let mut step = 1.0;
    for _ in 0..12 {
        let omega: Vec<f64> = cur_design
            .weights()
            .iter()
            .zip(target)
            .map(|(w, q)| (1.0 - step) * w + step * q)
            .collect();
        let cand = cur_design.with_weights(&omega)?;
        let screen = kl_criterion_warm(&cand, table, Some(cur_cv), warm_opts)?;
        if screen.total > cur_cv.total {
            let cand_cv = if opts.policy == StartPolicy::WarmOnly {
                screen
            } else {
                kl_criterion_warm(&cand, table, Some(&screen), opts)?
            };
            if cand_cv.total > cur_cv.total {
                return Ok(Some((cand, cand_cv)));
            }
        }
        step *= 0.5;
    }
    Ok(None)
}

/// One safeguarded weight optimization on a fixed support: fixed-point
/// iteration of linearize → QP → re-anchor, `n_iters` times. Each QP
/// solution is taken as a direction and damped by backtracking until the
/// true criterion improves — a full jump can overshoot badly (e.g. zeroing
/// enough points that a rival suddenly interpolates the truth) — so the
/// returned weights are never worse than the input.
///
/// The steepest simplex vertex (largest directional value) is probed as a
/// second direction each cycle. The surrogate's refit model has no curvature
/// for points carrying no anchor weight, which can price a far-better fresh
/// point out of the solution entirely; the vertex direction ascends by the
/// envelope theorem regardless of what the curvature model believes.
pub fn qp_weight_step(
    design: &Design,
    table: &ComparisonTable,
    cv: &CriterionValue,
    n_iters: usize,
    opts: &InnerOpts,
) -> Result<(Design, CriterionValue), QpError> {
    if n_iters == 0 {
        return Err(QpError::BadInput("n_iters must be at least 1".into()));
    }
    // Re-anchoring solves start from the previous minimizers; the design
    // only changes in its weights, so warm starts are excellent.
    let warm_opts = InnerOpts {
        policy: StartPolicy::WarmOnly,
        ..*opts
    };
    let mut cur_design = design.clone();
    let mut cur_cv = cv.clone();
    for _ in 0..n_iters {
        let lin = linearize(&cur_design, table, &cur_cv)?;
        let qp = assemble_qp(&lin, cur_design.weights())?;
        let omega_qp = solve_simplex_qp(&qp)?;
        let moved = omega_qp
            .iter()
            .zip(cur_design.weights())
            .any(|(a, b)| (a - b).abs() > 1e-14);
        let mut accepted = if moved {
            backtrack_toward(&cur_design, &cur_cv, &omega_qp, table, &warm_opts, opts)?
        } else {
            None
        };

        let k = qp.steepest_vertex();
        if cur_design.weights()[k] < 1.0 {
            let mut vertex = vec![0.0; cur_design.support_size()];
            vertex[k] = 1.0;
            let from = match &accepted {
                Some((d, c)) => (d.clone(), c.clone()),
                None => (cur_design.clone(), cur_cv.clone()),
            };
            if let Some(better) =
                backtrack_toward(&from.0, &from.1, &vertex, table, &warm_opts, opts)?
            {
                accepted = Some(better);
            }
        }

        let Some((cand, cand_cv)) = accepted else {
            break; // no admissible improvement along either direction
        };
        cur_design = cand;
        cur_cv = cand_cv;
    }
    Ok((cur_design, cur_cv))
}
