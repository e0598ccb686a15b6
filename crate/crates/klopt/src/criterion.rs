//! The KL-optimality criterion and its directional derivative.
//!
//! A discrimination problem is a [`ComparisonTable`]: a set of models plus
//! weighted comparisons, each pinning the data-generating ("true") model at a
//! fixed parameter vector and leaving the rival's parameters free inside its
//! box. Bayesian problems — priors on the true parameters — are flattened
//! into the same shape by [`flatten_bayesian`]: every prior atom becomes one
//! comparison whose weight is the model-pair weight times the atom mass.
//!
//! For a design `ξ` with support `x_1..x_n` and weights `ω`, each comparison
//! contributes the inner infimum
//!
//! `inf_θ Σ_k ω_k · kl(x_k, θ̄, θ)`
//!
//! over the rival box ([`inner_infimum`], a multistart projected
//! quasi-Newton solve), and the criterion is the comparison-weighted sum of
//! those infima ([`kl_criterion`]). The directional derivative
//! `Ψ(x, ξ) = Σ p_e · kl(x, θ̄_e, θ̂_e)` ([`psi`]) plugs the cached inner
//! minimizers into the kernels at an arbitrary point; by the equivalence
//! theorem a design is optimal exactly when `Ψ ≤ KL_P(ξ)` everywhere, which
//! also yields the efficiency lower bound `KL_P(ξ) / max_x Ψ(x, ξ)`
//! ([`efficiency_bound`]).

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::design::{Design, DesignSpace};
use crate::models::{kl_from_params, kl_grad_from_derivs, Family, ModelError, ModelSpec};

#[derive(Debug, Error)]
pub enum CriterionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid comparison table: {0}")]
    BadTable(String),
    #[error("inner problem for entry {entry} failed at every start point: {last}")]
    Infeasible { entry: usize, last: ModelError },
    #[error("criterion is not positive ({0}); the rivals fit the true model on this support")]
    NonPositiveCriterion(f64),
}

/// One weighted model comparison with the true side fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub true_index: usize,
    pub rival_index: usize,
    pub weight: f64,
    pub theta_true: Vec<f64>,
}

/// A discrete prior: parameter atoms with positive masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePrior {
    atoms: Vec<(Vec<f64>, f64)>,
}

impl DiscretePrior {
    pub fn new(atoms: Vec<(Vec<f64>, f64)>) -> Result<Self, CriterionError> {
        if atoms.is_empty() {
            return Err(CriterionError::BadTable("prior has no atoms".into()));
        }
        let mut sum = 0.0;
        for (lambda, tau) in &atoms {
            if !tau.is_finite() || *tau <= 0.0 {
                return Err(CriterionError::BadTable(format!(
                    "prior mass must be positive, got {tau}"
                )));
            }
            if lambda.iter().any(|v| !v.is_finite()) {
                return Err(CriterionError::BadTable("prior atom is not finite".into()));
            }
            sum += tau;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CriterionError::BadTable(format!(
                "prior masses sum to {sum}, expected 1"
            )));
        }
        // Remove the residual rounding drift so downstream sums are exact.
        let atoms = atoms
            .into_iter()
            .map(|(l, t)| (l, t / sum))
            .collect();
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[(Vec<f64>, f64)] {
        &self.atoms
    }
}

/// True-side parameter specification for one model: a fixed vector (local
/// criterion) or a discrete prior (Bayesian criterion).
#[derive(Debug, Clone, PartialEq)]
pub enum TrueParams {
    Fixed(Vec<f64>),
    Prior(DiscretePrior),
}

/// A complete discrimination problem: models plus weighted comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    models: Vec<ModelSpec>,
    entries: Vec<Comparison>,
}

impl ComparisonTable {
    pub fn new(models: Vec<ModelSpec>, entries: Vec<Comparison>) -> Result<Self, CriterionError> {
        if models.is_empty() || entries.is_empty() {
            return Err(CriterionError::BadTable(
                "need at least one model and one comparison".into(),
            ));
        }
        let mut total_weight = 0.0;
        for (idx, e) in entries.iter().enumerate() {
            let bad = |msg: String| CriterionError::BadTable(format!("entry {idx}: {msg}"));
            if e.true_index >= models.len() || e.rival_index >= models.len() {
                return Err(bad("model index out of range".into()));
            }
            if e.true_index == e.rival_index {
                return Err(bad("a model cannot rival itself".into()));
            }
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(bad(format!("weight {} is not a finite nonnegative", e.weight)));
            }
            let ti = &models[e.true_index];
            let tj = &models[e.rival_index];
            if ti.family != tj.family {
                return Err(bad(format!(
                    "models '{}' and '{}' are in different response families",
                    ti.name, tj.name
                )));
            }
            if e.theta_true.len() != ti.dim() {
                return Err(bad(format!(
                    "theta_true has {} entries, model '{}' needs {}",
                    e.theta_true.len(),
                    ti.name,
                    ti.dim()
                )));
            }
            if let Some(bx) = &ti.theta_box {
                if e.theta_true.iter().zip(bx).any(|(t, (lo, hi))| t < lo || t > hi) {
                    return Err(bad(format!(
                        "theta_true lies outside model '{}' theta_box",
                        ti.name
                    )));
                }
            }
            if tj.theta_box.is_none() {
                return Err(bad(format!(
                    "rival model '{}' has no theta_box to optimize over",
                    tj.name
                )));
            }
            total_weight += e.weight;
        }
        if total_weight <= 0.0 {
            return Err(CriterionError::BadTable(
                "comparison weights sum to zero".into(),
            ));
        }
        Ok(Self { models, entries })
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn entries(&self) -> &[Comparison] {
        &self.entries
    }

    pub fn rival(&self, entry: usize) -> &ModelSpec {
        &self.models[self.entries[entry].rival_index]
    }

    /// Largest parameter dimension across all models.
    pub fn max_dim(&self) -> usize {
        self.models.iter().map(ModelSpec::dim).max().unwrap_or(0)
    }
}

/// Flatten model-pair weights and per-model priors into a comparison table:
/// every positive pair weight `p[i][j]` contributes one comparison per prior
/// atom of the true model `i`, with weight `p[i][j] * tau`.
pub fn flatten_bayesian(
    models: Vec<ModelSpec>,
    priors: &[TrueParams],
    p_matrix: &[Vec<f64>],
) -> Result<ComparisonTable, CriterionError> {
    let nu = models.len();
    if priors.len() != nu {
        return Err(CriterionError::BadTable(format!(
            "{nu} models but {} true-parameter specifications",
            priors.len()
        )));
    }
    if p_matrix.len() != nu || p_matrix.iter().any(|row| row.len() != nu) {
        return Err(CriterionError::BadTable(format!(
            "pair weight matrix must be {nu}x{nu}"
        )));
    }
    for (i, row) in p_matrix.iter().enumerate() {
        if row[i] != 0.0 {
            return Err(CriterionError::BadTable(format!(
                "pair weight matrix must have a zero diagonal, got p[{i}][{i}] = {}",
                row[i]
            )));
        }
        if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CriterionError::BadTable(format!(
                "row {i} of the pair weight matrix has a negative or non-finite entry"
            )));
        }
    }
    let mut entries = Vec::new();
    for i in 0..nu {
        for j in 0..nu {
            if p_matrix[i][j] <= 0.0 {
                continue;
            }
            match &priors[i] {
                TrueParams::Fixed(theta) => entries.push(Comparison {
                    true_index: i,
                    rival_index: j,
                    weight: p_matrix[i][j],
                    theta_true: theta.clone(),
                }),
                TrueParams::Prior(prior) => {
                    for (lambda, tau) in prior.atoms() {
                        entries.push(Comparison {
                            true_index: i,
                            rival_index: j,
                            weight: p_matrix[i][j] * tau,
                            theta_true: lambda.clone(),
                        });
                    }
                }
            }
        }
    }
    ComparisonTable::new(models, entries)
}

/// How an inner solve terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStatus {
    Converged,
    /// Converged, but the minimizer sits on the rival box boundary — the
    /// interior-minimizer assumption behind the equivalence theorem and the
    /// closed-form linearization is then suspect.
    HitBound,
    MaxIter,
}

/// Best rival fit found for one comparison under a given design.
#[derive(Debug, Clone, Serialize)]
pub struct InnerSolution {
    pub theta_hat: Vec<f64>,
    pub value: f64,
    pub status: InnerStatus,
}

/// The criterion value together with the per-comparison inner solutions that
/// produced it (cached for Ψ evaluation and warm-starting).
#[derive(Debug, Clone, Serialize)]
pub struct CriterionValue {
    pub total: f64,
    pub per_entry: Vec<InnerSolution>,
}

impl CriterionValue {
    /// Warm-start vectors for a follow-up evaluation on a nearby design.
    pub fn warm_starts(&self) -> Vec<&[f64]> {
        self.per_entry.iter().map(|s| s.theta_hat.as_slice()).collect()
    }
}

/// Which start points the inner solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPolicy {
    /// Warm start (when available) + box center + 3 Latin-hypercube draws.
    Full,
    /// Warm start only (box center when no warm start is available). Used
    /// inside weight-iteration loops where the design changes slightly and
    /// the previous minimizer is an excellent start.
    WarmOnly,
}

/// Inner-solver configuration.
#[derive(Debug, Clone, Copy)]
pub struct InnerOpts {
    /// Base seed for the Latin-hypercube starts; each table entry derives
    /// its own stream deterministically from this and its index.
    pub seed: u64,
    pub policy: StartPolicy,
    pub max_iters: usize,
    /// Relative projected-gradient tolerance.
    pub tol: f64,
}

impl Default for InnerOpts {
    fn default() -> Self {
        Self {
            seed: 0,
            policy: StartPolicy::Full,
            max_iters: 200,
            tol: 1e-8,
        }
    }
}

impl InnerOpts {
    /// Per-entry variant with a decorrelated seed stream.
    fn for_entry(&self, entry: usize) -> Self {
        Self {
            seed: self
                .seed
                .wrapping_add((entry as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..*self
        }
    }
}

/// The smooth box-constrained inner objective for one comparison:
/// `θ ↦ Σ_k ω_k · kl(x_k, θ̄, θ)` over positive-weight support points, with
/// the true-side distribution parameters precomputed.
struct InnerProblem<'a> {
    family: Family,
    rival: &'a ModelSpec,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// (x, ω, true-side (loc, scale2)) per positive-weight support point.
    pts: Vec<(f64, f64, (f64, f64))>,
}

impl InnerProblem<'_> {
    fn build<'a>(
        table: &'a ComparisonTable,
        entry: usize,
        design: &Design,
    ) -> Result<InnerProblem<'a>, ModelError> {
        let cmp = &table.entries[entry];
        let true_model = &table.models[cmp.true_index];
        let rival = &table.models[cmp.rival_index];
        let bx = rival
            .theta_box
            .as_ref()
            .expect("validated at table construction");
        let mut pts = Vec::with_capacity(design.support_size());
        for (&x, &w) in design.points().iter().zip(design.weights()) {
            if w == 0.0 {
                continue;
            }
            pts.push((x, w, true_model.dist_params(x, &cmp.theta_true)?));
        }
        Ok(InnerProblem {
            family: true_model.family,
            rival,
            lo: bx.iter().map(|b| b.0).collect(),
            hi: bx.iter().map(|b| b.1).collect(),
            pts,
        })
    }

    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for &(x, w, tp) in &self.pts {
            let rp = self.rival.dist_params(x, theta)?;
            total += w * kl_from_params(self.family, tp, rp)?;
        }
        Ok(total)
    }

    fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        let mut total = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for &(x, w, tp) in &self.pts {
            let rd = self.rival.dist_derivs(x, theta)?;
            let (v, g) = kl_grad_from_derivs(self.family, tp, &rd)?;
            total += w * v;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += w * gi;
            }
        }
        Ok((total, grad))
    }

    fn clamp(&self, theta: &mut [f64]) {
        for ((t, lo), hi) in theta.iter_mut().zip(&self.lo).zip(&self.hi) {
            *t = t.clamp(*lo, *hi);
        }
    }

    /// Gradient with the components pointing out of the box zeroed.
    fn project_grad(&self, theta: &[f64], grad: &[f64]) -> Vec<f64> {
        let mut pg = grad.to_vec();
        for i in 0..theta.len() {
            let width = self.hi[i] - self.lo[i];
            let at_lo = theta[i] - self.lo[i] <= 1e-12 * width;
            let at_hi = self.hi[i] - theta[i] <= 1e-12 * width;
            if (at_lo && grad[i] > 0.0) || (at_hi && grad[i] < 0.0) {
                pg[i] = 0.0;
            }
        }
        pg
    }

    fn on_boundary(&self, theta: &[f64]) -> bool {
        theta.iter().enumerate().any(|(i, &t)| {
            let width = self.hi[i] - self.lo[i];
            t - self.lo[i] <= 1e-8 * width || self.hi[i] - t <= 1e-8 * width
        })
    }
}

/// Result of a single descent run; `None` when the start itself was
/// infeasible (kernel error at the start point).
struct LocalMin {
    theta: Vec<f64>,
    value: f64,
    converged: bool,
}

/// Projected BFGS descent from one start point. Non-finite or erroring
/// objective values are treated as +infinity by the backtracking line
/// search, which keeps the iterates inside the kernel's domain.
fn descend(problem: &InnerProblem<'_>, start: &[f64], opts: &InnerOpts) -> Option<LocalMin> {
    let d = problem.dim();
    let mut theta = start.to_vec();
    problem.clamp(&mut theta);
    let (mut f, mut grad) = match problem.value_grad(&theta) {
        Ok(v) => v,
        Err(_) => return None,
    };
    // Inverse Hessian approximation, row-major d x d, reset to identity
    // whenever curvature information is unusable.
    let mut h_inv = identity(d);
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let pg = problem.project_grad(&theta, &grad);
        let pg_norm = pg.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if pg_norm <= opts.tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        // Search direction: quasi-Newton on the projected gradient, falling
        // back to steepest descent when the model loses descent.
        let mut dir = matvec_neg(&h_inv, &pg);
        for i in 0..d {
            if pg[i] == 0.0 {
                dir[i] = 0.0;
            }
        }
        let mut slope = dot(&dir, &pg);
        if slope >= 0.0 {
            dir = pg.iter().map(|g| -g).collect();
            slope = dot(&dir, &pg);
            h_inv = identity(d);
            if slope >= 0.0 {
                break; // numerically stuck
            }
        }
        // Backtracking Armijo search along the projected path.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut cand = theta.clone();
            for i in 0..d {
                cand[i] += alpha * dir[i];
            }
            problem.clamp(&mut cand);
            if let Ok(fc) = problem.value(&cand) {
                // Measure the actual (projected) displacement.
                let step: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
                let decrease = dot(&grad, &step);
                if fc <= f + 1e-4 * decrease.min(0.0) && fc < f {
                    accepted = Some((cand, fc));
                    break;
                }
                if step.iter().all(|s| *s == 0.0) {
                    break; // fully blocked by the box
                }
            }
            alpha *= 0.5;
        }
        let Some((theta_new, f_new)) = accepted else {
            // No admissible decrease: declare convergence at line-search
            // resolution (the projected gradient test above is the real
            // certificate; this exit is the flat-valley case).
            converged = pg_norm <= (opts.tol * 1e4) * (1.0 + f.abs());
            break;
        };
        let (_, grad_new) = match problem.value_grad(&theta_new) {
            Ok(v) => v,
            Err(_) => break,
        };
        // BFGS inverse update.
        let s: Vec<f64> = theta_new.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            let rho = 1.0 / sy;
            let hy = matvec(&h_inv, &y);
            let yhy = dot(&y, &hy);
            for r in 0..d {
                for c in 0..d {
                    h_inv[r * d + c] += -rho * (s[r] * hy[c] + hy[r] * s[c])
                        + (rho * rho * yhy + rho) * s[r] * s[c];
                }
            }
        } else {
            h_inv = identity(d);
        }
        theta = theta_new;
        f = f_new;
        grad = grad_new;
    }
    Some(LocalMin {
        theta,
        value: f,
        converged,
    })
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|r| dot(&m[r * d..(r + 1) * d], v)).collect()
}

fn matvec_neg(m: &[f64], v: &[f64]) -> Vec<f64> {
    matvec(m, v).into_iter().map(|x| -x).collect()
}

/// Latin-hypercube sample of `n` points in the box: each coordinate is
/// stratified into `n` bands and the band order is shuffled independently
/// per dimension.
fn latin_hypercube(rng: &mut ChaCha8Rng, n: usize, lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let d = lo.len();
    let mut bands: Vec<Vec<usize>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        bands.push(order);
    }
    (0..n)
        .map(|s| {
            (0..d)
                .map(|k| {
                    let u: f64 = rng.random();
                    let t = (bands[k][s] as f64 + u) / n as f64;
                    lo[k] + t * (hi[k] - lo[k])
                })
                .collect()
        })
        .collect()
}

/// Minimize the design-averaged kernel over the rival's parameter box for
/// one comparison. Returns the best local minimum across the configured
/// start points.
pub fn inner_infimum(
    table: &ComparisonTable,
    entry: usize,
    design: &Design,
    warm: Option<&[f64]>,
    opts: &InnerOpts,
) -> Result<InnerSolution, CriterionError> {
    let problem = InnerProblem::build(table, entry, design)?;
    let d = problem.dim();
    let center: Vec<f64> = problem
        .lo
        .iter()
        .zip(&problem.hi)
        .map(|(lo, hi)| 0.5 * (lo + hi))
        .collect();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = warm {
        debug_assert_eq!(w.len(), d);
        starts.push(w.to_vec());
    }
    match opts.policy {
        StartPolicy::WarmOnly => {
            if starts.is_empty() {
                starts.push(center);
            }
        }
        StartPolicy::Full => {
            starts.push(center.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            // Screen-then-polish: cheap objective evaluations over a wide
            // Latin-hypercube scan (plus a focused scan around the center)
            // locate candidate basins, and only the best few survivors get a
            // full descent. Wide rival boxes often contain large infeasible
            // regions — e.g. a sign change that puts a pole inside the design
            // space — where raw random starts would be wasted.
            let n_wide = (12 * d).max(24);
            let n_near = (6 * d).max(12);
            let mut scan = latin_hypercube(&mut rng, n_wide, &problem.lo, &problem.hi);
            let lo_near: Vec<f64> = center
                .iter()
                .zip(problem.lo.iter().zip(&problem.hi))
                .map(|(c, (lo, hi))| c - (hi - lo) / 16.0)
                .collect();
            let hi_near: Vec<f64> = center
                .iter()
                .zip(problem.lo.iter().zip(&problem.hi))
                .map(|(c, (lo, hi))| c + (hi - lo) / 16.0)
                .collect();
            scan.extend(latin_hypercube(&mut rng, n_near, &lo_near, &hi_near));
            let mut scored: Vec<(f64, Vec<f64>)> = scan
                .into_iter()
                .filter_map(|s| {
                    problem
                        .value(&s)
                        .ok()
                        .filter(|v| v.is_finite())
                        .map(|v| (v, s))
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            starts.extend(scored.into_iter().take(4).map(|(_, s)| s));
        }
    }
    let mut best: Option<LocalMin> = None;
    let mut last_err: Option<ModelError> = None;
    for start in &starts {
        match descend(&problem, start, opts) {
            Some(m) => {
                let better = best
                    .as_ref()
                    .map(|b| m.value < b.value || (m.value == b.value && m.converged && !b.converged))
                    .unwrap_or(true);
                if better {
                    best = Some(m);
                }
            }
            None => {
                last_err = Some(match problem.value(start) {
                    Err(e) => e,
                    Ok(_) => ModelError::NotFinite {
                        what: "inner gradient",
                        x: f64::NAN,
                    },
                });
            }
        }
    }
    let Some(best) = best else {
        return Err(CriterionError::Infeasible {
            entry,
            last: last_err.unwrap_or(ModelError::NotFinite {
                what: "inner objective",
                x: f64::NAN,
            }),
        });
    };
    let status = if !best.converged {
        InnerStatus::MaxIter
    } else if problem.on_boundary(&best.theta) {
        InnerStatus::HitBound
    } else {
        InnerStatus::Converged
    };
    Ok(InnerSolution {
        theta_hat: best.theta,
        // Kernel sums are nonnegative up to roundoff; clip the dust.
        value: best.value.max(0.0),
        status,
    })
}

/// Evaluate the criterion: the comparison-weighted sum of inner infima.
/// Entries solve independently (in parallel) and accumulate in table order,
/// so the total is deterministic for a fixed seed regardless of threading.
pub fn kl_criterion_warm(
    design: &Design,
    table: &ComparisonTable,
    warm: Option<&CriterionValue>,
    opts: &InnerOpts,
) -> Result<CriterionValue, CriterionError> {
    if let Some(w) = warm {
        debug_assert_eq!(w.per_entry.len(), table.entries.len());
    }
    let per_entry: Vec<InnerSolution> = (0..table.entries.len())
        .into_par_iter()
        .map(|e| {
            let warm_theta = warm.map(|w| w.per_entry[e].theta_hat.as_slice());
            inner_infimum(table, e, design, warm_theta, &opts.for_entry(e))
        })
        .collect::<Result<_, _>>()?;
    let total = table
        .entries
        .iter()
        .zip(&per_entry)
        .map(|(e, s)| e.weight * s.value)
        .sum();
    Ok(CriterionValue { total, per_entry })
}

/// [`kl_criterion_warm`] with default options and no warm start.
pub fn kl_criterion(
    design: &Design,
    table: &ComparisonTable,
) -> Result<CriterionValue, CriterionError> {
    kl_criterion_warm(design, table, None, &InnerOpts::default())
}

/// Directional-derivative function `Ψ(x, ξ)`: the comparison-weighted sum of
/// kernels at `x` with the rival parameters frozen at the cached inner
/// minimizers. No re-optimization happens here.
pub fn psi(x: f64, table: &ComparisonTable, cv: &CriterionValue) -> Result<f64, CriterionError> {
    let mut total = 0.0;
    for (e, sol) in table.entries.iter().zip(&cv.per_entry) {
        if e.weight == 0.0 {
            continue;
        }
        let true_model = &table.models[e.true_index];
        let rival = &table.models[e.rival_index];
        let tp = true_model.dist_params(x, &e.theta_true)?;
        let rp = rival.dist_params(x, &sol.theta_hat)?;
        total += e.weight * kl_from_params(true_model.family, tp, rp)?;
    }
    Ok(total)
}

/// `Ψ` on many points, in parallel, preserving input order.
pub fn psi_many(
    xs: &[f64],
    table: &ComparisonTable,
    cv: &CriterionValue,
) -> Result<Vec<f64>, CriterionError> {
    xs.par_iter().map(|&x| psi(x, table, cv)).collect()
}

/// Efficiency lower bound `KL_P(ξ) / max_x Ψ(x, ξ)` with the max taken over
/// a uniform grid plus the design's own support. Because the support is
/// included and `Ψ` averages to the criterion over it, the bound never
/// exceeds one.
pub fn efficiency_bound(
    design: &Design,
    space: &DesignSpace,
    table: &ComparisonTable,
    cv: &CriterionValue,
    grid_size: usize,
) -> Result<f64, CriterionError> {
    if cv.total <= 0.0 {
        return Err(CriterionError::NonPositiveCriterion(cv.total));
    }
    let mut xs = space.grid(grid_size);
    xs.extend_from_slice(design.points());
    let values = psi_many(&xs, table, cv)?;
    let max_psi = values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    Ok(cv.total / max_psi.max(cv.total))
}

/// Criterion ratio of a design against a reference (best-known) design on
/// the same table.
pub fn cross_efficiency(
    design: &Design,
    reference: &Design,
    table: &ComparisonTable,
    opts: &InnerOpts,
) -> Result<f64, CriterionError> {
    let denom = kl_criterion_warm(reference, table, None, opts)?.total;
    if denom <= 0.0 {
        return Err(CriterionError::NonPositiveCriterion(denom));
    }
    let numer = kl_criterion_warm(design, table, None, opts)?.total;
    Ok(numer / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::models::{MeanFunction, VarianceModel};

    fn normal(name: &str, mean: MeanFunction, bx: Option<Vec<(f64, f64)>>) -> ModelSpec {
        ModelSpec::new(name, Family::NormalHetero, mean, VarianceModel::ConstV(1.0), bx).unwrap()
    }

    fn mm_table() -> ComparisonTable {
        // Extended Michaelis-Menten truth vs plain Michaelis-Menten rival.
        let true_model = normal("mm-plus-linear", MeanFunction::MmPlusLinear, None);
        let rival = normal(
            "mm",
            MeanFunction::Mm,
            Some(vec![(0.01, 100.0), (0.01, 100.0)]),
        );
        ComparisonTable::new(
            vec![true_model, rival],
            vec![Comparison {
                true_index: 0,
                rival_index: 1,
                weight: 1.0,
                theta_true: vec![1.0, 1.0, 1.0],
            }],
        )
        .unwrap()
    }

    #[test]
    fn flatten_degenerate_prior_matches_local_table() {
        let models = vec![
            normal("a", MeanFunction::MmPlusLinear, None),
            normal("b", MeanFunction::Mm, Some(vec![(0.1, 10.0), (0.1, 10.0)])),
        ];
        let p = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let local = flatten_bayesian(
            models.clone(),
            &[
                TrueParams::Fixed(vec![1.0, 1.0, 1.0]),
                TrueParams::Fixed(vec![1.0, 1.0]),
            ],
            &p,
        )
        .unwrap();
        let prior = DiscretePrior::new(vec![(vec![1.0, 1.0, 1.0], 1.0)]).unwrap();
        let bayes = flatten_bayesian(
            models,
            &[TrueParams::Prior(prior), TrueParams::Fixed(vec![1.0, 1.0])],
            &p,
        )
        .unwrap();
        assert_eq!(local.entries(), bayes.entries());
    }

    #[test]
    fn flatten_expands_prior_atoms_with_scaled_weights() {
        let models = vec![
            normal("a", MeanFunction::Linear2, None),
            normal("b", MeanFunction::Mm, Some(vec![(0.1, 10.0), (0.1, 10.0)])),
        ];
        let prior = DiscretePrior::new(vec![
            (vec![1.0, 0.5], 0.2),
            (vec![1.1, 0.5], 0.3),
            (vec![0.9, 0.5], 0.5),
        ])
        .unwrap();
        let table = flatten_bayesian(
            models,
            &[TrueParams::Prior(prior), TrueParams::Fixed(vec![1.0, 1.0])],
            &[vec![0.0, 0.5], vec![0.0, 0.0]],
        )
        .unwrap();
        assert_eq!(table.entries().len(), 3);
        let weights: Vec<f64> = table.entries().iter().map(|e| e.weight).collect();
        assert_eq!(weights, vec![0.1, 0.15, 0.25]);
    }

    #[test]
    fn table_rejects_bad_configurations() {
        let a = normal("a", MeanFunction::Linear2, None);
        let b = normal("b", MeanFunction::Mm, Some(vec![(0.1, 10.0), (0.1, 10.0)]));
        // Self-comparison.
        assert!(ComparisonTable::new(
            vec![a.clone(), b.clone()],
            vec![Comparison {
                true_index: 0,
                rival_index: 0,
                weight: 1.0,
                theta_true: vec![1.0, 1.0],
            }],
        )
        .is_err());
        // Rival without a parameter box.
        assert!(ComparisonTable::new(
            vec![a.clone(), normal("c", MeanFunction::Mm, None)],
            vec![Comparison {
                true_index: 0,
                rival_index: 1,
                weight: 1.0,
                theta_true: vec![1.0, 1.0],
            }],
        )
        .is_err());
        // All weights zero.
        assert!(ComparisonTable::new(
            vec![a, b],
            vec![Comparison {
                true_index: 0,
                rival_index: 1,
                weight: 0.0,
                theta_true: vec![1.0, 1.0],
            }],
        )
        .is_err());
    }

    #[test]
    fn inner_perfect_fit_recovers_true_parameters() {
        // Rival has the same form as the truth and its box contains the true
        // vector, so the infimum is zero at theta_hat = theta_true.
        let true_model = normal("mm-true", MeanFunction::Mm, None);
        let rival = normal("mm-rival", MeanFunction::Mm, Some(vec![(0.1, 10.0), (0.1, 10.0)]));
        let table = ComparisonTable::new(
            vec![true_model, rival],
            vec![Comparison {
                true_index: 0,
                rival_index: 1,
                weight: 1.0,
                theta_true: vec![3.0, 0.7],
            }],
        )
        .unwrap();
        let design = Design::uniform(vec![0.5, 1.5, 4.0]).unwrap();
        let sol = inner_infimum(&table, 0, &design, None, &InnerOpts::default()).unwrap();
        assert!(sol.value < 1e-12, "value {}", sol.value);
        assert!((sol.theta_hat[0] - 3.0).abs() < 1e-4);
        assert!((sol.theta_hat[1] - 0.7).abs() < 1e-4);
        assert_eq!(sol.status, InnerStatus::Converged);
    }

    #[test]
    fn inner_constant_rival_hits_least_squares_mean() {
        // Homoscedastic normal with a constant rival mean: the best fit is
        // the design-weighted average of the true mean.
        let true_model = normal("line", MeanFunction::Linear2, None);
        let rival = ModelSpec::new(
            "const",
            Family::NormalHetero,
            MeanFunction::User(Expr::parse("t1", 1).unwrap()),
            VarianceModel::ConstV(1.0),
            Some(vec![(-10.0, 10.0)]),
        )
        .unwrap();
        let table = ComparisonTable::new(
            vec![true_model, rival],
            vec![Comparison {
                true_index: 0,
                rival_index: 1,
                weight: 1.0,
                theta_true: vec![1.0, 0.5],
            }],
        )
        .unwrap();
        let design = Design::uniform(vec![0.0, 1.0, 2.0]).unwrap();
        let sol = inner_infimum(&table, 0, &design, None, &InnerOpts::default()).unwrap();
        // Weighted mean of (1, 1.5, 2) is 1.5; value = mean squared residual.
        assert!((sol.theta_hat[0] - 1.5).abs() < 1e-6);
        assert!((sol.value - (0.25 + 0.0 + 0.25) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn psi_averages_to_the_criterion_over_the_support() {
        let table = mm_table();
        let design =
            Design::new(vec![0.2, 1.0, 3.0, 5.0], vec![0.3, 0.25, 0.25, 0.2]).unwrap();
        let cv = kl_criterion(&design, &table).unwrap();
        assert!(cv.total > 0.0);
        let mut avg = 0.0;
        for (&x, &w) in design.points().iter().zip(design.weights()) {
            avg += w * psi(x, &table, &cv).unwrap();
        }
        assert!(
            (avg - cv.total).abs() <= 1e-10 * cv.total,
            "avg {avg} vs total {}",
            cv.total
        );
    }

    #[test]
    fn criterion_is_concave_in_the_weights() {
        // KL_P is an infimum of linear functions of the weights, hence
        // concave: mixing two weight vectors cannot lose value.
        let table = mm_table();
        let pts = vec![0.2, 1.0, 3.0, 5.0];
        let wa = vec![0.4, 0.1, 0.1, 0.4];
        let wb = vec![0.1, 0.4, 0.4, 0.1];
        let mid: Vec<f64> = wa.iter().zip(&wb).map(|(a, b)| 0.5 * (a + b)).collect();
        let ga = kl_criterion(&Design::new(pts.clone(), wa).unwrap(), &table)
            .unwrap()
            .total;
        let gb = kl_criterion(&Design::new(pts.clone(), wb).unwrap(), &table)
            .unwrap()
            .total;
        let gm = kl_criterion(&Design::new(pts, mid).unwrap(), &table)
            .unwrap()
            .total;
        assert!(gm >= 0.5 * ga + 0.5 * gb - 1e-9, "{gm} vs {}", 0.5 * ga + 0.5 * gb);
    }

    #[test]
    fn efficiency_bound_is_at_most_one() {
        let table = mm_table();
        let space = DesignSpace::new(0.1, 5.0).unwrap();
        let design = Design::uniform(vec![0.1, 1.0, 2.5, 5.0]).unwrap();
        let cv = kl_criterion(&design, &table).unwrap();
        let eff = efficiency_bound(&design, &space, &table, &cv, 200).unwrap();
        assert!(eff > 0.0 && eff <= 1.0, "bound {eff}");
    }

    #[test]
    fn determinism_same_seed_same_result() {
        let table = mm_table();
        let design = Design::uniform(vec![0.2, 1.0, 3.0, 5.0]).unwrap();
        let opts = InnerOpts { seed: 42, ..InnerOpts::default() };
        let a = kl_criterion_warm(&design, &table, None, &opts).unwrap();
        let b = kl_criterion_warm(&design, &table, None, &opts).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        for (x, y) in a.per_entry.iter().zip(&b.per_entry) {
            assert_eq!(x.theta_hat, y.theta_hat);
        }
    }
}
