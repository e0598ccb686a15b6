//! Exchange-type weight step.
//!
//! On a fixed support the criterion's partial derivative with respect to
//! weight `k` is the directional value `v_k = Ψ(x_k, ξ)` (the envelope
//! theorem removes the inner minimizers' dependence). The classic ascent
//! move transfers mass from the support point with the smallest `v_k` among
//! those carrying weight to the point with the largest `v_k`, choosing the
//! transfer amount by a line search on the true criterion ([`exchange_step`],
//! [`line_search`]). Iterating until `max_k v_k − g ≤ tol·g` reproduces the
//! equivalence-theorem condition restricted to the support
//! ([`weights_grad_loop`]).
//!
//! Two line-search modes: `Exact` golden-sections the true criterion (every
//! probe re-solves the inner problems, warm-started), `Linearized` maximizes
//! the quadratic surrogate of the [`crate::qp`] module in closed form along
//! the exchange segment and then backtracks against the true criterion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criterion::{
    kl_criterion_warm, psi, ComparisonTable, CriterionError, CriterionValue, InnerOpts,
    StartPolicy,
};
use crate::design::{Design, DesignError};
use crate::qp::{assemble_qp, linearize, QpError};

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("exchange step needs at least two support points with positive weight")]
    TooFewPoints,
}

/// How [`line_search`] picks the transfer amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearchMode {
    /// Golden-section maximization of the true criterion along the segment.
    Exact,
    /// Closed-form maximizer of the quadratic surrogate, backtracked until
    /// the true criterion does not decrease.
    Linearized,
}

/// The last mass transfer an exchange step performed.
#[derive(Debug, Clone, Copy)]
pub struct MoveInfo {
    pub k_up: usize,
    pub k_down: usize,
    pub alpha: f64,
}

/// Weight-iteration state: the design, its criterion evaluation, and the
/// directional values at the support.
#[derive(Debug, Clone)]
pub struct GradientState {
    pub design: Design,
    pub cv: CriterionValue,
    pub v: Vec<f64>,
    pub iteration: usize,
    pub last_move: Option<MoveInfo>,
}

impl GradientState {
    pub fn new(
        design: Design,
        table: &ComparisonTable,
        cv: CriterionValue,
    ) -> Result<Self, GradError> {
        let v = directional_values(&design, table, &cv)?;
        Ok(Self {
            design,
            cv,
            v,
            iteration: 0,
            last_move: None,
        })
    }

    /// Optimality gap restricted to the support: `max_k v_k − g`.
    pub fn gap(&self) -> f64 {
        let vmax = self.v.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        vmax - self.cv.total
    }
}

/// Directional values `v_k = Ψ(x_k, ξ)` at every support point (cached inner
/// minimizers, no re-optimization). Their design-weighted average is the
/// criterion itself.
pub fn directional_values(
    design: &Design,
    table: &ComparisonTable,
    cv: &CriterionValue,
) -> Result<Vec<f64>, CriterionError> {
    design
        .points()
        .iter()
        .map(|&x| psi(x, table, cv))
        .collect()
}

/// Choose the mass `α ∈ [0, alpha_max]` to move from support point `k_down`
/// to `k_up`. Returns the chosen `α` together with the evaluated design and
/// criterion at that `α` (`None` when `α = 0`, i.e. no improving transfer
/// was found; the criterion never decreases).
pub fn line_search(
    design: &Design,
    table: &ComparisonTable,
    cv: &CriterionValue,
    k_up: usize,
    k_down: usize,
    alpha_max: f64,
    mode: LineSearchMode,
    opts: &InnerOpts,
) -> Result<(f64, Option<(Design, CriterionValue)>), GradError> {
    debug_assert!(alpha_max >= 0.0 && alpha_max <= design.weights()[k_down] + 1e-15);
    if alpha_max <= 0.0 || k_up == k_down {
        return Ok((0.0, None));
    }
    let warm_opts = InnerOpts {
        policy: StartPolicy::WarmOnly,
        ..*opts
    };
    let make = |alpha: f64| -> Result<Design, GradError> {
        let mut w = design.weights().to_vec();
        w[k_down] -= alpha;
        w[k_up] += alpha;
        if w[k_down] < 0.0 {
            w[k_down] = 0.0;
        }
        Ok(design.with_weights(&w)?)
    };
    // Cheap warm-start-only probe of the criterion after moving `alpha`.
    let probe = |alpha: f64| -> Result<f64, GradError> {
        let cand = make(alpha)?;
        Ok(kl_criterion_warm(&cand, table, Some(cv), &warm_opts)?.total)
    };

    // The criterion is concave in the weights and the transfer path is
    // affine, so φ(α) is concave: a coarse geometric ladder brackets its
    // maximum and a short golden refinement inside the bracket finishes the
    // job. Roughly 19 warm probes instead of a full-interval golden scan.
    let exact_trial = |probe: &dyn Fn(f64) -> Result<f64, GradError>| -> Result<f64, GradError> {
        let gr = (5.0_f64.sqrt() - 1.0) / 2.0;
        let mut ladder = vec![(0.0, cv.total)];
        let mut step = alpha_max;
        for _ in 0..5 {
            ladder.push((step, probe(step)?));
            step *= 0.25;
        }
        ladder.sort_by(|p, q| p.0.total_cmp(&q.0));
        let m = ladder
            .iter()
            .enumerate()
            .max_by(|(_, p), (_, q)| p.1.total_cmp(&q.1))
            .map(|(i, _)| i)
            .expect("ladder is nonempty");
        let mut best = ladder[m];
        let (mut a, mut b) = (
            if m == 0 { 0.0 } else { ladder[m - 1].0 },
            if m + 1 < ladder.len() {
                ladder[m + 1].0
            } else {
                alpha_max
            },
        );
        let mut c = b - gr * (b - a);
        let mut d = a + gr * (b - a);
        let mut fc = probe(c)?;
        let mut fd = probe(d)?;
        for _ in 0..28 {
            for cand in [(c, fc), (d, fd)] {
                if cand.1 > best.1 {
                    best = cand;
                }
            }
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - gr * (b - a);
                fc = probe(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + gr * (b - a);
                fd = probe(d)?;
            }
        }
        Ok(if best.1 > cv.total { best.0 } else { 0.0 })
    };

    // Phase 1: pick a trial transfer amount.
    let mut trial = match mode {
        LineSearchMode::Exact => exact_trial(&probe)?,
        LineSearchMode::Linearized => {
            // The surrogate along ω(α) = ω + α(e_up − e_down) is an exact
            // quadratic φ(α) = φ(0) + c1·α − c2·α², so three evaluations of
            // the quadratic form determine the parabola with no truncation
            // error:
            //   φ(h)   = φ0 + c1·h − c2·h²
            //   φ(h/2) = φ0 + c1·h/2 − c2·h²/4
            // ⇒ c1 = (4φ(h/2) − φ(h) − 3φ0)/h, c2 = −2(φ0 − 2φ(h/2) + φ(h))/h².
            let lin = linearize(design, table, cv)?;
            let qp = assemble_qp(&lin, design.weights())?;
            let w0 = design.weights().to_vec();
            let at = |alpha: f64| -> Vec<f64> {
                let mut w = w0.clone();
                w[k_down] -= alpha;
                w[k_up] += alpha;
                w
            };
            let h = alpha_max;
            let phi0 = qp.objective(&w0);
            let phi_h = qp.objective(&at(h));
            let phi_h2 = qp.objective(&at(0.5 * h));
            let c2 = -2.0 * (phi0 - 2.0 * phi_h2 + phi_h) / (h * h);
            let c1 = (4.0 * phi_h2 - phi_h - 3.0 * phi0) / h;
            let trial = if c2 > 1e-300 {
                (c1 / (2.0 * c2)).clamp(0.0, alpha_max)
            } else if c1 > 0.0 {
                alpha_max
            } else {
                0.0
            };
            // The surrogate's curvature misjudges directions whose anchor
            // weight is zero (no mass, no curvature in the refit model), so
            // a degenerate proposal falls back to a concave secant model of
            // the criterion itself: the slope at α = 0 is free (the
            // directional values at the cached minimizers), and one warm
            // probe pins the curvature. Overshoot is phase 2's problem.
            if trial > 1e-9 * alpha_max {
                trial
            } else {
                let slope = psi(design.points()[k_up], table, cv)?
                    - psi(design.points()[k_down], table, cv)?;
                if slope <= 0.0 {
                    0.0
                } else {
                    let a0 = 0.25 * alpha_max;
                    let f0 = probe(a0)?;
                    let c2 = (cv.total + slope * a0 - f0) / (a0 * a0);
                    if c2 > 1e-300 {
                        (slope / (2.0 * c2)).clamp(0.0, alpha_max)
                    } else {
                        alpha_max
                    }
                }
            }
        }
    };

    // Phase 2: commit. Halve on cheap warm probes until one shows
    // improvement. A small transfer is accepted on its warm evaluation — the
    // donor keeps most of its mass, so the cached minimizers barely move —
    // but taking at least half the donor's mass must survive a multistart
    // check with the caller's policy: emptying a support point can rewrite a
    // rival's best fit entirely, and a stale-minimizer evaluation overstates
    // exactly those moves.
    let mut full_checks = 0;
    while trial > 1e-12 * alpha_max && full_checks < 3 {
        if probe(trial)? <= cv.total {
            trial *= 0.5;
            continue;
        }
        let cand = make(trial)?;
        if trial >= 0.5 * alpha_max {
            let cand_cv = kl_criterion_warm(&cand, table, Some(cv), opts)?;
            full_checks += 1;
            if cand_cv.total > cv.total {
                return Ok((trial, Some((cand, cand_cv))));
            }
            trial *= 0.5;
        } else {
            let cand_cv = kl_criterion_warm(&cand, table, Some(cv), &warm_opts)?;
            return Ok((trial, Some((cand, cand_cv))));
        }
    }
    Ok((0.0, None))
}

/// One exchange move: transfer mass from the worst positive-weight support
/// point to the best support point (ties break toward the smallest index).
/// The returned state's criterion is never below the input's.
pub fn exchange_step(
    state: &GradientState,
    table: &ComparisonTable,
    mode: LineSearchMode,
    opts: &InnerOpts,
) -> Result<GradientState, GradError> {
    let weights = state.design.weights();
    let n = weights.len();
    if weights.iter().filter(|w| **w > 0.0).count() < 2 {
        return Err(GradError::TooFewPoints);
    }
    let mut k_up = 0;
    for k in 1..n {
        if state.v[k] > state.v[k_up] {
            k_up = k;
        }
    }
    let mut k_down = usize::MAX;
    for k in 0..n {
        if weights[k] > 0.0 && (k_down == usize::MAX || state.v[k] < state.v[k_down]) {
            k_down = k;
        }
    }
    let alpha_max = weights[k_down];
    let (alpha, moved) = if k_up == k_down {
        (0.0, None)
    } else {
        line_search(
            &state.design,
            table,
            &state.cv,
            k_up,
            k_down,
            alpha_max,
            mode,
            opts,
        )?
    };
    let (design, cv) = match moved {
        Some((d, c)) => (d, c),
        None => (state.design.clone(), state.cv.clone()),
    };
    let v = directional_values(&design, table, &cv)?;
    Ok(GradientState {
        design,
        cv,
        v,
        iteration: state.iteration + 1,
        last_move: Some(MoveInfo { k_up, k_down, alpha }),
    })
}

/// Result of a full exchange iteration on a fixed support.
#[derive(Debug, Clone)]
pub struct GradLoopResult {
    pub design: Design,
    pub cv: CriterionValue,
    pub steps: usize,
    /// The support-restricted optimality gap at exit.
    pub gap: f64,
    /// True when the loop exited because no improving transfer existed while
    /// the gap was still above tolerance.
    pub stalled: bool,
}

/// Iterate [`exchange_step`] until the support-restricted equivalence
/// condition `max_k v_k − g ≤ tol_rel·g` holds, the step stalls, or
/// `max_steps` is reached.
pub fn weights_grad_loop(
    design: Design,
    table: &ComparisonTable,
    cv: CriterionValue,
    max_steps: usize,
    tol_rel: f64,
    mode: LineSearchMode,
    opts: &InnerOpts,
) -> Result<GradLoopResult, GradError> {
    // Small exchanges commit on cheap warm-start-only evaluations (the line
    // search escalates large ones itself); every few accepted moves (and on
    // exit) a full multistart anchor corrects drift from stale inner
    // minimizers, reverting the stretch since the last anchor when it fails
    // to hold up. The returned state is always anchored.
    let mut state = GradientState::new(design, table, cv)?;
    let mut anchor = (state.design.clone(), state.cv.clone());
    let mut since_anchor = 0usize;
    let mut stalled = false;
    let mut steps = 0;
    while steps < max_steps {
        if since_anchor == 0 && state.gap() <= tol_rel * state.cv.total {
            break;
        }
        let next = exchange_step(&state, table, mode, opts)?;
        steps += 1;
        let no_move = next.last_move.map(|m| m.alpha == 0.0).unwrap_or(true);
        state = next;
        if !no_move {
            since_anchor += 1;
        }
        let due = since_anchor >= 8
            || no_move
            || steps >= max_steps
            || state.gap() <= tol_rel * state.cv.total;
        if due && since_anchor > 0 {
            let full = kl_criterion_warm(&state.design, table, Some(&state.cv), opts)?;
            if full.total >= anchor.1.total {
                anchor = (state.design.clone(), full.clone());
                state = GradientState::new(state.design.clone(), table, full)?;
                since_anchor = 0;
            } else {
                // The stretch since the anchor was phantom progress; put it
                // back and stop rather than loop on a mirage.
                state = GradientState::new(anchor.0.clone(), table, anchor.1.clone())?;
                since_anchor = 0;
                stalled = true;
                break;
            }
        }
        if no_move {
            stalled = true;
            break;
        }
    }
    let gap = state.gap();
    let stalled = stalled && gap > tol_rel * state.cv.total;
    Ok(GradLoopResult {
        design: state.design,
        cv: state.cv,
        steps,
        gap,
        stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criterion::{kl_criterion, Comparison};
    use crate::expr::Expr;
    use crate::models::{Family, MeanFunction, ModelSpec, VarianceModel};

    /// Truth η = x on two points {0, 1}, rival a constant: the inner fit is
    /// the weighted mean and g(ω) = ω(1−ω), maximized at ω = 1/2.
    fn two_point_toy() -> (ComparisonTable, Design) {
        let true_model = ModelSpec::new(
            "line",
            Family::NormalHetero,
            MeanFunction::Linear2,
            VarianceModel::ConstV(1.0),
            None,
        )
        .unwrap();
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
                theta_true: vec![0.0, 1.0],
            }],
        )
        .unwrap();
        let design = Design::new(vec![0.0, 1.0], vec![0.9, 0.1]).unwrap();
        (table, design)
    }

    #[test]
    fn directional_values_average_to_criterion() {
        let (table, design) = two_point_toy();
        let cv = kl_criterion(&design, &table).unwrap();
        let v = directional_values(&design, &table, &cv).unwrap();
        let avg: f64 = v.iter().zip(design.weights()).map(|(v, w)| v * w).sum();
        assert!((avg - cv.total).abs() <= 1e-10 * (1.0 + cv.total));
    }

    #[test]
    fn exact_search_finds_the_analytic_transfer() {
        // From ω = (0.9, 0.1): g(α) = (0.9−α)(0.1+α) peaks at α = 0.4.
        let (table, design) = two_point_toy();
        let cv = kl_criterion(&design, &table).unwrap();
        let state = GradientState::new(design, &table, cv).unwrap();
        let next = exchange_step(&state, &table, LineSearchMode::Exact, &InnerOpts::default())
            .unwrap();
        let mv = next.last_move.unwrap();
        assert_eq!((mv.k_up, mv.k_down), (1, 0));
        assert!((mv.alpha - 0.4).abs() < 1e-5, "alpha {}", mv.alpha);
        assert!((next.cv.total - 0.25).abs() < 1e-9);
        assert!((next.design.weights()[0] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn linearized_search_matches_exact_on_the_quadratic_toy() {
        // The criterion is exactly quadratic along the segment here, so the
        // surrogate maximizer is the true one.
        let (table, design) = two_point_toy();
        let cv = kl_criterion(&design, &table).unwrap();
        let (alpha, out) = line_search(
            &design,
            &table,
            &cv,
            1,
            0,
            0.9,
            LineSearchMode::Linearized,
            &InnerOpts::default(),
        )
        .unwrap();
        assert!((alpha - 0.4).abs() < 1e-9, "alpha {alpha}");
        assert!((out.unwrap().1.total - 0.25).abs() < 1e-12);
    }

    #[test]
    fn flat_directional_values_move_nothing() {
        let (table, _) = two_point_toy();
        let design = Design::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let cv = kl_criterion(&design, &table).unwrap();
        let state = GradientState::new(design, &table, cv).unwrap();
        // At the optimum v is constant across the support.
        assert!(state.gap() <= 1e-9 * state.cv.total);
        let next = exchange_step(&state, &table, LineSearchMode::Exact, &InnerOpts::default())
            .unwrap();
        assert!(next.last_move.unwrap().alpha.abs() < 1e-7);
        assert!((next.cv.total - state.cv.total).abs() <= 1e-12);
    }

    #[test]
    fn loop_reaches_the_support_certificate() {
        let (table, design) = two_point_toy();
        let cv = kl_criterion(&design, &table).unwrap();
        let out = weights_grad_loop(
            design,
            &table,
            cv,
            100,
            1e-6,
            LineSearchMode::Linearized,
            &InnerOpts::default(),
        )
        .unwrap();
        assert!(!out.stalled);
        assert!(out.gap <= 1e-6 * out.cv.total);
        assert!((out.design.weights()[0] - 0.5).abs() < 1e-4);
        assert!((out.cv.total - 0.25).abs() < 1e-8);
    }
}
