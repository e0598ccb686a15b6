//! Scenario files: one TOML document describing a complete discrimination
//! problem — design space, models with fixed true parameters or discrete
//! priors, pair weights, and algorithm settings.
//!
//! # Schema
//!
//! ```toml
//! name = "two_saturating_curves"          # required, used in output paths
//! description = "optional free text"
//! p_matrix = [[0.0, 1.0], [0.0, 0.0]]     # row i = true model, column j = rival
//! start_points = 4                        # optional; default: max model dim + 1
//!
//! [design_space]
//! lower = 0.1
//! upper = 5.0
//!
//! [algo]                                  # optional; any AlgoConfig field
//! grid_size = 1000
//!
//! [[models]]
//! name = "full"
//! family = "log-normal"                   # or "normal"
//! theta = [1.0, 1.0, 1.0]                 # fixed true parameters …
//! theta_box = [[0.01, 100.0], [0.01, 100.0]]  # rival search box
//! mean = { builtin = "mm_plus_linear" }   # or { expr = "t1*x/(t2+x)", dim = 2 }
//! variance = { const_v = 1.0 }            # or { const_sigma2 = 1.0 }
//!                                         # or { exp_of_mean = { scale = 100.0 } }
//!                                         # or { expr = "0.5 + t1*x" }
//!
//! # … or a product prior, one block per parameter coordinate:
//! # [[models.prior.coords]]
//! # fixed = 2.0
//! # [[models.prior.coords]]
//! # values = [0.5, 0.8]                   # optional weights = [0.3, 0.7]
//! # [[models.prior.coords]]
//! # normal_grid = { center = 0.8, variance = 0.3, step = 0.5, points = 5 }
//! ```
//!
//! Always write floats with a decimal point (`2.0`, not `2`): the untagged
//! config enums do not coerce integers.
//!
//! A model that appears as a rival (a positive entry in its `p_matrix`
//! column) needs a `theta_box`; if the file omits it, a fallback box is fit
//! at build time (see [`Scenario::build`]) and reported. A model that
//! appears as a data-generating model (a positive entry in its row) needs
//! exactly one of `theta` or `prior`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{self, AlgoConfig, AlgoError};
use crate::criterion::{
    flatten_bayesian, ComparisonTable, CriterionError, DiscretePrior, TrueParams,
};
use crate::design::{Design, DesignError, DesignSpace};
use crate::expr::{Expr, ParseError};
use crate::models::{Family, MeanFunction, ModelError, ModelSpec, VarianceModel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("scenario serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("model '{model}': {source}")]
    Model {
        model: String,
        #[source]
        source: ModelError,
    },
    #[error("model '{model}' expression: {source}")]
    Expr {
        model: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Design-space interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub lower: f64,
    pub upper: f64,
}

/// Mean function: a named builtin or an expression in `x` and `t1..tk`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanConfig {
    Builtin {
        builtin: String,
    },
    Expr {
        expr: String,
        /// Parameter count; inferred from the highest `tK` index if omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
    },
}

/// Variance structure of the response.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarianceConfig {
    /// Constant response variance.
    ConstV { const_v: f64 },
    /// Constant log-scale variance (log-normal family only).
    ConstSigma2 { const_sigma2: f64 },
    /// `v2 = exp(eta / scale)`.
    ExpOfMean { exp_of_mean: ExpOfMeanConfig },
    /// `v2 = expr(x, theta)` over the mean's parameters.
    Expr { expr: String },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpOfMeanConfig {
    pub scale: f64,
}

/// One coordinate of a product prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoordPrior {
    /// Degenerate coordinate: a single fixed value.
    Fixed { fixed: f64 },
    /// Explicit support values with optional masses (uniform when omitted).
    List {
        values: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// Equally spaced gaussian-profile grid (see [`NormalGridConfig`]).
    NormalGrid { normal_grid: NormalGridConfig },
}

/// A symmetric grid mimicking a discretized normal distribution: support at
/// `center + sqrt(variance) * step * k` with `k = i - (points+1)/2` for
/// `i = 1..points`, and masses proportional to `exp(-(step*k)^2/2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalGridConfig {
    pub center: f64,
    pub variance: f64,
    pub step: f64,
    pub points: usize,
}

/// Product prior over a model's parameter vector, one entry per coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    pub coords: Vec<CoordPrior>,
}

/// One model in a scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub family: Family,
    /// Fixed true parameter vector (mutually exclusive with `prior`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// Rival search box, one `[lo, hi]` per parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_box: Option<Vec<[f64; 2]>>,
    pub mean: MeanConfig,
    pub variance: VarianceConfig,
    /// Discrete product prior on the true parameters (mutually exclusive
    /// with `theta`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
}

/// A parsed scenario file. Field order matters for serialization: TOML
/// requires plain values before sub-tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_points: Option<usize>,
    /// Pair weights: `p_matrix[i][j]` weights the comparison with model `i`
    /// generating the data and model `j` fit to it.
    pub p_matrix: Vec<Vec<f64>>,
    pub design_space: SpaceConfig,
    #[serde(default)]
    pub algo: AlgoConfig,
    pub models: Vec<ModelConfig>,
}

/// One rival's parameter box as actually used, for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct RivalBox {
    pub model: String,
    pub bounds: Vec<(f64, f64)>,
    /// True when the box came from the least-squares fallback (or a later
    /// widening) rather than the scenario file.
    pub defaulted: bool,
}

/// A scenario resolved into solver inputs.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub space: DesignSpace,
    pub table: ComparisonTable,
    pub start: Design,
    /// Every rival's box, in model order.
    pub rival_boxes: Vec<RivalBox>,
}

impl Scenario {
    /// Parse and validate a scenario from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.check_shape()?;
        Ok(scenario)
    }

    /// Load a scenario file from disk.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Serialize back to TOML. `from_toml_str` on the result builds an
    /// identical table.
    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Structural checks that do not need model evaluation.
    fn check_shape(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.name.trim().is_empty() {
            return bad("scenario name must not be empty".into());
        }
        let nu = self.models.len();
        if nu == 0 {
            return bad("scenario has no models".into());
        }
        if self.p_matrix.len() != nu || self.p_matrix.iter().any(|r| r.len() != nu) {
            return bad(format!(
                "p_matrix must be {nu}x{nu} to match the {nu} models"
            ));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("duplicate model name '{}'", m.name));
            }
            if m.theta.is_some() && m.prior.is_some() {
                return bad(format!(
                    "model '{}' has both a fixed theta and a prior",
                    m.name
                ));
            }
            let generates = self.p_matrix[i].iter().any(|&w| w > 0.0);
            if generates && m.theta.is_none() && m.prior.is_none() {
                return bad(format!(
                    "model '{}' generates data in p_matrix but has neither theta nor prior",
                    m.name
                ));
            }
        }
        Ok(())
    }

    pub fn space(&self) -> Result<DesignSpace, ScenarioError> {
        Ok(DesignSpace::new(
            self.design_space.lower,
            self.design_space.upper,
        )?)
    }

    /// Resolve the scenario into solver inputs: build model specs, flatten
    /// priors into a comparison table, check the log-normal positivity guard
    /// on the evaluation grid, fit fallback boxes for rivals that lack one,
    /// and construct the default starting design.
    pub fn build(&self) -> Result<BuiltScenario, ScenarioError> {
        self.build_with_boxes(&[])
    }

    /// [`Scenario::build`] with per-model box overrides (used to widen
    /// fallback boxes after a run reports boundary minimizers). Overridden
    /// boxes count as defaulted.
    pub fn build_with_boxes(
        &self,
        overrides: &[(String, Vec<(f64, f64)>)],
    ) -> Result<BuiltScenario, ScenarioError> {
        self.check_shape()?;
        self.algo.validate()?;
        let space = self.space()?;
        let nu = self.models.len();

        let used_as_rival: Vec<bool> =
            (0..nu).map(|j| (0..nu).any(|i| self.p_matrix[i][j] > 0.0)).collect();

        // Resolve means and variances first; dims drive later checks.
        let mut means = Vec::with_capacity(nu);
        for m in &self.models {
            means.push(resolve_mean(&m.mean, &m.name)?);
        }

        // True-side parameters. Models that never generate data get an
        // unused placeholder so the flattening signature is satisfied.
        let mut priors: Vec<TrueParams> = Vec::with_capacity(nu);
        for (m, mean) in self.models.iter().zip(&means) {
            let dim = mean.dim();
            let tp = match (&m.theta, &m.prior) {
                (Some(theta), None) => {
                    if theta.len() != dim {
                        return Err(ScenarioError::Invalid(format!(
                            "model '{}': theta has {} entries for a {}-parameter mean",
                            m.name,
                            theta.len(),
                            dim
                        )));
                    }
                    TrueParams::Fixed(theta.clone())
                }
                (None, Some(prior)) => {
                    if prior.coords.len() != dim {
                        return Err(ScenarioError::Invalid(format!(
                            "model '{}': prior has {} coordinates for a {}-parameter mean",
                            m.name,
                            prior.coords.len(),
                            dim
                        )));
                    }
                    let per_coord = prior
                        .coords
                        .iter()
                        .map(|c| coord_atoms(c, &m.name))
                        .collect::<Result<Vec<_>, _>>()?;
                    TrueParams::Prior(DiscretePrior::new(product_atoms(&per_coord))?)
                }
                (None, None) => TrueParams::Fixed(vec![0.0; dim]),
                (Some(_), Some(_)) => unreachable!("check_shape rejects this"),
            };
            priors.push(tp);
        }

        // Rival boxes: scenario-provided, overridden, or fit as a fallback.
        let mut rival_boxes = Vec::new();
        let mut boxes: Vec<Option<Vec<(f64, f64)>>> = Vec::with_capacity(nu);
        for (j, m) in self.models.iter().enumerate() {
            let over = overrides.iter().find(|(name, _)| *name == m.name);
            let bx: Option<(Vec<(f64, f64)>, bool)> = if let Some((_, b)) = over {
                Some((b.clone(), true))
            } else if let Some(b) = &m.theta_box {
                Some((b.iter().map(|[lo, hi]| (*lo, *hi)).collect(), false))
            } else if used_as_rival[j] {
                let i = (0..nu)
                    .find(|&i| self.p_matrix[i][j] > 0.0)
                    .expect("used_as_rival implies a positive column entry");
                let target_theta = truth_center(&priors[i]);
                let n_fit = self.start_size();
                let xs = space.grid(n_fit.max(8));
                let mut targets = Vec::with_capacity(xs.len());
                for &x in &xs {
                    let y = means[i].eval(x, &target_theta).map_err(|source| {
                        ScenarioError::Model { model: self.models[i].name.clone(), source }
                    })?;
                    targets.push((x, y));
                }
                Some((fallback_box(&means[j], &targets), true))
            } else {
                None
            };
            if let Some((bounds, defaulted)) = &bx {
                if used_as_rival[j] {
                    rival_boxes.push(RivalBox {
                        model: m.name.clone(),
                        bounds: bounds.clone(),
                        defaulted: *defaulted,
                    });
                }
            }
            boxes.push(bx.map(|(b, _)| b));
        }

        let mut specs = Vec::with_capacity(nu);
        for ((m, mean), bx) in self.models.iter().zip(means).zip(boxes) {
            let variance = resolve_variance(&m.variance, mean.dim(), &m.name)?;
            let spec = ModelSpec::new(m.name.clone(), m.family, mean, variance, bx)
                .map_err(|source| ScenarioError::Model { model: m.name.clone(), source })?;
            specs.push(spec);
        }

        let table = flatten_bayesian(specs, &priors, &self.p_matrix)?;
        self.check_positive_means(&table, &space)?;

        let start = algorithms::default_start(&space, &table, self.start_size())?;
        Ok(BuiltScenario { space, table, start, rival_boxes })
    }

    /// Number of points in the default starting design.
    pub fn start_size(&self) -> usize {
        let max_dim = self
            .models
            .iter()
            .map(|m| match &m.mean {
                MeanConfig::Builtin { builtin } => builtin_mean(builtin).map_or(0, |f| f.dim()),
                MeanConfig::Expr { expr, dim } => dim.unwrap_or_else(|| infer_dim(expr)),
            })
            .max()
            .unwrap_or(0);
        self.start_points.unwrap_or(max_dim + 1).max(2)
    }

    /// Log-normal data-generating means must stay positive everywhere on the
    /// evaluation grid; a violation is a configuration error, not a runtime
    /// surprise.
    fn check_positive_means(
        &self,
        table: &ComparisonTable,
        space: &DesignSpace,
    ) -> Result<(), ScenarioError> {
        let grid = space.grid(self.algo.grid_size.max(2));
        let mut checked: Vec<(usize, &[f64])> = Vec::new();
        for e in table.entries() {
            let model = &table.models()[e.true_index];
            if model.family != Family::LogNormal {
                continue;
            }
            if checked
                .iter()
                .any(|(i, th)| *i == e.true_index && *th == e.theta_true.as_slice())
            {
                continue;
            }
            checked.push((e.true_index, &e.theta_true));
            for &x in &grid {
                let eta = model
                    .mean
                    .eval(x, &e.theta_true)
                    .map_err(|source| ScenarioError::Model {
                        model: model.name.clone(),
                        source,
                    })?;
                if eta <= 0.0 {
                    let mut theta = String::new();
                    for (k, t) in e.theta_true.iter().enumerate() {
                        let _ = write!(theta, "{}{t}", if k > 0 { ", " } else { "" });
                    }
                    return Err(ScenarioError::Invalid(format!(
                        "log-normal model '{}' has nonpositive mean {eta} at x = {x} \
                         for true parameters ({theta})",
                        model.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Atoms `(value, mass)` of one prior coordinate, masses summing to one.
fn coord_atoms(coord: &CoordPrior, model: &str) -> Result<Vec<(f64, f64)>, ScenarioError> {
    let bad = |msg: String| Err(ScenarioError::Invalid(format!("model '{model}': {msg}")));
    match coord {
        CoordPrior::Fixed { fixed } => {
            if !fixed.is_finite() {
                return bad(format!("fixed prior value {fixed} is not finite"));
            }
            Ok(vec![(*fixed, 1.0)])
        }
        CoordPrior::List { values, weights } => {
            if values.is_empty() {
                return bad("prior coordinate has no values".into());
            }
            if values.iter().any(|v| !v.is_finite()) {
                return bad("prior coordinate value is not finite".into());
            }
            let ws = match weights {
                Some(w) => {
                    if w.len() != values.len() {
                        return bad(format!(
                            "{} prior weights for {} values",
                            w.len(),
                            values.len()
                        ));
                    }
                    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                        return bad("prior weights must be positive".into());
                    }
                    w.clone()
                }
                None => vec![1.0; values.len()],
            };
            let total: f64 = ws.iter().sum();
            Ok(values.iter().zip(ws).map(|(&v, w)| (v, w / total)).collect())
        }
        CoordPrior::NormalGrid { normal_grid: g } => {
            if g.points == 0 {
                return bad("normal_grid needs at least one point".into());
            }
            if !(g.variance > 0.0 && g.variance.is_finite()) {
                return bad(format!("normal_grid variance must be positive, got {}", g.variance));
            }
            if !(g.step > 0.0 && g.step.is_finite()) {
                return bad(format!("normal_grid step must be positive, got {}", g.step));
            }
            if !g.center.is_finite() {
                return bad(format!("normal_grid center {} is not finite", g.center));
            }
            let sd = g.variance.sqrt();
            let mut atoms = Vec::with_capacity(g.points);
            let mut total = 0.0;
            for i in 0..g.points {
                let k = i as f64 - (g.points as f64 - 1.0) / 2.0;
                let value = g.center + sd * g.step * k;
                let mass = (-(g.step * k).powi(2) / 2.0).exp();
                total += mass;
                atoms.push((value, mass));
            }
            for a in &mut atoms {
                a.1 /= total;
            }
            Ok(atoms)
        }
    }
}

/// Product of per-coordinate atoms in lexicographic order with the rightmost
/// coordinate varying fastest; masses multiplied and renormalized.
fn product_atoms(coords: &[Vec<(f64, f64)>]) -> Vec<(Vec<f64>, f64)> {
    let mut out: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
    for coord in coords {
        let mut next = Vec::with_capacity(out.len() * coord.len());
        for (prefix, mass) in &out {
            for &(v, m) in coord {
                let mut lambda = prefix.clone();
                lambda.push(v);
                next.push((lambda, mass * m));
            }
        }
        out = next;
    }
    let total: f64 = out.iter().map(|(_, m)| m).sum();
    for a in &mut out {
        a.1 /= total;
    }
    out
}

/// Representative true parameter vector for the fallback box fit: the fixed
/// vector, or the prior mean.
fn truth_center(tp: &TrueParams) -> Vec<f64> {
    match tp {
        TrueParams::Fixed(theta) => theta.clone(),
        TrueParams::Prior(prior) => {
            let dim = prior.atoms()[0].0.len();
            let mut mean = vec![0.0; dim];
            for (lambda, tau) in prior.atoms() {
                for (m, l) in mean.iter_mut().zip(lambda) {
                    *m += tau * l;
                }
            }
            mean
        }
    }
}

fn builtin_mean(name: &str) -> Option<MeanFunction> {
    Some(match name {
        "mm_plus_linear" => MeanFunction::MmPlusLinear,
        "mm" => MeanFunction::Mm,
        "exp4" => MeanFunction::Exp4,
        "exp3" => MeanFunction::Exp3,
        "linear2" => MeanFunction::Linear2,
        "quadratic3" => MeanFunction::Quadratic3,
        "emax3" => MeanFunction::Emax3,
        "logistic4" => MeanFunction::Logistic4,
        _ => return None,
    })
}

fn resolve_mean(cfg: &MeanConfig, model: &str) -> Result<MeanFunction, ScenarioError> {
    match cfg {
        MeanConfig::Builtin { builtin } => builtin_mean(builtin).ok_or_else(|| {
            ScenarioError::Invalid(format!(
                "model '{model}': unknown builtin mean '{builtin}' \
                 (known: mm_plus_linear, mm, exp4, exp3, linear2, quadratic3, emax3, logistic4)"
            ))
        }),
        MeanConfig::Expr { expr, dim } => {
            let d = dim.unwrap_or_else(|| infer_dim(expr));
            if d == 0 {
                return Err(ScenarioError::Invalid(format!(
                    "model '{model}': expression '{expr}' uses no parameters t1..tk \
                     and gives no dim"
                )));
            }
            Expr::parse(expr, d)
                .map(MeanFunction::User)
                .map_err(|source| ScenarioError::Expr { model: model.into(), source })
        }
    }
}

fn resolve_variance(
    cfg: &VarianceConfig,
    dim: usize,
    model: &str,
) -> Result<VarianceModel, ScenarioError> {
    Ok(match cfg {
        VarianceConfig::ConstV { const_v } => VarianceModel::ConstV(*const_v),
        VarianceConfig::ConstSigma2 { const_sigma2 } => VarianceModel::ConstSigma2(*const_sigma2),
        VarianceConfig::ExpOfMean { exp_of_mean } => {
            VarianceModel::ExpOfMean { scale: exp_of_mean.scale }
        }
        VarianceConfig::Expr { expr } => Expr::parse(expr, dim)
            .map(VarianceModel::User)
            .map_err(|source| ScenarioError::Expr { model: model.into(), source })?,
    })
}

/// Highest `K` over `tK` tokens in an expression (a `t` not preceded by an
/// identifier character, followed by digits).
fn infer_dim(src: &str) -> usize {
    let b = src.as_bytes();
    let mut best = 0usize;
    let mut i = 0;
    while i < b.len() {
        if b[i] == b't' && (i == 0 || !b[i - 1].is_ascii_alphanumeric()) {
            let mut j = i + 1;
            let mut n = 0usize;
            while j < b.len() && b[j].is_ascii_digit() {
                n = n * 10 + (b[j] - b'0') as usize;
                j += 1;
            }
            if j > i + 1 {
                best = best.max(n);
                i = j;
                continue;
            }
        }
        i += 1;
    }
    best
}

/// Fallback rival box: fit the rival mean to `(x, y)` targets by least
/// squares (deterministic coordinate descent with golden-section line
/// minimizations), then take ±10× the fitted magnitude — floored at 1 — per
/// coordinate. Heuristic by design: the box only needs to contain the inner
/// minimizers comfortably, and boundary hits are reported and widened by the
/// caller.
fn fallback_box(mean: &MeanFunction, targets: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let d = mean.dim();
    let sse = |theta: &[f64]| -> f64 {
        let mut s = 0.0;
        for &(x, y) in targets {
            match mean.eval(x, theta) {
                Ok(e) => s += (e - y) * (e - y),
                Err(_) => return f64::INFINITY,
            }
        }
        s
    };
    let scale = targets.iter().map(|&(_, y)| y.abs()).fold(1.0, f64::max);
    let starts = [vec![0.0; d], vec![1.0; d], vec![scale; d], vec![-scale; d]];
    let mut best_f = f64::INFINITY;
    let mut best = vec![1.0; d];
    for start in starts {
        let mut theta = start;
        let mut f = sse(&theta);
        for _ in 0..8 {
            for k in 0..d {
                let w = 10.0 * (1.0 + theta[k].abs());
                let line = |v: f64| {
                    let mut t = theta.clone();
                    t[k] = v;
                    // golden_max maximizes; errors must lose.
                    let s = sse(&t);
                    if s.is_finite() {
                        -s
                    } else {
                        f64::NEG_INFINITY
                    }
                };
                let (v, neg) =
                    algorithms::golden_max(&line, theta[k] - w, theta[k] + w, 1e-10 * w);
                if -neg < f {
                    theta[k] = v;
                    f = -neg;
                }
            }
        }
        if f < best_f {
            best_f = f;
            best = theta;
        }
    }
    best.iter()
        .map(|&c| {
            let half = 10.0 * c.abs().max(1.0);
            (c - half, c + half)
        })
        .collect()
}

/// A scenario shipped inside the crate.
#[derive(Debug, Clone, Copy)]
pub struct BundledScenario {
    pub name: &'static str,
    pub toml: &'static str,
}

/// All bundled scenarios, in presentation order.
pub const BUNDLED: &[BundledScenario] = &[
    BundledScenario {
        name: "example2_case1",
        toml: include_str!("../scenarios/example2_case1.toml"),
    },
    BundledScenario {
        name: "example2_case2",
        toml: include_str!("../scenarios/example2_case2.toml"),
    },
    BundledScenario {
        name: "example2_case3",
        toml: include_str!("../scenarios/example2_case3.toml"),
    },
    BundledScenario {
        name: "example3_case0",
        toml: include_str!("../scenarios/example3_case0.toml"),
    },
    BundledScenario {
        name: "example3_case1",
        toml: include_str!("../scenarios/example3_case1.toml"),
    },
    BundledScenario {
        name: "example3_case2",
        toml: include_str!("../scenarios/example3_case2.toml"),
    },
    BundledScenario {
        name: "example3_case3",
        toml: include_str!("../scenarios/example3_case3.toml"),
    },
    BundledScenario {
        name: "example4_case1",
        toml: include_str!("../scenarios/example4_case1.toml"),
    },
    BundledScenario {
        name: "example4_case2",
        toml: include_str!("../scenarios/example4_case2.toml"),
    },
    BundledScenario {
        name: "example4_case3",
        toml: include_str!("../scenarios/example4_case3.toml"),
    },
];

/// Parse a bundled scenario by name.
pub fn load_bundled(name: &str) -> Result<Scenario, ScenarioError> {
    let Some(b) = BUNDLED.iter().find(|b| b.name == name) else {
        let known: Vec<&str> = BUNDLED.iter().map(|b| b.name).collect();
        return Err(ScenarioError::Invalid(format!(
            "no bundled scenario named '{name}' (bundled: {})",
            known.join(", ")
        )));
    };
    Scenario::from_toml_str(b.toml)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criterion::kl_criterion;

    const TOY: &str = r#"
        name = "toy"
        p_matrix = [[0.0, 1.0], [0.0, 0.0]]

        [design_space]
        lower = 0.1
        upper = 5.0

        [[models]]
        name = "full"
        family = "log-normal"
        theta = [1.0, 1.0, 1.0]
        mean = { builtin = "mm_plus_linear" }
        variance = { const_v = 1.0 }

        [[models]]
        name = "reduced"
        family = "log-normal"
        theta_box = [[0.01, 100.0], [0.01, 100.0]]
        mean = { builtin = "mm" }
        variance = { const_v = 1.0 }
    "#;

    #[test]
    fn toml_round_trip_builds_identical_table() {
        let s1 = Scenario::from_toml_str(TOY).unwrap();
        let b1 = s1.build().unwrap();
        let text = s1.to_toml_string().unwrap();
        let s2 = Scenario::from_toml_str(&text).unwrap();
        let b2 = s2.build().unwrap();
        assert_eq!(b1.table, b2.table);
        assert_eq!(b1.start, b2.start);
        assert_eq!(b1.space.range(), b2.space.range());
    }

    #[test]
    fn normal_grid_matches_hand_computed_atoms() {
        let grid = CoordPrior::NormalGrid {
            normal_grid: NormalGridConfig {
                center: 0.8,
                variance: 0.3,
                step: 0.5,
                points: 5,
            },
        };
        let atoms = coord_atoms(&grid, "m").unwrap();
        let sd = 0.3_f64.sqrt();
        let want_vals: Vec<f64> = (-2..=2).map(|k| 0.8 + sd * 0.5 * k as f64).collect();
        let raw: Vec<f64> = (-2..=2).map(|k| (-(k * k) as f64 / 8.0).exp()).collect();
        let total: f64 = raw.iter().sum();
        for (i, (v, w)) in atoms.iter().enumerate() {
            assert!((v - want_vals[i]).abs() < 1e-15, "value {i}: {v}");
            assert!((w - raw[i] / total).abs() < 1e-15, "weight {i}: {w}");
        }
    }

    #[test]
    fn product_prior_orders_rightmost_fastest() {
        let coords = vec![
            vec![(1.0, 0.5), (2.0, 0.5)],
            vec![(10.0, 0.25), (20.0, 0.75)],
        ];
        let atoms = product_atoms(&coords);
        assert_eq!(atoms.len(), 4);
        assert_eq!(atoms[0].0, vec![1.0, 10.0]);
        assert_eq!(atoms[1].0, vec![1.0, 20.0]);
        assert_eq!(atoms[2].0, vec![2.0, 10.0]);
        assert_eq!(atoms[3].0, vec![2.0, 20.0]);
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!((atoms[1].1 - 0.375).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_are_reported() {
        // Both theta and prior.
        let both = TOY.replace(
            "theta = [1.0, 1.0, 1.0]",
            "theta = [1.0, 1.0, 1.0]\nprior = { coords = [{ fixed = 1.0 }] }",
        );
        assert!(matches!(
            Scenario::from_toml_str(&both),
            Err(ScenarioError::Invalid(_))
        ));

        // Data-generating model without truth specification.
        let none = TOY.replace("theta = [1.0, 1.0, 1.0]\n", "");
        assert!(matches!(
            Scenario::from_toml_str(&none),
            Err(ScenarioError::Invalid(_))
        ));

        // Wrong p_matrix shape.
        let bad_p = TOY.replace(
            "p_matrix = [[0.0, 1.0], [0.0, 0.0]]",
            "p_matrix = [[0.0, 1.0]]",
        );
        assert!(matches!(
            Scenario::from_toml_str(&bad_p),
            Err(ScenarioError::Invalid(_))
        ));

        // Unknown builtin mean.
        let bad_mean = TOY.replace("builtin = \"mm\"", "builtin = \"mmm\"");
        let s = Scenario::from_toml_str(&bad_mean).unwrap();
        assert!(matches!(s.build(), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn expression_mean_infers_dimension() {
        let text = TOY.replace(
            "mean = { builtin = \"mm\" }",
            "mean = { expr = \"t1*x/(t2+x)\" }",
        );
        let s = Scenario::from_toml_str(&text).unwrap();
        let built = s.build().unwrap();
        assert_eq!(built.table.models()[1].dim(), 2);
        // Same table as the builtin variant at matched parameters.
        let b0 = Scenario::from_toml_str(TOY).unwrap().build().unwrap();
        let c_expr = kl_criterion(&built.start, &built.table).unwrap();
        let c_builtin = kl_criterion(&b0.start, &b0.table).unwrap();
        assert!(
            (c_expr.total - c_builtin.total).abs() <= 1e-10 * (1.0 + c_builtin.total),
            "expr {} vs builtin {}",
            c_expr.total,
            c_builtin.total
        );
    }

    #[test]
    fn lognormal_positivity_guard_fires() {
        let text = r#"
            name = "bad"
            p_matrix = [[0.0, 1.0], [0.0, 0.0]]

            [design_space]
            lower = 0.0
            upper = 10.0

            [[models]]
            name = "drops-negative"
            family = "log-normal"
            theta = [1.0, -0.5]
            mean = { builtin = "linear2" }
            variance = { const_v = 1.0 }

            [[models]]
            name = "flat"
            family = "log-normal"
            theta_box = [[0.1, 10.0], [0.001, 1.0]]
            mean = { builtin = "linear2" }
            variance = { const_v = 1.0 }
        "#;
        let s = Scenario::from_toml_str(text).unwrap();
        let err = s.build().unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid(msg) if msg.contains("nonpositive mean")));
    }

    #[test]
    fn missing_rival_box_gets_fitted_fallback() {
        let text = TOY.replace("theta_box = [[0.01, 100.0], [0.01, 100.0]]\n", "");
        let s = Scenario::from_toml_str(&text).unwrap();
        let built = s.build().unwrap();
        assert_eq!(built.rival_boxes.len(), 1);
        let rb = &built.rival_boxes[0];
        assert!(rb.defaulted);
        assert_eq!(rb.model, "reduced");
        let spec_box = built.table.models()[1].theta_box.as_ref().unwrap();
        assert_eq!(spec_box, &rb.bounds);
        for &(lo, hi) in spec_box {
            assert!(lo.is_finite() && hi.is_finite() && lo < hi);
        }
        // The fitted box must be usable: the criterion on the start design
        // is positive and finite.
        let cv = kl_criterion(&built.start, &built.table).unwrap();
        assert!(cv.total.is_finite() && cv.total > 0.0);
    }

    #[test]
    fn bundled_scenarios_parse_with_expected_sizes() {
        for b in BUNDLED {
            let s = load_bundled(b.name).unwrap();
            assert_eq!(s.name, b.name);
        }
        let e2 = load_bundled("example2_case1").unwrap().build().unwrap();
        assert_eq!(e2.table.entries().len(), 1);
        assert_eq!(e2.start.support_size(), 4);

        let e3 = load_bundled("example3_case2").unwrap().build().unwrap();
        assert_eq!(e3.table.entries().len(), 25);
        let mass: f64 = e3.table.entries().iter().map(|e| e.weight).sum();
        assert!((mass - 1.0).abs() < 1e-12);

        let e4 = load_bundled("example4_case3").unwrap().build().unwrap();
        assert_eq!(e4.table.entries().len(), 246);
        assert_eq!(e4.table.models().len(), 4);
        assert!(e4.rival_boxes.iter().all(|rb| !rb.defaulted));

        assert!(load_bundled("example9_case9").is_err());
    }
}
