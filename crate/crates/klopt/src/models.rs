//! Regression models and the Kullback-Leibler distance kernels between them.
//!
//! A [`ModelSpec`] pairs a mean function with a variance structure under one
//! of two response families:
//!
//! * [`Family::NormalHetero`] — normal responses with mean `eta(x, theta)`
//!   and (possibly `x`- and `theta`-dependent) variance `v2(x, theta)`.
//! * [`Family::LogNormal`] — log-normal responses parameterized on the log
//!   scale by `mu(x, theta)` and `sigma2(x, theta)`, derived from the mean
//!   and variance of the response itself via [`lognormal_params`].
//!
//! The discrimination kernels follow the conventions of the optimal-design
//! literature: the normal-family kernel [`kl_normal_hetero`] is **twice** the
//! Kullback-Leibler divergence `KL(N_true || N_rival)` (so that with equal
//! constant variances it reduces to the classical squared mean difference of
//! T-optimality), while the log-normal kernel [`kl_lognormal`] keeps the
//! data-generating model's log-scale variance as the reference in both the
//! variance ratio and the quadratic term (equivalently, it equals
//! `KL(LN_rival || LN_true)`). Both are non-negative and vanish exactly when
//! the two distributions coincide.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expr};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{what} is not finite at x = {x}")]
    NotFinite { what: &'static str, x: f64 },
    #[error("log-normal model needs a positive mean, got eta = {eta} at x = {x}")]
    NonPositiveMean { eta: f64, x: f64 },
    #[error("variance must be positive, got v2 = {v2} at x = {x}")]
    NonPositiveVariance { v2: f64, x: f64 },
    #[error("theta has length {got}, model needs {expected}")]
    BadThetaLen { expected: usize, got: usize },
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("kernel needs both models in the same response family")]
    FamilyMismatch,
}

/// Response distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "normal")]
    NormalHetero,
    #[serde(rename = "log-normal")]
    LogNormal,
}

/// Mean function `eta(x, theta)`; built-in shapes carry analytic parameter
/// gradients, user expressions differentiate by central differences.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanFunction {
    /// `t1*x/(t2+x) + t3*x`
    MmPlusLinear,
    /// `t1*x/(t2+x)`
    Mm,
    /// `t1 - t2*exp(-t3*x^t4)`
    Exp4,
    /// `t1 - t2*exp(-t3*x)`
    Exp3,
    /// `t1 + t2*x`
    Linear2,
    /// `t1 + t2*x*(t3-x)`
    Quadratic3,
    /// `t1 + t2*x/(t3+x)`
    Emax3,
    /// `t1 + t2/(1 + exp((t3-x)/t4))`
    Logistic4,
    User(Expr),
}

impl MeanFunction {
    pub fn dim(&self) -> usize {
        match self {
            Self::Mm | Self::Linear2 => 2,
            Self::MmPlusLinear | Self::Exp3 | Self::Quadratic3 | Self::Emax3 => 3,
            Self::Exp4 | Self::Logistic4 => 4,
            Self::User(e) => e.dim(),
        }
    }

    pub fn eval(&self, x: f64, theta: &[f64]) -> Result<f64, ModelError> {
        self.check_arity(theta)?;
        let v = match self {
            Self::MmPlusLinear => theta[0] * x / (theta[1] + x) + theta[2] * x,
            Self::Mm => theta[0] * x / (theta[1] + x),
            Self::Exp4 => theta[0] - theta[1] * (-theta[2] * x.powf(theta[3])).exp(),
            Self::Exp3 => theta[0] - theta[1] * (-theta[2] * x).exp(),
            Self::Linear2 => theta[0] + theta[1] * x,
            Self::Quadratic3 => theta[0] + theta[1] * x * (theta[2] - x),
            Self::Emax3 => theta[0] + theta[1] * x / (theta[2] + x),
            Self::Logistic4 => theta[0] + theta[1] * sigmoid(-(theta[2] - x) / theta[3]),
            Self::User(e) => return Ok(e.eval(x, theta)?),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NotFinite { what: "mean", x })
        }
    }

    /// Mean value together with its parameter gradient.
    pub fn eval_grad(&self, x: f64, theta: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_arity(theta)?;
        let out = match self {
            Self::MmPlusLinear => {
                let den = theta[1] + x;
                let frac = x / den;
                (
                    theta[0] * frac + theta[2] * x,
                    vec![frac, -theta[0] * frac / den, x],
                )
            }
            Self::Mm => {
                let den = theta[1] + x;
                let frac = x / den;
                (theta[0] * frac, vec![frac, -theta[0] * frac / den])
            }
            Self::Exp4 => {
                let p = x.powf(theta[3]);
                let e = (-theta[2] * p).exp();
                // x^t4 * ln(x) -> 0 as x -> 0+, so pin the t4-partial there.
                let dp = if x > 0.0 { p * x.ln() } else { 0.0 };
                (
                    theta[0] - theta[1] * e,
                    vec![1.0, -e, theta[1] * p * e, theta[1] * theta[2] * e * dp],
                )
            }
            Self::Exp3 => {
                let e = (-theta[2] * x).exp();
                (theta[0] - theta[1] * e, vec![1.0, -e, theta[1] * x * e])
            }
            Self::Linear2 => (theta[0] + theta[1] * x, vec![1.0, x]),
            Self::Quadratic3 => (
                theta[0] + theta[1] * x * (theta[2] - x),
                vec![1.0, x * (theta[2] - x), theta[1] * x],
            ),
            Self::Emax3 => {
                let den = theta[2] + x;
                let frac = x / den;
                (
                    theta[0] + theta[1] * frac,
                    vec![1.0, frac, -theta[1] * frac / den],
                )
            }
            Self::Logistic4 => {
                let z = (theta[2] - x) / theta[3];
                let s = sigmoid(-z);
                let sprime = s * (1.0 - s); // d sigmoid(-z) / d(-z)
                (
                    theta[0] + theta[1] * s,
                    vec![
                        1.0,
                        s,
                        -theta[1] * sprime / theta[3],
                        theta[1] * sprime * z / theta[3],
                    ],
                )
            }
            Self::User(e) => (e.eval(x, theta)?, e.grad_theta(x, theta)?),
        };
        if out.0.is_finite() && out.1.iter().all(|g| g.is_finite()) {
            Ok(out)
        } else {
            Err(ModelError::NotFinite { what: "mean", x })
        }
    }

    fn check_arity(&self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.dim() {
            return Err(ModelError::BadThetaLen {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }
}

/// Numerically stable logistic function `1/(1+e^{-z})`.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Variance structure of the response.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceModel {
    /// Constant response variance `v2 = c`.
    ConstV(f64),
    /// Constant log-scale variance `sigma2 = c`; log-normal family only.
    ConstSigma2(f64),
    /// `v2 = exp(eta / scale)`.
    ExpOfMean { scale: f64 },
    /// `v2 = expr(x, theta)`.
    User(Expr),
}

/// Location/scale parameters of the response distribution at one `x`,
/// together with their gradients in the model parameters.
///
/// For the normal family `loc = eta`, `scale2 = v2`; for the log-normal
/// family `loc = mu`, `scale2 = sigma2` (log scale).
#[derive(Debug, Clone)]
pub struct DistDerivs {
    pub loc: f64,
    pub scale2: f64,
    pub dloc: Vec<f64>,
    pub dscale2: Vec<f64>,
}

/// A named regression model: family, mean, variance, and (for models used as
/// the rival in a comparison) the parameter box the inner optimization runs
/// over.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub family: Family,
    pub mean: MeanFunction,
    pub variance: VarianceModel,
    pub theta_box: Option<Vec<(f64, f64)>>,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        family: Family,
        mean: MeanFunction,
        variance: VarianceModel,
        theta_box: Option<Vec<(f64, f64)>>,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            name: name.into(),
            family,
            mean,
            variance,
            theta_box,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), ModelError> {
        match &self.variance {
            VarianceModel::ConstV(c) if *c <= 0.0 || !c.is_finite() => {
                return Err(ModelError::InvalidSpec(format!(
                    "constant variance must be positive, got {c}"
                )));
            }
            VarianceModel::ConstSigma2(c) => {
                if self.family != Family::LogNormal {
                    return Err(ModelError::InvalidSpec(
                        "const_sigma2 is only meaningful for the log-normal family".into(),
                    ));
                }
                if *c <= 0.0 || !c.is_finite() {
                    return Err(ModelError::InvalidSpec(format!(
                        "constant sigma2 must be positive, got {c}"
                    )));
                }
            }
            VarianceModel::ExpOfMean { scale } if *scale == 0.0 || !scale.is_finite() => {
                return Err(ModelError::InvalidSpec(
                    "exp-of-mean variance needs a nonzero finite scale".into(),
                ));
            }
            VarianceModel::User(e) if e.dim() > self.mean.dim() => {
                return Err(ModelError::InvalidSpec(format!(
                    "variance expression uses {} parameters but the mean has {}",
                    e.dim(),
                    self.mean.dim()
                )));
            }
            _ => {}
        }
        if let Some(bx) = &self.theta_box {
            if bx.len() != self.dim() {
                return Err(ModelError::InvalidSpec(format!(
                    "theta_box has {} entries for a {}-parameter model",
                    bx.len(),
                    self.dim()
                )));
            }
            for &(lo, hi) in bx {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(ModelError::InvalidSpec(format!(
                        "theta_box interval [{lo}, {hi}] is empty or unbounded"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    /// Response variance `v2(x, theta)`; not defined under `ConstSigma2`.
    fn response_variance(&self, x: f64, theta: &[f64], eta: f64) -> Result<f64, ModelError> {
        let v2 = match &self.variance {
            VarianceModel::ConstV(c) => *c,
            VarianceModel::ExpOfMean { scale } => (eta / scale).exp(),
            VarianceModel::User(e) => e.eval(x, theta)?,
            VarianceModel::ConstSigma2(_) => unreachable!("handled at the sigma2 level"),
        };
        if !v2.is_finite() {
            return Err(ModelError::NotFinite { what: "variance", x });
        }
        if v2 <= 0.0 {
            return Err(ModelError::NonPositiveVariance { v2, x });
        }
        Ok(v2)
    }

    /// Distribution parameters at `x`: `(eta, v2)` for the normal family,
    /// `(mu, sigma2)` for the log-normal family.
    pub fn dist_params(&self, x: f64, theta: &[f64]) -> Result<(f64, f64), ModelError> {
        let eta = self.mean.eval(x, theta)?;
        match self.family {
            Family::NormalHetero => {
                let v2 = self.response_variance(x, theta, eta)?;
                Ok((eta, v2))
            }
            Family::LogNormal => {
                if eta <= 0.0 {
                    return Err(ModelError::NonPositiveMean { eta, x });
                }
                if let VarianceModel::ConstSigma2(s2) = self.variance {
                    Ok((eta.ln() - 0.5 * s2, s2))
                } else {
                    let v2 = self.response_variance(x, theta, eta)?;
                    lognormal_params(eta, v2)
                }
            }
        }
    }

    /// Distribution parameters plus their gradients in `theta`.
    pub fn dist_derivs(&self, x: f64, theta: &[f64]) -> Result<DistDerivs, ModelError> {
        let (eta, deta) = self.mean.eval_grad(x, theta)?;
        if self.family == Family::LogNormal && eta <= 0.0 {
            return Err(ModelError::NonPositiveMean { eta, x });
        }
        // (v2, dv2) where applicable.
        let response_var = |tag: &VarianceModel| -> Result<(f64, Vec<f64>), ModelError> {
            let d = theta.len();
            let (v2, dv2) = match tag {
                VarianceModel::ConstV(c) => (*c, vec![0.0; d]),
                VarianceModel::ExpOfMean { scale } => {
                    let v2 = (eta / scale).exp();
                    (v2, deta.iter().map(|g| v2 * g / scale).collect())
                }
                VarianceModel::User(e) => {
                    let mut dv2 = e.grad_theta(x, theta)?;
                    dv2.resize(d, 0.0);
                    (e.eval(x, theta)?, dv2)
                }
                VarianceModel::ConstSigma2(_) => unreachable!(),
            };
            if !v2.is_finite() {
                return Err(ModelError::NotFinite { what: "variance", x });
            }
            if v2 <= 0.0 {
                return Err(ModelError::NonPositiveVariance { v2, x });
            }
            Ok((v2, dv2))
        };
        match self.family {
            Family::NormalHetero => {
                let (v2, dv2) = response_var(&self.variance)?;
                Ok(DistDerivs {
                    loc: eta,
                    scale2: v2,
                    dloc: deta,
                    dscale2: dv2,
                })
            }
            Family::LogNormal => {
                if let VarianceModel::ConstSigma2(s2) = self.variance {
                    // mu = ln(eta) - s2/2 with constant s2.
                    let dmu: Vec<f64> = deta.iter().map(|g| g / eta).collect();
                    Ok(DistDerivs {
                        loc: eta.ln() - 0.5 * s2,
                        scale2: s2,
                        dloc: dmu,
                        dscale2: vec![0.0; theta.len()],
                    })
                } else {
                    let (v2, dv2) = response_var(&self.variance)?;
                    let (mu, s2) = lognormal_params(eta, v2)?;
                    // sigma2 = ln(1 + v2/eta^2):
                    //   d sigma2 = (dv2 - 2 (v2/eta) deta) / (eta^2 + v2)
                    // mu = ln(eta) - sigma2/2:
                    //   d mu = deta/eta - d sigma2 / 2
                    let den = eta * eta + v2;
                    let ds2: Vec<f64> = dv2
                        .iter()
                        .zip(&deta)
                        .map(|(dv, de)| (dv - 2.0 * (v2 / eta) * de) / den)
                        .collect();
                    let dmu: Vec<f64> = deta
                        .iter()
                        .zip(&ds2)
                        .map(|(de, ds)| de / eta - 0.5 * ds)
                        .collect();
                    Ok(DistDerivs {
                        loc: mu,
                        scale2: s2,
                        dloc: dmu,
                        dscale2: ds2,
                    })
                }
            }
        }
    }
}

/// Log-scale parameters `(mu, sigma2)` of a log-normal variate with mean
/// `eta > 0` and variance `v2 > 0`:
/// `sigma2 = ln(1 + v2/eta^2)`, `mu = ln(eta) - sigma2/2`.
pub fn lognormal_params(eta: f64, v2: f64) -> Result<(f64, f64), ModelError> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(ModelError::NonPositiveMean { eta, x: f64::NAN });
    }
    if !(v2.is_finite() && v2 > 0.0) {
        return Err(ModelError::NonPositiveVariance { v2, x: f64::NAN });
    }
    let s2 = (v2 / (eta * eta)).ln_1p();
    let mu = eta.ln() - 0.5 * s2;
    if s2.is_finite() && mu.is_finite() {
        Ok((mu, s2))
    } else {
        Err(ModelError::NotFinite {
            what: "log-normal parameters",
            x: f64::NAN,
        })
    }
}

/// Shared core of both Gaussian-type kernels:
/// `dd/s2_j + (s2_i/s2_j - 1) - ln(s2_i/s2_j)`, computed via `ln_1p` so the
/// value stays non-negative to machine precision when the scales nearly
/// match.
#[inline]
fn gauss_core(dd: f64, s2_i: f64, s2_j: f64) -> f64 {
    let y = s2_i / s2_j - 1.0;
    dd / s2_j + y - y.ln_1p()
}

/// Discrimination kernel for heteroscedastic normal responses:
///
/// `(eta_i - eta_j)^2/v2_j + v2_i/v2_j + ln(v2_j/v2_i) - 1`
///
/// i.e. twice the Kullback-Leibler divergence `KL(N_i || N_j)`. Model `i` is
/// the data-generating ("true") model, model `j` the rival.
pub fn kl_normal_hetero(eta_i: f64, v2_i: f64, eta_j: f64, v2_j: f64) -> Result<f64, ModelError> {
    if !(v2_i.is_finite() && v2_i > 0.0) {
        return Err(ModelError::NonPositiveVariance { v2: v2_i, x: f64::NAN });
    }
    if !(v2_j.is_finite() && v2_j > 0.0) {
        return Err(ModelError::NonPositiveVariance { v2: v2_j, x: f64::NAN });
    }
    let d = eta_i - eta_j;
    let v = gauss_core(d * d, v2_i, v2_j);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NotFinite { what: "normal kernel", x: f64::NAN })
    }
}

/// Discrimination kernel between two log-normal distributions given on the
/// log scale:
///
/// `(1/2) [ ln(s2_i/s2_j) + s2_j/s2_i + (mu_i-mu_j)^2/s2_i - 1 ]`
///
/// Model `i` is the data-generating ("true") model, model `j` the rival. The
/// established convention for log-normal discrimination keeps the true
/// model's log-scale variance `s2_i` as the reference in both the ratio and
/// the quadratic term; the value equals `KL(LN_j || LN_i)`.
pub fn kl_lognormal(mu_i: f64, s2_i: f64, mu_j: f64, s2_j: f64) -> Result<f64, ModelError> {
    if !(s2_i.is_finite() && s2_i > 0.0) {
        return Err(ModelError::NonPositiveVariance { v2: s2_i, x: f64::NAN });
    }
    if !(s2_j.is_finite() && s2_j > 0.0) {
        return Err(ModelError::NonPositiveVariance { v2: s2_j, x: f64::NAN });
    }
    let d = mu_i - mu_j;
    let v = 0.5 * gauss_core(d * d, s2_j, s2_i);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NotFinite { what: "log-normal kernel", x: f64::NAN })
    }
}

/// Kernel value from precomputed distribution parameters of both sides.
#[inline]
pub fn kl_from_params(
    family: Family,
    true_params: (f64, f64),
    rival_params: (f64, f64),
) -> Result<f64, ModelError> {
    match family {
        Family::NormalHetero => {
            kl_normal_hetero(true_params.0, true_params.1, rival_params.0, rival_params.1)
        }
        Family::LogNormal => {
            kl_lognormal(true_params.0, true_params.1, rival_params.0, rival_params.1)
        }
    }
}

/// Discrimination kernel between two fully specified models at one point.
pub fn kl(
    model_i: &ModelSpec,
    theta_i: &[f64],
    model_j: &ModelSpec,
    theta_j: &[f64],
    x: f64,
) -> Result<f64, ModelError> {
    if model_i.family != model_j.family {
        return Err(ModelError::FamilyMismatch);
    }
    let tp = model_i.dist_params(x, theta_i)?;
    let rp = model_j.dist_params(x, theta_j)?;
    kl_from_params(model_i.family, tp, rp)
}

/// Kernel value and its gradient in the rival parameters, from precomputed
/// true-side parameters and rival derivatives.
pub fn kl_grad_from_derivs(
    family: Family,
    true_params: (f64, f64),
    rival: &DistDerivs,
) -> Result<(f64, Vec<f64>), ModelError> {
    let (li, s2i) = true_params;
    let (lj, s2j) = (rival.loc, rival.scale2);
    let value = kl_from_params(family, true_params, (lj, s2j))?;
    let d = li - lj;
    // Partial derivatives of the kernel in the rival's location and squared
    // scale. The families keep the fixed reference scale on opposite sides
    // (rival for normal, true for log-normal), so each needs its own pair.
    let (dv_dloc, dv_ds2) = match family {
        Family::NormalHetero => (
            -2.0 * d / s2j,
            -(d * d) / (s2j * s2j) - s2i / (s2j * s2j) + 1.0 / s2j,
        ),
        Family::LogNormal => (-d / s2i, 0.5 * (1.0 / s2i - 1.0 / s2j)),
    };
    let grad: Vec<f64> = rival
        .dloc
        .iter()
        .zip(&rival.dscale2)
        .map(|(dl, ds)| dv_dloc * dl + dv_ds2 * ds)
        .collect();
    if grad.iter().all(|g| g.is_finite()) {
        Ok((value, grad))
    } else {
        Err(ModelError::NotFinite { what: "kernel gradient", x: f64::NAN })
    }
}

/// Kernel value and gradient in the rival parameters at one point.
pub fn kl_grad_rival(
    model_i: &ModelSpec,
    theta_i: &[f64],
    model_j: &ModelSpec,
    theta_j: &[f64],
    x: f64,
) -> Result<(f64, Vec<f64>), ModelError> {
    if model_i.family != model_j.family {
        return Err(ModelError::FamilyMismatch);
    }
    let tp = model_i.dist_params(x, theta_i)?;
    let rd = model_j.dist_derivs(x, theta_j)?;
    kl_grad_from_derivs(model_i.family, tp, &rd)
}

/// Positive-semidefinite curvature surrogate (Fisher information of the rival
/// distribution in the rival parameters, scaled like the kernel), row-major
/// `d x d`:
///
/// `factor * [ dloc dloc^T / s2_j + (1/2) dscale2 dscale2^T / s2_j^2 ]`
///
/// with `factor = 2` for the normal kernel (which is twice the divergence)
/// and `factor = 1` for the log-normal kernel.
pub fn fisher_from_derivs(family: Family, rival: &DistDerivs) -> Vec<f64> {
    let d = rival.dloc.len();
    let factor = match family {
        Family::NormalHetero => 2.0,
        Family::LogNormal => 1.0,
    };
    let s2 = rival.scale2;
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = factor
                * (rival.dloc[r] * rival.dloc[c] / s2
                    + 0.5 * rival.dscale2[r] * rival.dscale2[c] / (s2 * s2));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dsl_twin(mean: &MeanFunction) -> Expr {
        let (src, dim) = match mean {
            MeanFunction::MmPlusLinear => ("t1*x/(t2+x)+t3*x", 3),
            MeanFunction::Mm => ("t1*x/(t2+x)", 2),
            MeanFunction::Exp4 => ("t1-t2*exp(-t3*x^t4)", 4),
            MeanFunction::Exp3 => ("t1-t2*exp(-t3*x)", 3),
            MeanFunction::Linear2 => ("t1+t2*x", 2),
            MeanFunction::Quadratic3 => ("t1+t2*x*(t3-x)", 3),
            MeanFunction::Emax3 => ("t1+t2*x/(t3+x)", 3),
            MeanFunction::Logistic4 => ("t1+t2/(1+exp((t3-x)/t4))", 4),
            MeanFunction::User(_) => unreachable!(),
        };
        Expr::parse(src, dim).unwrap()
    }

    #[test]
    fn builtins_match_their_expression_twins() {
        let cases: Vec<(MeanFunction, Vec<f64>, Vec<f64>)> = vec![
            (MeanFunction::MmPlusLinear, vec![1.0, 1.0, 1.0], vec![0.1, 1.7, 5.0]),
            (MeanFunction::Mm, vec![3.0, 0.7], vec![0.1, 2.0, 5.0]),
            (MeanFunction::Exp4, vec![2.0, 1.0, 0.8, 1.5], vec![0.0, 0.3, 4.0, 10.0]),
            (MeanFunction::Exp3, vec![2.0, 1.0, 0.5], vec![0.0, 1.0, 10.0]),
            (MeanFunction::Linear2, vec![60.0, 0.56], vec![0.0, 250.0, 500.0]),
            (MeanFunction::Quadratic3, vec![60.0, 7.0 / 2250.0, 600.0], vec![0.0, 250.0, 500.0]),
            (MeanFunction::Emax3, vec![60.0, 294.0, 25.0], vec![0.0, 250.0, 500.0]),
            (MeanFunction::Logistic4, vec![49.62, 290.51, 150.0, 45.51], vec![0.0, 150.0, 500.0]),
        ];
        for (mean, theta, xs) in cases {
            let twin = dsl_twin(&mean);
            for &x in &xs {
                let v = mean.eval(x, &theta).unwrap();
                let w = twin.eval(x, &theta).unwrap();
                assert!(
                    (v - w).abs() <= 1e-12 * (1.0 + v.abs()),
                    "{mean:?} value mismatch at x={x}: {v} vs {w}"
                );
                let (_, g) = mean.eval_grad(x, &theta).unwrap();
                let fd = twin.grad_theta(x, &theta).unwrap();
                for (k, (a, b)) in g.iter().zip(&fd).enumerate() {
                    assert!(
                        (a - b).abs() <= 1e-5 * (1.0 + a.abs()),
                        "{mean:?} grad[{k}] mismatch at x={x}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn logistic_is_stable_for_extreme_arguments() {
        let theta = [49.62, 290.51, 150.0, 0.1];
        // (t3 - x)/t4 = -3500: the naive form would overflow exp().
        let (v, g) = MeanFunction::Logistic4.eval_grad(500.0, &theta).unwrap();
        assert!((v - (49.62 + 290.51)).abs() < 1e-9);
        assert!(g.iter().all(|gi| gi.is_finite()));
        let v = MeanFunction::Logistic4.eval(0.0, &theta).unwrap();
        assert!((v - 49.62).abs() < 1e-9);
    }

    #[test]
    fn normal_kernel_matches_displayed_form() {
        // Equal means, v2_i = 2, v2_j = 1: 2 + ln(1/2) - 1 = 1 - ln 2.
        let v = kl_normal_hetero(1.5, 2.0, 1.5, 1.0).unwrap();
        assert!((v - (1.0 - 2.0_f64.ln())).abs() < 1e-14);
        // Identical distributions give exactly zero.
        assert_eq!(kl_normal_hetero(0.3, 1.7, 0.3, 1.7).unwrap(), 0.0);
        // Equal variances reduce to the squared mean difference.
        let v = kl_normal_hetero(2.0, 1.3, 0.5, 1.3).unwrap();
        assert!((v - 1.5 * 1.5 / 1.3).abs() < 1e-14);
        assert!(kl_normal_hetero(0.0, -1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn lognormal_params_match_hand_values() {
        // eta = 0.5, v2 = 1: sigma2 = ln(1 + 1/0.25) = ln 5.
        let (mu, s2) = lognormal_params(0.5, 1.0).unwrap();
        assert!((s2 - 5.0_f64.ln()).abs() < 1e-14);
        assert!((mu - (0.5_f64.ln() - 0.5 * 5.0_f64.ln())).abs() < 1e-14);
        assert!(lognormal_params(-1.0, 1.0).is_err());
        assert!(lognormal_params(1.0, 0.0).is_err());
    }

    #[test]
    fn lognormal_kernel_reduces_for_equal_scales() {
        // sigma_i = sigma_j, mu_i - mu_j = delta: value = delta^2/(2 sigma^2).
        let v = kl_lognormal(1.0, 0.7, 0.4, 0.7).unwrap();
        assert!((v - 0.6 * 0.6 / (2.0 * 0.7)).abs() < 1e-14);
        assert_eq!(kl_lognormal(1.0, 0.7, 1.0, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn kernels_are_nonnegative_on_random_draws() {
        // Pseudo-random but deterministic parameter sweep.
        let mut state = 0x9E3779B97F4A7C15_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let (a, b) = (4.0 * next() - 2.0, 4.0 * next() - 2.0);
            let (v1, v2) = (0.1 + 3.0 * next(), 0.1 + 3.0 * next());
            let k = kl_normal_hetero(a, v1, b, v2).unwrap();
            assert!(k >= 0.0, "normal kernel negative: {k}");
            let k = kl_lognormal(a, v1, b, v2).unwrap();
            assert!(k >= 0.0, "log-normal kernel negative: {k}");
        }
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let true_model = ModelSpec::new(
            "true",
            Family::LogNormal,
            MeanFunction::MmPlusLinear,
            VarianceModel::ConstV(1.0),
            None,
        )
        .unwrap();
        let rival = ModelSpec::new(
            "rival",
            Family::LogNormal,
            MeanFunction::Mm,
            VarianceModel::ConstV(1.0),
            None,
        )
        .unwrap();
        let theta_i = [1.0, 1.0, 1.0];
        for (theta_j, x) in [([4.0, 2.0], 1.3), ([7.5, 5.0], 4.2), ([2.0, 0.4], 0.5)] {
            let (_, g) = kl_grad_rival(&true_model, &theta_i, &rival, &theta_j, x).unwrap();
            for k in 0..2 {
                let h = 1e-6 * theta_j[k].abs().max(1.0);
                let mut up = theta_j;
                up[k] += h;
                let mut dn = theta_j;
                dn[k] -= h;
                let fu = kl(&true_model, &theta_i, &rival, &up, x).unwrap();
                let fd = kl(&true_model, &theta_i, &rival, &dn, x).unwrap();
                let fdg = (fu - fd) / (2.0 * h);
                assert!(
                    (g[k] - fdg).abs() <= 1e-5 * (1.0 + g[k].abs()),
                    "grad[{k}] at x={x}: analytic {} vs fd {fdg}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn fisher_surrogate_is_symmetric_psd() {
        let rival = ModelSpec::new(
            "rival",
            Family::LogNormal,
            MeanFunction::Exp3,
            VarianceModel::ExpOfMean { scale: 1.0 },
            None,
        )
        .unwrap();
        let rd = rival.dist_derivs(2.0, &[2.0, 1.0, 0.5]).unwrap();
        let f = fisher_from_derivs(Family::LogNormal, &rd);
        let d = 3;
        for r in 0..d {
            for c in 0..d {
                assert!((f[r * d + c] - f[c * d + r]).abs() < 1e-14);
            }
        }
        // PSD for a sum of outer products: check via random quadratic forms.
        for z in [[1.0, 0.0, 0.0], [0.3, -0.7, 0.2], [-1.0, 2.0, 0.5]] {
            let mut q = 0.0;
            for r in 0..d {
                for c in 0..d {
                    q += z[r] * f[r * d + c] * z[c];
                }
            }
            assert!(q >= -1e-12, "quadratic form negative: {q}");
        }
    }

    #[test]
    fn spec_validation_rejects_bad_combinations() {
        assert!(ModelSpec::new(
            "m",
            Family::NormalHetero,
            MeanFunction::Linear2,
            VarianceModel::ConstSigma2(1.0),
            None,
        )
        .is_err());
        assert!(ModelSpec::new(
            "m",
            Family::NormalHetero,
            MeanFunction::Linear2,
            VarianceModel::ConstV(0.0),
            None,
        )
        .is_err());
        assert!(ModelSpec::new(
            "m",
            Family::NormalHetero,
            MeanFunction::Linear2,
            VarianceModel::ConstV(1.0),
            Some(vec![(0.0, 1.0)]),
        )
        .is_err());
        // Log-normal evaluation rejects a non-positive mean.
        let m = ModelSpec::new(
            "m",
            Family::LogNormal,
            MeanFunction::Linear2,
            VarianceModel::ConstV(1.0),
            None,
        )
        .unwrap();
        assert!(matches!(
            m.dist_params(0.0, &[-1.0, 1.0]),
            Err(ModelError::NonPositiveMean { .. })
        ));
    }
}
