//! Approximate designs on a one-dimensional design space.
//!
//! An approximate design is a probability measure with finite support: a
//! sorted list of distinct points `x_1 < ... < x_n` together with weights
//! `w_k >= 0` summing to one. All optimization routines in this crate
//! manipulate designs through the operations defined here, so the invariants
//! (sorted distinct points, normalized non-negative weights) hold everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack used when renormalizing an almost-normalized weight vector.
const WEIGHT_SUM_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("design space needs lower < upper, got [{lower}, {upper}]")]
    EmptySpace { lower: f64, upper: f64 },
    #[error("point {point} lies outside the design space [{lower}, {upper}]")]
    OutsideSpace { point: f64, lower: f64, upper: f64 },
    #[error("got {points} points but {weights} weights")]
    LengthMismatch { points: usize, weights: usize },
    #[error("a design needs at least one support point")]
    Empty,
    #[error("non-finite value {0}")]
    NotFinite(f64),
    #[error("duplicate support point {0}")]
    DuplicatePoint(f64),
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("no strictly positive weight to normalize")]
    AllZero,
    #[error("pruning at threshold {0} would remove every support point")]
    AllPruned(f64),
    #[error("prune threshold {0} must lie in [0, 1)")]
    BadThreshold(f64),
    #[error("mixing weight {0} must lie in [0, 1]")]
    BadMixWeight(f64),
    #[error("tolerance {0} must be non-negative and finite")]
    BadTolerance(f64),
}

/// A compact interval `[lower, upper]` of admissible experimental conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    pub lower: f64,
    pub upper: f64,
}

impl DesignSpace {
    pub fn new(lower: f64, upper: f64) -> Result<Self, DesignError> {
        if !lower.is_finite() || !upper.is_finite() || lower >= upper {
            return Err(DesignError::EmptySpace { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        x.is_finite() && x >= self.lower && x <= self.upper
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    /// Uniform grid of `n >= 2` points including both endpoints.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 2, "a grid needs at least two points");
        let step = self.range() / (n - 1) as f64;
        let mut xs: Vec<f64> = (0..n).map(|i| self.lower + step * i as f64).collect();
        // Guard against rounding drift at the right endpoint.
        xs[n - 1] = self.upper;
        xs
    }
}

/// Raw mirror of the serialized form; validated on conversion.
#[derive(Deserialize)]
struct RawDesign {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawDesign> for Design {
    type Error = DesignError;
    fn try_from(raw: RawDesign) -> Result<Self, DesignError> {
        Design::new(raw.points, raw.weights)
    }
}

/// An approximate design: support points with normalized weights.
///
/// Serializes to JSON as `{"points": [...], "weights": [...]}`; loading runs
/// the same validation as [`Design::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDesign")]
pub struct Design {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Design {
    /// Builds a design from point/weight lists.
    ///
    /// Points are sorted (weights carried along); exact duplicates are
    /// rejected. Weights must be non-negative and sum to one within a small
    /// slack; the stored weights are renormalized to machine precision.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self, DesignError> {
        if points.len() != weights.len() {
            return Err(DesignError::LengthMismatch {
                points: points.len(),
                weights: weights.len(),
            });
        }
        if points.is_empty() {
            return Err(DesignError::Empty);
        }
        for &x in &points {
            if !x.is_finite() {
                return Err(DesignError::NotFinite(x));
            }
        }
        for &w in &weights {
            if !w.is_finite() {
                return Err(DesignError::NotFinite(w));
            }
            if w < 0.0 {
                return Err(DesignError::NegativeWeight(w));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_SLACK {
            return Err(DesignError::WeightSum(sum));
        }
        let mut pairs: Vec<(f64, f64)> = points.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(DesignError::DuplicatePoint(w[0].0));
            }
        }
        let (points, mut weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self { points, weights })
    }

    /// Equal weights on the given points.
    pub fn uniform(points: Vec<f64>) -> Result<Self, DesignError> {
        let n = points.len();
        if n == 0 {
            return Err(DesignError::Empty);
        }
        let w = vec![1.0 / n as f64; n];
        Self::new(points, w)
    }

    /// A one-point design.
    pub fn dirac(x: f64) -> Result<Self, DesignError> {
        Self::new(vec![x], vec![1.0])
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support_size(&self) -> usize {
        self.points.len()
    }

    /// Same support, new weights (normalized by [`normalize_weights`]).
    pub fn with_weights(&self, raw: &[f64]) -> Result<Self, DesignError> {
        if raw.len() != self.points.len() {
            return Err(DesignError::LengthMismatch {
                points: self.points.len(),
                weights: raw.len(),
            });
        }
        let weights = normalize_weights(raw)?;
        Ok(Self {
            points: self.points.clone(),
            weights,
        })
    }

    /// Checks that every support point lies inside `space`.
    pub fn check_in_space(&self, space: &DesignSpace) -> Result<(), DesignError> {
        for &x in &self.points {
            if !space.contains(x) {
                return Err(DesignError::OutsideSpace {
                    point: x,
                    lower: space.lower,
                    upper: space.upper,
                });
            }
        }
        Ok(())
    }

    /// Removes support points with weight below `threshold` and renormalizes.
    pub fn prune_small_weights(&self, threshold: f64) -> Result<Self, DesignError> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(DesignError::BadThreshold(threshold));
        }
        let kept: Vec<(f64, f64)> = self
            .points
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w >= threshold)
            .map(|(&x, &w)| (x, w))
            .collect();
        if kept.is_empty() {
            return Err(DesignError::AllPruned(threshold));
        }
        let total: f64 = kept.iter().map(|&(_, w)| w).sum();
        let (points, weights) = kept.into_iter().map(|(x, w)| (x, w / total)).unzip();
        Ok(Self { points, weights })
    }

    /// Merges clusters of support points closer than `tol` into their
    /// weight-averaged location, summing the weights.
    ///
    /// Clustering is transitive: consecutive gaps below `tol` chain into one
    /// cluster, so `{0, 0.005, 0.010}` with `tol = 0.006` becomes a single
    /// point even though the outer pair is farther than `tol` apart.
    pub fn merge_close_points(&self, tol: f64) -> Result<Self, DesignError> {
        if !tol.is_finite() || tol < 0.0 {
            return Err(DesignError::BadTolerance(tol));
        }
        let mut points = Vec::with_capacity(self.points.len());
        let mut weights = Vec::with_capacity(self.points.len());
        let mut start = 0;
        while start < self.points.len() {
            let mut end = start + 1;
            while end < self.points.len() && self.points[end] - self.points[end - 1] < tol {
                end += 1;
            }
            let cluster_w: f64 = self.weights[start..end].iter().sum();
            let location = if cluster_w > 0.0 {
                self.points[start..end]
                    .iter()
                    .zip(&self.weights[start..end])
                    .map(|(x, w)| x * w)
                    .sum::<f64>()
                    / cluster_w
            } else {
                // Weightless cluster: fall back to the midpoint.
                self.points[start..end].iter().sum::<f64>() / (end - start) as f64
            };
            // The average lies in the cluster's hull mathematically; rounding
            // can push it an ulp past an endpoint, so clamp it back.
            let location = location.clamp(self.points[start], self.points[end - 1]);
            points.push(location);
            weights.push(cluster_w);
            start = end;
        }
        Ok(Self { points, weights })
    }

    /// Convex combination `(1 - alpha) * self + alpha * delta(x_new)`.
    ///
    /// If `x_new` matches an existing support point within `eq_tol` the mass
    /// is added there; otherwise a new point is inserted. Support points
    /// whose weight is scaled to exactly zero (only possible at `alpha = 1`)
    /// are dropped.
    pub fn mix(&self, x_new: f64, alpha: f64, eq_tol: f64) -> Result<Self, DesignError> {
        if !x_new.is_finite() {
            return Err(DesignError::NotFinite(x_new));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DesignError::BadMixWeight(alpha));
        }
        if !eq_tol.is_finite() || eq_tol < 0.0 {
            return Err(DesignError::BadTolerance(eq_tol));
        }
        let mut points = self.points.clone();
        let mut weights: Vec<f64> = self.weights.iter().map(|w| w * (1.0 - alpha)).collect();
        let hit = points
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x_new).abs().total_cmp(&(b.1 - x_new).abs()))
            .filter(|(_, &x)| (x - x_new).abs() <= eq_tol)
            .map(|(k, _)| k);
        match hit {
            Some(k) => weights[k] += alpha,
            None => {
                let pos = points.partition_point(|&x| x < x_new);
                points.insert(pos, x_new);
                weights.insert(pos, alpha);
            }
        }
        let kept: Vec<(f64, f64)> = points
            .into_iter()
            .zip(weights)
            .filter(|&(_, w)| w > 0.0)
            .collect();
        if kept.is_empty() {
            return Err(DesignError::AllZero);
        }
        let (points, weights) = kept.into_iter().unzip();
        Ok(Self { points, weights })
    }

    /// CSV rendering with an `x,weight` header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,weight\n");
        for (x, w) in self.points.iter().zip(&self.weights) {
            out.push_str(&format!("{x},{w}\n"));
        }
        out
    }
}

/// Scales a non-negative vector to sum to one.
///
/// Entries that are zero stay zero; tiny negative entries (e.g. roundoff from
/// a quadratic-programming step) are clamped to zero before scaling. Fails
/// with [`DesignError::AllZero`] when nothing positive remains.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>, DesignError> {
    for &w in raw {
        if !w.is_finite() {
            return Err(DesignError::NotFinite(w));
        }
    }
    let clamped: Vec<f64> = raw.iter().map(|&w| w.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum <= 0.0 {
        return Err(DesignError::AllZero);
    }
    Ok(clamped.into_iter().map(|w| w / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weight_sum(d: &Design) -> f64 {
        d.weights().iter().sum()
    }

    #[test]
    fn constructor_sorts_and_validates() {
        let d = Design::new(vec![5.0, 0.1, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(d.points(), &[0.1, 2.0, 5.0]);
        assert_eq!(d.weights(), &[0.5, 0.3, 0.2]);

        assert!(matches!(
            Design::new(vec![1.0, 1.0], vec![0.5, 0.5]),
            Err(DesignError::DuplicatePoint(_))
        ));
        assert!(matches!(
            Design::new(vec![1.0, 2.0], vec![0.7, 0.7]),
            Err(DesignError::WeightSum(_))
        ));
        assert!(matches!(
            Design::new(vec![1.0, 2.0], vec![-0.1, 1.1]),
            Err(DesignError::NegativeWeight(_))
        ));
    }

    #[test]
    fn normalize_keeps_zeros_and_rejects_all_zero() {
        let w = normalize_weights(&[2.0, 0.0, 6.0]).unwrap();
        assert_eq!(w, vec![0.25, 0.0, 0.75]);
        assert!(matches!(
            normalize_weights(&[0.0, 0.0]),
            Err(DesignError::AllZero)
        ));
        assert!(matches!(
            normalize_weights(&[0.0, -1.0]),
            Err(DesignError::AllZero)
        ));
    }

    #[test]
    fn prune_removes_tiny_weights_and_renormalizes() {
        let d = Design::new(vec![0.0, 1.0, 2.0], vec![0.5, 1e-6, 0.5 - 1e-6]).unwrap();
        // Machine-epsilon^(1/4) threshold drops only the middle point.
        let p = d.prune_small_weights(1.218e-4).unwrap();
        assert_eq!(p.support_size(), 2);
        assert_eq!(p.points(), &[0.0, 2.0]);
        assert!((weight_sum(&p) - 1.0).abs() < 1e-14);
        // Relative proportions preserved.
        assert!((p.weights()[0] / p.weights()[1] - 0.5 / (0.5 - 1e-6)).abs() < 1e-12);
        // Threshold zero is a no-op.
        assert_eq!(d.prune_small_weights(0.0).unwrap(), d);
        // (0.4, 0.6) at threshold 0.5 keeps only the heavier point.
        let d2 = Design::new(vec![1.0, 2.0], vec![0.4, 0.6]).unwrap();
        let p2 = d2.prune_small_weights(0.5).unwrap();
        assert_eq!(p2.points(), &[2.0]);
        assert_eq!(p2.weights(), &[1.0]);

        assert!(matches!(
            d.prune_small_weights(0.9),
            Err(DesignError::AllPruned(_))
        ));
    }

    #[test]
    fn merge_chains_transitively() {
        let d = Design::new(vec![0.0, 0.005, 0.010], vec![0.25, 0.5, 0.25]).unwrap();
        let m = d.merge_close_points(0.006).unwrap();
        assert_eq!(m.support_size(), 1);
        assert!((m.points()[0] - 0.005).abs() < 1e-15);
        assert!((m.weights()[0] - 1.0).abs() < 1e-15);

        // Gap exactly equal to tol does not merge.
        let d = Design::new(vec![0.0, 0.006], vec![0.5, 0.5]).unwrap();
        assert_eq!(d.merge_close_points(0.006).unwrap().support_size(), 2);
    }

    #[test]
    fn mix_adds_mass_or_inserts() {
        let d = Design::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();

        // Existing point: mass accumulates there.
        let m = d.mix(1.0, 0.5, 1e-10).unwrap();
        assert_eq!(m.points(), &[0.0, 1.0]);
        assert_eq!(m.weights(), &[0.25, 0.75]);

        // New point: inserted in sorted position.
        let m = d.mix(0.5, 0.2, 1e-10).unwrap();
        assert_eq!(m.points(), &[0.0, 0.5, 1.0]);
        assert!((m.weights()[1] - 0.2).abs() < 1e-15);
        assert!((weight_sum(&m) - 1.0).abs() < 1e-15);

        // alpha = 1 collapses to a one-point design.
        let m = d.mix(0.5, 1.0, 1e-10).unwrap();
        assert_eq!(m.points(), &[0.5]);
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn json_round_trip_validates() {
        let d = Design::new(vec![0.1, 2.5], vec![0.4, 0.6]).unwrap();
        let js = serde_json::to_string(&d).unwrap();
        assert!(js.contains("\"points\""));
        assert!(js.contains("\"weights\""));
        let back: Design = serde_json::from_str(&js).unwrap();
        assert_eq!(back, d);

        let bad: Result<Design, _> =
            serde_json::from_str(r#"{"points":[1.0,2.0],"weights":[0.7,0.7]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn space_grid_hits_endpoints() {
        let s = DesignSpace::new(0.1, 5.0).unwrap();
        let g = s.grid(7);
        assert_eq!(g.len(), 7);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[6], 5.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(DesignSpace::new(2.0, 2.0).is_err());
    }
}
