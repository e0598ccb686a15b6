//! Optimality certification and efficiency reporting.
//!
//! The equivalence theorem for the KL criterion states that a design ξ* is
//! optimal if and only if `Ψ(x, ξ*) ≤ KL_P(ξ*)` on the whole design space,
//! with equality at every support point. [`certify`] checks both halves
//! numerically — a dense grid plus golden-refined maxima for the global
//! inequality, exact evaluations for the support equalities — and reports
//! where the inequality is tight so failed certifications point directly at
//! missing support points. [`efficiency_matrix`] compares designs across
//! criteria and [`export_psi_trace`] dumps Ψ as CSV for plotting.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::algorithms::{find_local_maxima, AlgoConfig};
use crate::criterion::{
    kl_criterion_warm, psi, ComparisonTable, CriterionError, CriterionValue, InnerOpts,
};
use crate::design::{Design, DesignError, DesignSpace};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("writing trace file: {0}")]
    Io(#[from] std::io::Error),
    #[error("design has criterion value {0:.3e}; nothing to certify — every rival fits it exactly")]
    DegenerateDesign(f64),
    #[error("invalid certification input: {0}")]
    BadInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    NotCertified,
}

/// Numerical equivalence-theorem check for one design.
#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    /// KL_P(ξ), recomputed with full multistarts.
    pub kl_value: f64,
    /// max over the space of Ψ(x, ξ) (grid + refined maxima + support).
    pub max_psi: f64,
    /// (max_psi − kl_value)/kl_value — the relative equivalence gap.
    pub max_gap_rel: f64,
    /// Points where Ψ comes within 1e-6 of its maximum; for a failed
    /// certification these are the support points the design is missing.
    pub gap_locations: Vec<f64>,
    /// Per positive-weight support point: |Ψ(x_k) − KL_P|/KL_P.
    pub support_equality_residuals: Vec<f64>,
    pub verdict: Verdict,
    /// Echo of the inputs that produced the report.
    pub grid_size: usize,
    pub tol_rel: f64,
}

/// Check the equivalence theorem on a `grid_size`-point grid with
/// golden-section refinement of every local maximum of Ψ. The design is
/// certified when the relative gap and every support-equality residual stay
/// within `tol_rel`.
pub fn certify(
    design: &Design,
    space: &DesignSpace,
    table: &ComparisonTable,
    grid_size: usize,
    tol_rel: f64,
) -> Result<CertificationReport, VerifyError> {
    if grid_size < 2 {
        return Err(VerifyError::BadInput("grid_size must be at least 2".into()));
    }
    if !(tol_rel > 0.0) || !tol_rel.is_finite() {
        return Err(VerifyError::BadInput(
            "tol_rel must be a positive finite number".into(),
        ));
    }
    design.check_in_space(space)?;
    let cv = kl_criterion_warm(design, table, None, &InnerOpts::default())?;
    if cv.total <= 1e-12 {
        return Err(VerifyError::DegenerateDesign(cv.total));
    }
    Ok(report_from(design, space, table, &cv, grid_size, tol_rel))
}

/// The report-building half of [`certify`], reusing an already computed
/// criterion evaluation.
fn report_from(
    design: &Design,
    space: &DesignSpace,
    table: &ComparisonTable,
    cv: &CriterionValue,
    grid_size: usize,
    tol_rel: f64,
) -> CertificationReport {
    let f = |x: f64| psi(x, table, cv).unwrap_or(f64::NEG_INFINITY);
    let cfg = AlgoConfig {
        grid_size,
        ..AlgoConfig::default()
    };
    // Candidate peak set: refined local maxima, the raw grid, the support.
    let maxima = find_local_maxima(&f, space, &cfg);
    let mut peaks: Vec<(f64, f64)> = maxima.iter().map(|&x| (x, f(x))).collect();
    let mut max_psi = f64::NEG_INFINITY;
    for &x in space.grid(grid_size).iter() {
        max_psi = max_psi.max(f(x));
    }
    for (x, w) in design.points().iter().zip(design.weights()) {
        if *w > 0.0 {
            peaks.push((*x, f(*x)));
        }
    }
    for &(_, v) in &peaks {
        max_psi = max_psi.max(v);
    }

    let gap_window = 1e-6 * (1.0 + max_psi.abs());
    let mut gap_locations: Vec<f64> = peaks
        .iter()
        .filter(|&&(_, v)| v >= max_psi - gap_window)
        .map(|&(x, _)| x)
        .collect();
    gap_locations.sort_by(f64::total_cmp);
    gap_locations.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * space.range());

    let support_equality_residuals: Vec<f64> = design
        .points()
        .iter()
        .zip(design.weights())
        .filter(|&(_, w)| *w > 0.0)
        .map(|(&x, _)| (f(x) - cv.total).abs() / cv.total)
        .collect();

    let max_gap_rel = (max_psi - cv.total) / cv.total;
    let verdict = if max_gap_rel <= tol_rel
        && support_equality_residuals.iter().all(|&r| r <= tol_rel)
    {
        Verdict::Certified
    } else {
        Verdict::NotCertified
    };
    CertificationReport {
        kl_value: cv.total,
        max_psi,
        max_gap_rel,
        gap_locations,
        support_equality_residuals,
        verdict,
        grid_size,
        tol_rel,
    }
}

/// Cross-efficiency table: entry `(i, j)` is the efficiency of design `i`
/// under criterion `j`, `KL_P^{(j)}(ξ_i) / KL_P^{(j)}(ξ_j)` — how much of
/// criterion `j`'s best-known value design `i` retains. The diagonal is 1 by
/// construction. `designs` and `tables` must have equal length, design `j`
/// being the best known for table `j`.
pub fn efficiency_matrix(
    designs: &[Design],
    tables: &[ComparisonTable],
) -> Result<Vec<Vec<f64>>, VerifyError> {
    if designs.len() != tables.len() {
        return Err(VerifyError::BadInput(format!(
            "{} designs vs {} criteria; the matrix needs one best-known design per criterion",
            designs.len(),
            tables.len()
        )));
    }
    let opts = InnerOpts::default();
    let mut denom = Vec::with_capacity(tables.len());
    for (j, table) in tables.iter().enumerate() {
        let v = kl_criterion_warm(&designs[j], table, None, &opts)?.total;
        if v <= 1e-12 {
            return Err(VerifyError::DegenerateDesign(v));
        }
        denom.push(v);
    }
    let mut matrix = vec![vec![0.0; tables.len()]; designs.len()];
    for (i, design) in designs.iter().enumerate() {
        for (j, table) in tables.iter().enumerate() {
            matrix[i][j] = if i == j {
                1.0
            } else {
                kl_criterion_warm(design, table, None, &opts)?.total / denom[j]
            };
        }
    }
    Ok(matrix)
}

/// Write `x,psi,kl_p` CSV rows for the grid plus every support point —
/// enough to replot the equivalence-theorem picture in any tool. Rows are
/// sorted by `x`; the row count is exactly `grid_size` + support size.
pub fn export_psi_trace(
    design: &Design,
    space: &DesignSpace,
    table: &ComparisonTable,
    grid_size: usize,
    path: &Path,
) -> Result<(), VerifyError> {
    if grid_size < 2 {
        return Err(VerifyError::BadInput("grid_size must be at least 2".into()));
    }
    design.check_in_space(space)?;
    let cv = kl_criterion_warm(design, table, None, &InnerOpts::default())?;
    let mut xs: Vec<f64> = space.grid(grid_size);
    xs.extend_from_slice(design.points());
    xs.sort_by(f64::total_cmp);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,psi,kl_p")?;
    for x in xs {
        let v = psi(x, table, &cv).unwrap_or(f64::NAN);
        writeln!(out, "{x:.17e},{v:.17e},{:.17e}", cv.total)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{default_start, new_algorithm};
    use crate::criterion::Comparison;
    use crate::models::{Family, MeanFunction, ModelSpec, VarianceModel};
    use crate::qp::qp_weight_step;

    fn mm_toy() -> (ComparisonTable, DesignSpace) {
        let truth = ModelSpec::new(
            "mm-linear",
            Family::NormalHetero,
            MeanFunction::MmPlusLinear,
            VarianceModel::ConstV(1.0),
            None,
        )
        .unwrap();
        let rival = ModelSpec::new(
            "mm",
            Family::NormalHetero,
            MeanFunction::Mm,
            VarianceModel::ConstV(1.0),
            Some(vec![(0.01, 100.0), (0.01, 100.0)]),
        )
        .unwrap();
        let table = ComparisonTable::new(
            vec![truth, rival],
            vec![Comparison {
                true_index: 0,
                rival_index: 1,
                weight: 1.0,
                theta_true: vec![1.0, 1.0, 1.0],
            }],
        )
        .unwrap();
        (table, DesignSpace::new(0.1, 5.0).unwrap())
    }

    fn solved_toy() -> (ComparisonTable, DesignSpace, Design) {
        let (table, space) = mm_toy();
        let start = default_start(&space, &table, 4).unwrap();
        let cfg = AlgoConfig {
            grid_size: 300,
            ..AlgoConfig::default()
        };
        let out = new_algorithm(&table, &start, &space, &cfg).unwrap();
        (table, space, out.design)
    }

    #[test]
    fn optimal_design_is_certified() {
        let (table, space, design) = solved_toy();
        let report = certify(&design, &space, &table, 500, 2e-3).unwrap();
        assert_eq!(report.verdict, Verdict::Certified);
        assert!(report.max_gap_rel <= 2e-3, "gap {}", report.max_gap_rel);
        assert!(report
            .support_equality_residuals
            .iter()
            .all(|&r| r <= 2e-3));
        // The weighted support average of Ψ reproduces the criterion.
        let cv = kl_criterion_warm(&design, &table, None, &InnerOpts::default()).unwrap();
        let avg: f64 = design
            .points()
            .iter()
            .zip(design.weights())
            .map(|(&x, &w)| w * psi(x, &table, &cv).unwrap())
            .sum();
        assert!((avg - cv.total).abs() <= 1e-10 * (1.0 + cv.total));
        // Verdict stable under grid doubling.
        let doubled = certify(&design, &space, &table, 1000, 2e-3).unwrap();
        assert_eq!(doubled.verdict, Verdict::Certified);
    }

    #[test]
    fn missing_support_point_fails_certification_at_its_location() {
        let (table, space, design) = solved_toy();
        // Replace the right-most support point with an off-optimal interior
        // point and re-optimize the weights. (Outright deletion would let
        // the 2-parameter rival interpolate the remaining 2 points and the
        // criterion would collapse to zero.)
        let n = design.support_size();
        assert!(n >= 3);
        let mut points = design.points()[..n - 1].to_vec();
        let dropped = *design.points().last().unwrap();
        let filler = 0.5 * (points[n - 2] + dropped) - 0.7;
        points.push(filler);
        points.sort_by(f64::total_cmp);
        let crippled = Design::uniform(points).unwrap();
        let cv = kl_criterion_warm(&crippled, &table, None, &InnerOpts::default()).unwrap();
        let (crippled, _) =
            qp_weight_step(&crippled, &table, &cv, 8, &InnerOpts::default()).unwrap();
        let report = certify(&crippled, &space, &table, 500, 2e-3).unwrap();
        assert_eq!(report.verdict, Verdict::NotCertified);
        assert!(!report.gap_locations.is_empty());
        let nearest = report
            .gap_locations
            .iter()
            .map(|&x| (x - dropped).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(
            nearest <= 0.5,
            "expected a gap near the dropped point {dropped}, locations {:?}",
            report.gap_locations
        );
    }

    #[test]
    fn degenerate_design_is_rejected() {
        let (table, space) = mm_toy();
        let one_point = Design::dirac(1.0).unwrap();
        match certify(&one_point, &space, &table, 100, 2e-3) {
            Err(VerifyError::DegenerateDesign(v)) => assert!(v <= 1e-12),
            other => panic!("expected DegenerateDesign, got {other:?}"),
        }
    }

    #[test]
    fn efficiency_matrix_diagonal_is_exactly_one() {
        // Two different criteria from the same toy: equal weights vs a
        // comparison weighted toward nothing else (weight 1 either way, but
        // different true parameter values).
        let (table_a, space) = mm_toy();
        let truth = ModelSpec::new(
            "mm-linear",
            Family::NormalHetero,
            MeanFunction::MmPlusLinear,
            VarianceModel::ConstV(1.0),
            None,
        )
        .unwrap();
        let rival = ModelSpec::new(
            "mm",
            Family::NormalHetero,
            MeanFunction::Mm,
            VarianceModel::ConstV(1.0),
            Some(vec![(0.01, 100.0), (0.01, 100.0)]),
        )
        .unwrap();
        let table_b = ComparisonTable::new(
            vec![truth, rival],
            vec![Comparison {
                true_index: 0,
                rival_index: 1,
                weight: 1.0,
                theta_true: vec![1.0, 1.5, 0.5],
            }],
        )
        .unwrap();
        let cfg = AlgoConfig {
            grid_size: 300,
            ..AlgoConfig::default()
        };
        let d_a = new_algorithm(
            &table_a,
            &default_start(&space, &table_a, 4).unwrap(),
            &space,
            &cfg,
        )
        .unwrap()
        .design;
        let d_b = new_algorithm(
            &table_b,
            &default_start(&space, &table_b, 4).unwrap(),
            &space,
            &cfg,
        )
        .unwrap()
        .design;
        let m = efficiency_matrix(&[d_a, d_b], &[table_a, table_b]).unwrap();
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[1][1], 1.0);
        for row in &m {
            for &v in row {
                assert!(v > 0.0 && v <= 1.0 + 2e-3, "entry {v}");
            }
        }
    }

    #[test]
    fn psi_trace_file_shape_and_bound() {
        let (table, space, design) = solved_toy();
        let dir = std::env::temp_dir().join("klopt-verify-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("psi.csv");
        export_psi_trace(&design, &space, &table, 200, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "x,psi,kl_p");
        assert_eq!(rows.len(), 1 + 200 + design.support_size());
        let mut kl_col = None;
        for row in &rows[1..] {
            let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cells.len(), 3);
            // Certified design: Ψ below the criterion line everywhere.
            assert!(cells[1] <= cells[2] * (1.0 + 2e-3));
            match kl_col {
                None => kl_col = Some(cells[2]),
                Some(k) => assert_eq!(k, cells[2]),
            }
        }
        let _ = kl_col;
        std::fs::remove_file(&path).ok();
    }
}
