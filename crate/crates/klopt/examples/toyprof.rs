//! Scratch: dissect one grad weight-loop call on the saturating toy.

use klopt::criterion::{kl_criterion_warm, psi, Comparison, ComparisonTable, InnerOpts};
use klopt::design::{Design, DesignSpace};
use klopt::grad::{line_search, weights_grad_loop, LineSearchMode};
use klopt::models::{Family, MeanFunction, ModelSpec, VarianceModel};

fn main() {
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
    let space = DesignSpace::new(0.1, 5.0).unwrap();
    let opts = InnerOpts::default();

    let design = Design::new(
        vec![0.1, 1.7333333333333336, 3.366666666666667, 5.0],
        vec![0.25; 4],
    )
    .unwrap();
    let cv = kl_criterion_warm(&design, &table, None, &opts).unwrap();
    println!("g = {:.9e}", cv.total);
    for &x in design.points() {
        println!("  v({x:.3}) = {:.6e}", psi(x, &table, &cv).unwrap());
    }
    // Global psi peak on a grid.
    let grid = space.grid(500);
    let peak = grid
        .iter()
        .map(|&x| (x, psi(x, &table, &cv).unwrap()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    println!("peak psi({:.4}) = {:.6e}", peak.0, peak.1);

    // Exactly the real extension: every local maximum from the same finder
    // the outer loop uses, inserted at weight zero.
    let cfg = klopt::algorithms::AlgoConfig {
        grid_size: 200,
        refine_tol: 1e-9,
        weight_method: klopt::algorithms::WeightMethod::Grad,
        ..klopt::algorithms::AlgoConfig::default()
    };
    let f = |x: f64| psi(x, &table, &cv).unwrap_or(f64::NEG_INFINITY);
    let maxima = klopt::algorithms::find_local_maxima(&f, &space, &cfg);
    println!("maxima: {maxima:?}");
    let mut pts = design.points().to_vec();
    let mut wts = design.weights().to_vec();
    for &x in &maxima {
        let p = pts.partition_point(|&q| q < x);
        if pts.iter().all(|&q| (q - x).abs() > 1e-12) {
            pts.insert(p, x);
            wts.insert(p, 0.0);
        }
    }
    let pos = pts
        .iter()
        .position(|&p| (p - peak.0).abs() < 5e-2)
        .unwrap();
    let ext = Design::new(pts, wts).unwrap();
    // Exactly like the outer loop: zero-weight insertion keeps the cached
    // evaluation valid, no re-evaluation happens.
    let cv_ext = cv.clone();
    println!("extended g = {:.9e}", cv_ext.total);
    for (i, &x) in ext.points().iter().enumerate() {
        println!("  v[{i}]({x:.3}) = {:.6e}", psi(x, &table, &cv_ext).unwrap());
    }

    // Worst positive-weight donor.
    let v: Vec<f64> = ext
        .points()
        .iter()
        .map(|&x| psi(x, &table, &cv_ext).unwrap())
        .collect();
    let k_down = (0..v.len())
        .filter(|&k| ext.weights()[k] > 0.0)
        .min_by(|&a, &b| v[a].total_cmp(&v[b]))
        .unwrap();
    println!("line_search k_up={pos} k_down={k_down} alpha_max={}", ext.weights()[k_down]);
    let (alpha, moved) = line_search(
        &ext,
        &table,
        &cv_ext,
        pos,
        k_down,
        ext.weights()[k_down],
        LineSearchMode::Linearized,
        &opts,
    )
    .unwrap();
    println!("alpha = {alpha:.6e}, moved: {}", moved.is_some());
    if let Some((d, c)) = moved {
        println!("  new g = {:.9e} weights {:?}", c.total, d.weights());
    }

    // Replay of the loop body, step by step.
    use klopt::criterion::StartPolicy;
    use klopt::grad::{exchange_step, GradientState};
    let probe_opts = InnerOpts {
        policy: StartPolicy::WarmOnly,
        ..opts
    };
    let mut state = GradientState::new(ext.clone(), &table, cv_ext.clone()).unwrap();
    let anchor_total = state.cv.total;
    for step in 1..=6 {
        let next = exchange_step(&state, &table, LineSearchMode::Linearized, &probe_opts).unwrap();
        let mv = next.last_move.clone().unwrap();
        println!(
            "step {step}: k_up {} k_down {} alpha {:.6e} claimed g {:.9e} gap {:.3e}",
            mv.k_up,
            mv.k_down,
            mv.alpha,
            next.cv.total,
            next.gap()
        );
        state = next;
        if mv.alpha == 0.0 {
            let full = kl_criterion_warm(&state.design, &table, Some(&state.cv), &opts).unwrap();
            println!(
                "  anchor check: full {:.9e} vs anchor {:.9e} -> {}",
                full.total,
                anchor_total,
                if full.total >= anchor_total { "accept" } else { "REVERT" }
            );
            break;
        }
    }
    println!("  weights {:?}", state.design.weights());

    // And the full loop for comparison.
    let out = weights_grad_loop(
        ext.clone(),
        &table,
        cv_ext.clone(),
        48,
        1e-6,
        LineSearchMode::Linearized,
        &opts,
    )
    .unwrap();
    println!(
        "loop: steps {} stalled {} gap {:.3e} g {:.9e}",
        out.steps, out.stalled, out.gap, out.cv.total
    );
    println!("  weights {:?}", out.design.weights());
}
