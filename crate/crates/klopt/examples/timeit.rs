//! Scratch: time the building blocks of one outer iteration on a scenario.

use std::time::Instant;

use klopt::criterion::{kl_criterion_warm, psi, InnerOpts, StartPolicy};
use klopt::design::Design;
use klopt::scenario::load_bundled;

fn main() {
    let name = std::env::args().nth(1).unwrap_or("example4_case1".into());
    let s = load_bundled(&name).unwrap();
    let built = s.build().unwrap();
    let opts = InnerOpts::default();
    let warm_opts = InnerOpts {
        policy: StartPolicy::WarmOnly,
        ..opts
    };
    // A mid-run-looking design: several points, uneven weights.
    let pts: Vec<f64> = (0..8)
        .map(|i| built.space.lower + built.space.range() * i as f64 / 7.0)
        .collect();
    let wts = vec![0.25, 0.05, 0.15, 0.05, 0.1, 0.05, 0.1, 0.25];
    let design = Design::new(pts, wts).unwrap();

    let t = Instant::now();
    let cv = kl_criterion_warm(&design, &built.table, None, &opts).unwrap();
    println!("cold full eval      {:8.1} ms (g {:.6e})", t.elapsed().as_secs_f64() * 1e3, cv.total);

    let t = Instant::now();
    let cv2 = kl_criterion_warm(&design, &built.table, Some(&cv), &opts).unwrap();
    println!("warm full eval      {:8.1} ms (g {:.6e})", t.elapsed().as_secs_f64() * 1e3, cv2.total);

    let t = Instant::now();
    let cv3 = kl_criterion_warm(&design, &built.table, Some(&cv), &warm_opts).unwrap();
    println!("warm-only eval      {:8.1} ms (g {:.6e})", t.elapsed().as_secs_f64() * 1e3, cv3.total);

    // Perturbed-weights warm-only eval (the line-search probe pattern).
    let mut w = design.weights().to_vec();
    w[0] -= 0.02;
    w[3] += 0.02;
    let cand = design.with_weights(&w).unwrap();
    let t = Instant::now();
    let cv4 = kl_criterion_warm(&cand, &built.table, Some(&cv), &warm_opts).unwrap();
    println!("warm-only probe     {:8.1} ms (g {:.6e})", t.elapsed().as_secs_f64() * 1e3, cv4.total);

    let t = Instant::now();
    let cv5 = kl_criterion_warm(&cand, &built.table, Some(&cv), &opts).unwrap();
    println!("warm full validate  {:8.1} ms (g {:.6e})", t.elapsed().as_secs_f64() * 1e3, cv5.total);

    let t = Instant::now();
    let grid = built.space.grid(1000);
    let mut m = f64::NEG_INFINITY;
    for &x in &grid {
        m = m.max(psi(x, &built.table, &cv).unwrap());
    }
    println!("psi scan (1000)     {:8.1} ms (max {:.6e})", t.elapsed().as_secs_f64() * 1e3, m);
}
