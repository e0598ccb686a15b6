//! Scratch probe: evaluate a tabulated design under a bundled scenario.
//! Usage: probe <scenario> x1 .. xn w1 .. wn

use klopt::criterion::{kl_criterion_warm, InnerOpts};
use klopt::design::Design;
use klopt::scenario::load_bundled;
use klopt::verify::certify;

fn main() {
    let mut args = std::env::args().skip(1);
    let name = args.next().expect("scenario name");
    let nums: Vec<f64> = args.map(|a| a.parse().expect("number")).collect();
    assert!(nums.len() % 2 == 0 && !nums.is_empty());
    let n = nums.len() / 2;
    let (pts, wts) = nums.split_at(n);

    let s = load_bundled(&name).unwrap();
    let built = s.build().unwrap();
    let design = Design::new(pts.to_vec(), wts.to_vec()).unwrap();
    let cv = kl_criterion_warm(&design, &built.table, None, &InnerOpts::default()).unwrap();
    println!("criterion {:.8e}", cv.total);
    let rep = certify(&design, &built.space, &built.table, 2000, 2e-3).unwrap();
    println!(
        "certify: {:?} max_psi {:.8e} gap_rel {:.3e}",
        rep.verdict, rep.max_psi, rep.max_gap_rel
    );
    println!("gap locations: {:?}", rep.gap_locations);
    println!("support residuals: {:?}", rep.support_equality_residuals);
}
