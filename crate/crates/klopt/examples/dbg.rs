//! Scratch runner: `cargo run --release --example dbg -- <scenario> [qp|grad|af]`

use klopt::algorithms::{af_algorithm, new_algorithm, WeightMethod};
use klopt::scenario::load_bundled;
use klopt::verify::certify;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("example2_case1");
    let methods: Vec<&str> = if args.len() > 2 {
        args[2..].iter().map(String::as_str).collect()
    } else {
        vec!["qp"]
    };
    let s = load_bundled(name).unwrap();
    let built = s.build().unwrap();
    println!(
        "{name}: {} models, {} entries, start {} pts",
        built.table.models().len(),
        built.table.entries().len(),
        built.start.support_size()
    );
    for rb in &built.rival_boxes {
        println!("  box {} defaulted={} {:?}", rb.model, rb.defaulted, rb.bounds);
    }
    for m in methods {
        let mut cfg = s.algo.clone();
        let t0 = std::time::Instant::now();
        let out = match m {
            "af" => af_algorithm(&built.table, &built.start, &built.space, &cfg).unwrap(),
            "grad" => {
                cfg.weight_method = WeightMethod::Grad;
                new_algorithm(&built.table, &built.start, &built.space, &cfg).unwrap()
            }
            _ => {
                cfg.weight_method = WeightMethod::Qp;
                new_algorithm(&built.table, &built.start, &built.space, &cfg).unwrap()
            }
        };
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{m}: status {:?} iters {} crit {:.8e} eff {:.6} [{secs:.2}s]",
            out.status, out.iterations, out.criterion, out.efficiency_bound
        );
        println!("  points  {:?}", out.design.points());
        println!("  weights {:?}", out.design.weights());
        let rep = certify(&out.design, &built.space, &built.table, 2000, 2e-3).unwrap();
        println!("  certify: {:?} gap_rel {:.3e}", rep.verdict, rep.max_gap_rel);
        if std::env::var("DBG_TRACE").is_ok() {
            for t in &out.trace {
                println!(
                    "    it {:3} crit {:.6e} n {} gap {:.3e} [{:.2}s]",
                    t.iteration, t.criterion, t.support_size, t.psi_gap, t.seconds
                );
            }
        }
    }
}
