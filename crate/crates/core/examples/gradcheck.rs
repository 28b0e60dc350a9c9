//! Finite-difference check of every operator and of the full model.

use demc::verify::grad_suite;

fn main() {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let reports = grad_suite(seed, None).expect("gradient suite");
    for r in &reports {
        println!("{:18} {:.3e}  {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
    }
}
