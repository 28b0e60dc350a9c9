//! DEMC, SEMC and DEMCnoSN trained under one protocol and scored on held-out
//! scenes.
//!
//! cargo run --release --example ablation -- [iterations] [width_scale]

use demc::experiment::{summary_table, Protocol};
use demc::net::Variant;

fn main() {
    let mut args = std::env::args().skip(1);
    let protocol = Protocol {
        iterations: args.next().map_or(1000, |s| s.parse().expect("iterations")),
        width_scale: args.next().map_or(0.5, |s| s.parse().expect("width scale")),
        ..Protocol::default()
    };
    let scenes = protocol.scenes().expect("scenes");
    let noisy = protocol.noisy_baseline(&scenes).expect("baseline");
    let mut runs = Vec::new();
    for variant in Variant::ALL {
        let every = (protocol.iterations / 5).max(1);
        let run = protocol
            .run(variant, &scenes, |it, loss| {
                if it % every == 0 {
                    println!("{variant} iter {it} loss {loss:.4}");
                }
            })
            .expect("run");
        runs.push(run);
    }
    print!("{}", summary_table(&noisy, &runs));
}
