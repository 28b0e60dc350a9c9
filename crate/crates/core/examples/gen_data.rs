//! Renders a small synthetic dataset.
//!
//! cargo run --release --example gen_data -- [out_dir] [scenes]

use demc::synth::{generate_dataset, DatasetConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "data/synthetic".into());
    let scenes: usize = args.next().map_or(8, |s| s.parse().expect("scene count"));
    let cfg = DatasetConfig::default();
    let manifest = generate_dataset(&out, scenes, 42, cfg).expect("generate");
    println!("generated {scenes} samples -> {}", manifest.display());
}
