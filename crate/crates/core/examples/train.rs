//! Trains a reduced-width DEMC on a manifest and writes a checkpoint plus its
//! loss log.
//!
//! cargo run --release --example gen_data -- data/synthetic 8
//! cargo run --release --example train -- data/synthetic/manifest.txt runs/demc.ckpt 2000

use std::path::PathBuf;

use demc::net::{ModelSpec, Variant};
use demc::train::{load_split, TrainConfig, Trainer};

fn main() {
    let mut args = std::env::args().skip(1);
    let manifest = PathBuf::from(args.next().unwrap_or_else(|| "data/synthetic/manifest.txt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/demc.ckpt".into()));
    let iters: u64 = args.next().map_or(2000, |s| s.parse().expect("iterations"));

    let config = TrainConfig {
        total_iterations: iters,
        batch_size: 2,
        patch_size: 64,
        patch_stride: 32,
        validate_every: 100,
        checkpoint_every: 100,
        ..TrainConfig::default()
    };
    let (train, val) = load_split(&manifest, &config).expect("dataset");
    println!("{} training patches, {} validation patches", train.len(), val.as_ref().map_or(0, |v| v.len()));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).expect("output dir");
    }
    let spec = ModelSpec::scaled(Variant::Demc, 0.25, 0);
    let mut trainer = Trainer::new(spec, train, val, config).expect("trainer");
    let log = trainer.run(Some(&out)).expect("training");
    for r in log.iter().filter(|r| r.val_loss.is_some()) {
        println!("iter {:5}  lr {:.2e}  train {:.4}  val {:.4}", r.iteration, r.lr, r.train_loss, r.val_loss.unwrap());
    }
    trainer.write_log(out.with_extension("loss.csv")).expect("log");
}
