//! Per-scene RelMSE/SSIM table for a checkpoint against the noisy input.
//!
//! cargo run --release --example evaluate -- data/synthetic/manifest.txt runs/demc.ckpt

use demc::data::{load_sample, read_manifest};
use demc::metrics::{evaluate, evaluate_noisy, report_table};
use demc::train::load_checkpoint;

fn main() {
    let mut args = std::env::args().skip(1);
    let manifest = args.next().unwrap_or_else(|| "data/synthetic/manifest.txt".into());
    let ckpt = args.next().unwrap_or_else(|| "runs/demc.ckpt".into());

    let samples: Vec<_> = read_manifest(&manifest)
        .expect("manifest")
        .into_iter()
        .map(|dir| (dir.file_name().unwrap().to_string_lossy().into_owned(), load_sample(&dir).expect("sample")))
        .collect();
    let ckpt = load_checkpoint(&ckpt).expect("checkpoint");
    let model = ckpt.model(&ckpt.infer_spec().expect("spec")).expect("model");
    let noisy = evaluate_noisy(&samples).expect("noisy");
    let denoised = evaluate(&model, &samples, model.variant().label()).expect("evaluate");
    print!("{}", report_table(&[noisy, denoised]));
}
