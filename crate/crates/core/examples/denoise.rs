//! Denoises one sample directory with a checkpoint.
//!
//! cargo run --release --example denoise -- runs/demc.ckpt data/synthetic/scene_0000 denoised.pfm

use demc::data::{load_sample, write_pfm, PfmImage};
use demc::metrics::{denoise, relmse_metric, ssim_hdr};
use demc::train::{load_checkpoint, LOSS_EPS};

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "runs/demc.ckpt".into());
    let input = args.next().unwrap_or_else(|| "data/synthetic/scene_0000".into());
    let out = args.next().unwrap_or_else(|| "denoised.pfm".into());

    let ckpt = load_checkpoint(&ckpt).expect("checkpoint");
    let spec = ckpt.infer_spec().expect("spec");
    let model = ckpt.model(&spec).expect("model");
    let sample = load_sample(&input).expect("sample");
    let result = denoise(&model, &sample).expect("denoise");
    write_pfm(&out, &PfmImage::from_tensor(&result).unwrap()).expect("write");
    println!("{} model, {}x{} -> {out}", spec.variant, sample.height(), sample.width());
    if let Some(reference) = &sample.reference {
        for (name, img) in [("noisy", &sample.noisy), ("denoised", &result)] {
            let rel = relmse_metric(img, reference, LOSS_EPS).unwrap();
            let ssim = ssim_hdr(img, reference).unwrap();
            println!("{name:9} RelMSE {rel:.5}  SSIM {ssim:.4}");
        }
    }
}
