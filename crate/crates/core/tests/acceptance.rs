//! Acceptance criteria. Runs sequentially (timed criteria need the whole
//! machine) and prints one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use demc::data::{decode_pfm, encode_pfm, gamma_forward, gamma_inverse, regular_anchor_count, PfmImage};
use demc::experiment::{summary_table, Protocol, RunResult};
use demc::metrics::relmse_metric;
use demc::net::{Mode, Model, ModelSpec, Variant};
use demc::synth::{generate_scene, SceneRecipe};
use demc::tensor::{Graph, Shape, Tensor};
use demc::train::{
    decode_checkpoint, encode_checkpoint, mean_patch_loss, Checkpoint, LogRecord, TrainConfig, TrainSet, Trainer,
    LOSS_EPS,
};
use demc::verify::grad_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = match grad_suite(0, None) {
        Ok(r) => r,
        Err(e) => return outcome("gradient suite", false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let names: BTreeSet<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e} > {:.0e}", r.name, r.max_rel_error, r.threshold))
        .collect();
    let worst_op = reports[..reports.len() - 1].iter().fold(0.0f64, |m, r| m.max(r.max_rel_error));
    let e2e = reports.last().map_or(f64::NAN, |r| r.max_rel_error);
    let pass = failed.is_empty() && names.len() == reports.len() && elapsed < Duration::from_secs(120);
    outcome(
        "gradient suite",
        pass,
        format!(
            "{} checks, worst op {worst_op:.2e} (<= 1e-4), end-to-end {e2e:.2e} (<= 1e-3), {:.1}s (< 120s){}",
            reports.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn shape_law() -> Outcome {
    let model = Model::<f32>::new(ModelSpec::new(Variant::Demc, 0)).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let c = g.input(random_tensor(&mut rng, Shape::new(1, 3, 128, 128), 0.0, 1.0));
    let f = g.input(random_tensor(&mut rng, Shape::new(1, 12, 128, 128), -1.0, 1.0));
    let fw = model.forward(&mut g, c, f, Mode::Infer).expect("forward");
    let (latent, output) = (g.shape(fw.latent), g.shape(fw.output));
    outcome(
        "shape law",
        latent == Shape::new(1, 512, 4, 4) && output == Shape::new(1, 3, 128, 128),
        format!("latent {latent}, output {output}"),
    )
}

fn skip_init_identity() -> Outcome {
    let model = Model::<f32>::new(ModelSpec::new(Variant::Demc, 0)).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut checked = 0;
    for k in 1..=5 {
        let name = format!("dec.skip{k}");
        let channels = model.store().param(&format!("{name}.w")).expect("skip weight").shape().n;
        let shape = Shape::new(2, channels, 8, 8);
        let [d, ef, eh] = [0, 1, 2].map(|_| random_tensor(&mut rng, shape, -2.0, 2.0));
        let mut g = Graph::new();
        let ins = [g.input(d.clone()), g.input(ef.clone()), g.input(eh.clone())];
        let y = model.skip_fuse(&mut g, &name, &ins).expect("skip fuse");
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let want = (d.data()[i] + ef.data()[i] + eh.data()[i]).max(0.0);
            mismatches += usize::from(v.to_bits() != want.to_bits());
            checked += 1;
        }
    }
    outcome(
        "skip-init identity",
        mismatches == 0,
        format!("{checked} values over 5 fusions, {mismatches} differ from relu(h_D + h_Ef + h_Eh)"),
    )
}

fn gamma_and_relmse_units() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hdr = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_| 10f32.powf(rng.random_range(-3.0..2.0)));
    let back = gamma_inverse(&gamma_forward(&hdr).expect("forward")).expect("inverse");
    let worst = hdr
        .data()
        .iter()
        .zip(back.data())
        .fold(0.0f64, |m, (&a, &b)| m.max(((a - b) / a).abs() as f64));
    let reference = Tensor::full(Shape::new(1, 3, 1, 1), 1.0f32);
    let pred = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.9f32, 1.0, 1.0]).expect("pred");
    let relmse = relmse_metric(&pred, &reference, LOSS_EPS).expect("relmse");
    let expected = 0.01 / 1.001;
    let pass = worst <= 1e-6 && (relmse - expected).abs() <= 1e-6;
    outcome(
        "gamma and RelMSE unit values",
        pass,
        format!("gamma round trip {worst:.2e} (<= 1e-6); single-pixel RelMSE {relmse:.6} vs {expected:.6}"),
    )
}

fn patch_arithmetic() -> Outcome {
    let count = |h: usize, w: usize| regular_anchor_count(h, 128, 80) * regular_anchor_count(w, 128, 80);
    let got = [count(128, 128), count(128, 208), count(720, 1280)];
    outcome(
        "patch arithmetic",
        got == [1, 2, 120],
        format!("128x128 -> {}, 208x128 -> {}, 1280x720 -> {}", got[0], got[1], got[2]),
    )
}

fn overfit() -> Outcome {
    let samples: Vec<_> = (0..8u64)
        .map(|i| (format!("s{i}"), generate_scene(&SceneRecipe::from_seed(100 + i, 64, 64)).expect("scene")))
        .collect();
    let set = TrainSet::from_samples(&samples, 64, 64).expect("patches");
    let config = TrainConfig {
        total_iterations: 2000,
        batch_size: 1,
        patch_size: 64,
        patch_stride: 64,
        deterministic: true,
        checkpoint_every: 0,
        validate_every: 0,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ModelSpec::new(Variant::Demc, 1), set.clone(), None, config).expect("trainer");
    let initial = mean_patch_loss(trainer.model(), &set, Mode::Train, LOSS_EPS).expect("loss");
    let start = Instant::now();
    for _ in 0..2000 {
        if let Err(e) = trainer.step() {
            return outcome("overfit convergence", false, e.to_string());
        }
    }
    let elapsed = start.elapsed();
    let last = mean_patch_loss(trainer.model(), &set, Mode::Train, LOSS_EPS).expect("loss");
    let ratio = last / initial;
    outcome(
        "overfit convergence",
        set.len() == 8 && ratio < 0.1 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{} patches, loss {initial:.4} -> {last:.4} ({:.1}% of initial, < 10%), {:.1} min (< 15)",
            set.len(),
            100.0 * ratio,
            minutes(elapsed)
        ),
    )
}

fn end_to_end_and_ablation() -> [Outcome; 2] {
    let protocol = Protocol::default();
    let scenes = protocol.scenes().expect("scenes");
    let noisy = protocol.noisy_baseline(&scenes).expect("noisy baseline");
    let mut runs: Vec<RunResult> = Vec::new();
    let mut errors = Vec::new();
    for variant in Variant::ALL {
        match protocol.run(variant, &scenes, |_, _| {}) {
            Ok(r) => runs.push(r),
            Err(e) => errors.push(format!("{variant}: {e}")),
        }
    }

    let e2e = match runs.iter().find(|r| r.variant == Variant::Demc) {
        Some(r) => {
            let (rel, ssim) = (r.report.mean_relmse(), r.report.mean_ssim());
            let ratio = rel / noisy.mean_relmse();
            outcome(
                "end-to-end denoising",
                ratio <= 0.5 && ssim > noisy.mean_ssim() && r.elapsed <= Duration::from_secs(2 * 3600),
                format!(
                    "{} train / {} held-out scenes, {} iterations; RelMSE {rel:.4} vs noisy {:.4} (ratio {ratio:.3} <= 0.5); SSIM {ssim:.4} vs noisy {:.4}; {:.1} min (<= 120)",
                    scenes.train.len(),
                    scenes.test.len(),
                    protocol.iterations,
                    noisy.mean_relmse(),
                    noisy.mean_ssim(),
                    minutes(r.elapsed)
                ),
            )
        }
        None => outcome("end-to-end denoising", false, errors.join("; ")),
    };

    println!("{}", summary_table(&noisy, &runs).trim_end());
    let count = |v: Variant| runs.iter().find(|r| r.variant == v).map(|r| r.param_count);
    let ablation = match (count(Variant::Demc), count(Variant::Semc)) {
        (Some(d), Some(s)) if runs.len() == 3 => {
            let gap = (s as f64 - d as f64).abs() / d as f64;
            let mut order: Vec<&RunResult> = runs.iter().collect();
            order.sort_by(|a, b| a.report.mean_relmse().total_cmp(&b.report.mean_relmse()));
            let order: Vec<&str> = order.iter().map(|r| r.variant.label()).collect();
            outcome(
                "ablation table",
                gap <= 0.02,
                format!(
                    "3 variants trained; DEMC {d} vs SEMC {s} parameters ({:.3}% apart, <= 2%); RelMSE order {}",
                    100.0 * gap,
                    order.join(" < ")
                ),
            )
        }
        _ => outcome("ablation table", false, errors.join("; ")),
    };
    [e2e, ablation]
}

fn random_pfm(rng: &mut ChaCha8Rng) -> PfmImage {
    let (w, h) = (rng.random_range(1..48), rng.random_range(1..48));
    let channels = if rng.random_bool(0.5) { 3 } else { 1 };
    let data = (0..w * h * channels)
        .map(|_| match rng.random_range(0..4) {
            0 => f32::from_bits(rng.random_range(1..0x0080_0000)),
            1 => rng.random_range(0.0..1.0),
            2 => rng.random_range(1.0..1e6),
            _ => -rng.random_range(0.0..10.0),
        })
        .collect();
    PfmImage::new(w, h, channels, data).expect("pfm")
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    for i in 0..rng.random_range(1..8) {
        let shape = if rng.random_bool(0.5) {
            Shape::new(1, rng.random_range(1..40), 1, 1)
        } else {
            Shape::new(rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4))
        };
        let t = Tensor::from_fn(shape, |_| f32::from_bits(rng.random::<u32>() & 0xfeff_ffff));
        tensors.insert(format!("t{i}.{}", rng.random::<u16>()), t);
    }
    Checkpoint { tensors }
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn log_bits(log: &[LogRecord]) -> Vec<(u64, u64, u64)> {
    log.iter().map(|r| (r.iteration, r.lr.to_bits(), r.train_loss.to_bits())).collect()
}

fn format_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pfm_ok = 0;
    let mut ckpt_ok = 0;
    for _ in 0..100 {
        let img = random_pfm(&mut rng);
        let bytes = encode_pfm(&img);
        if let Ok(back) = decode_pfm(&bytes) {
            let same = (back.width, back.height, back.channels) == (img.width, img.height, img.channels)
                && same_bits(&back.data, &img.data)
                && encode_pfm(&back) == bytes;
            pfm_ok += usize::from(same);
        }
        let ckpt = random_checkpoint(&mut rng);
        if let Ok(bytes) = encode_checkpoint(&ckpt) {
            if let Ok(back) = decode_checkpoint(&bytes) {
                let same = back.tensors.len() == ckpt.tensors.len()
                    && back.tensors.iter().zip(&ckpt.tensors).all(|((ka, a), (kb, b))| {
                        ka == kb && a.shape() == b.shape() && same_bits(a.data(), b.data())
                    })
                    && encode_checkpoint(&back).ok().as_ref() == Some(&bytes);
                ckpt_ok += usize::from(same);
            }
        }
    }

    let samples: Vec<_> = (0..4u64)
        .map(|i| (format!("s{i}"), generate_scene(&SceneRecipe::from_seed(300 + i, 64, 64)).expect("scene")))
        .collect();
    let set = TrainSet::from_samples(&samples, 32, 32).expect("patches");
    let config = TrainConfig {
        total_iterations: 12,
        batch_size: 2,
        patch_size: 32,
        patch_stride: 32,
        deterministic: true,
        checkpoint_every: 0,
        validate_every: 0,
        seed: 21,
        ..TrainConfig::default()
    };
    let spec = ModelSpec::scaled(Variant::Demc, 0.25, 21);
    let mut full = Trainer::new(spec.clone(), set.clone(), None, config.clone()).expect("trainer");
    let straight: Vec<LogRecord> = (0..12).map(|_| full.step().expect("step")).collect();
    let mut first = Trainer::new(spec, set.clone(), None, config.clone()).expect("trainer");
    for _ in 0..5 {
        first.step().expect("step");
    }
    let bytes = encode_checkpoint(&first.checkpoint()).expect("encode");
    drop(first);
    let ckpt = decode_checkpoint(&bytes).expect("decode");
    let mut resumed = Trainer::resume(&ckpt, set, None, config).expect("resume");
    let tail: Vec<LogRecord> = (5..12).map(|_| resumed.step().expect("step")).collect();
    let resume_ok = log_bits(&tail) == log_bits(&straight[5..]);

    outcome(
        "format fidelity",
        pfm_ok == 100 && ckpt_ok == 100 && resume_ok,
        format!(
            "PFM {pfm_ok}/100 and checkpoint {ckpt_ok}/100 bit-exact; resume at iteration 5 {} the loss log",
            if resume_ok { "reproduces" } else { "does not reproduce" }
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut outcomes = vec![
        gradient_suite(),
        shape_law(),
        skip_init_identity(),
        gamma_and_relmse_units(),
        patch_arithmetic(),
        format_fidelity(),
        overfit(),
    ];
    outcomes.extend(end_to_end_and_ablation());

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {}/{} passed in {:.1} min",
        outcomes.len() - failed.len(),
        outcomes.len(),
        minutes(started.elapsed())
    );
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed: {} ({})", o.name, o.detail);
        }
        std::process::exit(1);
    }
}
