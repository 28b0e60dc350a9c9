use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use demc::data::{read_pfm, FEATURE_FILES, REFERENCE_FILE};

fn demc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demc")).args(args).output().expect("spawn demc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, scenes: &str, seed: &str, size: &str) -> PathBuf {
    let o = demc(&["gen-data", "--out", s(dir), "--scenes", scenes, "--seed", seed, "--size", size, "--spp-ref", "64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    dir.join("manifest.txt")
}

/// Tiny network so a few hundred iterations take seconds.
fn train(manifest: &Path, out: &Path, variant: &str, iters: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--manifest", s(manifest), "--variant", variant, "--iters", iters, "--out", s(out),
        "--width-scale", "0.125", "--batch", "2", "--patch", "32", "--stride", "32",
    ];
    args.extend_from_slice(extra);
    demc(&args)
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_scenes_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = demc(&["gen-data", "--out", s(&a), "--scenes", "4", "--seed", "7", "--size", "32x48", "--spp-ref", "64"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), format!("generated 4 samples -> {}", a.join("manifest.txt").display()));
    let dirs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 4);
    gen(&b, "4", "7", "32x48");
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = demc(&["gen-data", "--out", s(tmp.path()), "--scenes", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(demc(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(demc(&["gen-data", "--out", "x", "--scenes", "1", "--size", "12"]).status.code(), Some(2));
    assert_eq!(demc(&[]).status.code(), Some(2));
}

#[test]
fn every_command_has_help() {
    for cmd in ["gen-data", "train", "denoise", "eval", "gradcheck"] {
        let o = demc(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        assert!(stdout(&o).contains("Usage"), "{cmd}");
    }
}

#[test]
fn train_writes_checkpoint_and_loss_log() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen(&tmp.path().join("data"), "8", "1", "64x64");
    let ckpt = tmp.path().join("run/model.ckpt");
    let o = train(&manifest, &ckpt, "demc", "200", &["--deterministic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(ckpt.is_file());
    let csv = fs::read_to_string(tmp.path().join("run/model.loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,lr,train_loss,val_loss");
    assert_eq!(lines.len(), 201);
}

#[test]
fn deterministic_runs_give_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen(&tmp.path().join("data"), "4", "2", "64x64");
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    for out in [&a, &b] {
        let o = train(&manifest, out, "demc-nosn", "30", &["--deterministic", "--validate-every", "10"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |p: &Path| fs::read(p.with_extension("loss.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen(&tmp.path().join("data"), "2", "3", "32x32");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "iters = 3\ndeterministic = true\nval_fraction = 0\n").unwrap();
    let out = tmp.path().join("m.ckpt");
    let o = train(&manifest, &out, "demc", "5", &["--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.with_extension("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let o = demc(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out),
        "--width-scale", "0.125", "--batch", "1", "--patch", "32", "--stride", "32"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.with_extension("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn resume_continues_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen(&tmp.path().join("data"), "2", "4", "32x32");
    let out = tmp.path().join("m.ckpt");
    let o = train(&manifest, &out, "demc", "4", &["--deterministic", "--val-fraction", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = train(&manifest, &out, "demc", "8", &["--deterministic", "--val-fraction", "0", "--resume", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("for 8 iterations"), "{}", stdout(&o));
    let o = train(&manifest, &out, "semc", "9", &["--resume", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen(&tmp.path().join("data"), "2", "5", "32x32");
    let out = tmp.path().join("m.ckpt");
    let o = train(&manifest, &out, "demc", "50", &["--deterministic", "--lr-start", "1e30", "--lr-end", "1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"), "{}", stderr(&o));
    assert!(stderr(&o).contains('@'), "{}", stderr(&o));
}

#[test]
fn denoise_keeps_resolution_and_checks_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen(&tmp.path().join("train"), "2", "6", "64x64");
    let ckpt = tmp.path().join("semc.ckpt");
    let o = train(&manifest, &ckpt, "semc", "3", &["--deterministic", "--val-fraction", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    gen(&tmp.path().join("big"), "1", "9", "200x150");
    let input = tmp.path().join("big/scene_0000");
    let out = tmp.path().join("out.pfm");
    let o = demc(&["denoise", "--input", s(&input), "--ckpt", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("RelMSE") && stdout(&o).contains("SSIM"));
    let img = read_pfm(&out).unwrap();
    assert_eq!((img.height, img.width, img.channels), (200, 150, 3));
    assert!(img.data.iter().all(|&v| v >= 0.0));

    let o = demc(&["denoise", "--input", s(&input), "--ckpt", s(&ckpt), "--out", s(&out), "--variant", "demc"]);
    assert_eq!(o.status.code(), Some(4));
    let o = demc(&["denoise", "--input", s(&input), "--ckpt", s(&ckpt), "--out", s(&out), "--variant", "semc"]);
    assert_eq!(o.status.code(), Some(0));

    fs::remove_file(input.join(REFERENCE_FILE)).unwrap();
    let o = demc(&["denoise", "--input", s(&input), "--ckpt", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("RelMSE"));

    fs::remove_file(input.join(FEATURE_FILES[0])).unwrap();
    let o = demc(&["denoise", "--input", s(&input), "--ckpt", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("normal.pfm"), "{}", stderr(&o));

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = demc(&["denoise", "--input", s(&input), "--ckpt", s(&junk), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn eval_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let train_manifest = gen(&tmp.path().join("train"), "2", "10", "32x32");
    let test_manifest = gen(&tmp.path().join("test"), "4", "20", "32x32");
    let mut ckpts = Vec::new();
    for v in ["demc", "semc", "demc-nosn"] {
        let p = tmp.path().join(format!("{v}.ckpt"));
        let o = train(&train_manifest, &p, v, "2", &["--deterministic", "--val-fraction", "0"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        ckpts.push(p);
    }

    let csv = tmp.path().join("one.csv");
    let o = demc(&["eval", "--manifest", s(&test_manifest), "--ckpt", s(&ckpts[0]), "--csv", s(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean"));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert_eq!(lines[0], "scene,demc_relmse,demc_ssim");
    assert!(lines[5].starts_with("mean,"));

    let o = demc(&["eval", "--manifest", s(&test_manifest), "--ckpt", s(&ckpts[0]), "--baseline", "noisy", "--csv", s(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let header = fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "scene,noisy_relmse,noisy_ssim,demc_relmse,demc_ssim");

    let o = demc(&["eval", "--manifest", s(&test_manifest), "--ckpt", s(&ckpts[0]), "--ckpt2", s(&ckpts[1]), s(&ckpts[2]), "--csv", s(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let header = fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header.split(',').count(), 1 + 6, "{header}");

    fs::remove_file(tmp.path().join("test/scene_0002").join(REFERENCE_FILE)).unwrap();
    let o = demc(&["eval", "--manifest", s(&test_manifest), "--ckpt", s(&ckpts[0])]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scene_0002"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_names_injected_faults() {
    let o = demc(&["gradcheck", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let names: Vec<String> = stdout(&o).lines().map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for op in ["conv2d", "deconv2d", "maxpool2", "relu", "batch_norm", "concat_channels", "relmse", "demc_end_to_end"] {
        assert!(names.iter().any(|n| n == op), "{op} missing from {names:?}");
    }

    let o = demc(&["gradcheck", "--seed", "3", "--inject-fault", "conv2d"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("conv2d"), "{}", stderr(&o));
}
