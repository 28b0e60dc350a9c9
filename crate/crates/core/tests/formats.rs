use std::fs;

use demc::data::{
    decode_pfm, load_sample, read_manifest, read_pfm, save_sample, write_manifest, PfmImage, COLOR_FILE, FEATURE_FILES,
    REFERENCE_FILE,
};
use demc::net::{Model, ModelSpec, Variant};
use demc::synth::{generate_scene, SceneRecipe};
use demc::train::{decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainError};
use proptest::prelude::*;

/// Bytes written by hand: little-endian, negative scale, bottom row first.
#[test]
fn pfm_reads_foreign_file() {
    let mut bytes = b"PF\n2 2\n-1.0\n".to_vec();
    for v in [[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]] {
        for c in v {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    let img = decode_pfm(&bytes).unwrap();
    assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
    // top row is the last row in the file
    assert_eq!(&img.data[..6], &[0.0, 0.0, 1.0, 0.5, 0.5, 0.5]);
    assert_eq!(&img.data[6..], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn pfm_big_endian_and_greyscale() {
    let mut bytes = b"Pf\n3 1\n1.0\n".to_vec();
    for v in [0.25f32, 2.0, 1e-3] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let img = decode_pfm(&bytes).unwrap();
    assert_eq!(img.channels, 1);
    assert_eq!(img.data, vec![0.25, 2.0, 1e-3]);
}

#[test]
fn sample_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let sample = generate_scene(&SceneRecipe::from_seed(4, 24, 40)).unwrap();
    let dir = tmp.path().join("scene");
    save_sample(&dir, &sample).unwrap();
    for f in FEATURE_FILES.iter().chain([&COLOR_FILE, &REFERENCE_FILE]) {
        let img = read_pfm(dir.join(f)).unwrap();
        assert_eq!((img.height, img.width, img.channels), (24, 40, 3), "{f}");
    }
    let back = load_sample(&dir).unwrap();
    assert_eq!(back.noisy, sample.noisy);
    assert_eq!(back.features, sample.features);
    assert_eq!(back.reference, sample.reference);
}

#[test]
fn manifest_paths_are_relative_to_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("sets/m.txt");
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, "# scenes\n../a\n\n/abs/b\n  c  \n").unwrap();
    let entries = read_manifest(&path).unwrap();
    assert_eq!(entries, vec![tmp.path().join("sets/../a"), "/abs/b".into(), tmp.path().join("sets/c")]);

    let out = tmp.path().join("w.txt");
    write_manifest(&out, &entries).unwrap();
    assert_eq!(read_manifest(&out).unwrap(), entries);
}

#[test]
fn checkpoint_header_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(ModelSpec::scaled(Variant::Semc, 0.125, 2)).unwrap();
    let ckpt = Checkpoint::from_model(&model);
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DEMC");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, ckpt.tensors.len());
    let first = ckpt.tensors.keys().next().unwrap();
    let len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    assert_eq!(&bytes[14..14 + len], first.as_bytes());

    let loaded = load_checkpoint(&path).unwrap();
    let spec = loaded.infer_spec().unwrap();
    assert_eq!(spec.variant, Variant::Semc);
    assert_eq!(loaded.model(&spec).unwrap().store(), model.store());

    let demc = ModelSpec::scaled(Variant::Demc, 0.125, 2);
    assert!(matches!(loaded.model(&demc), Err(TrainError::Mismatch { .. })));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(TrainError::Truncated { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pfm_file_round_trip(w in 1usize..20, h in 1usize..20, grey in any::<bool>(), seed in any::<u64>()) {
        let channels = if grey { 1 } else { 3 };
        let mut state = seed | 1;
        let data: Vec<f32> = (0..w * h * channels)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                f32::from_bits((state as u32) & 0x7f7f_ffff)
            })
            .collect();
        let img = PfmImage::new(w, h, channels, data).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.pfm");
        demc::data::write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), img.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
