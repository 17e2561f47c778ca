use std::path::{Path, PathBuf};

use masm::checkpoint::{apply_checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use masm::data::{
    augment, decode_volume, encode_volume, gen_phantom, mirror, normalize, read_volume, write_volume, Augmentation,
    MultiModalVolume, PhantomSpec, RadiusRange, ET, TC, WT,
};
use masm::backbone::BackboneConfig;
use masm::model::{Model, ModelConfig, Toggles};
use masm::tensor::{Rng, Tensor};
use masm::Error;
use proptest::prelude::*;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Byte-compares against a committed file; `MASM_BLESS=1` rewrites it.
fn check_golden(name: &str, bytes: &[u8]) {
    let path = golden(name);
    if std::env::var("MASM_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, bytes).unwrap();
    }
    let stored = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}; run with MASM_BLESS=1", path.display()));
    assert!(stored == bytes, "{name} differs from the committed golden file");
}

fn small_phantom(seed: u64) -> MultiModalVolume {
    gen_phantom(&PhantomSpec::new(seed, 16)).unwrap()
}

fn random_volume(rng: &mut Rng, extents: [usize; 3], label: bool) -> MultiModalVolume {
    MultiModalVolume {
        case_id: "random".into(),
        extents,
        modalities: (0..4)
            .map(|_| Tensor::from_fn(extents.to_vec(), |_| rng.normal() as f32 as f64))
            .collect(),
        label: label.then(|| {
            Tensor::from_fn(vec![extents[0], extents[1], extents[2], 3], |_| rng.bernoulli(0.3) as u8 as f64)
        }),
    }
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

#[test]
fn blank_spec_gives_constant_background() {
    let mut spec = PhantomSpec::new(3, 12);
    spec.contrast = [[0.0; 4]; 4];
    spec.noise = 0.0;
    spec.tumors = (0, 0);
    let vol = gen_phantom(&spec).unwrap();
    assert!(vol.modalities.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    assert!(vol.label.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn phantoms_are_deterministic_in_the_seed() {
    assert_eq!(small_phantom(5), small_phantom(5));
    assert_ne!(small_phantom(5), small_phantom(6));
}

#[test]
fn default_phantom_has_nonempty_nested_regions() {
    let vol = gen_phantom(&PhantomSpec::new(0, 32)).unwrap();
    let sizes = [ET, TC, WT].map(|c| count(&vol.label_mask(c).unwrap()));
    assert!(0 < sizes[0] && sizes[0] < sizes[1] && sizes[1] < sizes[2], "{sizes:?}");
    assert_eq!(vol.case_id, "phantom-000000");
}

#[test]
fn labels_nest_for_random_specs() {
    let mut rng = Rng::new(9);
    for i in 0..100 {
        let mut spec = PhantomSpec::new(1000 + i, 16);
        spec.tumors = (1, 3);
        let wt = rng.uniform_range(0.2, 0.35);
        let tc = rng.uniform_range(0.1, wt - 0.05);
        let et = rng.uniform_range(0.03, tc - 0.03);
        spec.wt_radius = RadiusRange::new(wt, wt + 0.02);
        spec.tc_radius = RadiusRange::new(tc, tc + 0.02);
        spec.et_radius = RadiusRange::new(et, et + 0.02);
        let vol = gen_phantom(&spec).unwrap();
        let [e, t, w] = [ET, TC, WT].map(|c| vol.label_mask(c).unwrap());
        for k in 0..e.len() {
            assert!(!e[k] || t[k], "spec {i}: ET outside TC");
            assert!(!t[k] || w[k], "spec {i}: TC outside WT");
        }
    }
}

#[test]
fn overlapping_radius_ranges_are_rejected() {
    let mut spec = PhantomSpec::new(0, 16);
    spec.tc_radius = RadiusRange::new(0.2, 0.25);
    assert!(matches!(gen_phantom(&spec), Err(Error::Config(_))));
}

#[test]
fn two_point_standardization() {
    let mut vol = random_volume(&mut Rng::new(1), [2, 2, 2], false);
    for m in &mut vol.modalities {
        *m = Tensor::new([2, 2, 2], vec![0.0, 1.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    }
    let out = normalize(&vol).unwrap();
    assert_eq!(out.modalities[0].data(), &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

fn nonzero_stats(t: &Tensor) -> (f64, f64) {
    let nz: Vec<f64> = t.data().iter().copied().filter(|&v| v != 0.0).collect();
    let n = nz.len() as f64;
    let mean = nz.iter().sum::<f64>() / n;
    (mean, (nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn normalized_phantom_is_standardized_on_nonzero_voxels() {
    let vol = small_phantom(2);
    let out = normalize(&vol).unwrap();
    for (before, after) in vol.modalities.iter().zip(&out.modalities) {
        let (mean, std) = nonzero_stats(after);
        assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
        for (a, b) in before.data().iter().zip(after.data()) {
            assert_eq!(*a == 0.0, *b == 0.0);
        }
    }
    let twice = normalize(&out).unwrap();
    for (a, b) in out.modalities.iter().zip(&twice.modalities) {
        assert!(a.max_abs_diff(b) < 1e-9);
    }
}

#[test]
fn all_zero_modality_is_named_in_the_error() {
    let mut vol = small_phantom(3);
    vol.modalities[2] = Tensor::zeros([16, 16, 16]);
    let err = normalize(&vol).unwrap_err().to_string();
    assert!(err.contains("T1CE"), "{err}");
}

#[test]
fn mirror_is_an_involution() {
    let vol = small_phantom(4);
    for axis in 0..3 {
        let once = mirror(&vol, axis);
        assert_ne!(once, vol);
        assert_eq!(mirror(&once, axis), vol);
    }
}

#[test]
fn identity_augmentation_is_a_no_op() {
    let vol = small_phantom(5);
    assert_eq!(Augmentation::identity(4).apply(&vol), vol);
}

#[test]
fn augmentation_preserves_label_counts_and_ranges() {
    let vol = small_phantom(6);
    let mut rng = Rng::new(6);
    for _ in 0..100 {
        let aug = Augmentation::sample(4, &mut rng);
        assert!(aug.shift.iter().all(|s| (-0.1..=0.1).contains(s)));
        assert!(aug.scale.iter().all(|s| (0.9..=1.1).contains(s)));
        let out = aug.apply(&vol);
        for c in 0..3 {
            assert_eq!(count(&out.label_mask(c).unwrap()), count(&vol.label_mask(c).unwrap()));
        }
        let labels = out.label.as_ref().unwrap().data();
        assert!(labels.iter().all(|&v| v == 0.0 || v == 1.0));
    }
    let mut a = Rng::new(11);
    let mut b = Rng::new(11);
    assert_eq!(augment(&vol, &mut a), augment(&vol, &mut b));
}

#[test]
fn volume_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(7);
    for label in [true, false] {
        let mut vol = random_volume(&mut rng, [3, 4, 5], label);
        let path = dir.path().join("case-a.mmv");
        write_volume(&path, &vol).unwrap();
        let back = read_volume(&path).unwrap();
        vol.case_id = "case-a".into();
        assert_eq!(back, vol);
    }
}

#[test]
fn tiny_volume_file_is_180_bytes() {
    let vol = random_volume(&mut Rng::new(8), [2, 2, 2], true);
    assert_eq!(encode_volume(&vol).unwrap().len(), 180);
}

#[test]
fn malformed_volume_files_are_rejected() {
    let vol = random_volume(&mut Rng::new(9), [2, 3, 2], true);
    let bytes = encode_volume(&vol).unwrap();
    let p = Path::new("bad.mmv");
    for cut in [0, 10, 28, 100, bytes.len() - 1] {
        assert!(matches!(decode_volume(&bytes[..cut], p, "x"), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_volume(&magic, p, "x").unwrap_err().to_string().contains("magic"));
    let mut huge = bytes.clone();
    huge[8..20].copy_from_slice(&[0xff; 12]);
    assert!(matches!(decode_volume(&huge, p, "x"), Err(Error::Format { .. })));
    let mut label = bytes.clone();
    *label.last_mut().unwrap() = 2;
    assert!(decode_volume(&label, p, "x").is_err());
    assert!(matches!(read_volume("/nonexistent/none.mmv"), Err(Error::Io { .. })));
}

#[test]
fn golden_volume_is_stable() {
    let vol = gen_phantom(&PhantomSpec::new(7, 8)).unwrap();
    let bytes = encode_volume(&vol).unwrap();
    check_golden("phantom-000007.mmv", &bytes);
    let back = read_volume(golden("phantom-000007.mmv")).unwrap();
    assert_eq!(back.case_id, "phantom-000007");
    assert_eq!(back.label, vol.label);
    for (a, b) in back.modalities.iter().zip(&vol.modalities) {
        assert!(a.max_abs_diff(b) < 1e-6);
    }
}

fn tiny_model(toggles: Toggles, seed: u64) -> Model {
    Model::new(ModelConfig::new(BackboneConfig::tiny(), toggles), seed).unwrap()
}

#[test]
fn checkpoint_round_trip_within_f32() {
    let dir = tempfile::tempdir().unwrap();
    let src = tiny_model(Toggles::FULL, 1);
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &src.params).unwrap();
    let mut dst = tiny_model(Toggles::FULL, 2);
    apply_checkpoint(&mut dst.params, load_checkpoint(&path).unwrap()).unwrap();
    for ((_, na, a), (_, nb, b)) in src.params.iter().zip(dst.params.iter()) {
        assert_eq!(na, nb);
        assert!(a.max_abs_diff(b) <= a.max_abs() * 1e-7 + 1e-30, "{na}");
    }
}

#[test]
fn flipped_byte_fails_the_digest() {
    let bytes = encode_checkpoint(&tiny_model(Toggles::BASELINE, 0).params);
    for pos in [9, bytes.len() / 2, bytes.len() - 9] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bad, Path::new("m.ckpt")), Err(Error::Digest { .. })), "byte {pos}");
    }
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("m.ckpt")), Err(_)));
}

#[test]
fn depth_mismatch_names_the_parameter() {
    let deep = BackboneConfig {
        volume_size: 8,
        depth: 3,
        channels: vec![8, 16, 32],
    };
    let src = Model::new(ModelConfig::new(deep, Toggles::BASELINE), 0).unwrap();
    let records = decode_checkpoint(&encode_checkpoint(&src.params), Path::new("m.ckpt")).unwrap();
    let mut dst = tiny_model(Toggles::BASELINE, 0);
    let before = dst.params.clone();
    match apply_checkpoint(&mut dst.params, records) {
        Err(Error::ParameterShape { name, .. }) => assert!(name.starts_with("decoder."), "{name}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    for ((_, _, a), (_, _, b)) in before.iter().zip(dst.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn toggle_mismatch_reports_unknown_or_missing() {
    let full = encode_checkpoint(&tiny_model(Toggles::FULL, 0).params);
    let base = encode_checkpoint(&tiny_model(Toggles::BASELINE, 0).params);
    let p = Path::new("m.ckpt");
    let mut dst = tiny_model(Toggles::BASELINE, 0);
    assert!(matches!(
        apply_checkpoint(&mut dst.params, decode_checkpoint(&full, p).unwrap()),
        Err(Error::UnknownParameter(_))
    ));
    let mut dst = tiny_model(Toggles::FULL, 0);
    assert!(matches!(
        apply_checkpoint(&mut dst.params, decode_checkpoint(&base, p).unwrap()),
        Err(Error::MissingParameter(_))
    ));
}

#[test]
fn golden_checkpoint_is_stable() {
    let bytes = encode_checkpoint(&tiny_model(Toggles::FULL, 0).params);
    check_golden("tiny-full-seed0.ckpt", &bytes);
}

proptest! {
    #[test]
    fn encode_decode_round_trip(seed in 0u64..1000, d in 1usize..5, h in 1usize..5, w in 1usize..5, label: bool) {
        let vol = random_volume(&mut Rng::new(seed), [d, h, w], label);
        let bytes = encode_volume(&vol).unwrap();
        prop_assert_eq!(bytes.len(), 28 + d * h * w * (16 + 3 * label as usize));
        let back = decode_volume(&bytes, Path::new("p.mmv"), "random").unwrap();
        prop_assert_eq!(back, vol);
    }
}
