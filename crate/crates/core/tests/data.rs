mod common;

use std::path::Path;

use common::rng;
use elgcnet::data::{load, load_all, scan, synth, synth_scene, write_split, LABEL_THRESHOLD};
use elgcnet::Error;
use image::{GrayImage, ImageFormat, RgbImage};
use proptest::prelude::*;

fn quantized(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[test]
fn written_split_loads_back_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth(&mut rng(1), 3, 32).unwrap();
    write_split(dir.path(), "train", &samples).unwrap();
    let index = scan(dir.path(), "train").unwrap();
    assert_eq!(index.entries.iter().map(|e| e.stem.as_str()).collect::<Vec<_>>(), ["0000", "0001", "0002"]);
    for (i, s) in samples.iter().enumerate() {
        let back = load(&index, i).unwrap();
        assert_eq!(back.label, s.label);
        let want: Vec<f32> = s.pre.data().iter().map(|&v| quantized(v)).collect();
        assert_eq!(back.pre.data(), &want[..]);
        let want: Vec<f32> = s.post.data().iter().map(|&v| quantized(v)).collect();
        assert_eq!(back.post.data(), &want[..]);
    }
}

fn write_triple(base: &Path, stem: &str, label_value: u8, ext: &str) {
    let fmt = if ext == "png" { ImageFormat::Png } else { ImageFormat::Pnm };
    for d in ["A", "B", "label"] {
        std::fs::create_dir_all(base.join(d)).unwrap();
    }
    let rgb = RgbImage::from_fn(4, 2, |x, y| image::Rgb([x as u8 * 60, y as u8 * 200, 255]));
    let pext = if ext == "png" { "png" } else { "ppm" };
    rgb.save_with_format(base.join("A").join(format!("{stem}.{pext}")), fmt).unwrap();
    rgb.save_with_format(base.join("B").join(format!("{stem}.{pext}")), fmt).unwrap();
    let lext = if ext == "png" { "png" } else { "pgm" };
    let mask = GrayImage::from_fn(4, 2, |x, _| image::Luma([if x < 2 { label_value } else { 0 }]));
    mask.save_with_format(base.join("label").join(format!("{stem}.{lext}")), fmt).unwrap();
}

#[test]
fn netpbm_and_png_are_both_accepted_and_thresholded() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("test");
    write_triple(&base, "a", LABEL_THRESHOLD, "png");
    write_triple(&base, "b", LABEL_THRESHOLD + 1, "pnm");
    let all = load_all(&scan(dir.path(), "test").unwrap()).unwrap();
    assert_eq!(all[0].label.changed(), 0);
    assert_eq!(all[1].label.data, vec![1, 1, 0, 0, 1, 1, 0, 0]);
    assert_eq!(all[1].pre.shape(), &[2, 4, 3]);
    assert_eq!(all[1].pre.data()[3], 60.0 / 255.0);
}

#[test]
fn orphan_stem_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("train");
    write_triple(&base, "ok", 255, "png");
    write_triple(&base, "lonely", 255, "png");
    std::fs::remove_file(base.join("B").join("lonely.png")).unwrap();
    match scan(dir.path(), "train") {
        Err(Error::Ingestion(msg)) => assert!(msg.contains("lonely") && msg.contains("B/"), "{msg}"),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn missing_split_and_mismatched_sizes_are_ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(scan(dir.path(), "val"), Err(Error::Ingestion(_))));
    let base = dir.path().join("val");
    write_triple(&base, "x", 255, "png");
    GrayImage::new(3, 3).save(base.join("label").join("x.png")).unwrap();
    let index = scan(dir.path(), "val").unwrap();
    assert!(matches!(load(&index, 0), Err(Error::Ingestion(_))));
}

#[test]
fn synthetic_labels_are_the_exact_shape_union() {
    let mut r = rng(2);
    for _ in 0..20 {
        let (s, shapes) = synth_scene(&mut r, 48).unwrap();
        assert!((1..=4).contains(&shapes.len()));
        for y in 0..48 {
            for x in 0..48 {
                let inside = shapes.iter().any(|sh| sh.contains(y, x));
                assert_eq!(s.label.get(y, x) == 1, inside);
            }
        }
        assert!(s.pre.data().iter().zip(s.post.data()).any(|(a, b)| a != b));
    }
}

#[test]
fn synthetic_change_fraction_is_moderate() {
    let mut r = rng(3);
    for s in synth(&mut r, 100, 64).unwrap() {
        let f = s.label.changed() as f64 / (64.0 * 64.0);
        assert!((0.02..=0.5).contains(&f), "fraction {f}");
    }
}

#[test]
fn synthesis_is_pure_in_the_seed() {
    assert_eq!(synth(&mut rng(4), 3, 32).unwrap(), synth(&mut rng(4), 3, 32).unwrap());
    assert!(matches!(synth(&mut rng(4), 1, 8), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loaded_samples_are_in_range(seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), "s", &synth(&mut rng(seed), 1, 16).unwrap()).unwrap();
        let s = load(&scan(dir.path(), "s").unwrap(), 0).unwrap();
        prop_assert!(s.label.is_binary());
        prop_assert!(s.pre.data().iter().chain(s.post.data()).all(|v| (0.0..=1.0).contains(v)));
    }
}
