use std::fs;
use std::path::Path;

use bisgan::io::{load_cedar, load_corpus, load_directory, load_image, parse_cedar_name, read_raw, write_corpus, write_png, Layout};
use bisgan::Error;
use bisgan_core::sigdata::synthesize_corpus;
use bisgan_core::{Label, SignatureImage};
use image::{GrayImage, Luma, Rgb, RgbImage};

fn gray_png(path: &Path, w: u32, h: u32, v: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_pixel(w, h, Luma([v])).save(path).unwrap();
}

fn canonical(root: &Path, writers: &[&str], genuine: usize, forged: usize) {
    for w in writers {
        for i in 0..genuine {
            gray_png(&root.join(w).join("genuine").join(format!("g{i}.png")), 10, 7, 200);
        }
        for i in 0..forged {
            gray_png(&root.join(w).join("forged").join(format!("f{i}.png")), 9, 12, 40);
        }
    }
}

#[test]
fn two_writers_three_and_three() {
    let dir = tempfile::tempdir().unwrap();
    canonical(dir.path(), &["bob", "alice"], 3, 3);
    fs::write(dir.path().join("README.txt"), "not a writer").unwrap();
    let c = load_directory(dir.path(), 16).unwrap();
    assert_eq!(c.len(), 12);
    assert_eq!(c.count(Label::Genuine), 6);
    assert_eq!(c.seed(), None);
    let order: Vec<_> = c.samples().iter().map(|s| (s.writer_id.as_str(), s.label)).collect();
    assert_eq!(order[0], ("alice", Label::Forged));
    assert_eq!(order[3], ("alice", Label::Genuine));
    assert_eq!(order[6], ("bob", Label::Forged));
    let g = &c.samples()[3].image;
    assert!(g.pixels().iter().all(|&p| (p - (200.0 / 127.5 - 1.0)).abs() < 1e-6));
    assert_eq!(c, load_directory(dir.path(), 16).unwrap());
}

#[test]
fn writer_missing_a_class_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    canonical(dir.path(), &["a"], 2, 2);
    gray_png(&dir.path().join("b/genuine/x.png"), 4, 4, 0);
    match load_directory(dir.path(), 16).unwrap_err() {
        Error::MalformedCorpus { path, reason } => {
            assert_eq!(path, dir.path().join("b"));
            assert!(reason.contains("forged"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
    fs::create_dir_all(dir.path().join("b/forged")).unwrap();
    assert!(matches!(load_directory(dir.path(), 16), Err(Error::MalformedCorpus { .. })));
}

#[test]
fn missing_root_and_empty_root() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("gone");
    assert!(matches!(load_directory(&gone, 16), Err(Error::NotFound(p)) if p == gone));
    assert!(matches!(load_cedar(&gone, 16), Err(Error::NotFound(_))));
    assert!(matches!(load_directory(dir.path(), 16), Err(Error::MalformedCorpus { .. })));
}

#[test]
fn undecodable_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    canonical(dir.path(), &["a"], 2, 2);
    let bad = dir.path().join("a/genuine/zz.png");
    fs::write(&bad, b"definitely not a png").unwrap();
    match load_directory(dir.path(), 16).unwrap_err() {
        Error::DecodeError { path, .. } => assert_eq!(path, bad),
        other => panic!("{other:?}"),
    }
}

#[test]
fn rgb_input_uses_luma() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.png");
    RgbImage::from_pixel(3, 3, Rgb([200, 100, 50])).save(&p).unwrap();
    let raw = read_raw(&p).unwrap();
    assert_eq!(raw.channels, 3);
    let img = load_image(&p, 4).unwrap();
    let luma = 0.299 * 200.0 + 0.587 * 100.0 + 0.114 * 50.0;
    assert!(img.pixels().iter().all(|&v| (v as f64 - (luma / 127.5 - 1.0)).abs() < 1e-6));
}

#[test]
fn png_encoding_maps_range_to_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sub/x.png");
    let img = SignatureImage::new(2, vec![-1.0, 0.0, 1.0, 0.5]).unwrap();
    write_png(&p, &img).unwrap();
    let back = image::open(&p).unwrap();
    assert_eq!(back.color(), image::ColorType::L8);
    assert_eq!(back.to_luma8().into_raw(), [0, 128, 255, 191]);
}

#[test]
fn cedar_names() {
    assert_eq!(parse_cedar_name("original_12_3.png"), Some((Label::Genuine, 12, 3)));
    assert_eq!(parse_cedar_name("forgeries_1_24.PNG"), Some((Label::Forged, 1, 24)));
    for bad in ["original_1.png", "forgeries_a_1.png", "orig_1_1.png", "original_1_1.jpg", "Thumbs.db"] {
        assert_eq!(parse_cedar_name(bad), None, "{bad}");
    }
}

#[test]
fn cedar_shaped_corpus_has_2640_samples() {
    let dir = tempfile::tempdir().unwrap();
    for w in 1..=55 {
        for n in 1..=24 {
            gray_png(&dir.path().join(format!("full_org/original_{w}_{n}.png")), 6, 4, 230);
            gray_png(&dir.path().join(format!("full_forg/forgeries_{w}_{n}.png")), 6, 4, 20);
        }
    }
    fs::write(dir.path().join("full_org/Thumbs.db"), b"x").unwrap();
    let c = load_corpus(dir.path(), Layout::Cedar, 16).unwrap();
    assert_eq!(c.len(), 2640);
    assert_eq!(c.count(Label::Genuine), 1320);
    assert_eq!(c.count(Label::Forged), 1320);
    let writers: std::collections::BTreeSet<_> = c.samples().iter().map(|s| s.writer_id.clone()).collect();
    assert_eq!(writers.len(), 55);
    assert_eq!(c.samples()[0].writer_id, "1");
    assert_eq!(c.samples()[48].writer_id, "2");
}

#[test]
fn cedar_writer_without_forgeries_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    gray_png(&dir.path().join("original_1_1.png"), 4, 4, 0);
    gray_png(&dir.path().join("forgeries_1_1.png"), 4, 4, 0);
    gray_png(&dir.path().join("original_2_1.png"), 4, 4, 0);
    match load_cedar(dir.path(), 16).unwrap_err() {
        Error::MalformedCorpus { reason, .. } => assert!(reason.contains("writer 2"), "{reason}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn write_then_load_round_trips_counts_labels_and_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthesize_corpus(3, 4, 3, 2, 24).unwrap();
    let files = write_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(files.len(), 20);
    let back = load_directory(dir.path(), 24).unwrap();
    assert_eq!(back.len(), corpus.len());
    assert_eq!(back.count(Label::Genuine), corpus.count(Label::Genuine));
    let key = |c: &bisgan_core::Corpus| {
        let mut k: Vec<_> = c
            .samples()
            .iter()
            .map(|s| (s.writer_id.clone(), s.label, s.image.to_u8()))
            .collect();
        k.sort();
        k
    };
    assert_eq!(key(&corpus), key(&back));
    // Equal-size resampling is the identity, so pixels are the 8-bit levels.
    for s in back.samples() {
        for (&p, q) in s.image.pixels().iter().zip(s.image.to_u8()) {
            assert!((p - (q as f32 / 127.5 - 1.0)).abs() < 1e-6);
        }
    }
}
