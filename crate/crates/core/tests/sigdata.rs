use bisgan_core::sigdata::{
    batch_tensor, make_domains, preprocess, subsample, synthesize_corpus, unbatch, RawImage, MIN_SYNTH_RESOLUTION,
};
use bisgan_core::{Corpus, DomainMode, Error, Label, SignatureImage, SignatureSample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-output-pixel bilinear sample with half-pixel centers and edge clamping.
fn bilinear_at(src: &[f64], w: usize, h: usize, ox: usize, oy: usize, out_w: usize, out_h: usize) -> f64 {
    let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).max(0.0).min((w - 1) as f64);
    let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).max(0.0).min((h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let at = |x: usize, y: usize| src[y * w + x];
    (1.0 - fx) * (1.0 - fy) * at(x0, y0) + fx * (1.0 - fy) * at(x1, y0) + (1.0 - fx) * fy * at(x0, y1) + fx * fy * at(x1, y1)
}

fn raw_gray(width: usize, height: usize, seed: u64) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RawImage {
        width,
        height,
        channels: 1,
        data: (0..width * height).map(|_| rng.gen_range(0.0..=255.0f32)).collect(),
    }
}

fn constant(value: f32, channels: usize) -> RawImage {
    RawImage {
        width: 7,
        height: 5,
        channels,
        data: vec![value; 35 * channels],
    }
}

#[test]
fn preprocess_endpoints() {
    for channels in [1, 3] {
        let white = preprocess(&constant(255.0, channels), 16).unwrap();
        assert!(white.pixels().iter().all(|&p| p == 1.0));
        let black = preprocess(&constant(0.0, channels), 16).unwrap();
        assert!(black.pixels().iter().all(|&p| p == -1.0));
    }
}

#[test]
fn preprocess_matches_bilinear_oracle() {
    let raw = raw_gray(100, 200, 3);
    let src: Vec<f64> = raw.data.iter().map(|&v| v as f64).collect();
    let img = preprocess(&raw, 64).unwrap();
    assert_eq!(img.side(), 64);
    for oy in 0..64 {
        for ox in 0..64 {
            let want = bilinear_at(&src, 100, 200, ox, oy, 64, 64) / 127.5 - 1.0;
            let got = img.pixels()[oy * 64 + ox] as f64;
            assert!((got - want).abs() < 1e-6, "({ox},{oy}): {got} vs {want}");
        }
    }
}

#[test]
fn preprocess_uses_luma_weights() {
    let raw = RawImage {
        width: 1,
        height: 1,
        channels: 3,
        data: vec![200.0, 100.0, 50.0],
    };
    let luma = 0.299 * 200.0 + 0.587 * 100.0 + 0.114 * 50.0;
    let img = preprocess(&raw, 2).unwrap();
    for &p in img.pixels() {
        assert!((p as f64 - (luma / 127.5 - 1.0)).abs() < 1e-6);
    }
}

#[test]
fn preprocess_rejects_bad_input() {
    let empty = RawImage {
        width: 0,
        height: 0,
        channels: 1,
        data: vec![],
    };
    assert!(matches!(preprocess(&empty, 8), Err(Error::InvalidInput(_))));
    let two = RawImage {
        width: 1,
        height: 1,
        channels: 2,
        data: vec![0.0, 0.0],
    };
    assert!(matches!(preprocess(&two, 8), Err(Error::InvalidInput(_))));
}

proptest! {
    #[test]
    fn preprocess_stays_in_range(w in 1usize..40, h in 1usize..40, res in 1usize..48, seed in any::<u64>(), rgb in any::<bool>()) {
        let mut raw = raw_gray(w, h, seed);
        if rgb {
            raw.channels = 3;
            raw.data = raw.data.iter().flat_map(|&v| [v, 255.0 - v, v * 0.5]).collect();
        }
        let img = preprocess(&raw, res).unwrap();
        prop_assert_eq!(img.pixels().len(), res * res);
        prop_assert!(img.pixels().iter().all(|p| (-1.0..=1.0).contains(p)));
    }
}

#[test]
fn synthetic_corpus_counts_and_invariants() {
    let c = synthesize_corpus(7, 20, 8, 8, 64).unwrap();
    assert_eq!(c.len(), 320);
    assert_eq!(c.count(Label::Genuine), 160);
    assert_eq!(c.count(Label::Forged), 160);
    assert_eq!(c.seed(), Some(7));
    for s in c.samples() {
        assert_eq!(s.image.side(), 64);
        assert!(s.image.pixels().iter().all(|p| (-1.0..=1.0).contains(p)));
    }
    let writers: std::collections::BTreeSet<_> = c.samples().iter().map(|s| s.writer_id.as_str()).collect();
    assert_eq!(writers.len(), 20);

    let tiny = synthesize_corpus(7, 1, 1, 1, 16).unwrap();
    assert_eq!(tiny.len(), 2);
    assert_eq!(tiny.samples()[0].image.side(), 16);
}

#[test]
fn synthetic_corpus_is_deterministic_and_seed_sensitive() {
    let a = synthesize_corpus(7, 20, 8, 8, 64).unwrap();
    let b = synthesize_corpus(7, 20, 8, 8, 64).unwrap();
    let bits = |c: &Corpus| -> Vec<u32> { c.samples().iter().flat_map(|s| s.image.pixels().iter().map(|p| p.to_bits())).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
    let c = synthesize_corpus(8, 20, 8, 8, 64).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn synthetic_samples_have_ink() {
    let c = synthesize_corpus(1, 3, 2, 2, 32).unwrap();
    for s in c.samples() {
        assert!(s.image.pixels().iter().any(|&p| p < 0.0), "blank render");
        assert!(s.image.pixels().contains(&1.0), "no background");
    }
}

#[test]
fn synthesize_rejects_bad_arguments() {
    let low = synthesize_corpus(0, 1, 1, 1, MIN_SYNTH_RESOLUTION - 1);
    assert!(matches!(low, Err(Error::InvalidConfig(_))));
    assert!(matches!(synthesize_corpus(0, 0, 1, 1, 16), Err(Error::InvalidConfig(_))));
    assert!(matches!(synthesize_corpus(0, 1, 0, 1, 16), Err(Error::InvalidConfig(_))));
}

fn labeled(genuine: usize, forged: usize) -> Corpus {
    let mk = |label, i: usize| SignatureSample {
        image: SignatureImage::new(16, vec![i as f32 / 100.0; 256]).unwrap(),
        writer_id: format!("w{i}"),
        label,
        dataset_tag: "t".into(),
    };
    let mut samples: Vec<_> = (0..genuine).map(|i| mk(Label::Genuine, i)).collect();
    samples.extend((0..forged).map(|i| mk(Label::Forged, genuine + i)));
    Corpus::new(samples, 16, None).unwrap()
}

#[test]
fn make_domains_routes_labels_by_mode() {
    let c = labeled(3, 2);
    let std = make_domains(&c, DomainMode::Standard).unwrap();
    assert_eq!(std.domain_a.len(), 3);
    assert!(std.domain_a.iter().all(|s| s.label == Label::Genuine));
    assert!(std.domain_b.iter().all(|s| s.label == Label::Forged));
    let par = make_domains(&c, DomainMode::Paradigm).unwrap();
    assert_eq!(par.domain_a.len(), 2);
    assert!(par.domain_a.iter().all(|s| s.label == Label::Forged));
    assert_eq!(par.domain_a, std.domain_b);
    assert_eq!(par.domain_b, std.domain_a);
    let order: Vec<_> = par.domain_b.iter().map(|s| s.writer_id.clone()).collect();
    assert_eq!(order, ["w0", "w1", "w2"]);
}

#[test]
fn single_label_corpus_is_malformed() {
    let s = SignatureSample {
        image: SignatureImage::new(16, vec![0.0; 256]).unwrap(),
        writer_id: "w".into(),
        label: Label::Genuine,
        dataset_tag: "t".into(),
    };
    let err = Corpus::new(vec![s.clone(), s], 16, None).unwrap_err();
    assert!(matches!(err, Error::MalformedCorpus(_)));
}

#[test]
fn subsample_is_seeded_and_ratio_preserving() {
    let c = labeled(60, 20);
    let a = subsample(&c, 20, 1).unwrap();
    assert_eq!((a.count(Label::Genuine), a.count(Label::Forged)), (15, 5));
    assert_eq!(a, subsample(&c, 20, 1).unwrap());
    assert_ne!(a, subsample(&c, 20, 2).unwrap());
    assert!(subsample(&c, 81, 1).is_err());
}

#[test]
fn batch_round_trip() {
    let c = synthesize_corpus(2, 2, 1, 1, 16).unwrap();
    let t = batch_tensor(c.samples().iter().map(|s| &s.image)).unwrap();
    assert_eq!(t.shape(), &[4, 1, 16, 16]);
    let back = unbatch(&t).unwrap();
    let orig: Vec<_> = c.samples().iter().map(|s| s.image.clone()).collect();
    assert_eq!(back, orig);
}
