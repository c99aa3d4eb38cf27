//! Signature samples, the synthetic stand-in corpus, image preprocessing and
//! the domain assignment for cycle-consistent training.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::map_indices;
use crate::tensor::Tensor;

pub const DEFAULT_RESOLUTION: usize = 64;
/// Smallest resolution the synthesizer renders at.
pub const MIN_SYNTH_RESOLUTION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Forged,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Genuine => "genuine",
            Label::Forged => "forged",
        }
    }
}

/// Which label set plays domain A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainMode {
    /// Genuine in A, forged in B.
    #[default]
    Standard,
    /// Forged in A, genuine in B.
    Paradigm,
}

impl DomainMode {
    pub fn domain_a_label(self) -> Label {
        match self {
            DomainMode::Standard => Label::Genuine,
            DomainMode::Paradigm => Label::Forged,
        }
    }

    pub fn domain_b_label(self) -> Label {
        match self {
            DomainMode::Standard => Label::Forged,
            DomainMode::Paradigm => Label::Genuine,
        }
    }
}

/// Square grayscale image with values in `[-1, 1]` (ink dark, paper light).
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureImage {
    side: usize,
    pixels: Vec<f32>,
}

impl SignatureImage {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::shape("signature image", format!("{side}x{side}"), pixels.len()));
        }
        if let Some(bad) = pixels.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(SignatureImage { side, pixels })
    }

    /// Clamps every value into `[-1, 1]`; NaN becomes -1.
    pub fn from_clamped(side: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { -1.0 } else { p.clamp(-1.0, 1.0) };
        }
        Self::new(side, pixels)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// 8-bit encoding: `[-1, 1]` mapped linearly onto `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| libm::round(((p as f64 + 1.0) * 127.5).clamp(0.0, 255.0)) as u8)
            .collect()
    }
}

/// Stacks equally sized images into a `[N, 1, R, R]` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a SignatureImage>) -> Result<Tensor<f32>> {
    let mut side = None;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        match side {
            None => side = Some(img.side),
            Some(s) if s != img.side => return Err(Error::shape("image batch", s, img.side)),
            _ => {}
        }
        data.extend_from_slice(&img.pixels);
        n += 1;
    }
    let side = side.ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    Tensor::from_vec(&[n, 1, side, side], data)
}

/// Splits a `[N, 1, R, R]` tensor back into images, clamping into range.
pub fn unbatch(t: &Tensor<f32>) -> Result<Vec<SignatureImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 || h != w {
        return Err(Error::shape("image batch", "[N, 1, R, R]", format!("{:?}", t.shape())));
    }
    t.data()
        .chunks(h * w)
        .take(n)
        .map(|px| SignatureImage::from_clamped(h, px.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignatureSample {
    pub image: SignatureImage,
    pub writer_id: String,
    pub label: Label,
    pub dataset_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    samples: Vec<SignatureSample>,
    resolution: usize,
    seed: Option<u64>,
}

impl Corpus {
    pub fn new(samples: Vec<SignatureSample>, resolution: usize, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.image.side() != resolution) {
            return Err(Error::MalformedCorpus(format!(
                "sample of writer {} has side {} but corpus resolution is {resolution}",
                s.writer_id,
                s.image.side()
            )));
        }
        for label in [Label::Genuine, Label::Forged] {
            if !samples.iter().any(|s| s.label == label) {
                return Err(Error::MalformedCorpus(format!("no {} samples", label.as_str())));
            }
        }
        Ok(Corpus {
            samples,
            resolution,
            seed,
        })
    }

    pub fn samples(&self) -> &[SignatureSample] {
        &self.samples
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &SignatureSample> {
        self.samples.iter().filter(move |s| s.label == label)
    }
}

/// Raw decoded image: `channels` is 1 (gray) or 3 (RGB), intensities in
/// `[0, 255]`, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Grayscale conversion, bilinear resize to `resolution × resolution` and
/// linear mapping of `[0, 255]` onto `[-1, 1]`.
pub fn preprocess(raw: &RawImage, resolution: usize) -> Result<SignatureImage> {
    if raw.width == 0 || raw.height == 0 || raw.data.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if resolution == 0 {
        return Err(Error::InvalidConfig("resolution must be positive".into()));
    }
    if raw.channels != 1 && raw.channels != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 1 or 3 channels, got {}",
            raw.channels
        )));
    }
    if raw.data.len() != raw.width * raw.height * raw.channels {
        return Err(Error::InvalidInput(format!(
            "{} values for a {}x{}x{} image",
            raw.data.len(),
            raw.width,
            raw.height,
            raw.channels
        )));
    }
    let gray: Vec<f64> = if raw.channels == 3 {
        raw.data
            .chunks(3)
            .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
            .collect()
    } else {
        raw.data.iter().map(|&v| v as f64).collect()
    };
    let resized = resize_bilinear(&gray, raw.width, raw.height, resolution, resolution);
    let pixels = resized
        .iter()
        .map(|&v| (v / 127.5 - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    SignatureImage::new(resolution, pixels)
}

/// Source coordinate and blend weight along one axis, half-pixel centers.
fn axis_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable bilinear resampling of a row-major `in_w × in_h` grid.
pub fn resize_bilinear(src: &[f64], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let xs = axis_taps(out_w, in_w);
    let ys = axis_taps(out_h, in_h);
    // horizontal pass
    let mut rows = vec![0.0; in_h * out_w];
    for y in 0..in_h {
        let line = &src[y * in_w..(y + 1) * in_w];
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            rows[y * out_w + x] = line[x0] * (1.0 - fx) + line[x1] * fx;
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = rows[y0 * out_w + x] * (1.0 - fy) + rows[y1 * out_w + x] * fy;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainBundle {
    pub domain_a: Vec<SignatureSample>,
    pub domain_b: Vec<SignatureSample>,
    pub mode: DomainMode,
}

/// Routes each label set to its domain according to `mode`, preserving
/// corpus order within each domain.
pub fn make_domains(corpus: &Corpus, mode: DomainMode) -> Result<DomainBundle> {
    let domain_a: Vec<_> = corpus.with_label(mode.domain_a_label()).cloned().collect();
    let domain_b: Vec<_> = corpus.with_label(mode.domain_b_label()).cloned().collect();
    if domain_a.is_empty() || domain_b.is_empty() {
        return Err(Error::MalformedCorpus("corpus needs both genuine and forged samples".into()));
    }
    Ok(DomainBundle {
        domain_a,
        domain_b,
        mode,
    })
}

/// Uniform seeded subsample of `n` samples keeping the genuine:forged ratio
/// (each label keeps at least one sample). Original order is preserved.
pub fn subsample(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    let total = corpus.len();
    if n < 2 || n > total {
        return Err(Error::InvalidConfig(format!("cannot draw {n} of {total} samples")));
    }
    let n_gen_all = corpus.count(Label::Genuine);
    let n_gen = (libm::round(n as f64 * n_gen_all as f64 / total as f64) as usize)
        .clamp(1, n - 1)
        .min(n_gen_all);
    let n_forg = (n - n_gen).min(total - n_gen_all);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; total];
    for (label, want) in [(Label::Genuine, n_gen), (Label::Forged, n_forg)] {
        let idx: Vec<usize> = (0..total).filter(|&i| corpus.samples[i].label == label).collect();
        for pick in sample_indices(&mut rng, idx.len(), want).into_vec() {
            keep[idx[pick]] = true;
        }
    }
    let samples = corpus
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Corpus::new(samples, corpus.resolution, corpus.seed)
}

type Point = (f64, f64);
type Stroke = [Point; 4];

/// splitmix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise of the genuine re-renders, as a fraction of the resolution.
pub const GENUINE_JITTER: f64 = 0.02;
/// Noise of the forged skeleton, as a fraction of the resolution.
pub const FORGED_JITTER: f64 = 0.08;

fn random_stroke(rng: &mut ChaCha8Rng, x_start: f64, span: f64) -> Stroke {
    let mut pts = [(0.0, 0.0); 4];
    let mut x = x_start;
    for (j, p) in pts.iter_mut().enumerate() {
        if j > 0 {
            x += span / 3.0 * rng.gen_range(0.6..1.6);
        }
        let y = 0.5 + rng.gen_range(-0.3..0.3);
        *p = (x.clamp(0.05, 0.95), y);
    }
    pts
}

fn skeleton(rng: &mut ChaCha8Rng) -> Vec<Stroke> {
    let n = rng.gen_range(3..=6);
    let span = 0.8 / n as f64;
    (0..n)
        .map(|i| {
            let start = 0.1 + span * i as f64 + rng.gen_range(0.0..0.05);
            random_stroke(rng, start, span * 1.3)
        })
        .collect()
}

fn jitter(strokes: &[Stroke], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Stroke> {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    strokes
        .iter()
        .map(|s| {
            let mut out = *s;
            for p in &mut out {
                p.0 = (p.0 + normal.sample(rng)).clamp(0.02, 0.98);
                p.1 = (p.1 + normal.sample(rng)).clamp(0.02, 0.98);
            }
            out
        })
        .collect()
}

fn bezier(s: &Stroke, t: f64) -> Point {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * s[0].0 + b * s[1].0 + c * s[2].0 + d * s[3].0,
        a * s[0].1 + b * s[1].1 + c * s[2].1 + d * s[3].1,
    )
}

/// Rasterizes strokes (normalized coordinates) with a round anti-aliased pen.
fn render(strokes: &[Stroke], side: usize) -> SignatureImage {
    let res = side as f64;
    let radius = (res / 40.0).max(0.7);
    let mut ink = vec![0.0f64; side * side];
    for s in strokes {
        let poly: f64 = s
            .windows(2)
            .map(|w| libm::hypot(w[1].0 - w[0].0, w[1].1 - w[0].1))
            .sum::<f64>()
            * res;
        let steps = (libm::ceil(poly * 4.0) as usize).max(2);
        for k in 0..=steps {
            let (px, py) = bezier(s, k as f64 / steps as f64);
            let (cx, cy) = (px * res, py * res);
            let y0 = libm::floor(cy - radius - 1.0).max(0.0) as usize;
            let y1 = (libm::ceil(cy + radius + 1.0) as usize).min(side);
            let x0 = libm::floor(cx - radius - 1.0).max(0.0) as usize;
            let x1 = (libm::ceil(cx + radius + 1.0) as usize).min(side);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = libm::hypot(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                    let cell = &mut ink[y * side + x];
                    if cover > *cell {
                        *cell = cover;
                    }
                }
            }
        }
    }
    let pixels = ink.iter().map(|&c| (1.0 - 2.0 * c) as f32).collect();
    SignatureImage::new(side, pixels).expect("ink coverage stays in range")
}

/// Deterministic toy corpus: per writer a random stroke skeleton; genuine
/// samples re-render it with small control-point jitter, forgeries render a
/// strongly perturbed skeleton with one stroke added or dropped.
pub fn synthesize_corpus(
    seed: u64,
    n_writers: usize,
    genuine_per_writer: usize,
    forged_per_writer: usize,
    resolution: usize,
) -> Result<Corpus> {
    if resolution < MIN_SYNTH_RESOLUTION {
        return Err(Error::InvalidConfig(format!(
            "resolution {resolution} below minimum {MIN_SYNTH_RESOLUTION}"
        )));
    }
    if n_writers == 0 || genuine_per_writer == 0 || forged_per_writer == 0 {
        return Err(Error::InvalidConfig("writer and per-writer counts must be >= 1".into()));
    }
    let per_writer = map_indices(n_writers, |w| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, w as u64));
        let base = skeleton(&mut rng);
        let writer_id = format!("w{w:03}");
        let mut out = Vec::with_capacity(genuine_per_writer + forged_per_writer);
        for _ in 0..genuine_per_writer {
            let strokes = jitter(&base, GENUINE_JITTER, &mut rng);
            out.push((strokes, Label::Genuine));
        }
        for _ in 0..forged_per_writer {
            let mut strokes = jitter(&base, FORGED_JITTER, &mut rng);
            if rng.gen_bool(0.5) && strokes.len() > 1 {
                let drop = rng.gen_range(0..strokes.len());
                strokes.remove(drop);
            } else {
                let start = rng.gen_range(0.1..0.7);
                strokes.push(random_stroke(&mut rng, start, 0.25));
            }
            out.push((strokes, Label::Forged));
        }
        out.into_iter()
            .map(|(strokes, label)| SignatureSample {
                image: render(&strokes, resolution),
                writer_id: writer_id.clone(),
                label,
                dataset_tag: "synthetic".to_string(),
            })
            .collect::<Vec<_>>()
    });
    Corpus::new(per_writer.concat(), resolution, Some(seed))
}
