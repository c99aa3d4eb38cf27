//! Small genuine-vs-forged verifier networks and the spoof success rate of
//! candidate forgeries against them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nnblocks::{Conv, Dense};
use crate::params::{Adam, AdamConfig, Bound, Initializer, ParamStore};
use crate::sigdata::{batch_tensor, derive_seed, Label, SignatureImage, SignatureSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VerifierPreset {
    /// Three stages of two 3×3 convolutions followed by pooling.
    #[serde(rename = "VGG_S")]
    VggS,
    /// Wide 7×7 stride-2 stem, then 5×5 and 3×3 stages.
    #[serde(rename = "ALEXNET_S")]
    AlexnetS,
    /// 11×11 stride-4 stem in the SigNet lineage.
    #[serde(rename = "SIGNET_S")]
    SignetS,
}

impl VerifierPreset {
    pub const ALL: [VerifierPreset; 3] = [VerifierPreset::VggS, VerifierPreset::AlexnetS, VerifierPreset::SignetS];

    pub fn name(self) -> &'static str {
        match self {
            VerifierPreset::VggS => "VGG_S",
            VerifierPreset::AlexnetS => "ALEXNET_S",
            VerifierPreset::SignetS => "SIGNET_S",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown verifier preset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub preset: VerifierPreset,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_epochs() -> usize {
    5
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    16
}

impl VerifierConfig {
    pub fn new(preset: VerifierPreset, seed: u64) -> Self {
        VerifierConfig {
            preset,
            epochs: default_epochs(),
            lr: default_lr(),
            seed,
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("verifier epochs and batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("verifier lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(Conv),
    Relu,
    Pool { kernel: usize, stride: usize },
    Flatten,
    Dense(Dense),
}

/// Class index of the genuine logit.
pub const GENUINE_CLASS: usize = 1;
const HIDDEN: usize = 64;

/// Trained or freshly initialized verifier network.
#[derive(Debug, Clone)]
pub struct Verifier {
    preset: VerifierPreset,
    resolution: usize,
    layers: Vec<Layer>,
    params: ParamStore<f32>,
}

impl Verifier {
    pub fn new(preset: VerifierPreset, resolution: usize, seed: u64) -> Result<Self> {
        // (out_channels, kernel, stride, pad) per convolution; `None` pools.
        type Plan = &'static [Option<(usize, usize, usize, usize)>];
        let plan: Plan = match preset {
            VerifierPreset::VggS => &[
                Some((8, 3, 1, 1)),
                Some((8, 3, 1, 1)),
                None,
                Some((16, 3, 1, 1)),
                Some((16, 3, 1, 1)),
                None,
                Some((32, 3, 1, 1)),
                Some((32, 3, 1, 1)),
                None,
            ],
            VerifierPreset::AlexnetS => &[
                Some((16, 7, 2, 3)),
                None,
                Some((32, 5, 1, 2)),
                None,
                Some((32, 3, 1, 1)),
                None,
            ],
            VerifierPreset::SignetS => &[Some((16, 11, 4, 5)), None, Some((32, 5, 1, 2)), None, Some((32, 3, 1, 1))],
        };
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let mut layers = Vec::new();
        let (mut c, mut side) = (1usize, resolution);
        for (i, step) in plan.iter().enumerate() {
            match *step {
                Some((out, k, s, p)) => {
                    if side + 2 * p < k {
                        return Err(too_small(preset, resolution));
                    }
                    init.set_std(libm::sqrt(2.0 / (c * k * k) as f64));
                    layers.push(Layer::Conv(Conv::new(
                        &mut params,
                        &mut init,
                        &format!("conv{i}"),
                        c,
                        out,
                        k,
                        s,
                        p,
                        true,
                    )));
                    layers.push(Layer::Relu);
                    c = out;
                    side = (side + 2 * p - k) / s + 1;
                }
                None => {
                    if side < 2 {
                        return Err(too_small(preset, resolution));
                    }
                    layers.push(Layer::Pool { kernel: 2, stride: 2 });
                    side /= 2;
                }
            }
        }
        let flat = c * side * side;
        layers.push(Layer::Flatten);
        init.set_std(libm::sqrt(2.0 / flat as f64));
        layers.push(Layer::Dense(Dense::new(&mut params, &mut init, "fc_hidden", flat, HIDDEN)));
        layers.push(Layer::Relu);
        init.set_std(libm::sqrt(1.0 / HIDDEN as f64));
        layers.push(Layer::Dense(Dense::new(&mut params, &mut init, "fc_out", HIDDEN, 2)));
        Ok(Verifier {
            preset,
            resolution,
            layers,
            params,
        })
    }

    pub fn preset(&self) -> VerifierPreset {
        self.preset
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Logits `[N, 2]`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(g, p, h)?,
                Layer::Relu => g.relu(h),
                Layer::Pool { kernel, stride } => g.max_pool2d(h, *kernel, *stride, 0)?,
                Layer::Flatten => {
                    let shape = g.value(h).shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    g.reshape(h, &[shape[0], rest])?
                }
                Layer::Dense(d) => d.forward(g, p, h)?,
            };
        }
        Ok(h)
    }

    fn check_images(&self, images: &[SignatureImage]) -> Result<()> {
        if let Some(bad) = images.iter().find(|im| im.side() != self.resolution) {
            return Err(Error::shape("verifier input side", self.resolution, bad.side()));
        }
        Ok(())
    }
}

fn too_small(preset: VerifierPreset, resolution: usize) -> Error {
    Error::InvalidConfig(format!("resolution {resolution} is too small for verifier {}", preset.name()))
}

/// Anything that assigns a genuine-class probability to an image.
pub trait Classifier {
    fn genuine_probabilities(&self, images: &[SignatureImage]) -> Result<Vec<f64>>;

    /// GENUINE only when the probability strictly exceeds ½.
    fn classify(&self, images: &[SignatureImage]) -> Result<Vec<Label>> {
        Ok(self
            .genuine_probabilities(images)?
            .into_iter()
            .map(|p| if p > 0.5 { Label::Genuine } else { Label::Forged })
            .collect())
    }
}

const EVAL_BATCH: usize = 32;

impl Classifier for Verifier {
    fn genuine_probabilities(&self, images: &[SignatureImage]) -> Result<Vec<f64>> {
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.input(batch_tensor(chunk)?);
            let logits = self.forward(&mut g, &p, x)?;
            for row in g.value(logits).data().chunks(2) {
                let (t, f) = (row[GENUINE_CLASS] as f64, row[1 - GENUINE_CLASS] as f64);
                // Two-class softmax reduces to a logistic of the margin.
                out.push(1.0 / (1.0 + libm::exp(f - t)));
            }
        }
        Ok(out)
    }
}

/// Held-out evaluation of a trained verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierMetrics {
    pub accuracy: f64,
    /// Genuine is the positive class; 0 when nothing was predicted genuine.
    pub precision: f64,
    /// `confusion[actual][predicted]`, index 0 forged and 1 genuine.
    pub confusion: [[usize; 2]; 2],
    pub train_indices: Vec<usize>,
    pub held_out_indices: Vec<usize>,
}

impl VerifierMetrics {
    pub fn from_predictions(actual: &[Label], predicted: &[Label]) -> Self {
        let idx = |l: Label| usize::from(l == Label::Genuine);
        let mut confusion = [[0usize; 2]; 2];
        for (&a, &p) in actual.iter().zip(predicted) {
            confusion[idx(a)][idx(p)] += 1;
        }
        let total = actual.len().max(1) as f64;
        let correct = (confusion[0][0] + confusion[1][1]) as f64;
        let predicted_genuine = confusion[0][1] + confusion[1][1];
        VerifierMetrics {
            accuracy: correct / total,
            precision: if predicted_genuine == 0 {
                0.0
            } else {
                confusion[1][1] as f64 / predicted_genuine as f64
            },
            confusion,
            train_indices: Vec::new(),
            held_out_indices: Vec::new(),
        }
    }

    /// Fraction of genuine held-out samples labeled genuine.
    pub fn genuine_recall(&self) -> f64 {
        let row = self.confusion[1];
        let n = row[0] + row[1];
        if n == 0 {
            0.0
        } else {
            row[1] as f64 / n as f64
        }
    }
}

pub const MIN_PER_LABEL: usize = 4;
pub const HELD_OUT_FRACTION: f64 = 0.2;

/// Seeded 80/20 split stratified by `(writer, label)`; returns
/// `(train, held_out)` sample indices, both sorted.
pub fn stratified_split(samples: &[SignatureSample], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    for label in [Label::Genuine, Label::Forged] {
        let n = samples.iter().filter(|s| s.label == label).count();
        if n < MIN_PER_LABEL {
            return Err(Error::InsufficientData(format!(
                "verifier training needs {MIN_PER_LABEL} {} samples, got {n}",
                label.as_str()
            )));
        }
    }
    let mut groups: BTreeMap<(&str, Label), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.writer_id.as_str(), s.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut leftovers: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for ((_, label), mut members) in groups {
        members.shuffle(&mut rng);
        let n_test = libm::round(members.len() as f64 * HELD_OUT_FRACTION) as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
        leftovers.entry(label).or_default().extend_from_slice(&members[n_test..]);
    }
    // Small writers can round to zero held-out samples; make sure each label
    // is still represented.
    for label in [Label::Genuine, Label::Forged] {
        if !test.iter().any(|&i| samples[i].label == label) {
            let pool = &leftovers[&label];
            let pick = pool[rand::Rng::gen_range(&mut rng, 0..pool.len())];
            train.retain(|&i| i != pick);
            test.push(pick);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Trains a verifier with cross-entropy on the training split of `samples`
/// and reports held-out metrics.
pub fn train_verifier(samples: &[SignatureSample], cfg: &VerifierConfig) -> Result<(Verifier, VerifierMetrics)> {
    cfg.validate()?;
    let resolution = samples
        .first()
        .map(|s| s.image.side())
        .ok_or_else(|| Error::InsufficientData("no samples".into()))?;
    if let Some(bad) = samples.iter().find(|s| s.image.side() != resolution) {
        return Err(Error::shape("verifier training side", resolution, bad.image.side()));
    }
    let (train, held_out) = stratified_split(samples, derive_seed(cfg.seed, 1))?;
    let mut verifier = Verifier::new(cfg.preset, resolution, derive_seed(cfg.seed, 2))?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut order = train.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let p = verifier.params.bind(&mut g, true);
            let x = g.input(batch_tensor(batch.iter().map(|&i| &samples[i].image))?);
            let targets: Vec<usize> = batch
                .iter()
                .map(|&i| match samples[i].label {
                    Label::Genuine => GENUINE_CLASS,
                    Label::Forged => 1 - GENUINE_CLASS,
                })
                .collect();
            let logits = verifier.forward(&mut g, &p, x)?;
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            if !g.value(loss).all_finite() {
                return Err(Error::Divergence {
                    step: 0,
                    loss: "verifier_cross_entropy",
                });
            }
            let mut grads = g.backward(loss)?;
            let grads = verifier.params.collect_grads(&p, &mut grads);
            opt.step(&mut verifier.params, &grads);
        }
    }
    let images: Vec<SignatureImage> = held_out.iter().map(|&i| samples[i].image.clone()).collect();
    let predicted = verifier.classify(&images)?;
    let actual: Vec<Label> = held_out.iter().map(|&i| samples[i].label).collect();
    let mut metrics = VerifierMetrics::from_predictions(&actual, &predicted);
    metrics.train_indices = train;
    metrics.held_out_indices = held_out;
    Ok((verifier, metrics))
}

/// Number of `forgeries` the classifier labels genuine.
pub fn accepted_count<C: Classifier + ?Sized>(verifier: &C, forgeries: &[SignatureImage]) -> Result<usize> {
    if forgeries.is_empty() {
        return Err(Error::InvalidInput("no forgeries to score".into()));
    }
    Ok(verifier
        .classify(forgeries)?
        .into_iter()
        .filter(|&l| l == Label::Genuine)
        .count())
}

/// Percentage of forgeries accepted as genuine.
pub fn success_rate<C: Classifier + ?Sized>(verifier: &C, forgeries: &[SignatureImage]) -> Result<f64> {
    let k = accepted_count(verifier, forgeries)?;
    Ok(rate_percent(k, forgeries.len()))
}

pub fn rate_percent(accepted: usize, total: usize) -> f64 {
    100.0 * accepted as f64 / total as f64
}

/// A named set of candidate forgeries.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgerySource {
    pub name: String,
    pub images: Vec<SignatureImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoofReport {
    pub source: String,
    /// Success rate in percent per verifier name.
    pub per_verifier: BTreeMap<String, f64>,
    pub accepted: BTreeMap<String, usize>,
    pub n_forgeries: usize,
    pub verifier_seeds: BTreeMap<String, u64>,
    pub corpus_tag: String,
    pub corpus_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainedVerifier {
    pub name: String,
    pub config: VerifierConfig,
    pub verifier: Verifier,
    pub metrics: VerifierMetrics,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub verifiers: Vec<TrainedVerifier>,
    pub reports: Vec<SpoofReport>,
}

/// Trains every verifier once, then scores every source against each.
pub fn run_bench(
    samples: &[SignatureSample],
    corpus_seed: Option<u64>,
    verifier_cfgs: &[VerifierConfig],
    sources: &[ForgerySource],
) -> Result<BenchOutcome> {
    if verifier_cfgs.is_empty() {
        return Err(Error::InvalidConfig("no verifiers configured".into()));
    }
    let resolution = samples.first().map_or(0, |s| s.image.side());
    for src in sources {
        if src.images.is_empty() {
            return Err(Error::InvalidInput(format!("forgery source {:?} has no images", src.name)));
        }
        if let Some(bad) = src.images.iter().find(|im| im.side() != resolution) {
            return Err(Error::shape(format!("forgery source {:?}", src.name), resolution, bad.side()));
        }
    }
    let mut verifiers = Vec::with_capacity(verifier_cfgs.len());
    let mut used = BTreeSet::new();
    for cfg in verifier_cfgs {
        let mut name = cfg.preset.name().to_string();
        let mut k = 2;
        while used.contains(&name) {
            name = format!("{}#{k}", cfg.preset.name());
            k += 1;
        }
        used.insert(name.clone());
        let (verifier, metrics) = train_verifier(samples, cfg)?;
        verifiers.push(TrainedVerifier {
            name,
            config: cfg.clone(),
            verifier,
            metrics,
        });
    }
    let tags: BTreeSet<&str> = samples.iter().map(|s| s.dataset_tag.as_str()).collect();
    let corpus_tag = tags.into_iter().collect::<Vec<_>>().join("+");
    let mut reports = Vec::with_capacity(sources.len());
    for src in sources {
        let mut report = SpoofReport {
            source: src.name.clone(),
            per_verifier: BTreeMap::new(),
            accepted: BTreeMap::new(),
            n_forgeries: src.images.len(),
            verifier_seeds: BTreeMap::new(),
            corpus_tag: corpus_tag.clone(),
            corpus_seed,
        };
        for v in &verifiers {
            let k = accepted_count(&v.verifier, &src.images)?;
            report.per_verifier.insert(v.name.clone(), rate_percent(k, src.images.len()));
            report.accepted.insert(v.name.clone(), k);
            report.verifier_seeds.insert(v.name.clone(), v.config.seed);
        }
        reports.push(report);
    }
    Ok(BenchOutcome { verifiers, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl Classifier for Fixed {
        fn genuine_probabilities(&self, images: &[SignatureImage]) -> Result<Vec<f64>> {
            Ok(self.0.iter().copied().cycle().take(images.len()).collect())
        }
    }

    fn blank(n: usize) -> Vec<SignatureImage> {
        (0..n)
            .map(|_| SignatureImage::new(4, alloc::vec![0.0; 16]).unwrap())
            .collect()
    }

    #[test]
    fn half_probability_is_forged() {
        assert_eq!(success_rate(&Fixed(alloc::vec![0.5]), &blank(4)).unwrap(), 0.0);
    }

    #[test]
    fn empty_forgeries_rejected() {
        assert!(matches!(success_rate(&Fixed(alloc::vec![1.0]), &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn preset_names_round_trip() {
        for p in VerifierPreset::ALL {
            assert_eq!(VerifierPreset::parse(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn precision_without_positive_predictions_is_zero() {
        let m = VerifierMetrics::from_predictions(&[Label::Genuine, Label::Forged], &[Label::Forged, Label::Forged]);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.accuracy, 0.5);
    }
}
