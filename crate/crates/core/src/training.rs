//! Cycle-consistent adversarial training with least-squares GAN losses.

use alloc::format;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelCheckpoint};
use crate::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::sigdata::{batch_tensor, derive_seed, unbatch, DomainBundle, DomainMode, SignatureImage, SignatureSample};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: DomainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: DomainMode::Standard,
            steps: 200,
            batch_size: 4,
            lr: 2e-4,
            adam_betas: (0.5, 0.999),
            lambda_cycle: 10.0,
            lambda_identity: 0.0,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("steps, batch_size and checkpoint_every must be >= 1".into()));
        }
        let reals = [self.lr, self.adam_betas.0, self.adam_betas.1, self.lambda_cycle, self.lambda_identity];
        if reals.iter().any(|v| !v.is_finite()) || self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive and all rates finite".into()));
        }
        if self.lambda_cycle < 0.0 || self.lambda_identity < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_betas.0) || !(0.0..1.0).contains(&self.adam_betas.1) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss_gen_total: f64,
    pub loss_disc_a: f64,
    pub loss_disc_b: f64,
    pub loss_cycle: f64,
    pub loss_adv: f64,
    pub loss_identity: f64,
}

/// Mean absolute difference between an image batch and its reconstruction.
pub fn cycle_loss<T: Real>(x: &Tensor<T>, reconstructed: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let b = g.input(reconstructed.clone());
    let l = g.mean_abs_diff(a, b)?;
    Ok(g.value(l).data()[0].to_f64())
}

/// Least-squares GAN losses: `(½·mean((real−1)²) + ½·mean(fake²), mean((fake−1)²))`.
pub fn adversarial_losses(real_scores: &[f64], fake_scores: &[f64]) -> Result<(f64, f64)> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::InvalidInput("score batches must be non-empty".into()));
    }
    let mut g = Graph::<f64>::new();
    let real = g.input(Tensor::from_vec(&[real_scores.len()], real_scores.to_vec())?);
    let fake = g.input(Tensor::from_vec(&[fake_scores.len()], fake_scores.to_vec())?);
    let (disc, gen) = lsgan_terms(&mut g, real, fake)?;
    Ok((g.value(disc).data()[0], g.value(gen).data()[0]))
}

fn lsgan_terms<T: Real>(g: &mut Graph<T>, real: NodeId, fake: NodeId) -> Result<(NodeId, NodeId)> {
    let r = g.mean_sq_offset(real, 1.0)?;
    let f = g.mean_sq_offset(fake, 0.0)?;
    let disc = g.weighted_sum(&[(r, 0.5), (f, 0.5)])?;
    let gen = g.mean_sq_offset(fake, 1.0)?;
    Ok((disc, gen))
}

/// SHA-256 over a fixed little-endian encoding of every configuration field.
pub fn config_digest(gcfg: &GeneratorConfig, dcfg: &DiscriminatorConfig, tcfg: &TrainConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut put = |tag: &str, v: u64| {
        h.update(tag.as_bytes());
        h.update(v.to_le_bytes());
    };
    put("gen.resolution", gcfg.resolution as u64);
    put("gen.base_channels", gcfg.base_channels as u64);
    put("gen.n_residual", gcfg.n_residual as u64);
    put("gen.attention", gcfg.attention_after_residual as u64);
    put("disc.conv_channels", dcfg.conv_channels.len() as u64);
    for &c in &dcfg.conv_channels {
        put("disc.conv", c as u64);
    }
    put("disc.spp_levels", dcfg.spp_levels.len() as u64);
    for &l in &dcfg.spp_levels {
        put("disc.level", l as u64);
    }
    put("disc.fc_width", dcfg.fc_width as u64);
    put("train.mode", tcfg.mode as u64);
    put("train.steps", tcfg.steps);
    put("train.batch_size", tcfg.batch_size as u64);
    put("train.lr", tcfg.lr.to_bits());
    put("train.beta1", tcfg.adam_betas.0.to_bits());
    put("train.beta2", tcfg.adam_betas.1.to_bits());
    put("train.lambda_cycle", tcfg.lambda_cycle.to_bits());
    put("train.lambda_identity", tcfg.lambda_identity.to_bits());
    put("train.seed", tcfg.seed);
    put("train.checkpoint_every", tcfg.checkpoint_every);
    h.finalize().into()
}

/// Hooks into a training run. All methods default to no-ops.
pub trait TrainObserver {
    /// Called with the samples drawn for each domain before a step runs.
    fn on_batch(&mut self, _step: u64, _domain_a: &[&SignatureSample], _domain_b: &[&SignatureSample]) {}

    /// Returning `Break` stops training after this step.
    fn on_record(&mut self, _record: &LossRecord) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &ModelCheckpoint) {}
}

impl TrainObserver for () {}

/// Epoch-style sampler: reshuffles the index order whenever it runs out.
#[derive(Debug, Clone)]
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            cursor: len,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Stream indices for [`derive_seed`].
mod streams {
    pub const GEN_AB: u64 = 1;
    pub const GEN_BA: u64 = 2;
    pub const DISC_A: u64 = 3;
    pub const DISC_B: u64 = 4;
    pub const SAMPLER_A: u64 = 5;
    pub const SAMPLER_B: u64 = 6;
}

/// Training state of the four networks.
#[derive(Debug, Clone)]
pub struct Trainer {
    tcfg: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    gen_ab: ParamStore<f32>,
    gen_ba: ParamStore<f32>,
    disc_a: ParamStore<f32>,
    disc_b: ParamStore<f32>,
    opt_gen_ab: Adam<f32>,
    opt_gen_ba: Adam<f32>,
    opt_disc_a: Adam<f32>,
    opt_disc_b: Adam<f32>,
    digest: [u8; 32],
    step: u64,
}

struct StepLosses {
    record: LossRecord,
    fake_a: Tensor<f32>,
    fake_b: Tensor<f32>,
}

impl Trainer {
    pub fn new(gcfg: &GeneratorConfig, dcfg: &DiscriminatorConfig, tcfg: &TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let seed = tcfg.seed;
        let (generator, gen_ab) = Generator::new(gcfg, derive_seed(seed, streams::GEN_AB))?;
        let (_, gen_ba) = Generator::new(gcfg, derive_seed(seed, streams::GEN_BA))?;
        let (discriminator, disc_a) = Discriminator::new(dcfg, derive_seed(seed, streams::DISC_A))?;
        let (_, disc_b) = Discriminator::new(dcfg, derive_seed(seed, streams::DISC_B))?;
        if gcfg.resolution < dcfg.min_input_side() {
            return Err(Error::InvalidConfig(format!(
                "resolution {} is below the discriminator minimum {}",
                gcfg.resolution,
                dcfg.min_input_side()
            )));
        }
        let adam = tcfg.adam();
        Ok(Trainer {
            tcfg: tcfg.clone(),
            generator,
            discriminator,
            gen_ab,
            gen_ba,
            disc_a,
            disc_b,
            opt_gen_ab: Adam::new(adam),
            opt_gen_ba: Adam::new(adam),
            opt_disc_a: Adam::new(adam),
            opt_disc_b: Adam::new(adam),
            digest: config_digest(gcfg, dcfg, tcfg),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            generator: self.generator.config().clone(),
            discriminator: self.discriminator.config().clone(),
            mode: self.tcfg.mode,
            gen_ab: self.gen_ab.clone(),
            gen_ba: self.gen_ba.clone(),
            disc_a: self.disc_a.clone(),
            disc_b: self.disc_b.clone(),
            step: self.step,
            config_digest: self.digest,
        }
    }

    /// One generator update followed by one update of each discriminator.
    pub fn train_step(&mut self, real_a: &Tensor<f32>, real_b: &Tensor<f32>) -> Result<LossRecord> {
        let step = self.step + 1;
        let StepLosses {
            mut record,
            fake_a,
            fake_b,
        } = self.generator_update(real_a, real_b, step)?;
        let (loss_disc_a, loss_disc_b) = self.discriminator_update(real_a, real_b, &fake_a, &fake_b, step)?;
        record.loss_disc_a = loss_disc_a;
        record.loss_disc_b = loss_disc_b;
        self.step = step;
        Ok(record)
    }

    fn generator_update(&mut self, real_a: &Tensor<f32>, real_b: &Tensor<f32>, step: u64) -> Result<StepLosses> {
        let mut g = Graph::new();
        let nets = CycleNets {
            generator: &self.generator,
            discriminator: &self.discriminator,
            gen_ab: self.gen_ab.bind(&mut g, true),
            gen_ba: self.gen_ba.bind(&mut g, true),
            disc_a: self.disc_a.bind(&mut g, false),
            disc_b: self.disc_b.bind(&mut g, false),
        };
        let xa = g.input(real_a.clone());
        let xb = g.input(real_b.clone());
        let obj = generator_objective(&mut g, &nets, xa, xb, &self.tcfg)?;
        let record = obj.record(&g, step);
        if !record.loss_gen_total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: "loss_gen_total",
            });
        }
        let mut grads = g.backward(obj.total)?;
        let grads_ab = self.gen_ab.collect_grads(&nets.gen_ab, &mut grads);
        let grads_ba = self.gen_ba.collect_grads(&nets.gen_ba, &mut grads);
        check_grads(&grads_ab, step)?;
        check_grads(&grads_ba, step)?;
        self.opt_gen_ab.step(&mut self.gen_ab, &grads_ab);
        self.opt_gen_ba.step(&mut self.gen_ba, &grads_ba);
        Ok(StepLosses {
            record,
            fake_a: g.value(obj.fake_a).clone(),
            fake_b: g.value(obj.fake_b).clone(),
        })
    }

    fn discriminator_update(
        &mut self,
        real_a: &Tensor<f32>,
        real_b: &Tensor<f32>,
        fake_a: &Tensor<f32>,
        fake_b: &Tensor<f32>,
        step: u64,
    ) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let p_da = self.disc_a.bind(&mut g, true);
        let p_db = self.disc_b.bind(&mut g, true);
        let disc = &self.discriminator;
        let disc_loss = |g: &mut Graph<f32>, p, real: &Tensor<f32>, fake: &Tensor<f32>| -> Result<NodeId> {
            let r = g.input(real.clone());
            let f = g.input(fake.clone());
            let sr = disc.forward(g, p, r)?;
            let sf = disc.forward(g, p, f)?;
            Ok(lsgan_terms(g, sr, sf)?.0)
        };
        let loss_a = disc_loss(&mut g, &p_da, real_a, fake_a)?;
        let loss_b = disc_loss(&mut g, &p_db, real_b, fake_b)?;
        let total = g.weighted_sum(&[(loss_a, 1.0), (loss_b, 1.0)])?;
        let (la, lb) = (scalar(&g, loss_a), scalar(&g, loss_b));
        for (v, name) in [(la, "loss_disc_a"), (lb, "loss_disc_b")] {
            if !v.is_finite() {
                return Err(Error::Divergence { step, loss: name });
            }
        }
        let mut grads = g.backward(total)?;
        let grads_a = self.disc_a.collect_grads(&p_da, &mut grads);
        let grads_b = self.disc_b.collect_grads(&p_db, &mut grads);
        check_grads(&grads_a, step)?;
        check_grads(&grads_b, step)?;
        self.opt_disc_a.step(&mut self.disc_a, &grads_a);
        self.opt_disc_b.step(&mut self.disc_b, &grads_b);
        Ok((la, lb))
    }
}

/// The four networks of a cycle model bound into one graph.
pub struct CycleNets<'a> {
    pub generator: &'a Generator,
    pub discriminator: &'a Discriminator,
    pub gen_ab: Bound,
    pub gen_ba: Bound,
    pub disc_a: Bound,
    pub disc_b: Bound,
}

/// Graph nodes of the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorObjective {
    pub total: NodeId,
    pub adv_ab: NodeId,
    pub adv_ba: NodeId,
    pub cycle_a: NodeId,
    pub cycle_b: NodeId,
    pub identity: Option<(NodeId, NodeId)>,
    pub fake_a: NodeId,
    pub fake_b: NodeId,
}

impl GeneratorObjective {
    fn record<T: Real>(&self, g: &Graph<T>, step: u64) -> LossRecord {
        let v = |id: NodeId| g.value(id).data()[0].to_f64();
        LossRecord {
            step,
            loss_gen_total: v(self.total),
            loss_disc_a: 0.0,
            loss_disc_b: 0.0,
            loss_cycle: v(self.cycle_a) + v(self.cycle_b),
            loss_adv: v(self.adv_ab) + v(self.adv_ba),
            loss_identity: self.identity.map_or(0.0, |(a, b)| v(a) + v(b)),
        }
    }
}

/// `adv(A→B) + adv(B→A) + λ_cycle·(cycle_A + cycle_B) + λ_identity·(id_A + id_B)`;
/// the identity terms are only built when their weight is positive.
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    nets: &CycleNets<'_>,
    xa: NodeId,
    xb: NodeId,
    tcfg: &TrainConfig,
) -> Result<GeneratorObjective> {
    let (gen, disc) = (nets.generator, nets.discriminator);
    let fake_b = gen.forward(g, &nets.gen_ab, xa)?;
    let rec_a = gen.forward(g, &nets.gen_ba, fake_b)?;
    let fake_a = gen.forward(g, &nets.gen_ba, xb)?;
    let rec_b = gen.forward(g, &nets.gen_ab, fake_a)?;
    let score_b = disc.forward(g, &nets.disc_b, fake_b)?;
    let score_a = disc.forward(g, &nets.disc_a, fake_a)?;
    let adv_ab = g.mean_sq_offset(score_b, 1.0)?;
    let adv_ba = g.mean_sq_offset(score_a, 1.0)?;
    let cycle_a = g.mean_abs_diff(rec_a, xa)?;
    let cycle_b = g.mean_abs_diff(rec_b, xb)?;
    let lc = tcfg.lambda_cycle;
    let mut terms = alloc::vec![(adv_ab, 1.0), (adv_ba, 1.0), (cycle_a, lc), (cycle_b, lc)];
    let mut identity = None;
    if tcfg.lambda_identity > 0.0 {
        let same_a = gen.forward(g, &nets.gen_ba, xa)?;
        let same_b = gen.forward(g, &nets.gen_ab, xb)?;
        let id_a = g.mean_abs_diff(same_a, xa)?;
        let id_b = g.mean_abs_diff(same_b, xb)?;
        terms.push((id_a, tcfg.lambda_identity));
        terms.push((id_b, tcfg.lambda_identity));
        identity = Some((id_a, id_b));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(GeneratorObjective {
        total,
        adv_ab,
        adv_ba,
        cycle_a,
        cycle_b,
        identity,
        fake_a,
        fake_b,
    })
}

fn scalar(g: &Graph<f32>, id: NodeId) -> f64 {
    g.value(id).data()[0] as f64
}

fn check_grads(grads: &[Tensor<f32>], step: u64) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss: "gradient" })
    }
}

/// Runs `tcfg.steps` optimizer steps. The mode only enters through the
/// bundle contents; it must agree with `tcfg.mode`.
pub fn train(
    bundle: &DomainBundle,
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelCheckpoint, Vec<LossRecord>)> {
    train_observed(bundle, gcfg, dcfg, tcfg, &mut ())
}

pub fn train_observed<O: TrainObserver + ?Sized>(
    bundle: &DomainBundle,
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainConfig,
    observer: &mut O,
) -> Result<(ModelCheckpoint, Vec<LossRecord>)> {
    if bundle.mode != tcfg.mode {
        return Err(Error::InvalidConfig(format!(
            "bundle mode {:?} differs from training mode {:?}",
            bundle.mode, tcfg.mode
        )));
    }
    let smallest = bundle.domain_a.len().min(bundle.domain_b.len());
    if smallest == 0 {
        return Err(Error::MalformedCorpus("both domains need samples".into()));
    }
    if tcfg.batch_size > smallest {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds smallest domain size {smallest}",
            tcfg.batch_size
        )));
    }
    for s in bundle.domain_a.iter().chain(&bundle.domain_b) {
        if s.image.side() != gcfg.resolution {
            return Err(Error::shape("training sample resolution", gcfg.resolution, s.image.side()));
        }
    }
    let mut trainer = Trainer::new(gcfg, dcfg, tcfg)?;
    let mut sampler_a = BatchSampler::new(bundle.domain_a.len(), derive_seed(tcfg.seed, streams::SAMPLER_A));
    let mut sampler_b = BatchSampler::new(bundle.domain_b.len(), derive_seed(tcfg.seed, streams::SAMPLER_B));
    let mut records = Vec::with_capacity(tcfg.steps as usize);
    for step in 1..=tcfg.steps {
        let batch_a: Vec<&SignatureSample> = sampler_a
            .next_batch(tcfg.batch_size)
            .into_iter()
            .map(|i| &bundle.domain_a[i])
            .collect();
        let batch_b: Vec<&SignatureSample> = sampler_b
            .next_batch(tcfg.batch_size)
            .into_iter()
            .map(|i| &bundle.domain_b[i])
            .collect();
        observer.on_batch(step, &batch_a, &batch_b);
        let real_a = batch_tensor(batch_a.iter().map(|s| &s.image))?;
        let real_b = batch_tensor(batch_b.iter().map(|s| &s.image))?;
        let record = trainer.train_step(&real_a, &real_b)?;
        let flow = observer.on_record(&record);
        records.push(record);
        if step % tcfg.checkpoint_every == 0 || step == tcfg.steps {
            observer.on_checkpoint(&trainer.checkpoint());
        }
        if flow.is_break() {
            break;
        }
    }
    Ok((trainer.checkpoint(), records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AToB,
    BToA,
}

/// Inference batch size used by [`generate`].
const GENERATE_BATCH: usize = 8;

/// Translates each source image with the selected generator.
pub fn generate(
    checkpoint: &ModelCheckpoint,
    sources: &[SignatureSample],
    direction: Direction,
) -> Result<Vec<SignatureImage>> {
    let images: Vec<SignatureImage> = sources.iter().map(|s| s.image.clone()).collect();
    generate_images(checkpoint, &images, direction)
}

pub fn generate_images(
    checkpoint: &ModelCheckpoint,
    sources: &[SignatureImage],
    direction: Direction,
) -> Result<Vec<SignatureImage>> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("no source images".into()));
    }
    let res = checkpoint.generator.resolution;
    if let Some(bad) = sources.iter().find(|s| s.side() != res) {
        return Err(Error::shape("generator source resolution", res, bad.side()));
    }
    let (arch, mut params) = Generator::new::<f32>(&checkpoint.generator, 0)?;
    let trained = match direction {
        Direction::AToB => &checkpoint.gen_ab,
        Direction::BToA => &checkpoint.gen_ba,
    };
    params.load_tensors(trained.tensors().to_vec())?;
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(GENERATE_BATCH) {
        let x = batch_tensor(chunk)?;
        let y = arch.apply(&params, &x)?;
        out.extend(unbatch(&y)?);
    }
    Ok(out)
}
