//! Generator and discriminator assembled from [`crate::nnblocks`].
//!
//! An architecture value holds only parameter indices; the weights live in a
//! separate [`ParamStore`] so the same architecture runs in `f32` for
//! training and `f64` for gradient checks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nnblocks::{
    AttentionSpec, Conv, ConvTranspose, Dense, InceptionBlock, InceptionSpec, Norm, ResidualBlock,
    SelfAttention, SppSpec,
};
use crate::params::{Bound, Initializer, ParamStore};
use crate::sigdata::DomainMode;
use crate::tensor::{Real, Tensor};

/// Negative slope of the discriminator's leaky ReLUs.
pub const DISC_LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub n_residual: usize,
    pub attention_after_residual: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 64,
            base_channels: 32,
            n_residual: 4,
            attention_after_residual: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        // The innermost inception blocks run at R/4 and need a 3x3 map.
        if self.resolution < 12 || self.resolution % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "generator resolution {} must be a multiple of 4 and at least 12",
                self.resolution
            )));
        }
        if self.base_channels < 4 {
            return Err(Error::InvalidConfig("generator base_channels must be >= 4".into()));
        }
        if self.n_residual == 0 {
            return Err(Error::InvalidConfig("generator needs at least one residual block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub conv_channels: Vec<usize>,
    pub spp_levels: Vec<usize>,
    pub fc_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            conv_channels: vec![64, 128, 256],
            spp_levels: vec![1, 2, 4],
            fc_width: 512,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidConfig("discriminator needs at least one conv stage".into()));
        }
        if self.conv_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "discriminator channels {:?} must be strictly increasing",
                self.conv_channels
            )));
        }
        if self.conv_channels[0] < 4 {
            return Err(Error::InvalidConfig("discriminator stages need >= 4 channels".into()));
        }
        if self.fc_width == 0 {
            return Err(Error::InvalidConfig("fc_width must be >= 1".into()));
        }
        SppSpec::new(self.spp_levels.clone())?;
        Ok(())
    }

    /// Smallest square input the pooling ladder and pyramid accept.
    pub fn min_input_side(&self) -> usize {
        let max_level = self.spp_levels.iter().copied().max().unwrap_or(1);
        let n = self.conv_channels.len();
        // The last inception block runs before the final pool and needs 3x3.
        (max_level << n).max(3 << (n - 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct UpStage {
    deconv: ConvTranspose,
    norm: Norm,
    inception: InceptionBlock,
}

#[derive(Debug, Clone, PartialEq)]
struct DownStage {
    conv: Conv,
    norm: Norm,
    inception: InceptionBlock,
}

/// ResNet-style translator: stem, two stride-2 stages, residual stack,
/// optional self-attention, two transposed-conv stages and a tanh head.
/// Every conv stage is followed by an inception block.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    stages: Vec<DownStage>,
    residual: Vec<ResidualBlock>,
    attention: Option<SelfAttention>,
    ups: Vec<UpStage>,
    head: Conv,
}

impl Generator {
    pub fn new<T: Real>(cfg: &GeneratorConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let b = cfg.base_channels;
        let s = &mut store;
        let i = &mut init;
        let mut stages = Vec::with_capacity(3);
        let plan = [(1, b, 7, 1, 3), (b, 2 * b, 3, 2, 1), (2 * b, 4 * b, 3, 2, 1)];
        for (idx, &(cin, cout, k, stride, pad)) in plan.iter().enumerate() {
            let conv = Conv::new(s, i, &format!("down{idx}.conv"), cin, cout, k, stride, pad, true);
            let norm = Norm::new(s, &format!("down{idx}.norm"), cout);
            let spec = InceptionSpec::equal_split(cout, cout)?;
            let inception = InceptionBlock::new(s, i, &format!("down{idx}.inception"), spec);
            stages.push(DownStage { conv, norm, inception });
        }
        let residual = (0..cfg.n_residual)
            .map(|r| ResidualBlock::new(s, i, &format!("res{r}"), 4 * b))
            .collect();
        let attention = if cfg.attention_after_residual {
            Some(SelfAttention::new(s, i, "attention", AttentionSpec::new(4 * b)?))
        } else {
            None
        };
        let mut ups = Vec::with_capacity(2);
        for (idx, &(cin, cout)) in [(4 * b, 2 * b), (2 * b, b)].iter().enumerate() {
            let deconv = ConvTranspose::new(s, i, &format!("up{idx}.deconv"), cin, cout, 3, 2, 1, 1);
            let norm = Norm::new(s, &format!("up{idx}.norm"), cout);
            let spec = InceptionSpec::equal_split(cout, cout)?;
            let inception = InceptionBlock::new(s, i, &format!("up{idx}.inception"), spec);
            ups.push(UpStage { deconv, norm, inception });
        }
        let head = Conv::new(s, i, "head", b, 1, 7, 1, 3, true);
        Ok((
            Generator {
                cfg: cfg.clone(),
                stages,
                residual,
                attention,
                ups,
                head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// `[N, 1, R, R]` to `[N, 1, R, R]` with values in `(-1, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 1 || h != w || h % 4 != 0 {
            return Err(Error::shape(
                "generator input",
                "[N, 1, R, R] with R divisible by 4",
                format!("{:?}", g.value(x).shape()),
            ));
        }
        let mut y = x;
        for stage in &self.stages {
            y = stage.conv.forward(g, p, y)?;
            y = stage.norm.forward(g, p, y)?;
            y = g.relu(y);
            y = stage.inception.forward(g, p, y)?;
        }
        for block in &self.residual {
            y = block.forward(g, p, y)?;
        }
        if let Some(att) = &self.attention {
            y = att.forward(g, p, y)?;
        }
        for stage in &self.ups {
            y = stage.deconv.forward(g, p, y)?;
            y = stage.norm.forward(g, p, y)?;
            y = g.relu(y);
            y = stage.inception.forward(g, p, y)?;
        }
        y = self.head.forward(g, p, y)?;
        Ok(g.tanh(y))
    }

    pub fn apply<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, &p, xi)?;
        Ok(g.value(y).clone())
    }
}

/// Node handles of one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorTrace {
    pub spp: NodeId,
    pub features: NodeId,
    pub score: NodeId,
}

/// Conv ladder with inception blocks, pyramid pooling, two parallel dense
/// layers whose outputs are concatenated, and a single-unit linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    spp: SppSpec,
    stages: Vec<(Conv, InceptionBlock, Conv)>,
    fc: (Dense, Dense),
    head: Dense,
}

impl Discriminator {
    pub fn new<T: Real>(cfg: &DiscriminatorConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let s = &mut store;
        let i = &mut init;
        let mut cin = 1;
        let mut stages = Vec::with_capacity(cfg.conv_channels.len());
        for (idx, &k) in cfg.conv_channels.iter().enumerate() {
            let pre = Conv::same(s, i, &format!("stage{idx}.conv_in"), cin, k, 3);
            let spec = InceptionSpec::equal_split(k, k)?;
            let inception = InceptionBlock::new(s, i, &format!("stage{idx}.inception"), spec);
            let post = Conv::same(s, i, &format!("stage{idx}.conv_out"), k, k, 3);
            stages.push((pre, inception, post));
            cin = k;
        }
        let spp = SppSpec::new(cfg.spp_levels.clone())?;
        let pooled = spp.output_len(cin);
        let fc = (
            Dense::new(s, i, "fc_left", pooled, cfg.fc_width),
            Dense::new(s, i, "fc_right", pooled, cfg.fc_width),
        );
        let head = Dense::new(s, i, "head", 2 * cfg.fc_width, 1);
        Ok((
            Discriminator {
                cfg: cfg.clone(),
                spp,
                stages,
                fc,
                head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn forward_trace<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<DiscriminatorTrace> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let min = self.cfg.min_input_side();
        if c != 1 || h < min || w < min {
            return Err(Error::shape(
                "discriminator input",
                format!("[N, 1, H, W] with H, W >= {min}"),
                format!("{:?}", g.value(x).shape()),
            ));
        }
        let mut y = x;
        for (pre, inception, post) in &self.stages {
            y = pre.forward(g, p, y)?;
            y = g.leaky_relu(y, DISC_LEAK);
            y = inception.forward(g, p, y)?;
            y = g.max_pool2d(y, 2, 2, 0)?;
            y = post.forward(g, p, y)?;
            y = g.leaky_relu(y, DISC_LEAK);
        }
        let spp = self.spp.forward(g, y)?;
        let left = self.fc.0.forward(g, p, spp)?;
        let left = g.leaky_relu(left, DISC_LEAK);
        let right = self.fc.1.forward(g, p, spp)?;
        let right = g.leaky_relu(right, DISC_LEAK);
        let features = g.concat(&[left, right])?;
        let score = self.head.forward(g, p, features)?;
        Ok(DiscriminatorTrace { spp, features, score })
    }

    /// One unbounded authenticity score per sample, shape `[N, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_trace(g, p, x)?.score)
    }

    pub fn apply<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, &p, xi)?;
        Ok(g.value(y).clone())
    }
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<(Generator, ParamStore<f32>)> {
    Generator::new(cfg, seed)
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<(Discriminator, ParamStore<f32>)> {
    Discriminator::new(cfg, seed)
}

/// All four trained networks plus enough configuration to rebuild them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub mode: DomainMode,
    pub gen_ab: ParamStore<f32>,
    pub gen_ba: ParamStore<f32>,
    pub disc_a: ParamStore<f32>,
    pub disc_b: ParamStore<f32>,
    pub step: u64,
    pub config_digest: [u8; 32],
}

impl ModelCheckpoint {
    /// Networks in their fixed serialization order.
    pub fn networks(&self) -> [(&'static str, &ParamStore<f32>); 4] {
        [
            ("gen_ab", &self.gen_ab),
            ("gen_ba", &self.gen_ba),
            ("disc_a", &self.disc_a),
            ("disc_b", &self.disc_b),
        ]
    }
}
