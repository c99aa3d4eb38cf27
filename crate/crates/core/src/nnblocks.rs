//! Reusable network blocks: plain layers, the four-branch inception block,
//! spatial self-attention, the residual block and spatial pyramid pooling.
//!
//! Blocks own [`ParamId`]s into a caller-provided [`ParamStore`]. Graph
//! building happens through `forward`; `apply` is the eager convenience
//! wrapper used by tests and inference.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.push(
            format!("{name}.weight"),
            init.normal(&[out_channels, in_channels, kernel, kernel]),
        );
        let bias = bias.then(|| store.push(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Conv {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Stride 1, "same" padding.
    pub fn same<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Self::new(store, init, name, in_channels, out_channels, kernel, 1, kernel / 2, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p.node(self.weight), self.bias.map(|b| p.node(b)), self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

/// Transposed convolution, weight layout `[C_in, C_out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let weight = store.push(
            format!("{name}.weight"),
            init.normal(&[in_channels, out_channels, kernel, kernel]),
        );
        let bias = Some(store.push(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        ConvTranspose {
            weight,
            bias,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv_transpose2d(
            x,
            p.node(self.weight),
            self.bias.map(|b| p.node(b)),
            self.stride,
            self.pad,
            self.out_pad,
        )
    }
}

/// Instance normalization with learned per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Norm {
            scale: store.push(format!("{name}.scale"), Tensor::full(&[channels], T::one())),
            shift: store.push(format!("{name}.shift"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.instance_norm(x, p.node(self.scale), p.node(self.shift))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        Dense {
            weight: store.push(format!("{name}.weight"), init.normal(&[outputs, inputs])),
            bias: store.push(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.linear(x, p.node(self.weight), Some(p.node(self.bias)))
    }
}

/// Branch widths of an inception block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub in_channels: usize,
    /// 1×1 branch.
    pub b1: usize,
    /// 3×3 branch.
    pub b3: usize,
    /// 5×5 branch.
    pub b5: usize,
    /// 3×3 max pool followed by a 1×1 projection.
    pub bp: usize,
}

impl InceptionSpec {
    pub fn new(in_channels: usize, b1: usize, b3: usize, b5: usize, bp: usize) -> Result<Self> {
        if [in_channels, b1, b3, b5, bp].contains(&0) {
            return Err(Error::InvalidConfig("inception widths must be positive".into()));
        }
        Ok(InceptionSpec {
            in_channels,
            b1,
            b3,
            b5,
            bp,
        })
    }

    /// Splits `channels` evenly over the four branches; the remainder goes
    /// to the 3×3 branch.
    pub fn equal_split(in_channels: usize, channels: usize) -> Result<Self> {
        let quarter = channels / 4;
        if quarter == 0 {
            return Err(Error::InvalidConfig(format!(
                "inception block needs at least 4 channels, got {channels}"
            )));
        }
        Self::new(in_channels, quarter, channels - 3 * quarter, quarter, quarter)
    }

    pub fn out_channels(&self) -> usize {
        self.b1 + self.b3 + self.b5 + self.bp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionBlock {
    pub spec: InceptionSpec,
    pub branch1: Conv,
    pub branch3: Conv,
    pub branch5: Conv,
    pub branch_pool: Conv,
}

impl InceptionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        spec: InceptionSpec,
    ) -> Self {
        let c = spec.in_channels;
        InceptionBlock {
            spec,
            branch1: Conv::same(store, init, &format!("{name}.b1"), c, spec.b1, 1),
            branch3: Conv::same(store, init, &format!("{name}.b3"), c, spec.b3, 3),
            branch5: Conv::same(store, init, &format!("{name}.b5"), c, spec.b5, 5),
            branch_pool: Conv::same(store, init, &format!("{name}.bp"), c, spec.bp, 1),
        }
    }

    /// Four parallel branches, each followed by ReLU, concatenated in the
    /// order 1×1, 3×3, 5×5, pool.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape("inception input channels", self.spec.in_channels, c));
        }
        if h < 3 || w < 3 {
            return Err(Error::shape("inception input size", ">= 3x3", format!("{h}x{w}")));
        }
        let mut outs = Vec::with_capacity(4);
        for conv in [&self.branch1, &self.branch3, &self.branch5] {
            let y = conv.forward(g, p, x)?;
            outs.push(g.relu(y));
        }
        let pooled = g.max_pool2d(x, 3, 1, 1)?;
        let y = self.branch_pool.forward(g, p, pooled)?;
        outs.push(g.relu(y));
        g.concat(&outs)
    }

    pub fn apply<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        eager(params, x, |g, p, x| self.forward(g, p, x))
    }

    pub fn num_params(&self) -> usize {
        [&self.branch1, &self.branch3, &self.branch5, &self.branch_pool]
            .iter()
            .map(|c| c.num_params())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub channels: usize,
    pub key_dim: usize,
}

impl AttentionSpec {
    /// Key dimension `channels / 8`, at least 1.
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_key_dim(channels, (channels / 8).max(1))
    }

    pub fn with_key_dim(channels: usize, key_dim: usize) -> Result<Self> {
        if channels == 0 || key_dim == 0 {
            return Err(Error::InvalidConfig("attention widths must be positive".into()));
        }
        Ok(AttentionSpec { channels, key_dim })
    }
}

/// Scaled dot-product self-attention over the spatial positions of a feature
/// map, blended back into the input through a learned gate initialized to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub spec: AttentionSpec,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub output: Conv,
    pub gamma: ParamId,
}

impl SelfAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        spec: AttentionSpec,
    ) -> Self {
        let (c, kd) = (spec.channels, spec.key_dim);
        let pointwise = |store: &mut ParamStore<T>, init: &mut Initializer, part: &str, out: usize| {
            Conv::new(store, init, &format!("{name}.{part}"), c, out, 1, 1, 0, false)
        };
        let query = pointwise(store, init, "query", kd);
        let key = pointwise(store, init, "key", kd);
        let value = pointwise(store, init, "value", c);
        let output = pointwise(store, init, "output", c);
        let gamma = store.push(format!("{name}.gamma"), Tensor::zeros(&[1]));
        SelfAttention {
            spec,
            query,
            key,
            value,
            output,
            gamma,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        self.forward_with_map(g, p, x).map(|(y, _)| y)
    }

    /// Output plus the `[N, tokens, tokens]` attention weights, where row `i`
    /// holds the weights query position `i` puts on every key position.
    pub fn forward_with_map<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != self.spec.channels {
            return Err(Error::shape("attention input channels", self.spec.channels, c));
        }
        let tokens = h * w;
        let kd = self.spec.key_dim;
        let q = self.query.forward(g, p, x)?;
        let q = g.reshape(q, &[n, kd, tokens])?;
        let k = self.key.forward(g, p, x)?;
        let k = g.reshape(k, &[n, kd, tokens])?;
        let v = self.value.forward(g, p, x)?;
        let v = g.reshape(v, &[n, c, tokens])?;
        // scores[i][j] = q_i · k_j
        let scores = g.batch_matmul(q, k, true, false)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt(kd as f64));
        let attn = g.softmax_rows(scores)?;
        // mixed[:, i] = Σ_j v[:, j] · attn[i][j]
        let mixed = g.batch_matmul(v, attn, false, true)?;
        let mixed = g.reshape(mixed, &[n, c, h, w])?;
        let o = self.output.forward(g, p, mixed)?;
        let gated = g.mul_scalar(o, p.node(self.gamma))?;
        Ok((g.add(x, gated)?, attn))
    }

    pub fn attention_map<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xi = g.input(x.clone());
        let (_, attn) = self.forward_with_map(&mut g, &p, xi)?;
        Ok(g.value(attn).clone())
    }

    pub fn apply<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        eager(params, x, |g, p, x| self.forward(g, p, x))
    }

    pub fn num_params(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .map(|c| c.num_params())
            .sum::<usize>()
            + 1
    }
}

/// `x + F(x)` with `F = conv → norm → ReLU → conv → norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Self {
        ResidualBlock {
            conv1: Conv::same(store, init, &format!("{name}.conv1"), channels, channels, 3),
            norm1: Norm::new(store, &format!("{name}.norm1"), channels),
            conv2: Conv::same(store, init, &format!("{name}.conv2"), channels, channels, 3),
            norm2: Norm::new(store, &format!("{name}.norm2"), channels),
        }
    }

    /// The residual branch `F(x)` alone.
    pub fn branch<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = self.conv1.forward(g, p, x)?;
        let y = self.norm1.forward(g, p, y)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, p, y)?;
        self.norm2.forward(g, p, y)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let fx = self.branch(g, p, x)?;
        if g.value(fx).shape() != g.value(x).shape() {
            return Err(Error::shape(
                "residual branch output",
                format!("{:?}", g.value(x).shape()),
                format!("{:?}", g.value(fx).shape()),
            ));
        }
        g.add(x, fx)
    }

    pub fn apply<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        eager(params, x, |g, p, x| self.forward(g, p, x))
    }

    pub fn num_params(&self) -> usize {
        let c = self.conv1.out_channels;
        self.conv1.num_params() + self.conv2.num_params() + 4 * c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SppSpec {
    pub levels: Vec<usize>,
}

impl Default for SppSpec {
    fn default() -> Self {
        SppSpec {
            levels: vec![1, 2, 4],
        }
    }
}

impl SppSpec {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::InvalidConfig("pyramid levels must be non-empty and positive".into()));
        }
        Ok(SppSpec { levels })
    }

    pub fn bins(&self) -> usize {
        self.levels.iter().map(|l| l * l).sum()
    }

    pub fn output_len(&self, channels: usize) -> usize {
        channels * self.bins()
    }

    pub fn max_level(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(1)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.spp(x, &self.levels)
    }
}

/// Spatial pyramid max pooling of a `[N, C, H, W]` tensor.
pub fn spp_forward<T: Real>(spec: &SppSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = spec.forward(&mut g, xi)?;
    Ok(g.value(y).clone())
}

fn eager<T: Real>(
    params: &ParamStore<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, &Bound, NodeId) -> Result<NodeId>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xi = g.input(x.clone());
    let y = f(&mut g, &p, xi)?;
    Ok(g.value(y).clone())
}
