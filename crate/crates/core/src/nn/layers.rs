use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

use super::params::{Ctx, ParamId, ParamInit};

pub const LN_EPS: f64 = 1e-5;

/// Subsampler kernel and stride (two stages).
pub const SUBSAMPLE_KERNEL: usize = 3;
pub const SUBSAMPLE_STRIDE: usize = 2;
/// Shortest input accepted by [`Subsampler`].
pub const MIN_SUBSAMPLE_FRAMES: usize = 8;

/// Output length of the two-stage subsampler: each stage maps `T` to
/// `⌊(T − 1) / 2⌋` (kernel 3, stride 2, no padding).
pub fn subsampled_len(frames: usize) -> usize {
    let stage = |t: usize| (t.saturating_sub(SUBSAMPLE_KERNEL)) / SUBSAMPLE_STRIDE + 1;
    if frames < MIN_SUBSAMPLE_FRAMES {
        return 0;
    }
    stage(stage(frames))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut ParamInit<'_>, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: init.uniform(&format!("{name}.w"), &[input, output], input),
            b: init.zeros(&format!("{name}.b"), &[output]),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&ctx.p(self.w))?.add_row(&ctx.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit<'_>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: init.ones(&format!("{name}.g"), &[d]),
            beta: init.zeros(&format!("{name}.b"), &[d]),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&ctx.p(self.gamma), &ctx.p(self.beta), LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
}

/// Two-layer position-wise feed-forward.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(init: &mut ParamInit<'_>, name: &str, d: usize, ff: usize, act: Activation) -> Self {
        FeedForward {
            up: Linear::new(init, &format!("{name}.up"), d, ff),
            down: Linear::new(init, &format!("{name}.down"), ff, d),
            act,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(ctx, x)?;
        let h = match self.act {
            Activation::Swish => h.swish()?,
            Activation::Relu => h.relu()?,
        };
        self.down.forward(ctx, ctx.dropout(h)?)
    }
}

/// Learned per-head bias indexed by clamped relative offset `j − i`.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    pub max_dist: usize,
}

/// Boolean attention mask, `true` where a query may attend a key.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Dimension(format!("mask {rows}×{cols} given {} entries", allow.len())));
        }
        Ok(Mask { rows, cols, allow })
    }

    /// Query `t` may attend keys `0..=t`.
    pub fn causal(t: usize) -> Self {
        let allow = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        Mask { rows: t, cols: t, allow }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    fn additive(&self) -> Result<Tensor> {
        for r in 0..self.rows {
            if !self.allow[r * self.cols..(r + 1) * self.cols].iter().any(|&a| a) {
                return Err(Error::Contract(format!("attention mask row {r} masks every key")));
            }
        }
        let data = self
            .allow
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub rel: Option<RelPosBias>,
}

impl MultiHeadAttention {
    pub fn new(init: &mut ParamInit<'_>, name: &str, d: usize, heads: usize, rel_max_dist: Option<usize>) -> Self {
        assert!(heads > 0 && d % heads == 0, "model width {d} not divisible by {heads} heads");
        let rel = rel_max_dist.map(|m| RelPosBias {
            table: init.zeros(&format!("{name}.rel"), &[heads, 2 * m + 1]),
            max_dist: m,
        });
        MultiHeadAttention {
            query: Linear::new(init, &format!("{name}.q"), d, d),
            key: Linear::new(init, &format!("{name}.k"), d, d),
            value: Linear::new(init, &format!("{name}.v"), d, d),
            out: Linear::new(init, &format!("{name}.o"), d, d),
            heads,
            rel,
        }
    }

    /// Self-attention when `memory` is `None`, otherwise attention from
    /// `x` onto `memory`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        memory: Option<Var<'t>>,
        mask: Option<&Mask>,
    ) -> Result<Var<'t>> {
        let kv = memory.unwrap_or(x);
        let (tq, tk) = (x.rows(), kv.rows());
        if tk == 0 {
            return Err(Error::Contract("attention over an empty key sequence".into()));
        }
        let additive = match mask {
            Some(m) if m.rows != tq || m.cols != tk => {
                return Err(Error::Dimension(format!(
                    "mask {}×{} for {tq}×{tk} scores",
                    m.rows, m.cols
                )))
            }
            Some(m) => Some(m.additive()?),
            None => None,
        };
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, kv)?;
        let v = self.value.forward(ctx, kv)?;
        let d = q.cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let mut scores = qh.matmul_nt(&kh)?.scale(scale)?;
            if let (Some(rel), None) = (&self.rel, memory) {
                scores = scores.add(&ctx.p(rel.table).rel_bias(h, tq, rel.max_dist)?)?;
            }
            if let Some(m) = &additive {
                scores = scores.add_const(m)?;
            }
            let probs = scores.softmax(1)?;
            ctx.record_attention(&probs);
            outs.push(ctx.dropout(probs)?.matmul(&vh)?);
        }
        self.out.forward(ctx, Var::concat_cols(&outs)?)
    }
}

/// Conformer convolution module: pointwise → GLU → depthwise → norm →
/// swish → pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub fn new(init: &mut ParamInit<'_>, name: &str, d: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd, got {kernel}");
        ConvModule {
            pointwise_in: Linear::new(init, &format!("{name}.pw1"), d, 2 * d),
            depthwise: init.uniform(&format!("{name}.dw.w"), &[kernel, d], kernel),
            depthwise_bias: init.zeros(&format!("{name}.dw.b"), &[d]),
            norm: LayerNorm::new(init, &format!("{name}.norm"), d),
            pointwise_out: Linear::new(init, &format!("{name}.pw2"), d, d),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.pointwise_in.forward(ctx, x)?.glu()?;
        let h = h
            .depthwise_conv(&ctx.p(self.depthwise))?
            .add_row(&ctx.p(self.depthwise_bias))?;
        let h = self.norm.forward(ctx, h)?.swish()?;
        ctx.dropout(self.pointwise_out.forward(ctx, h)?)
    }
}

/// Macaron Conformer block with pre-norm residual sub-layers.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1_norm: LayerNorm,
    pub ff1: FeedForward,
    pub att_norm: LayerNorm,
    pub att: MultiHeadAttention,
    pub conv_norm: LayerNorm,
    pub conv: ConvModule,
    pub ff2_norm: LayerNorm,
    pub ff2: FeedForward,
    pub out_norm: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub kernel: usize,
    pub max_dist: usize,
}

impl ConformerBlock {
    pub fn new(init: &mut ParamInit<'_>, name: &str, dims: BlockDims) -> Self {
        let BlockDims { d, heads, ff, kernel, max_dist } = dims;
        ConformerBlock {
            ff1_norm: LayerNorm::new(init, &format!("{name}.ff1_norm"), d),
            ff1: FeedForward::new(init, &format!("{name}.ff1"), d, ff, Activation::Swish),
            att_norm: LayerNorm::new(init, &format!("{name}.att_norm"), d),
            att: MultiHeadAttention::new(init, &format!("{name}.att"), d, heads, Some(max_dist)),
            conv_norm: LayerNorm::new(init, &format!("{name}.conv_norm"), d),
            conv: ConvModule::new(init, &format!("{name}.conv"), d, kernel),
            ff2_norm: LayerNorm::new(init, &format!("{name}.ff2_norm"), d),
            ff2: FeedForward::new(init, &format!("{name}.ff2"), d, ff, Activation::Swish),
            out_norm: LayerNorm::new(init, &format!("{name}.out_norm"), d),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.ff1.forward(ctx, self.ff1_norm.forward(ctx, x)?)?;
        let x = x.add(&ctx.dropout(h)?.scale(0.5)?)?;
        let h = self.att.forward(ctx, self.att_norm.forward(ctx, x)?, None, None)?;
        let x = x.add(&ctx.dropout(h)?)?;
        let h = self.conv.forward(ctx, self.conv_norm.forward(ctx, x)?)?;
        let x = x.add(&h)?;
        let h = self.ff2.forward(ctx, self.ff2_norm.forward(ctx, x)?)?;
        let x = x.add(&ctx.dropout(h)?.scale(0.5)?)?;
        self.out_norm.forward(ctx, x)
    }
}

pub fn run_blocks<'t>(ctx: &Ctx<'t>, blocks: &[ConformerBlock], mut x: Var<'t>) -> Result<Var<'t>> {
    for b in blocks {
        x = b.forward(ctx, x)?;
    }
    Ok(x)
}

/// Two stride-2 convolutions over time (kernel 3, no padding) with swish,
/// then a linear projection to the model width.
#[derive(Clone, Debug)]
pub struct Subsampler {
    pub conv1: Linear,
    pub conv2: Linear,
    pub proj: Linear,
}

impl Subsampler {
    pub fn new(init: &mut ParamInit<'_>, name: &str, feat_dim: usize, channels: usize, d: usize) -> Self {
        let k = SUBSAMPLE_KERNEL;
        Subsampler {
            conv1: Linear::new(init, &format!("{name}.conv1"), k * feat_dim, channels),
            conv2: Linear::new(init, &format!("{name}.conv2"), k * channels, channels),
            proj: Linear::new(init, &format!("{name}.proj"), channels, d),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let t = x.rows();
        if t < MIN_SUBSAMPLE_FRAMES {
            return Err(Error::InputTooShort {
                frames: t,
                required: MIN_SUBSAMPLE_FRAMES,
            });
        }
        let (k, s) = (SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE);
        let h = self.conv1.forward(ctx, x.unfold(k, s, 0)?)?.swish()?;
        let h = self.conv2.forward(ctx, h.unfold(k, s, 0)?)?.swish()?;
        self.proj.forward(ctx, h)
    }
}

/// Sinusoidal absolute position table `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_att: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_att: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// Autoregressive transformer decoder with teacher forcing.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub out_norm: LayerNorm,
    pub out: Linear,
    pub d: usize,
}

impl Decoder {
    pub fn new(init: &mut ParamInit<'_>, name: &str, vocab: usize, dims: BlockDims, blocks: usize) -> Self {
        let BlockDims { d, heads, ff, .. } = dims;
        let blocks = (0..blocks)
            .map(|i| {
                let n = format!("{name}.block{i}");
                DecoderBlock {
                    self_norm: LayerNorm::new(init, &format!("{n}.self_norm"), d),
                    self_att: MultiHeadAttention::new(init, &format!("{n}.self_att"), d, heads, None),
                    cross_norm: LayerNorm::new(init, &format!("{n}.cross_norm"), d),
                    cross_att: MultiHeadAttention::new(init, &format!("{n}.cross_att"), d, heads, None),
                    ff_norm: LayerNorm::new(init, &format!("{n}.ff_norm"), d),
                    ff: FeedForward::new(init, &format!("{n}.ff"), d, ff, Activation::Relu),
                }
            })
            .collect();
        Decoder {
            embed: init.uniform(&format!("{name}.embed"), &[vocab, d], d),
            blocks,
            out_norm: LayerNorm::new(init, &format!("{name}.out_norm"), d),
            out: Linear::new(init, &format!("{name}.out"), d, vocab),
            d,
        }
    }

    /// Logits `[|inputs| × V]`; row `t` sees `inputs[..=t]` and all of
    /// `memory`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, inputs: &[usize], memory: Var<'t>) -> Result<Var<'t>> {
        if memory.rows() == 0 {
            return Err(Error::Contract("decoder memory is empty".into()));
        }
        if inputs.is_empty() {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        let u = inputs.len();
        let pos = ctx.tape.leaf(sinusoidal_positions(u, self.d));
        let mut x = ctx
            .p(self.embed)
            .gather_rows(inputs)?
            .scale((self.d as f64).sqrt())?
            .add(&pos)?;
        x = ctx.dropout(x)?;
        let causal = Mask::causal(u);
        for b in &self.blocks {
            let h = b.self_att.forward(ctx, b.self_norm.forward(ctx, x)?, None, Some(&causal))?;
            x = x.add(&ctx.dropout(h)?)?;
            let h = b.cross_att.forward(ctx, b.cross_norm.forward(ctx, x)?, Some(memory), None)?;
            x = x.add(&ctx.dropout(h)?)?;
            let h = b.ff.forward(ctx, b.ff_norm.forward(ctx, x)?)?;
            x = x.add(&ctx.dropout(h)?)?;
        }
        self.out.forward(ctx, self.out_norm.forward(ctx, x)?)
    }
}
