//! Assembles layers into every system variant and exposes one forward entry
//! point per variant.

mod config;
mod count;
mod matrix;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{ModelConfig, Variant};
pub use count::count_parameters;
pub use matrix::{read_matrix, write_matrix};

use crate::autodiff::serialize::{load_params, save_params};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::SOS;
use crate::nn::{run_blocks, ConformerBlock, Ctx, Decoder, Linear, ParamId, ParamInit, ParamStore, Subsampler};

/// Mixture encoding and the two branch outputs, all of length `L`.
#[derive(Clone, Copy, Debug)]
pub struct BranchEncodings<'t> {
    pub x_hat: Var<'t>,
    pub s1: Var<'t>,
    pub s2: Var<'t>,
}

#[derive(Clone, Debug)]
struct Network {
    subsample: Subsampler,
    mix_conv: Option<Linear>,
    mix: Vec<ConformerBlock>,
    spkr: [Vec<ConformerBlock>; 2],
    cross: Vec<ConformerBlock>,
    /// Partition-wise embedding, one row per partition {X̂, S1, S2}.
    ppe: Option<ParamId>,
    rec: Vec<ConformerBlock>,
    plain: Vec<ConformerBlock>,
    /// Shared frame-level vocabulary projection (CTC head).
    out: Linear,
    decoder: Option<Decoder>,
}

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Network,
}

fn blocks(init: &mut ParamInit<'_>, prefix: &str, n: usize, cfg: &ModelConfig) -> Vec<ConformerBlock> {
    (0..n)
        .map(|i| ConformerBlock::new(init, &format!("{prefix}.block{i}"), cfg.block_dims()))
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let init = &mut ParamInit::new(&mut params, config.seed);
        let c = &config;
        let v = c.variant;
        let subsample = Subsampler::new(init, "subsample", c.feat_dim, c.subsample_channels, c.d);
        let mix_conv = c.mix_conv.then(|| Linear::new(init, "mix.conv", 3 * c.d, c.d));
        let mix = blocks(init, "mix", c.mix_blocks, c);
        let spkr = [blocks(init, "spkr1", c.spkr_blocks, c), blocks(init, "spkr2", c.spkr_blocks, c)];
        let cross = blocks(init, "cross", c.cross_blocks, c);
        let ppe = (v.has_cross() && v.uses_ppe()).then(|| init.uniform("cross.ppe", &[3, c.d], c.d));
        let rec = blocks(init, "rec", c.rec_blocks, c);
        let plain = blocks(init, "plain", c.plain_blocks, c);
        let out = Linear::new(init, "out", c.d, c.vocab);
        let decoder = v
            .has_decoder()
            .then(|| Decoder::new(init, "dec", c.vocab, c.decoder_dims(), c.dec_blocks));
        Ok(Model {
            config,
            params,
            net: Network {
                subsample,
                mix_conv,
                mix,
                spkr,
                cross,
                ppe,
                rec,
                plain,
                out,
                decoder,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn load(config: ModelConfig, checkpoint: &Path) -> Result<Self> {
        let mut m = Model::new(config)?;
        m.params.load_named(load_params(checkpoint)?)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.params.to_named())
    }

    fn expect(&self, ok: bool, what: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} is not available for variant {}", self.variant())))
        }
    }

    /// Parameter handle for the partition embedding, when the variant has one.
    pub fn ppe_param(&self) -> Option<ParamId> {
        self.net.ppe
    }

    /// Subsampling, mix encoder and the two SpkrDiff branches.
    pub fn encode_branches<'t>(&self, ctx: &Ctx<'t>, features: &Tensor) -> Result<BranchEncodings<'t>> {
        self.expect(self.variant() != Variant::Sot, "branch encoding")?;
        let net = &self.net;
        let mut x = net.subsample.forward(ctx, ctx.tape.leaf(features.clone()))?;
        if let Some(conv) = &net.mix_conv {
            x = conv.forward(ctx, x.unfold(3, 1, 1)?)?.swish()?;
        }
        let x_hat = run_blocks(ctx, &net.mix, x)?;
        let s1 = run_blocks(ctx, &net.spkr[0], x_hat)?;
        let s2 = run_blocks(ctx, &net.spkr[1], x_hat)?;
        Ok(BranchEncodings { x_hat, s1, s2 })
    }

    /// Joint sequence fed to the cross blocks, `[X̂; S1; S2]` (or `[S1; S2]`
    /// without the mixture partition) plus partition embeddings. Returns the
    /// sequence and the row offsets of the S1 and S2 partitions.
    pub fn joint_sequence<'t>(&self, ctx: &Ctx<'t>, b: &BranchEncodings<'t>) -> Result<(Var<'t>, [usize; 2])> {
        self.expect(self.variant().has_cross(), "cross encoding")?;
        let l = b.s1.rows();
        if b.s2.rows() != l || b.x_hat.rows() != l {
            return Err(Error::Contract(format!(
                "partition lengths differ: X̂ {}, S1 {}, S2 {}",
                b.x_hat.rows(),
                l,
                b.s2.rows()
            )));
        }
        let with_mix = self.variant() != Variant::CseNoMix;
        let (parts, ids): (Vec<Var<'t>>, Vec<usize>) = if with_mix {
            (vec![b.x_hat, b.s1, b.s2], vec![0, 1, 2])
        } else {
            (vec![b.s1, b.s2], vec![1, 2])
        };
        let mut joint = Var::concat_rows(&parts)?;
        if let Some(ppe) = self.net.ppe {
            let rows: Vec<usize> = ids.iter().flat_map(|&p| std::iter::repeat(p).take(l)).collect();
            joint = joint.add(&ctx.p(ppe).gather_rows(&rows)?)?;
        }
        let first = if with_mix { l } else { 0 };
        Ok((joint, [first, first + l]))
    }

    /// Cross-encoder: joint sequence through the cross blocks, then clipped
    /// back to the two branch partitions (Ŝ1, Ŝ2).
    pub fn cross_encode<'t>(&self, ctx: &Ctx<'t>, b: &BranchEncodings<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.expect(self.variant().has_cross(), "cross encoding")?;
        if self.config.bypass_cross {
            return Ok((b.s1, b.s2));
        }
        let l = b.s1.rows();
        let (joint, [o1, o2]) = self.joint_sequence(ctx, b)?;
        let y = run_blocks(ctx, &self.net.cross, joint)?;
        Ok((y.slice_rows(o1, l)?, y.slice_rows(o2, l)?))
    }

    fn recognize<'t>(&self, ctx: &Ctx<'t>, s: Var<'t>) -> Result<Var<'t>> {
        run_blocks(ctx, &self.net.rec, s)
    }

    fn project<'t>(&self, ctx: &Ctx<'t>, h: Var<'t>) -> Result<Var<'t>> {
        self.net.out.forward(ctx, h)
    }

    /// SIMO forward: per-branch frame logits `(H1, H2)`, each `L×V`.
    pub fn forward_simo<'t>(&self, ctx: &Ctx<'t>, features: &Tensor) -> Result<(Var<'t>, Var<'t>)> {
        self.expect(self.variant().is_simo(), "forward_simo")?;
        let b = self.encode_branches(ctx, features)?;
        let h1 = self.project(ctx, self.recognize(ctx, b.s1)?)?;
        let h2 = self.project(ctx, self.recognize(ctx, b.s2)?)?;
        Ok((h1, h2))
    }

    /// Recognition-stack hidden states of both branches concatenated along
    /// time, `2L×d`.
    pub fn cse_hidden<'t>(&self, ctx: &Ctx<'t>, features: &Tensor) -> Result<Var<'t>> {
        self.expect(self.variant().has_cross(), "cse_hidden")?;
        let b = self.encode_branches(ctx, features)?;
        let (s1, s2) = self.cross_encode(ctx, &b)?;
        let h1 = self.recognize(ctx, s1)?;
        let h2 = self.recognize(ctx, s2)?;
        Var::concat_rows(&[h1, h2])
    }

    /// CSE forward: `[H1; H2]`, `2L×V`.
    pub fn forward_cse<'t>(&self, ctx: &Ctx<'t>, features: &Tensor) -> Result<Var<'t>> {
        self.expect(
            self.variant().has_cross() && !self.variant().has_decoder(),
            "forward_cse",
        )?;
        let h = self.cse_hidden(ctx, features)?;
        self.project(ctx, h)
    }

    /// Frame logits of the time-concatenated stream for any SIMO or CSE
    /// variant (`[H1; H2]`).
    pub fn concat_logits<'t>(&self, ctx: &Ctx<'t>, features: &Tensor) -> Result<Var<'t>> {
        if self.variant().is_simo() {
            let (h1, h2) = self.forward_simo(ctx, features)?;
            Var::concat_rows(&[h1, h2])
        } else {
            self.forward_cse(ctx, features)
        }
    }

    /// Encoder output used as decoder memory and CTC input: plain encoder
    /// (`L×d`) for SOT, concatenated CSE hidden states (`2L×d`) for CSE-SOT.
    pub fn encode_memory<'t>(&self, ctx: &Ctx<'t>, features: &Tensor) -> Result<Var<'t>> {
        match self.variant() {
            Variant::Sot => {
                let x = self.net.subsample.forward(ctx, ctx.tape.leaf(features.clone()))?;
                run_blocks(ctx, &self.net.plain, x)
            }
            Variant::CseSot => self.cse_hidden(ctx, features),
            v => Err(Error::Config(format!("{v} has no decoder memory"))),
        }
    }

    /// Teacher-forced decoder logits for `⟨sos⟩ ⊕ serialized`; row `t`
    /// scores token `t` of `serialized ⊕ ⟨eos⟩`.
    pub fn decode_logits<'t>(&self, ctx: &Ctx<'t>, memory: Var<'t>, serialized: &[usize]) -> Result<Var<'t>> {
        let dec = self
            .net
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no decoder", self.variant())))?;
        let mut inputs = Vec::with_capacity(serialized.len() + 1);
        inputs.push(SOS);
        inputs.extend_from_slice(serialized);
        dec.forward(ctx, &inputs, memory)
    }

    /// Decoder logits for an explicit input prefix (already starting with
    /// `⟨sos⟩`).
    pub fn decoder_step<'t>(&self, ctx: &Ctx<'t>, memory: Var<'t>, prefix: &[usize]) -> Result<Var<'t>> {
        let dec = self
            .net
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no decoder", self.variant())))?;
        dec.forward(ctx, prefix, memory)
    }

    /// Vocabulary projection of decoder memory (the hybrid objective's CTC
    /// branch).
    pub fn forward_ctc_head<'t>(&self, ctx: &Ctx<'t>, memory: Var<'t>) -> Result<Var<'t>> {
        self.project(ctx, memory)
    }

    /// CTC logits and decoder logits for the hybrid SOT objective.
    fn forward_hybrid<'t>(&self, ctx: &Ctx<'t>, features: &Tensor, serialized: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        let memory = self.encode_memory(ctx, features)?;
        let ctc = self.project(ctx, memory)?;
        let dec = self.decode_logits(ctx, memory, serialized)?;
        Ok((ctc, dec))
    }

    /// SOT forward: CTC logits `L×V` and decoder logits.
    pub fn forward_sot<'t>(&self, ctx: &Ctx<'t>, features: &Tensor, serialized: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        self.expect(self.variant() == Variant::Sot, "forward_sot")?;
        self.forward_hybrid(ctx, features, serialized)
    }

    /// CSE-SOT forward: CTC logits `2L×V` and decoder logits over the
    /// `2L` concatenated memory.
    pub fn forward_cse_sot<'t>(&self, ctx: &Ctx<'t>, features: &Tensor, serialized: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        self.expect(self.variant() == Variant::CseSot, "forward_cse_sot")?;
        self.forward_hybrid(ctx, features, serialized)
    }

    /// Post-softmax attention of every cross block, head by head (rows are
    /// queries over the joint sequence).
    pub fn cross_attention(&self, features: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        self.expect(self.variant().has_cross(), "attention dump")?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let b = self.encode_branches(&ctx, features)?;
        let (mut x, _) = self.joint_sequence(&ctx, &b)?;
        let mut out = Vec::with_capacity(self.net.cross.len());
        for block in &self.net.cross {
            ctx.start_capture();
            x = block.forward(&ctx, x)?;
            out.push(ctx.take_capture());
        }
        Ok(out)
    }

    /// Writes `cross{b}_head{h}.txt` matrix files into `out_dir`.
    pub fn dump_attention(&self, features: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let maps = self.cross_attention(features)?;
        fs::create_dir_all(out_dir)?;
        let mut paths = Vec::new();
        for (b, heads) in maps.iter().enumerate() {
            for (h, m) in heads.iter().enumerate() {
                let path = out_dir.join(format!("cross{b}_head{h}.txt"));
                write_matrix(&path, m)?;
                paths.push(path);
            }
        }
        Ok(paths)
    }
}

/// Elementwise mean of parameter files with identical names and shapes.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Vec<(String, Tensor)>> {
    let (first, rest) = paths
        .split_first()
        .ok_or_else(|| Error::Checkpoint("no checkpoints to average".into()))?;
    let mut acc = load_params(first)?;
    for p in rest {
        let next = load_params(p)?;
        if next.len() != acc.len() {
            return Err(Error::Checkpoint(format!(
                "{} has {} parameters, expected {}",
                p.display(),
                next.len(),
                acc.len()
            )));
        }
        for ((name, sum), (n2, t)) in acc.iter_mut().zip(next) {
            if *name != n2 || sum.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: parameter {n2} {:?} does not match {name} {:?}",
                    p.display(),
                    t.shape(),
                    sum.shape()
                )));
            }
            for (a, b) in sum.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
    }
    let k = paths.len() as f64;
    for (_, t) in acc.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= k);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests;
