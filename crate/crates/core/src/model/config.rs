use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::Fields;
use crate::nn::BlockDims;

/// System variants: SIMO baselines, CSE and its two ablations, SOT and
/// the CSE-SOT hybrid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SimoPit,
    SimoHeat,
    SimoJointHeat,
    Cse,
    CseNoPpe,
    CseNoMix,
    Sot,
    CseSot,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::SimoPit,
        Variant::SimoHeat,
        Variant::SimoJointHeat,
        Variant::Cse,
        Variant::CseNoPpe,
        Variant::CseNoMix,
        Variant::Sot,
        Variant::CseSot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SimoPit => "simo_pit",
            Variant::SimoHeat => "simo_heat",
            Variant::SimoJointHeat => "simo_joint_heat",
            Variant::Cse => "cse",
            Variant::CseNoPpe => "cse_no_ppe",
            Variant::CseNoMix => "cse_no_mix",
            Variant::Sot => "sot",
            Variant::CseSot => "cse_sot",
        }
    }

    pub fn is_simo(self) -> bool {
        matches!(self, Variant::SimoPit | Variant::SimoHeat | Variant::SimoJointHeat)
    }

    /// Variants with a cross-encoder.
    pub fn has_cross(self) -> bool {
        matches!(self, Variant::Cse | Variant::CseNoPpe | Variant::CseNoMix | Variant::CseSot)
    }

    pub fn has_decoder(self) -> bool {
        matches!(self, Variant::Sot | Variant::CseSot)
    }

    /// Variants trained with one CTC over time-concatenated branch outputs.
    pub fn uses_joint_heat(self) -> bool {
        matches!(
            self,
            Variant::SimoJointHeat | Variant::Cse | Variant::CseNoPpe | Variant::CseNoMix
        )
    }

    pub fn uses_ppe(self) -> bool {
        matches!(self, Variant::Cse | Variant::CseNoMix | Variant::CseSot)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

/// Model topology and dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub feat_dim: usize,
    pub subsample_channels: usize,
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub kernel: usize,
    pub max_dist: usize,
    /// Extra stride-1 convolution after subsampling (the full-scale "mix
    /// encoder" CNN layer).
    pub mix_conv: bool,
    pub mix_blocks: usize,
    /// Speaker-differentiator blocks per branch.
    pub spkr_blocks: usize,
    pub cross_blocks: usize,
    pub rec_blocks: usize,
    pub plain_blocks: usize,
    pub dec_blocks: usize,
    pub dec_ff: usize,
    pub vocab: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Test hook: skip the cross-encoder entirely (Ŝ = S).
    #[doc(hidden)]
    pub bypass_cross: bool,
}

impl ModelConfig {
    /// CPU-sized defaults with the full topology.
    pub fn desk(variant: Variant) -> Self {
        let mut c = ModelConfig {
            variant,
            feat_dim: 8,
            subsample_channels: 32,
            d: 32,
            heads: 4,
            ff: 64,
            kernel: 7,
            max_dist: 64,
            mix_conv: false,
            mix_blocks: 1,
            spkr_blocks: 2,
            cross_blocks: 1,
            rec_blocks: 2,
            plain_blocks: 0,
            dec_blocks: 0,
            dec_ff: 64,
            vocab: 20,
            seed: 0,
            dropout: 0.1,
            bypass_cross: false,
        };
        c.fit_stages();
        c
    }

    /// Full-size topology (d=256, 4 heads, 1024-wide macaron feed-forward;
    /// 4 SpkrDiff blocks per branch; 2 cross + 6 recognition vs 8
    /// recognition; 16-block SOT encoder, 8-block decoder with 2048 ff).
    pub fn full(variant: Variant) -> Self {
        let mut c = ModelConfig {
            variant,
            feat_dim: 80,
            subsample_channels: 256,
            d: 256,
            heads: 4,
            ff: 1024,
            kernel: 31,
            max_dist: 64,
            mix_conv: true,
            mix_blocks: 0,
            spkr_blocks: 4,
            cross_blocks: 2,
            rec_blocks: 6,
            plain_blocks: 16,
            dec_blocks: 8,
            dec_ff: 2048,
            vocab: 5000,
            seed: 0,
            dropout: 0.1,
            bypass_cross: false,
        };
        c.fit_stages();
        c
    }

    /// Zeroes the stages a variant does not have. SIMO folds the cross
    /// blocks into its recognition stack so depth matches CSE.
    fn fit_stages(&mut self) {
        let v = self.variant;
        if v.is_simo() {
            self.rec_blocks += self.cross_blocks;
            self.cross_blocks = 0;
        }
        if v == Variant::Sot {
            if self.plain_blocks == 0 {
                self.plain_blocks = self.mix_blocks
                    + 2 * self.spkr_blocks
                    + self.cross_blocks
                    + self.rec_blocks;
            }
            self.mix_conv = false;
            self.mix_blocks = 0;
            self.spkr_blocks = 0;
            self.cross_blocks = 0;
            self.rec_blocks = 0;
        } else {
            self.plain_blocks = 0;
        }
        if v.has_decoder() {
            if self.dec_blocks == 0 {
                self.dec_blocks = 2;
            }
        } else {
            self.dec_blocks = 0;
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d: self.d,
            heads: self.heads,
            ff: self.ff,
            kernel: self.kernel,
            max_dist: self.max_dist,
        }
    }

    pub fn decoder_dims(&self) -> BlockDims {
        BlockDims {
            ff: self.dec_ff,
            ..self.block_dims()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel={} must be odd", self.kernel));
        }
        if self.vocab <= crate::losses::FIRST_WORD {
            return bad(format!("vocab={} leaves no room beyond reserved ids", self.vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout={} outside [0, 1)", self.dropout));
        }
        if self.cross_blocks > 0 && !v.has_cross() {
            return bad(format!("{v} has no cross-encoder but cross_blocks={}", self.cross_blocks));
        }
        if self.dec_blocks > 0 && !v.has_decoder() {
            return bad(format!("{v} has no decoder but dec_blocks={}", self.dec_blocks));
        }
        if v.has_decoder() && self.dec_blocks == 0 {
            return bad(format!("{v} needs at least one decoder block"));
        }
        if v == Variant::Sot {
            if self.mix_blocks + self.spkr_blocks + self.rec_blocks > 0 || self.mix_conv {
                return bad("sot uses the plain encoder only".into());
            }
        } else if self.plain_blocks > 0 {
            return bad(format!("{v} has no plain encoder but plain_blocks={}", self.plain_blocks));
        }
        Ok(())
    }

    /// Reads overrides from `key=value` fields, then refits stages for the
    /// (possibly new) variant. Stage counts given explicitly are kept.
    pub fn from_fields(fields: &mut Fields) -> Result<Self> {
        let mut variant = Variant::Cse;
        fields.take("variant", &mut variant)?;
        let mut c = ModelConfig::desk(variant);
        if let Some(preset) = fields.take_raw("preset") {
            c = match preset.as_str() {
                "desk" => ModelConfig::desk(variant),
                "full" => ModelConfig::full(variant),
                other => return Err(Error::Config(format!("unknown preset {other}"))),
            };
        }
        fields.take("feat_dim", &mut c.feat_dim)?;
        fields.take("subsample_channels", &mut c.subsample_channels)?;
        fields.take("d", &mut c.d)?;
        fields.take("heads", &mut c.heads)?;
        fields.take("ff", &mut c.ff)?;
        fields.take("kernel", &mut c.kernel)?;
        fields.take("max_dist", &mut c.max_dist)?;
        fields.take("mix_conv", &mut c.mix_conv)?;
        fields.take("mix_blocks", &mut c.mix_blocks)?;
        fields.take("spkr_blocks", &mut c.spkr_blocks)?;
        fields.take("cross_blocks", &mut c.cross_blocks)?;
        fields.take("rec_blocks", &mut c.rec_blocks)?;
        fields.take("plain_blocks", &mut c.plain_blocks)?;
        fields.take("dec_blocks", &mut c.dec_blocks)?;
        fields.take("dec_ff", &mut c.dec_ff)?;
        fields.take("vocab", &mut c.vocab)?;
        fields.take("seed", &mut c.seed)?;
        fields.take("dropout", &mut c.dropout)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "variant={}\nfeat_dim={}\nsubsample_channels={}\nd={}\nheads={}\nff={}\nkernel={}\n\
             max_dist={}\nmix_conv={}\nmix_blocks={}\nspkr_blocks={}\ncross_blocks={}\n\
             rec_blocks={}\nplain_blocks={}\ndec_blocks={}\ndec_ff={}\nvocab={}\nseed={}\ndropout={}\n",
            self.variant,
            self.feat_dim,
            self.subsample_channels,
            self.d,
            self.heads,
            self.ff,
            self.kernel,
            self.max_dist,
            self.mix_conv,
            self.mix_blocks,
            self.spkr_blocks,
            self.cross_blocks,
            self.rec_blocks,
            self.plain_blocks,
            self.dec_blocks,
            self.dec_ff,
            self.vocab,
            self.seed,
            self.dropout
        )
    }
}
