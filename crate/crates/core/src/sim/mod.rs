//! Toy two-talker corpus: token patterns plus speaker voices plus noise,
//! delayed-offset mixing, speed perturbation and overlap bucketing.

mod corpus;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use corpus::{
    build_corpus, corpus_checksum, load_split, read_features, write_features, CorpusSpec, Example, SplitSpec,
    SPLITS,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{Transcript, FIRST_WORD};
use crate::nn::derive_seed;

/// Rendering constants shared by every utterance of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub feat_dim: usize,
    pub vocab: usize,
    pub frames_per_token: usize,
    /// Standard deviation of the per-frame Gaussian noise.
    pub sigma: f64,
    /// Norm of each speaker's voice vector.
    pub voice_scale: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            feat_dim: 8,
            vocab: 20,
            frames_per_token: 8,
            sigma: 0.1,
            voice_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub speaker_id: usize,
    pub tokens: Transcript,
    pub features: Tensor,
    pub voice: Tensor,
}

/// Fixed token patterns and speaker voices derived from one seed.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub config: RenderConfig,
    seed: u64,
    patterns: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Renderer {
    pub fn new(config: RenderConfig, seed: u64) -> Result<Self> {
        if config.vocab <= FIRST_WORD || config.feat_dim == 0 || config.frames_per_token == 0 {
            return Err(Error::Config(format!("unusable render config {config:?}")));
        }
        if !(config.sigma >= 0.0 && config.voice_scale >= 0.0) {
            return Err(Error::Config("sigma and voice_scale must be non-negative".into()));
        }
        let patterns = (0..config.vocab)
            .map(|k| {
                if k < FIRST_WORD {
                    vec![0.0; config.feat_dim]
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("pattern{k}")));
                    unit_vector(&mut rng, config.feat_dim)
                }
            })
            .collect();
        Ok(Renderer { config, seed, patterns })
    }

    pub fn voice(&self, speaker: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("voice{speaker}")));
        let v = unit_vector(&mut rng, self.config.feat_dim);
        Tensor::vector(v.into_iter().map(|x| x * self.config.voice_scale).collect())
    }

    /// Random word sequence without immediate repeats.
    pub fn sample_tokens<R: Rng>(&self, rng: &mut R, length: usize) -> Transcript {
        let mut out: Vec<usize> = Vec::with_capacity(length);
        while out.len() < length {
            let k = rng.gen_range(FIRST_WORD..self.config.vocab);
            if out.last() != Some(&k) || self.config.vocab - FIRST_WORD == 1 {
                out.push(k);
            }
        }
        Transcript::new(out)
    }

    pub fn render_utterance<R: Rng>(&self, rng: &mut R, speaker_id: usize, length: usize) -> Result<ToyUtterance> {
        let tokens = self.sample_tokens(rng, length);
        self.render(rng, speaker_id, tokens)
    }

    /// Each token becomes `frames_per_token` frames of pattern + voice + noise.
    pub fn render<R: Rng>(&self, rng: &mut R, speaker_id: usize, tokens: Transcript) -> Result<ToyUtterance> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot render an empty utterance".into()));
        }
        if let Some(&k) = tokens.iter().find(|&&k| k < FIRST_WORD || k >= self.config.vocab) {
            return Err(Error::Contract(format!("token {k} is not a word")));
        }
        let c = &self.config;
        let voice = self.voice(speaker_id);
        let t = tokens.len() * c.frames_per_token;
        let mut data = Vec::with_capacity(t * c.feat_dim);
        for &k in tokens.iter() {
            for _ in 0..c.frames_per_token {
                for (p, v) in self.patterns[k].iter().zip(voice.data()) {
                    let noise = if c.sigma > 0.0 {
                        let n: f64 = StandardNormal.sample(rng);
                        c.sigma * n
                    } else {
                        0.0
                    };
                    data.push(p + v + noise);
                }
            }
        }
        Ok(ToyUtterance {
            speaker_id,
            tokens,
            features: Tensor::new(vec![t, c.feat_dim], data)?,
            voice,
        })
    }
}

pub const SPEED_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

/// Nearest-neighbour resampling to `round(T / factor)` frames.
pub fn speed_perturb(u: &ToyUtterance, factor: f64) -> Result<ToyUtterance> {
    if !SPEED_FACTORS.contains(&factor) {
        return Err(Error::Contract(format!("speed factor {factor} not in {SPEED_FACTORS:?}")));
    }
    if factor == 1.0 {
        return Ok(u.clone());
    }
    let t = u.features.rows();
    let f = u.features.cols();
    let out_t = (t as f64 / factor).round() as usize;
    let mut data = Vec::with_capacity(out_t * f);
    for i in 0..out_t {
        let src = (((i as f64 + 0.5) * t as f64 / out_t as f64).floor() as usize).min(t - 1);
        data.extend_from_slice(u.features.row(src));
    }
    Ok(ToyUtterance {
        features: Tensor::new(vec![out_t, f], data)?,
        ..u.clone()
    })
}

/// Overlap bucket; `Single` is the no-overlap class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bucket {
    Single,
    Low,
    Median,
    High,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Single, Bucket::Low, Bucket::Median, Bucket::High];
    pub const OVERLAPPED: [Bucket; 3] = [Bucket::Low, Bucket::Median, Bucket::High];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Single => "single",
            Bucket::Low => "low",
            Bucket::Median => "median",
            Bucket::High => "high",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown bucket {s}")))
    }
}

/// 0 → single, (0, 0.2] → low, (0.2, 0.5] → median, (0.5, 1] → high.
pub fn bucket_of(ratio: f64) -> Result<Bucket> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("overlap ratio {ratio} outside [0, 1]")));
    }
    Ok(if ratio == 0.0 {
        Bucket::Single
    } else if ratio <= 0.2 {
        Bucket::Low
    } else if ratio <= 0.5 {
        Bucket::Median
    } else {
        Bucket::High
    })
}

/// Frames covered by two or more spans over frames covered by at least one.
/// Spans are half-open `[start, end)`.
pub fn overlap_ratio(spans: &[(usize, usize)]) -> Result<f64> {
    if spans.is_empty() {
        return Err(Error::Contract("overlap ratio needs at least one span".into()));
    }
    let mut events: Vec<(usize, i32)> = Vec::with_capacity(2 * spans.len());
    for &(s, e) in spans {
        if e < s {
            return Err(Error::Contract(format!("span [{s}, {e}) ends before it starts")));
        }
        if e > s {
            events.push((s, 1));
            events.push((e, -1));
        }
    }
    events.sort_unstable();
    let (mut covered, mut overlapped, mut depth, mut prev) = (0usize, 0usize, 0i32, 0usize);
    for (pos, delta) in events {
        let len = pos - prev;
        if depth >= 1 {
            covered += len;
        }
        if depth >= 2 {
            overlapped += len;
        }
        depth += delta;
        prev = pos;
    }
    Ok(if covered == 0 {
        0.0
    } else {
        overlapped as f64 / covered as f64
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub id: String,
    pub features: Tensor,
    /// Per speaker, ascending by start frame.
    pub transcripts: Vec<Transcript>,
    pub spans: Vec<(usize, usize)>,
    pub overlap_ratio: f64,
    pub bucket: Bucket,
}

impl MixtureExample {
    pub fn starts(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.0).collect()
    }
}

/// Single-talker example.
pub fn solo(u: &ToyUtterance) -> MixtureExample {
    MixtureExample {
        id: String::new(),
        features: u.features.clone(),
        transcripts: vec![u.tokens.clone()],
        spans: vec![(0, u.features.rows())],
        overlap_ratio: 0.0,
        bucket: Bucket::Single,
    }
}

/// Zero-padded sum with `u1` at `[0, T1)` and `u2` at `[delay, delay+T2)`.
pub fn mix(u1: &ToyUtterance, u2: &ToyUtterance, delay: i64) -> Result<MixtureExample> {
    if delay < 0 {
        return Err(Error::Contract(format!("negative delay {delay}")));
    }
    let f = u1.features.cols();
    if u2.features.cols() != f {
        return Err(Error::Dimension(format!("feature widths {f} and {}", u2.features.cols())));
    }
    let delay = delay as usize;
    let (t1, t2) = (u1.features.rows(), u2.features.rows());
    let total = t1.max(delay + t2);
    let mut data = vec![0.0; total * f];
    data[..t1 * f].copy_from_slice(u1.features.data());
    for (d, s) in data[delay * f..(delay + t2) * f].iter_mut().zip(u2.features.data()) {
        *d += s;
    }
    let spans = vec![(0, t1), (delay, delay + t2)];
    let ratio = overlap_ratio(&spans)?;
    Ok(MixtureExample {
        id: String::new(),
        features: Tensor::new(vec![total, f], data)?,
        transcripts: vec![u1.tokens.clone(), u2.tokens.clone()],
        spans,
        overlap_ratio: ratio,
        bucket: bucket_of(ratio)?,
    })
}
