use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{mix, solo, speed_perturb, Bucket, MixtureExample, RenderConfig, Renderer, SPEED_FACTORS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kv::{self, Fields};
use crate::losses::Transcript;
use crate::nn::derive_seed;
use crate::par::{self, Execution};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
const MAX_ATTEMPTS: usize = 1000;
const MANIFEST_HEADER: &str = "id\tn_speakers\tstarts\tratio\tbucket\ttokens_1\ttokens_2";

/// Example counts for one split. `mixed` draws the delay uniformly over
/// `[0, T1]`; the bucket counts rejection-sample it into that bucket.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub single: usize,
    pub mixed: usize,
    pub low: usize,
    pub median: usize,
    pub high: usize,
    pub speakers: usize,
    pub perturb: bool,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.single + self.mixed + self.low + self.median + self.high
    }

    /// Generation recipe of the `i`-th example.
    fn kind(&self, i: usize) -> Option<Option<Bucket>> {
        let mut i = i;
        if i < self.single {
            return None;
        }
        i -= self.single;
        if i < self.mixed {
            return Some(None);
        }
        i -= self.mixed;
        for (n, b) in [(self.low, Bucket::Low), (self.median, Bucket::Median), (self.high, Bucket::High)] {
            if i < n {
                return Some(Some(b));
            }
            i -= n;
        }
        unreachable!("index beyond split size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub render: RenderConfig,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub splits: [SplitSpec; 3],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            render: RenderConfig::default(),
            min_tokens: 3,
            max_tokens: 6,
            splits: [
                SplitSpec {
                    single: 2000,
                    mixed: 6000,
                    speakers: 100,
                    perturb: true,
                    ..SplitSpec::default()
                },
                SplitSpec {
                    single: 100,
                    mixed: 400,
                    speakers: 20,
                    ..SplitSpec::default()
                },
                SplitSpec {
                    single: 125,
                    low: 125,
                    median: 125,
                    high: 125,
                    speakers: 20,
                    ..SplitSpec::default()
                },
            ],
        }
    }
}

impl CorpusSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::new(kv::parse(text)?);
        let mut s = CorpusSpec::default();
        f.take("seed", &mut s.seed)?;
        f.take("feat_dim", &mut s.render.feat_dim)?;
        f.take("vocab", &mut s.render.vocab)?;
        f.take("frames_per_token", &mut s.render.frames_per_token)?;
        f.take("sigma", &mut s.render.sigma)?;
        f.take("voice_scale", &mut s.render.voice_scale)?;
        f.take("min_tokens", &mut s.min_tokens)?;
        f.take("max_tokens", &mut s.max_tokens)?;
        for (name, split) in SPLITS.iter().zip(s.splits.iter_mut()) {
            f.take(&format!("{name}.single"), &mut split.single)?;
            f.take(&format!("{name}.mixed"), &mut split.mixed)?;
            f.take(&format!("{name}.low"), &mut split.low)?;
            f.take(&format!("{name}.median"), &mut split.median)?;
            f.take(&format!("{name}.high"), &mut split.high)?;
            f.take(&format!("{name}.speakers"), &mut split.speakers)?;
            f.take(&format!("{name}.perturb"), &mut split.perturb)?;
        }
        f.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token range {}..={} is empty",
                self.min_tokens, self.max_tokens
            )));
        }
        for (name, s) in SPLITS.iter().zip(&self.splits) {
            let two = s.total() - s.single;
            if s.total() > 0 && s.speakers == 0 || two > 0 && s.speakers < 2 {
                return Err(Error::Config(format!("{name}: too few speakers ({})", s.speakers)));
            }
        }
        Renderer::new(self.render.clone(), self.seed).map(|_| ())
    }

    pub fn to_kv(&self) -> String {
        let r = &self.render;
        let mut out = format!(
            "seed={}\nfeat_dim={}\nvocab={}\nframes_per_token={}\nsigma={}\nvoice_scale={}\nmin_tokens={}\nmax_tokens={}\n",
            self.seed, r.feat_dim, r.vocab, r.frames_per_token, r.sigma, r.voice_scale, self.min_tokens, self.max_tokens
        );
        for (name, s) in SPLITS.iter().zip(&self.splits) {
            out += &format!(
                "{name}.single={}\n{name}.mixed={}\n{name}.low={}\n{name}.median={}\n{name}.high={}\n\
                 {name}.speakers={}\n{name}.perturb={}\n",
                s.single, s.mixed, s.low, s.median, s.high, s.speakers, s.perturb
            );
        }
        out
    }

    /// First speaker id of a split's pool; pools are disjoint across splits.
    fn speaker_base(&self, split: usize) -> usize {
        self.splits[..split].iter().map(|s| s.speakers).sum()
    }
}

fn utterance(
    spec: &CorpusSpec,
    renderer: &Renderer,
    rng: &mut ChaCha8Rng,
    speaker: usize,
    perturb: bool,
) -> Result<super::ToyUtterance> {
    let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let u = renderer.render_utterance(rng, speaker, len)?;
    if perturb {
        speed_perturb(&u, SPEED_FACTORS[rng.gen_range(0..SPEED_FACTORS.len())])
    } else {
        Ok(u)
    }
}

/// Generates example `index` of split `split` from its own sub-seed.
fn generate(spec: &CorpusSpec, renderer: &Renderer, split: usize, index: usize) -> Result<MixtureExample> {
    let s = &spec.splits[split];
    let name = SPLITS[split];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("{name}/{index}")));
    let base = spec.speaker_base(split);
    let a = base + rng.gen_range(0..s.speakers);
    let mut ex = match s.kind(index) {
        None => solo(&utterance(spec, renderer, &mut rng, a, s.perturb)?),
        Some(target) => {
            let b = loop {
                let b = base + rng.gen_range(0..s.speakers);
                if b != a {
                    break b;
                }
            };
            match target {
                None => {
                    let u1 = utterance(spec, renderer, &mut rng, a, s.perturb)?;
                    let u2 = utterance(spec, renderer, &mut rng, b, s.perturb)?;
                    let t1 = u1.features.rows() as i64;
                    mix(&u1, &u2, rng.gen_range(0..=t1))?
                }
                // Each attempt redraws the pair as well as the delay: some
                // length pairs cannot reach a bucket at any delay.
                Some(bucket) => {
                    let mut found = None;
                    for _ in 0..MAX_ATTEMPTS {
                        let u1 = utterance(spec, renderer, &mut rng, a, s.perturb)?;
                        let u2 = utterance(spec, renderer, &mut rng, b, s.perturb)?;
                        let t1 = u1.features.rows() as i64;
                        let m = mix(&u1, &u2, rng.gen_range(0..=t1))?;
                        if m.bucket == bucket {
                            found = Some(m);
                            break;
                        }
                    }
                    found.ok_or_else(|| {
                        Error::Generation(format!("{name}-{index}: bucket {bucket} not reached in {MAX_ATTEMPTS} draws"))
                    })?
                }
            }
        }
    };
    ex.id = format!("{name}-{index:06}");
    Ok(ex)
}

/// Writes the corpus under `out_dir` (created; its parent must exist).
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path, exec: Execution) -> Result<()> {
    spec.validate()?;
    let renderer = Renderer::new(spec.render.clone(), spec.seed)?;
    if !out_dir.is_dir() {
        fs::create_dir(out_dir)?;
    }
    fs::write(out_dir.join("corpus.txt"), spec.to_kv())?;
    for (split, name) in SPLITS.iter().enumerate() {
        let n = spec.splits[split].total();
        let examples: Vec<MixtureExample> = par::map_range(exec, n, |i| generate(spec, &renderer, split, i))
            .into_iter()
            .collect::<Result<_>>()?;
        let dir = out_dir.join(name);
        if !dir.is_dir() {
            fs::create_dir(&dir)?;
        }
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for ex in &examples {
            manifest += &manifest_row(ex);
            write_features(&dir.join(format!("{}.feat", ex.id)), &ex.features)?;
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;
    }
    Ok(())
}

fn manifest_row(ex: &MixtureExample) -> String {
    let starts: Vec<String> = ex.starts().iter().map(ToString::to_string).collect();
    let text = |i: usize| ex.transcripts.get(i).map(ToString::to_string).unwrap_or_default();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        ex.id,
        ex.transcripts.len(),
        starts.join(","),
        ex.overlap_ratio,
        ex.bucket,
        text(0),
        text(1)
    )
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(t.rows() as u32).to_le_bytes())?;
    w.write_all(&(t.cols() as u32).to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let t = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let f = u32::from_le_bytes(word) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != t * f * 8 {
        return Err(Error::Data(format!(
            "{}: {} payload bytes for {t}×{f}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(vec![t, f], data)
}

/// One manifest row with its features.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub starts: Vec<usize>,
    pub ratio: f64,
    pub bucket: Bucket,
    /// Ascending by start frame.
    pub transcripts: Vec<Transcript>,
    pub features: Tensor,
}

impl Example {
    pub fn n_speakers(&self) -> usize {
        self.transcripts.len()
    }

    pub fn second(&self) -> Option<&Transcript> {
        self.transcripts.get(1)
    }
}

fn parse_row(dir: &Path, n: usize, line: &str) -> Result<Example> {
    let bad = |what: &str| Error::Data(format!("{}: manifest line {n}: {what}", dir.display()));
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 7 {
        return Err(bad(&format!("{} columns, expected 7", cols.len())));
    }
    let speakers: usize = cols[1].parse().map_err(|_| bad("n_speakers"))?;
    if !(1..=2).contains(&speakers) {
        return Err(bad("n_speakers must be 1 or 2"));
    }
    let starts = cols[2]
        .split(',')
        .map(|s| s.parse().map_err(|_| bad("starts")))
        .collect::<Result<Vec<usize>>>()?;
    if starts.len() != speakers || starts.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad("starts must be ascending, one per speaker"));
    }
    let ratio: f64 = cols[3].parse().map_err(|_| bad("ratio"))?;
    let bucket: Bucket = cols[4].parse()?;
    let transcripts = cols[5..5 + speakers]
        .iter()
        .map(|c| Transcript::parse(c))
        .collect::<Result<Vec<_>>>()?;
    let features = read_features(&dir.join(format!("{}.feat", cols[0])))?;
    Ok(Example {
        id: cols[0].to_string(),
        starts,
        ratio,
        bucket,
        transcripts,
        features,
    })
}

/// Reads `corpus/split/manifest.tsv` and every feature file it names.
pub fn load_split(corpus: &Path, split: &str, exec: Execution) -> Result<Vec<Example>> {
    let dir = corpus.join(split);
    let text = fs::read_to_string(dir.join("manifest.tsv"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("manifest.tsv").display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::Data(format!("{}: bad manifest header", dir.display()))),
    }
    let rows: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.is_empty()).collect();
    par::try_map(exec, &rows, |&(n, l)| parse_row(&dir, n + 1, l))
}

/// SHA-256 over the corpus description, manifests and feature files.
pub fn corpus_checksum(corpus: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut feed = |path: &Path| -> Result<()> {
        h.update(path.strip_prefix(corpus).unwrap_or(path).to_string_lossy().as_bytes());
        h.update(fs::read(path)?);
        Ok(())
    };
    feed(&corpus.join("corpus.txt"))?;
    for split in SPLITS {
        let dir = corpus.join(split);
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.sort();
        for f in files {
            feed(&f)?;
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
