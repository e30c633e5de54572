//! Training driver: per-example losses, accumulation, warmup + Adam, dev
//! loss per epoch, best-k checkpoint averaging, run manifest and resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::serialize::{load_params, save_params};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kv::{self, Fields};
use crate::losses::{
    attention_ce_loss, ctc_loss, heat_loss, joint_heat_loss, joint_objective, pit_loss, serialize_sot, warmup_lr,
    OptimState, LABEL_SMOOTHING,
};
use crate::metrics::{evaluate_corpus, EvalReport, ModelRecognizer};
use crate::model::{average_checkpoints, Model, ModelConfig, Variant};
use crate::nn::{derive_seed, Ctx};
use crate::par::{self, Execution};
use crate::sim::{corpus_checksum, load_split, Example};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Examples per optimizer step.
    pub accumulate: usize,
    /// Checkpoints averaged into the final model.
    pub best_k: usize,
    /// CTC weight of the hybrid objective (SOT variants).
    pub ctc_weight: f64,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 5e-4,
            warmup: 500,
            accumulate: 1,
            best_k: 3,
            ctc_weight: 0.3,
            max_decode_len: 40,
        }
    }
}

/// Model and training settings read from one `key=value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk(variant: Variant) -> Self {
        RunConfig {
            model: ModelConfig::desk(variant),
            train: TrainConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::new(kv::parse(text)?);
        let model = ModelConfig::from_fields(&mut f)?;
        let mut t = TrainConfig::default();
        f.take("epochs", &mut t.epochs)?;
        f.take("lr", &mut t.lr)?;
        f.take("warmup", &mut t.warmup)?;
        f.take("accumulate", &mut t.accumulate)?;
        f.take("best_k", &mut t.best_k)?;
        f.take("ctc_weight", &mut t.ctc_weight)?;
        f.take("max_decode_len", &mut t.max_decode_len)?;
        f.finish()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if t.accumulate == 0 || t.best_k == 0 || t.warmup == 0 || t.max_decode_len == 0 {
            return bad("accumulate, best_k, warmup and max_decode_len must be positive");
        }
        if !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.ctc_weight) {
            return bad("lr must be positive and ctc_weight in [0, 1]");
        }
        Ok(RunConfig { model, train: t })
    }

    pub fn to_kv(&self) -> String {
        let t = &self.train;
        format!(
            "{}epochs={}\nlr={}\nwarmup={}\naccumulate={}\nbest_k={}\nctc_weight={}\nmax_decode_len={}\n",
            self.model.to_kv(),
            t.epochs,
            t.lr,
            t.warmup,
            t.accumulate,
            t.best_k,
            t.ctc_weight,
            t.max_decode_len
        )
    }

    /// Everything except the epoch budget, which may grow on resume.
    fn identity(&self) -> String {
        let mut c = self.clone();
        c.train.epochs = 0;
        c.to_kv()
    }
}

/// Training objective of one example; `None` when CTC cannot align it.
/// SOT variants drop an infeasible CTC term and keep the attention term.
pub fn example_loss<'t>(model: &Model, ctx: &Ctx<'t>, ex: &Example, ctc_weight: f64) -> Result<Option<Var<'t>>> {
    let y1 = ex
        .transcripts
        .first()
        .ok_or_else(|| Error::Data(format!("{}: no transcript", ex.id)))?;
    let empty = Default::default();
    let y2 = ex.second().unwrap_or(&empty);
    let x = &ex.features;
    let r = match model.variant() {
        Variant::SimoPit => {
            let (h1, h2) = model.forward_simo(ctx, x)?;
            pit_loss(h1, h2, y1, y2)
        }
        Variant::SimoHeat => {
            let (h1, h2) = model.forward_simo(ctx, x)?;
            heat_loss(h1, h2, y1, y2)
        }
        Variant::Sot | Variant::CseSot => {
            let speakers: Vec<(usize, _)> = ex.starts.iter().copied().zip(ex.transcripts.iter()).collect();
            let ser = serialize_sot(&speakers)?;
            let memory = model.encode_memory(ctx, x)?;
            let dec = model.decode_logits(ctx, memory, &ser)?;
            let att = attention_ce_loss(dec, &ser, LABEL_SMOOTHING)?;
            let ctc_logits = model.forward_ctc_head(ctx, memory)?;
            match ctc_loss(ctc_logits, &ser) {
                Ok(c) => joint_objective(c, att, ctc_weight),
                Err(Error::Infeasible { .. }) => att.scale(1.0 - ctc_weight),
                Err(e) => Err(e),
            }
        }
        _ => joint_heat_loss(model.concat_logits(ctx, x)?, y1, ex.second()),
    };
    match r {
        Ok(l) => Ok(Some(l)),
        Err(Error::Infeasible { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn check_finite(loss: f64, ex: &Example) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss is {loss} on example {}", ex.id)))
    }
}

/// Loss value and parameter gradients for one example.
fn example_grad(model: &Model, ex: &Example, cfg: &RunConfig, dropout_seed: u64) -> Result<Option<(f64, Vec<Tensor>)>> {
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &model.params, model.config.dropout, dropout_seed);
    let Some(loss) = example_loss(model, &ctx, ex, cfg.train.ctc_weight)? else {
        return Ok(None);
    };
    let value = loss.item();
    check_finite(value, ex)?;
    let mut g = tape.backward(loss)?;
    let grads = ctx
        .params()
        .iter()
        .map(|p| g.take(*p).unwrap_or_else(|| Tensor::zeros(p.value().shape())))
        .collect();
    Ok(Some((value, grads)))
}

/// Mean evaluation-mode loss over the examples CTC can align.
pub fn mean_loss(model: &Model, examples: &[Example], ctc_weight: f64, exec: Execution) -> Result<f64> {
    let losses = par::try_map(exec, examples, |ex| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &model.params);
        let l = example_loss(model, &ctx, ex, ctc_weight)?.map(|l| l.item());
        if let Some(v) = l {
            check_finite(v, ex)?;
        }
        Ok(l)
    })?;
    let kept: Vec<f64> = losses.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Data("no example is CTC-feasible".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub steps: u64,
    /// Training examples dropped as CTC-infeasible.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub corpus: PathBuf,
    pub corpus_checksum: String,
    pub initial_dev_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epochs: Vec<usize>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    /// Dev loss before training followed by one value per epoch.
    pub fn dev_trajectory(&self) -> Vec<f64> {
        std::iter::once(self.initial_dev_loss)
            .chain(self.epochs.iter().map(|e| e.dev_loss))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub exec: Execution,
    /// Continue from `last.params`/`last.optim` in the output directory.
    pub resume: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_FILE: &str = "model.ckpt";

fn epoch_file(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch{epoch:03}.ckpt"))
}

/// Lowest dev losses first, earlier epoch on ties.
fn best_epochs(records: &[EpochRecord], k: usize) -> Vec<usize> {
    let mut v: Vec<&EpochRecord> = records.iter().collect();
    v.sort_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss).then(a.epoch.cmp(&b.epoch)));
    v.into_iter().take(k).map(|r| r.epoch).collect()
}

pub fn train(run: &RunConfig, corpus: &Path, out: &Path, opts: TrainOptions) -> Result<RunManifest> {
    let started = Instant::now();
    let train_set = load_split(corpus, "train", opts.exec)?;
    let dev_set = load_split(corpus, "dev", opts.exec)?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Data(format!("{}: train and dev splits must be nonempty", corpus.display())));
    }
    let feat = train_set[0].features.cols();
    if feat != run.model.feat_dim {
        return Err(Error::Config(format!(
            "corpus has {feat}-dim features, model expects {}",
            run.model.feat_dim
        )));
    }
    let checksum = corpus_checksum(corpus)?;
    if !out.is_dir() {
        fs::create_dir(out)?;
    }
    let mut model = Model::new(run.model.clone())?;
    let mut optim = OptimState::new(&model.params);
    let seed = run.model.seed;
    let (last_params, last_optim) = (out.join("last.params"), out.join("last.optim"));

    let mut manifest = if opts.resume && out.join(MANIFEST_FILE).exists() {
        let m = RunManifest::load(&out.join(MANIFEST_FILE))?;
        let prev = RunConfig::parse(&m.config)?;
        if prev.identity() != run.identity() {
            return Err(Error::Config("resume: configuration differs from the original run".into()));
        }
        if m.corpus_checksum != checksum {
            return Err(Error::Data("resume: corpus checksum differs from the original run".into()));
        }
        model.params.load_named(load_params(&last_params)?)?;
        optim = OptimState::load(&model.params, &last_optim)?;
        m
    } else {
        RunManifest {
            config: run.to_kv(),
            seed,
            corpus: corpus.to_path_buf(),
            corpus_checksum: checksum,
            initial_dev_loss: mean_loss(&model, &dev_set, run.train.ctc_weight, opts.exec)?,
            epochs: Vec::new(),
            best_epochs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    };
    manifest.config = run.to_kv();
    fs::write(out.join(CONFIG_FILE), run.model.to_kv())?;
    let elapsed_before = manifest.wall_clock_secs;

    for epoch in manifest.epochs.len() + 1..=run.train.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{epoch}"))));
        let (mut loss_sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for (c, chunk) in order.chunks(run.train.accumulate).enumerate() {
            let results = par::map(opts.exec, chunk, |&i| {
                let dseed = derive_seed(seed, &format!("dropout/{epoch}/{i}"));
                example_grad(&model, &train_set[i], run, dseed)
            });
            let mut total: Option<Vec<Tensor>> = None;
            let mut n = 0usize;
            for r in results {
                match r? {
                    None => skipped += 1,
                    Some((loss, grads)) => {
                        loss_sum += loss;
                        n += 1;
                        match total.as_mut() {
                            None => total = Some(grads),
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&grads) {
                                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                        *x += y;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let Some(mut grads) = total else { continue };
            counted += n;
            if n > 1 {
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|x| *x /= n as f64);
                }
            }
            let lr = warmup_lr(optim.step + 1, run.train.lr, run.train.warmup)?;
            optim.adam_step(&mut model.params, &grads, lr).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {c}: {m}")),
                e => e,
            })?;
        }
        if counted == 0 {
            return Err(Error::Data("every training example is CTC-infeasible".into()));
        }
        let dev_loss = mean_loss(&model, &dev_set, run.train.ctc_weight, opts.exec)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / counted as f64,
            dev_loss,
            steps: optim.step,
            skipped,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:3}  train {:.4}  dev {:.4}  steps {}  skipped {}  {:.0}s",
                record.train_loss,
                record.dev_loss,
                record.steps,
                record.skipped,
                elapsed_before + started.elapsed().as_secs_f64()
            );
        }
        manifest.epochs.push(record);
        model.save(&epoch_file(out, epoch))?;
        let best = best_epochs(&manifest.epochs, run.train.best_k);
        for r in &manifest.epochs {
            let p = epoch_file(out, r.epoch);
            if !best.contains(&r.epoch) && p.exists() {
                fs::remove_file(p)?;
            }
        }
        manifest.best_epochs = best;
        model.save(&last_params)?;
        optim.save(&model.params, &last_optim)?;
        manifest.wall_clock_secs = elapsed_before + started.elapsed().as_secs_f64();
        manifest.save(&out.join(MANIFEST_FILE))?;
    }

    let paths: Vec<PathBuf> = manifest.best_epochs.iter().map(|&e| epoch_file(out, e)).collect();
    if paths.is_empty() {
        model.save(&out.join(MODEL_FILE))?;
    } else {
        save_params(&out.join(MODEL_FILE), &average_checkpoints(&paths)?)?;
    }
    manifest.wall_clock_secs = elapsed_before + started.elapsed().as_secs_f64();
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads a checkpoint together with the `config.txt` stored beside it.
pub fn load_model(model_path: &Path) -> Result<Model> {
    let dir = model_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(dir.join(CONFIG_FILE))
        .map_err(|e| Error::Config(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
    let mut f = Fields::new(kv::parse(&text)?);
    let config = ModelConfig::from_fields(&mut f)?;
    f.finish()?;
    Model::load(config, model_path)
}

pub fn evaluate_split(
    model: &Model,
    corpus: &Path,
    split: &str,
    max_decode_len: usize,
    exec: Execution,
) -> Result<EvalReport> {
    let examples = load_split(corpus, split, exec)?;
    let rec = ModelRecognizer {
        model,
        max_len: max_decode_len,
    };
    evaluate_corpus(&rec, &examples, exec)
}
