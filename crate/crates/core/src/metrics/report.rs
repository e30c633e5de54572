use std::fmt::Write as _;

use super::{ctc_greedy_decode, greedy_decode_with, pi_wer, split_sot, wer, EditCounts, MAX_PI_SPEAKERS};
use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::losses::Transcript;
use crate::model::{Model, Variant};
use crate::nn::Ctx;
use crate::par::{self, Execution};
use crate::sim::{Bucket, Example};

/// Per-speaker hypotheses for one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hypothesis {
    pub speakers: Vec<Transcript>,
    /// Attention decoding hit `max_len` before `⟨eos⟩`.
    pub truncated: bool,
}

pub trait Recognizer: Sync {
    fn recognize(&self, example: &Example) -> Result<Hypothesis>;
}

/// Returns the references; scores zero by construction.
pub struct OracleRecognizer;

impl Recognizer for OracleRecognizer {
    fn recognize(&self, example: &Example) -> Result<Hypothesis> {
        Ok(Hypothesis {
            speakers: example.transcripts.clone(),
            truncated: false,
        })
    }
}

/// Variant-appropriate greedy decoding: per-branch CTC for PIT/HEAT SIMO,
/// CTC over the concatenated stream then `⟨sc⟩` splitting for joint-HEAT
/// variants, attention decoding then splitting for SOT and CSE-SOT.
pub struct ModelRecognizer<'m> {
    pub model: &'m Model,
    pub max_len: usize,
}

impl ModelRecognizer<'_> {
    pub fn decode_features(&self, features: &Tensor) -> Result<Hypothesis> {
        let m = self.model;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        match m.variant() {
            Variant::SimoPit | Variant::SimoHeat => {
                let (h1, h2) = m.forward_simo(&ctx, features)?;
                Ok(Hypothesis {
                    speakers: vec![ctc_greedy_decode(&h1.value()), ctc_greedy_decode(&h2.value())],
                    truncated: false,
                })
            }
            Variant::Sot | Variant::CseSot => {
                let memory = m.encode_memory(&ctx, features)?;
                let (hyp, truncated) = greedy_decode_with(
                    |prefix| {
                        let logits = m.decoder_step(&ctx, memory, prefix)?.value();
                        Ok(logits.row(logits.rows() - 1).to_vec())
                    },
                    self.max_len,
                )?;
                Ok(Hypothesis {
                    speakers: cap_streams(split_sot(&hyp)),
                    truncated,
                })
            }
            _ => {
                let h = m.concat_logits(&ctx, features)?;
                Ok(Hypothesis {
                    speakers: cap_streams(split_sot(&ctc_greedy_decode(&h.value()))),
                    truncated: false,
                })
            }
        }
    }
}

/// Folds streams past the scoring bound into the last kept one, so every
/// emitted word still counts against the hypothesis.
fn cap_streams(mut streams: Vec<Transcript>) -> Vec<Transcript> {
    if streams.len() > MAX_PI_SPEAKERS {
        let tail: Vec<usize> = streams.drain(MAX_PI_SPEAKERS..).flat_map(Transcript::into_tokens).collect();
        let mut last = streams.pop().unwrap_or_default().into_tokens();
        last.extend(tail);
        streams.push(Transcript::new(last));
    }
    streams
}

impl Recognizer for ModelRecognizer<'_> {
    fn recognize(&self, example: &Example) -> Result<Hypothesis> {
        self.decode_features(&example.features)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScore {
    pub id: String,
    pub bucket: Bucket,
    pub n_speakers: usize,
    pub errors: EditCounts,
    pub ref_count: usize,
    pub truncated: bool,
    pub hyp: Vec<Transcript>,
}

/// Errors and reference tokens accumulated over examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub errors: EditCounts,
    pub refs: usize,
    pub examples: usize,
}

impl Tally {
    pub fn wer(&self) -> Option<f64> {
        wer(self.errors, self.refs).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ExampleScore>,
}

fn fmt_pct(w: Option<f64>) -> String {
    w.map_or_else(|| "-".to_string(), |w| format!("{:.2}", 100.0 * w))
}

impl EvalReport {
    fn tally<F: Fn(&ExampleScore) -> bool>(&self, keep: F) -> Tally {
        self.rows.iter().filter(|r| keep(r)).fold(Tally::default(), |mut t, r| {
            t.errors += r.errors;
            t.refs += r.ref_count;
            t.examples += 1;
            t
        })
    }

    /// Token-weighted over every example.
    pub fn overall(&self) -> Tally {
        self.tally(|_| true)
    }

    pub fn bucket(&self, b: Bucket) -> Tally {
        self.tally(|r| r.bucket == b)
    }

    pub fn single_talker(&self) -> Tally {
        self.tally(|r| r.n_speakers == 1)
    }

    pub fn multi_talker(&self) -> Tally {
        self.tally(|r| r.n_speakers > 1)
    }

    /// Mean of the low/median/high bucket WERs that have references.
    pub fn oa_wer(&self) -> Option<f64> {
        let wers: Vec<f64> = Bucket::OVERLAPPED.iter().filter_map(|&b| self.bucket(b).wer()).collect();
        (!wers.is_empty()).then(|| wers.iter().sum::<f64>() / wers.len() as f64)
    }

    pub fn truncated(&self) -> usize {
        self.rows.iter().filter(|r| r.truncated).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tbucket\tn_speakers\tsub\tdel\tins\tref_tokens\ttruncated\thyp\n");
        for r in &self.rows {
            let hyp: Vec<String> = r.hyp.iter().map(ToString::to_string).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.bucket,
                r.n_speakers,
                r.errors.sub,
                r.errors.del,
                r.errors.ins,
                r.ref_count,
                u8::from(r.truncated),
                hyp.join(" | ")
            );
        }
        out
    }

    /// WER (%) in the column order Dev, Test(Overall), low, median, high,
    /// OA-WER, followed by the no-overlap and talker-count breakdowns.
    pub fn summary(&self, dev: Option<&EvalReport>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "Dev", "Overall", "low", "median", "high", "OA-WER");
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            fmt_pct(dev.and_then(|d| d.overall().wer())),
            fmt_pct(self.overall().wer()),
            fmt_pct(self.bucket(Bucket::Low).wer()),
            fmt_pct(self.bucket(Bucket::Median).wer()),
            fmt_pct(self.bucket(Bucket::High).wer()),
            fmt_pct(self.oa_wer())
        );
        let line = |out: &mut String, name: &str, t: Tally| {
            let _ = writeln!(out, "{name}: {} ({} examples, {} ref tokens)", fmt_pct(t.wer()), t.examples, t.refs);
        };
        line(&mut out, "no-overlap", self.bucket(Bucket::Single));
        line(&mut out, "single-talker", self.single_talker());
        line(&mut out, "multi-talker", self.multi_talker());
        let _ = writeln!(out, "truncated decodes: {}", self.truncated());
        out
    }
}

/// Decodes and scores every example; rows keep corpus order.
pub fn evaluate_corpus(rec: &dyn Recognizer, examples: &[Example], exec: Execution) -> Result<EvalReport> {
    let rows = par::try_map(exec, examples, |ex| {
        let hyp = rec.recognize(ex)?;
        let (errors, ref_count) = pi_wer(&ex.transcripts, &hyp.speakers)?;
        Ok(ExampleScore {
            id: ex.id.clone(),
            bucket: ex.bucket,
            n_speakers: ex.n_speakers(),
            errors,
            ref_count,
            truncated: hyp.truncated,
            hyp: hyp.speakers,
        })
    })?;
    Ok(EvalReport { rows })
}
