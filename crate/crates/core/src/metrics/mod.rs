//! Decoding, edit-distance scoring, permutation-invariant WER and report
//! assembly.

mod report;

use std::ops::{Add, AddAssign};

pub use report::{evaluate_corpus, EvalReport, ExampleScore, Hypothesis, ModelRecognizer, OracleRecognizer, Recognizer, Tally};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{Transcript, BLANK, EOS, SC, SOS};

/// Substitutions, deletions and insertions of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn total(self) -> usize {
        self.sub + self.del + self.ins
    }
}

impl Add for EditCounts {
    type Output = EditCounts;

    fn add(self, o: EditCounts) -> EditCounts {
        EditCounts {
            sub: self.sub + o.sub,
            del: self.del + o.del,
            ins: self.ins + o.ins,
        }
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: EditCounts) {
        *self = *self + o;
    }
}

/// Unit-cost alignment. The traceback prefers diagonal, then up
/// (deletion), then left (insertion).
pub fn levenshtein(reference: &[usize], hyp: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let up = cost[(i - 1) * w + j] + 1;
            let left = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(up).min(left);
        }
    }
    let mut out = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 && here == cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            out.sub += usize::from(reference[i - 1] != hyp[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            out.del += 1;
            i -= 1;
        } else {
            out.ins += 1;
            j -= 1;
        }
    }
    out
}

/// `(S+D+I)/N`; may exceed 1.
pub fn wer(errors: EditCounts, ref_count: usize) -> Result<f64> {
    if ref_count == 0 {
        return Err(Error::Contract("WER needs at least one reference token".into()));
    }
    Ok(errors.total() as f64 / ref_count as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy_decode(logits: &Tensor) -> Transcript {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.rows() {
        let k = argmax(logits.row(t));
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    Transcript::new(out)
}

/// Autoregressive argmax from `⟨sos⟩`. `next` maps a prefix (starting with
/// `⟨sos⟩`) to the logits of the following token. Returns the hypothesis
/// without `⟨eos⟩` and whether `max_len` cut it short.
pub fn greedy_decode_with<F>(mut next: F, max_len: usize) -> Result<(Transcript, bool)>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut prefix = vec![SOS];
    for _ in 0..max_len {
        let k = argmax(&next(&prefix)?);
        if k == EOS {
            return Ok((Transcript::new(prefix[1..].to_vec()), false));
        }
        prefix.push(k);
    }
    Ok((Transcript::new(prefix[1..].to_vec()), true))
}

/// Splits on `⟨sc⟩`, keeping empty segments.
pub fn split_sot(hyp: &[usize]) -> Vec<Transcript> {
    hyp.split(|&k| k == SC).map(Transcript::from).collect()
}

pub const MAX_PI_SPEAKERS: usize = 4;

/// Next permutation in lexicographic order; false after the last one.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = p.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = p.iter().rposition(|&x| x > p[i]).expect("successor exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Minimum total edit errors over all hypothesis-to-reference assignments,
/// with the shorter list padded by empty transcripts. Returns the errors of
/// the best assignment (identity wins ties) and the reference token count.
pub fn pi_wer(refs: &[Transcript], hyps: &[Transcript]) -> Result<(EditCounts, usize)> {
    if refs.is_empty() {
        return Err(Error::Contract("pi_wer needs at least one reference".into()));
    }
    let n = refs.len().max(hyps.len());
    if n > MAX_PI_SPEAKERS {
        return Err(Error::Unsupported(format!(
            "{n} speakers exceeds the exhaustive search bound of {MAX_PI_SPEAKERS}"
        )));
    }
    let empty = Transcript::default();
    let pick = |list: &[Transcript], i: usize| list.get(i).unwrap_or(&empty).clone();
    let pair: Vec<EditCounts> = (0..n * n)
        .map(|k| levenshtein(&pick(refs, k / n), &pick(hyps, k % n)))
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<EditCounts> = None;
    loop {
        let e = perm
            .iter()
            .enumerate()
            .fold(EditCounts::default(), |acc, (r, &h)| acc + pair[r * n + h]);
        if best.is_none_or(|b| e.total() < b.total()) {
            best = Some(e);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let ref_count = refs.iter().map(|r| r.len()).sum();
    Ok((best.expect("at least one permutation"), ref_count))
}
