use crate::autodiff::{log_add, Var};
use crate::error::{Error, Result};

use super::{Transcript, BLANK};

/// Fewest frames that can carry `target`: one per label plus a separating
/// blank between equal neighbours.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under frame log-probabilities
/// `log_probs` (`frames × vocab`, row-major) and its gradient with respect
/// to those log-probabilities. Forward and backward recursions run in log
/// space over the blank-augmented label sequence.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * vocab {
        return Err(Error::Dimension(format!(
            "ctc: {} log-probs for {frames}×{vocab}",
            log_probs.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k >= vocab) {
        return Err(Error::Contract(format!(
            "ctc target holds invalid label {bad} (blank={BLANK}, vocab={vocab})"
        )));
    }
    let required = ctc_required_frames(target);
    if frames < required {
        return Err(Error::Infeasible {
            frames,
            labels: target.len(),
            required,
        });
    }
    let mut grad = vec![0.0; frames * vocab];
    if frames == 0 {
        return Ok((0.0, grad));
    }

    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };
    // Skip transition s-2 → s allowed onto a non-blank that differs from
    // the previous non-blank.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && target[s / 2] != target[s / 2 - 1];
    let lp = |t: usize, s: usize| log_probs[t * vocab + label(s)];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, s_len - 1);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, s_len - 2);
    }
    for t in (0..last).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let end = last * s_len;
    let log_z = if s_len > 1 {
        log_add(alpha[end + s_len - 1], alpha[end + s_len - 2])
    } else {
        alpha[end]
    };
    if !log_z.is_finite() {
        return Err(Error::Numeric(format!("ctc log-likelihood is {log_z}")));
    }
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            let occupancy = (ab - lp(t, s) - log_z).exp();
            grad[t * vocab + label(s)] -= occupancy;
        }
    }
    Ok((-log_z, grad))
}

/// CTC loss over frame logits `L×V` (log-softmax applied internally).
pub fn ctc_loss<'t>(logits: Var<'t>, target: &Transcript) -> Result<Var<'t>> {
    let frames = logits.rows();
    let vocab = logits.cols();
    // Check before recording anything so infeasible calls leave no trace.
    let required = ctc_required_frames(target);
    if frames < required {
        return Err(Error::Infeasible {
            frames,
            labels: target.len(),
            required,
        });
    }
    let log_probs = logits.log_softmax()?;
    let (loss, grad) = ctc_forward_backward(log_probs.value().data(), frames, vocab, target)?;
    log_probs.tape().custom_scalar(log_probs, loss, grad)
}
