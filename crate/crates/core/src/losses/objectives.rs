use crate::autodiff::Var;
use crate::error::{Error, Result};

use super::{ctc_loss, Transcript, EOS, SC};

pub const LABEL_SMOOTHING: f64 = 0.1;

/// Result of permutation-invariant training: the chosen loss and whether the
/// swapped assignment (h1↔y2, h2↔y1) won.
#[derive(Clone, Copy, Debug)]
pub struct PitOutcome<'t> {
    pub loss: Var<'t>,
    pub swapped: bool,
}

/// Loss of one assignment, `None` when either term is infeasible.
fn assignment<'t>(h1: Var<'t>, y1: &Transcript, h2: Var<'t>, y2: &Transcript) -> Result<Option<Var<'t>>> {
    let a = match ctc_loss(h1, y1) {
        Ok(l) => l,
        Err(Error::Infeasible { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    match ctc_loss(h2, y2) {
        Ok(b) => Ok(Some(a.add(&b)?)),
        Err(Error::Infeasible { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Minimum of two assignment losses; an absent one counts as +∞. Ties keep
/// the identity assignment.
pub fn pit_select<'t>(identity: Option<Var<'t>>, swapped: Option<Var<'t>>) -> Result<PitOutcome<'t>> {
    match (identity, swapped) {
        (Some(a), Some(b)) if b.item() < a.item() => Ok(PitOutcome { loss: b, swapped: true }),
        (Some(a), _) => Ok(PitOutcome { loss: a, swapped: false }),
        (None, Some(b)) => Ok(PitOutcome { loss: b, swapped: true }),
        (None, None) => Err(Error::Infeasible {
            frames: 0,
            labels: 0,
            required: 0,
        }),
    }
}

pub fn pit_loss_detailed<'t>(h1: Var<'t>, h2: Var<'t>, y1: &Transcript, y2: &Transcript) -> Result<PitOutcome<'t>> {
    let identity = assignment(h1, y1, h2, y2)?;
    let swapped = assignment(h1, y2, h2, y1)?;
    pit_select(identity, swapped).map_err(|_| infeasible_pair(h1, h2, y1, y2))
}

fn infeasible_pair(h1: Var<'_>, h2: Var<'_>, y1: &Transcript, y2: &Transcript) -> Error {
    let frames = h1.rows().min(h2.rows());
    let labels = y1.len().max(y2.len());
    Error::Infeasible {
        frames,
        labels,
        required: super::ctc_required_frames(if y1.len() >= y2.len() { y1 } else { y2 }),
    }
}

/// Permutation-invariant CTC over two branches.
pub fn pit_loss<'t>(h1: Var<'t>, h2: Var<'t>, y1: &Transcript, y2: &Transcript) -> Result<Var<'t>> {
    Ok(pit_loss_detailed(h1, h2, y1, y2)?.loss)
}

/// CTC with the fixed speaking-order assignment (`y1` talks first).
pub fn heat_loss<'t>(h1: Var<'t>, h2: Var<'t>, y1: &Transcript, y2: &Transcript) -> Result<Var<'t>> {
    ctc_loss(h1, y1)?.add(&ctc_loss(h2, y2)?)
}

/// `y1 ⊕ ⟨sc⟩ ⊕ y2`, or `y1` alone for a single talker.
pub fn build_joint_heat_target(y1: &Transcript, y2: Option<&Transcript>) -> Result<Transcript> {
    if y1.is_empty() {
        return Err(Error::Contract("joint target needs a nonempty first transcript".into()));
    }
    let mut out = y1.to_vec();
    if let Some(y2) = y2 {
        out.push(SC);
        out.extend_from_slice(y2);
    }
    Ok(Transcript::new(out))
}

/// One CTC over the time-concatenated branch logits `[H1; H2]`.
pub fn joint_heat_loss<'t>(h_cat: Var<'t>, y1: &Transcript, y2: Option<&Transcript>) -> Result<Var<'t>> {
    ctc_loss(h_cat, &build_joint_heat_target(y1, y2)?)
}

/// Serialized multi-talker label stream. `speakers` holds `(start, transcript)`
/// in speaker-index order; output is ordered by start, ties by index.
pub fn serialize_sot(speakers: &[(usize, &Transcript)]) -> Result<Transcript> {
    let mut order: Vec<usize> = (0..speakers.len()).collect();
    order.sort_by_key(|&i| speakers[i].0);
    let first = order
        .first()
        .ok_or_else(|| Error::Contract("no speakers to serialize".into()))?;
    if speakers[*first].1.is_empty() {
        return Err(Error::Contract("first speaker's transcript is empty".into()));
    }
    let mut out = Vec::new();
    for (n, &i) in order.iter().enumerate() {
        if n > 0 {
            out.push(SC);
        }
        out.extend_from_slice(speakers[i].1);
    }
    Ok(Transcript::new(out))
}

/// Mean token cross-entropy of teacher-forced decoder logits against
/// `serialized ⊕ ⟨eos⟩`, with target distribution
/// `(1−ε)·onehot + ε/V`.
pub fn attention_ce_loss<'t>(dec_logits: Var<'t>, serialized: &Transcript, smoothing: f64) -> Result<Var<'t>> {
    let rows = serialized.len() + 1;
    if dec_logits.rows() != rows || dec_logits.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "decoder logits {:?} do not match {} targets (incl. eos)",
            dec_logits.shape(),
            rows
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let v = dec_logits.cols();
    let lp = dec_logits.log_softmax()?;
    let idx: Vec<usize> = serialized
        .iter()
        .chain(std::iter::once(&EOS))
        .enumerate()
        .map(|(t, &k)| t * v + k)
        .collect();
    if let Some(&k) = serialized.iter().find(|&&k| k >= v) {
        return Err(Error::Contract(format!("target token {k} outside vocabulary {v}")));
    }
    let mut loss = lp.pick(&idx)?.sum()?.scale(-(1.0 - smoothing))?;
    if smoothing > 0.0 {
        loss = loss.add(&lp.sum()?.scale(-smoothing / v as f64)?)?;
    }
    loss.scale(1.0 / rows as f64)
}

/// `w·l_ctc + (1−w)·l_att`.
pub fn joint_objective<'t>(l_ctc: Var<'t>, l_att: Var<'t>, w: f64) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Contract(format!("ctc weight {w} outside [0, 1]")));
    }
    l_ctc.scale(w)?.add(&l_att.scale(1.0 - w)?)
}
