//! Training objectives, label serialization, optimizer and learning-rate
//! schedule.

mod ctc;
mod objectives;
mod optim;

use std::fmt;
use std::ops::Deref;

pub use ctc::{ctc_forward_backward, ctc_loss, ctc_required_frames};
pub use objectives::{
    attention_ce_loss, build_joint_heat_target, heat_loss, joint_heat_loss, joint_objective, pit_loss,
    pit_loss_detailed, pit_select, serialize_sot, PitOutcome, LABEL_SMOOTHING,
};
pub use optim::{warmup_lr, AdamConfig, OptimState};

pub const BLANK: usize = 0;
/// Speaker-change separator.
pub const SC: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
/// Smallest word identifier.
pub const FIRST_WORD: usize = 4;

/// Token sequence. Label sequences never hold a blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Transcript(Vec<usize>);

impl Transcript {
    pub fn new(tokens: Vec<usize>) -> Self {
        Transcript(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<usize> {
        self.0
    }

    /// Parses space-separated identifiers.
    pub fn parse(text: &str) -> crate::Result<Self> {
        text.split_whitespace()
            .map(|w| {
                w.parse()
                    .map_err(|_| crate::Error::Data(format!("bad token {w:?}")))
            })
            .collect::<crate::Result<Vec<_>>>()
            .map(Transcript)
    }
}

impl Deref for Transcript {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for Transcript {
    fn from(v: Vec<usize>) -> Self {
        Transcript(v)
    }
}

impl From<&[usize]> for Transcript {
    fn from(v: &[usize]) -> Self {
        Transcript(v.to_vec())
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}
