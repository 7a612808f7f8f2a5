//! Change-class confusion counts and the scores derived from them.

use serde::Serialize;

use crate::error::{Error, Result};

/// Pixel tallies with "change" (1) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    /// Adds the tallies of one prediction/label pair.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        *self = self.merge(confusion(pred, gt)?);
        Ok(())
    }

    /// `tp / (tp + fp + fn)`, defined as 1 when nothing is predicted or labelled.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn oa(&self) -> f64 {
        if self.total() == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }

    pub fn scores(&self) -> Scores {
        Scores { iou: self.iou(), f1: self.f1(), oa: self.oa() }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: ConfusionCounts) -> ConfusionCounts {
        self.merge(rhs)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), ConfusionCounts::merge)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub iou: f64,
    pub f1: f64,
    pub oa: f64,
}

/// Pixel-wise tallies of a binary prediction against a binary label.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Usage(format!("prediction has {} pixels, label has {}", pred.len(), gt.len())));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Usage(format!("non-binary mask value at pixel {i}: pred {p}, label {g}"))),
        }
    }
    Ok(c)
}
