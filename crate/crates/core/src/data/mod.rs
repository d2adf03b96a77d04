//! Feature sequences, the synthetic action generator, its Bayes oracle and
//! the `EARF` dataset file format.

mod format;
mod generator;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use generator::{generate, generate_split, GeneratorConfig, World};
pub use oracle::{
    oracle_accuracy_anticipation, oracle_accuracy_early, posterior_anticipation, posterior_early, OracleScore,
};

/// Which protocol a dataset serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Early,
    Anticipation,
}

impl Mode {
    pub(crate) fn code(self) -> u32 {
        match self {
            Mode::Early => 0,
            Mode::Anticipation => 1,
        }
    }
}

/// How many leading frames an early-prediction observation of fraction `p`
/// may consume: `ceil(p*T)` clamped to `[1, T]`, further limited to `cap`
/// when `T > threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationRule {
    pub threshold: usize,
    pub cap: usize,
}

impl Default for ObservationRule {
    fn default() -> Self {
        Self { threshold: 250, cap: 50 }
    }
}

impl ObservationRule {
    /// Slack absorbing representation error in `p*T`, so that e.g.
    /// `0.1 * 30` counts as 3 frames rather than 4.
    const CEIL_SLACK: f64 = 1e-9;

    pub fn frames(&self, total: usize, p: f64) -> usize {
        let want = (p * total as f64 - Self::CEIL_SLACK).ceil().max(1.0) as usize;
        let n = want.min(total).max(1);
        if total > self.threshold {
            n.min(self.cap.max(1))
        } else {
            n
        }
    }
}

/// Read access to an ordered run of frame feature vectors.
///
/// Models consume frames only through this trait, which lets tests count
/// exactly which frames an evaluation touched.
pub trait FrameSource {
    fn frame_count(&self) -> usize;
    fn dim(&self) -> usize;
    fn frame(&self, t: usize) -> &[f64];
}

/// Borrowed contiguous frames.
#[derive(Clone, Copy, Debug)]
pub struct FrameView<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> FrameView<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "frame data not a multiple of dim");
        Self { data, dim }
    }

    /// The first `n` frames.
    pub fn prefix(&self, n: usize) -> FrameView<'a> {
        FrameView::new(&self.data[..n * self.dim], self.dim)
    }
}

impl FrameSource for FrameView<'_> {
    fn frame_count(&self) -> usize {
        self.data.len() / self.dim
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

impl<S: FrameSource + ?Sized> FrameSource for &S {
    fn frame_count(&self) -> usize {
        (**self).frame_count()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn frame(&self, t: usize) -> &[f64] {
        (**self).frame(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labels {
    Early {
        label: usize,
    },
    /// An observed clip, `gap` unobserved frames, then a future clip of the
    /// same length.
    Anticipation {
        observed: usize,
        future: usize,
        gap: usize,
    },
}

/// A "video": T×d frame features plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
    labels: Labels,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, labels: Labels) -> Result<Self> {
        let (t, d) = frames.dims2()?;
        if t == 0 || d == 0 {
            return Err(Error::Contract(format!("sequence must be non-empty, got {t}x{d}")));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("sequence frames".into()));
        }
        if let Labels::Anticipation { gap, .. } = labels {
            if gap >= t || (t - gap) % 2 != 0 {
                return Err(Error::Contract(format!(
                    "anticipation record of {t} frames cannot hold two equal clips around a gap of {gap}"
                )));
            }
        }
        Ok(Self { frames, labels })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn labels(&self) -> Labels {
        self.labels
    }

    pub fn mode(&self) -> Mode {
        match self.labels {
            Labels::Early { .. } => Mode::Early,
            Labels::Anticipation { .. } => Mode::Anticipation,
        }
    }

    /// All frames.
    pub fn view(&self) -> FrameView<'_> {
        FrameView::new(self.frames.data(), self.dim())
    }

    /// The action label (early) or observed-action label (anticipation).
    pub fn label(&self) -> usize {
        match self.labels {
            Labels::Early { label } => label,
            Labels::Anticipation { observed, .. } => observed,
        }
    }

    /// Future-action label of an anticipation record.
    pub fn future_label(&self) -> Option<usize> {
        match self.labels {
            Labels::Anticipation { future, .. } => Some(future),
            Labels::Early { .. } => None,
        }
    }

    /// Clip length of an anticipation record; the full length otherwise.
    pub fn clip_len(&self) -> usize {
        match self.labels {
            Labels::Anticipation { gap, .. } => (self.len() - gap) / 2,
            Labels::Early { .. } => self.len(),
        }
    }

    /// The observed clip (anticipation) or the whole sequence (early).
    pub fn observed(&self) -> FrameView<'_> {
        self.view().prefix(self.clip_len())
    }

    /// The future clip of an anticipation record.
    pub fn future(&self) -> Option<FrameView<'_>> {
        match self.labels {
            Labels::Anticipation { gap, .. } => {
                let l = self.clip_len();
                let d = self.dim();
                Some(FrameView::new(&self.frames.data()[(l + gap) * d..], d))
            }
            Labels::Early { .. } => None,
        }
    }
}

/// One split of records sharing a mode, class count and feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: Mode,
    pub classes: usize,
    pub dim: usize,
    pub records: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn new(mode: Mode, classes: usize, dim: usize, records: Vec<FeatureSequence>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract(format!("need at least 2 classes, got {classes}")));
        }
        for (i, r) in records.iter().enumerate() {
            if r.mode() != mode || r.dim() != dim {
                return Err(Error::Contract(format!("record {i} does not match dataset mode {mode:?} / dim {dim}")));
            }
            let too_big = match r.labels() {
                Labels::Early { label } => label >= classes,
                Labels::Anticipation { observed, future, .. } => observed >= classes || future >= classes,
            };
            if too_big {
                return Err(Error::Contract(format!("record {i} has a label outside 0..{classes}")));
            }
        }
        Ok(Self { mode, classes, dim, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}
