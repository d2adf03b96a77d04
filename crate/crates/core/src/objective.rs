//! Training objectives: cross-entropy heads plus λ-weighted similarity terms
//! between a projected embedding and its target embedding.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::data::{FrameView, Mode};
use crate::error::{Error, Result};
use crate::losses::{pair_loss_node, LossKind, LossOptions};
use crate::model::Bound;

/// λ for `kind` when none is given: 1.0 for bounded kinds, 0.001 otherwise.
pub fn default_lambda(kind: LossKind) -> f64 {
    if kind.is_bounded() {
        1.0
    } else {
        0.001
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedLoss {
    pub kind: LossKind,
    pub lambda: f64,
}

impl WeightedLoss {
    pub fn with_default(kind: LossKind) -> Self {
        Self { kind, lambda: default_lambda(kind) }
    }
}

/// Which losses enter the objective. An empty list is the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    pub losses: Vec<WeightedLoss>,
    /// Anticipation only: include `CE(y_f, transition(classify(z_t)))`.
    pub transition_head: bool,
    pub options: LossOptions,
}

impl ObjectiveSpec {
    pub fn baseline(mode: Mode) -> Self {
        Self { mode, losses: Vec::new(), transition_head: true, options: LossOptions::default() }
    }

    /// `kinds` with their default λ.
    pub fn with_kinds(mode: Mode, kinds: &[LossKind]) -> Self {
        Self { losses: kinds.iter().map(|k| WeightedLoss::with_default(*k)).collect(), ..Self::baseline(mode) }
    }

    pub fn kinds(&self) -> Vec<LossKind> {
        self.losses.iter().map(|l| l.kind).collect()
    }

    pub fn needs_batch_pairs(&self) -> bool {
        self.losses.iter().any(|l| l.kind.is_batch_level())
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.losses {
            if !(l.lambda >= 0.0 && l.lambda.is_finite()) {
                return Err(Error::Config(format!("λ for {} must be finite and >= 0, got {}", l.kind, l.lambda)));
            }
        }
        Ok(())
    }

    /// Display label: `"Baseline"` or kinds joined by `+`.
    pub fn label(&self) -> String {
        combo_label(&self.kinds())
    }
}

pub fn combo_label(kinds: &[LossKind]) -> String {
    if kinds.is_empty() {
        "Baseline".into()
    } else {
        kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }
}

/// Parses `"Baseline"`, a single kind, or kinds joined by `+`.
pub fn parse_combo(s: &str) -> Result<Vec<LossKind>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("baseline") {
        return Ok(Vec::new());
    }
    let kinds = s.split('+').map(str::parse).collect::<Result<Vec<LossKind>>>()?;
    for (i, k) in kinds.iter().enumerate() {
        if kinds[..i].contains(k) {
            return Err(Error::Config(format!("{k} repeated in {s:?}")));
        }
    }
    Ok(kinds)
}

/// Early-prediction mini-batch: full sequences and the number of frames of
/// each that count as observed.
pub struct EarlyBatch<'a> {
    pub sequences: Vec<FrameView<'a>>,
    pub observed: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Anticipation mini-batch of observed and future clips.
pub struct AnticipationBatch<'a> {
    pub observed: Vec<FrameView<'a>>,
    pub future: Vec<FrameView<'a>>,
    pub observed_labels: Vec<usize>,
    pub future_labels: Vec<usize>,
}

/// The objective node and its parts.
pub struct ObjectiveNodes {
    pub total: Var,
    /// Cross-entropy terms: `[observed]` in early mode, `[observed, future]`
    /// or `[observed, transition, future]` in anticipation mode.
    pub cross_entropy: Vec<Var>,
    /// Unweighted similarity terms, in spec order.
    pub terms: Vec<(LossKind, Var)>,
}

impl fmt::Debug for ObjectiveNodes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveNodes").field("total", &self.total).finish_non_exhaustive()
    }
}

fn check_mode(spec: &ObjectiveSpec, want: Mode) -> Result<()> {
    if spec.mode != want {
        return Err(Error::Contract(format!("{:?} objective given a {want:?} batch", spec.mode)));
    }
    spec.validate()
}

fn add_terms(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    mut total: Var,
    z_h: Var,
    target: Var,
) -> Result<(Var, Vec<(LossKind, Var)>)> {
    let mut terms = Vec::with_capacity(spec.losses.len());
    for l in &spec.losses {
        let t = pair_loss_node(tape, l.kind, z_h, target, spec.options)?;
        let w = tape.scale(t, l.lambda);
        total = tape.add(total, w)?;
        terms.push((l.kind, t));
    }
    Ok((total, terms))
}

/// `CE(y, classify(z_t)) + Σ λ_k·loss_k(project(z), z_t)` where `z_t`
/// summarizes the observed prefix and `z` the full sequence.
pub fn early_objective(
    tape: &mut Tape,
    model: &Bound,
    batch: &EarlyBatch,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveNodes> {
    check_mode(spec, Mode::Early)?;
    let n = batch.sequences.len();
    if batch.observed.len() != n || batch.labels.len() != n {
        return Err(Error::Contract("early batch fields differ in length".into()));
    }
    let full: Vec<usize> = batch.sequences.iter().map(crate::data::FrameSource::frame_count).collect();
    let (z_t, z) = if spec.losses.is_empty() {
        let z_t = model.run_gru(tape, &batch.sequences, &[&batch.observed])?.remove(0);
        (z_t, None)
    } else {
        let mut out = model.run_gru(tape, &batch.sequences, &[&batch.observed, &full])?;
        let z = out.pop();
        (out.pop().expect("two captures"), z)
    };
    let logits = model.classify(tape, z_t)?;
    let ce = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let (total, terms) = match z {
        Some(z) => {
            let z_h = model.project(tape, z)?;
            add_terms(tape, spec, ce, z_h, z_t)?
        }
        None => (ce, Vec::new()),
    };
    Ok(ObjectiveNodes { total, cross_entropy: vec![ce], terms })
}

/// `CE(y_o, ŷ_o) [+ CE(y_f, ŷ_of)] + CE(y_f, ŷ_f) + Σ λ_k·loss_k(z_h, z)`
/// with `z_h = project(z_t)` and `z` the summary of the future clip.
pub fn anticipation_objective(
    tape: &mut Tape,
    model: &Bound,
    batch: &AnticipationBatch,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveNodes> {
    check_mode(spec, Mode::Anticipation)?;
    let n = batch.observed.len();
    if batch.future.len() != n || batch.observed_labels.len() != n || batch.future_labels.len() != n {
        return Err(Error::Contract("anticipation batch fields differ in length".into()));
    }
    let (z_t, z) = if spec.losses.is_empty() {
        (model.summarize(tape, &batch.observed)?, None)
    } else {
        // One pass over observed and future clips stacked as 2n sequences.
        let both: Vec<FrameView> = batch.observed.iter().chain(&batch.future).copied().collect();
        let all = model.summarize(tape, &both)?;
        let top: Vec<(Var, usize)> = (0..n).map(|i| (all, i)).collect();
        let bottom: Vec<(Var, usize)> = (n..2 * n).map(|i| (all, i)).collect();
        (tape.gather_rows(&top)?, Some(tape.gather_rows(&bottom)?))
    };

    let scores_o = model.classify(tape, z_t)?;
    let ce_o = tape.softmax_cross_entropy(scores_o, &batch.observed_labels)?;
    let mut cross_entropy = vec![ce_o];
    let mut total = ce_o;
    if spec.transition_head {
        let scores_of = model.transition(tape, scores_o)?;
        let ce_of = tape.softmax_cross_entropy(scores_of, &batch.future_labels)?;
        total = tape.add(total, ce_of)?;
        cross_entropy.push(ce_of);
    }
    let z_h = model.project(tape, z_t)?;
    let scores_f = model.classify(tape, z_h)?;
    let ce_f = tape.softmax_cross_entropy(scores_f, &batch.future_labels)?;
    total = tape.add(total, ce_f)?;
    cross_entropy.push(ce_f);

    let (total, terms) = match z {
        Some(z) => add_terms(tape, spec, total, z_h, z)?,
        None => (total, Vec::new()),
    };
    Ok(ObjectiveNodes { total, cross_entropy, terms })
}
