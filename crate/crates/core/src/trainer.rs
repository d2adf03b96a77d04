//! Adam training loop and the early-prediction / anticipation evaluation
//! protocols.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, FrameSource, FrameView, Mode, ObservationRule};
use crate::error::{Error, Result};
use crate::model::{fuse_scores, Model};
use crate::objective::{anticipation_objective, early_objective, AnticipationBatch, EarlyBatch, ObjectiveSpec};
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Observed fraction `p` of each early-prediction training sequence.
    pub observation: f64,
    pub observation_rule: ObservationRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            observation: 0.25,
            observation_rule: ObservationRule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ObjectiveSpec) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let min_batch = if spec.needs_batch_pairs() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch size must be >= {min_batch} for {}, got {}",
                spec.label(),
                self.batch_size
            )));
        }
        if !(self.observation > 0.0 && self.observation <= 1.0) {
            return Err(Error::Config(format!("observation must lie in (0, 1], got {}", self.observation)));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. A non-finite gradient aborts before anything is
    /// modified.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam holds {} slots, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.same_shape(g, "adam_step")?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter slot {i}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let mh = md[k] / c1;
                let vh = vd[k] / c2;
                pd[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Top-1 / top-k accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub n: usize,
}

impl Metrics {
    fn from_ranks(ranks: &[usize], k: usize) -> Self {
        let n = ranks.len();
        let frac = |pred: &dyn Fn(usize) -> bool| ranks.iter().filter(|r| pred(**r)).count() as f64 / n.max(1) as f64;
        Self { top1: frac(&|r| r == 0), topk: frac(&|r| r < k), k, n }
    }
}

/// Position of `label` in `scores` sorted descending, ties broken by lower
/// class index first.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores.iter().enumerate().filter(|(j, v)| **v > s || (**v == s && *j < label)).count()
}

/// Anticipation evaluation: fused scores plus each head alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnticipationMetrics {
    /// `transition(classify(z_t)) + classify(project(z_t))` against `y_f`.
    pub fused: Metrics,
    /// Transition head alone against `y_f`.
    pub transition: Metrics,
    /// Future head `classify(project(z_t))` alone against `y_f`.
    pub future: Metrics,
    /// Observed-action head against `y_o`.
    pub observed: Metrics,
}

/// One epoch of history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub eval_topk: f64,
    pub saturation_events: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// The first `len` frames of a source; reading past them is a bug.
struct Prefix<'a, S: ?Sized> {
    inner: &'a S,
    len: usize,
}

impl<S: FrameSource + ?Sized> FrameSource for Prefix<'_, S> {
    fn frame_count(&self) -> usize {
        self.len
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn frame(&self, t: usize) -> &[f64] {
        assert!(t < self.len, "frame {t} read beyond observed prefix of {}", self.len);
        self.inner.frame(t)
    }
}

/// Rows per evaluation chunk; chunks are scored in parallel.
const EVAL_CHUNK: usize = 128;

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(EVAL_CHUNK)).map(|c| (c * EVAL_CHUNK, ((c + 1) * EVAL_CHUNK).min(n))).collect()
}

/// Early-prediction evaluation over arbitrary frame sources: each sequence
/// contributes only its first `rule.frames(T, p)` frames.
pub fn evaluate_early_sources<S: FrameSource + Sync>(
    model: &Model,
    sequences: &[S],
    labels: &[usize],
    p: f64,
    rule: &ObservationRule,
    k: usize,
) -> Result<Metrics> {
    if sequences.len() != labels.len() {
        return Err(Error::Contract("one label per sequence required".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Contract(format!("observation fraction must lie in (0, 1], got {p}")));
    }
    let chunks = chunk_ranges(sequences.len());
    let ranks = par::try_map_indices(chunks.len(), |c| {
        let (lo, hi) = chunks[c];
        let prefixes: Vec<Prefix<S>> =
            sequences[lo..hi].iter().map(|s| Prefix { inner: s, len: rule.frames(s.frame_count(), p) }).collect();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let z_t = b.summarize(&mut tape, &prefixes)?;
        let logits = b.classify(&mut tape, z_t)?;
        let scores = tape.value(logits);
        Ok((lo..hi).map(|i| rank_of(scores.row(i - lo), labels[i])).collect::<Vec<_>>())
    })?;
    Ok(Metrics::from_ranks(&ranks.concat(), k))
}

pub fn evaluate_early(model: &Model, data: &Dataset, p: f64, rule: &ObservationRule, k: usize) -> Result<Metrics> {
    if data.mode != Mode::Early {
        return Err(Error::Contract("early evaluation needs an early dataset".into()));
    }
    let views: Vec<FrameView> = data.records.iter().map(|r| r.view()).collect();
    let labels: Vec<usize> = data.records.iter().map(|r| r.label()).collect();
    evaluate_early_sources(model, &views, &labels, p, rule, k)
}

/// Anticipation evaluation from observed clips alone.
pub fn evaluate_anticipation_sources<S: FrameSource + Sync>(
    model: &Model,
    clips: &[S],
    observed_labels: &[usize],
    future_labels: &[usize],
    k: usize,
) -> Result<AnticipationMetrics> {
    let n = clips.len();
    if observed_labels.len() != n || future_labels.len() != n {
        return Err(Error::Contract("one label pair per clip required".into()));
    }
    let chunks = chunk_ranges(n);
    let ranks = par::try_map_indices(chunks.len(), |c| {
        let (lo, hi) = chunks[c];
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let z_t = b.summarize(&mut tape, &clips[lo..hi])?;
        let s_o = b.classify(&mut tape, z_t)?;
        let s_of = b.transition(&mut tape, s_o)?;
        let z_h = b.project(&mut tape, z_t)?;
        let s_f = b.classify(&mut tape, z_h)?;
        let fused = fuse_scores(&mut tape, s_of, s_f)?;
        let rows = |v, labels: &[usize], tape: &Tape| -> Vec<usize> {
            let m: &Tensor = tape.value(v);
            (lo..hi).map(|i| rank_of(m.row(i - lo), labels[i])).collect()
        };
        Ok([
            rows(fused, future_labels, &tape),
            rows(s_of, future_labels, &tape),
            rows(s_f, future_labels, &tape),
            rows(s_o, observed_labels, &tape),
        ])
    })?;
    let gather = |j: usize| -> Vec<usize> { ranks.iter().flat_map(|r| r[j].iter().copied()).collect() };
    Ok(AnticipationMetrics {
        fused: Metrics::from_ranks(&gather(0), k),
        transition: Metrics::from_ranks(&gather(1), k),
        future: Metrics::from_ranks(&gather(2), k),
        observed: Metrics::from_ranks(&gather(3), k),
    })
}

pub fn evaluate_anticipation(model: &Model, data: &Dataset, k: usize) -> Result<AnticipationMetrics> {
    if data.mode != Mode::Anticipation {
        return Err(Error::Contract("anticipation evaluation needs an anticipation dataset".into()));
    }
    let clips: Vec<FrameView> = data.records.iter().map(|r| r.observed()).collect();
    let observed: Vec<usize> = data.records.iter().map(|r| r.label()).collect();
    let future: Vec<usize> = data.records.iter().map(|r| r.future_label().expect("anticipation record")).collect();
    evaluate_anticipation_sources(model, &clips, &observed, &future, k)
}

/// Headline metric of a dataset: early accuracy at `p`, or fused
/// anticipation accuracy.
pub fn evaluate(model: &Model, data: &Dataset, p: f64, rule: &ObservationRule, k: usize) -> Result<Metrics> {
    match data.mode {
        Mode::Early => evaluate_early(model, data, p, rule, k),
        Mode::Anticipation => Ok(evaluate_anticipation(model, data, k)?.fused),
    }
}

/// Evaluation hook run after every epoch.
pub struct EvalSpec<'a> {
    pub data: &'a Dataset,
    pub p: f64,
    pub top_k: usize,
}

/// Trains `model` on `data`. Shuffling uses the `"shuffle"` stream of
/// `cfg.seed`, one sub-stream per epoch. When matrix-family losses are
/// present, a trailing batch of a single record is skipped.
pub fn train(
    data: &Dataset,
    mut model: Model,
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
    eval: Option<&EvalSpec>,
) -> Result<TrainOutcome> {
    cfg.validate(spec)?;
    if data.mode != spec.mode {
        return Err(Error::Contract(format!(
            "dataset mode {:?} does not match objective mode {:?}",
            data.mode, spec.mode
        )));
    }
    let mc = *model.config();
    if data.dim != mc.dim || data.classes != mc.classes {
        return Err(Error::Contract(format!(
            "dataset (d={}, classes={}) does not match model (d={}, classes={})",
            data.dim, data.classes, mc.dim, mc.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let min_batch = if spec.needs_batch_pairs() { 2 } else { 1 };
    let mut adam = Adam::new(cfg.learning_rate, model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = rng::stream(cfg.seed, "shuffle", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut saturated = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < min_batch {
                continue;
            }
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let nodes = match spec.mode {
                Mode::Early => {
                    let sequences: Vec<FrameView> = idx.iter().map(|&i| data.records[i].view()).collect();
                    let batch = EarlyBatch {
                        observed: sequences
                            .iter()
                            .map(|s| cfg.observation_rule.frames(s.frame_count(), cfg.observation))
                            .collect(),
                        labels: idx.iter().map(|&i| data.records[i].label()).collect(),
                        sequences,
                    };
                    early_objective(&mut tape, &b, &batch, spec)?
                }
                Mode::Anticipation => {
                    let batch = AnticipationBatch {
                        observed: idx.iter().map(|&i| data.records[i].observed()).collect(),
                        future: idx.iter().map(|&i| data.records[i].future().expect("anticipation record")).collect(),
                        observed_labels: idx.iter().map(|&i| data.records[i].label()).collect(),
                        future_labels: idx
                            .iter()
                            .map(|&i| data.records[i].future_label().expect("anticipation record"))
                            .collect(),
                    };
                    anticipation_objective(&mut tape, &b, &batch, spec)?
                }
            };
            let loss = tape.scalar(nodes.total)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss {loss} at epoch {epoch}, batch {batches}")));
            }
            let grads = tape.backward(nodes.total)?;
            let g: Vec<Tensor> = b.vars().iter().map(|v| grads.wrt(*v)).collect();
            adam.step(model.params_mut(), &g)?;
            saturated += tape.events().saturated;
            loss_sum += loss;
            batches += 1;
        }
        let (eval_top1, eval_topk) = match eval {
            Some(e) => {
                let m = evaluate(&model, e.data, e.p, &cfg.observation_rule, e.top_k)?;
                (m.top1, m.topk)
            }
            None => (f64::NAN, f64::NAN),
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            eval_top1,
            eval_topk,
            saturation_events: saturated,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Writes the history as CSV with header
/// `epoch,train_loss,eval_top1,eval_topk,saturation_events`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in history {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::losses::LossKind;
    use crate::model::ModelConfig;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut a = Adam::new(0.001, &p);
        a.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut a = Adam::new(0.001, &p);
        a.step(&mut p, &[Tensor::vector(vec![3.0, -0.2, 1e-3])]).unwrap();
        let want = [1.0 - 0.001, -2.0 + 0.001, 0.5 - 0.001];
        for (x, y) in p[0].data().iter().zip(want) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut a = Adam::new(0.001, &p);
        assert!(matches!(a.step(&mut p, &[Tensor::vector(vec![f64::NAN])]), Err(Error::NonFinite(_))));
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(a.steps(), 0);
    }

    #[test]
    fn ranks_break_ties_by_index() {
        assert_eq!(rank_of(&[0.0, 0.0, 0.0], 0), 0);
        assert_eq!(rank_of(&[0.0, 0.0, 0.0], 2), 2);
        assert_eq!(rank_of(&[0.1, 0.5, 0.3], 2), 1);
        let m = Metrics::from_ranks(&[0, 1, 4, 7], 5);
        assert_eq!((m.top1, m.topk), (0.25, 0.75));
    }

    fn small_early() -> (Dataset, Dataset) {
        let cfg = GeneratorConfig { length: 8, dim: 4, classes: 4, ..GeneratorConfig::early() };
        let s = generate(&cfg, Mode::Early, 96, 64).unwrap();
        (s.train, s.test)
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, test_set) = small_early();
        let mc = ModelConfig { dim: 4, hidden: 5, classes: 4 };
        let cfg = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
        let spec = ObjectiveSpec::with_kinds(Mode::Early, &[LossKind::Jvs, LossKind::Jcc]);
        let eval = EvalSpec { data: &test_set, p: 0.5, top_k: 2 };
        let run = || train(&train_set, Model::init(mc, 3).unwrap(), &spec, &cfg, Some(&eval)).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.model, b.model);
        assert_eq!(format!("{:?}", a.history), format!("{:?}", b.history));
        assert!(a.history.iter().all(|r| r.train_loss.is_finite()));
        assert!(a.history.iter().all(|r| r.eval_topk >= r.eval_top1));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let (train_set, _) = small_early();
        let mc = ModelConfig { dim: 4, hidden: 3, classes: 4 };
        let spec = ObjectiveSpec::baseline(Mode::Anticipation);
        let r = train(&train_set, Model::init(mc, 0).unwrap(), &spec, &TrainConfig::default(), None);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn batch_size_one_rejected_for_matrix_losses() {
        let spec = ObjectiveSpec::with_kinds(Mode::Early, &[LossKind::Fn]);
        let cfg = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(cfg.validate(&spec).is_err());
        assert!(cfg.validate(&ObjectiveSpec::baseline(Mode::Early)).is_ok());
    }
}
