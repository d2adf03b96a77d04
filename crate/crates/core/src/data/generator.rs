use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence, Labels, Mode, SplitDataset};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

/// Phases whose base mean is shared by the two classes of a pair.
const SHARED_PHASES: usize = 2;

/// Parameters of the synthetic action generator.
///
/// Classes come in pairs `(2k, 2k+1)`. Within a pair the first two phases
/// share a base mean and differ only by an `alpha`-scaled class-specific
/// perturbation; later phases are class-specific. Frames are the phase mean
/// plus isotropic Gaussian noise of standard deviation `noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub dim: usize,
    /// Frames per early-prediction sequence.
    pub length: usize,
    pub phases: usize,
    pub alpha: f64,
    pub noise: f64,
    /// Probability of the dominant successor in the action transition matrix.
    pub transition_peak: f64,
    /// Frames per anticipation clip.
    pub clip_len: usize,
    /// Unobserved frames between the observed and the future clip.
    pub gap: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn early() -> Self {
        Self {
            classes: 8,
            dim: 16,
            length: 40,
            phases: 4,
            alpha: 0.3,
            noise: 0.5,
            transition_peak: 0.6,
            clip_len: 8,
            gap: 4,
            seed: 0,
        }
    }

    pub fn anticipation() -> Self {
        Self { classes: 20, ..Self::early() }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Early => Self::early(),
            Mode::Anticipation => Self::anticipation(),
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("generator.classes must be >= 2, got {}", self.classes));
        }
        if self.dim == 0 || self.phases == 0 {
            return fail("generator.dim and generator.phases must be positive".into());
        }
        let frames = match mode {
            Mode::Early => self.length,
            Mode::Anticipation => self.clip_len,
        };
        if frames < self.phases {
            return fail(format!("need at least one frame per phase: {frames} frames for {} phases", self.phases));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("generator.alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return fail(format!("generator.noise must be positive, got {}", self.noise));
        }
        let floor = 1.0 / self.classes as f64;
        if !(self.transition_peak >= floor - 1e-12 && self.transition_peak <= 1.0) {
            return fail(format!("generator.transition_peak must lie in [1/classes, 1], got {}", self.transition_peak));
        }
        Ok(())
    }
}

/// The fixed generating parameters derived from a [`GeneratorConfig`]:
/// per-class phase means and the action transition matrix.
#[derive(Clone, Debug)]
pub struct World {
    cfg: GeneratorConfig,
    /// `means[c][m]` is the unit-norm mean of phase `m` of class `c`.
    means: Vec<Vec<Vec<f64>>>,
    successor: Vec<usize>,
    transition: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl World {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = rng::stream(cfg.seed, "world", 0);
        let (c_n, m_n, d) = (cfg.classes, cfg.phases, cfg.dim);
        let shared = SHARED_PHASES.min(m_n);
        let bases: Vec<Vec<Vec<f64>>> =
            (0..c_n.div_ceil(2)).map(|_| (0..shared).map(|_| unit_vector(&mut rng, d)).collect()).collect();
        let mut means = Vec::with_capacity(c_n);
        for c in 0..c_n {
            let mut phases = Vec::with_capacity(m_n);
            for base in &bases[c / 2] {
                let delta = unit_vector(&mut rng, d);
                let mixed: Vec<f64> = base.iter().zip(&delta).map(|(b, e)| b + cfg.alpha * e).collect();
                phases.push(normalized(mixed));
            }
            for _ in shared..m_n {
                phases.push(unit_vector(&mut rng, d));
            }
            means.push(phases);
        }

        let mut successor: Vec<usize> = (0..c_n).collect();
        successor.shuffle(&mut rng);
        let rho = cfg.transition_peak;
        let rest = (1.0 - rho) / (c_n - 1) as f64;
        let transition =
            (0..c_n).map(|c| (0..c_n).map(|f| if f == successor[c] { rho } else { rest }).collect()).collect();

        Self { cfg: cfg.clone(), means, successor, transition }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.cfg.classes
    }

    pub fn mean(&self, class: usize, phase: usize) -> &[f64] {
        &self.means[class][phase]
    }

    /// Phase of frame `t` in a sequence of `len` frames.
    pub fn phase_of(&self, t: usize, len: usize) -> usize {
        (t * self.cfg.phases / len).min(self.cfg.phases - 1)
    }

    /// Most likely next action after `class`.
    pub fn successor(&self, class: usize) -> usize {
        self.successor[class]
    }

    /// Row-stochastic matrix `P[observed][future]`.
    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Shannon entropy (nats) of each transition row.
    pub fn transition_entropy(&self) -> Vec<f64> {
        self.transition
            .iter()
            .map(|row| row.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum::<f64>().max(0.0))
            .collect()
    }

    fn push_action(&self, rng: &mut ChaCha8Rng, class: usize, len: usize, out: &mut Vec<f64>) {
        for t in 0..len {
            let mean = self.mean(class, self.phase_of(t, len));
            for &mu in mean {
                let e: f64 = rng.sample(StandardNormal);
                out.push(mu + self.cfg.noise * e);
            }
        }
    }

    fn push_hold(&self, rng: &mut ChaCha8Rng, class: usize, len: usize, out: &mut Vec<f64>) {
        let mean = self.mean(class, self.cfg.phases - 1);
        for _ in 0..len {
            for &mu in mean {
                let e: f64 = rng.sample(StandardNormal);
                out.push(mu + self.cfg.noise * e);
            }
        }
    }

    /// Early-prediction record `index` of split `split`; a pure function of
    /// `(seed, split, index)`.
    pub fn early_record(&self, split: &str, index: u64) -> FeatureSequence {
        let mut rng = rng::stream(self.cfg.seed, split, index);
        let label = rng.random_range(0..self.cfg.classes);
        let mut data = Vec::with_capacity(self.cfg.length * self.cfg.dim);
        self.push_action(&mut rng, label, self.cfg.length, &mut data);
        let frames = Tensor::matrix(self.cfg.length, self.cfg.dim, data).expect("consistent size");
        FeatureSequence::new(frames, Labels::Early { label }).expect("generated record is valid")
    }

    /// Anticipation record: an observed clip of action `y_o`, `gap` frames
    /// continuing it, then a clip of the next action `y_f ~ P(·|y_o)`.
    pub fn anticipation_record(&self, split: &str, index: u64) -> FeatureSequence {
        let mut rng = rng::stream(self.cfg.seed, split, index);
        let observed = rng.random_range(0..self.cfg.classes);
        let u: f64 = rng.random();
        let row = &self.transition[observed];
        let mut future = row.len() - 1;
        let mut acc = 0.0;
        for (f, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                future = f;
                break;
            }
        }
        let (l, g) = (self.cfg.clip_len, self.cfg.gap);
        let total = 2 * l + g;
        let mut data = Vec::with_capacity(total * self.cfg.dim);
        self.push_action(&mut rng, observed, l, &mut data);
        self.push_hold(&mut rng, observed, g, &mut data);
        self.push_action(&mut rng, future, l, &mut data);
        let frames = Tensor::matrix(total, self.cfg.dim, data).expect("consistent size");
        FeatureSequence::new(frames, Labels::Anticipation { observed, future, gap: g })
            .expect("generated record is valid")
    }

    pub fn record(&self, mode: Mode, split: &str, index: u64) -> FeatureSequence {
        match mode {
            Mode::Early => self.early_record(split, index),
            Mode::Anticipation => self.anticipation_record(split, index),
        }
    }
}

/// `count` records of one split, generated index-parallel.
pub fn generate_split(world: &World, mode: Mode, split: &str, count: usize) -> Result<Dataset> {
    let records = par::map_indices(count, |i| world.record(mode, split, i as u64));
    Dataset::new(mode, world.classes(), world.cfg.dim, records)
}

pub fn generate(cfg: &GeneratorConfig, mode: Mode, n_train: usize, n_test: usize) -> Result<SplitDataset> {
    cfg.validate(mode)?;
    let world = World::new(cfg);
    Ok(SplitDataset {
        train: generate_split(&world, mode, "train", n_train)?,
        test: generate_split(&world, mode, "test", n_test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FrameSource;

    #[test]
    fn phase_means_are_unit_norm() {
        let w = World::new(&GeneratorConfig::early());
        for c in 0..8 {
            for m in 0..4 {
                let n: f64 = w.mean(c, m).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_zero_makes_pairs_share_early_phases() {
        let cfg = GeneratorConfig { alpha: 0.0, ..GeneratorConfig::early() };
        let w = World::new(&cfg);
        assert_eq!(w.mean(0, 0), w.mean(1, 0));
        assert_eq!(w.mean(2, 1), w.mean(3, 1));
        assert_ne!(w.mean(0, 2), w.mean(1, 2));
        assert_ne!(w.mean(0, 0), w.mean(2, 0));
    }

    #[test]
    fn records_are_deterministic() {
        let w = World::new(&GeneratorConfig::anticipation());
        assert_eq!(w.record(Mode::Early, "train", 17), w.record(Mode::Early, "train", 17));
        assert_eq!(w.record(Mode::Anticipation, "test", 3), w.record(Mode::Anticipation, "test", 3));
        assert_ne!(w.record(Mode::Early, "train", 17), w.record(Mode::Early, "test", 17));
    }

    #[test]
    fn anticipation_layout() {
        let cfg = GeneratorConfig::anticipation();
        let w = World::new(&cfg);
        let r = w.anticipation_record("train", 0);
        assert_eq!(r.len(), 2 * cfg.clip_len + cfg.gap);
        assert_eq!(r.observed().frame_count(), cfg.clip_len);
        assert_eq!(r.future().unwrap().frame_count(), cfg.clip_len);
    }

    #[test]
    fn deterministic_transitions_have_zero_entropy() {
        let cfg = GeneratorConfig { transition_peak: 1.0, ..GeneratorConfig::anticipation() };
        let w = World::new(&cfg);
        assert!(w.transition_entropy().iter().all(|h| *h == 0.0));
        for i in 0..50 {
            let r = w.anticipation_record("train", i);
            let Labels::Anticipation { observed, future, .. } = r.labels() else { unreachable!() };
            assert_eq!(future, w.successor(observed));
        }
    }

    #[test]
    fn transition_rows_are_stochastic() {
        for rho in [0.05, 0.6, 1.0] {
            let cfg = GeneratorConfig { transition_peak: rho, ..GeneratorConfig::anticipation() };
            let w = World::new(&cfg);
            for row in w.transition() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let bad = [
            GeneratorConfig { alpha: 1.5, ..GeneratorConfig::early() },
            GeneratorConfig { noise: 0.0, ..GeneratorConfig::early() },
            GeneratorConfig { classes: 1, ..GeneratorConfig::early() },
            GeneratorConfig { transition_peak: 0.01, ..GeneratorConfig::early() },
        ];
        for cfg in bad {
            assert!(cfg.validate(Mode::Early).is_err(), "{cfg:?}");
        }
        assert!(GeneratorConfig::early().validate(Mode::Early).is_ok());
    }
}
