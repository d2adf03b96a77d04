//! Bayes-optimal classifiers for generated data.
//!
//! Frames are independent given the class, each `N(mean(c, phase), σ² I)`,
//! so the log-likelihood of a prefix is a sum of squared distances.

use super::{Dataset, FrameSource, Mode, ObservationRule, World};
use crate::error::{Error, Result};
use crate::par;

/// Accuracy of a classifier on a test set with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleScore {
    pub accuracy: f64,
    pub std_error: f64,
    pub n: usize,
}

impl OracleScore {
    fn from_hits(hits: &[bool]) -> Self {
        let n = hits.len();
        let acc = hits.iter().filter(|h| **h).count() as f64 / n.max(1) as f64;
        Self { accuracy: acc, std_error: (acc * (1.0 - acc) / n.max(1) as f64).sqrt(), n }
    }
}

fn softmax(mut logp: Vec<f64>) -> Vec<f64> {
    let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in &mut logp {
        *v = (*v - m).exp();
        z += *v;
    }
    logp.iter().map(|v| v / z).collect()
}

/// Class posterior given the observed frames of a sequence whose phases are
/// laid out over `total_len` frames. An empty prefix gives the uniform prior.
pub fn posterior_early<S: FrameSource>(world: &World, frames: &S, total_len: usize) -> Vec<f64> {
    let cfg = world.config();
    let inv = 1.0 / (2.0 * cfg.noise * cfg.noise);
    let logp = (0..world.classes())
        .map(|c| {
            let mut ll = 0.0;
            for t in 0..frames.frame_count() {
                let mu = world.mean(c, world.phase_of(t, total_len));
                ll -= frames.frame(t).iter().zip(mu).map(|(x, m)| (x - m) * (x - m)).sum::<f64>() * inv;
            }
            ll
        })
        .collect();
    softmax(logp)
}

/// Posterior over the future action given an observed clip:
/// `P(f | clip) = Σ_o P(o | clip) P(f | o)`.
pub fn posterior_anticipation<S: FrameSource>(world: &World, clip: &S) -> Vec<f64> {
    let observed = posterior_early(world, clip, clip.frame_count());
    let p = world.transition();
    (0..world.classes()).map(|f| observed.iter().enumerate().map(|(o, po)| po * p[o][f]).sum()).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Bayes accuracy of early prediction at observation fraction `p`.
pub fn oracle_accuracy_early(world: &World, data: &Dataset, p: f64, rule: &ObservationRule) -> Result<OracleScore> {
    if data.mode != Mode::Early {
        return Err(Error::Contract("early oracle needs an early dataset".into()));
    }
    let hits = par::map_indices(data.len(), |i| {
        let r = &data.records[i];
        let view = r.view().prefix(rule.frames(r.len(), p));
        argmax(&posterior_early(world, &view, r.len())) == r.label()
    });
    Ok(OracleScore::from_hits(&hits))
}

/// Bayes top-1 accuracy on the future action from the observed clip alone.
pub fn oracle_accuracy_anticipation(world: &World, data: &Dataset) -> Result<OracleScore> {
    if data.mode != Mode::Anticipation {
        return Err(Error::Contract("anticipation oracle needs an anticipation dataset".into()));
    }
    let hits = par::map_indices(data.len(), |i| {
        let r = &data.records[i];
        Some(argmax(&posterior_anticipation(world, &r.observed()))) == r.future_label()
    });
    Ok(OracleScore::from_hits(&hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, FrameView, GeneratorConfig};

    #[test]
    fn empty_prefix_is_uniform() {
        let w = World::new(&GeneratorConfig::early());
        let empty = FrameView::new(&[], 16);
        let post = posterior_early(&w, &empty, 40);
        assert!(post.iter().all(|p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn noiseless_frame_at_mean_dominates() {
        let cfg = GeneratorConfig { noise: 1e-3, alpha: 1.0, ..GeneratorConfig::early() };
        let w = World::new(&cfg);
        for c in 0..cfg.classes {
            let frame = w.mean(c, 0).to_vec();
            let post = posterior_early(&w, &FrameView::new(&frame, cfg.dim), cfg.length);
            assert!(post[c] > 1.0 - 1e-9, "class {c}: {}", post[c]);
        }
    }

    #[test]
    fn alpha_zero_caps_quarter_prefix_at_pair_chance() {
        let cfg = GeneratorConfig { alpha: 0.0, ..GeneratorConfig::early() };
        let w = World::new(&cfg);
        let data = generate_split(&w, Mode::Early, "test", 2000).unwrap();
        let s = oracle_accuracy_early(&w, &data, 0.25, &ObservationRule::default()).unwrap();
        assert!(s.accuracy <= 0.5 + 3.0 * s.std_error, "{s:?}");
        assert!(s.accuracy >= 0.5 - 3.0 * s.std_error, "{s:?}");
    }

    #[test]
    fn posterior_mixes_transitions() {
        let cfg = GeneratorConfig { transition_peak: 1.0, ..GeneratorConfig::anticipation() };
        let w = World::new(&cfg);
        let data = generate_split(&w, Mode::Anticipation, "test", 300).unwrap();
        let s = oracle_accuracy_anticipation(&w, &data).unwrap();
        assert!(s.accuracy > 0.95, "{s:?}");
    }
}
