//! Property and gradient audits of the losses and objectives, shared by the
//! `losscheck` subcommand and the test suites.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheck, Tape, Var};
use crate::data::{FrameView, Mode};
use crate::error::Result;
use crate::losses::{self, pair_loss_node, LossFamily, LossKind, LossOptions};
use crate::model::{Model, ModelConfig, Param};
use crate::objective::{
    anticipation_objective, early_objective, AnticipationBatch, EarlyBatch, ObjectiveSpec, WeightedLoss,
};
use crate::rng;
use crate::stats;
use crate::tensor::Tensor;

/// Batch size of every gradient audit.
pub const AUDIT_BATCH: usize = 4;

fn uniform(shape: &[usize], seed: u64, tag: &str, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(seed, tag, 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("sized")
}

/// Finite-difference step: BD composes two inverses and is audited with a
/// larger step to stay clear of cancellation.
pub fn audit_step(kind: Option<LossKind>) -> f64 {
    match kind {
        Some(LossKind::Bd) => 1e-5,
        _ => 1e-6,
    }
}

/// Gradient check of one loss kind on a random 4×3 pair of batches.
pub fn loss_grad_check(kind: LossKind, seed: u64) -> Result<GradCheck> {
    let h = 3;
    // Positive entries keep every row away from the cosine / JVS origin and
    // every JCC denominator entry away from zero, where the ratio saturates
    // the exponential clamp.
    let z_h = uniform(&[AUDIT_BATCH, h], seed, "audit-zh", 0.2, 1.5);
    let z_t = uniform(&[AUDIT_BATCH, h], seed, "audit-zt", 0.2, 1.5);
    let options = LossOptions::default();
    grad_check(
        &|tape: &mut Tape, v: &[Var]| pair_loss_node(tape, kind, v[0], v[1], options),
        &[z_h, z_t],
        audit_step(Some(kind)),
    )
}

/// Gradient check of a complete objective (all model parameters) on a
/// 4-sample batch. `kind = None` audits the baseline.
///
/// Every λ is 1 so each term is visible in its own gradients. In early mode
/// the projection bias only reaches the similarity term, and covariance
/// losses are invariant to it; that slot is then held fixed because its true
/// gradient is identically zero and a relative error would measure roundoff.
pub fn objective_grad_check(mode: Mode, kind: Option<LossKind>, seed: u64) -> Result<GradCheck> {
    let (d, hidden, t) = (3, 2, 4);
    let classes = match mode {
        Mode::Early => 3,
        Mode::Anticipation => 4,
    };
    let model = Model::init(ModelConfig { dim: d, hidden, classes }, seed)?;
    let spec = ObjectiveSpec {
        losses: kind.map(|k| WeightedLoss { kind: k, lambda: 1.0 }).into_iter().collect(),
        ..ObjectiveSpec::baseline(mode)
    };
    let frames: Vec<Tensor> = (0..2 * AUDIT_BATCH)
        .map(|i| uniform(&[t, d], seed, "audit-frames", -1.0, 1.0).map(|v| v * (1.0 + i as f64 * 0.25)))
        .collect();
    let frames: Vec<Tensor> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let shift = uniform(&[1, d], seed.wrapping_add(i as u64), "audit-shift", -0.5, 0.5);
            let mut out = f.clone();
            for r in 0..t {
                for (o, s) in out.row_mut(r).iter_mut().zip(shift.data()) {
                    *o += s;
                }
            }
            out
        })
        .collect();
    let labels: Vec<usize> = (0..AUDIT_BATCH).map(|i| i % classes).collect();
    let future_labels: Vec<usize> = (0..AUDIT_BATCH).map(|i| (i + 1) % classes).collect();

    let frozen = mode == Mode::Early && kind.is_some_and(|k| k.family() == LossFamily::Covariance);
    let free: Vec<Param> = Param::ALL.into_iter().filter(|p| !(frozen && *p == Param::ProjB)).collect();
    let point: Vec<Tensor> = free.iter().map(|p| model.param(*p).clone()).collect();

    grad_check(
        &|tape: &mut Tape, leaves: &[Var]| {
            let mut vars = Vec::with_capacity(Param::ALL.len());
            let mut next = leaves.iter();
            for p in Param::ALL {
                if free.contains(&p) {
                    vars.push(*next.next().expect("one leaf per free slot"));
                } else {
                    vars.push(tape.constant(model.param(p).clone()));
                }
            }
            let b = model.with_vars(&vars)?;
            let views: Vec<FrameView> = frames.iter().map(|f| FrameView::new(f.data(), d)).collect();
            let out = match mode {
                Mode::Early => {
                    let batch = EarlyBatch {
                        sequences: views[..AUDIT_BATCH].to_vec(),
                        observed: (0..AUDIT_BATCH).map(|i| 1 + i % t).collect(),
                        labels: labels.clone(),
                    };
                    early_objective(tape, &b, &batch, &spec)?
                }
                Mode::Anticipation => {
                    let batch = AnticipationBatch {
                        observed: views[..AUDIT_BATCH].to_vec(),
                        future: views[AUDIT_BATCH..].to_vec(),
                        observed_labels: labels.clone(),
                        future_labels: future_labels.clone(),
                    };
                    anticipation_objective(tape, &b, &batch, &spec)?
                }
            };
            Ok(out.total)
        },
        &point,
        audit_step(kind),
    )
}

/// One named audit outcome.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured quantity (an error or a value), for the report.
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn below(name: impl Into<String>, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: measured < threshold, measured, threshold, detail: detail.into() }
    }

    fn failed(name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Self { name: name.into(), passed: false, measured: f64::NAN, threshold: f64::NAN, detail: err.to_string() }
    }
}

/// Full property report.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn random_unit_scaled(r: &mut impl Rng, d: usize, log10_lo: f64, log10_hi: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let scale = 10f64.powf(r.random_range(log10_lo..log10_hi));
    v.into_iter().map(|x| x / n * scale).collect()
}

/// Max over 100 random `z` (d = 16) and the fixed `k` grid of
/// `|jvs(z, kz) − 2k/(k²+1)|`.
pub fn jvs_functional_form_error(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "audit-form", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
        for k in [-100.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 100.0] {
            let kz: Vec<f64> = z.iter().map(|v| v * k).collect();
            worst = worst.max((losses::jvs(&z, &kz) - 2.0 * k / (k * k + 1.0)).abs());
        }
    }
    worst
}

/// Max of `|jvs(z, kz)|` at `|k| = 1e6` over random `z`, and whether
/// `jvs(z, 0)` is exactly 0 for all of them (including `z = 0`).
pub fn jvs_limits(seed: u64) -> (f64, bool) {
    let mut r = rng::stream(seed, "audit-limits", 0);
    let mut worst: f64 = 0.0;
    let mut zero_exact = losses::jvs(&[0.0; 16], &[0.0; 16]) == 0.0;
    for _ in 0..100 {
        let z: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
        for k in [1e6, -1e6] {
            let kz: Vec<f64> = z.iter().map(|v| v * k).collect();
            worst = worst.max(losses::jvs(&z, &kz).abs());
        }
        zero_exact &= losses::jvs(&z, &[0.0; 16]) == 0.0;
    }
    (worst, zero_exact)
}

/// Max of `|cos(z, kz) − sign(k)|` over random `z` and `k ∈ {−3, −1, 0.01, 5}`.
pub fn cosine_sign_error(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "audit-cosine", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
        for k in [-3.0f64, -1.0, 0.01, 5.0] {
            let kz: Vec<f64> = z.iter().map(|v| v * k).collect();
            let c = losses::cosine_similarity(&z, &kz).unwrap_or(f64::NAN);
            worst = worst.max((c - k.signum()).abs());
        }
    }
    worst
}

/// Symmetry errors and bound violations over `trials` adversarial inputs
/// whose norms span 1e−9 to 1e+9.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SymmetryBounds {
    pub jvs_asymmetry: f64,
    pub jfip_asymmetry: f64,
    pub jcc_asymmetry: f64,
    /// Count of `jvs ∉ [−1, 1]` or `jfip ∉ [0, 1]` (or non-finite).
    pub bound_violations: usize,
}

pub fn symmetry_and_bounds(seed: u64, trials: usize) -> Result<SymmetryBounds> {
    let mut r = rng::stream(seed, "audit-symmetry", 0);
    let mut out = SymmetryBounds::default();
    for i in 0..trials {
        let d = 1 + i % 16;
        let a = random_unit_scaled(&mut r, d, -9.0, 9.0);
        // Every fourth pair is nearly parallel, the hardest case for bounds.
        let b = if i % 4 == 0 {
            let k = 10f64.powf(r.random_range(-9.0..9.0)) * if r.random() { 1.0 } else { -1.0 };
            a.iter().map(|v| v * k * (1.0 + r.random_range(-1e-9..1e-9))).collect()
        } else {
            random_unit_scaled(&mut r, d, -9.0, 9.0)
        };
        let ab = losses::jvs(&a, &b);
        let ba = losses::jvs(&b, &a);
        out.jvs_asymmetry = out.jvs_asymmetry.max((ab - ba).abs());
        if !(-1.0..=1.0).contains(&ab) {
            out.bound_violations += 1;
        }

        let h = 1 + i % 3;
        let sa = 10f64.powf(r.random_range(-9.0..9.0));
        let sb = 10f64.powf(r.random_range(-9.0..9.0));
        let m1 = random_psd(&mut r, h, sa);
        let m2 = if i % 4 == 0 { m1.scale(sb / sa) } else { random_psd(&mut r, h, sb) };
        let j12 = losses::jfip(&m1, &m2)?;
        let j21 = losses::jfip(&m2, &m1)?;
        out.jfip_asymmetry = out.jfip_asymmetry.max((j12 - j21).abs());
        if !(0.0..=1.0).contains(&j12) {
            out.bound_violations += 1;
        }

        if i % 10 == 0 {
            let n = 2 + i % 3;
            let za = uniform(&[n, h], seed.wrapping_add(i as u64), "audit-jcc-a", -1.0, 1.0).scale(sa);
            let zb = uniform(&[n, h], seed.wrapping_add(i as u64), "audit-jcc-b", -1.0, 1.0).scale(sb);
            let x = losses::jcc_loss(&za, &zb)?;
            let y = losses::jcc_loss(&zb, &za)?;
            out.jcc_asymmetry = out.jcc_asymmetry.max((x - y).abs());
        }
    }
    Ok(out)
}

fn random_psd(r: &mut impl Rng, h: usize, scale: f64) -> Tensor {
    let a: Vec<f64> = (0..h * h).map(|_| r.random_range(-1.0..1.0)).collect();
    let a = Tensor::matrix(h, h, a).expect("sized");
    a.matmul_nt(&a).expect("square").scale(scale)
}

/// Max deviation of covariance and cross-correlation from double-loop
/// oracles, and of JCC / JFIP from compositions of those oracles, over
/// `batches` random batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StatsOracleErrors {
    pub covariance: f64,
    pub cross_correlation: f64,
    pub jcc: f64,
    pub jfip: f64,
}

pub fn oracle_cross_correlation(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, h) = (a.rows(), a.cols());
    let mut out = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            let mut s = 0.0;
            for k in 0..n {
                s += a.get2(k, i) * b.get2(k, j);
            }
            out[i * h + j] = s / n as f64;
        }
    }
    Tensor::matrix(h, h, out).expect("sized")
}

pub fn oracle_covariance(z: &Tensor) -> Tensor {
    let (n, h) = (z.rows(), z.cols());
    let mean: Vec<f64> = (0..h).map(|j| (0..n).map(|k| z.get2(k, j)).sum::<f64>() / n as f64).collect();
    let mut out = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            let mut s = 0.0;
            for k in 0..n {
                s += (z.get2(k, i) - mean[i]) * (z.get2(k, j) - mean[j]);
            }
            out[i * h + j] = s / n as f64;
        }
    }
    Tensor::matrix(h, h, out).expect("sized")
}

fn oracle_jcc(zh: &Tensor, zt: &Tensor) -> f64 {
    let c = oracle_cross_correlation(zh, zt);
    let hh = oracle_cross_correlation(zh, zh);
    let tt = oracle_cross_correlation(zt, zt);
    let m = c.len();
    (0..m).map(|i| (-(2.0 * c.data()[i]) / (hh.data()[i] + tt.data()[i])).exp()).sum::<f64>() / m as f64
}

fn oracle_jfip(a: &Tensor, b: &Tensor) -> f64 {
    let ip = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>();
    2.0 * ip(a, b) / (ip(a, a) + ip(b, b))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn stats_oracle_errors(seed: u64, batches: usize) -> Result<StatsOracleErrors> {
    let mut out = StatsOracleErrors::default();
    for i in 0..batches as u64 {
        let n = 2 + (i as usize % 7);
        let h = 1 + (i as usize % 5);
        let a = uniform(&[n, h], seed.wrapping_add(i), "audit-stats-a", -2.0, 2.0);
        let b = uniform(&[n, h], seed.wrapping_add(i), "audit-stats-b", -2.0, 2.0);
        out.cross_correlation = out
            .cross_correlation
            .max(max_abs_diff(&stats::cross_correlation(&a, &b)?, &oracle_cross_correlation(&a, &b)));
        let ca = stats::covariance(&a)?;
        let cb = stats::covariance(&b)?;
        out.covariance = out.covariance.max(max_abs_diff(&ca, &oracle_covariance(&a)));
        // JCC is compared on positive batches: with signed data an entry of
        // the denominator can approach zero and the exponent saturates.
        let pa = a.map(|v| v.abs() + 0.1);
        let pb = b.map(|v| v.abs() + 0.1);
        out.jcc = out.jcc.max((losses::jcc_loss(&pa, &pb)? - oracle_jcc(&pa, &pb)).abs());
        out.jfip =
            out.jfip.max((losses::jfip(&ca, &cb)? - oracle_jfip(&oracle_covariance(&a), &oracle_covariance(&b))).abs());
    }
    Ok(out)
}

/// Runs every property check and gradient audit.
pub fn run_losscheck(seed: u64) -> Report {
    let mut checks = Vec::new();

    let form = jvs_functional_form_error(seed);
    checks.push(Check::below(
        "jvs_functional_form",
        form,
        1e-9,
        "max |jvs(z,kz) - 2k/(k^2+1)| over 100 z, k in {-100,-2,-1,-0.5,0.5,1,2,100}",
    ));
    let two = {
        let mut r = rng::stream(seed, "audit-2z", 0);
        let z: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        (losses::jvs(&z, &z2) - 0.8).abs()
    };
    checks.push(Check::below("jvs_z_2z", two, 1e-9, "|jvs(z,2z) - 0.8|"));

    let (far, zero) = jvs_limits(seed);
    checks.push(Check::below("jvs_limit_large_k", far, 2.1e-6, "max |jvs(z,kz)| at |k| = 1e6"));
    checks.push(Check {
        name: "jvs_limit_zero".into(),
        passed: zero,
        measured: if zero { 0.0 } else { 1.0 },
        threshold: 0.0,
        detail: "jvs(z,0) == 0 exactly, including z = 0".into(),
    });
    checks.push(Check::below(
        "cosine_sign",
        cosine_sign_error(seed),
        1e-12,
        "max |cos(z,kz) - sign(k)| for k in {-3,-1,0.01,5}",
    ));

    match symmetry_and_bounds(seed, 10_000) {
        Ok(s) => {
            checks.push(Check::below("jvs_symmetry", s.jvs_asymmetry, 1e-12, "max |jvs(a,b) - jvs(b,a)|"));
            checks.push(Check::below("jfip_symmetry", s.jfip_asymmetry, 1e-12, "max |jfip(A,B) - jfip(B,A)|"));
            checks.push(Check::below("jcc_symmetry", s.jcc_asymmetry, 1e-12, "max |jcc(A,B) - jcc(B,A)|"));
            checks.push(Check::below(
                "bounds",
                s.bound_violations as f64,
                0.5,
                "count of jvs outside [-1,1] or jfip outside [0,1] over 1e4 inputs",
            ));
        }
        Err(e) => checks.push(Check::failed("symmetry_and_bounds", e)),
    }

    match stats_oracle_errors(seed, 20) {
        Ok(s) => {
            checks.push(Check::below("covariance_oracle", s.covariance, 1e-12, "vs double-loop oracle"));
            checks.push(Check::below("cross_correlation_oracle", s.cross_correlation, 1e-12, "vs double-loop oracle"));
            checks.push(Check::below("jcc_oracle", s.jcc, 1e-10, "vs oracle composition"));
            checks.push(Check::below("jfip_oracle", s.jfip, 1e-10, "vs oracle composition"));
        }
        Err(e) => checks.push(Check::failed("stats_oracles", e)),
    }

    for kind in LossKind::ALL {
        checks.push(worst_of(format!("grad_{}", kind.name().to_lowercase()), |s| loss_grad_check(kind, s), seed));
    }
    for (mode, tag) in [(Mode::Early, "early"), (Mode::Anticipation, "anticipation")] {
        checks.push(worst_of(format!("grad_objective_{tag}_baseline"), |s| objective_grad_check(mode, None, s), seed));
        for kind in LossKind::ALL {
            checks.push(worst_of(
                format!("grad_objective_{tag}_{}", kind.name().to_lowercase()),
                |s| objective_grad_check(mode, Some(kind), s),
                seed,
            ));
        }
    }

    let passed = checks.iter().all(|c| c.passed);
    Report { passed, checks }
}

/// Number of seeded points per gradient audit.
pub const AUDIT_POINTS: u64 = 5;

fn worst_of(name: String, f: impl Fn(u64) -> Result<GradCheck>, seed: u64) -> Check {
    let mut worst: f64 = 0.0;
    for p in 0..AUDIT_POINTS {
        match f(seed.wrapping_mul(1000).wrapping_add(p)) {
            Ok(c) => worst = worst.max(c.max_rel_error),
            Err(e) => return Check::failed(name, e),
        }
    }
    Check::below(name, worst, 1e-4, format!("max relative error over {AUDIT_POINTS} points"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_kind_passes() {
        for kind in LossKind::ALL {
            for s in 0..AUDIT_POINTS {
                let c = loss_grad_check(kind, s).unwrap();
                assert!(c.max_rel_error < 1e-4, "{kind} seed {s}: {c:?}");
            }
        }
    }

    #[test]
    fn every_objective_passes() {
        for mode in [Mode::Early, Mode::Anticipation] {
            for kind in std::iter::once(None).chain(LossKind::ALL.map(Some)) {
                for s in 0..AUDIT_POINTS {
                    let c = objective_grad_check(mode, kind, s).unwrap();
                    assert!(c.max_rel_error < 1e-4, "{mode:?} {kind:?} seed {s}: {c:?}");
                }
            }
        }
    }

    #[test]
    fn property_report_passes() {
        let r = run_losscheck(0);
        let failed: Vec<_> = r.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
