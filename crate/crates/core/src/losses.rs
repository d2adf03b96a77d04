//! The ten similarity losses compared in this crate.
//!
//! Every loss returns a quantity to be minimized, exactly in the form it is
//! tabulated: the exponentiated similarities (`exp(−φ)`) already include the
//! exponential, so an objective only ever multiplies a term by its weight.
//!
//! Throughout, the first batch argument is the projected side (`Z_h`, or
//! `Z` in the comparison table) and the second is the observed side
//! (`Z_t`). All ten losses are symmetric under swapping the two.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{DivMode, Tape, Var};
use crate::error::{Error, Result};
use crate::stats::{self, MeanNormDivisor};
use crate::tensor::Tensor;

/// Denominator regularizer for the Jaccard and cosine similarities.
pub const SIMILARITY_EPS: f64 = 1e-12;

/// Ridge added to both covariances before the Bregman divergence inverts them.
pub const BD_RIDGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Corr,
    Cosine,
    L2,
    Jvs,
    Cc,
    Jcc,
    Fn,
    Bd,
    Fip,
    Jfip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossFamily {
    Vector,
    CrossCorrelation,
    Covariance,
}

impl LossFamily {
    pub fn title(self) -> &'static str {
        match self {
            LossFamily::Vector => "Vector similarity measures",
            LossFamily::CrossCorrelation => "Cross-correlation measures",
            LossFamily::Covariance => "Covariance measures",
        }
    }
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::Corr,
        LossKind::Cosine,
        LossKind::L2,
        LossKind::Jvs,
        LossKind::Cc,
        LossKind::Jcc,
        LossKind::Fn,
        LossKind::Bd,
        LossKind::Fip,
        LossKind::Jfip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Corr => "Corr",
            LossKind::Cosine => "Cosine",
            LossKind::L2 => "L2",
            LossKind::Jvs => "JVS",
            LossKind::Cc => "CC",
            LossKind::Jcc => "JCC",
            LossKind::Fn => "FN",
            LossKind::Bd => "BD",
            LossKind::Fip => "FIP",
            LossKind::Jfip => "JFIP",
        }
    }

    pub fn family(self) -> LossFamily {
        match self {
            LossKind::Corr | LossKind::Cosine | LossKind::L2 | LossKind::Jvs => LossFamily::Vector,
            LossKind::Cc | LossKind::Jcc => LossFamily::CrossCorrelation,
            LossKind::Fn | LossKind::Bd | LossKind::Fip | LossKind::Jfip => LossFamily::Covariance,
        }
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, LossKind::Cosine | LossKind::Jvs | LossKind::Jcc | LossKind::Jfip)
    }

    /// Matrix-family losses consume a whole batch at once.
    pub fn is_batch_level(self) -> bool {
        self.family() != LossFamily::Vector
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim();
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

impl Serialize for LossKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LossKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Reduction of per-sample vector losses over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    pub reduction: Reduction,
    pub mean_norm: MeanNormDivisor,
}

/// Jaccard vector similarity `2a·b / (a·a + b·b)`.
///
/// When both squared norms fall below [`SIMILARITY_EPS`] the denominator is
/// regularized by `+SIMILARITY_EPS`, which sends the similarity to 0.
pub fn jvs(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    let mut den = aa + bb;
    if aa < SIMILARITY_EPS && bb < SIMILARITY_EPS {
        den += SIMILARITY_EPS;
    }
    2.0 * ab / den
}

/// Cosine similarity, or `None` if either norm is not above [`SIMILARITY_EPS`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= SIMILARITY_EPS || nb <= SIMILARITY_EPS {
        return None;
    }
    Some(ab / na / nb)
}

/// Jaccard Frobenius inner product `2⟨A,B⟩ / (⟨A,A⟩ + ⟨B,B⟩)`.
pub fn jfip(a: &Tensor, b: &Tensor) -> Result<f64> {
    let ab = a.frobenius_inner(b)?;
    let aa = a.frobenius_inner(a)?;
    let bb = b.frobenius_inner(b)?;
    let mut den = aa + bb;
    if aa < SIMILARITY_EPS && bb < SIMILARITY_EPS {
        den += SIMILARITY_EPS;
    }
    Ok(2.0 * ab / den)
}

fn row_dots(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    tape.row_sums(p)
}

fn row_sq_norms(tape: &mut Tape, a: Var) -> Result<Var> {
    let s = tape.square(a);
    tape.row_sums(s)
}

/// Per-row Jaccard similarity of two n×h batches (n×1 result).
pub fn jvs_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = row_dots(tape, a, b)?;
    let aa = row_sq_norms(tape, a)?;
    let bb = row_sq_norms(tape, b)?;
    let (na, nb) = (tape.value(aa).clone(), tape.value(bb).clone());
    let reg: Vec<f64> = na
        .data()
        .iter()
        .zip(nb.data())
        .map(|(x, y)| if *x < SIMILARITY_EPS && *y < SIMILARITY_EPS { SIMILARITY_EPS } else { 0.0 })
        .collect();
    let reg = tape.constant(Tensor::new(na.shape(), reg)?);
    let den = tape.add(aa, bb)?;
    let den = tape.add(den, reg)?;
    let num = tape.scale(ab, 2.0);
    tape.div(num, den, DivMode::Strict)
}

/// Per-row cosine similarity; degenerate rows (a norm at or below
/// [`SIMILARITY_EPS`]) get similarity 0 and are counted on the tape.
pub fn cosine_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = row_dots(tape, a, b)?;
    let aa = row_sq_norms(tape, a)?;
    let bb = row_sq_norms(tape, b)?;
    let eps2 = SIMILARITY_EPS * SIMILARITY_EPS;
    let keep: Vec<f64> = tape
        .value(aa)
        .data()
        .iter()
        .zip(tape.value(bb).data())
        .map(|(x, y)| if *x > eps2 && *y > eps2 { 1.0 } else { 0.0 })
        .collect();
    let n = keep.len();
    let degenerate = keep.iter().filter(|k| **k == 0.0).count();
    tape.note_degenerate(degenerate);
    let fill: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let keep = tape.constant(Tensor::matrix(n, 1, keep)?);
    let fill = tape.constant(Tensor::matrix(n, 1, fill)?);
    let num = tape.mul(ab, keep)?;
    let aa = tape.add(aa, fill)?;
    let bb = tape.add(bb, fill)?;
    let na = tape.sqrt(aa)?;
    let nb = tape.sqrt(bb)?;
    let q = tape.div(num, na, DivMode::Strict)?;
    tape.div(q, nb, DivMode::Strict)
}

fn reduce(tape: &mut Tape, rows: Var, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Mean => tape.mean(rows),
        Reduction::Sum => Ok(tape.sum(rows)),
    }
}

fn neg_exp(tape: &mut Tape, x: Var) -> Var {
    let n = tape.scale(x, -1.0);
    tape.exp(n)
}

/// Vector-family loss over two n×h batches, reduced over rows.
pub fn vector_loss_node(tape: &mut Tape, kind: LossKind, z_h: Var, z_t: Var, reduction: Reduction) -> Result<Var> {
    if tape.value(z_h).shape() != tape.value(z_t).shape() {
        return Err(Error::shape(
            "vector_loss",
            format!("{:?} vs {:?}", tape.value(z_h).shape(), tape.value(z_t).shape()),
        ));
    }
    let rows = match kind {
        LossKind::Corr => {
            let s = row_dots(tape, z_t, z_h)?;
            neg_exp(tape, s)
        }
        LossKind::Cosine => {
            let s = cosine_rows(tape, z_t, z_h)?;
            neg_exp(tape, s)
        }
        LossKind::Jvs => {
            let s = jvs_rows(tape, z_h, z_t)?;
            neg_exp(tape, s)
        }
        LossKind::L2 => {
            let d = tape.sub(z_t, z_h)?;
            let sq = row_sq_norms(tape, d)?;
            let dist = tape.sqrt(sq)?;
            tape.exp(dist)
        }
        other => return Err(Error::Contract(format!("{other} is not a vector-family loss"))),
    };
    reduce(tape, rows, reduction)
}

/// `‖exp(−E[Z_tᵀ Z])‖_mean`.
pub fn cc_loss_node(tape: &mut Tape, z: Var, z_t: Var, divisor: MeanNormDivisor) -> Result<Var> {
    let n = tape.value(z).rows();
    let c = stats::cross_correlation_node(tape, z_t, z)?;
    let e = neg_exp(tape, c);
    stats::mean_norm_node(tape, e, divisor, n)
}

/// `‖exp(−2 E[Z_hᵀZ_t] ⊘ (E[Z_hᵀZ_h] + E[Z_tᵀZ_t]))‖_mean` with
/// sign-preserving regularization of tiny denominator entries.
pub fn jcc_loss_node(tape: &mut Tape, z_h: Var, z_t: Var, divisor: MeanNormDivisor) -> Result<Var> {
    let n = tape.value(z_h).rows();
    let cross = stats::cross_correlation_node(tape, z_h, z_t)?;
    let hh = stats::cross_correlation_node(tape, z_h, z_h)?;
    let tt = stats::cross_correlation_node(tape, z_t, z_t)?;
    let den = tape.add(hh, tt)?;
    let num = tape.scale(cross, 2.0);
    let ratio = tape.div(num, den, DivMode::Regularized)?;
    let e = neg_exp(tape, ratio);
    // Swapping the inputs transposes `e`; averaging with the transpose keeps
    // the mean unchanged and makes the result bitwise symmetric.
    let et = tape.transpose(e)?;
    let both = tape.add(e, et)?;
    let e = tape.scale(both, 0.5);
    stats::mean_norm_node(tape, e, divisor, n)
}

/// Jaccard Frobenius inner product of two covariance nodes (scalar node).
pub fn jfip_node(tape: &mut Tape, c_h: Var, c_t: Var) -> Result<Var> {
    let ab = tape.frobenius_inner(c_h, c_t)?;
    let aa = tape.frobenius_inner(c_h, c_h)?;
    let bb = tape.frobenius_inner(c_t, c_t)?;
    let small = tape.scalar(aa)? < SIMILARITY_EPS && tape.scalar(bb)? < SIMILARITY_EPS;
    let mut den = tape.add(aa, bb)?;
    if small {
        den = tape.add_scalar(den, SIMILARITY_EPS);
    }
    let num = tape.scale(ab, 2.0);
    tape.div(num, den, DivMode::Strict)
}

/// Covariance-family loss on two covariance matrices `C_t` (observed) and
/// `C_z` (projected/future side).
pub fn covariance_loss_node(tape: &mut Tape, kind: LossKind, c_t: Var, c_z: Var) -> Result<Var> {
    let (d, d2) = tape.value(c_t).dims2()?;
    if d != d2 || tape.value(c_z).shape() != [d, d] {
        return Err(Error::shape(
            "covariance_loss",
            format!("{:?} vs {:?}", tape.value(c_t).shape(), tape.value(c_z).shape()),
        ));
    }
    match kind {
        LossKind::Fn => {
            let diff = tape.sub(c_t, c_z)?;
            let norm = tape.l2_norm(diff);
            Ok(tape.exp(norm))
        }
        LossKind::Bd => {
            let ridge = tape.constant(Tensor::eye(d).scale(BD_RIDGE));
            let ct = tape.add(c_t, ridge)?;
            let cz = tape.add(c_z, ridge)?;
            let inv_z = tape.inverse(cz)?;
            let inv_t = tape.inverse(ct)?;
            let a = tape.matmul(ct, inv_z)?;
            let b = tape.matmul(cz, inv_t)?;
            let s = tape.add(a, b)?;
            let tr = tape.trace(s)?;
            Ok(tape.add_scalar(tr, -(d as f64)))
        }
        LossKind::Fip => {
            let ip = tape.frobenius_inner(c_z, c_t)?;
            Ok(neg_exp(tape, ip))
        }
        LossKind::Jfip => {
            let s = jfip_node(tape, c_z, c_t)?;
            Ok(neg_exp(tape, s))
        }
        other => Err(Error::Contract(format!("{other} is not a covariance-family loss"))),
    }
}

/// Any of the ten losses between a projected batch `z_h` and an observed
/// batch `z_t` (both n×h).
pub fn pair_loss_node(tape: &mut Tape, kind: LossKind, z_h: Var, z_t: Var, options: LossOptions) -> Result<Var> {
    let shape_h = tape.value(z_h).shape().to_vec();
    let shape_t = tape.value(z_t).shape().to_vec();
    if shape_h != shape_t || shape_h.len() != 2 {
        return Err(Error::shape("pair_loss", format!("{shape_h:?} vs {shape_t:?}")));
    }
    match kind.family() {
        LossFamily::Vector => vector_loss_node(tape, kind, z_h, z_t, options.reduction),
        LossFamily::CrossCorrelation => {
            if shape_h[0] < 2 {
                return Err(Error::DegenerateBatch(format!("{kind} needs a batch of at least 2, got {}", shape_h[0])));
            }
            match kind {
                LossKind::Cc => cc_loss_node(tape, z_h, z_t, options.mean_norm),
                _ => jcc_loss_node(tape, z_h, z_t, options.mean_norm),
            }
        }
        LossFamily::Covariance => {
            let c_z = stats::covariance_node(tape, z_h)?;
            let c_t = stats::covariance_node(tape, z_t)?;
            covariance_loss_node(tape, kind, c_t, c_z)
        }
    }
}

fn eval_on_constants(inputs: &[&Tensor], build: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.scalar(out)
}

/// Vector-family loss of a single pair of vectors.
pub fn vector_loss(kind: LossKind, z_h: &[f64], z_t: &[f64]) -> Result<f64> {
    if z_h.len() != z_t.len() {
        return Err(Error::shape("vector_loss", format!("{} vs {}", z_h.len(), z_t.len())));
    }
    let a = Tensor::matrix(1, z_h.len(), z_h.to_vec())?;
    let b = Tensor::matrix(1, z_t.len(), z_t.to_vec())?;
    eval_on_constants(&[&a, &b], |t, v| vector_loss_node(t, kind, v[0], v[1], Reduction::Mean))
}

pub fn jcc_loss(z_h: &Tensor, z_t: &Tensor) -> Result<f64> {
    eval_on_constants(&[z_h, z_t], |t, v| jcc_loss_node(t, v[0], v[1], MeanNormDivisor::Entries))
}

pub fn cc_loss(z: &Tensor, z_t: &Tensor) -> Result<f64> {
    eval_on_constants(&[z, z_t], |t, v| cc_loss_node(t, v[0], v[1], MeanNormDivisor::Entries))
}

pub fn covariance_loss(kind: LossKind, c_t: &Tensor, c_z: &Tensor) -> Result<f64> {
    eval_on_constants(&[c_t, c_z], |t, v| covariance_loss_node(t, kind, v[0], v[1]))
}

/// Value of [`pair_loss_node`] on plain batches.
pub fn pair_loss(kind: LossKind, z_h: &Tensor, z_t: &Tensor, options: LossOptions) -> Result<f64> {
    eval_on_constants(&[z_h, z_t], |t, v| pair_loss_node(t, kind, v[0], v[1], options))
}
