//! GRU feature summarizer, linear projection, shared action classifier and
//! transition head.
//!
//! Row-vector convention throughout: a batch of embeddings is an n×h
//! matrix and every affine map is `x·W + b`.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::FrameSource;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame feature dimension `d`.
    pub dim: usize,
    /// Embedding dimension `h`.
    pub hidden: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("model.dim and model.hidden must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("model.classes must be >= 2, got {}", self.classes)));
        }
        Ok(())
    }
}

/// Parameter slots, in storage, optimizer and checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    GruWu,
    GruUu,
    GruBu,
    GruWr,
    GruUr,
    GruBr,
    GruWc,
    GruUc,
    GruBc,
    ProjW,
    ProjB,
    ClsW,
    ClsB,
    TransW,
    TransB,
}

impl Param {
    pub const ALL: [Param; 15] = [
        Param::GruWu,
        Param::GruUu,
        Param::GruBu,
        Param::GruWr,
        Param::GruUr,
        Param::GruBr,
        Param::GruWc,
        Param::GruUc,
        Param::GruBc,
        Param::ProjW,
        Param::ProjB,
        Param::ClsW,
        Param::ClsB,
        Param::TransW,
        Param::TransB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::GruWu => "gru.w_u",
            Param::GruUu => "gru.u_u",
            Param::GruBu => "gru.b_u",
            Param::GruWr => "gru.w_r",
            Param::GruUr => "gru.u_r",
            Param::GruBr => "gru.b_r",
            Param::GruWc => "gru.w_c",
            Param::GruUc => "gru.u_c",
            Param::GruBc => "gru.b_c",
            Param::ProjW => "proj.w",
            Param::ProjB => "proj.b",
            Param::ClsW => "cls.w",
            Param::ClsB => "cls.b",
            Param::TransW => "trans.w",
            Param::TransB => "trans.b",
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Shape and initialization fan-in under `cfg`.
    pub fn layout(self, cfg: &ModelConfig) -> ([usize; 2], usize) {
        let (d, h, c) = (cfg.dim, cfg.hidden, cfg.classes);
        match self {
            Param::GruWu | Param::GruWr | Param::GruWc => ([d, h], h),
            Param::GruUu | Param::GruUr | Param::GruUc => ([h, h], h),
            Param::GruBu | Param::GruBr | Param::GruBc => ([1, h], h),
            Param::ProjW => ([h, h], h),
            Param::ProjB => ([1, h], h),
            Param::ClsW => ([h, c], h),
            Param::ClsB => ([1, c], h),
            Param::TransW => ([c, c], c),
            Param::TransB => ([1, c], c),
        }
    }
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Model {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Param::ALL.iter().map(|p| Tensor::zeros(&p.layout(&config).0)).collect();
        Ok(Self { config, params })
    }

    /// Every entry uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn from
    /// the `"init"` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = rng::stream(seed, "init", 0);
        for p in Param::ALL {
            let bound = 1.0 / (p.layout(&config).1 as f64).sqrt();
            for v in m.params[p.index()].data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(m)
    }

    /// Builds a model from named tensors; every slot must be present exactly
    /// once with the shape implied by the others.
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut slots: Vec<Option<Tensor>> = vec![None; Param::ALL.len()];
        for (name, t) in named {
            let p = Param::from_name(&name).ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
            if slots[p.index()].replace(t).is_some() {
                return Err(Error::Contract(format!("duplicate parameter {name:?}")));
            }
        }
        let missing: Vec<&str> = Param::ALL.iter().filter(|p| slots[p.index()].is_none()).map(|p| p.name()).collect();
        if !missing.is_empty() {
            return Err(Error::Contract(format!("missing parameters {missing:?}")));
        }
        let params: Vec<Tensor> = slots.into_iter().map(|t| t.expect("checked")).collect();
        let w_u = &params[Param::GruWu.index()];
        let cls = &params[Param::ClsW.index()];
        if w_u.rank() != 2 || cls.rank() != 2 {
            return Err(Error::Contract("weight matrices must be rank 2".into()));
        }
        let config = ModelConfig { dim: w_u.shape()[0], hidden: w_u.shape()[1], classes: cls.shape()[1] };
        config.validate()?;
        for p in Param::ALL {
            let want = p.layout(&config).0;
            let got = params[p.index()].shape();
            if got != want {
                return Err(Error::Contract(format!("parameter {} has shape {got:?}, expected {want:?}", p.name())));
            }
            if !params[p.index()].is_finite() {
                return Err(Error::NonFinite(format!("parameter {}", p.name())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param(&self, p: Param) -> &Tensor {
        &self.params[p.index()]
    }

    pub fn param_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.params[p.index()]
    }

    /// Parameters in [`Param::ALL`] order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        Param::ALL.iter().map(move |p| (p.name(), &self.params[p.index()]))
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> Bound<'m> {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { model: self, vars }
    }

    /// Binds to existing tape variables, one per [`Param::ALL`] slot, e.g.
    /// the leaves handed out by [`crate::autodiff::grad_check`].
    pub fn with_vars<'m>(&'m self, vars: &[Var]) -> Result<Bound<'m>> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!("{} variables for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Bound { model: self, vars: vars.to_vec() })
    }

    /// Embedding of a single sequence.
    pub fn summarize<S: FrameSource>(&self, seq: &S) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let z = b.summarize(&mut tape, std::slice::from_ref(seq))?;
        Ok(tape.value(z).clone())
    }
}

/// A model whose parameters live on a tape.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, p: Param) -> Var {
        self.vars[p.index()]
    }

    /// Tape variables in [`Param::ALL`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Runs the GRU over a batch of sequences and returns one n×h state
    /// matrix per entry of `captures`, where `captures[j][i]` is the number of
    /// frames of sequence `i` consumed before its row is read.
    ///
    /// Sequence `i` reads only frames `0..max_j captures[j][i]`; rows whose
    /// sequence has ended are frozen by masking, so shorter sequences share
    /// the batch without padding leaking into their state.
    pub fn run_gru<S: FrameSource>(&self, tape: &mut Tape, seqs: &[S], captures: &[&[usize]]) -> Result<Vec<Var>> {
        let n = seqs.len();
        let cfg = *self.config();
        if n == 0 {
            return Err(Error::Contract("summarize needs at least one sequence".into()));
        }
        let mut stop = vec![0usize; n];
        for cap in captures {
            if cap.len() != n {
                return Err(Error::Contract(format!("capture list of {} for {n} sequences", cap.len())));
            }
            for (i, &k) in cap.iter().enumerate() {
                if k == 0 || k > seqs[i].frame_count() {
                    return Err(Error::Contract(format!(
                        "sequence {i}: cannot capture after {k} of {} frames",
                        seqs[i].frame_count()
                    )));
                }
                stop[i] = stop[i].max(k);
            }
        }
        for s in seqs {
            if s.dim() != cfg.dim {
                return Err(Error::shape("summarize", format!("frame dim {} for model dim {}", s.dim(), cfg.dim)));
            }
        }

        let steps = *stop.iter().max().expect("n > 0");
        let h_dim = cfg.hidden;
        let mut h = tape.constant(Tensor::zeros(&[n, h_dim]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = vec![0.0; n * cfg.dim];
            let mut mask = vec![0.0; n];
            for i in 0..n {
                if t < stop[i] {
                    x[i * cfg.dim..(i + 1) * cfg.dim].copy_from_slice(seqs[i].frame(t));
                    mask[i] = 1.0;
                }
            }
            let x = tape.constant(Tensor::matrix(n, cfg.dim, x)?);
            let all_active = mask.iter().all(|m| *m == 1.0);

            let u = self.gate(tape, x, h, Param::GruWu, Param::GruUu, Param::GruBu)?;
            let u = tape.sigmoid(u);
            let r = self.gate(tape, x, h, Param::GruWr, Param::GruUr, Param::GruBr)?;
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, h)?;
            let c = self.gate(tape, x, rh, Param::GruWc, Param::GruUc, Param::GruBc)?;
            let c = tape.tanh(c);

            // h' = (1-u)⊙h + u⊙c = h + u⊙(c-h), frozen where masked.
            let diff = tape.sub(c, h)?;
            let mut step = tape.mul(u, diff)?;
            if !all_active {
                let m = tape.constant(Tensor::matrix(n, 1, mask)?);
                step = tape.mul_col(step, m)?;
            }
            h = tape.add(h, step)?;
            states.push(h);
        }

        captures
            .iter()
            .map(|cap| {
                let rows: Vec<(Var, usize)> = cap.iter().enumerate().map(|(i, &k)| (states[k - 1], i)).collect();
                tape.gather_rows(&rows)
            })
            .collect()
    }

    fn gate(&self, tape: &mut Tape, x: Var, h: Var, w: Param, u: Param, b: Param) -> Result<Var> {
        let xw = tape.matmul(x, self.var(w))?;
        let hu = tape.matmul(h, self.var(u))?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, self.var(b))
    }

    /// Final GRU state of each sequence, n×h.
    pub fn summarize<S: FrameSource>(&self, tape: &mut Tape, seqs: &[S]) -> Result<Var> {
        let lens: Vec<usize> = seqs.iter().map(|s| s.frame_count()).collect();
        if let Some(i) = lens.iter().position(|l| *l == 0) {
            return Err(Error::Contract(format!("sequence {i} is empty")));
        }
        Ok(self.run_gru(tape, seqs, &[&lens])?.remove(0))
    }

    /// `z_h = z·W_h + b_h`.
    pub fn project(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        affine(tape, z, self.var(Param::ProjW), self.var(Param::ProjB))
    }

    /// Action logits from embeddings.
    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        affine(tape, z, self.var(Param::ClsW), self.var(Param::ClsB))
    }

    /// Next-action logits from observed-action logits.
    pub fn transition(&self, tape: &mut Tape, scores: Var) -> Result<Var> {
        affine(tape, scores, self.var(Param::TransW), self.var(Param::TransB))
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Test-time anticipation scores: the sum of both future-action heads.
pub fn fuse_scores(tape: &mut Tape, transition_scores: Var, future_scores: Var) -> Result<Var> {
    tape.add(transition_scores, future_scores)
}
