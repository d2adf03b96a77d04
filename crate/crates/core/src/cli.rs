//! Command-line front end: `gen-data`, `train`, `eval`, `sweep`, `losscheck`.
//!
//! Everything a run produces goes to the output directory. Wall-clock
//! timestamps appear only in `run.log`; every other artifact is a pure
//! function of the effective configuration.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audit;
use crate::config::ExperimentConfig;
use crate::data::{
    generate, load_dataset, oracle_accuracy_anticipation, oracle_accuracy_early, save_dataset, Dataset, Mode,
    SplitDataset, World,
};
use crate::error::{Error, Result};
use crate::losses::{LossFamily, LossKind};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::objective::{combo_label, parse_combo};
use crate::par;
use crate::trainer::{self, AnticipationMetrics, EvalSpec, Metrics};

pub const TRAIN_FILE: &str = "train.earf";
pub const TEST_FILE: &str = "test.earf";
pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.jdmp";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_RUNS_CSV: &str = "sweep_runs.csv";
pub const SWEEP_TXT: &str = "sweep.txt";
pub const LOSSCHECK_FILE: &str = "losscheck.json";
pub const LOG_FILE: &str = "run.log";

#[derive(Debug, Parser)]
#[command(
    name = "jaccard",
    version,
    about = "Similarity-loss experiments for early action prediction and anticipation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test datasets and report their difficulty.
    GenData(Common),
    /// Train one model and write checkpoint, history and metrics.
    Train(Common),
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every loss combination over the seed set and tabulate.
    Sweep(Common),
    /// Run the loss property suite and write a JSON report.
    Losscheck {
        /// Directory for the JSON report
        #[arg(long)]
        out: PathBuf,
        /// Seed for the random test batches
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON); omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides both the generator and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated loss combinations, e.g. `Baseline,JVS,JVS+JCC+JFIP`.
    #[arg(long)]
    pub kinds: Option<String>,
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `stdout`. Help and version requests
/// are printed and count as success.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(stdout, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.command {
        Command::GenData(c) => gen_data(&c, stdout),
        Command::Train(c) => train(&c, stdout),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint, stdout),
        Command::Sweep(c) => sweep(&c, stdout),
        Command::Losscheck { out, seed } => losscheck(&out, seed, stdout),
    }
}

/// Resolved config plus output directory, with the effective config echoed.
struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    log: File,
}

impl Session {
    fn open(c: &Common, command: &str) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.set_seed(s);
        }
        if let Some(k) = &c.kinds {
            cfg.sweep.kinds = k.split(',').map(|s| s.trim().to_string()).collect();
            if matches!(command, "train" | "eval") {
                let [one] = cfg.sweep.kinds.as_slice() else {
                    return Err(Error::Config(format!("{command} takes a single combination in --kinds")));
                };
                cfg.objective = cfg.objective.with_kinds(&parse_combo(one)?);
            }
        }
        let out = c
            .out
            .clone()
            .or_else(|| cfg.output.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `output`".into()))?;
        // The echo describes the experiment, not where it was written, so
        // runs that differ only in `--out` echo identical bytes.
        cfg.output = None;
        let cfg = cfg.effective();
        cfg.validate()?;
        fs::create_dir_all(&out)?;
        fs::write(out.join(CONFIG_ECHO), cfg.to_json())?;
        let log = OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE))?;
        let mut s = Self { cfg, out, log };
        s.log(&format!("{command} started"))?;
        Ok(s)
    }

    fn log(&mut self, msg: &str) -> Result<()> {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        writeln!(self.log, "[{}.{:03}] {msg}", t.as_secs(), t.subsec_millis())?;
        Ok(())
    }

    /// Train/test data: loaded from `dataset.path` or generated. The world
    /// is returned only for generated data, where the oracle applies.
    fn data(&self) -> Result<(SplitDataset, Option<World>)> {
        let mode = self.cfg.mode();
        if let Some(dir) = &self.cfg.dataset.path {
            let split =
                SplitDataset { train: load_dataset(&dir.join(TRAIN_FILE))?, test: load_dataset(&dir.join(TEST_FILE))? };
            for d in [&split.train, &split.test] {
                if d.mode != mode {
                    return Err(Error::Config(format!(
                        "dataset in {} is {:?}, objective is {mode:?}",
                        dir.display(),
                        d.mode
                    )));
                }
            }
            return Ok((split, None));
        }
        let g = self.cfg.generator_config();
        let split = generate(&g, mode, self.cfg.dataset.train_size, self.cfg.dataset.test_size)?;
        Ok((split, Some(World::new(&g))))
    }
}

/// Early accuracy at one observation fraction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointMetrics {
    pub p: f64,
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub n: usize,
}

/// Final metrics of a trained model on the test split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub label: String,
    pub mode: Mode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub early: Vec<PointMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anticipation: Option<AnticipationMetrics>,
}

impl RunMetrics {
    /// Named scalar metrics, in table column order.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for m in &self.early {
            out.push((format!("top1@p={}", m.p), m.top1));
            out.push((format!("top{}@p={}", m.k, m.p), m.topk));
        }
        if let Some(a) = &self.anticipation {
            out.push(("top1".into(), a.fused.top1));
            out.push((format!("top{}", a.fused.k), a.fused.topk));
            out.push(("observed_top1".into(), a.observed.top1));
            out.push(("transition_top1".into(), a.transition.top1));
            out.push(("future_top1".into(), a.future.top1));
        }
        out
    }

    /// Headline top-1: early at the first `p`, fused for anticipation.
    pub fn headline(&self) -> f64 {
        match &self.anticipation {
            Some(a) => a.fused.top1,
            None => self.early[0].top1,
        }
    }
}

/// Evaluates `model` on `test` per the config's eval section.
pub fn evaluate_run(cfg: &ExperimentConfig, model: &Model, test: &Dataset) -> Result<RunMetrics> {
    let spec = cfg.objective.spec();
    let k = cfg.eval.top_k;
    let (early, anticipation) = match cfg.mode() {
        Mode::Early => {
            let pts = cfg
                .eval
                .p
                .iter()
                .map(|&p| {
                    let Metrics { top1, topk, k, n } =
                        trainer::evaluate_early(model, test, p, &cfg.train.observation_rule, k)?;
                    Ok(PointMetrics { p, top1, topk, k, n })
                })
                .collect::<Result<Vec<_>>>()?;
            (pts, None)
        }
        Mode::Anticipation => (Vec::new(), Some(trainer::evaluate_anticipation(model, test, k)?)),
    };
    Ok(RunMetrics { label: spec.label(), mode: cfg.mode(), seed: cfg.train.seed, early, anticipation })
}

/// One training run; `track` enables the per-epoch test evaluation.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &SplitDataset,
    track: bool,
) -> Result<(trainer::TrainOutcome, RunMetrics)> {
    let spec = cfg.objective.spec();
    let mc = cfg.model_config(data.train.dim, data.train.classes)?;
    let model = Model::init(mc, cfg.train.seed)?;
    let hook = EvalSpec { data: &data.test, p: cfg.eval.p[0], top_k: cfg.eval.top_k };
    let outcome = trainer::train(&data.train, model, &spec, &cfg.train, track.then_some(&hook))?;
    let metrics = evaluate_run(cfg, &outcome.model, &data.test)?;
    Ok((outcome, metrics))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct DataSummary {
    mode: Mode,
    train: usize,
    test: usize,
    classes: usize,
    dim: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    oracle_early: Vec<OraclePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_anticipation: Option<OraclePoint>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    transition_entropy: Vec<f64>,
}

#[derive(Serialize)]
struct OraclePoint {
    p: f64,
    accuracy: f64,
    std_error: f64,
}

fn gen_data(c: &Common, stdout: &mut dyn Write) -> Result<()> {
    let mut s = Session::open(c, "gen-data")?;
    if s.cfg.dataset.path.is_some() {
        return Err(Error::Config("gen-data generates data; remove dataset.path".into()));
    }
    let (split, world) = s.data()?;
    let world = world.expect("generated data has a world");
    save_dataset(&s.out.join(TRAIN_FILE), &split.train)?;
    save_dataset(&s.out.join(TEST_FILE), &split.test)?;
    let mut summary = DataSummary {
        mode: s.cfg.mode(),
        train: split.train.len(),
        test: split.test.len(),
        classes: split.train.classes,
        dim: split.train.dim,
        oracle_early: Vec::new(),
        oracle_anticipation: None,
        transition_entropy: Vec::new(),
    };
    writeln!(
        stdout,
        "{:?} dataset: {} train, {} test, {} classes, d = {}",
        summary.mode, summary.train, summary.test, summary.classes, summary.dim
    )?;
    match s.cfg.mode() {
        Mode::Early => {
            let mut ps = s.cfg.eval.p.clone();
            ps.push(1.0);
            for p in ps {
                let o = oracle_accuracy_early(&world, &split.test, p, &s.cfg.train.observation_rule)?;
                writeln!(stdout, "oracle accuracy at p = {p}: {:.4} ± {:.4}", o.accuracy, o.std_error)?;
                summary.oracle_early.push(OraclePoint { p, accuracy: o.accuracy, std_error: o.std_error });
            }
        }
        Mode::Anticipation => {
            let o = oracle_accuracy_anticipation(&world, &split.test)?;
            writeln!(stdout, "oracle top-1 for the future action: {:.4} ± {:.4}", o.accuracy, o.std_error)?;
            summary.oracle_anticipation = Some(OraclePoint { p: 1.0, accuracy: o.accuracy, std_error: o.std_error });
            summary.transition_entropy = world.transition_entropy();
            let h = &summary.transition_entropy;
            let (lo, hi) = h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            writeln!(stdout, "transition entropy per row (nats): min {lo:.6}, max {hi:.6}")?;
        }
    }
    write_json(&s.out.join(SUMMARY_FILE), &summary)?;
    s.log(&format!("wrote {} and {}", TRAIN_FILE, TEST_FILE))?;
    Ok(())
}

fn print_metrics(stdout: &mut dyn Write, m: &RunMetrics) -> Result<()> {
    for (name, v) in m.columns() {
        writeln!(stdout, "{name}: {v:.4}")?;
    }
    Ok(())
}

fn train(c: &Common, stdout: &mut dyn Write) -> Result<()> {
    let mut s = Session::open(c, "train")?;
    let (split, _) = s.data()?;
    s.log(&format!("training {} for {} epochs", s.cfg.objective.spec().label(), s.cfg.train.epochs))?;
    let (outcome, metrics) = train_run(&s.cfg, &split, true)?;
    save_checkpoint(&s.out.join(CHECKPOINT_FILE), &outcome.model)?;
    trainer::write_history_csv(&s.out.join(HISTORY_FILE), &outcome.history)?;
    write_json(&s.out.join(METRICS_FILE), &metrics)?;
    s.log("training finished")?;
    writeln!(stdout, "{} trained for {} epochs", metrics.label, outcome.history.len())?;
    print_metrics(stdout, &metrics)
}

fn eval(c: &Common, checkpoint: &Path, stdout: &mut dyn Write) -> Result<()> {
    let mut s = Session::open(c, "eval")?;
    let model = load_checkpoint(checkpoint)?;
    let (split, _) = s.data()?;
    let mc = *model.config();
    s.cfg.model_config(mc.dim, mc.classes)?;
    if mc.dim != split.test.dim || mc.classes != split.test.classes {
        return Err(Error::Config(format!(
            "checkpoint (d={}, classes={}) does not match the test set (d={}, classes={})",
            mc.dim, mc.classes, split.test.dim, split.test.classes
        )));
    }
    let metrics = evaluate_run(&s.cfg, &model, &split.test)?;
    write_json(&s.out.join(EVAL_METRICS_FILE), &metrics)?;
    s.log(&format!("evaluated {}", checkpoint.display()))?;
    print_metrics(stdout, &metrics)
}

/// Table group of a combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Group {
    Baseline,
    Family(LossFamily),
    Combination,
}

impl Group {
    fn of(kinds: &[LossKind]) -> Self {
        match kinds {
            [] => Group::Baseline,
            [k] => Group::Family(k.family()),
            _ => Group::Combination,
        }
    }

    fn title(self) -> &'static str {
        match self {
            Group::Baseline => "Baseline",
            Group::Family(f) => f.title(),
            Group::Combination => "Combinations",
        }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub group: &'static str,
    pub label: String,
    pub runs: Vec<RunMetrics>,
}

impl SweepRow {
    /// `(column, mean, std)` over seeds.
    pub fn stats(&self) -> Vec<(String, f64, f64)> {
        let cols: Vec<Vec<(String, f64)>> = self.runs.iter().map(|r| r.columns()).collect();
        (0..cols[0].len())
            .map(|j| {
                let vals: Vec<f64> = cols.iter().map(|c| c[j].1).collect();
                let (m, s) = mean_std(&vals);
                (cols[0][j].0.clone(), m, s)
            })
            .collect()
    }
}

/// Trains every `(combination, seed)` job of the config's sweep section on
/// shared data and returns the rows grouped by family. Jobs run in
/// parallel; each is deterministic on its own.
pub fn run_sweep(cfg: &ExperimentConfig, data: &SplitDataset) -> Result<Vec<SweepRow>> {
    let combos = cfg.sweep.combos()?;
    let seeds = &cfg.sweep.seeds;
    if seeds.is_empty() || combos.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one combination".into()));
    }
    let jobs: Vec<ExperimentConfig> = combos
        .iter()
        .flat_map(|kinds| {
            seeds.iter().map(move |&seed| {
                let mut c = cfg.clone();
                c.objective = cfg.objective.with_kinds(kinds);
                c.train.seed = seed;
                c
            })
        })
        .collect();
    for j in &jobs {
        j.validate()?;
    }
    let mut results = par::try_map_indices(jobs.len(), |i| train_run(&jobs[i], data, false).map(|r| r.1))?.into_iter();
    let mut rows: Vec<(Group, usize, SweepRow)> = combos
        .iter()
        .enumerate()
        .map(|(i, kinds)| {
            let g = Group::of(kinds);
            let runs = results.by_ref().take(seeds.len()).collect();
            (g, i, SweepRow { group: g.title(), label: combo_label(kinds), runs })
        })
        .collect();
    rows.sort_by_key(|(g, i, _)| (*g, *i));
    Ok(rows.into_iter().map(|r| r.2).collect())
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let cols = rows[0].stats();
    let mut header = vec!["group".to_string(), "label".into(), "seeds".into()];
    for (c, _, _) in &cols {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.group.to_string(), r.label.clone(), r.runs.len().to_string()];
        for (_, m, s) in r.stats() {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_runs_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let names: Vec<String> = rows[0].runs[0].columns().into_iter().map(|c| c.0).collect();
    let mut header = vec!["label".to_string(), "seed".into()];
    header.extend(names);
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        for run in &r.runs {
            let mut rec = vec![r.label.clone(), run.seed.to_string()];
            rec.extend(run.columns().into_iter().map(|c| c.1.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

/// Aligned text table, one block per group, cells `mean ± std` in percent.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let cols: Vec<String> = rows[0].stats().into_iter().map(|c| c.0).collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.stats().into_iter().map(|(_, m, s)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)).collect())
        .collect();
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("loss".len()) + 2;
    let col_w: Vec<usize> = (0..cols.len())
        .map(|j| cells.iter().map(|c| c[j].chars().count()).chain([cols[j].len()]).max().unwrap_or(0))
        .collect();
    let mut out = format!("{:<label_w$}", "loss");
    for (c, w) in cols.iter().zip(&col_w) {
        out += &format!("  {c:>w$}");
    }
    out += "  seeds\n";
    let mut group = "";
    for (r, cell) in rows.iter().zip(&cells) {
        if r.group != group {
            group = r.group;
            out += &format!("{group}\n");
        }
        out += &format!("  {:<w$}", r.label, w = label_w - 2);
        for (v, w) in cell.iter().zip(&col_w) {
            let pad = w.saturating_sub(v.chars().count());
            out += &format!("  {}{v}", " ".repeat(pad));
        }
        out += &format!("  {}\n", r.runs.len());
    }
    out
}

fn sweep(c: &Common, stdout: &mut dyn Write) -> Result<()> {
    let mut s = Session::open(c, "sweep")?;
    let (split, _) = s.data()?;
    s.log(&format!("sweep over {} combinations x {} seeds", s.cfg.sweep.kinds.len(), s.cfg.sweep.seeds.len()))?;
    let rows = run_sweep(&s.cfg, &split)?;
    write_sweep_csv(&s.out.join(SWEEP_CSV), &rows)?;
    write_runs_csv(&s.out.join(SWEEP_RUNS_CSV), &rows)?;
    let table = format_sweep_table(&rows);
    fs::write(s.out.join(SWEEP_TXT), &table)?;
    s.log("sweep finished")?;
    write!(stdout, "{table}")?;
    Ok(())
}

fn losscheck(out: &Path, seed: u64, stdout: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(out)?;
    let report = audit::run_losscheck(seed);
    write_json(&out.join(LOSSCHECK_FILE), &report)?;
    for c in &report.checks {
        writeln!(
            stdout,
            "{} {}: {:e} (threshold {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.threshold
        )?;
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::NumericGuard {
            op: "losscheck",
            detail: format!("{failed} of {} checks failed", report.checks.len()),
        });
    }
    writeln!(stdout, "all {} checks passed", report.checks.len())?;
    Ok(())
}
