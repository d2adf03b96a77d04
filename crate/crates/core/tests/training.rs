mod common;

use common::CountingSource;
use jaccard_core::data::{
    generate, oracle_accuracy_anticipation, oracle_accuracy_early, GeneratorConfig, Mode, ObservationRule, World,
};
use jaccard_core::losses::LossKind;
use jaccard_core::model::{Model, ModelConfig};
use jaccard_core::objective::ObjectiveSpec;
use jaccard_core::trainer::{evaluate_anticipation_sources, evaluate_early_sources, train, TrainConfig};
use jaccard_core::{par, rng};
use rand::Rng;

fn small_model(d: usize, classes: usize) -> Model {
    Model::init(ModelConfig { dim: d, hidden: 5, classes }, 3).unwrap()
}

#[test]
fn early_evaluation_reads_exactly_the_observed_prefix() {
    let d = 3;
    let model = small_model(d, 4);
    let rule = ObservationRule::default();
    let mut r = rng::stream(0, "access", 0);
    for t in [1usize, 2, 7, 30, 40, 250, 251, 300, 500] {
        let frames: Vec<f64> = (0..t * d).map(|_| r.random_range(-1.0..1.0)).collect();
        for p in [0.01, 0.1, 0.2, 0.25, 0.5, 0.9, 1.0] {
            let src = [CountingSource::new(&frames, d, t), CountingSource::new(&frames, d, t)];
            evaluate_early_sources(&model, &src, &[0, 1], p, &rule, 2).unwrap();
            let want = ((p * t as f64 - 1e-9).ceil() as usize).clamp(1, t);
            let want = if t > 250 { want.min(50) } else { want };
            for s in &src {
                assert_eq!(s.touched(), (0..want).collect::<Vec<_>>(), "T={t} p={p}");
            }
        }
    }
}

#[test]
fn anticipation_evaluation_never_reads_gap_or_future() {
    let cfg = GeneratorConfig { classes: 6, ..GeneratorConfig::anticipation() };
    let data = generate(&cfg, Mode::Anticipation, 1, 40).unwrap().test;
    let model = small_model(cfg.dim, cfg.classes);
    let l = cfg.clip_len;
    let sources: Vec<CountingSource> =
        data.records.iter().map(|r| CountingSource::new(r.frames().data(), cfg.dim, l)).collect();
    let obs: Vec<usize> = data.records.iter().map(|r| r.label()).collect();
    let fut: Vec<usize> = data.records.iter().map(|r| r.future_label().unwrap()).collect();
    evaluate_anticipation_sources(&model, &sources, &obs, &fut, 3).unwrap();
    for s in &sources {
        assert_eq!(s.touched(), (0..l).collect::<Vec<_>>());
    }
}

#[test]
fn oracle_accuracy_is_monotone_in_observation() {
    let cfg = GeneratorConfig::early();
    let world = World::new(&cfg);
    let test = generate(&cfg, Mode::Early, 0, 10_000).unwrap().test;
    let rule = ObservationRule::default();
    let grid = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0];
    let scores: Vec<_> = grid.iter().map(|&p| oracle_accuracy_early(&world, &test, p, &rule).unwrap()).collect();
    for (i, w) in scores.windows(2).enumerate() {
        let slack = 2.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        assert!(
            w[1].accuracy >= w[0].accuracy - slack,
            "p={} -> {}: {} < {}",
            grid[i],
            grid[i + 1],
            w[1].accuracy,
            w[0].accuracy
        );
    }
    // Dataset-difficulty constant of the default early benchmark.
    println!("oracle accuracy on full sequences: {:.4}", scores[grid.len() - 1].accuracy);
    assert!(scores[grid.len() - 1].accuracy > 0.99);
}

#[test]
fn transition_frequencies_match_the_matrix() {
    let cfg = GeneratorConfig::anticipation();
    let world = World::new(&cfg);
    let n = 100_000;
    let pairs = par::map_indices(n, |i| {
        let r = world.anticipation_record("freq", i as u64);
        (r.label(), r.future_label().unwrap())
    });
    let c = cfg.classes;
    let mut counts = vec![vec![0usize; c]; c];
    for (o, f) in pairs {
        counts[o][f] += 1;
    }
    // Per row, 3σ binomial bounds on the successor cell and on the pooled
    // remainder; the full table gets one chi-square test, since 3σ on each of
    // the Cl² cells would be expected to flag about one cell by chance.
    let p = world.transition();
    let within = |count: usize, n: usize, q: f64| {
        let sd = (n as f64 * q * (1.0 - q)).sqrt();
        (count as f64 - n as f64 * q).abs() <= 3.0 * sd
    };
    let mut chi2 = 0.0;
    for o in 0..c {
        let n_o: usize = counts[o].iter().sum();
        let s = world.successor(o);
        assert!(within(counts[o][s], n_o, p[o][s]), "row {o} successor: {} of {n_o}", counts[o][s]);
        assert!(within(n_o - counts[o][s], n_o, 1.0 - p[o][s]), "row {o} remainder");
        for f in 0..c {
            let e = n_o as f64 * p[o][f];
            chi2 += (counts[o][f] as f64 - e).powi(2) / e;
        }
    }
    // 99.9% point of chi-square with c(c−1) degrees of freedom (Wilson–Hilferty).
    let k = (c * (c - 1)) as f64;
    let critical = k * (1.0 - 2.0 / (9.0 * k) + 3.090 * (2.0 / (9.0 * k)).sqrt()).powi(3);
    assert!(chi2 < critical, "chi2 {chi2:.1} >= {critical:.1}");
}

fn short_train(mode: Mode, kinds: &[LossKind], classes: usize, n_train: usize, epochs: usize) -> (Model, Vec<f64>) {
    let g = GeneratorConfig { classes, ..GeneratorConfig::for_mode(mode) };
    let data = generate(&g, mode, n_train, 0).unwrap().train;
    let model = Model::init(ModelConfig { dim: g.dim, hidden: 8, classes }, 1).unwrap();
    let spec = ObjectiveSpec::with_kinds(mode, kinds);
    let cfg = TrainConfig { epochs, batch_size: 32, ..TrainConfig::default() };
    let out = train(&data, model, &spec, &cfg, None).unwrap();
    (out.model, out.history.iter().map(|h| h.train_loss).collect())
}

#[test]
fn every_kind_trains_with_finite_loss() {
    let combos: Vec<Vec<LossKind>> =
        LossKind::ALL.iter().map(|k| vec![*k]).chain([vec![LossKind::Jvs, LossKind::Jcc, LossKind::Jfip]]).collect();
    for mode in [Mode::Early, Mode::Anticipation] {
        for kinds in &combos {
            let (_, losses) = short_train(mode, kinds, 6, 96, 2);
            assert!(losses.iter().all(|l| l.is_finite()), "{mode:?} {kinds:?}: {losses:?}");
        }
    }
}

#[test]
fn trained_models_stay_below_the_oracle() {
    let rule = ObservationRule::default();

    let g = GeneratorConfig::early();
    let (model, _) = short_train(Mode::Early, &[LossKind::Jvs], g.classes, 1000, 4);
    let test = generate(&g, Mode::Early, 0, 2000).unwrap().test;
    let oracle = oracle_accuracy_early(&World::new(&g), &test, 0.25, &rule).unwrap();
    let m = jaccard_core::trainer::evaluate_early(&model, &test, 0.25, &rule, 1).unwrap();
    assert!(m.top1 <= oracle.accuracy + 2.0 * oracle.std_error, "{} vs {:?}", m.top1, oracle);

    let g = GeneratorConfig::anticipation();
    let (model, _) = short_train(Mode::Anticipation, &[], g.classes, 1000, 4);
    let test = generate(&g, Mode::Anticipation, 0, 2000).unwrap().test;
    let oracle = oracle_accuracy_anticipation(&World::new(&g), &test).unwrap();
    let m = jaccard_core::trainer::evaluate_anticipation(&model, &test, 1).unwrap();
    assert!(m.fused.top1 <= oracle.accuracy + 2.0 * oracle.std_error, "{} vs {:?}", m.fused.top1, oracle);
}
