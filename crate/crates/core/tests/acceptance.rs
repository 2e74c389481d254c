//! Acceptance suite. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing capture) and then asserts. Desk-scale runs are cached
//! and shared between criteria.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::{distance_oracle, diversity_by_counting, integer_weights, random_bank, random_volume, sparsity_exhaustive};
use insightr_core::baseline::{train_baseline, BaselineModel};
use insightr_core::checkpoint::Checkpoint;
use insightr_core::config::RunConfig;
use insightr_core::head::{importance, predict};
use insightr_core::metrics::{diversity, evaluate, sparsity, top_k_indices, Evaluation, DIVERSITY_THRESHOLD, TOP_SET};
use insightr_core::model::ProtoModel;
use insightr_core::pipeline::{train, AblationCell};
use insightr_core::prototype::{assign_prototype_labels, distance_map, min_pool, SimilarityKind};
use insightr_core::selfcheck::{model_grad_suites, GRAD_TOLERANCE};
use insightr_core::synth::{generate, SynthDataset, LABEL_OFFSET};
use insightr_core::trainer::{dataset_min_distances, project_prototypes, Stage, StageState, TrainingLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 3;
const DESK_MAE_MAX: f64 = 0.6;
const BASELINE_GAP_MAX: f64 = 0.15;
const DESK_RUNTIME_MAX: Duration = Duration::from_secs(15 * 60);
const CONTINUOUS_MAE_MAX: f64 = 0.65;
const DIVERSITY_BAND: f64 = 0.3;
const LEARNABILITY_MAE_MAX: f64 = 0.5;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "acceptance {criterion:>2} [{verdict}] {name}: {detail}").unwrap();
}

struct DeskRun {
    model: ProtoModel,
    log: TrainingLog,
    eval: Evaluation,
    checkpoint: Vec<u8>,
    elapsed: Duration,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    similarity: SimilarityKind,
    k: usize,
    seed: u64,
    continuous: bool,
}

fn desk_data(continuous: bool) -> Arc<(SynthDataset, SynthDataset)> {
    static CACHE: OnceLock<Mutex<BTreeMap<bool, Arc<(SynthDataset, SynthDataset)>>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap();
    cache
        .entry(continuous)
        .or_insert_with(|| {
            let mut cfg = RunConfig::default();
            cfg.data.continuous_labels = continuous;
            Arc::new(generate(&cfg.data).unwrap())
        })
        .clone()
}

fn desk_config(key: RunKey) -> RunConfig {
    let base = RunConfig::default();
    let mut cfg = AblationCell {
        similarity: key.similarity,
        alpha_clst: base.loss.alpha_clst,
        alpha_psd: base.loss.alpha_psd,
        k: key.k,
        seed: key.seed as usize,
    }
    .apply(&base);
    cfg.data.continuous_labels = key.continuous;
    cfg
}

/// Trains a fresh desk model; does not consult the cache.
fn desk_run_uncached(key: RunKey) -> DeskRun {
    let cfg = desk_config(key);
    let data = desk_data(key.continuous);
    let (train_set, test_set) = (&data.0, &data.1);
    let start = Instant::now();
    let mut cursor = StageState::start();
    let (model, log) = train(&cfg, train_set, |_, s| {
        cursor = *s;
        Ok(())
    })
    .unwrap();
    let elapsed = start.elapsed();
    let eval = evaluate(&model, test_set).unwrap();
    let checkpoint = Checkpoint {
        config: cfg,
        cursor,
        model: model.clone(),
    }
    .to_bytes();
    DeskRun {
        model,
        log,
        eval,
        checkpoint,
        elapsed,
    }
}

fn desk_run(key: RunKey) -> Arc<DeskRun> {
    static CACHE: OnceLock<Mutex<BTreeMap<RunKey, Arc<DeskRun>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(run) = cache.lock().unwrap().get(&key) {
        return run.clone();
    }
    let run = Arc::new(desk_run_uncached(key));
    cache.lock().unwrap().entry(key).or_insert(run).clone()
}

fn key(similarity: SimilarityKind, k: usize, seed: u64) -> RunKey {
    RunKey {
        similarity,
        k,
        seed,
        continuous: false,
    }
}

fn default_run() -> Arc<DeskRun> {
    let cfg = RunConfig::default();
    desk_run(key(cfg.prototypes.similarity, cfg.loss.k, 0))
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let suites = model_grad_suites(&RunConfig::tiny(), 4, None).unwrap();
    let elapsed = start.elapsed();
    let worst = suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    let pass = suites.iter().all(|s| s.passed && s.max_rel_error < GRAD_TOLERANCE) && elapsed < Duration::from_secs(30);
    report(
        1,
        "gradient correctness",
        pass,
        &format!("{} suites, worst relative error {worst:.2e}, {:.1} s", suites.len(), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn c02_distance_layer_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut argmin_agree = true;
    for _ in 0..100 {
        let depth = rng.random_range(1..17);
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let m = rng.random_range(1..11);
        let z = random_volume(&mut rng, depth, h, w);
        let bank = random_bank(&mut rng, m, depth);
        let d = distance_map(&z, &bank).unwrap();
        let (maps, mins, pos) = distance_oracle(&z, &bank);
        let (got_min, got_pos) = min_pool(&d);
        for j in 0..m {
            for (a, b) in d.plane(j).iter().zip(&maps[j]) {
                worst = worst.max((a - b).abs());
            }
            worst = worst.max((got_min[j] - mins[j]).abs());
        }
        argmin_agree &= got_pos == pos;
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-12 && argmin_agree && elapsed < Duration::from_secs(10);
    report(
        2,
        "distance layer oracle",
        pass,
        &format!("100 cases, max abs error {worst:.1e}, argmin agree {argmin_agree}, {:.2} s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

fn random_head(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = rng.random_range(2..60);
    let labels = assign_prototype_labels(m, rng.random_range(0.05..1.0), rng.random_range(1.5..8.0)).unwrap();
    let s = (0..m).map(|_| rng.random_range(1e-3..1e4)).collect();
    let theta = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
    (s, theta, labels)
}

#[test]
fn c03_weighted_mean_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (s, theta, l) = random_head(&mut rng);
        let w: Vec<f64> = s.iter().zip(importance(&theta, &l)).map(|(s, r)| s * r).collect();
        let mean = w.iter().zip(&l).map(|(w, l)| w * l).sum::<f64>() / w.iter().sum::<f64>();
        worst = worst.max((predict(&s, &theta, &l).unwrap() - mean).abs());
    }
    let pass = worst < 1e-10;
    report(3, "weighted-mean identity", pass, &format!("1000 draws, max abs error {worst:.1e}"));
    assert!(pass);
}

#[test]
fn c04_prediction_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut violations = 0;
    for _ in 0..10_000 {
        let (s, theta, l) = random_head(&mut rng);
        let y = predict(&s, &theta, &l).unwrap();
        if !(l[0] <= y && y <= l[l.len() - 1]) {
            violations += 1;
        }
    }
    let pass = violations == 0;
    report(4, "prediction bounds", pass, &format!("10000 draws, {violations} violations"));
    assert!(pass);
}

#[test]
fn c05_projection_contract() {
    let run = default_run();
    let data = desk_data(false);
    let mut model = run.model.clone();
    let dmin = dataset_min_distances(&model, &data.0).unwrap();
    let m = model.bank.len();
    let closest: Vec<f64> = (0..m)
        .map(|j| (0..data.0.len()).map(|i| dmin.data()[i * m + j]).fold(f64::INFINITY, f64::min))
        .collect();
    let all_zero = closest.iter().all(|&d| d == 0.0);
    let before = model.clone();
    let again = project_prototypes(&mut model, &data.0).unwrap();
    let no_op = model == before && again.iter().all(|p| p.distance_moved == 0.0);
    let pass = all_zero && no_op;
    let worst = closest.iter().copied().fold(0.0, f64::max);
    report(
        5,
        "projection contract",
        pass,
        &format!("max nearest-patch distance {worst:e}, re-projection no-op {no_op}"),
    );
    assert!(pass);
}

/// Test MAE of the plain CNN regressor on the default desk data.
fn baseline_mae() -> f64 {
    static MAE: OnceLock<f64> = OnceLock::new();
    *MAE.get_or_init(|| {
        let cfg = RunConfig::default();
        let data = desk_data(false);
        let mut baseline = BaselineModel::new(cfg.backbone.clone(), cfg.baseline.seed).unwrap();
        train_baseline(&mut baseline, &data.0, &cfg.baseline).unwrap();
        let preds = baseline.predict(&data.1).unwrap();
        preds
            .iter()
            .zip(&data.1.labels)
            .map(|(p, y)| (p - LABEL_OFFSET - y).abs())
            .sum::<f64>()
            / data.1.len() as f64
    })
}

#[test]
fn c06_end_to_end_desk_training() {
    let run = default_run();
    let baseline_mae = baseline_mae();
    let mae = run.eval.metrics.mae;
    let gap = mae - baseline_mae;
    let pass = mae <= DESK_MAE_MAX && gap <= BASELINE_GAP_MAX && run.elapsed < DESK_RUNTIME_MAX;
    report(
        6,
        "end-to-end desk training",
        pass,
        &format!(
            "test MAE {mae:.3} (accuracy {:.3}), baseline MAE {baseline_mae:.3}, gap {gap:.3}, trained in {:.1} s",
            run.eval.metrics.accuracy,
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c07_similarity_ablation_trend() {
    let k = RunConfig::default().loss.k;
    let mut wins = 0;
    let mut band = true;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let recip = desk_run(key(SimilarityKind::Reciprocal, k, seed));
        let log = desk_run(key(SimilarityKind::Log, k, seed));
        let (a, b) = (&recip.eval.metrics, &log.eval.metrics);
        wins += usize::from(a.sparsity < b.sparsity);
        let (da, db) = (a.diversity as f64, b.diversity as f64);
        band &= (da - db).abs() <= DIVERSITY_BAND * da.max(db);
        rows.push(format!(
            "seed {seed}: s_spars {:.2} vs {:.2}, diversity {} vs {}",
            a.sparsity, b.sparsity, a.diversity, b.diversity
        ));
    }
    let pass = wins >= 2 && band;
    report(
        7,
        "similarity ablation trend",
        pass,
        &format!("reciprocal sparser in {wins}/{SEEDS} seeds, diversity within band {band}; {}", rows.join("; ")),
    );
    assert!(pass);
}

#[test]
fn c08_min_k_ablation_trend() {
    let similarity = RunConfig::default().prototypes.similarity;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let k1 = desk_run(key(similarity, 1, seed));
        let k3 = desk_run(key(similarity, 3, seed));
        let (a, b) = (&k1.eval.metrics, &k3.eval.metrics);
        wins += usize::from(a.sparsity < b.sparsity && a.diversity < b.diversity);
        rows.push(format!(
            "seed {seed}: s_spars {:.2} vs {:.2}, diversity {} vs {}",
            a.sparsity, b.sparsity, a.diversity, b.diversity
        ));
    }
    let pass = wins >= 2;
    report(
        8,
        "min-k ablation trend",
        pass,
        &format!("k=1 sparser and less diverse in {wins}/{SEEDS} seeds; {}", rows.join("; ")),
    );
    assert!(pass);
}

#[test]
fn c09_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..13);
        let n = rng.random_range(1..120);
        let w = integer_weights(&mut rng, n, m);
        for row in &w {
            mismatches += usize::from(sparsity(row).unwrap() != sparsity_exhaustive(row));
        }
        let sets: Vec<Vec<usize>> = w.iter().map(|row| top_k_indices(row, TOP_SET)).collect();
        mismatches += usize::from(diversity(&sets, m, DIVERSITY_THRESHOLD).unwrap() != diversity_by_counting(&sets, m));
    }
    let uniform_ok = (1..=64usize).all(|m| {
        let expected = (4 * m).div_ceil(5);
        sparsity(&vec![1.0; m]).unwrap() == expected
    });
    let pass = mismatches == 0 && uniform_ok;
    report(
        9,
        "metric oracles",
        pass,
        &format!("1000 matrices, {mismatches} mismatches, uniform ceil(0.8 m) rule holds {uniform_ok}"),
    );
    assert!(pass);
}

#[test]
fn c10_reproducibility() {
    let first = default_run();
    let cfg = RunConfig::default();
    let second = desk_run_uncached(key(cfg.prototypes.similarity, cfg.loss.k, 0));
    let same_ck = first.checkpoint == second.checkpoint;
    let json = |e: &Evaluation| serde_json::to_string_pretty(&e.metrics).unwrap();
    let same_metrics = json(&first.eval) == json(&second.eval);
    let same_log = first.log.to_csv() == second.log.to_csv();
    let pass = same_ck && same_metrics && same_log;
    report(
        10,
        "reproducibility",
        pass,
        &format!(
            "checkpoint bytes identical {same_ck} ({} bytes), metrics JSON identical {same_metrics}, log identical {same_log}",
            first.checkpoint.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c11_continuous_label_mode() {
    let cfg = RunConfig::default();
    let run = desk_run(RunKey {
        continuous: true,
        ..key(cfg.prototypes.similarity, cfg.loss.k, 0)
    });
    let mae = run.eval.metrics.mae;
    let pass = mae <= CONTINUOUS_MAE_MAX && run.elapsed < DESK_RUNTIME_MAX;
    report(
        11,
        "continuous-label mode",
        pass,
        &format!("test MAE {mae:.3} (accuracy {:.3}), trained in {:.1} s", run.eval.metrics.accuracy, run.elapsed.as_secs_f64()),
    );
    assert!(pass);
}

/// The first joint stage of the default desk run (warm-up included) has a
/// non-increasing 5-epoch moving average of the total loss.
#[test]
fn desk_first_joint_stage_loss_trend() {
    let run = default_run();
    let totals: Vec<f64> = run
        .log
        .epochs
        .iter()
        .take_while(|r| r.cycle == 1 && matches!(r.stage, Stage::Warmup | Stage::Joint))
        .map(|r| r.total)
        .collect();
    assert_eq!(totals.len(), RunConfig::default().schedule.joint_epochs);
    let avg: Vec<f64> = totals.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    assert!(avg.windows(2).all(|p| p[1] <= p[0]), "totals {totals:?}, moving average {avg:?}");
}

/// The desk data is learnable by a plain CNN regressor.
#[test]
fn desk_data_is_learnable() {
    let mae = baseline_mae();
    assert!(mae <= LEARNABILITY_MAE_MAX, "baseline test MAE {mae}");
}
