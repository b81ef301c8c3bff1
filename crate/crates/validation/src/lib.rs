//! Acceptance criteria for the ssformers pipeline, each a function that
//! returns a [`Verdict`]. The `acceptance` test target runs them in order.
//!
//! Criteria 4, 5 and 7 train or evaluate the desk benchmark and take
//! minutes; the rest finish in about a second together.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssformers::backbone::{BackboneConfig, GridSpec};
use ssformers::bench::Benchmark;
use ssformers::data::{generate_synthetic_dataset, Dataset, SyntheticSpec};
use ssformers::episodes::{evaluate, evaluate_with_bank, EpisodeConfig, FeatureBank};
use ssformers::model::{classify_queries, ForwardOptions, Model, ModelConfig, TaskFeatures, Variant};
use ssformers::pmm::{classify_query, Scorer};
use ssformers::selftest::run_selftest;
use ssformers::sstl::{attend_and_align, mutual_mask, project, relation_matrices, MaskMode, MutualMask, ProjectionHeads};
use ssformers::training::{init_model, load_checkpoint, save_checkpoint, Schedule, TrainConfig, Trainer};
use ssformers::{Tape, Tensor};

pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn small_dataset(seed: u64) -> Dataset {
    generate_synthetic_dataset(
        &SyntheticSpec {
            side: 16,
            train_classes: 8,
            val_classes: 1,
            test_classes: 8,
            images_per_class: 20,
            layout_cells: 2,
            distractors_per_image: 1,
            ..SyntheticSpec::default()
        },
        seed,
    )
    .expect("dataset")
}

fn small_model(grid: &str) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: vec![4, 8],
            encoder_side: 8,
            ..BackboneConfig::default()
        },
        grid: GridSpec::parse(grid, 1.0).expect("grid"),
        ..ModelConfig::default()
    }
}

fn small_training(epochs: usize, episodes: usize) -> TrainConfig {
    TrainConfig {
        schedule: Schedule {
            epochs,
            learning_rate: 5e-3,
            ..Schedule::default()
        },
        episodes_per_epoch: episodes,
        episode: EpisodeConfig {
            b_query: 3,
            ..EpisodeConfig::default()
        },
    }
}

fn train(config: ModelConfig, ds: &Dataset, train: TrainConfig, seed: u64) -> Model {
    let model = init_model(config, seed).expect("model");
    let mut trainer = Trainer::new(model, train, seed).expect("trainer");
    trainer.train(&ds.train, |_, _| {}).expect("training");
    trainer.model
}

/// Double argmax with explicit loops; the first maximum wins.
fn brute_force_mask(r: &Tensor) -> Vec<bool> {
    let (rows, cols) = (r.rows(), r.cols());
    (0..rows)
        .map(|i| {
            let best_col = (1..cols).fold(0, |b, j| if r.get(i, j) > r.get(i, b) { j } else { b });
            let best_row = (1..rows).fold(0, |b, k| if r.get(k, best_col) > r.get(b, best_col) { k } else { b });
            best_row == i
        })
        .collect()
}

pub fn mask_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(77);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = r.random_range(1..=8);
        let cols = r.random_range(1..=4) * r.random_range(1..=2) * k;
        let coarse = r.random_bool(0.3);
        let data = (0..k * cols)
            .map(|_| if coarse { r.random_range(-2..=2) as f64 } else { r.random_range(-3.0..3.0) })
            .collect();
        let rel = Tensor::new(vec![k, cols], data).unwrap();
        if mutual_mask(&rel).unwrap().keep != brute_force_mask(&rel) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        mismatches == 0 && secs < 10.0,
        format!("{mismatches} mismatches over 1000 matrices in {secs:.2}s"),
    )
}

pub fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let checks = run_selftest().expect("selftest");
    let gradients: Vec<_> = checks.iter().filter(|c| c.name.starts_with("gradient")).collect();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = gradients.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = gradients.iter().map(|c| c.error).fold(0.0, f64::max);
    let end_to_end = gradients.iter().any(|c| c.name.contains("end-to-end") && c.tolerance <= 1e-3);
    let primitives_strict = gradients
        .iter()
        .filter(|c| !c.name.contains("end-to-end"))
        .all(|c| c.tolerance <= 1e-4);
    Verdict::new(
        failed.is_empty() && end_to_end && primitives_strict && secs < 60.0,
        format!(
            "{} checks, worst relative error {worst:.2e}, failed {failed:?}, {secs:.2}s",
            gradients.len()
        ),
    )
}

fn scores(config: &ModelConfig, heads: &ProjectionHeads, support: &[Tensor], query: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let hv = heads.register(&mut tape, false);
    let s: Vec<&Tensor> = support.iter().collect();
    let task = TaskFeatures::from_tensors(&mut tape, &s, &[query]).unwrap();
    let out = classify_queries(&mut tape, &hv, &task, config, ForwardOptions::default()).unwrap();
    out[0].classification.result.scores.clone()
}

fn aligned_prototype(heads: &ProjectionHeads, query: &Tensor, support: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let hv = heads.register(&mut tape, false);
    let q = tape.constant(query.clone());
    let s = tape.constant(support.clone());
    let proj = project(&mut tape, q, &[s], &hv).unwrap();
    let rel = relation_matrices(&mut tape, proj.query_query, &proj.support_keys).unwrap();
    let mask = mutual_mask(&rel.concatenated).unwrap();
    let p = attend_and_align(&mut tape, &rel.per_class, &mask, &proj.support_values, MaskMode::PreSoftmax, None).unwrap();
    tape.value(p[0].prototype).clone()
}

pub fn invariants() -> Verdict {
    const CASES: u64 = 200;
    let mut r = rng(31);
    let mut failures = Vec::new();

    let rows_ok = (0..CASES).all(|s| {
        let (k, mk) = (r.random_range(1..8), r.random_range(1..10));
        let keep = (0..k).map(|_| r.random_bool(0.5)).collect();
        let mask = MutualMask {
            keep,
            query_to_support: vec![0; k],
            support_to_query: vec![0; k],
        };
        let mut tape = Tape::new();
        let rel = tape.constant(randn(&[k, mk], s));
        let v = tape.constant(randn(&[mk, 3], s + 1000));
        let p = attend_and_align(&mut tape, &[rel], &mask, &[v], MaskMode::PreSoftmax, None).unwrap();
        let a = tape.value(p[0].attention);
        (0..k).all(|i| (a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9)
    });
    if !rows_ok {
        failures.push("attention rows");
    }

    let scaling_ok = (0..CASES).all(|s| {
        let (k, cols) = (r.random_range(1..8), r.random_range(1..40));
        let rel = randn(&[k, cols], s);
        let factor = 10f64.powf(r.random_range(-3.0..3.0));
        mutual_mask(&rel).unwrap().keep == mutual_mask(&rel.scale(factor)).unwrap().keep
    });
    if !scaling_ok {
        failures.push("mask scaling");
    }

    let bound_ok = (0..CASES).all(|s| {
        let (k, c) = (r.random_range(1..10), r.random_range(1..8));
        let q = randn(&[k, c], s);
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let other = tape.constant(randn(&[k, c], s + 1000));
        let own = tape.constant(q);
        let out = classify_query(&mut tape, qv, &[other, own], Scorer::PatchMatching, 1.0).unwrap();
        let sc = &out.result.scores;
        sc[0] <= k as f64 + 1e-12 && (sc[1] - k as f64).abs() <= 1e-12
    });
    if !bound_ok {
        failures.push("score bound");
    }

    let permutation_ok = (0..CASES).all(|s| {
        let (k, rows) = (r.random_range(1..6), r.random_range(1..3) * r.random_range(1..6));
        let heads = ProjectionHeads::init(4, 4, &mut rng(s));
        let query = randn(&[k, 4], s + 1000);
        let support = randn(&[rows, 4], s + 2000);
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut r);
        let parts: Vec<Tensor> = order.iter().map(|&i| support.slice_rows(i, 1)).collect();
        let shuffled = Tensor::vstack(&parts.iter().collect::<Vec<_>>()).unwrap();
        aligned_prototype(&heads, &query, &support).max_abs_diff(&aligned_prototype(&heads, &query, &shuffled)) < 1e-12
    });
    if !permutation_ok {
        failures.push("support patch permutation");
    }

    let equivariance_ok = (0..CASES).all(|s| {
        let n = r.random_range(2..5);
        let config = ModelConfig {
            grid: GridSpec::parse("2x2", 1.0).unwrap(),
            ..ModelConfig::default()
        };
        let heads = ProjectionHeads::init(6, 6, &mut rng(s));
        let support: Vec<Tensor> = (0..n).map(|i| randn(&[4, 6], s * 7 + i as u64)).collect();
        let query = randn(&[4, 6], s * 7 + 99);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permuted: Vec<Tensor> = perm.iter().map(|&p| support[p].clone()).collect();
        let (a, b) = (scores(&config, &heads, &support, &query), scores(&config, &heads, &permuted, &query));
        perm.iter().enumerate().all(|(new, &old)| b[new].to_bits() == a[old].to_bits())
    });
    if !equivariance_ok {
        failures.push("class permutation");
    }

    Verdict::new(
        failures.is_empty(),
        format!("5 invariants x {CASES} instances, failed {failures:?}"),
    )
}

pub fn chance_level() -> Verdict {
    let bench = Benchmark::desk();
    let ds = bench.dataset().expect("dataset");
    let model = init_model(bench.ablation.model.clone(), bench.ablation.seed).expect("model");
    let report = evaluate(&model, &ds.test, &EpisodeConfig::default(), bench.ablation.seed).expect("evaluation");
    Verdict::new(
        (0.16..=0.24).contains(&report.mean),
        format!(
            "untrained desk model, 5-way 1-shot over 600 episodes: {:.4} ± {:.4} (target [0.16, 0.24])",
            report.mean, report.ci95
        ),
    )
}

pub fn benchmark_ordering() -> Verdict {
    const BUDGET_SECONDS: f64 = 600.0;
    let variants = [Variant::Full, Variant::GlobalFeature, Variant::NoSstl];
    let mut ordered = 0;
    let mut above_80 = 0;
    let mut within_budget = true;
    let mut lines = Vec::new();
    for seed in 1..=3 {
        let rows = Benchmark::desk().with_seed(seed).run(&variants).expect("benchmark");
        let acc: Vec<f64> = rows.iter().map(|r| 100.0 * r.report.mean).collect();
        within_budget &= rows.iter().all(|r| r.seconds <= BUDGET_SECONDS);
        if acc[0] - acc[1] >= 5.0 && acc[0] - acc[2] >= 2.0 {
            ordered += 1;
        }
        if acc[0] >= 80.0 {
            above_80 += 1;
        }
        let secs: f64 = rows.iter().map(|r| r.seconds).sum();
        lines.push(format!(
            "seed {seed}: full {:.2} global {:.2} no_sstl {:.2} ({secs:.0}s)",
            acc[0], acc[1], acc[2]
        ));
    }
    Verdict::new(
        ordered >= 2 && above_80 >= 2 && within_budget,
        format!(
            "ordering held at {ordered}/3 seeds, full >= 80% at {above_80}/3; {}",
            lines.join("; ")
        ),
    )
}

pub fn grid_study() -> Verdict {
    let ds = small_dataset(5);
    let eval = EpisodeConfig {
        episode_count: 20,
        b_query: 5,
        ..EpisodeConfig::default()
    };
    let mut counts_ok = GridSpec::parse("2x2+3x3", 1.0).map(|g| g.patch_count() == 13).unwrap_or(false);
    let mut lines = Vec::new();
    for layout in GridSpec::study_layouts() {
        let config = small_model(layout);
        let grid = config.grid.clone();
        let expected: usize = grid.grids().iter().map(|g| g * g).sum();
        let model = train(config, &ds, small_training(1, 4), 5);
        let bank = FeatureBank::build(&model, &ds.test).expect("bank");
        counts_ok &= grid.patch_count() == expected && bank.maps[0][0].rows() == expected;
        let report = evaluate_with_bank(&model, &bank, &ds.test, &eval, 5).expect("eval");
        lines.push(format!("{layout} K={expected} {:.1}%", 100.0 * report.mean));
    }
    Verdict::new(
        counts_ok && lines.len() == 7,
        format!("{}; 2x2+3x3 gives K=13", lines.join(", ")),
    )
}

/// Uses the full model after the desk benchmark's meta-training budget and
/// the default pool sizes.
pub fn semi_supervised() -> Verdict {
    let bench = Benchmark::desk();
    let ds = bench.dataset().expect("dataset");
    let seed = bench.ablation.seed;
    let model = train(bench.ablation.model.clone(), &ds, bench.ablation.train.clone(), seed);
    let semi = EpisodeConfig {
        episode_count: 100,
        semi_supervised: true,
        distractors: true,
        ..EpisodeConfig::default()
    };
    let report = evaluate(&model, &ds.test, &semi, seed).expect("semi evaluation");
    let stats = report.admission.expect("admission stats");
    let (inc, dis) = (stats.in_class_rate(), stats.distractor_rate());

    let supervised = EpisodeConfig {
        episode_count: 100,
        ..EpisodeConfig::default()
    };
    let empty_pool = EpisodeConfig {
        semi_supervised: true,
        unlabeled_per_class: 0,
        distractors: false,
        ..supervised.clone()
    };
    let a = evaluate(&model, &ds.test, &supervised, seed).expect("supervised");
    let b = evaluate(&model, &ds.test, &empty_pool, seed).expect("empty pool");
    let identical = a.accuracies.iter().map(|x| x.to_bits()).eq(b.accuracies.iter().map(|x| x.to_bits()));
    Verdict::new(
        inc > dis && identical,
        format!(
            "admitted in-class {:.1}% ({}/{}), distractor {:.1}% ({}/{}); empty pool bit-identical: {identical}",
            100.0 * inc,
            stats.in_class_admitted,
            stats.in_class_total,
            100.0 * dis,
            stats.distractor_admitted,
            stats.distractor_total
        ),
    )
}

pub fn determinism() -> Verdict {
    let ds = small_dataset(9);
    let eval = EpisodeConfig {
        episode_count: 50,
        b_query: 4,
        ..EpisodeConfig::default()
    };
    let first = train(small_model("2x2+3x3"), &ds, small_training(1, 5), 9);
    let second = train(small_model("2x2+3x3"), &ds, small_training(1, 5), 9);
    let same_training = first == second;
    let a = evaluate(&first, &ds.test, &eval, 4).expect("eval");
    let b = evaluate(&second, &ds.test, &eval, 4).expect("eval");
    let same_eval = a == b;

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("model.ckpt");
    let trainer = Trainer::new(first.clone(), small_training(1, 5), 9).expect("trainer");
    save_checkpoint(&path, &trainer.checkpoint("{}")).expect("save");
    let restored = load_checkpoint(&path).expect("load").model;
    let c = evaluate(&restored, &ds.test, &eval, 4).expect("eval");
    let round_trip = restored == first && c == a;
    Verdict::new(
        same_training && same_eval && round_trip,
        format!("training repeat {same_training}, evaluation repeat {same_eval}, checkpoint round trip {round_trip}"),
    )
}

pub type Check = fn() -> Verdict;

/// Names and checks of criteria 1 to 8, in order.
pub const CRITERIA: [(&str, Check); 8] = [
    ("mutual mask oracle", mask_oracle),
    ("gradient suite", gradient_suite),
    ("exact invariants", invariants),
    ("chance level", chance_level),
    ("benchmark ordering", benchmark_ordering),
    ("grid study", grid_study),
    ("semi-supervised admission", semi_supervised),
    ("determinism and persistence", determinism),
];
