mod common;

use ssformers::backbone::{BackboneConfig, GridSpec};
use ssformers::data::{generate_synthetic_dataset, Dataset, SyntheticSpec};
use ssformers::episodes::{evaluate, nth_episode, sample_episode, EpisodeConfig};
use ssformers::model::{ModelConfig, Variant};
use ssformers::sstl::ProjectionHeads;
use ssformers::training::{
    init_model, load_checkpoint, meta_train_step, pretrain_backbone, run_ablation, save_checkpoint, AblationConfig,
    Optimizer, OptimizerKind, PretrainConfig, Schedule, TrainConfig, Trainer,
};
use ssformers::{Error, Tensor};

fn dataset() -> Dataset {
    generate_synthetic_dataset(
        &SyntheticSpec {
            side: 16,
            train_classes: 6,
            val_classes: 1,
            test_classes: 5,
            images_per_class: 12,
            layout_cells: 2,
            distractors_per_image: 1,
            ..SyntheticSpec::default()
        },
        21,
    )
    .unwrap()
}

fn backbone() -> BackboneConfig {
    BackboneConfig {
        widths: vec![4, 8],
        encoder_side: 8,
        ..BackboneConfig::default()
    }
}

fn model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        backbone: backbone(),
        grid: GridSpec::parse("2x2", 1.0).unwrap(),
        variant,
        ..ModelConfig::default()
    }
}

fn train_config(epochs: usize, episodes: usize) -> TrainConfig {
    TrainConfig {
        schedule: Schedule {
            epochs,
            learning_rate: 5e-3,
            ..Schedule::default()
        },
        episodes_per_epoch: episodes,
        episode: EpisodeConfig {
            n_way: 3,
            b_query: 2,
            ..EpisodeConfig::default()
        },
    }
}

#[test]
fn pretraining_separates_three_classes() {
    let ds = generate_synthetic_dataset(
        &SyntheticSpec {
            side: 16,
            train_classes: 3,
            val_classes: 1,
            test_classes: 1,
            images_per_class: 20,
            layout_cells: 2,
            distractors_per_image: 0,
            ..SyntheticSpec::default()
        },
        2,
    )
    .unwrap();
    let config = PretrainConfig {
        schedule: Schedule {
            epochs: 20,
            learning_rate: 1e-2,
            ..Schedule::default()
        },
        batch_size: 8,
        augment: true,
    };
    let (_, report) = pretrain_backbone(&ds.train, &backbone(), &config, 1).unwrap();
    assert_eq!(report.epoch_losses.len(), 20);
    assert!(report.train_accuracy > 0.95, "accuracy {}", report.train_accuracy);
}

#[test]
fn pretraining_is_deterministic_and_zero_rate_is_identity() {
    let ds = dataset();
    let config = PretrainConfig {
        schedule: Schedule {
            epochs: 1,
            ..Schedule::default()
        },
        batch_size: 16,
        augment: true,
    };
    let (a, _) = pretrain_backbone(&ds.train, &backbone(), &config, 3).unwrap();
    let (b, _) = pretrain_backbone(&ds.train, &backbone(), &config, 3).unwrap();
    assert_eq!(a, b);

    let frozen = PretrainConfig {
        schedule: Schedule {
            learning_rate: 0.0,
            ..config.schedule.clone()
        },
        ..config
    };
    let (c, _) = pretrain_backbone(&ds.train, &backbone(), &frozen, 3).unwrap();
    let initial = init_backbone_like_pretraining(3);
    assert_eq!(c, initial);
}

/// The weights pre-training starts from, obtained by running zero epochs.
fn init_backbone_like_pretraining(seed: u64) -> ssformers::backbone::BackboneParams {
    let ds = dataset();
    let config = PretrainConfig {
        schedule: Schedule {
            epochs: 0,
            ..Schedule::default()
        },
        batch_size: 16,
        augment: false,
    };
    pretrain_backbone(&ds.train, &backbone(), &config, seed).unwrap().0
}

#[test]
fn zero_learning_rate_step_is_identity() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let schedule = Schedule {
            optimizer: kind,
            learning_rate: 0.0,
            weight_decay: 0.1,
            ..Schedule::default()
        };
        let ds = dataset();
        let mut model = init_model(model_config(Variant::Full), 1).unwrap();
        let before = model.clone();
        let tensors: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        let mut opt = Optimizer::new(&schedule, &tensors);
        let config = train_config(1, 1);
        let e = sample_episode(&ds.train, &config.episode, &mut common::rng(1)).unwrap();
        meta_train_step(&mut model, &mut opt, &ds.train, &e, &schedule, 0.0, &mut common::rng(2)).unwrap();
        assert_eq!(model, before);
    }
}

#[test]
fn uniform_scores_give_log_n_loss() {
    let ds = dataset();
    let mut model = init_model(model_config(Variant::Full), 1).unwrap();
    model.heads = ProjectionHeads::zeros(8, 8);
    let schedule = Schedule::default();
    let tensors: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut opt = Optimizer::new(&schedule, &tensors);
    let config = train_config(1, 1);
    let e = sample_episode(&ds.train, &config.episode, &mut common::rng(1)).unwrap();
    let out = meta_train_step(&mut model, &mut opt, &ds.train, &e, &schedule, 1e-3, &mut common::rng(2)).unwrap();
    assert!((out.loss - 3f64.ln()).abs() < 1e-12, "{}", out.loss);
    assert!(out.grad_norm.is_finite());
}

#[test]
fn initial_loss_is_near_log_n() {
    let ds = dataset();
    let model = init_model(model_config(Variant::Full), 2).unwrap();
    let schedule = Schedule::default();
    let config = EpisodeConfig {
        n_way: 5,
        b_query: 2,
        ..EpisodeConfig::default()
    };
    let mut total = 0.0;
    for i in 0..100 {
        let mut m = model.clone();
        let tensors: Vec<&Tensor> = m.named_tensors().into_iter().map(|(_, t)| t).collect();
        let mut opt = Optimizer::new(&schedule, &tensors);
        let e = nth_episode(&ds.train, &config, 4, i).unwrap();
        total += meta_train_step(&mut m, &mut opt, &ds.train, &e, &schedule, 0.0, &mut common::rng(i)).unwrap().loss;
    }
    let mean = total / 100.0;
    assert!((mean - 5f64.ln()).abs() < 0.2, "mean initial loss {mean}");
}

#[test]
fn repeated_steps_on_one_episode_mostly_decrease_the_loss() {
    let ds = dataset();
    let mut config = model_config(Variant::Full);
    config.attention_dropout = 0.0;
    let mut model = init_model(config, 3).unwrap();
    let schedule = Schedule {
        learning_rate: 1e-3,
        ..Schedule::default()
    };
    let tensors: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut opt = Optimizer::new(&schedule, &tensors);
    let e = nth_episode(&ds.train, &train_config(1, 1).episode, 1, 0).unwrap();
    let mut rng = common::rng(0);
    let losses: Vec<f64> = (0..50)
        .map(|_| meta_train_step(&mut model, &mut opt, &ds.train, &e, &schedule, 1e-3, &mut rng).unwrap().loss)
        .collect();
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(decreasing as f64 >= 0.8 * 49.0, "{decreasing}/49 decreasing: {losses:?}");
}

#[test]
fn non_finite_loss_is_a_training_error() {
    let ds = dataset();
    let mut model = init_model(model_config(Variant::Full), 1).unwrap();
    model.heads.value.weight.data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::new(model, train_config(1, 2), 1).unwrap();
    assert!(matches!(trainer.run_epoch(&ds.train), Err(Error::Training { .. })));
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let ds = dataset();
    let model = init_model(model_config(Variant::Full), 4).unwrap();
    let mut trainer = Trainer::new(model, train_config(2, 3), 4).unwrap();
    trainer.run_epoch(&ds.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &trainer.checkpoint("{\"seed\":4}")).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model, trainer.model);
    assert_eq!(ck.optimizer, trainer.optimizer);
    assert_eq!(ck.epoch, 1);
    assert_eq!(ck.run_config_json, "{\"seed\":4}");
    assert_eq!(ck.rng, trainer.rng);

    let eval = EpisodeConfig {
        episode_count: 10,
        n_way: 3,
        b_query: 3,
        ..EpisodeConfig::default()
    };
    let before = evaluate(&trainer.model, &ds.test, &eval, 9).unwrap();
    let after = evaluate(&ck.model, &ds.test, &eval, 9).unwrap();
    assert_eq!(before, after);

    // Resuming continues exactly where the uninterrupted run goes.
    let mut resumed = Trainer::from_checkpoint(ck).unwrap();
    trainer.run_epoch(&ds.train).unwrap();
    resumed.run_epoch(&ds.train).unwrap();
    assert_eq!(trainer.model, resumed.model);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn ablation_is_reproducible_and_ordered() {
    let ds = dataset();
    let config = AblationConfig {
        model: model_config(Variant::Full),
        pretrain: Some(PretrainConfig {
            schedule: Schedule {
                epochs: 1,
                ..Schedule::default()
            },
            batch_size: 16,
            augment: true,
        }),
        train: train_config(1, 2),
        eval: EpisodeConfig {
            episode_count: 4,
            n_way: 3,
            b_query: 2,
            ..EpisodeConfig::default()
        },
        seed: 5,
    };
    let variants = [Variant::Full, Variant::NoSstl, Variant::NoPmm, Variant::GlobalFeature];
    let a = run_ablation(&ds, &variants, &config).unwrap();
    let b = run_ablation(&ds, &variants, &config).unwrap();
    assert_eq!(a.iter().map(|r| r.variant).collect::<Vec<_>>(), variants);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report, y.report);
    }
}

#[test]
fn perfectly_predicted_episode_has_small_loss() {
    let ds = dataset();
    let mut config = model_config(Variant::NoSstl);
    // Untrained features are nearly collinear, so wrong classes score just
    // under K; a tiny temperature turns that gap into a decisive margin.
    config.temperature = Some(1e-4);
    let mut model = init_model(config, 6).unwrap();
    let schedule = Schedule::default();
    let tensors: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut opt = Optimizer::new(&schedule, &tensors);
    let mut e = nth_episode(&ds.train, &train_config(1, 1).episode, 2, 0).unwrap();
    // Each query is its class's support image, so every class score but
    // the true one falls short of K.
    for q in e.query.iter_mut() {
        q.image = e.support[q.label][0];
    }
    let out = meta_train_step(&mut model, &mut opt, &ds.train, &e, &schedule, 1e-3, &mut common::rng(1)).unwrap();
    assert!(out.loss < 1e-3, "loss {}", out.loss);
    assert!(out.grad_norm.is_finite());
}
