//! Backbone pre-training, episodic meta-training, checkpoints and the
//! component ablation runner.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    dense_features_on_tape, BackboneConfig, BackboneParams, FeatureLayout, ImageTensor, PatchRegion,
};
use crate::data::{load_records, save_records, Dataset, ImageRef, Record, Split};
use crate::episodes::{evaluate, sample_episode, EpisodeConfig, EvalReport};
use crate::error::{Error, Result};
use crate::model::{classify_queries, episode_loss, ForwardOptions, Model, ModelConfig, TaskFeatures, Variant};
use crate::sstl::{linear, Linear, LinearVars};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Step-decayed learning rate and optimizer choice shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            decay_factor: 0.5,
            decay_every_epochs: 10,
            epochs: 50,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: Some(10.0),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::Config("decay_every_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every_epochs) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            schedule: Schedule {
                epochs: 10,
                ..Schedule::default()
            },
            batch_size: 32,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub episodes_per_epoch: usize,
    /// Shape of training tasks; `episode_count` is unused here.
    pub episode: EpisodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::default(),
            episodes_per_epoch: 100,
            episode: EpisodeConfig::default(),
        }
    }
}

/// SGD with momentum or Adam over a fixed, ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// Momentum (SGD) or first moment (Adam) per parameter.
    pub first: Vec<Tensor>,
    /// Second moment per parameter (Adam only; empty tensors for SGD).
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(schedule: &Schedule, params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Optimizer {
            kind: schedule.optimizer,
            momentum: schedule.momentum,
            weight_decay: schedule.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: match schedule.optimizer {
                OptimizerKind::Adam => params.iter().map(zeros).collect(),
                OptimizerKind::Sgd => params.iter().map(|_| Tensor::zeros(&[0])).collect(),
            },
        }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim("optimizer", p.shape(), g.shape()));
            }
            let wd = self.weight_decay;
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = self.first[i].data_mut();
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vi = self.momentum * *vi + gi + wd * *w;
                        *w -= lr * *vi;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.beta1, self.beta2);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi + wd * *w;
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }

    fn records(&self) -> Result<Vec<Record>> {
        let hyper = serde_json::json!({
            "kind": self.kind,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
        });
        let mut out = vec![
            Record::bytes("optim.hyper", hyper.to_string().as_bytes()),
            Record::new("optim.step", Tensor::scalar(self.step as f64)),
        ];
        for (i, t) in self.first.iter().enumerate() {
            out.push(Record::new(format!("optim.first.{i}"), t.clone()));
        }
        for (i, t) in self.second.iter().enumerate() {
            out.push(Record::new(format!("optim.second.{i}"), t.clone()));
        }
        Ok(out)
    }

    fn from_records(records: &RecordMap) -> Result<Self> {
        #[derive(Deserialize)]
        struct Hyper {
            kind: OptimizerKind,
            momentum: f64,
            weight_decay: f64,
            beta1: f64,
            beta2: f64,
            epsilon: f64,
        }
        let h: Hyper = records.json("optim.hyper")?;
        let step = records.get("optim.step")?.item() as u64;
        let collect = |prefix: &str| {
            let mut out = Vec::new();
            while let Some(r) = records.find(&format!("{prefix}.{}", out.len())) {
                out.push(r.clone());
            }
            out
        };
        let first = collect("optim.first");
        let second = collect("optim.second");
        if first.len() != second.len() {
            return Err(Error::CorruptCheckpoint("optimizer moment counts differ".into()));
        }
        Ok(Optimizer {
            kind: h.kind,
            momentum: h.momentum,
            weight_decay: h.weight_decay,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.epsilon,
            step,
            first,
            second,
        })
    }
}

/// Scales gradients in place so their global norm is at most `max`.
/// Returns the norm before scaling.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max {
        if norm > max && norm.is_finite() {
            let s = max / norm;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Horizontal flip, random crop back to full size and brightness jitter.
pub fn augment<R: Rng + ?Sized>(image: &ImageTensor, rng: &mut R) -> Result<ImageTensor> {
    let side = image.side();
    let mut out = if rng.random_bool(0.5) { image.hflip() } else { image.clone() };
    let crop = ((side as f64) * 0.875).round().max(1.0) as usize;
    if crop < side {
        let y0 = rng.random_range(0..=side - crop);
        let x0 = rng.random_range(0..=side - crop);
        out = out.crop_resize(
            PatchRegion {
                y0,
                y1: y0 + crop,
                x0,
                x1: x0 + crop,
            },
            side,
        );
    }
    let gain = rng.random_range(0.8..1.2);
    let data = out.data().iter().map(|v| (v * gain).clamp(0.0, 1.0)).collect();
    ImageTensor::new(out.channels(), side, side, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Accuracy of the discarded classifier on the un-augmented split.
    pub train_accuracy: f64,
}

/// Trains the backbone plus a throwaway linear classifier on whole images of
/// every class in `split`.
pub fn pretrain_backbone(
    split: &Split,
    backbone: &BackboneConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(BackboneParams, PretrainReport)> {
    config.schedule.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let classes = split.class_count();
    if classes < 2 {
        return Err(Error::Dataset("pre-training needs at least two classes".into()));
    }
    let mut rng = stage_rng(seed, Stage::Pretrain);
    let mut params = BackboneParams::init(backbone.clone(), &mut rng)?;
    let mut head = Linear::init(backbone.embedding_dim(), classes, &mut rng);
    let refs = split.refs();
    let mut opt = {
        let mut tensors: Vec<&Tensor> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
        tensors.extend([&head.weight, &head.bias]);
        Optimizer::new(&config.schedule, &tensors)
    };
    let mut epoch_losses = Vec::with_capacity(config.schedule.epochs);
    let mut step = 0usize;
    for epoch in 0..config.schedule.epochs {
        let lr = config.schedule.learning_rate_at(epoch);
        let mut order = refs.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<ImageTensor> = batch
                .iter()
                .map(|&r| {
                    if config.augment {
                        augment(split.image(r), &mut rng)
                    } else {
                        Ok(split.image(r).clone())
                    }
                })
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = batch.iter().map(|r| r.class).collect();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let hv = LinearVars {
                weight: tape.param(head.weight.clone()),
                bias: tape.param(head.bias.clone()),
            };
            let refs: Vec<&ImageTensor> = images.iter().collect();
            let emb = dense_features_on_tape(&mut tape, &vars, backbone, &refs, &FeatureLayout::Global)?;
            let logits = linear(&mut tape, emb, hv)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("pre-training loss became {value}"),
                });
            }
            tape.backward(loss)?;
            let mut all = vars.all();
            all.extend([hv.weight, hv.bias]);
            let mut grads: Vec<Option<Tensor>> = all.iter().map(|&v| tape.grad(v).cloned()).collect();
            clip_gradients(&mut grads, config.schedule.grad_clip);
            let mut targets = params.tensors_mut();
            targets.extend([&mut head.weight, &mut head.bias]);
            opt.apply(targets, &grads, lr)?;
            total += value * batch.len() as f64;
            step += 1;
        }
        epoch_losses.push(total / refs.len() as f64);
    }
    let train_accuracy = linear_probe_accuracy(split, &params, &head, &refs)?;
    Ok((
        params,
        PretrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}

fn linear_probe_accuracy(split: &Split, params: &BackboneParams, head: &Linear, refs: &[ImageRef]) -> Result<f64> {
    let mut correct = 0;
    for chunk in refs.chunks(64) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|&r| split.image(r)).collect();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let hv = LinearVars {
            weight: tape.constant(head.weight.clone()),
            bias: tape.constant(head.bias.clone()),
        };
        let emb = dense_features_on_tape(&mut tape, &vars, &params.config, &images, &FeatureLayout::Global)?;
        let logits = linear(&mut tape, emb, hv)?;
        let pred = crate::tensor::rowwise_argmax(tape.value(logits))?;
        correct += pred.iter().zip(chunk).filter(|(p, r)| **p == r.class).count();
    }
    Ok(correct as f64 / refs.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug)]
enum Stage {
    Init,
    Pretrain,
    Meta,
}

/// Seeded RNG for one training stage, on a stream far from the episode
/// streams used by evaluation.
fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - stage as u64);
    rng
}

/// Fresh model for `seed`; same seed, same parameters.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::init(config, &mut stage_rng(seed, Stage::Init))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, backward and one optimizer step on a single episode.
pub fn meta_train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    split: &Split,
    episode: &crate::episodes::Episode,
    schedule: &Schedule,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let support: Vec<Vec<&ImageTensor>> = episode
        .support
        .iter()
        .map(|shots| shots.iter().map(|&r| split.image(r)).collect())
        .collect();
    let queries: Vec<&ImageTensor> = episode.query.iter().map(|q| split.image(q.image)).collect();
    let task = TaskFeatures::encode(&mut tape, &vars.backbone, &model.config, &support, &queries)?;
    let outputs = classify_queries(
        &mut tape,
        &vars.heads,
        &task,
        &model.config,
        ForwardOptions {
            dropout_rng: Some(rng),
            fixed_masks: None,
        },
    )?;
    let loss = episode_loss(&mut tape, &outputs, &episode.labels())?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Training {
            step: optimizer.step as usize,
            message: format!("meta-training loss became {value}"),
        });
    }
    tape.backward(loss)?;
    let mut grads: Vec<Option<Tensor>> = vars.all().iter().map(|&v| tape.grad(v).cloned()).collect();
    let grad_norm = clip_gradients(&mut grads, schedule.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::Training {
            step: optimizer.step as usize,
            message: "non-finite gradient".into(),
        });
    }
    optimizer.apply(model.tensors_mut(), &grads, lr)?;
    Ok(StepOutcome { loss: value, grad_norm })
}

/// Episodic training loop state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        config.schedule.validate()?;
        config.episode.validate()?;
        let tensors: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        let optimizer = Optimizer::new(&config.schedule, &tensors);
        Ok(Trainer {
            model,
            optimizer,
            config,
            epoch: 0,
            rng: stage_rng(seed, Stage::Meta),
        })
    }

    /// Runs one epoch; returns its per-episode losses.
    pub fn run_epoch(&mut self, split: &Split) -> Result<Vec<f64>> {
        let lr = self.config.schedule.learning_rate_at(self.epoch);
        let mut losses = Vec::with_capacity(self.config.episodes_per_epoch);
        for _ in 0..self.config.episodes_per_epoch {
            let episode = sample_episode(split, &self.config.episode, &mut self.rng)?;
            let out = meta_train_step(
                &mut self.model,
                &mut self.optimizer,
                split,
                &episode,
                &self.config.schedule,
                lr,
                &mut self.rng,
            )?;
            losses.push(out.loss);
        }
        self.epoch += 1;
        Ok(losses)
    }

    /// Trains until `config.schedule.epochs` epochs are complete, calling
    /// `on_epoch(epoch, mean_loss)` after each.
    pub fn train(&mut self, split: &Split, mut on_epoch: impl FnMut(usize, f64)) -> Result<()> {
        while self.epoch < self.config.schedule.epochs {
            let losses = self.run_epoch(split)?;
            let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            on_epoch(self.epoch, mean);
        }
        Ok(())
    }

    pub fn checkpoint(&self, run_config_json: &str) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            run_config_json: run_config_json.to_string(),
            rng: self.rng.clone(),
            train_config: Some(self.config.clone()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ck
            .train_config
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint carries no training config".into()))?;
        Ok(Trainer {
            model: ck.model,
            optimizer: ck.optimizer,
            config,
            epoch: ck.epoch,
            rng: ck.rng,
        })
    }
}

/// Everything persisted between runs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Optimizer,
    pub epoch: usize,
    /// Resolved run configuration, verbatim.
    pub run_config_json: String,
    pub rng: ChaCha8Rng,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    /// Weights plus a fresh optimizer, as written after pre-training.
    pub fn weights_only(model: Model, run_config_json: &str) -> Self {
        let tensors: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        let optimizer = Optimizer::new(&Schedule::default(), &tensors);
        Checkpoint {
            model,
            optimizer,
            epoch: 0,
            run_config_json: run_config_json.to_string(),
            rng: ChaCha8Rng::seed_from_u64(0),
            train_config: None,
        }
    }
}

struct RecordMap(Vec<Record>);

impl RecordMap {
    fn find(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|r| r.name == name).map(|r| &r.tensor)
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.find(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing record `{name}`")))
    }

    fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        Record::new(name, self.get(name)?.clone()).to_bytes()
    }

    fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(&self.bytes(name)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("record `{name}`: {e}")))
    }
}

fn json_record<T: Serialize>(name: &str, value: &T) -> Result<Record> {
    let text = serde_json::to_vec(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Record::bytes(name, &text))
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 56 {
        return Err(Error::CorruptCheckpoint(format!("RNG state has {} bytes, expected 56", b.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut records = vec![
        json_record("meta.model_config", &ck.model.config)?,
        Record::bytes("meta.run_config", ck.run_config_json.as_bytes()),
        Record::new("meta.epoch", Tensor::scalar(ck.epoch as f64)),
        Record::bytes("meta.rng", &rng_bytes(&ck.rng)),
    ];
    if let Some(tc) = &ck.train_config {
        records.push(json_record("meta.train_config", tc)?);
    }
    for (name, t) in ck.model.named_tensors() {
        records.push(Record::new(name, t.clone()));
    }
    records.extend(ck.optimizer.records()?);
    save_records(path, &records)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let records = RecordMap(load_records(path)?);
    let config: ModelConfig = records.json("meta.model_config")?;
    let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::CorruptCheckpoint(format!("stored model config: {e}")))?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let stored = records.get(name)?;
        if stored.shape() != slot.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "record `{name}` has shape {:?}, model expects {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        *slot = stored.clone();
    }
    let optimizer = Optimizer::from_records(&records)?;
    if optimizer.first.len() != names.len() {
        return Err(Error::CorruptCheckpoint("optimizer state does not match the model".into()));
    }
    let run_config_json = String::from_utf8(records.bytes("meta.run_config")?)
        .map_err(|_| Error::CorruptCheckpoint("run config is not UTF-8".into()))?;
    let train_config = match records.find("meta.train_config") {
        Some(_) => Some(records.json("meta.train_config")?),
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: records.get("meta.epoch")?.item() as usize,
        run_config_json,
        rng: rng_from_bytes(&records.bytes("meta.rng")?)?,
        train_config,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Shared model settings; the variant field is overridden per row.
    pub model: ModelConfig,
    /// `None` skips pre-training.
    pub pretrain: Option<PretrainConfig>,
    pub train: TrainConfig,
    pub eval: EpisodeConfig,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            model: ModelConfig::default(),
            pretrain: Some(PretrainConfig::default()),
            train: TrainConfig::default(),
            eval: EpisodeConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    /// Meta-training plus evaluation time, excluding shared pre-training.
    pub seconds: f64,
}

/// Pre-trains one backbone, then meta-trains and evaluates every variant
/// from it with the same seeds and budgets. Rows follow `variants` order.
pub fn run_ablation(dataset: &Dataset, variants: &[Variant], config: &AblationConfig) -> Result<Vec<AblationRow>> {
    let backbone = match &config.pretrain {
        Some(p) => Some(pretrain_backbone(&dataset.train, &config.model.backbone, p, config.seed)?.0),
        None => None,
    };
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let start = Instant::now();
        let model = train_variant(dataset, variant, config, backbone.clone())?;
        let report = evaluate(&model, &dataset.test, &config.eval, config.seed)?;
        rows.push(AblationRow {
            variant,
            report,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Initializes (optionally from a pre-trained backbone) and meta-trains one
/// variant on the training split.
pub fn train_variant(
    dataset: &Dataset,
    variant: Variant,
    config: &AblationConfig,
    backbone: Option<BackboneParams>,
) -> Result<Model> {
    let mut model_config = config.model.clone();
    model_config.variant = variant;
    let mut model = init_model(model_config, config.seed)?;
    if let Some(b) = backbone {
        model = model.with_backbone(b)?;
    }
    let mut trainer = Trainer::new(model, config.train.clone(), config.seed)?;
    trainer.train(&dataset.train, |_, _| {})?;
    Ok(trainer.model)
}
