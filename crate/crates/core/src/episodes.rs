//! N-way M-shot tasks: sampling, per-episode inference, evaluation and the
//! unlabeled-pool support extension.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_dense_features_batch, ClassRepresentation, ImageTensor};
use crate::data::{ImageRef, Split};
use crate::error::{Error, Result};
use crate::model::{classify_queries, ForwardOptions, Model, TaskFeatures};
use crate::pmm::SimilarityResult;
use crate::sstl::{mutual_mask, ProjectionHeads};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub m_shot: usize,
    /// Queries per class.
    pub b_query: usize,
    pub episode_count: usize,
    /// Attach an unlabeled pool and extend supports from it.
    pub semi_supervised: bool,
    /// Pool images drawn from each episode class.
    pub unlabeled_per_class: usize,
    /// Also draw pool images from classes outside the episode.
    pub distractors: bool,
    pub distractor_classes: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_way: 5,
            m_shot: 1,
            b_query: 15,
            episode_count: 600,
            semi_supervised: false,
            unlabeled_per_class: 5,
            distractors: false,
            distractor_classes: 3,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.m_shot == 0 || self.b_query == 0 {
            return Err(Error::Config("n_way, m_shot and b_query must be positive".into()));
        }
        if self.episode_count == 0 {
            return Err(Error::Config("episode_count must be positive".into()));
        }
        Ok(())
    }

    fn images_needed_per_class(&self) -> usize {
        let pool = if self.semi_supervised { self.unlabeled_per_class } else { 0 };
        self.m_shot + self.b_query + pool
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledRef {
    pub image: ImageRef,
    /// Episode-local label in `0..n_way`.
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolImage {
    pub image: ImageRef,
    /// True when the image's class is not among the episode's classes.
    pub distractor: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Split class ids; episode label `n` is `classes[n]`.
    pub classes: Vec<usize>,
    /// `support[n]` holds the M shots of class `n`.
    pub support: Vec<Vec<ImageRef>>,
    pub query: Vec<LabeledRef>,
    pub unlabeled: Vec<PoolImage>,
    pub index: u64,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.label).collect()
    }

    /// Every image the episode touches, supports first.
    pub fn image_refs(&self) -> impl Iterator<Item = ImageRef> + '_ {
        self.support
            .iter()
            .flatten()
            .copied()
            .chain(self.query.iter().map(|q| q.image))
            .chain(self.unlabeled.iter().map(|u| u.image))
    }

    /// Reorders classes: new class `n` is old class `perm[n]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Episode> {
        let n = self.n_way();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Ok(Episode {
            classes: perm.iter().map(|&p| self.classes[p]).collect(),
            support: perm.iter().map(|&p| self.support[p].clone()).collect(),
            query: self
                .query
                .iter()
                .map(|q| LabeledRef {
                    image: q.image,
                    label: inverse[q.label],
                })
                .collect(),
            unlabeled: self.unlabeled.clone(),
            index: self.index,
        })
    }
}

/// RNG for episode `index` of a run: one ChaCha stream per episode, so any
/// subset of episodes can be regenerated independently and in any order.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples classes without replacement, then disjoint support, query and
/// pool images within each class.
pub fn sample_episode<R: Rng + ?Sized>(split: &Split, config: &EpisodeConfig, rng: &mut R) -> Result<Episode> {
    config.validate()?;
    let total = split.class_count();
    let extra = if config.semi_supervised && config.distractors {
        config.distractor_classes
    } else {
        0
    };
    if total < config.n_way + extra {
        return Err(Error::Dataset(format!(
            "{}-way episodes{} need {} classes, split has {total}",
            config.n_way,
            if extra > 0 { " with distractors" } else { "" },
            config.n_way + extra
        )));
    }
    let need = config.images_needed_per_class();
    let picked = sample(rng, total, config.n_way + extra).into_vec();
    let (episode_classes, distractor_classes) = picked.split_at(config.n_way);
    let mut support = Vec::with_capacity(config.n_way);
    let mut query = Vec::with_capacity(config.n_way * config.b_query);
    let mut unlabeled = Vec::new();
    for (label, &class) in episode_classes.iter().enumerate() {
        let available = split.classes[class].images.len();
        if available < need {
            return Err(Error::Dataset(format!(
                "class `{}` has {available} images, episodes need {need}",
                split.classes[class].name
            )));
        }
        let idx = sample(rng, available, need).into_vec();
        let at = |index| ImageRef { class, index };
        support.push(idx[..config.m_shot].iter().map(|&i| at(i)).collect());
        query.extend(
            idx[config.m_shot..config.m_shot + config.b_query]
                .iter()
                .map(|&i| LabeledRef { image: at(i), label }),
        );
        unlabeled.extend(idx[config.m_shot + config.b_query..].iter().map(|&i| PoolImage {
            image: at(i),
            distractor: false,
        }));
    }
    for &class in distractor_classes {
        let available = split.classes[class].images.len();
        let take = config.unlabeled_per_class.min(available);
        for i in sample(rng, available, take) {
            unlabeled.push(PoolImage {
                image: ImageRef { class, index: i },
                distractor: true,
            });
        }
    }
    Ok(Episode {
        classes: episode_classes.to_vec(),
        support,
        query,
        unlabeled,
        index: 0,
    })
}

/// The `index`-th episode of a run seeded with `seed`.
pub fn nth_episode(split: &Split, config: &EpisodeConfig, seed: u64, index: u64) -> Result<Episode> {
    let mut episode = sample_episode(split, config, &mut episode_rng(seed, index))?;
    episode.index = index;
    Ok(episode)
}

/// Dense feature maps of every image of a split, computed once with fixed
/// parameters so that episodes only run the cheap attention and matching.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    /// `maps[class][index]` is a `K × C` tensor.
    pub maps: Vec<Vec<Tensor>>,
}

const ENCODE_CHUNK: usize = 32;

impl FeatureBank {
    pub fn build(model: &Model, split: &Split) -> Result<Self> {
        let layout = model.config.layout();
        let refs = split.refs();
        let chunks: Vec<&[ImageRef]> = refs.chunks(ENCODE_CHUNK).collect();
        let encoded: Vec<Vec<Tensor>> = with_eval_threads(|| {
            chunks
                .par_iter()
                .map(|chunk| {
                    let images: Vec<&ImageTensor> = chunk.iter().map(|&r| split.image(r)).collect();
                    Ok(extract_dense_features_batch(&images, &layout, &model.backbone)?
                        .into_iter()
                        .map(|m| m.features)
                        .collect())
                })
                .collect::<Result<_>>()
        })?;
        let mut maps: Vec<Vec<Tensor>> = split.classes.iter().map(|c| Vec::with_capacity(c.images.len())).collect();
        for (r, t) in refs.iter().zip(encoded.into_iter().flatten()) {
            maps[r.class].push(t);
        }
        Ok(FeatureBank { maps })
    }

    pub fn get(&self, r: ImageRef) -> &Tensor {
        &self.maps[r.class][r.index]
    }
}

/// Runs `f` inside a pool capped by the `SSF_THREADS` environment variable,
/// or on rayon's global pool when it is unset.
pub fn with_eval_threads<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let cap = std::env::var("SSF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// Patch rows of an unlabeled pool. Only provenance flags are kept, never
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPatchPool {
    /// `P × C` raw patch features, image by image.
    pub features: Tensor,
    /// Pool image each row came from.
    pub image: Vec<usize>,
    /// Whether that image was flagged as a distractor.
    pub distractor: Vec<bool>,
}

impl UnlabeledPatchPool {
    pub fn empty(dim: usize) -> Self {
        UnlabeledPatchPool {
            features: Tensor::zeros(&[0, dim]),
            image: Vec::new(),
            distractor: Vec::new(),
        }
    }

    /// Stacks per-image `K × C` maps with their distractor flags.
    pub fn from_maps(maps: &[(&Tensor, bool)], dim: usize) -> Result<Self> {
        if maps.is_empty() {
            return Ok(Self::empty(dim));
        }
        let parts: Vec<&Tensor> = maps.iter().map(|(t, _)| *t).collect();
        let features = Tensor::vstack(&parts)?;
        let mut image = Vec::with_capacity(features.rows());
        let mut distractor = Vec::with_capacity(features.rows());
        for (i, (t, d)) in maps.iter().enumerate() {
            image.extend(std::iter::repeat_n(i, t.rows()));
            distractor.extend(std::iter::repeat_n(*d, t.rows()));
        }
        Ok(UnlabeledPatchPool {
            features,
            image,
            distractor,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemiExtension {
    pub representation: ClassRepresentation,
    /// Pool rows appended, in pool order.
    pub admitted: Vec<usize>,
}

/// Appends to `S_n` every pool patch that is a mutual nearest neighbour of
/// the class's support patches, with the pool on the query side of the
/// relation and the current heads projecting both sides.
pub fn extend_support_semi(
    class: &ClassRepresentation,
    pool: &UnlabeledPatchPool,
    heads: &ProjectionHeads,
) -> Result<SemiExtension> {
    if pool.is_empty() {
        return Ok(SemiExtension {
            representation: class.clone(),
            admitted: Vec::new(),
        });
    }
    if pool.features.cols() != class.features.cols() {
        return Err(Error::dim("extend_support_semi", pool.features.shape(), class.features.shape()));
    }
    let mut tape = Tape::new();
    let vars = heads.register(&mut tape, false);
    let p = tape.constant(pool.features.clone());
    let s = tape.constant(class.features.clone());
    let pq = crate::sstl::linear(&mut tape, p, vars.query)?;
    let sk = crate::sstl::linear(&mut tape, s, vars.key)?;
    let rel = crate::sstl::relation_matrices(&mut tape, pq, &[sk])?;
    let mask = mutual_mask(&rel.concatenated)?;
    let admitted: Vec<usize> = (0..pool.len()).filter(|&i| mask.keep[i]).collect();
    let mut rows: Vec<Tensor> = Vec::with_capacity(admitted.len());
    for &i in &admitted {
        rows.push(pool.features.slice_rows(i, 1));
    }
    let mut parts: Vec<&Tensor> = vec![&class.features];
    parts.extend(rows.iter());
    Ok(SemiExtension {
        representation: ClassRepresentation {
            class: class.class,
            features: Tensor::vstack(&parts)?,
        },
        admitted,
    })
}

/// Patch admission counts of one semi-supervised episode. A pool patch
/// counts as admitted when any class takes it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdmissionStats {
    pub in_class_total: usize,
    pub in_class_admitted: usize,
    pub distractor_total: usize,
    pub distractor_admitted: usize,
}

impl AdmissionStats {
    pub fn merge(&mut self, o: &AdmissionStats) {
        self.in_class_total += o.in_class_total;
        self.in_class_admitted += o.in_class_admitted;
        self.distractor_total += o.distractor_total;
        self.distractor_admitted += o.distractor_admitted;
    }

    pub fn in_class_rate(&self) -> f64 {
        self.in_class_admitted as f64 / self.in_class_total.max(1) as f64
    }

    pub fn distractor_rate(&self) -> f64 {
        self.distractor_admitted as f64 / self.distractor_total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub results: Vec<SimilarityResult>,
    pub accuracy: f64,
    /// Present when the episode carried an unlabeled pool.
    pub admission: Option<AdmissionStats>,
}

/// Classifies every query of `episode` with features from `bank`. When the
/// episode has a pool and `semi` is set, supports are extended first.
pub fn run_episode(model: &Model, bank: &FeatureBank, episode: &Episode, semi: bool) -> Result<EpisodeOutcome> {
    let mut classes: Vec<ClassRepresentation> = Vec::with_capacity(episode.n_way());
    for (n, shots) in episode.support.iter().enumerate() {
        let parts: Vec<&Tensor> = shots.iter().map(|&r| bank.get(r)).collect();
        classes.push(ClassRepresentation {
            class: n,
            features: Tensor::vstack(&parts)?,
        });
    }
    let mut admission = None;
    if semi {
        let dim = model.backbone.embedding_dim();
        let maps: Vec<(&Tensor, bool)> = episode
            .unlabeled
            .iter()
            .map(|u| (bank.get(u.image), u.distractor))
            .collect();
        let pool = UnlabeledPatchPool::from_maps(&maps, dim)?;
        let mut taken = vec![false; pool.len()];
        for rep in classes.iter_mut() {
            let ext = extend_support_semi(rep, &pool, &model.heads)?;
            for &i in &ext.admitted {
                taken[i] = true;
            }
            *rep = ext.representation;
        }
        let mut stats = AdmissionStats::default();
        for (i, &t) in taken.iter().enumerate() {
            if pool.distractor[i] {
                stats.distractor_total += 1;
                stats.distractor_admitted += t as usize;
            } else {
                stats.in_class_total += 1;
                stats.in_class_admitted += t as usize;
            }
        }
        admission = Some(stats);
    }
    let queries: Vec<&Tensor> = episode.query.iter().map(|q| bank.get(q.image)).collect();
    let support: Vec<&Tensor> = classes.iter().map(|c| &c.features).collect();
    let mut tape = Tape::new();
    let heads = model.heads.register(&mut tape, false);
    let task = TaskFeatures::from_tensors(&mut tape, &support, &queries)?;
    let outputs = classify_queries(&mut tape, &heads, &task, &model.config, ForwardOptions::default())?;
    let correct = outputs
        .iter()
        .zip(&episode.query)
        .filter(|(o, q)| o.classification.result.predicted_class == q.label)
        .count();
    Ok(EpisodeOutcome {
        accuracy: correct as f64 / episode.query.len() as f64,
        results: outputs.into_iter().map(|o| o.classification.result).collect(),
        admission,
    })
}

/// Mean accuracy and the half-width `1.96 · s / √n` of its 95% interval,
/// with `s` the sample standard deviation.
pub fn mean_and_ci95(accuracies: &[f64]) -> Result<(f64, f64)> {
    let n = accuracies.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 episodes for an interval, got {n}")));
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    /// Summed over episodes in semi-supervised runs.
    pub admission: Option<AdmissionStats>,
}

/// Runs `config.episode_count` episodes with per-index RNG streams of
/// `seed`, in parallel, and summarizes their accuracies.
pub fn evaluate(model: &Model, split: &Split, config: &EpisodeConfig, seed: u64) -> Result<EvalReport> {
    let bank = FeatureBank::build(model, split)?;
    evaluate_with_bank(model, &bank, split, config, seed)
}

pub fn evaluate_with_bank(
    model: &Model,
    bank: &FeatureBank,
    split: &Split,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    let outcomes: Vec<EpisodeOutcome> = with_eval_threads(|| {
        (0..config.episode_count as u64)
            .into_par_iter()
            .map(|i| {
                let episode = nth_episode(split, config, seed, i)?;
                run_episode(model, bank, &episode, config.semi_supervised)
            })
            .collect::<Result<_>>()
    })?;
    let accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let (mean, ci95) = mean_and_ci95(&accuracies)?;
    let admission = config.semi_supervised.then(|| {
        let mut total = AdmissionStats::default();
        for o in &outcomes {
            if let Some(a) = &o.admission {
                total.merge(a);
            }
        }
        total
    });
    Ok(EvalReport {
        mean,
        ci95,
        accuracies,
        admission,
    })
}
