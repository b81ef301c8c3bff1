//! The assembled few-shot classifier: backbone, projection heads and the
//! variant-specific scoring path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    dense_features_on_tape, BackboneConfig, BackboneParams, BackboneVars, FeatureLayout, GridSpec,
    ImageTensor,
};
use crate::error::{Error, Result};
use crate::pmm::{classify_query, Classification, Scorer};
use crate::sstl::{
    attend_and_align, concat_cols, linear, mutual_mask, AttentionDropout, HeadVars, MaskMode, MutualMask,
    ProjectionHeads,
};
use crate::tensor::{Tape, Tensor, Var};

/// Which components are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Patch pyramid, sparse cross attention, patch matching.
    #[default]
    Full,
    /// Patch matching straight on the projected support values, no alignment.
    NoSstl,
    /// Aligned prototypes scored by positionwise cosine.
    NoPmm,
    /// One whole-image embedding per image (K = 1).
    GlobalFeature,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoSstl,
        Variant::NoPmm,
        Variant::GlobalFeature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSstl => "no_sstl",
            Variant::NoPmm => "no_pmm",
            Variant::GlobalFeature => "global_feature",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Starting point of the three projection heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Uniform fan-in weights, zero bias.
    #[default]
    Random,
    /// Identity weights, zero bias; needs `head_dim` equal to the embedding width.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Output width of the projection heads; `None` keeps the embedding width.
    pub head_dim: Option<usize>,
    pub grid: GridSpec,
    pub variant: Variant,
    pub mask_mode: MaskMode,
    /// Logit temperature; `None` means `K / 10`.
    pub temperature: Option<f64>,
    /// Attention dropout during meta-training.
    pub attention_dropout: f64,
    #[serde(default)]
    pub head_init: HeadInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head_dim: None,
            grid: GridSpec::pyramid_default(),
            variant: Variant::Full,
            mask_mode: MaskMode::PreSoftmax,
            temperature: None,
            attention_dropout: 0.1,
            head_init: HeadInit::Random,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> FeatureLayout {
        match self.variant {
            Variant::GlobalFeature => FeatureLayout::Global,
            _ => FeatureLayout::Pyramid(self.grid.clone()),
        }
    }

    pub fn patch_count(&self) -> usize {
        self.layout().patch_count()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
            .unwrap_or(self.patch_count() as f64 / 10.0)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.backbone.embedding_dim())
    }

    pub fn scorer(&self) -> Scorer {
        match self.variant {
            Variant::NoPmm => Scorer::PositionwiseCosine,
            _ => Scorer::PatchMatching,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_dim == Some(0) {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        if self.head_init == HeadInit::Identity && self.head_dim() != self.backbone.embedding_dim() {
            return Err(Error::Config(format!(
                "identity head init needs head_dim {} to equal the embedding width {}",
                self.head_dim(),
                self.backbone.embedding_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config(format!(
                "attention_dropout must lie in [0, 1), got {}",
                self.attention_dropout
            )));
        }
        Ok(())
    }
}

/// All trainable tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub heads: ProjectionHeads,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub heads: HeadVars,
}

impl ModelVars {
    /// Splits vars in [`ModelVars::all`] order; the last six are the heads.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.len() < 6 {
            return Err(Error::Contract(format!("model needs at least 6 vars, got {}", vars.len())));
        }
        let (b, h) = vars.split_at(vars.len() - 6);
        Ok(ModelVars {
            backbone: BackboneVars::from_vars(b)?,
            heads: HeadVars::from_vars(h)?,
        })
    }

    /// In the same order as [`Model::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.backbone.all();
        v.extend(self.heads.all());
        v
    }
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::init(config.backbone.clone(), rng)?;
        let heads = match config.head_init {
            HeadInit::Random => ProjectionHeads::init(config.backbone.embedding_dim(), config.head_dim(), rng),
            HeadInit::Identity => ProjectionHeads::identity(config.head_dim()),
        };
        Ok(Model {
            config,
            backbone,
            heads,
        })
    }

    /// Swaps in a (pre-trained) backbone; its config must match.
    pub fn with_backbone(mut self, backbone: BackboneParams) -> Result<Self> {
        if backbone.config != self.config.backbone {
            return Err(Error::Config("backbone config does not match the model".into()));
        }
        self.backbone = backbone;
        Ok(self)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors();
        out.extend(self.heads.named_tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(tape, trainable),
            heads: self.heads.register(tape, trainable),
        }
    }
}

/// Dense features of one task held as a single `[rows, C]` tape value:
/// support classes first (each a contiguous block of rows), then queries of
/// `K` rows each.
#[derive(Clone, Debug)]
pub struct TaskFeatures {
    pub all: Var,
    pub patch_count: usize,
    /// `(first row, row count)` per support class.
    pub support_rows: Vec<(usize, usize)>,
    pub query_start: usize,
    pub query_count: usize,
}

impl TaskFeatures {
    /// Wraps precomputed features: `support[n]` is class `n`'s stacked rows,
    /// `queries[i]` a `K × C` map.
    pub fn from_tensors(tape: &mut Tape, support: &[&Tensor], queries: &[&Tensor]) -> Result<Self> {
        let k = queries
            .first()
            .map(|q| q.rows())
            .ok_or_else(|| Error::Contract("task needs at least one query".into()))?;
        if queries.iter().any(|q| q.rows() != k) {
            return Err(Error::Contract("queries must share one patch count".into()));
        }
        let mut parts: Vec<&Tensor> = Vec::with_capacity(support.len() + queries.len());
        let mut support_rows = Vec::with_capacity(support.len());
        let mut row = 0;
        for s in support {
            support_rows.push((row, s.rows()));
            row += s.rows();
            parts.push(s);
        }
        parts.extend_from_slice(queries);
        let all = tape.constant(Tensor::vstack(&parts)?);
        Ok(TaskFeatures {
            all,
            patch_count: k,
            support_rows,
            query_start: row,
            query_count: queries.len(),
        })
    }

    /// Runs every support and query image through the backbone in one batch.
    pub fn encode(
        tape: &mut Tape,
        vars: &BackboneVars,
        config: &ModelConfig,
        support: &[Vec<&ImageTensor>],
        queries: &[&ImageTensor],
    ) -> Result<Self> {
        let k = config.patch_count();
        let mut images: Vec<&ImageTensor> = Vec::new();
        let mut support_rows = Vec::with_capacity(support.len());
        for class in support {
            support_rows.push((images.len() * k, class.len() * k));
            images.extend_from_slice(class);
        }
        let query_start = images.len() * k;
        images.extend_from_slice(queries);
        let all = dense_features_on_tape(tape, vars, &config.backbone, &images, &config.layout())?;
        Ok(TaskFeatures {
            all,
            patch_count: k,
            support_rows,
            query_start,
            query_count: queries.len(),
        })
    }
}

/// Per-query output of [`classify_queries`].
pub struct QueryOutput {
    pub classification: Classification,
    /// Mask used for this query (all-kept for the no-alignment variant).
    pub mask: MutualMask,
}

/// Options for one forward pass over a task.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Attention dropout RNG; `None` is evaluation mode.
    pub dropout_rng: Option<&'a mut dyn rand::RngCore>,
    /// Replaces the computed masks, one per query.
    pub fixed_masks: Option<&'a [MutualMask]>,
}

/// Classifies every query of a task against its support classes.
pub fn classify_queries(
    tape: &mut Tape,
    heads: &HeadVars,
    task: &TaskFeatures,
    config: &ModelConfig,
    mut options: ForwardOptions<'_>,
) -> Result<Vec<QueryOutput>> {
    if task.support_rows.is_empty() {
        return Err(Error::Contract("task has no support classes".into()));
    }
    if let Some(m) = options.fixed_masks {
        if m.len() != task.query_count {
            return Err(Error::Contract(format!(
                "{} fixed masks for {} queries",
                m.len(),
                task.query_count
            )));
        }
    }
    let k = task.patch_count;
    let temperature = config.temperature.unwrap_or(k as f64 / 10.0);
    let values = linear(tape, task.all, heads.value)?;
    let support_values: Vec<Var> = task
        .support_rows
        .iter()
        .map(|&(s, n)| tape.slice_rows(values, s, n))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(task.query_count);

    if config.variant == Variant::NoSstl {
        for q in 0..task.query_count {
            let qv = tape.slice_rows(values, task.query_start + q * k, k)?;
            let classification = classify_query(tape, qv, &support_values, config.scorer(), temperature)?;
            out.push(QueryOutput {
                classification,
                mask: MutualMask::all(k),
            });
        }
        return Ok(out);
    }

    let keys = linear(tape, task.all, heads.key)?;
    let queries = linear(tape, task.all, heads.query)?;
    let scale = 1.0 / (tape.value(queries).cols() as f64).sqrt();
    let key_t: Vec<Var> = task
        .support_rows
        .iter()
        .map(|&(s, n)| {
            let kn = tape.slice_rows(keys, s, n)?;
            tape.transpose(kn)
        })
        .collect::<Result<_>>()?;
    for q in 0..task.query_count {
        let row = task.query_start + q * k;
        let qq = tape.slice_rows(queries, row, k)?;
        let qv = tape.slice_rows(values, row, k)?;
        let mut relations = Vec::with_capacity(key_t.len());
        for &kt in &key_t {
            let r = tape.matmul(qq, kt)?;
            relations.push(tape.scale(r, scale));
        }
        let mask = match options.fixed_masks {
            Some(m) => m[q].clone(),
            None => {
                let parts: Vec<&Tensor> = relations.iter().map(|&r| tape.value(r)).collect();
                mutual_mask(&concat_cols(&parts)?)?
            }
        };
        let dropout = match (options.dropout_rng.as_deref_mut(), config.attention_dropout) {
            (Some(rng), rate) if rate > 0.0 => Some(AttentionDropout { rate, rng }),
            _ => None,
        };
        let aligned = attend_and_align(tape, &relations, &mask, &support_values, config.mask_mode, dropout)?;
        let protos: Vec<Var> = aligned.iter().map(|a| a.prototype).collect();
        let classification = classify_query(tape, qv, &protos, config.scorer(), temperature)?;
        out.push(QueryOutput {
            classification,
            mask,
        });
    }
    Ok(out)
}

/// Mean cross-entropy of `softmax(P / τ)` over the queries.
pub fn episode_loss(tape: &mut Tape, outputs: &[QueryOutput], labels: &[usize]) -> Result<Var> {
    if outputs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let logits: Vec<Var> = outputs.iter().map(|o| o.classification.logits).collect();
    let stacked = tape.concat_rows(&logits)?;
    tape.cross_entropy(stacked, labels)
}
