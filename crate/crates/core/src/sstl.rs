//! Sparse spatial transformer layer.
//!
//! A query image's patches are related to every support patch of the task.
//! Query patch `i` is kept when it is a *mutual* nearest neighbour: its best
//! support column `n_q[i]` must in turn pick `i` as its best query row. The
//! resulting mask sparsifies cross attention, and each support class is
//! re-expressed as a `K × C′` prototype aligned to the query's patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{colwise_argmax, rowwise_argmax, Tape, Tensor, Var};

/// Where the mutual-neighbour mask is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Mask the relation rows, then softmax. Suppressed rows end up with
    /// uniform attention over the class's support patches.
    #[default]
    PreSoftmax,
    /// Softmax first, then zero suppressed rows; their prototype rows vanish.
    HardZero,
}

/// Row-vector linear map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Linear {
            weight: Tensor::randn(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Tensor::identity(dim),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Key, query and value heads, all `C → C′`. The value head serves both the
/// query image and the support set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub key: Linear,
    pub query: Linear,
    pub value: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub key: LinearVars,
    pub query: LinearVars,
    pub value: LinearVars,
}

impl HeadVars {
    /// From six vars in [`HeadVars::all`] order.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        let [kw, kb, qw, qb, vw, vb] = vars else {
            return Err(Error::Contract(format!("heads need 6 vars, got {}", vars.len())));
        };
        let l = |weight: &Var, bias: &Var| LinearVars {
            weight: *weight,
            bias: *bias,
        };
        Ok(HeadVars {
            key: l(kw, kb),
            query: l(qw, qb),
            value: l(vw, vb),
        })
    }

    pub fn all(&self) -> Vec<Var> {
        [self.key, self.query, self.value]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

impl ProjectionHeads {
    pub fn init<R: Rng + ?Sized>(dim: usize, out_dim: usize, rng: &mut R) -> Self {
        ProjectionHeads {
            key: Linear::init(dim, out_dim, rng),
            query: Linear::init(dim, out_dim, rng),
            value: Linear::init(dim, out_dim, rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        ProjectionHeads {
            key: Linear::identity(dim),
            query: Linear::identity(dim),
            value: Linear::identity(dim),
        }
    }

    pub fn zeros(dim: usize, out_dim: usize) -> Self {
        ProjectionHeads {
            key: Linear::zeros(dim, out_dim),
            query: Linear::zeros(dim, out_dim),
            value: Linear::zeros(dim, out_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.key.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.key.output_dim()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, l) in [("key", &self.key), ("query", &self.query), ("value", &self.value)] {
            out.push((format!("heads.{name}.weight"), &l.weight));
            out.push((format!("heads.{name}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.key, &mut self.query, &mut self.value]
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let mut reg = |l: &Linear| {
            let (w, b) = (l.weight.clone(), l.bias.clone());
            if trainable {
                LinearVars {
                    weight: tape.param(w),
                    bias: tape.param(b),
                }
            } else {
                LinearVars {
                    weight: tape.constant(w),
                    bias: tape.constant(b),
                }
            }
        };
        HeadVars {
            key: reg(&self.key),
            query: reg(&self.query),
            value: reg(&self.value),
        }
    }
}

pub fn linear(tape: &mut Tape, x: Var, l: LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_bias(y, l.bias)
}

/// Query-side and support-side projections of one task.
#[derive(Clone, Debug)]
pub struct Projections {
    /// `K × C′`
    pub query_query: Var,
    /// `K × C′`
    pub query_value: Var,
    /// Per class, `MK × C′`
    pub support_keys: Vec<Var>,
    /// Per class, `MK × C′`
    pub support_values: Vec<Var>,
}

pub fn project(tape: &mut Tape, query: Var, support: &[Var], heads: &HeadVars) -> Result<Projections> {
    let c = tape.value(query).cols();
    if let Some(s) = support.iter().find(|s| tape.value(**s).cols() != c) {
        return Err(Error::Contract(format!(
            "support features have {} channels, query has {c}",
            tape.value(*s).cols()
        )));
    }
    let query_query = linear(tape, query, heads.query)?;
    let query_value = linear(tape, query, heads.value)?;
    let mut support_keys = Vec::with_capacity(support.len());
    let mut support_values = Vec::with_capacity(support.len());
    for &s in support {
        support_keys.push(linear(tape, s, heads.key)?);
        support_values.push(linear(tape, s, heads.value)?);
    }
    Ok(Projections {
        query_query,
        query_value,
        support_keys,
        support_values,
    })
}

/// Scaled relations `R_n = q_q·k_nᵀ / √C′` per class, plus their values
/// concatenated column-wise in class order (`K × NMK`).
#[derive(Clone, Debug)]
pub struct RelationMatrix {
    pub per_class: Vec<Var>,
    pub concatenated: Tensor,
}

pub fn relation_matrices(tape: &mut Tape, query_query: Var, keys: &[Var]) -> Result<RelationMatrix> {
    let c_prime = tape.value(query_query).cols();
    let scale = 1.0 / (c_prime as f64).sqrt();
    let mut per_class = Vec::with_capacity(keys.len());
    for &k in keys {
        let kt = tape.transpose(k)?;
        let r = tape.matmul(query_query, kt)?;
        per_class.push(tape.scale(r, scale));
    }
    let parts: Vec<&Tensor> = per_class.iter().map(|&r| tape.value(r)).collect();
    let concatenated = concat_cols(&parts)?;
    Ok(RelationMatrix {
        per_class,
        concatenated,
    })
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(Error::Contract("relation blocks differ in row count".into()));
    }
    let total = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, total], data)
}

/// Mutual-nearest-neighbour selection over a task-level relation matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MutualMask {
    /// `m[i]` is true when query row `i` survives.
    pub keep: Vec<bool>,
    /// Best support column for each query row.
    pub query_to_support: Vec<usize>,
    /// Best query row for that column.
    pub support_to_query: Vec<usize>,
}

impl MutualMask {
    /// Mask with every row kept (used where only one query row exists).
    pub fn all(k: usize) -> Self {
        MutualMask {
            keep: vec![true; k],
            query_to_support: vec![0; k],
            support_to_query: (0..k).collect(),
        }
    }

    pub fn factors(&self) -> Vec<f64> {
        self.keep.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&m| m).count()
    }
}

/// `n_q[i] = argmax_j R[i, j]`, `n_S[i] = argmax_k R[k, n_q[i]]`,
/// `m[i] = (n_S[i] == i)`, with lowest-index tie breaking throughout.
pub fn mutual_mask(relations: &Tensor) -> Result<MutualMask> {
    let query_to_support = rowwise_argmax(relations)?;
    let col_best = colwise_argmax(relations)?;
    let support_to_query: Vec<usize> = query_to_support.iter().map(|&j| col_best[j]).collect();
    let keep = support_to_query.iter().enumerate().map(|(i, &s)| s == i).collect();
    Ok(MutualMask {
        keep,
        query_to_support,
        support_to_query,
    })
}

/// One class aligned to one query.
#[derive(Clone, Copy, Debug)]
pub struct AlignedPrototype {
    /// `K × C′`
    pub prototype: Var,
    /// `K × MK` attention that produced it.
    pub attention: Var,
}

/// Inverted dropout on the attention maps, drawn from a caller-seeded RNG.
pub struct AttentionDropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn rand::RngCore,
}

pub fn attend_and_align(
    tape: &mut Tape,
    relations: &[Var],
    mask: &MutualMask,
    support_values: &[Var],
    mode: MaskMode,
    mut dropout: Option<AttentionDropout<'_>>,
) -> Result<Vec<AlignedPrototype>> {
    if relations.len() != support_values.len() {
        return Err(Error::Contract(format!(
            "{} relation matrices for {} value sets",
            relations.len(),
            support_values.len()
        )));
    }
    let factors = mask.factors();
    let mut out = Vec::with_capacity(relations.len());
    for (&r, &v) in relations.iter().zip(support_values) {
        if tape.value(r).rows() != factors.len() {
            return Err(Error::dim("attend_and_align", tape.value(r).shape(), &[factors.len()]));
        }
        let mut attention = match mode {
            MaskMode::PreSoftmax => {
                let masked = tape.row_scale(r, &factors)?;
                tape.softmax_lastdim(masked)?
            }
            MaskMode::HardZero => {
                let a = tape.softmax_lastdim(r)?;
                tape.row_scale(a, &factors)?
            }
        };
        if let Some(d) = dropout.as_mut() {
            if d.rate > 0.0 {
                let n = tape.value(attention).len();
                let keep: Vec<bool> = (0..n).map(|_| d.rng.random::<f64>() >= d.rate).collect();
                attention = tape.dropout(attention, &keep, d.rate)?;
            }
        }
        let prototype = tape.matmul(attention, v)?;
        out.push(AlignedPrototype {
            prototype,
            attention,
        });
    }
    Ok(out)
}
