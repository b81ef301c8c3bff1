//! Built-in consistency checks: tape gradients against central differences,
//! the mutual-neighbour mask against a double loop, and patch matching
//! against a direct cosine computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, GridSpec, ImageTensor};
use crate::error::Result;
use crate::model::{classify_queries, episode_loss, ForwardOptions, ModelConfig, ModelVars, TaskFeatures};
use crate::pmm::{classify_query, Scorer};
use crate::sstl::{mutual_mask, MutualMask};
use crate::tensor::{finite_diff_check_many, Tape, Tensor, Var};
use crate::training::init_model;

const EPS: f64 = 1e-6;

/// One named check: `error` must stay at or below `tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Keeps entries away from kinks (ReLU at 0, ties under max).
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (i as f64 * 0.37 + 0.1) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn probed<F>(inputs: &[Tensor], weight_seed: u64, op: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_many(
        |t, v| {
            let y = op(t, v)?;
            let shape = t.value(y).shape().to_vec();
            let w = t.constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(weight_seed)));
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        inputs,
        EPS,
    )
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let tol = 1e-4;
    let a = randn(rng, &[3, 4]);
    let b = randn(rng, &[4, 5]);
    let x = randn(rng, &[2, 3, 6, 6]);
    let w = randn(rng, &[4, 3, 3, 3]);
    let bias = randn(rng, &[4]);
    let pool_in = spread(rng, &[1, 2, 6, 6]);
    let rows = spread(rng, &[3, 5]);
    let outcomes = vec![
        ("matmul", probed(&[a.clone(), b], 1, |t, v| t.matmul(v[0], v[1]))?),
        ("softmax", probed(std::slice::from_ref(&a), 2, |t, v| t.softmax_lastdim(v[0]))?),
        ("l2 row normalize", probed(std::slice::from_ref(&a), 3, |t, v| t.l2_normalize_rows(v[0]))?),
        ("row max", probed(std::slice::from_ref(&rows), 4, |t, v| t.row_max(v[0]))?),
        ("relu", probed(&[rows], 5, |t, v| Ok(t.relu(v[0])))?),
        (
            "cross entropy",
            finite_diff_check_many(|t, v| t.cross_entropy(v[0], &[0, 3, 1]), &[a], EPS)?,
        ),
        ("conv2d", probed(&[x, w, bias], 6, |t, v| t.conv2d(v[0], v[1], v[2]))?),
        ("max pool", probed(std::slice::from_ref(&pool_in), 7, |t, v| t.max_pool2(v[0]))?),
        ("global average pool", probed(&[pool_in], 8, |t, v| t.global_avg_pool(v[0]))?),
    ];
    Ok(outcomes
        .into_iter()
        .map(|(name, error)| CheckOutcome {
            name: format!("gradient: {name}"),
            error,
            tolerance: tol,
        })
        .collect())
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> ImageTensor {
    let data = (0..3 * side * side).map(|_| rng.random::<f64>()).collect();
    ImageTensor::new(3, side, side, data).expect("shape matches")
}

/// 2-way 1-shot, K = 4, C = C' = 8, masks of the unperturbed pass held fixed.
fn meta_loss_check(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            widths: vec![4, 8],
            encoder_side: 4,
            ..BackboneConfig::default()
        },
        head_dim: Some(8),
        grid: GridSpec::new(vec![2], 1.0)?,
        attention_dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = init_model(config.clone(), rng.random())?;
    let support: Vec<ImageTensor> = (0..2).map(|_| random_image(rng, 8)).collect();
    let queries: Vec<ImageTensor> = (0..2).map(|_| random_image(rng, 8)).collect();
    let support_refs: Vec<Vec<&ImageTensor>> = support.iter().map(|s| vec![s]).collect();
    let query_refs: Vec<&ImageTensor> = queries.iter().collect();
    let forward = |t: &mut Tape, vars: &ModelVars, masks: Option<&[MutualMask]>| {
        let task = TaskFeatures::encode(t, &vars.backbone, &config, &support_refs, &query_refs)?;
        let options = ForwardOptions {
            dropout_rng: None,
            fixed_masks: masks,
        };
        classify_queries(t, &vars.heads, &task, &config, options)
    };
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let masks: Vec<MutualMask> = forward(&mut tape, &vars, None)?.into_iter().map(|o| o.mask).collect();
    let tensors: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let error = finite_diff_check_many(
        |t, v| {
            let vars = ModelVars::from_vars(v)?;
            let out = forward(t, &vars, Some(&masks))?;
            episode_loss(t, &out, &[0, 1])
        },
        &tensors,
        EPS,
    )?;
    Ok(CheckOutcome {
        name: "gradient: end-to-end meta-loss".into(),
        error,
        tolerance: 1e-3,
    })
}

fn brute_force_mask(r: &Tensor) -> Vec<bool> {
    (0..r.rows())
        .map(|i| {
            let mut col = 0;
            for j in 1..r.cols() {
                if r.get(i, j) > r.get(i, col) {
                    col = j;
                }
            }
            let mut row = 0;
            for k in 1..r.rows() {
                if r.get(k, col) > r.get(row, col) {
                    row = k;
                }
            }
            row == i
        })
        .collect()
}

/// Counts disagreements over 1000 random relation matrices (K ≤ 8,
/// N ≤ 4, M ≤ 2); a third use coarse integer entries so ties occur.
fn mask_oracle(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let cols = k * rng.random_range(1..=4) * rng.random_range(1..=2);
        let coarse = rng.random_bool(0.3);
        let data = (0..k * cols)
            .map(|_| {
                if coarse {
                    rng.random_range(-2..=2) as f64
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        let r = Tensor::new(vec![k, cols], data)?;
        if mutual_mask(&r)?.keep != brute_force_mask(&r) {
            mismatches += 1;
        }
    }
    Ok(CheckOutcome {
        name: "oracle: mutual mask vs double argmax".into(),
        error: mismatches as f64,
        tolerance: 0.0,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn pmm_oracle(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let k = rng.random_range(1..=8);
        let c = rng.random_range(1..=6);
        let q = randn(rng, &[k, c]);
        let protos: Vec<Tensor> = (0..3).map(|_| randn(rng, &[k, c])).collect();
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let pv: Vec<Var> = protos.iter().map(|p| tape.constant(p.clone())).collect();
        let out = classify_query(&mut tape, qv, &pv, Scorer::PatchMatching, 1.0)?;
        for (n, p) in protos.iter().enumerate() {
            let expected: f64 = (0..k)
                .map(|i| (0..k).map(|j| cosine(q.row(i), p.row(j))).fold(f64::MIN, f64::max))
                .sum();
            worst = worst.max((out.result.scores[n] - expected).abs());
        }
    }
    Ok(CheckOutcome {
        name: "oracle: patch matching vs cosine loops".into(),
        error: worst,
        tolerance: 1e-12,
    })
}

/// Runs every check with a fixed seed; takes a few seconds.
pub fn run_selftest() -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut out = primitive_checks(&mut rng)?;
    out.push(meta_loss_check(&mut rng)?);
    out.push(mask_oracle(&mut rng)?);
    out.push(pmm_oracle(&mut rng)?);
    Ok(out)
}
