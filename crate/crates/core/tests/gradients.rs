mod common;

use common::{away_from_zero, randn, random_image};
use proptest::prelude::*;
use ssformers::backbone::{BackboneConfig, GridSpec, ImageTensor};
use ssformers::model::{classify_queries, episode_loss, ForwardOptions, ModelConfig, ModelVars, TaskFeatures, Variant};
use ssformers::sstl::MutualMask;
use ssformers::tensor::{finite_diff_check, finite_diff_check_many};
use ssformers::training::init_model;
use ssformers::{Result, Tape, Tensor, Var};

const PRIMITIVE_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// `Σ y ⊙ W` for a fixed random `W`, so every output element matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.value(y).shape(), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check1(x: Tensor, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    finite_diff_check(
        |t, v| {
            let y = op(t, v)?;
            probe(t, y, 99)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn check_many(xs: &[Tensor], op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    finite_diff_check_many(
        |t, v| {
            let y = op(t, v)?;
            probe(t, y, 99)
        },
        xs,
        EPS,
    )
    .unwrap()
}

#[test]
fn elementwise_and_linear_algebra() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 2], 2);
    let c = randn(&[3, 4], 3);
    assert!(check_many(&[a.clone(), b], |t, v| t.matmul(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| t.transpose(v)) < PRIMITIVE_TOL);
    assert!(check_many(&[a.clone(), c.clone()], |t, v| t.add(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(check_many(&[a.clone(), c.clone()], |t, v| t.sub(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(check_many(&[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| Ok(t.scale(v, -1.7))) < PRIMITIVE_TOL);
    assert!(check_many(&[a.clone(), randn(&[4], 4)], |t, v| t.add_bias(v[0], v[1])) < PRIMITIVE_TOL);
    assert!(check1(away_from_zero(&[3, 4], 0.05, 5), |t, v| Ok(t.relu(v))) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| t.reshape(v, &[2, 6])) < PRIMITIVE_TOL);
}

#[test]
fn normalizations_and_reductions() {
    let a = randn(&[3, 5], 11);
    assert!(check1(a.clone(), |t, v| t.softmax_lastdim(v)) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| t.l2_normalize_rows(v)) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| t.row_scale(v, &[1.0, 0.0, 2.5])) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| t.dropout(v, &[true, false, true, true, false, true, true, true, false, true, true, true, true, false, true], 0.3)) < PRIMITIVE_TOL);
    assert!(check1(away_from_zero(&[4, 6], 0.01, 12), |t, v| t.row_max(v)) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| Ok(t.sum(v))) < PRIMITIVE_TOL);
    assert!(check1(a.clone(), |t, v| Ok(t.mean(v))) < PRIMITIVE_TOL);
    let err = finite_diff_check(|t, v| t.cross_entropy(v, &[0, 4, 2]), &a, EPS).unwrap();
    assert!(err < PRIMITIVE_TOL, "cross entropy {err}");
}

#[test]
fn slicing_and_stacking() {
    let a = randn(&[5, 3], 21);
    let b = randn(&[2, 3], 22);
    let c = randn(&[5, 2], 23);
    assert!(check1(a.clone(), |t, v| t.slice_rows(v, 1, 3)) < PRIMITIVE_TOL);
    assert!(check_many(&[a.clone(), b], |t, v| t.concat_rows(&[v[0], v[1], v[0]])) < PRIMITIVE_TOL);
    assert!(check_many(&[a.clone(), c], |t, v| t.concat_cols(&[v[0], v[1]])) < PRIMITIVE_TOL);
    assert!(
        check1(a, |t, v| {
            let s1 = t.sum(v);
            let sq = t.mul(v, v)?;
            let s2 = t.mean(sq);
            t.stack(&[s1, s2, s1])
        }) < PRIMITIVE_TOL
    );
}

#[test]
fn convolution_and_pooling() {
    let x = randn(&[2, 3, 6, 6], 31);
    let w = randn(&[4, 3, 3, 3], 32);
    let b = randn(&[4], 33);
    let err = check_many(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2]));
    assert!(err < PRIMITIVE_TOL, "conv2d {err}");
    let p = away_from_zero(&[2, 3, 6, 6], 0.01, 34);
    assert!(check1(p.clone(), |t, v| t.max_pool2(v)) < PRIMITIVE_TOL);
    let odd = away_from_zero(&[1, 2, 5, 5], 0.01, 35);
    assert!(check1(odd, |t, v| t.max_pool2(v)) < PRIMITIVE_TOL);
    assert!(check1(p, |t, v| t.global_avg_pool(v)) < PRIMITIVE_TOL);
}

#[test]
fn backbone_encoder() {
    let config = BackboneConfig {
        in_channels: 3,
        widths: vec![4, 6],
        kernel: 3,
        encoder_side: 6,
    };
    let params = ssformers::backbone::BackboneParams::init(config.clone(), &mut common::rng(40)).unwrap();
    let images: Vec<ImageTensor> = (0..2).map(|s| random_image(3, 12, 41 + s)).collect();
    let layout = ssformers::backbone::FeatureLayout::Pyramid(GridSpec::parse("2x2", 1.5).unwrap());
    let tensors: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let err = check_many(&tensors, |t, v| {
        let vars = ssformers::backbone::BackboneVars::from_vars(v)?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        ssformers::backbone::dense_features_on_tape(t, &vars, &config, &refs, &layout)
    });
    assert!(err < 1e-3, "backbone {err}");
}

fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            widths: vec![4, 8],
            kernel: 3,
            encoder_side: 4,
        },
        head_dim: Some(8),
        grid: GridSpec::parse("2x2", 1.0).unwrap(),
        variant,
        attention_dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Meta-loss of a 2-way 1-shot task with two queries, with the masks of
/// the unperturbed pass held fixed.
fn end_to_end_error(variant: Variant, seed: u64) -> f64 {
    let config = tiny_model_config(variant);
    let model = init_model(config.clone(), seed).unwrap();
    let support: Vec<ImageTensor> = (0..2).map(|i| random_image(3, 8, seed * 10 + i)).collect();
    let queries: Vec<ImageTensor> = (0..2).map(|i| random_image(3, 8, seed * 10 + 5 + i)).collect();
    let support_refs: Vec<Vec<&ImageTensor>> = support.iter().map(|s| vec![s]).collect();
    let query_refs: Vec<&ImageTensor> = queries.iter().collect();

    let forward = |t: &mut Tape, vars: &ModelVars, masks: Option<&[MutualMask]>| {
        let task = TaskFeatures::encode(t, &vars.backbone, &config, &support_refs, &query_refs)?;
        classify_queries(
            t,
            &vars.heads,
            &task,
            &config,
            ForwardOptions {
                dropout_rng: None,
                fixed_masks: masks,
            },
        )
    };
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let masks: Vec<MutualMask> = forward(&mut tape, &vars, None).unwrap().into_iter().map(|o| o.mask).collect();

    let tensors: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    finite_diff_check_many(
        |t, v| {
            let vars = ModelVars::from_vars(v)?;
            let out = forward(t, &vars, Some(&masks))?;
            episode_loss(t, &out, &[0, 1])
        },
        &tensors,
        EPS,
    )
    .unwrap()
}

#[test]
fn end_to_end_meta_loss() {
    for variant in [Variant::Full, Variant::NoSstl, Variant::NoPmm] {
        let err = end_to_end_error(variant, 7);
        assert!(err < 1e-3, "{variant}: relative error {err}");
    }
}

#[test]
fn hard_zero_mask_mode() {
    let a = randn(&[4, 3], 51);
    let v = randn(&[3, 2], 52);
    let mask = MutualMask {
        keep: vec![true, false, true, false],
        query_to_support: vec![0; 4],
        support_to_query: vec![0; 4],
    };
    for mode in [ssformers::sstl::MaskMode::PreSoftmax, ssformers::sstl::MaskMode::HardZero] {
        let err = check_many(&[a.clone(), v.clone()], |t, x| {
            let p = ssformers::sstl::attend_and_align(t, &[x[0]], &mask, &[x[1]], mode, None)?;
            Ok(p[0].prototype)
        });
        assert!(err < PRIMITIVE_TOL, "{mode:?} {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_softmax_normalize_any_shape(r in 1usize..5, k in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
        let a = randn(&[r, k], seed);
        let b = randn(&[k, c], seed + 1);
        let err = check_many(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let n = t.l2_normalize_rows(m)?;
            t.softmax_lastdim(n)
        });
        prop_assert!(err < PRIMITIVE_TOL, "relative error {}", err);
    }

    #[test]
    fn patch_matching_score_any_shape(k in 1usize..6, c in 1usize..6, seed in 0u64..1000) {
        let q = randn(&[k, c], seed);
        let p = randn(&[k, c], seed + 7);
        let err = finite_diff_check_many(
            |t, v| {
                let d = ssformers::pmm::patch_similarity_matrix(t, v[0], v[1])?;
                ssformers::pmm::patch_to_class_score(t, d)
            },
            &[q, p],
            EPS,
        )
        .unwrap();
        prop_assert!(err < 1e-3, "relative error {}", err);
    }
}
