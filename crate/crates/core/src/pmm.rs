//! Patch matching: a parameter-free patch-to-class score.
//!
//! `D[i, j]` is the cosine between query value row `i` and prototype row `j`;
//! the class score sums, over query rows, the best match `max_j D[i, j]`.

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tape, Tensor, Var};

/// Cosine similarity matrix between the rows of `query` and `prototype`.
/// Zero rows have cosine 0 with everything.
pub fn patch_similarity_matrix(tape: &mut Tape, query: Var, prototype: Var) -> Result<Var> {
    let (qc, pc) = (tape.value(query).cols(), tape.value(prototype).cols());
    if qc != pc {
        return Err(Error::dim(
            "patch_similarity_matrix",
            tape.value(query).shape(),
            tape.value(prototype).shape(),
        ));
    }
    let q = tape.l2_normalize_rows(query)?;
    let p = tape.l2_normalize_rows(prototype)?;
    let pt = tape.transpose(p)?;
    tape.matmul(q, pt)
}

/// `Σ_i max_j D[i, j]`. The max routes its gradient to the lowest-index
/// argmax of each row.
pub fn patch_to_class_score(tape: &mut Tape, similarity: Var) -> Result<Var> {
    let best = tape.row_max(similarity)?;
    Ok(tape.sum(best))
}

/// Positionwise cosine `Σ_i cos(q_i, p_i)`; the spatial cosine classifier
/// that replaces patch matching in ablations.
pub fn cosine_classifier_ablation(tape: &mut Tape, query: Var, prototype: Var) -> Result<Var> {
    if tape.value(query).shape() != tape.value(prototype).shape() {
        return Err(Error::dim(
            "cosine_classifier_ablation",
            tape.value(query).shape(),
            tape.value(prototype).shape(),
        ));
    }
    let q = tape.l2_normalize_rows(query)?;
    let p = tape.l2_normalize_rows(prototype)?;
    let prod = tape.mul(q, p)?;
    Ok(tape.sum(prod))
}

/// Per-query classification outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityResult {
    /// Per-class patch similarity matrices (empty for the positionwise
    /// ablation).
    pub similarity: Vec<Tensor>,
    /// Class scores `P`.
    pub scores: Vec<f64>,
    pub predicted_class: usize,
}

/// Scores plus the `[1×N]` logits `P / τ` that feed the loss.
pub struct Classification {
    pub result: SimilarityResult,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    PatchMatching,
    PositionwiseCosine,
}

/// Scores a query's value rows against one prototype per class.
pub fn classify_query(
    tape: &mut Tape,
    query_value: Var,
    prototypes: &[Var],
    scorer: Scorer,
    temperature: f64,
) -> Result<Classification> {
    if prototypes.is_empty() {
        return Err(Error::Contract("classification needs at least one class".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut scores = Vec::with_capacity(prototypes.len());
    let mut similarity = Vec::new();
    for &p in prototypes {
        let score = match scorer {
            Scorer::PatchMatching => {
                let d = patch_similarity_matrix(tape, query_value, p)?;
                similarity.push(tape.value(d).clone());
                patch_to_class_score(tape, d)?
            }
            Scorer::PositionwiseCosine => cosine_classifier_ablation(tape, query_value, p)?,
        };
        scores.push(score);
    }
    let stacked = tape.stack(&scores)?;
    let logits = tape.scale(stacked, 1.0 / temperature);
    let values = tape.value(stacked).data().to_vec();
    Ok(Classification {
        result: SimilarityResult {
            similarity,
            predicted_class: argmax(&values),
            scores: values,
        },
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(q: Tensor, p: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (q, p) = (tape.constant(q), tape.constant(p));
        let d = patch_similarity_matrix(&mut tape, q, p).unwrap();
        tape.value(d).clone()
    }

    fn score(d: Tensor) -> f64 {
        let mut tape = Tape::new();
        let d = tape.constant(d);
        let s = patch_to_class_score(&mut tape, d).unwrap();
        tape.value(s).item()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(cosine(Tensor::identity(2), Tensor::identity(2)), Tensor::identity(2));
        let d = cosine(Tensor::from_rows(&[[3.0, 4.0]]), Tensor::from_rows(&[[6.0, 8.0]]));
        assert!((d.item() - 1.0).abs() < 1e-15);
        let d = cosine(Tensor::from_rows(&[[1.0, 0.0]]), Tensor::from_rows(&[[-1.0, 0.0]]));
        assert_eq!(d.item(), -1.0);
        let d = cosine(Tensor::from_rows(&[[0.0, 0.0]]), Tensor::from_rows(&[[1.0, 0.0]]));
        assert_eq!(d.item(), 0.0);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(Tensor::identity(2)), 2.0);
        assert_eq!(score(Tensor::full(&[3, 3], 0.5)), 1.5);
        assert!((score(Tensor::from_rows(&[[0.9, 0.1], [0.3, 0.4]])) - 1.3).abs() < 1e-15);
    }

    fn classify(q: Tensor, protos: Vec<Tensor>, scorer: Scorer) -> SimilarityResult {
        let mut tape = Tape::new();
        let q = tape.constant(q);
        let ps: Vec<Var> = protos.into_iter().map(|p| tape.constant(p)).collect();
        classify_query(&mut tape, q, &ps, scorer, 1.0).unwrap().result
    }

    #[test]
    fn classify_examples() {
        let q = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let r = classify(q.clone(), vec![Tensor::full(&[2, 4], 0.3)], Scorer::PatchMatching);
        assert_eq!(r.predicted_class, 0);

        let orth = Tensor::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
        let r = classify(q.clone(), vec![q.clone(), orth], Scorer::PatchMatching);
        assert_eq!(r.scores, vec![2.0, 0.0]);
        assert_eq!(r.predicted_class, 0);

        let same = Tensor::full(&[2, 4], 0.7);
        let r = classify(q, vec![same.clone(), same.clone(), same], Scorer::PatchMatching);
        assert_eq!(r.predicted_class, 0);
    }

    #[test]
    fn positionwise_ablation_examples() {
        let q = Tensor::identity(2);
        let r = classify(q.clone(), vec![q.clone()], Scorer::PositionwiseCosine);
        assert_eq!(r.scores, vec![2.0]);
        let swapped = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let r = classify(q.clone(), vec![swapped.clone()], Scorer::PositionwiseCosine);
        assert_eq!(r.scores, vec![0.0]);
        let r = classify(q, vec![swapped], Scorer::PatchMatching);
        assert_eq!(r.scores, vec![2.0]);
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::identity(2));
        assert!(classify_query(&mut tape, q, &[q], Scorer::PatchMatching, 0.0).is_err());
        assert!(classify_query(&mut tape, q, &[], Scorer::PatchMatching, 1.0).is_err());
    }
}
