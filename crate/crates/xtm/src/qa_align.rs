//! Document-topic semantic alignment.
//!
//! Documents play the role of queries and refined topics the role of
//! answers: cosine similarities between their embeddings, softmaxed at a
//! temperature, give target proportions; the loss is the KL divergence from
//! the model's posterior proportions to those fixed targets.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::embed::{document_embedding, topic_embedding, EmbedError, EmbeddingTable, EncoderProvider};
use crate::math::LOG_FLOOR;
use crate::refine::RefinedTopic;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("no topic could be embedded")]
    NoTopicsEmbeddable,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Fixed per-document target proportions plus the topic embeddings that
/// produced them. Columns of non-embeddable topics are zero and excluded
/// from both the softmax and the loss.
#[derive(Debug, Clone)]
pub struct AlignmentTargets {
    /// D x K; each row sums to 1 over the embeddable columns.
    pub theta_hat: Array2<f64>,
    pub tau: f64,
    pub topic_vecs: Vec<Option<Array1<f64>>>,
    pub embeddable: Vec<bool>,
    pub doc_ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl AlignmentTargets {
    pub fn row_of(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn k(&self) -> usize {
        self.theta_hat.ncols()
    }
}

/// Softmax at temperature `tau` of the cosine similarities between one
/// document vector and the topic vectors (all unit-norm).
pub fn similarity_row(h: &Array1<f64>, topic_vecs: &[Array1<f64>], tau: f64) -> Array1<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let scaled: Vec<f64> = topic_vecs.iter().map(|t| h.dot(t) / tau).collect();
    Array1::from(crate::math::softmax(&scaled))
}

/// Builds the target matrix for every document in the corpus. Topics whose
/// refinement is missing or whose embedding fails are flagged and excluded;
/// documents that cannot be embedded get a uniform row with a warning.
/// Remote-provider failures propagate.
pub fn build_targets(
    corpus: &Corpus,
    refined: &[Option<RefinedTopic>],
    provider: &EncoderProvider,
    table: &EmbeddingTable,
    tau: f64,
) -> Result<AlignmentTargets, QaError> {
    if !(tau > 0.0) {
        return Err(QaError::ShapeMismatch(format!("temperature must be positive, got {tau}")));
    }
    let k = refined.len();
    let mut topic_vecs: Vec<Option<Array1<f64>>> = Vec::with_capacity(k);
    for (i, r) in refined.iter().enumerate() {
        let vec = match r {
            None => {
                log::warn!("topic {i}: unrefined, excluded from alignment targets");
                None
            }
            Some(r) => match topic_embedding(r, provider, table) {
                Ok(v) => Some(Array1::from(v)),
                Err(EmbedError::ProviderError(e)) => {
                    return Err(QaError::Embed(EmbedError::ProviderError(e)));
                }
                Err(e) => {
                    log::warn!("topic {i}: {e}, excluded from alignment targets");
                    None
                }
            },
        };
        topic_vecs.push(vec);
    }
    let embeddable: Vec<bool> = topic_vecs.iter().map(|v| v.is_some()).collect();
    let usable: Vec<(usize, &Array1<f64>)> = topic_vecs
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.as_ref().map(|v| (i, v)))
        .collect();
    if usable.is_empty() {
        return Err(QaError::NoTopicsEmbeddable);
    }

    let mut theta_hat = Array2::zeros((corpus.docs.len(), k));
    let mut doc_ids = Vec::with_capacity(corpus.docs.len());
    let mut index = BTreeMap::new();
    for (d, doc) in corpus.docs.iter().enumerate() {
        let row = match document_embedding(doc, corpus.vocab(doc.lang), provider, table) {
            Ok(h) => {
                let h = Array1::from(h);
                let vecs: Vec<Array1<f64>> = usable.iter().map(|(_, v)| (*v).clone()).collect();
                similarity_row(&h, &vecs, tau)
            }
            Err(EmbedError::ProviderError(e)) => {
                return Err(QaError::Embed(EmbedError::ProviderError(e)));
            }
            Err(e) => {
                log::warn!("document {}: {e}, uniform alignment target", doc.id);
                Array1::from(vec![1.0 / usable.len() as f64; usable.len()])
            }
        };
        for ((topic, _), &p) in usable.iter().zip(row.iter()) {
            theta_hat[[d, *topic]] = p;
        }
        index.insert(doc.id.clone(), d);
        doc_ids.push(doc.id.clone());
    }
    Ok(AlignmentTargets { theta_hat, tau, topic_vecs, embeddable, doc_ids, index })
}

/// Sum over rows of KL(theta_row || target_row), with the targets constant,
/// plus the gradient w.r.t. the theta entries. `row_map[i]` names the target
/// row for theta row `i`. Non-embeddable topic columns are skipped.
pub fn doc_align_loss(
    theta: &Array2<f64>,
    targets: &AlignmentTargets,
    row_map: &[usize],
) -> Result<(f64, Array2<f64>), QaError> {
    if theta.ncols() != targets.k() {
        return Err(QaError::ShapeMismatch(format!(
            "theta has {} topics, targets have {}",
            theta.ncols(),
            targets.k()
        )));
    }
    if theta.nrows() != row_map.len() {
        return Err(QaError::ShapeMismatch(format!(
            "theta has {} rows, row_map has {}",
            theta.nrows(),
            row_map.len()
        )));
    }
    if let Some(&bad) = row_map.iter().find(|&&r| r >= targets.theta_hat.nrows()) {
        return Err(QaError::ShapeMismatch(format!("row_map entry {bad} out of range")));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(theta.raw_dim());
    for (i, &target_row) in row_map.iter().enumerate() {
        for k in 0..theta.ncols() {
            if !targets.embeddable[k] {
                continue;
            }
            let t = theta[[i, k]];
            let t_hat = targets.theta_hat[[target_row, k]].max(LOG_FLOOR);
            if t > 0.0 {
                let t_f = t.max(LOG_FLOOR);
                loss += t * (t_f.ln() - t_hat.ln());
                grad[[i, k]] = t_f.ln() + 1.0 - t_hat.ln();
            } else {
                // 0 log 0 = 0; steer the gradient with the floored value.
                grad[[i, k]] = LOG_FLOOR.ln() + 1.0 - t_hat.ln();
            }
        }
    }
    Ok((loss, grad))
}

// ===== tests =====
