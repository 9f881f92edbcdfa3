//! Topic evaluation: cross-lingual coherence (CNPMI), uniqueness (TU),
//! quality (TQ), document classification on topic proportions, LLM-based
//! topic ratings, and paired-document divergence diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Lang};
use crate::refine::{LlmApi, RefineError};
use crate::vae::{infer_theta, ModelState};

/// Smoothing constant for NPMI probabilities.
pub const NPMI_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reference corpus has no linked pairs")]
    EmptyReference,
    #[error("training labels contain a single class")]
    SingleClassTraining,
    #[error("no parsable rating in reply for topic {0}")]
    UnparseableRating(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model evaluation failed: {0}")]
    Model(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
    #[error(transparent)]
    Llm(#[from] RefineError),
}

// ===== reference statistics =====

/// Pair-level occurrence statistics over a linked bilingual reference
/// corpus. Joint counts are computed lazily by posting-list intersection
/// and memoized.
pub struct RefStats {
    pub n_pairs: usize,
    postings1: HashMap<String, Vec<u32>>,
    postings2: HashMap<String, Vec<u32>>,
    joint_memo: HashMap<(String, String), u32>,
}

impl RefStats {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self, MetricsError> {
        if corpus.pair_index.is_empty() {
            return Err(MetricsError::EmptyReference);
        }
        let mut postings1: HashMap<String, Vec<u32>> = HashMap::new();
        let mut postings2: HashMap<String, Vec<u32>> = HashMap::new();
        for (ordinal, (_pid, &(i1, i2))) in corpus.pair_index.iter().enumerate() {
            let ordinal = ordinal as u32;
            for (&idx, _) in &corpus.docs[i1].bow {
                if let Some(token) = corpus.vocab1.token(idx) {
                    postings1.entry(token.to_string()).or_default().push(ordinal);
                }
            }
            for (&idx, _) in &corpus.docs[i2].bow {
                if let Some(token) = corpus.vocab2.token(idx) {
                    postings2.entry(token.to_string()).or_default().push(ordinal);
                }
            }
        }
        Ok(RefStats {
            n_pairs: corpus.pair_index.len(),
            postings1,
            postings2,
            joint_memo: HashMap::new(),
        })
    }

    /// Number of pairs whose L1 document contains the token.
    pub fn df1(&self, token: &str) -> usize {
        self.postings1.get(token).map_or(0, |p| p.len())
    }

    /// Number of pairs whose L2 document contains the token.
    pub fn df2(&self, token: &str) -> usize {
        self.postings2.get(token).map_or(0, |p| p.len())
    }

    /// Number of pairs containing `w1` on the L1 side and `w2` on the L2
    /// side (sorted-list intersection, memoized).
    pub fn joint(&mut self, w1: &str, w2: &str) -> usize {
        let key = (w1.to_string(), w2.to_string());
        if let Some(&c) = self.joint_memo.get(&key) {
            return c as usize;
        }
        let count = match (self.postings1.get(w1), self.postings2.get(w2)) {
            (Some(a), Some(b)) => {
                let (mut i, mut j, mut c) = (0usize, 0usize, 0u32);
                while i < a.len() && j < b.len() {
                    match a[i].cmp(&b[j]) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            c += 1;
                            i += 1;
                            j += 1;
                        }
                    }
                }
                c
            }
            _ => 0,
        };
        self.joint_memo.insert(key, count);
        count as usize
    }

    /// Normalized pointwise mutual information of a cross-lingual token
    /// pair: log((p12+eps)/(p1 p2+eps)) / (-log(p12+eps)), and 0 whenever
    /// either marginal is 0 or the denominator degenerates.
    pub fn npmi_pair(&mut self, w1: &str, w2: &str, eps: f64) -> f64 {
        let n = self.n_pairs as f64;
        let p1 = self.df1(w1) as f64 / n;
        let p2 = self.df2(w2) as f64 / n;
        if p1 == 0.0 || p2 == 0.0 {
            return 0.0;
        }
        let p12 = self.joint(w1, w2) as f64 / n;
        let num = ((p12 + eps) / (p1 * p2 + eps)).ln();
        let den = -(p12 + eps).ln();
        if den <= 0.0 {
            return 0.0;
        }
        num / den
    }
}

/// Per-topic mean NPMI over the C x C cross-lingual pairs of top words,
/// plus the overall mean. Lists shorter than C are used as-is with a
/// warning.
pub fn cnpmi(
    stats: &mut RefStats,
    topics: &[(Vec<String>, Vec<String>)],
    c: usize,
) -> Result<(f64, Vec<f64>), MetricsError> {
    if stats.n_pairs == 0 {
        return Err(MetricsError::EmptyReference);
    }
    if topics.is_empty() {
        return Err(MetricsError::ShapeMismatch("no topics to evaluate".into()));
    }
    let mut per_topic = Vec::with_capacity(topics.len());
    for (t, (l1, l2)) in topics.iter().enumerate() {
        let take1 = l1.len().min(c);
        let take2 = l2.len().min(c);
        if take1 < c || take2 < c {
            log::warn!("topic {t}: fewer than {c} words for coherence ({take1}/{take2})");
        }
        if take1 == 0 || take2 == 0 {
            log::warn!("topic {t}: empty word list, coherence 0");
            per_topic.push(0.0);
            continue;
        }
        let mut sum = 0.0;
        for w1 in &l1[..take1] {
            for w2 in &l2[..take2] {
                sum += stats.npmi_pair(w1, w2, NPMI_EPS);
            }
        }
        per_topic.push(sum / (take1 * take2) as f64);
    }
    let overall = per_topic.iter().sum::<f64>() / per_topic.len() as f64;
    Ok((overall, per_topic))
}

/// Topic uniqueness: average reciprocal occurrence count of every top-word
/// slot, counting occurrences within the same language's lists only.
pub fn topic_uniqueness(lists_l1: &[Vec<String>], lists_l2: &[Vec<String>]) -> f64 {
    fn side(lists: &[Vec<String>]) -> (f64, usize) {
        let mut occurrences: BTreeMap<&str, usize> = BTreeMap::new();
        for list in lists {
            for w in list {
                *occurrences.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut sum = 0.0;
        let mut slots = 0usize;
        for list in lists {
            for w in list {
                sum += 1.0 / occurrences[w.as_str()] as f64;
                slots += 1;
            }
        }
        (sum, slots)
    }
    let (s1, n1) = side(lists_l1);
    let (s2, n2) = side(lists_l2);
    if n1 + n2 == 0 {
        return 0.0;
    }
    (s1 + s2) / (n1 + n2) as f64
}

/// TQ = max(0, CNPMI) x TU.
pub fn topic_quality(cnpmi: f64, tu: f64) -> f64 {
    cnpmi.max(0.0) * tu
}

// ===== classification =====

/// One-vs-rest linear classifier trained with a deterministic full-batch
/// subgradient method on the L2-regularized hinge loss.
pub struct LinearOvr {
    pub classes: Vec<i64>,
    w: Array2<f64>,
    b: Vec<f64>,
}

impl LinearOvr {
    pub fn predict(&self, x: ArrayView1<f64>) -> i64 {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (c, b) in self.b.iter().enumerate() {
            let score = self.w.row(c).dot(&x) + b;
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        self.classes[best]
    }
}

/// Trains the one-vs-rest hinge classifier. Deterministic: no sampling,
/// fixed iteration count and step size.
pub fn train_hinge_ovr(x: &Array2<f64>, y: &[i64]) -> Result<LinearOvr, MetricsError> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} feature rows vs {} labels",
            x.nrows(),
            y.len()
        )));
    }
    let mut classes: Vec<i64> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(MetricsError::SingleClassTraining);
    }
    let (n, d) = (x.nrows(), x.ncols());
    let l2 = 0.01;
    let lr = 0.5;
    let iters = 300;
    let mut w = Array2::zeros((classes.len(), d));
    let mut b = vec![0.0; classes.len()];
    for _ in 0..iters {
        for (c, &class) in classes.iter().enumerate() {
            let mut grad_w = Array1::from_elem(d, 0.0);
            let mut grad_b = 0.0;
            for i in 0..n {
                let yi = if y[i] == class { 1.0 } else { -1.0 };
                let margin = yi * (w.row(c).dot(&x.row(i)) + b[c]);
                if margin < 1.0 {
                    grad_w.scaled_add(-yi / n as f64, &x.row(i));
                    grad_b += -yi / n as f64;
                }
            }
            grad_w.scaled_add(l2, &w.row(c).to_owned());
            let mut row = w.row_mut(c);
            row.scaled_add(-lr, &grad_w);
            b[c] -= lr * grad_b;
        }
    }
    Ok(LinearOvr { classes, w, b })
}

pub fn accuracy(clf: &LinearOvr, x: &Array2<f64>, y: &[i64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let hits = (0..x.nrows()).filter(|&i| clf.predict(x.row(i)) == y[i]).count();
    hits as f64 / y.len() as f64
}

/// Trains on one language's proportions and reports accuracy on held-out
/// same-language documents (intra) and other-language documents (cross).
pub fn classify_eval(
    train_x: &Array2<f64>,
    train_y: &[i64],
    same_x: &Array2<f64>,
    same_y: &[i64],
    other_x: &Array2<f64>,
    other_y: &[i64],
) -> Result<(f64, f64), MetricsError> {
    for (x, y, what) in
        [(same_x, same_y, "intra test"), (other_x, other_y, "cross test")]
    {
        if x.nrows() != y.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "{what}: {} rows vs {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() != train_x.ncols() {
            return Err(MetricsError::ShapeMismatch(format!(
                "{what}: {} features vs {}",
                x.ncols(),
                train_x.ncols()
            )));
        }
    }
    let clf = train_hinge_ovr(train_x, train_y)?;
    Ok((accuracy(&clf, same_x, same_y), accuracy(&clf, other_x, other_y)))
}

/// Topic proportions (posterior-mean softmax) and labels of one language's
/// labeled documents, in corpus order.
pub fn theta_features(
    model: &ModelState,
    corpus: &Corpus,
    lang: Lang,
) -> Result<(Array2<f64>, Vec<i64>), MetricsError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for doc in &corpus.docs {
        if doc.lang != lang {
            continue;
        }
        let Some(label) = doc.label else { continue };
        let theta = infer_theta(model, doc).map_err(|e| MetricsError::Model(e.to_string()))?;
        rows.push(theta);
        labels.push(label);
    }
    let k = model.config.k;
    let mut x = Array2::zeros((rows.len(), k));
    for (i, row) in rows.into_iter().enumerate() {
        x.row_mut(i).assign(&row);
    }
    Ok((x, labels))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassificationReport {
    pub acc_intra_l1: f64,
    pub acc_intra_l2: f64,
    pub acc_cross_l1: f64,
    pub acc_cross_l2: f64,
}

// ===== report =====

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cnpmi: f64,
    pub tu: f64,
    pub tq: f64,
    pub per_topic: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
}

impl MetricsReport {
    /// Builds a report with the TQ identity enforced.
    pub fn new(
        cnpmi: f64,
        tu: f64,
        per_topic: Vec<f64>,
        classification: Option<ClassificationReport>,
    ) -> Self {
        MetricsReport { cnpmi, tu, tq: topic_quality(cnpmi, tu), per_topic, classification }
    }
}

// ===== topic word lists (export format) =====

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TopicWords {
    pub topic: usize,
    pub l1: Vec<String>,
    pub l2: Vec<String>,
}

pub fn write_topics_jsonl(path: &Path, topics: &[TopicWords]) -> Result<(), MetricsError> {
    let mut out = String::new();
    for t in topics {
        out.push_str(&serde_json::to_string(t).expect("topic words serialize"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_topics_jsonl(path: &Path) -> Result<Vec<TopicWords>, MetricsError> {
    let text = fs::read_to_string(path)?;
    let mut topics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: TopicWords = serde_json::from_str(line)
            .map_err(|e| MetricsError::Json { line: i + 1, msg: e.to_string() })?;
        topics.push(t);
    }
    Ok(topics)
}

// ===== LLM topic ratings =====

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    IntraL1,
    IntraL2,
    Cross,
}

const INTRA_TEMPLATE: &str = "You are a helpful assistant evaluating the top words of a topic \
model output for a given topic. The dataset is {blurb}. Please rate how related the following \
words are to each other on a scale from 1 to 3 (\"1\"=not very related, \"2\"=moderately \
related, \"3\"=very related). Reply with a single number, indicating the overall \
appropriateness of the topic.";

const CROSS_TEMPLATE: &str = "You are a helpful assistant evaluating the similarity of topics \
derived from topic modeling on parallel corpora. The dataset is {blurb}. You will be given two \
sets of top words, one for a Language 1 topic and one for a Language 2 topic. Please rate how \
similar the underlying topics represented by these two sets of words are, on a scale from 1 to \
3 (\"1\"=not very similar, \"2\"=moderately similar, \"3\"=very similar). Reply with a single \
number.";

/// The rating prompt for one topic.
pub fn rating_prompt(topic: &TopicWords, kind: RateKind, blurb: &str) -> String {
    match kind {
        RateKind::IntraL1 => format!(
            "{}\n\nWords: {}",
            INTRA_TEMPLATE.replace("{blurb}", blurb),
            topic.l1.join(", ")
        ),
        RateKind::IntraL2 => format!(
            "{}\n\nWords: {}",
            INTRA_TEMPLATE.replace("{blurb}", blurb),
            topic.l2.join(", ")
        ),
        RateKind::Cross => format!(
            "{}\n\nLanguage 1: {}\nLanguage 2: {}",
            CROSS_TEMPLATE.replace("{blurb}", blurb),
            topic.l1.join(", "),
            topic.l2.join(", ")
        ),
    }
}

/// First whole integer in {1, 2, 3} found in the reply.
pub fn parse_rating(reply: &str) -> Option<u8> {
    let bytes = reply.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if let Ok(v) = reply[start..i].parse::<u32>() {
                if (1..=3).contains(&v) {
                    return Some(v as u8);
                }
            }
        } else {
            i += 1;
        }
    }
    None
}

/// One rating per topic for the given prompt kind.
pub fn llm_rate_topics(
    topics: &[TopicWords],
    api: &dyn LlmApi,
    kind: RateKind,
    blurb: &str,
) -> Result<Vec<u8>, MetricsError> {
    let mut ratings = Vec::with_capacity(topics.len());
    for t in topics {
        let prompt = rating_prompt(t, kind, blurb);
        let reply = api.complete(&prompt, 0)?;
        let rating =
            parse_rating(&reply).ok_or(MetricsError::UnparseableRating(t.topic))?;
        ratings.push(rating);
    }
    Ok(ratings)
}

// ===== paired-document diagnostics =====

/// Mean Jensen-Shannon divergence between the inferred proportions of
/// linked document pairs.
pub fn mean_pair_jsd(model: &ModelState, corpus: &Corpus) -> Result<f64, MetricsError> {
    if corpus.pair_index.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let mut sum = 0.0;
    for (_pid, &(i1, i2)) in &corpus.pair_index {
        let t1 = infer_theta(model, &corpus.docs[i1])
            .map_err(|e| MetricsError::Model(e.to_string()))?;
        let t2 = infer_theta(model, &corpus.docs[i2])
            .map_err(|e| MetricsError::Model(e.to_string()))?;
        sum += crate::math::jensen_shannon(t1.as_slice().unwrap(), t2.as_slice().unwrap());
    }
    Ok(sum / corpus.pair_index.len() as f64)
}

// ===== tests =====
