//! Weighted-sample squared-MMD alignment loss.
//!
//! Each topic yields two finite distributions in word-embedding space: the
//! decoder's top-N words with their probabilities (raw) and the refined word
//! sets weighted by vote counts (target). The loss is the mean squared MMD
//! between the pairs under a Gaussian kernel on cosine distance, with an
//! analytic gradient through the raw weights into the decoder logits.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::corpus::{Lang, Vocabulary};
use crate::embed::EmbeddingTable;
use crate::math::median;
use crate::refine::RefinedTopic;
use crate::vae::ModelState;

#[derive(Debug, Error)]
pub enum MmdError {
    #[error("empty support: {0}")]
    EmptySupport(String),
    #[error("bad kernel: {0}")]
    BadKernel(String),
}

/// A finite distribution as labeled unit vectors with normalized weights.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub labels: Vec<String>,
    pub points: Vec<Array1<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(
        labels: Vec<String>,
        points: Vec<Array1<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self, MmdError> {
        if points.is_empty() || points.len() != weights.len() || points.len() != labels.len() {
            return Err(MmdError::EmptySupport(
                "points, weights, and labels must be non-empty and equal-length".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(MmdError::EmptySupport(format!(
                "weights must be non-negative and sum to 1 (got {sum})"
            )));
        }
        for p in &points {
            let norm = crate::math::l2_norm(p.as_slice().unwrap());
            if (norm - 1.0).abs() > 1e-6 {
                return Err(MmdError::EmptySupport(format!(
                    "points must be unit-norm (got {norm})"
                )));
            }
        }
        Ok(WeightedSample { labels, points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Bandwidth selection for the Gaussian kernel.
#[derive(Debug, Clone)]
pub enum BandwidthMode {
    MedianHeuristic,
    Fixed(f64),
    Multi(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct KernelConfig {
    pub mode: BandwidthMode,
    /// Lower floor for any bandwidth.
    pub epsilon: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { mode: BandwidthMode::MedianHeuristic, epsilon: 1e-8 }
    }
}

impl KernelConfig {
    /// Resolves the bandwidth list for a sample pair. The boolean reports a
    /// degenerate median (all pairwise distances below the floor).
    pub fn resolve(
        &self,
        p: &WeightedSample,
        q: &WeightedSample,
    ) -> Result<(Vec<f64>, bool), MmdError> {
        match &self.mode {
            BandwidthMode::MedianHeuristic => {
                let (bw, degenerate) = median_bandwidth(p, q, self.epsilon);
                Ok((vec![bw], degenerate))
            }
            BandwidthMode::Fixed(v) => {
                if !(*v > 0.0) {
                    return Err(MmdError::BadKernel(format!("bandwidth must be > 0, got {v}")));
                }
                Ok((vec![*v], false))
            }
            BandwidthMode::Multi(list) => {
                if list.is_empty() {
                    return Err(MmdError::BadKernel("empty bandwidth list".into()));
                }
                if list.iter().any(|v| !(*v > 0.0)) {
                    return Err(MmdError::BadKernel("all bandwidths must be > 0".into()));
                }
                Ok((list.clone(), false))
            }
        }
    }
}

/// Squared cosine distance (1 - x.y)^2 for unit vectors.
fn cos_dist_sq(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let d = 1.0 - x.dot(y);
    d * d
}

/// Gaussian kernel on cosine distance, averaged over the bandwidth list.
fn kernel_avg(x: &Array1<f64>, y: &Array1<f64>, bandwidths: &[f64]) -> f64 {
    let d2 = cos_dist_sq(x, y);
    bandwidths.iter().map(|s2| (-d2 / (2.0 * s2)).exp()).sum::<f64>() / bandwidths.len() as f64
}

/// Median of squared cosine distances over all unordered pairs of the
/// combined support, floored at `epsilon`. The flag reports a degenerate
/// support (median below the floor, e.g. all points identical).
pub fn median_bandwidth(p: &WeightedSample, q: &WeightedSample, epsilon: f64) -> (f64, bool) {
    let combined: Vec<&Array1<f64>> = p.points.iter().chain(q.points.iter()).collect();
    assert!(combined.len() >= 2, "median heuristic needs a combined support of at least 2");
    let mut dists = Vec::with_capacity(combined.len() * (combined.len() - 1) / 2);
    for i in 0..combined.len() {
        for j in (i + 1)..combined.len() {
            dists.push(cos_dist_sq(combined[i], combined[j]));
        }
    }
    let med = median(&mut dists);
    if med < epsilon {
        log::warn!("degenerate kernel support: median distance {med:.3e} floored to {epsilon:.3e}");
        (epsilon, true)
    } else {
        (med, false)
    }
}

/// Canonical total order on samples so cross-term summation order (and hence
/// the floating-point result) is identical for (P, Q) and (Q, P).
fn sample_le(p: &WeightedSample, q: &WeightedSample) -> bool {
    if p.len() != q.len() {
        return p.len() < q.len();
    }
    let key = |s: &WeightedSample| -> Vec<u64> {
        let mut k: Vec<u64> = s.weights.iter().map(|w| w.to_bits()).collect();
        for pt in &s.points {
            k.extend(pt.iter().map(|v| v.to_bits()));
        }
        k
    };
    key(p) <= key(q)
}

/// Biased weighted V-statistic for squared MMD under the averaged kernel,
/// clamped below at zero. Exactly symmetric in its sample arguments.
pub fn mmd_squared_with(p: &WeightedSample, q: &WeightedSample, bandwidths: &[f64]) -> f64 {
    let (a, b) = if sample_le(p, q) { (p, q) } else { (q, p) };
    let mut self_a = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            self_a += a.weights[i] * a.weights[j] * kernel_avg(&a.points[i], &a.points[j], bandwidths);
        }
    }
    let mut self_b = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            self_b += b.weights[i] * b.weights[j] * kernel_avg(&b.points[i], &b.points[j], bandwidths);
        }
    }
    let mut cross = 0.0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            cross += a.weights[i] * b.weights[j] * kernel_avg(&a.points[i], &b.points[j], bandwidths);
        }
    }
    (self_a + self_b - 2.0 * cross).max(0.0)
}

/// Squared MMD with the bandwidth resolved from the kernel configuration.
pub fn mmd_squared(
    p: &WeightedSample,
    q: &WeightedSample,
    kernel: &KernelConfig,
) -> Result<f64, MmdError> {
    let (bandwidths, _) = kernel.resolve(p, q)?;
    Ok(mmd_squared_with(p, q, &bandwidths))
}

// ===== topic distributions =====

/// Surviving top-N support of one topic: vocabulary indices and their unit
/// embeddings, per language. Words without embeddings are dropped.
#[derive(Debug, Clone)]
pub struct TopicSupport {
    pub topic: usize,
    pub idx1: Vec<usize>,
    pub vecs1: Vec<Array1<f64>>,
    pub idx2: Vec<usize>,
    pub vecs2: Vec<Array1<f64>>,
}

impl TopicSupport {
    pub fn total_len(&self) -> usize {
        self.idx1.len() + self.idx2.len()
    }
}

/// Builds the frozen top-N support for one topic from the current decoder.
pub fn topic_support(
    state: &ModelState,
    vocab1: &Vocabulary,
    vocab2: &Vocabulary,
    table: &EmbeddingTable,
    topic: usize,
    n: usize,
) -> TopicSupport {
    let keep = |lang: Lang, vocab: &Vocabulary| -> (Vec<usize>, Vec<Array1<f64>>) {
        let mut idx = Vec::new();
        let mut vecs = Vec::new();
        for v in crate::vae::top_word_indices(state, lang, topic, n) {
            let token = vocab.token(v as u32).unwrap_or_default();
            match table.unit_word_vec(token) {
                Some(vec) => {
                    idx.push(v);
                    vecs.push(Array1::from(vec));
                }
                None => log::warn!("topic {topic}: no embedding for '{token}', dropped from raw support"),
            }
        }
        (idx, vecs)
    };
    let (idx1, vecs1) = keep(Lang::L1, vocab1);
    let (idx2, vecs2) = keep(Lang::L2, vocab2);
    TopicSupport { topic, idx1, vecs1, idx2, vecs2 }
}

/// All topic supports for the current decoder state.
pub fn topic_supports(
    state: &ModelState,
    vocab1: &Vocabulary,
    vocab2: &Vocabulary,
    table: &EmbeddingTable,
    n: usize,
) -> Vec<TopicSupport> {
    (0..state.config.k)
        .map(|k| topic_support(state, vocab1, vocab2, table, k, n))
        .collect()
}

/// Raw distribution of one topic: decoder probabilities of the support
/// words (both languages concatenated), normalized by their total.
pub fn build_raw_distribution(
    state: &ModelState,
    vocab1: &Vocabulary,
    vocab2: &Vocabulary,
    support: &TopicSupport,
) -> Result<WeightedSample, MmdError> {
    if support.total_len() == 0 {
        return Err(MmdError::EmptySupport(format!(
            "topic {}: no embedded words in raw support",
            support.topic
        )));
    }
    let probs1 = column_softmax(&state.beta1_logits, support.topic);
    let probs2 = column_softmax(&state.beta2_logits, support.topic);
    // Language-balanced mixture: each present language is renormalized over
    // its own top words and contributes an equal share of the total mass, so
    // neither side can shrink its contribution by flattening its column.
    let halves = (!support.idx1.is_empty() as usize + !support.idx2.is_empty() as usize) as f64;
    let share = 1.0 / halves;
    let mut labels = Vec::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut push = |idx: &[usize], vecs: &[Array1<f64>], probs: &[f64], vocab: &Vocabulary| {
        let total: f64 = idx.iter().map(|&v| probs[v]).sum();
        for (&v, vec) in idx.iter().zip(vecs) {
            labels.push(vocab.token(v as u32).unwrap_or_default().to_string());
            points.push(vec.clone());
            weights.push(share * probs[v] / total);
        }
    };
    push(&support.idx1, &support.vecs1, &probs1, vocab1);
    push(&support.idx2, &support.vecs2, &probs2, vocab2);
    WeightedSample::new(labels, points, weights)
}

fn column_softmax(logits: &Array2<f64>, k: usize) -> Vec<f64> {
    crate::math::softmax(&logits.column(k).to_vec())
}

/// Refined target distribution: the selected words of both languages with
/// weights proportional to their vote counts, balanced so each language with
/// any embeddable word carries an equal share of the mass. Words without
/// embeddings are dropped with a warning.
pub fn build_refined_distribution(
    refined: &RefinedTopic,
    table: &EmbeddingTable,
) -> Result<WeightedSample, MmdError> {
    let gather = |tokens: &[String], votes: &std::collections::BTreeMap<String, u32>| {
        let mut kept = Vec::new();
        for t in tokens {
            match table.unit_word_vec(t) {
                Some(vec) => {
                    kept.push((t.clone(), Array1::from(vec), votes.get(t).copied().unwrap_or(0) as f64))
                }
                None => log::warn!(
                    "topic {}: no embedding for refined word '{t}', dropped from target",
                    refined.topic_id
                ),
            }
        }
        kept
    };
    let half1 = gather(&refined.selected_l1, &refined.votes_l1);
    let half2 = gather(&refined.selected_l2, &refined.votes_l2);
    let present = |half: &[(String, Array1<f64>, f64)]| -> bool {
        half.iter().map(|(_, _, c)| c).sum::<f64>() > 0.0
    };
    let halves = (present(&half1) as usize + present(&half2) as usize) as f64;
    if halves == 0.0 {
        return Err(MmdError::EmptySupport(format!(
            "topic {}: no embedded refined words",
            refined.topic_id
        )));
    }
    let mut labels = Vec::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for half in [half1, half2] {
        let total: f64 = half.iter().map(|(_, _, c)| c).sum();
        if total <= 0.0 {
            continue;
        }
        for (label, point, count) in half {
            labels.push(label);
            points.push(point);
            weights.push(count / (total * halves));
        }
    }
    WeightedSample::new(labels, points, weights)
}

// ===== loss with gradient =====

/// Gradients of the alignment loss w.r.t. the decoder logits.
#[derive(Debug, Clone)]
pub struct BetaGrads {
    pub l1: Array2<f64>,
    pub l2: Array2<f64>,
}

impl BetaGrads {
    pub fn zeros_like(state: &ModelState) -> Self {
        BetaGrads {
            l1: Array2::zeros(state.beta1_logits.raw_dim()),
            l2: Array2::zeros(state.beta2_logits.raw_dim()),
        }
    }
}

/// Mean squared MMD over topics with analytic gradient w.r.t. the decoder
/// logits, against frozen supports, targets, and bandwidths. Topics whose
/// target or bandwidth entry is `None` contribute zero. Returns the loss,
/// the gradient, and the number of topics that contributed.
pub fn mmd_loss_frozen(
    state: &ModelState,
    vocab1: &Vocabulary,
    vocab2: &Vocabulary,
    supports: &[TopicSupport],
    targets: &[Option<WeightedSample>],
    bandwidths: &[Option<Vec<f64>>],
) -> (f64, BetaGrads, usize) {
    let k_topics = state.config.k;
    assert_eq!(supports.len(), k_topics);
    assert_eq!(targets.len(), k_topics);
    assert_eq!(bandwidths.len(), k_topics);
    let mut grads = BetaGrads::zeros_like(state);
    let mut loss = 0.0;
    let mut active = 0usize;
    for k in 0..k_topics {
        let (Some(target), Some(bw)) = (&targets[k], &bandwidths[k]) else {
            continue;
        };
        let support = &supports[k];
        if support.total_len() == 0 {
            log::warn!("topic {k}: empty raw support, contributes zero alignment loss");
            continue;
        }
        let raw = match build_raw_distribution(state, vocab1, vocab2, support) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("topic {k}: {e}, contributes zero alignment loss");
                continue;
            }
        };
        active += 1;

        // M = sum_ii' w_i w_i' Kpp + const - 2 sum_ij w_i u_j Kpq.
        let m = raw.len();
        let mut kpp = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                kpp[[i, j]] = kernel_avg(&raw.points[i], &raw.points[j], bw);
            }
        }
        let mut kpq = Array2::zeros((m, target.len()));
        for i in 0..m {
            for j in 0..target.len() {
                kpq[[i, j]] = kernel_avg(&raw.points[i], &target.points[j], bw);
            }
        }
        let mut self_q = 0.0;
        for i in 0..target.len() {
            for j in 0..target.len() {
                self_q += target.weights[i]
                    * target.weights[j]
                    * kernel_avg(&target.points[i], &target.points[j], bw);
            }
        }
        let mut self_p = 0.0;
        let mut cross = 0.0;
        for i in 0..m {
            for j in 0..m {
                self_p += raw.weights[i] * raw.weights[j] * kpp[[i, j]];
            }
            for j in 0..target.len() {
                cross += raw.weights[i] * target.weights[j] * kpq[[i, j]];
            }
        }
        loss += (self_p + self_q - 2.0 * cross).max(0.0) / k_topics as f64;

        // dM/dw_i = 2 (sum_i' w_i' Kpp[i,i'] - sum_j u_j Kpq[i,j]).
        let mut g = vec![0.0; m];
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                s += raw.weights[j] * kpp[[i, j]];
            }
            let mut c = 0.0;
            for j in 0..target.len() {
                c += target.weights[j] * kpq[[i, j]];
            }
            g[i] = 2.0 * (s - c);
        }

        // Language-balanced weights w_i = share * p_i / S_l, so the
        // renormalization Jacobian is block-diagonal per language:
        // dM/dp_i = (share * g_i - sum_{j in l} g_j w_j) / S_l.
        let probs1 = column_softmax(&state.beta1_logits, k);
        let probs2 = column_softmax(&state.beta2_logits, k);
        let n1 = support.idx1.len();
        let halves =
            (!support.idx1.is_empty() as usize + !support.idx2.is_empty() as usize) as f64;
        let share = 1.0 / halves;
        let mut dp = vec![0.0; m];
        let mut fill = |range: std::ops::Range<usize>, idx: &[usize], probs: &[f64]| {
            if idx.is_empty() {
                return;
            }
            let s_lang: f64 = idx.iter().map(|&v| probs[v]).sum();
            let gw_lang: f64 = range.clone().map(|i| g[i] * raw.weights[i]).sum();
            for i in range {
                dp[i] = (share * g[i] - gw_lang) / s_lang;
            }
        };
        fill(0..n1, &support.idx1, &probs1);
        fill(n1..m, &support.idx2, &probs2);

        // Full-vocabulary softmax backprop per language column.
        let scale = 1.0 / k_topics as f64;
        let apply = |dp_lang: &[f64],
                         idx: &[usize],
                         probs: &[f64],
                         grad: &mut Array2<f64>| {
            let c: f64 = dp_lang.iter().zip(idx).map(|(d, &v)| d * probs[v]).sum();
            let mut dense = vec![0.0; probs.len()];
            for (v, dv) in dense.iter_mut().enumerate() {
                *dv = -probs[v] * c;
            }
            for (d, &v) in dp_lang.iter().zip(idx) {
                dense[v] += d * probs[v];
            }
            for (v, dv) in dense.iter().enumerate() {
                grad[[v, k]] += scale * dv;
            }
        };
        apply(&dp[..n1], &support.idx1, &probs1, &mut grads.l1);
        apply(&dp[n1..], &support.idx2, &probs2, &mut grads.l2);
    }
    (loss, grads, active)
}

/// Convenience form: builds supports and targets from the current state and
/// refined topics, resolves bandwidths, and evaluates the loss. Returns the
/// resolved per-topic bandwidths so callers can freeze them.
#[allow(clippy::type_complexity)]
pub fn mmd_loss(
    state: &ModelState,
    vocab1: &Vocabulary,
    vocab2: &Vocabulary,
    table: &EmbeddingTable,
    refined: &[Option<RefinedTopic>],
    kernel: &KernelConfig,
    n: usize,
) -> Result<(f64, BetaGrads, Vec<Option<Vec<f64>>>), MmdError> {
    assert_eq!(refined.len(), state.config.k);
    let supports = topic_supports(state, vocab1, vocab2, table, n);
    let mut targets: Vec<Option<WeightedSample>> = Vec::with_capacity(refined.len());
    let mut bandwidths: Vec<Option<Vec<f64>>> = Vec::with_capacity(refined.len());
    for (k, r) in refined.iter().enumerate() {
        let Some(r) = r else {
            log::warn!("topic {k}: no refinement, contributes zero alignment loss");
            targets.push(None);
            bandwidths.push(None);
            continue;
        };
        let target = match build_refined_distribution(r, table) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("{e}; topic contributes zero alignment loss");
                targets.push(None);
                bandwidths.push(None);
                continue;
            }
        };
        let raw = build_raw_distribution(state, vocab1, vocab2, &supports[k])
            .map_err(|e| MmdError::EmptySupport(e.to_string()))?;
        let (bw, _) = kernel.resolve(&raw, &target)?;
        targets.push(Some(target));
        bandwidths.push(Some(bw));
    }
    let (loss, grads, _) =
        mmd_loss_frozen(state, vocab1, vocab2, &supports, &targets, &bandwidths);
    Ok((loss, grads, bandwidths))
}

// ===== tests =====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::TrainConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Array1<f64> {
        let mut v = v;
        crate::math::l2_normalize(&mut v);
        Array1::from(v)
    }

    fn sample(points: Vec<Array1<f64>>, weights: Vec<f64>) -> WeightedSample {
        let labels = (0..points.len()).map(|i| format!("w{i}")).collect();
        WeightedSample::new(labels, points, weights).unwrap()
    }

    fn random_sample(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> WeightedSample {
        let points: Vec<Array1<f64>> =
            (0..n).map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let mut weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        sample(points, weights)
    }

    /// Independent brute-force triple-sum evaluation.
    fn brute_force(p: &WeightedSample, q: &WeightedSample, s2: f64) -> f64 {
        let k = |x: &Array1<f64>, y: &Array1<f64>| {
            let d = 1.0 - x.dot(y);
            (-(d * d) / (2.0 * s2)).exp()
        };
        let mut total = 0.0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                total += p.weights[i] * p.weights[j] * k(&p.points[i], &p.points[j]);
            }
        }
        for i in 0..q.len() {
            for j in 0..q.len() {
                total += q.weights[i] * q.weights[j] * k(&q.points[i], &q.points[j]);
            }
        }
        for i in 0..p.len() {
            for j in 0..q.len() {
                total -= 2.0 * p.weights[i] * q.weights[j] * k(&p.points[i], &q.points[j]);
            }
        }
        total
    }

    #[test]
    fn sample_validation() {
        assert!(WeightedSample::new(vec![], vec![], vec![]).is_err());
        let p = unit(vec![1.0, 0.0]);
        assert!(WeightedSample::new(vec!["a".into()], vec![p.clone()], vec![0.5]).is_err());
        assert!(
            WeightedSample::new(vec!["a".into()], vec![Array1::from(vec![2.0, 0.0])], vec![1.0])
                .is_err()
        );
        assert!(WeightedSample::new(vec!["a".into()], vec![p], vec![1.0]).is_ok());
    }

    #[test]
    fn median_bandwidth_single_pair_and_degenerate() {
        // Two points with d^2 = 0.5: cos = 1 - sqrt(0.5).
        let c = 1.0 - 0.5f64.sqrt();
        let p = sample(vec![Array1::from(vec![1.0, 0.0])], vec![1.0]);
        let q = sample(vec![Array1::from(vec![c, (1.0 - c * c).sqrt()])], vec![1.0]);
        let (bw, flag) = median_bandwidth(&p, &q, 1e-8);
        assert!((bw - 0.5).abs() < 1e-12);
        assert!(!flag);

        let same = Array1::from(vec![0.0, 1.0]);
        let p2 = sample(vec![same.clone(), same.clone()], vec![0.5, 0.5]);
        let q2 = sample(vec![same], vec![1.0]);
        let (bw2, flag2) = median_bandwidth(&p2, &q2, 1e-8);
        assert_eq!(bw2, 1e-8);
        assert!(flag2);
    }

    #[test]
    fn median_bandwidth_three_point_multiset() {
        // Three unit vectors built by Cholesky so that the pairwise d^2
        // multiset is exactly {0.1, 0.4, 0.9}.
        let c_ab = 1.0 - 0.1f64.sqrt();
        let c_ac = 1.0 - 0.4f64.sqrt();
        let c_bc = 1.0 - 0.9f64.sqrt();
        let a = Array1::from(vec![1.0, 0.0, 0.0]);
        let b2 = (1.0 - c_ab * c_ab).sqrt();
        let b = Array1::from(vec![c_ab, b2, 0.0]);
        let c1 = c_ac;
        let c2 = (c_bc - c_ac * c_ab) / b2;
        let c3 = (1.0 - c1 * c1 - c2 * c2).sqrt();
        let c = Array1::from(vec![c1, c2, c3]);
        for (x, y, want) in [(&a, &b, 0.1), (&a, &c, 0.4), (&b, &c, 0.9)] {
            assert!((cos_dist_sq(x, y) - want).abs() < 1e-12);
        }
        let p = sample(vec![a, b], vec![0.5, 0.5]);
        let q = sample(vec![c], vec![1.0]);
        let (bw, flag) = median_bandwidth(&p, &q, 1e-8);
        assert!((bw - 0.4).abs() < 1e-12);
        assert!(!flag);
    }

    #[test]
    fn mmd_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_sample(&mut rng, 5, 4);
        let v = mmd_squared_with(&p, &p.clone(), &[0.7]);
        assert!(v < 1e-12, "self-MMD {v}");
    }

    #[test]
    fn mmd_orthogonal_singletons_closed_form() {
        let p = sample(vec![Array1::from(vec![1.0, 0.0])], vec![1.0]);
        let q = sample(vec![Array1::from(vec![0.0, 1.0])], vec![1.0]);
        let v = mmd_squared_with(&p, &q, &[1.0]);
        let want = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        assert!((want - 0.78694).abs() < 1e-5);
    }

    #[test]
    fn mmd_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_sample(&mut rng, 4, 5);
            let q = random_sample(&mut rng, 3, 5);
            let s2 = rng.gen_range(0.05..2.0);
            let fast = mmd_squared_with(&p, &q, &[s2]);
            let slow = brute_force(&p, &q, s2).max(0.0);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn mmd_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_sample(&mut rng, 6, 4);
            let q = random_sample(&mut rng, 4, 4);
            let ab = mmd_squared_with(&p, &q, &[0.3, 1.1]);
            let ba = mmd_squared_with(&q, &p, &[0.3, 1.1]);
            assert_eq!(ab.to_bits(), ba.to_bits(), "symmetry must be bitwise");
        }
    }

    #[test]
    fn mmd_finite_across_bandwidth_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_sample(&mut rng, 4, 3);
        let q = random_sample(&mut rng, 5, 3);
        for s2 in [1e-8, 1e-3, 1.0, 1e6] {
            let v = mmd_squared_with(&p, &q, &[s2]);
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn kernel_config_validation() {
        let p = sample(vec![Array1::from(vec![1.0, 0.0])], vec![1.0]);
        let q = sample(vec![Array1::from(vec![0.0, 1.0])], vec![1.0]);
        let bad = KernelConfig { mode: BandwidthMode::Fixed(0.0), epsilon: 1e-8 };
        assert!(matches!(bad.resolve(&p, &q), Err(MmdError::BadKernel(_))));
        let bad2 = KernelConfig { mode: BandwidthMode::Multi(vec![]), epsilon: 1e-8 };
        assert!(bad2.resolve(&p, &q).is_err());
        let multi = KernelConfig { mode: BandwidthMode::Multi(vec![0.5, 2.0]), epsilon: 1e-8 };
        assert_eq!(multi.resolve(&p, &q).unwrap().0, vec![0.5, 2.0]);
    }

    // ---- topic distribution fixtures ----

    fn table_for(tokens: &[&str], dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = EmbeddingTable::new(dim);
        for t in tokens {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            table.insert_word(t, v);
        }
        table
    }

    fn state_with_probs(p1: &[f64], p2: &[f64], k: usize) -> ModelState {
        let config = TrainConfig { k, hidden_dim: 3, ..TrainConfig::default() };
        let mut state = ModelState::init(p1.len(), p2.len(), config).unwrap();
        for (v, &p) in p1.iter().enumerate() {
            for kk in 0..k {
                state.beta1_logits[[v, kk]] = p.ln();
            }
        }
        for (v, &p) in p2.iter().enumerate() {
            for kk in 0..k {
                state.beta2_logits[[v, kk]] = p.ln();
            }
        }
        state
    }

    fn vocab(prefix: &str, n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("{prefix}{i}")).collect()).unwrap()
    }

    #[test]
    fn raw_distribution_normalizes_top_probs() {
        let p1 = [0.3, 0.2, 0.18, 0.17, 0.15];
        let p2 = [0.2, 0.1, 0.09, 0.09, 0.09, 0.09, 0.09, 0.09, 0.09, 0.07];
        let state = state_with_probs(&p1, &p2, 2);
        let v1 = vocab("a", 5);
        let v2 = vocab("b", 10);
        let tokens: Vec<String> = v1.tokens().iter().chain(v2.tokens().iter()).cloned().collect();
        let refs: Vec<&str> = tokens.iter().map(|s| s.as_str()).collect();
        let table = table_for(&refs, 4, 10);
        let support = topic_support(&state, &v1, &v2, &table, 0, 2);
        let raw = build_raw_distribution(&state, &v1, &v2, &support).unwrap();
        assert_eq!(raw.labels, vec!["a0", "a1", "b0", "b1"]);
        // Each language renormalizes over its own top words and carries half
        // the mass: L1 (0.3, 0.2) -> (0.3, 0.2); L2 (0.2, 0.1) -> (1/3, 1/6).
        let want = [0.3, 0.2, 1.0 / 3.0, 1.0 / 6.0];
        for (w, e) in raw.weights.iter().zip(want) {
            assert!((w - e).abs() < 1e-9, "{w} vs {e}");
        }
        let total: f64 = raw.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raw_distribution_drops_missing_embeddings() {
        let p1 = [0.3, 0.2, 0.18, 0.17, 0.15];
        let p2 = [0.2, 0.1, 0.09, 0.09, 0.09, 0.09, 0.09, 0.09, 0.09, 0.07];
        let state = state_with_probs(&p1, &p2, 2);
        let v1 = vocab("a", 5);
        let v2 = vocab("b", 10);
        // "b0" has no embedding.
        let table = table_for(&["a0", "a1", "b1"], 4, 11);
        let support = topic_support(&state, &v1, &v2, &table, 0, 2);
        let raw = build_raw_distribution(&state, &v1, &v2, &support).unwrap();
        assert_eq!(raw.labels, vec!["a0", "a1", "b1"]);
        // The surviving L2 word alone carries that language's half.
        for (w, e) in raw.weights.iter().zip([0.3, 0.2, 0.5]) {
            assert!((w - e).abs() < 1e-9);
        }

        let empty = table_for(&["zz"], 4, 12);
        let support2 = topic_support(&state, &v1, &v2, &empty, 0, 2);
        assert!(matches!(
            build_raw_distribution(&state, &v1, &v2, &support2),
            Err(MmdError::EmptySupport(_))
        ));
    }

    fn refined(topic: usize, l1: &[(&str, u32)], l2: &[(&str, u32)]) -> RefinedTopic {
        RefinedTopic {
            topic_id: topic,
            votes_l1: l1.iter().map(|(t, c)| (t.to_string(), *c)).collect(),
            votes_l2: l2.iter().map(|(t, c)| (t.to_string(), *c)).collect(),
            selected_l1: l1.iter().map(|(t, _)| t.to_string()).collect(),
            selected_l2: l2.iter().map(|(t, _)| t.to_string()).collect(),
            short_l1: false,
            short_l2: false,
        }
    }

    #[test]
    fn refined_distribution_count_normalization() {
        let table = table_for(&["song", "album", "yinyue"], 4, 13);
        let r = refined(0, &[("song", 5), ("album", 3)], &[("yinyue", 5)]);
        let target = build_refined_distribution(&r, &table).unwrap();
        let by_label: std::collections::BTreeMap<&str, f64> = target
            .labels
            .iter()
            .zip(&target.weights)
            .map(|(l, w)| (l.as_str(), *w))
            .collect();
        // L1 counts (5, 3) split that language's half as (5/16, 3/16); the
        // sole L2 word takes the other half.
        assert!((by_label["song"] - 5.0 / 16.0).abs() < 1e-12);
        assert!((by_label["album"] - 3.0 / 16.0).abs() < 1e-12);
        assert!((by_label["yinyue"] - 0.5).abs() < 1e-12);

        let single = refined(1, &[("song", 7)], &[]);
        let t2 = build_refined_distribution(&single, &table).unwrap();
        assert_eq!(t2.weights, vec![1.0]);

        let equal = refined(2, &[("song", 4), ("album", 4)], &[("yinyue", 4)]);
        let t3 = build_refined_distribution(&equal, &table).unwrap();
        let by_label: std::collections::BTreeMap<&str, f64> = t3
            .labels
            .iter()
            .zip(&t3.weights)
            .map(|(l, w)| (l.as_str(), *w))
            .collect();
        assert!((by_label["song"] - 0.25).abs() < 1e-12);
        assert!((by_label["album"] - 0.25).abs() < 1e-12);
        assert!((by_label["yinyue"] - 0.5).abs() < 1e-12);
    }

    // ---- loss and gradient ----

    fn loss_fixture() -> (ModelState, Vocabulary, Vocabulary, EmbeddingTable, Vec<Option<RefinedTopic>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let config = TrainConfig { k: 2, hidden_dim: 4, top_n: 3, ..TrainConfig::default() };
        let mut state = ModelState::init(8, 8, config).unwrap();
        for v in 0..8 {
            for k in 0..2 {
                state.beta1_logits[[v, k]] = rng.gen_range(-1.0..1.0);
                state.beta2_logits[[v, k]] = rng.gen_range(-1.0..1.0);
            }
        }
        let v1 = vocab("a", 8);
        let v2 = vocab("b", 8);
        let tokens: Vec<String> = v1.tokens().iter().chain(v2.tokens().iter()).cloned().collect();
        let refs: Vec<&str> = tokens.iter().map(|s| s.as_str()).collect();
        let table = table_for(&refs, 4, 22);
        let refined_topics = vec![
            Some(refined(0, &[("a0", 5), ("a3", 2)], &[("b1", 4)])),
            Some(refined(1, &[("a5", 3)], &[("b6", 3), ("b2", 1)])),
        ];
        (state, v1, v2, table, refined_topics)
    }

    #[test]
    fn loss_is_mean_of_per_topic_mmd() {
        let (state, v1, v2, table, refined_topics) = loss_fixture();
        let kernel = KernelConfig::default();
        let (loss, _, bws) =
            mmd_loss(&state, &v1, &v2, &table, &refined_topics, &kernel, 3).unwrap();
        let supports = topic_supports(&state, &v1, &v2, &table, 3);
        let mut manual = 0.0;
        for k in 0..2 {
            let raw = build_raw_distribution(&state, &v1, &v2, &supports[k]).unwrap();
            let target =
                build_refined_distribution(refined_topics[k].as_ref().unwrap(), &table).unwrap();
            manual += mmd_squared_with(&raw, &target, bws[k].as_ref().unwrap()) / 2.0;
        }
        assert!((loss - manual).abs() < 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn identical_target_gives_zero_loss_and_gradient() {
        let (state, v1, v2, table, _) = loss_fixture();
        let supports = topic_supports(&state, &v1, &v2, &table, 3);
        let targets: Vec<Option<WeightedSample>> = supports
            .iter()
            .map(|s| Some(build_raw_distribution(&state, &v1, &v2, s).unwrap()))
            .collect();
        let bws = vec![Some(vec![0.5]); 2];
        let (loss, grads, active) =
            mmd_loss_frozen(&state, &v1, &v2, &supports, &targets, &bws);
        assert_eq!(active, 2);
        assert!(loss < 1e-15);
        assert!(grads.l1.iter().all(|g| g.abs() < 1e-12));
        assert!(grads.l2.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn unrefined_topics_contribute_zero() {
        let (state, v1, v2, table, mut refined_topics) = loss_fixture();
        refined_topics[1] = None;
        let kernel = KernelConfig::default();
        let (loss_partial, _, _) =
            mmd_loss(&state, &v1, &v2, &table, &refined_topics, &kernel, 3).unwrap();
        let supports = topic_supports(&state, &v1, &v2, &table, 3);
        let raw = build_raw_distribution(&state, &v1, &v2, &supports[0]).unwrap();
        let target =
            build_refined_distribution(refined_topics[0].as_ref().unwrap(), &table).unwrap();
        let expect = mmd_squared(&raw, &target, &kernel).unwrap() / 2.0;
        assert!((loss_partial - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut state, v1, v2, table, refined_topics) = loss_fixture();
        let supports = topic_supports(&state, &v1, &v2, &table, 3);
        let targets: Vec<Option<WeightedSample>> = refined_topics
            .iter()
            .map(|r| Some(build_refined_distribution(r.as_ref().unwrap(), &table).unwrap()))
            .collect();
        let bws: Vec<Option<Vec<f64>>> = (0..2)
            .map(|k| {
                let raw = build_raw_distribution(&state, &v1, &v2, &supports[k]).unwrap();
                let (bw, _) = median_bandwidth(&raw, targets[k].as_ref().unwrap(), 1e-8);
                Some(vec![bw])
            })
            .collect();
        let (_, grads, _) = mmd_loss_frozen(&state, &v1, &v2, &supports, &targets, &bws);
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut fd = Vec::new();
        for lang in [Lang::L1, Lang::L2] {
            for v in 0..8 {
                for k in 0..2 {
                    let a = match lang {
                        Lang::L1 => grads.l1[[v, k]],
                        Lang::L2 => grads.l2[[v, k]],
                    };
                    analytic.push(a);
                    let logits = match lang {
                        Lang::L1 => &mut state.beta1_logits,
                        Lang::L2 => &mut state.beta2_logits,
                    };
                    let orig = logits[[v, k]];
                    logits[[v, k]] = orig + h;
                    let (lp, _, _) =
                        mmd_loss_frozen(&state, &v1, &v2, &supports, &targets, &bws);
                    let logits = match lang {
                        Lang::L1 => &mut state.beta1_logits,
                        Lang::L2 => &mut state.beta2_logits,
                    };
                    logits[[v, k]] = orig - h;
                    let (lm, _, _) =
                        mmd_loss_frozen(&state, &v1, &v2, &supports, &targets, &bws);
                    let logits = match lang {
                        Lang::L1 => &mut state.beta1_logits,
                        Lang::L2 => &mut state.beta2_logits,
                    };
                    logits[[v, k]] = orig;
                    fd.push((lp - lm) / (2.0 * h));
                }
            }
        }
        let num: f64 =
            analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(num / den < 1e-5, "relative gradient error {}", num / den);
    }
}
