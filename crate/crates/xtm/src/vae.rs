//! Phase-1 bilingual variational topic model.
//!
//! Each language has its own input layer; a shared softplus stack produces
//! Gaussian posterior parameters, a reparameterized sample is softmaxed into
//! topic proportions, and per-language logit matrices decode them back into
//! word distributions. Gradients are hand-written and checked against finite
//! differences in the test suite.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowDocument, Corpus, Lang, Vocabulary};
use crate::math::{sigmoid, softplus, LOG_FLOOR};

/// Clamp bounds for the log-variance head.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("non-finite activation in encoder")]
    NonFiniteActivation,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

/// All training knobs for both phases.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Topic count K.
    pub k: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Decoder top-word list length used for the raw MMD support.
    pub top_n: usize,
    /// Refined word-set size per language.
    pub top_m: usize,
    /// Self-consistency rounds per refinement step.
    pub rounds: usize,
    /// Epochs between refinement steps.
    pub refine_every: usize,
    pub lambda_mmd: f64,
    pub lambda_qa: f64,
    /// Softmax temperature for similarity targets.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 20,
            hidden_dim: 200,
            epochs: 30,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 42,
            top_n: 15,
            top_m: 15,
            rounds: 5,
            refine_every: 8,
            lambda_mmd: 20000.0,
            lambda_qa: 200.0,
            tau: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        if self.k < 2 {
            return Err(VaeError::BadConfig("topic count must be >= 2".into()));
        }
        if self.hidden_dim == 0 {
            return Err(VaeError::BadConfig("hidden_dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(VaeError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(VaeError::BadConfig("learning_rate must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(VaeError::BadConfig("tau must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(VaeError::BadConfig("rounds must be >= 1".into()));
        }
        if self.refine_every == 0 {
            return Err(VaeError::BadConfig("refine_every must be >= 1".into()));
        }
        if self.top_n == 0 || self.top_m == 0 {
            return Err(VaeError::BadConfig("top_n and top_m must be >= 1".into()));
        }
        Ok(())
    }
}

/// Model parameters for both languages plus the training configuration.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TrainConfig,
    /// Input layer, language 1: |V1| x H weights plus H bias.
    pub w_in1: Array2<f64>,
    pub b_in1: Array1<f64>,
    pub w_in2: Array2<f64>,
    pub b_in2: Array1<f64>,
    /// Shared hidden layer H x H.
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    /// Posterior heads H -> K.
    pub w_mu: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub w_lv: Array2<f64>,
    pub b_lv: Array1<f64>,
    /// Free decoder logits |V_l| x K; column softmax gives the topic-word
    /// distribution.
    pub beta1_logits: Array2<f64>,
    pub beta2_logits: Array2<f64>,
    pub seed: u64,
}

impl ModelState {
    /// Freshly initialized parameters: small symmetric uniform weights,
    /// zero biases.
    pub fn init(v1: usize, v2: usize, config: TrainConfig) -> Result<Self, VaeError> {
        config.validate()?;
        if v1 == 0 || v2 == 0 {
            return Err(VaeError::BadConfig("empty vocabulary".into()));
        }
        let (k, h) = (config.k, config.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
        };
        let state = ModelState {
            seed: config.seed,
            w_in1: uniform(v1, h, 1.0 / (v1 as f64).sqrt()),
            b_in1: Array1::zeros(h),
            w_in2: uniform(v2, h, 1.0 / (v2 as f64).sqrt()),
            b_in2: Array1::zeros(h),
            w_h: uniform(h, h, 1.0 / (h as f64).sqrt()),
            b_h: Array1::zeros(h),
            w_mu: uniform(k, h, 1.0 / (h as f64).sqrt()),
            b_mu: Array1::zeros(k),
            w_lv: uniform(k, h, 1.0 / (h as f64).sqrt()),
            b_lv: Array1::zeros(k),
            beta1_logits: uniform(v1, k, 0.05),
            beta2_logits: uniform(v2, k, 0.05),
            config,
        };
        Ok(state)
    }

    pub fn vocab_size(&self, lang: Lang) -> usize {
        match lang {
            Lang::L1 => self.w_in1.nrows(),
            Lang::L2 => self.w_in2.nrows(),
        }
    }

    pub fn beta_logits(&self, lang: Lang) -> &Array2<f64> {
        match lang {
            Lang::L1 => &self.beta1_logits,
            Lang::L2 => &self.beta2_logits,
        }
    }

    /// Column-softmax view of the decoder logits: each column is a word
    /// distribution over the language's vocabulary.
    pub fn beta_probs(&self, lang: Lang) -> Array2<f64> {
        let logits = self.beta_logits(lang);
        let mut out = Array2::zeros(logits.raw_dim());
        for k in 0..logits.ncols() {
            let col: Vec<f64> = logits.column(k).to_vec();
            let probs = crate::math::softmax(&col);
            for (v, p) in probs.into_iter().enumerate() {
                out[[v, k]] = p;
            }
        }
        out
    }

    fn slices(&self) -> [&[f64]; 12] {
        [
            self.w_in1.as_slice().unwrap(),
            self.b_in1.as_slice().unwrap(),
            self.w_in2.as_slice().unwrap(),
            self.b_in2.as_slice().unwrap(),
            self.w_h.as_slice().unwrap(),
            self.b_h.as_slice().unwrap(),
            self.w_mu.as_slice().unwrap(),
            self.b_mu.as_slice().unwrap(),
            self.w_lv.as_slice().unwrap(),
            self.b_lv.as_slice().unwrap(),
            self.beta1_logits.as_slice().unwrap(),
            self.beta2_logits.as_slice().unwrap(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.w_in1.as_slice_mut().unwrap(),
            self.b_in1.as_slice_mut().unwrap(),
            self.w_in2.as_slice_mut().unwrap(),
            self.b_in2.as_slice_mut().unwrap(),
            self.w_h.as_slice_mut().unwrap(),
            self.b_h.as_slice_mut().unwrap(),
            self.w_mu.as_slice_mut().unwrap(),
            self.b_mu.as_slice_mut().unwrap(),
            self.w_lv.as_slice_mut().unwrap(),
            self.b_lv.as_slice_mut().unwrap(),
            self.beta1_logits.as_slice_mut().unwrap(),
            self.beta2_logits.as_slice_mut().unwrap(),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Reads the flat parameter vector entry `i` (fixed field order).
    pub fn param(&self, mut i: usize) -> f64 {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    /// Writes the flat parameter vector entry `i` (fixed field order).
    pub fn set_param(&mut self, mut i: usize, value: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat copy of all parameters, matching the [`param`] index order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for s in self.slices() {
            out.extend_from_slice(s);
        }
        out
    }
}

/// Gradient accumulator mirroring the parameter shapes of a [`ModelState`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_in1: Array2<f64>,
    pub b_in1: Array1<f64>,
    pub w_in2: Array2<f64>,
    pub b_in2: Array1<f64>,
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    pub w_mu: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub w_lv: Array2<f64>,
    pub b_lv: Array1<f64>,
    pub beta1_logits: Array2<f64>,
    pub beta2_logits: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Gradients {
            w_in1: Array2::zeros(state.w_in1.raw_dim()),
            b_in1: Array1::zeros(state.b_in1.raw_dim()),
            w_in2: Array2::zeros(state.w_in2.raw_dim()),
            b_in2: Array1::zeros(state.b_in2.raw_dim()),
            w_h: Array2::zeros(state.w_h.raw_dim()),
            b_h: Array1::zeros(state.b_h.raw_dim()),
            w_mu: Array2::zeros(state.w_mu.raw_dim()),
            b_mu: Array1::zeros(state.b_mu.raw_dim()),
            w_lv: Array2::zeros(state.w_lv.raw_dim()),
            b_lv: Array1::zeros(state.b_lv.raw_dim()),
            beta1_logits: Array2::zeros(state.beta1_logits.raw_dim()),
            beta2_logits: Array2::zeros(state.beta2_logits.raw_dim()),
        }
    }

    pub fn beta_mut(&mut self, lang: Lang) -> &mut Array2<f64> {
        match lang {
            Lang::L1 => &mut self.beta1_logits,
            Lang::L2 => &mut self.beta2_logits,
        }
    }

    fn slices(&self) -> [&[f64]; 12] {
        [
            self.w_in1.as_slice().unwrap(),
            self.b_in1.as_slice().unwrap(),
            self.w_in2.as_slice().unwrap(),
            self.b_in2.as_slice().unwrap(),
            self.w_h.as_slice().unwrap(),
            self.b_h.as_slice().unwrap(),
            self.w_mu.as_slice().unwrap(),
            self.b_mu.as_slice().unwrap(),
            self.w_lv.as_slice().unwrap(),
            self.b_lv.as_slice().unwrap(),
            self.beta1_logits.as_slice().unwrap(),
            self.beta2_logits.as_slice().unwrap(),
        ]
    }

    /// Flat copy in the same index order as [`ModelState::param`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in self.slices() {
            out.extend_from_slice(s);
        }
        out
    }
}

// ===== forward / backward =====

/// Per-document forward pass cache.
pub struct Forward {
    pub indices: Vec<usize>,
    pub counts: Vec<f64>,
    pub freqs: Vec<f64>,
    pub total: f64,
    a1: Array1<f64>,
    h1: Array1<f64>,
    a2: Array1<f64>,
    h2: Array1<f64>,
    pub mu: Array1<f64>,
    lv_raw: Array1<f64>,
    pub logvar: Array1<f64>,
    pub noise: Array1<f64>,
    pub z: Array1<f64>,
    pub theta: Array1<f64>,
    recon_probs: Array1<f64>,
    pub recon: f64,
    pub kl: f64,
}

fn input_layer(state: &ModelState, lang: Lang) -> (&Array2<f64>, &Array1<f64>) {
    match lang {
        Lang::L1 => (&state.w_in1, &state.b_in1),
        Lang::L2 => (&state.w_in2, &state.b_in2),
    }
}

/// Full forward pass for one document with caller-supplied noise.
pub fn forward_doc(
    state: &ModelState,
    doc: &BowDocument,
    noise: &Array1<f64>,
) -> Result<Forward, VaeError> {
    let (w_in, b_in) = input_layer(state, doc.lang);
    let indices: Vec<usize> = doc.bow.keys().map(|&i| i as usize).collect();
    let counts: Vec<f64> = doc.bow.values().map(|&c| c as f64).collect();
    let total: f64 = counts.iter().sum();
    let freqs: Vec<f64> = counts.iter().map(|c| c / total).collect();

    let mut a1 = b_in.clone();
    for (&v, &f) in indices.iter().zip(&freqs) {
        a1.scaled_add(f, &w_in.row(v));
    }
    let h1 = a1.mapv(softplus);
    let a2 = state.w_h.dot(&h1) + &state.b_h;
    let h2 = a2.mapv(softplus);
    let mu = state.w_mu.dot(&h2) + &state.b_mu;
    let lv_raw = state.w_lv.dot(&h2) + &state.b_lv;
    let logvar = lv_raw.mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(VaeError::NonFiniteActivation);
    }
    let z = &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * noise);
    let theta = Array1::from(crate::math::softmax(z.as_slice().unwrap()));

    let beta = state.beta_logits(doc.lang);
    let logits = beta.dot(&theta);
    let recon_probs = Array1::from(crate::math::softmax(logits.as_slice().unwrap()));
    let recon: f64 = indices
        .iter()
        .zip(&counts)
        .map(|(&v, &c)| -c * recon_probs[v].max(LOG_FLOOR).ln())
        .sum();
    let kl: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();

    Ok(Forward {
        indices,
        counts,
        freqs,
        total,
        a1,
        h1,
        a2,
        h2,
        mu,
        lv_raw,
        logvar,
        noise: noise.clone(),
        z,
        theta,
        recon_probs,
        recon,
        kl,
    })
}

/// Backpropagates one document's reconstruction + KL loss (optionally plus an
/// extra dL/dtheta term) into `grads`, scaled by `weight`.
pub fn backward_doc(
    state: &ModelState,
    doc: &BowDocument,
    fwd: &Forward,
    extra_dtheta: Option<&Array1<f64>>,
    weight: f64,
    grads: &mut Gradients,
) {
    let k = state.config.k;
    let beta = state.beta_logits(doc.lang);

    // Reconstruction: dL/dlogits = n * p - x over the vocabulary.
    let mut dlogits = fwd.recon_probs.mapv(|p| fwd.total * p);
    for (&v, &c) in fwd.indices.iter().zip(&fwd.counts) {
        dlogits[v] -= c;
    }
    let mut dtheta = beta.t().dot(&dlogits);
    if let Some(extra) = extra_dtheta {
        dtheta += extra;
    }
    let beta_grad = grads.beta_mut(doc.lang);
    for v in 0..beta.nrows() {
        beta_grad.row_mut(v).scaled_add(weight * dlogits[v], &fwd.theta);
    }

    // Softmax backprop into z.
    let inner: f64 = fwd.theta.iter().zip(dtheta.iter()).map(|(t, g)| t * g).sum();
    let dz: Array1<f64> =
        fwd.theta.iter().zip(dtheta.iter()).map(|(t, g)| t * (g - inner)).collect();

    // z = mu + exp(logvar/2) * noise, plus the KL closed form.
    let mut dmu = dz.clone();
    let mut dlv = Array1::zeros(k);
    for i in 0..k {
        dlv[i] = dz[i] * fwd.noise[i] * 0.5 * (0.5 * fwd.logvar[i]).exp();
        dmu[i] += fwd.mu[i];
        dlv[i] += 0.5 * (fwd.logvar[i].exp() - 1.0);
        // The clamp gates gradient flow at the boundary.
        if fwd.lv_raw[i].abs() >= LOGVAR_CLAMP {
            dlv[i] = 0.0;
        }
    }

    // Heads.
    for i in 0..k {
        grads.w_mu.row_mut(i).scaled_add(weight * dmu[i], &fwd.h2);
        grads.w_lv.row_mut(i).scaled_add(weight * dlv[i], &fwd.h2);
    }
    grads.b_mu.scaled_add(weight, &dmu);
    grads.b_lv.scaled_add(weight, &dlv);
    let dh2 = state.w_mu.t().dot(&dmu) + state.w_lv.t().dot(&dlv);

    // Shared hidden layer.
    let da2: Array1<f64> =
        dh2.iter().zip(fwd.a2.iter()).map(|(g, &a)| g * sigmoid(a)).collect();
    for i in 0..da2.len() {
        grads.w_h.row_mut(i).scaled_add(weight * da2[i], &fwd.h1);
    }
    grads.b_h.scaled_add(weight, &da2);
    let dh1 = state.w_h.t().dot(&da2);

    // Input layer (sparse rows only).
    let da1: Array1<f64> =
        dh1.iter().zip(fwd.a1.iter()).map(|(g, &a)| g * sigmoid(a)).collect();
    let (w_in_grad, b_in_grad) = match doc.lang {
        Lang::L1 => (&mut grads.w_in1, &mut grads.b_in1),
        Lang::L2 => (&mut grads.w_in2, &mut grads.b_in2),
    };
    for (&v, &f) in fwd.indices.iter().zip(&fwd.freqs) {
        w_in_grad.row_mut(v).scaled_add(weight * f, &da1);
    }
    b_in_grad.scaled_add(weight, &da1);
}

// ===== public single-op views =====

/// Posterior parameters for one document (no sampling).
pub fn encode(doc: &BowDocument, state: &ModelState) -> Result<(Array1<f64>, Array1<f64>), VaeError> {
    let fwd = forward_doc(state, doc, &Array1::zeros(state.config.k))?;
    Ok((fwd.mu, fwd.logvar))
}

/// z = mu + exp(logvar / 2) * noise.
pub fn reparameterize(mu: &Array1<f64>, logvar: &Array1<f64>, noise: &Array1<f64>) -> Array1<f64> {
    mu + &(logvar.mapv(|v| (0.5 * v).exp()) * noise)
}

/// Topic proportions theta = softmax(z).
pub fn theta_from_z(z: &Array1<f64>) -> Array1<f64> {
    Array1::from(crate::math::softmax(z.as_slice().unwrap()))
}

/// Reconstruction term -x^T log softmax(beta theta) for one document.
pub fn recon_loss(doc: &BowDocument, theta: &Array1<f64>, state: &ModelState) -> f64 {
    let beta = state.beta_logits(doc.lang);
    let logits = beta.dot(theta);
    let probs = crate::math::softmax(logits.as_slice().unwrap());
    doc.bow
        .iter()
        .map(|(&v, &c)| -(c as f64) * probs[v as usize].max(LOG_FLOOR).ln())
        .sum()
}

/// Closed-form KL between N(mu, diag(exp(logvar))) and the standard normal.
pub fn kl_gaussian(mu: &Array1<f64>, logvar: &Array1<f64>) -> f64 {
    mu.iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Deterministic document-topic proportions from the posterior mean.
pub fn infer_theta(state: &ModelState, doc: &BowDocument) -> Result<Array1<f64>, VaeError> {
    let (mu, _) = encode(doc, state)?;
    Ok(theta_from_z(&mu))
}

/// Mean reconstruction + KL loss over a batch, with gradients. Noise vectors
/// are supplied by the caller so the computation is pure and checkable.
pub fn phase1_batch_loss(
    state: &ModelState,
    batch: &[&BowDocument],
    noises: &[Array1<f64>],
) -> Result<(f64, Gradients), VaeError> {
    assert_eq!(batch.len(), noises.len());
    let mut grads = Gradients::zeros_like(state);
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (doc, noise) in batch.iter().zip(noises) {
        let fwd = forward_doc(state, doc, noise)?;
        loss += weight * (fwd.recon + fwd.kl);
        backward_doc(state, doc, &fwd, None, weight, &mut grads);
    }
    Ok((loss, grads))
}

// ===== optimizer =====

/// Adam-style adaptive optimizer over the flat parameter vector.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        let grad_slices = grads.slices();
        for (pi, params) in state.slices_mut().into_iter().enumerate() {
            let gs = grad_slices[pi];
            for (j, p) in params.iter_mut().enumerate() {
                let g = gs[j];
                let i = offset + j;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            offset += gs.len();
        }
    }
}

// ===== training =====

/// Draws one standard-normal noise vector per document.
pub fn draw_noises(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Array1<f64>> {
    (0..n)
        .map(|_| Array1::from_iter((0..k).map(|_| rng.sample::<f64, _>(StandardNormal))))
        .collect()
}

/// Deterministic Fisher-Yates shuffle of document positions.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Trains the phase-1 model; returns the state and per-epoch mean losses.
pub fn train_phase1(
    corpus: &Corpus,
    config: TrainConfig,
) -> Result<(ModelState, Vec<f64>), VaeError> {
    let mut state = ModelState::init(corpus.vocab1.len(), corpus.vocab2.len(), config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed.wrapping_add(1));
    let mut adam = Adam::new(state.config.learning_rate, state.n_params());
    let mut epoch_losses = Vec::with_capacity(state.config.epochs);
    for epoch in 0..state.config.epochs {
        let order = shuffled_indices(&mut rng, corpus.docs.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(state.config.batch_size).enumerate() {
            let batch: Vec<&BowDocument> = chunk.iter().map(|&i| &corpus.docs[i]).collect();
            let noises = draw_noises(&mut rng, batch.len(), state.config.k);
            let (loss, grads) = phase1_batch_loss(&state, &batch, &noises)?;
            if !loss.is_finite() {
                return Err(VaeError::NonFiniteLoss { epoch, batch: batch_no });
            }
            adam.step(&mut state, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((state, epoch_losses))
}

// ===== top words =====

/// Word indices of the top-N beta entries for one topic, ties broken by
/// ascending vocabulary index.
pub fn top_word_indices(state: &ModelState, lang: Lang, topic: usize, n: usize) -> Vec<usize> {
    let logits = state.beta_logits(lang);
    let mut order: Vec<usize> = (0..logits.nrows()).collect();
    order.sort_by(|&a, &b| {
        logits[[b, topic]]
            .partial_cmp(&logits[[a, topic]])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

/// Top-N tokens of one topic in one language.
pub fn top_words(
    state: &ModelState,
    vocab: &Vocabulary,
    lang: Lang,
    topic: usize,
    n: usize,
) -> Vec<String> {
    top_word_indices(state, lang, topic, n)
        .into_iter()
        .map(|v| vocab.token(v as u32).unwrap_or_default().to_string())
        .collect()
}

// ===== checkpoints =====

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: TrainConfig,
    encoder1: (Vec<Vec<f64>>, Vec<f64>),
    encoder2: (Vec<Vec<f64>>, Vec<f64>),
    shared: (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>),
    beta1_logits: Vec<Vec<f64>>,
    beta2_logits: Vec<Vec<f64>>,
    seed: u64,
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, what: &str) -> Result<Array2<f64>, VaeError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(VaeError::BadCheckpoint(format!("ragged or empty matrix for {what}")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| VaeError::BadCheckpoint(format!("{what}: {e}")))
}

/// Writes the model as a JSON checkpoint (nested row-major arrays).
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), VaeError> {
    let file = CheckpointFile {
        config: state.config.clone(),
        encoder1: (to_rows(&state.w_in1), state.b_in1.to_vec()),
        encoder2: (to_rows(&state.w_in2), state.b_in2.to_vec()),
        shared: (
            to_rows(&state.w_h),
            state.b_h.to_vec(),
            to_rows(&state.w_mu),
            state.b_mu.to_vec(),
            to_rows(&state.w_lv),
            state.b_lv.to_vec(),
        ),
        beta1_logits: to_rows(&state.beta1_logits),
        beta2_logits: to_rows(&state.beta2_logits),
        seed: state.seed,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| VaeError::BadCheckpoint(format!("serialize: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

/// Loads a JSON checkpoint and validates its shapes.
pub fn load_checkpoint(path: &Path) -> Result<ModelState, VaeError> {
    let data = fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&data).map_err(|e| VaeError::BadCheckpoint(e.to_string()))?;
    file.config.validate()?;
    let (k, h) = (file.config.k, file.config.hidden_dim);
    let state = ModelState {
        w_in1: from_rows(file.encoder1.0, "encoder1 weights")?,
        b_in1: Array1::from(file.encoder1.1),
        w_in2: from_rows(file.encoder2.0, "encoder2 weights")?,
        b_in2: Array1::from(file.encoder2.1),
        w_h: from_rows(file.shared.0, "shared weights")?,
        b_h: Array1::from(file.shared.1),
        w_mu: from_rows(file.shared.2, "mu head")?,
        b_mu: Array1::from(file.shared.3),
        w_lv: from_rows(file.shared.4, "logvar head")?,
        b_lv: Array1::from(file.shared.5),
        beta1_logits: from_rows(file.beta1_logits, "beta1 logits")?,
        beta2_logits: from_rows(file.beta2_logits, "beta2 logits")?,
        seed: file.seed,
        config: file.config,
    };
    let checks = [
        (state.w_in1.ncols(), h, "encoder1 width"),
        (state.w_in2.ncols(), h, "encoder2 width"),
        (state.w_h.nrows(), h, "shared rows"),
        (state.w_h.ncols(), h, "shared cols"),
        (state.w_mu.nrows(), k, "mu rows"),
        (state.w_mu.ncols(), h, "mu cols"),
        (state.w_lv.nrows(), k, "logvar rows"),
        (state.beta1_logits.ncols(), k, "beta1 cols"),
        (state.beta2_logits.ncols(), k, "beta2 cols"),
        (state.b_in1.len(), h, "encoder1 bias"),
        (state.b_mu.len(), k, "mu bias"),
    ];
    for (got, want, what) in checks {
        if got != want {
            return Err(VaeError::BadCheckpoint(format!("{what}: {got} != {want}")));
        }
    }
    if state.to_flat().iter().any(|v| !v.is_finite()) {
        return Err(VaeError::BadCheckpoint("non-finite parameter".into()));
    }
    Ok(state)
}

// ===== tests =====

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn doc(lang: Lang, entries: &[(u32, u32)]) -> BowDocument {
        BowDocument {
            id: format!("{lang:?}-{entries:?}"),
            lang,
            bow: entries.iter().copied().collect::<BTreeMap<_, _>>(),
            label: None,
            pair_id: None,
        }
    }

    fn tiny_config(k: usize, h: usize) -> TrainConfig {
        TrainConfig {
            k,
            hidden_dim: h,
            epochs: 5,
            batch_size: 4,
            learning_rate: 1e-2,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn zeroed_state(v1: usize, v2: usize, k: usize, h: usize) -> ModelState {
        let mut s = ModelState::init(v1, v2, tiny_config(k, h)).unwrap();
        let n = s.n_params();
        for i in 0..n {
            s.set_param(i, 0.0);
        }
        s
    }

    #[test]
    fn encode_all_zero_weights_gives_zero_posterior() {
        let s = zeroed_state(6, 5, 3, 4);
        let (mu, lv) = encode(&doc(Lang::L1, &[(0, 2), (3, 1)]), &s).unwrap();
        assert!(mu.iter().all(|&v| v == 0.0));
        assert!(lv.iter().all(|&v| v == 0.0));
        // Routing: an L2 document works against the L2 input layer.
        let (mu2, _) = encode(&doc(Lang::L2, &[(4, 1)]), &s).unwrap();
        assert_eq!(mu2.len(), 3);
    }

    #[test]
    fn encode_is_pure() {
        let s = ModelState::init(8, 8, tiny_config(3, 4)).unwrap();
        let d = doc(Lang::L1, &[(1, 3), (5, 1)]);
        let (m1, l1) = encode(&d, &s).unwrap();
        let (m2, l2) = encode(&d, &s).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn reparameterize_closed_forms() {
        let mu = Array1::from(vec![0.5, -1.0]);
        let lv = Array1::zeros(2);
        assert_eq!(reparameterize(&mu, &lv, &Array1::zeros(2)), mu);
        let n = Array1::from(vec![1.0, 2.0]);
        let z = reparameterize(&mu, &lv, &n);
        assert!((z[0] - 1.5).abs() < 1e-15 && (z[1] - 1.0).abs() < 1e-15);
        let lv2 = Array1::from(vec![2.0 * 2f64.ln(), 2.0 * 2f64.ln()]);
        let z2 = reparameterize(&Array1::zeros(2), &lv2, &Array1::from(vec![1.0, 1.0]));
        assert!((z2[0] - 2.0).abs() < 1e-12 && (z2[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn theta_from_z_closed_forms() {
        let t = theta_from_z(&Array1::zeros(3));
        assert!(t.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        let t2 = theta_from_z(&Array1::from(vec![2f64.ln(), 0.0]));
        assert!((t2[0] - 2.0 / 3.0).abs() < 1e-12 && (t2[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_uniform_and_linearity() {
        let s = zeroed_state(4, 4, 2, 3);
        let theta = Array1::from(vec![0.5, 0.5]);
        let single = doc(Lang::L1, &[(2, 1)]);
        let loss = recon_loss(&single, &theta, &s);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let double = doc(Lang::L1, &[(2, 2)]);
        assert!((recon_loss(&double, &theta, &s) - 2.0 * loss).abs() < 1e-12);
    }

    #[test]
    fn kl_gaussian_closed_forms_and_nonnegativity() {
        assert_eq!(kl_gaussian(&Array1::zeros(3), &Array1::zeros(3)), 0.0);
        let kl = kl_gaussian(&Array1::from(vec![1.0]), &Array1::from(vec![0.0]));
        assert!((kl - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mu = Array1::from_iter((0..4).map(|_| rng.gen_range(-3.0..3.0)));
            let lv = Array1::from_iter((0..4).map(|_| rng.gen_range(-3.0..3.0)));
            assert!(kl_gaussian(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut state = ModelState::init(20, 20, tiny_config(3, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let docs: Vec<BowDocument> = (0..4)
            .map(|i| {
                let lang = if i % 2 == 0 { Lang::L1 } else { Lang::L2 };
                let entries: Vec<(u32, u32)> =
                    (0..5).map(|_| (rng.gen_range(0..20u32), rng.gen_range(1..4u32))).collect();
                let bow: BTreeMap<u32, u32> = entries.into_iter().collect();
                BowDocument { id: format!("d{i}"), lang, bow, label: None, pair_id: None }
            })
            .collect();
        let batch: Vec<&BowDocument> = docs.iter().collect();
        let noises = draw_noises(&mut rng, batch.len(), 3);
        let (_, grads) = phase1_batch_loss(&state, &batch, &noises).unwrap();
        let analytic = grads.to_flat();
        let h = 1e-4;
        let n = state.n_params();
        let mut fd = vec![0.0; n];
        for i in 0..n {
            let orig = state.param(i);
            state.set_param(i, orig + h);
            let (lp, _) = phase1_batch_loss(&state, &batch, &noises).unwrap();
            state.set_param(i, orig - h);
            let (lm, _) = phase1_batch_loss(&state, &batch, &noises).unwrap();
            state.set_param(i, orig);
            fd[i] = (lp - lm) / (2.0 * h);
        }
        let diff: f64 =
            analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-5, "relative gradient error {}", diff / scale);
    }

    #[test]
    fn full_batch_descent_is_monotone_at_small_step() {
        let mut state = ModelState::init(10, 10, tiny_config(2, 4)).unwrap();
        let docs = vec![
            doc(Lang::L1, &[(0, 3), (1, 1)]),
            doc(Lang::L1, &[(7, 2), (8, 2)]),
            doc(Lang::L2, &[(2, 4)]),
        ];
        let batch: Vec<&BowDocument> = docs.iter().collect();
        let noises: Vec<Array1<f64>> = vec![Array1::zeros(2); 3];
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (loss, grads) = phase1_batch_loss(&state, &batch, &noises).unwrap();
            assert!(loss <= prev + 1e-12, "loss went up: {loss} > {prev}");
            prev = loss;
            let flat = grads.to_flat();
            for (i, g) in flat.iter().enumerate() {
                state.set_param(i, state.param(i) - 1e-3 * g);
            }
        }
    }

    #[test]
    fn train_zero_epochs_returns_init_unchanged() {
        let vocab = |n: usize, p: &str| {
            crate::corpus::Vocabulary::new((0..n).map(|i| format!("{p}{i}")).collect()).unwrap()
        };
        let docs = vec![doc(Lang::L1, &[(0, 1)]), doc(Lang::L2, &[(1, 2)])];
        let corpus = crate::corpus::Corpus::new(docs, vocab(5, "a"), vocab(5, "b")).unwrap();
        let mut config = tiny_config(2, 3);
        config.epochs = 0;
        let (trained, losses) = train_phase1(&corpus, config.clone()).unwrap();
        let init = ModelState::init(5, 5, config).unwrap();
        assert_eq!(trained.to_flat(), init.to_flat());
        assert!(losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let vocab = |n: usize, p: &str| {
            crate::corpus::Vocabulary::new((0..n).map(|i| format!("{p}{i}")).collect()).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<BowDocument> = (0..30)
            .map(|i| {
                let lang = if i % 2 == 0 { Lang::L1 } else { Lang::L2 };
                // Two planted blocks: words 0..5 vs 5..10.
                let block = if (i / 2) % 2 == 0 { 0 } else { 5 };
                let bow: BTreeMap<u32, u32> =
                    (0..4).map(|_| (block + rng.gen_range(0..5u32), 1 + rng.gen_range(0..3u32)))
                        .fold(BTreeMap::new(), |mut m, (v, c)| {
                            *m.entry(v).or_insert(0) += c;
                            m
                        });
                BowDocument { id: format!("d{i}"), lang, bow, label: None, pair_id: None }
            })
            .collect();
        let corpus = crate::corpus::Corpus::new(docs, vocab(10, "a"), vocab(10, "b")).unwrap();
        let mut config = tiny_config(2, 6);
        config.epochs = 40;
        config.batch_size = 10;
        let (s1, losses) = train_phase1(&corpus, config.clone()).unwrap();
        let (s2, _) = train_phase1(&corpus, config).unwrap();
        assert_eq!(s1.to_flat(), s2.to_flat(), "same seed must be bit-identical");
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "final epoch loss {} not below first {}",
            losses.last().unwrap(),
            losses.first().unwrap()
        );
    }

    #[test]
    fn planted_blocks_are_recovered() {
        let vocab = |n: usize, p: &str| {
            crate::corpus::Vocabulary::new((0..n).map(|i| format!("{p}{i}")).collect()).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut docs = Vec::new();
        for i in 0..120 {
            let lang = if i % 2 == 0 { Lang::L1 } else { Lang::L2 };
            let block = if (i / 2) % 2 == 0 { 0u32 } else { 10 };
            let mut bow = BTreeMap::new();
            for _ in 0..12 {
                *bow.entry(block + rng.gen_range(0..10u32)).or_insert(0) += 1;
            }
            docs.push(BowDocument { id: format!("d{i}"), lang, bow, label: None, pair_id: None });
        }
        let corpus = crate::corpus::Corpus::new(docs, vocab(20, "a"), vocab(20, "b")).unwrap();
        let mut config = tiny_config(2, 16);
        config.epochs = 150;
        config.batch_size = 20;
        config.learning_rate = 5e-3;
        let (state, _) = train_phase1(&corpus, config).unwrap();
        for lang in [Lang::L1, Lang::L2] {
            for topic in 0..2 {
                let top = top_word_indices(&state, lang, topic, 5);
                let in_first_block = top.iter().filter(|&&v| v < 10).count();
                assert!(
                    in_first_block == 0 || in_first_block == 5,
                    "topic {topic} {lang:?} top-5 straddles blocks: {top:?}"
                );
            }
        }
    }

    #[test]
    fn top_words_order_and_ties() {
        let mut s = zeroed_state(3, 3, 2, 2);
        s.beta1_logits[[0, 0]] = 0.5f64.ln();
        s.beta1_logits[[1, 0]] = 0.3f64.ln();
        s.beta1_logits[[2, 0]] = 0.2f64.ln();
        assert_eq!(top_word_indices(&s, Lang::L1, 0, 2), vec![0, 1]);
        // All-equal column: ascending vocabulary order.
        assert_eq!(top_word_indices(&s, Lang::L1, 1, 3), vec![0, 1, 2]);
        assert_eq!(top_word_indices(&s, Lang::L2, 0, 3).len(), 3);
    }

    #[test]
    fn beta_probs_columns_sum_to_one() {
        let s = ModelState::init(12, 9, tiny_config(4, 5)).unwrap();
        for lang in [Lang::L1, Lang::L2] {
            let beta = s.beta_probs(lang);
            for k in 0..4 {
                let sum: f64 = beta.column(k).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let s = ModelState::init(7, 6, tiny_config(3, 4)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&s, f.path()).unwrap();
        let loaded = load_checkpoint(f.path()).unwrap();
        assert_eq!(s.to_flat(), loaded.to_flat());
        assert_eq!(s.config, loaded.config);
        assert_eq!(s.seed, loaded.seed);
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let s = ModelState::init(7, 6, tiny_config(3, 4)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&s, f.path()).unwrap();
        let mut text = fs::read_to_string(f.path()).unwrap();
        text = text.replace("\"hidden_dim\":4", "\"hidden_dim\":5");
        fs::write(f.path(), text).unwrap();
        assert!(matches!(load_checkpoint(f.path()), Err(VaeError::BadCheckpoint(_))));
    }
}
