//! Phase-2 training: periodic LLM refinement plus composite optimization.
//!
//! Every `refine_every` epochs (and at epoch 0) the current top words are
//! sent through self-consistency refinement; the refined word sets rebuild
//! the alignment targets (refined distributions, kernel bandwidths, topic
//! embeddings, document targets). Between refinements each batch minimizes
//! J = L_base + lambda_mmd * L_align + lambda_qa * L_doc.

use std::collections::BTreeSet;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{BowDocument, Corpus, Lang, Vocabulary};
use crate::embed::{EmbeddingTable, EncoderProvider};
use crate::metrics::{self, MetricsError, RefStats};
use crate::mmd::{
    build_raw_distribution, build_refined_distribution, mmd_loss_frozen, topic_supports,
    KernelConfig, MmdError, WeightedSample,
};
use crate::qa_align::{build_targets, doc_align_loss, AlignmentTargets, QaError};
use crate::refine::{
    aggregate_votes, refine_round, select_top_m, CandidatePool, LlmApi, RefineError,
    RefinedTopic, POOL_WORDS,
};
use crate::vae::{
    backward_doc, draw_noises, forward_doc, shuffled_indices, top_words, Adam,
    Gradients, ModelState, VaeError,
};

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Mmd(#[from] MmdError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss term {term} at epoch {epoch}")]
    NonFiniteLoss { term: &'static str, epoch: usize },
    #[error("empty sweep grid")]
    EmptyGrid,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// One logged epoch of loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_phase1: f64,
    pub l_mmd: f64,
    pub l_doc: f64,
    pub j: f64,
}

/// Scalar terms of one composite evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub l_phase1: f64,
    pub l_mmd: f64,
    pub l_doc: f64,
    pub j: f64,
}

/// Frozen alignment artifacts rebuilt at each refinement step.
pub struct AlignArtifacts {
    pub mmd_targets: Vec<Option<WeightedSample>>,
    pub bandwidths: Vec<Option<Vec<f64>>>,
    pub qa: Option<AlignmentTargets>,
}

impl AlignArtifacts {
    pub fn empty(k: usize) -> Self {
        AlignArtifacts { mmd_targets: vec![None; k], bandwidths: vec![None; k], qa: None }
    }
}

/// Final state of a Phase-2 run.
pub struct EnhanceState {
    pub model: ModelState,
    pub refined: Vec<Option<RefinedTopic>>,
    pub targets: Option<AlignmentTargets>,
    pub epoch: usize,
    pub loss_log: Vec<LossRecord>,
    /// Epochs at which a refinement step ran (provider was called).
    pub refine_epochs: Vec<usize>,
}

/// Everything a Phase-2 run needs besides the model.
pub struct EnhanceContext<'a> {
    pub corpus: &'a Corpus,
    pub table: &'a EmbeddingTable,
    pub llm: &'a dyn LlmApi,
    pub enc: &'a EncoderProvider,
    pub kernel: KernelConfig,
    /// Extra parse-retry attempts per refinement round.
    pub llm_max_retries: usize,
}

/// Runs one full refinement step: pools from the current top words, R
/// voting rounds, Top-M selection. `Ok(None)` means every round failed
/// (callers keep their previous refined sets); provider errors propagate.
pub fn run_refinement(
    model: &ModelState,
    vocab1: &Vocabulary,
    vocab2: &Vocabulary,
    llm: &dyn LlmApi,
    max_retries: usize,
) -> Result<Option<Vec<Option<RefinedTopic>>>, EnhanceError> {
    let k = model.config.k;
    let mut pools = Vec::with_capacity(k);
    for topic in 0..k {
        let w1 = top_words(model, vocab1, Lang::L1, topic, POOL_WORDS);
        let w2 = top_words(model, vocab2, Lang::L2, topic, POOL_WORDS);
        pools.push(CandidatePool::new(topic, w1, w2)?);
    }
    let mut per_topic: Vec<Vec<crate::refine::RefinementRound>> = vec![Vec::new(); k];
    let mut ok_rounds = 0usize;
    for r in 0..model.config.rounds {
        match refine_round(llm, &pools, r as u32, max_retries) {
            Ok(rounds) => {
                ok_rounds += 1;
                for round in rounds {
                    per_topic[round.topic_id].push(round);
                }
            }
            Err(RefineError::AllRetriesFailed { attempts }) => {
                log::warn!("refinement round {r} dropped after {attempts} parse attempts");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if ok_rounds == 0 {
        return Ok(None);
    }
    let mut refined = Vec::with_capacity(k);
    for rounds in &per_topic {
        let votes = aggregate_votes(rounds)?;
        refined.push(Some(select_top_m(&votes, model.config.top_m)));
    }
    Ok(Some(refined))
}

/// Rebuilds the frozen alignment artifacts from the current model and
/// refined sets: refined distributions and bandwidths (if the MMD term is
/// active) and document targets (if the QA term is active).
pub fn rebuild_artifacts(
    model: &ModelState,
    corpus: &Corpus,
    table: &EmbeddingTable,
    enc: &EncoderProvider,
    refined: &[Option<RefinedTopic>],
    kernel: &KernelConfig,
) -> Result<AlignArtifacts, EnhanceError> {
    let k = model.config.k;
    let mut artifacts = AlignArtifacts::empty(k);
    if model.config.lambda_mmd != 0.0 {
        let supports = topic_supports(model, &corpus.vocab1, &corpus.vocab2, table, model.config.top_n);
        for (kk, r) in refined.iter().enumerate() {
            let Some(r) = r else { continue };
            let target = match build_refined_distribution(r, table) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("{e}; topic excluded from the word-alignment loss");
                    continue;
                }
            };
            let raw = match build_raw_distribution(model, &corpus.vocab1, &corpus.vocab2, &supports[kk]) {
                Ok(raw) => raw,
                Err(e) => {
                    log::warn!("{e}; topic excluded from the word-alignment loss");
                    continue;
                }
            };
            let (bw, _) = kernel.resolve(&raw, &target)?;
            artifacts.mmd_targets[kk] = Some(target);
            artifacts.bandwidths[kk] = Some(bw);
        }
    }
    if model.config.lambda_qa != 0.0 && refined.iter().any(Option::is_some) {
        artifacts.qa = Some(build_targets(corpus, refined, enc, table, model.config.tau)?);
    }
    Ok(artifacts)
}

/// Composite loss J over one batch with gradients for every parameter.
/// Alignment artifacts are treated as constants; the raw top-N supports are
/// recomputed here and frozen within the step.
pub fn composite_loss(
    model: &ModelState,
    corpus: &Corpus,
    table: &EmbeddingTable,
    batch: &[&BowDocument],
    noises: &[Array1<f64>],
    artifacts: &AlignArtifacts,
    epoch: usize,
) -> Result<(LossTerms, Gradients), EnhanceError> {
    let cfg = &model.config;
    assert!(!batch.is_empty(), "empty batch");
    let w = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(model);

    let mut fwds = Vec::with_capacity(batch.len());
    for (doc, noise) in batch.iter().zip(noises) {
        fwds.push(forward_doc(model, doc, noise)?);
    }

    // Document-alignment term on the sampled proportions.
    let mut l_doc = 0.0;
    let mut dtheta_rows: Option<Array2<f64>> = None;
    if cfg.lambda_qa != 0.0 {
        if let Some(targets) = &artifacts.qa {
            let mut theta = Array2::zeros((batch.len(), cfg.k));
            let mut row_map = Vec::with_capacity(batch.len());
            for (i, (doc, fwd)) in batch.iter().zip(&fwds).enumerate() {
                theta.row_mut(i).assign(&fwd.theta);
                row_map.push(targets.row_of(&doc.id).ok_or_else(|| {
                    QaError::ShapeMismatch(format!("document {} has no alignment target", doc.id))
                })?);
            }
            let (sum, grad) = doc_align_loss(&theta, targets, &row_map)?;
            l_doc = sum * w;
            dtheta_rows = Some(grad);
        }
    }

    let mut l_p1 = 0.0;
    for (i, (doc, fwd)) in batch.iter().zip(&fwds).enumerate() {
        l_p1 += w * (fwd.recon + fwd.kl);
        let extra: Option<Array1<f64>> =
            dtheta_rows.as_ref().map(|g| g.row(i).mapv(|v| v * cfg.lambda_qa));
        backward_doc(model, doc, fwd, extra.as_ref(), w, &mut grads);
    }

    // Word-alignment term, once per batch.
    let mut l_mmd = 0.0;
    if cfg.lambda_mmd != 0.0 && artifacts.mmd_targets.iter().any(Option::is_some) {
        let supports = topic_supports(model, &corpus.vocab1, &corpus.vocab2, table, cfg.top_n);
        let (lm, bg, _) = mmd_loss_frozen(
            model,
            &corpus.vocab1,
            &corpus.vocab2,
            &supports,
            &artifacts.mmd_targets,
            &artifacts.bandwidths,
        );
        grads.beta1_logits.scaled_add(cfg.lambda_mmd, &bg.l1);
        grads.beta2_logits.scaled_add(cfg.lambda_mmd, &bg.l2);
        l_mmd = lm;
    }

    let j = l_p1 + cfg.lambda_mmd * l_mmd + cfg.lambda_qa * l_doc;
    for (term, v) in [("l_phase1", l_p1), ("l_mmd", l_mmd), ("l_doc", l_doc), ("j", j)] {
        if !v.is_finite() {
            return Err(EnhanceError::NonFiniteLoss { term, epoch });
        }
    }
    Ok((LossTerms { l_phase1: l_p1, l_mmd, l_doc, j }, grads))
}

/// Runs Phase 2 on a trained model. Refinement executes at epoch 0 and at
/// every epoch divisible by `refine_every`; all artifacts rebuild after each
/// refinement. Deterministic given the seed and fixture providers.
pub fn enhance(mut model: ModelState, ctx: &EnhanceContext) -> Result<EnhanceState, EnhanceError> {
    model.config.validate()?;
    let cfg = model.config.clone();
    let mut refined: Vec<Option<RefinedTopic>> = vec![None; cfg.k];
    let mut artifacts = AlignArtifacts::empty(cfg.k);
    let mut refine_epochs = Vec::new();
    let mut loss_log = Vec::new();

    let refine_at = |model: &ModelState,
                         refined: &mut Vec<Option<RefinedTopic>>,
                         epoch: usize|
     -> Result<AlignArtifacts, EnhanceError> {
        match run_refinement(model, &ctx.corpus.vocab1, &ctx.corpus.vocab2, ctx.llm, ctx.llm_max_retries)? {
            Some(new) => *refined = new,
            None => {
                log::warn!("epoch {epoch}: refinement failed entirely; keeping previous word sets")
            }
        }
        rebuild_artifacts(model, ctx.corpus, ctx.table, ctx.enc, refined, &ctx.kernel)
    };

    if cfg.epochs == 0 {
        artifacts = refine_at(&model, &mut refined, 0)?;
        refine_epochs.push(0);
        return Ok(EnhanceState {
            model,
            refined,
            targets: artifacts.qa,
            epoch: 0,
            loss_log,
            refine_epochs,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = Adam::new(cfg.learning_rate, model.n_params());
    for epoch in 0..cfg.epochs {
        if epoch % cfg.refine_every == 0 {
            artifacts = refine_at(&model, &mut refined, epoch)?;
            refine_epochs.push(epoch);
        }
        let order = shuffled_indices(&mut rng, ctx.corpus.docs.len());
        let mut sums = LossTerms::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&BowDocument> = chunk.iter().map(|&i| &ctx.corpus.docs[i]).collect();
            let noises = draw_noises(&mut rng, batch.len(), cfg.k);
            let (terms, grads) =
                composite_loss(&model, ctx.corpus, ctx.table, &batch, &noises, &artifacts, epoch)?;
            adam.step(&mut model, &grads);
            sums.l_phase1 += terms.l_phase1;
            sums.l_mmd += terms.l_mmd;
            sums.l_doc += terms.l_doc;
            sums.j += terms.j;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        loss_log.push(LossRecord {
            epoch,
            l_phase1: sums.l_phase1 / b,
            l_mmd: sums.l_mmd / b,
            l_doc: sums.l_doc / b,
            j: sums.j / b,
        });
    }
    Ok(EnhanceState {
        model,
        refined,
        targets: artifacts.qa,
        epoch: cfg.epochs,
        loss_log,
        refine_epochs,
    })
}

/// Writes the per-epoch loss log as CSV.
pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> io::Result<()> {
    let mut out = String::from("epoch,l_phase1,l_mmd,l_doc,j\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.l_phase1, r.l_mmd, r.l_doc, r.j));
    }
    std::fs::write(path, out)
}

// ===== hyperparameter sweep =====

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r: usize,
    pub f: usize,
    pub cnpmi: f64,
    pub tu: f64,
    pub tq: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub r: usize,
    pub f: usize,
    pub result: Result<SweepRow, String>,
}

/// Cross product of the two grids, deduplicated and sorted.
pub fn dedup_grid(rounds: &[usize], frequencies: &[usize]) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = rounds
        .iter()
        .flat_map(|&r| frequencies.iter().map(move |&f| (r, f)))
        .collect();
    set.into_iter().collect()
}

/// Runs one Phase-2 training per unique (rounds, refine_every) cell and
/// evaluates coherence and uniqueness of the resulting topics. Per-cell
/// failures are recorded and the sweep continues.
pub fn sweep(
    phase1: &ModelState,
    ctx: &EnhanceContext,
    ref_corpus: &Corpus,
    rounds_grid: &[usize],
    freq_grid: &[usize],
    eval_top_c: usize,
) -> Result<Vec<SweepOutcome>, EnhanceError> {
    let cells = dedup_grid(rounds_grid, freq_grid);
    if cells.is_empty() {
        return Err(EnhanceError::EmptyGrid);
    }
    let mut stats = RefStats::from_corpus(ref_corpus)?;
    let mut outcomes = Vec::with_capacity(cells.len());
    for (r, f) in cells {
        let mut model = phase1.clone();
        model.config.rounds = r;
        model.config.refine_every = f;
        let mut cell = || -> Result<SweepRow, EnhanceError> {
            let state = enhance(model.clone(), ctx)?;
            let k = state.model.config.k;
            let topics: Vec<(Vec<String>, Vec<String>)> = (0..k)
                .map(|t| {
                    (
                        top_words(&state.model, &ctx.corpus.vocab1, Lang::L1, t, eval_top_c),
                        top_words(&state.model, &ctx.corpus.vocab2, Lang::L2, t, eval_top_c),
                    )
                })
                .collect();
            let (cnpmi, _) = metrics::cnpmi(&mut stats, &topics, eval_top_c)?;
            let lists1: Vec<Vec<String>> = topics.iter().map(|(a, _)| a.clone()).collect();
            let lists2: Vec<Vec<String>> = topics.iter().map(|(_, b)| b.clone()).collect();
            let tu = metrics::topic_uniqueness(&lists1, &lists2);
            let tq = metrics::topic_quality(cnpmi, tu);
            Ok(SweepRow { r, f, cnpmi, tu, tq })
        };
        let result = cell().map_err(|e| {
            log::warn!("sweep cell (r={r}, f={f}) failed: {e}");
            e.to_string()
        });
        outcomes.push(SweepOutcome { r, f, result });
    }
    Ok(outcomes)
}

/// Writes sweep results as CSV; failed cells are skipped (they are reported
/// in the log).
pub fn write_sweep_csv(path: &Path, outcomes: &[SweepOutcome]) -> io::Result<()> {
    let mut out = String::from("r,f,cnpmi,tu,tq\n");
    for o in outcomes {
        if let Ok(row) = &o.result {
            out.push_str(&format!("{},{},{},{},{}\n", row.r, row.f, row.cnpmi, row.tu, row.tq));
        }
    }
    std::fs::write(path, out)
}

// ===== tests =====
