//! Synthetic bilingual corpus with planted topic blocks, plus an oracle LLM
//! that answers refinement prompts with the planted word lists. Used by the
//! end-to-end tests and for generating small demo datasets.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{save_corpus, BowDocument, Corpus, Lang, Vocabulary};
use crate::embed::EmbeddingTable;
use crate::refine::{LlmApi, RefineError, POOL_WORDS};

/// Parameters of the planted-block generator.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Number of planted blocks (the ground-truth topic count).
    pub k: usize,
    /// Vocabulary words per block per language.
    pub words_per_block: usize,
    /// Documents per language; document `i` belongs to block `i % k`.
    pub docs_per_lang: usize,
    /// Leading documents of each language linked as translation pairs.
    pub n_pairs: usize,
    /// Tokens drawn per document.
    pub doc_len: usize,
    /// Word-embedding dimension (block centroids live on the axes).
    pub embed_dim: usize,
    /// Probability that a token is drawn from the whole vocabulary instead
    /// of the document's block.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            k: 4,
            words_per_block: 50,
            docs_per_lang: 400,
            n_pairs: 100,
            doc_len: 30,
            embed_dim: 8,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Deterministic token name for word `j` of a block.
pub fn token_name(lang: Lang, block: usize, j: usize) -> String {
    match lang {
        Lang::L1 => format!("en{block}w{j:02}"),
        Lang::L2 => format!("cn{block}w{j:02}"),
    }
}

/// The planted "true" top words of a block (its first `n` vocabulary words).
pub fn planted_words(lang: Lang, block: usize, n: usize) -> Vec<String> {
    (0..n).map(|j| token_name(lang, block, j)).collect()
}

/// A generated corpus with its word embeddings and the spec that made it.
pub struct SynthData {
    pub spec: SynthSpec,
    pub corpus: Corpus,
    pub table: EmbeddingTable,
}

/// Generates the corpus: block-major vocabularies, documents whose tokens
/// come from their block (up to noise), labels equal to the block id, the
/// leading documents linked as pairs, and word vectors clustered around
/// per-block axis centroids shared by both languages.
pub fn generate(spec: SynthSpec) -> SynthData {
    assert!(spec.k >= 1 && spec.words_per_block >= 1 && spec.doc_len >= 1);
    assert!(spec.n_pairs <= spec.docs_per_lang, "more pairs than documents");
    assert!(spec.embed_dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let vocab_tokens = |lang: Lang| -> Vec<String> {
        (0..spec.k)
            .flat_map(|b| (0..spec.words_per_block).map(move |j| token_name(lang, b, j)))
            .collect()
    };
    let vocab1 = Vocabulary::new(vocab_tokens(Lang::L1)).expect("synthetic vocab");
    let vocab2 = Vocabulary::new(vocab_tokens(Lang::L2)).expect("synthetic vocab");

    let mut table = EmbeddingTable::new(spec.embed_dim);
    for lang in [Lang::L1, Lang::L2] {
        for b in 0..spec.k {
            for j in 0..spec.words_per_block {
                let mut v = vec![0.0; spec.embed_dim];
                v[b % spec.embed_dim] = 1.0;
                for x in v.iter_mut() {
                    *x += 0.1 * rng.gen_range(-1.0..1.0);
                }
                table.insert_word(&token_name(lang, b, j), v);
            }
        }
    }

    let v = spec.k * spec.words_per_block;
    let mut docs = Vec::with_capacity(2 * spec.docs_per_lang);
    for lang in [Lang::L1, Lang::L2] {
        for i in 0..spec.docs_per_lang {
            let block = i % spec.k;
            let mut bow = std::collections::BTreeMap::new();
            for _ in 0..spec.doc_len {
                let idx = if rng.gen_bool(1.0 - spec.noise) {
                    block * spec.words_per_block + rng.gen_range(0..spec.words_per_block)
                } else {
                    rng.gen_range(0..v)
                };
                *bow.entry(idx as u32).or_insert(0u32) += 1;
            }
            let prefix = lang.as_str();
            docs.push(BowDocument {
                id: format!("{prefix}_{i:04}"),
                lang,
                bow,
                label: Some(block as i64),
                pair_id: (i < spec.n_pairs).then(|| format!("p{i:04}")),
            });
        }
    }
    let corpus = Corpus::new(docs, vocab1, vocab2).expect("synthetic corpus");
    SynthData { spec, corpus, table }
}

/// Writes the dataset as loadable files: `vocab1.txt`, `vocab2.txt`,
/// `corpus.jsonl`, and `embeddings.txt` (word2vec text format).
pub fn write_to_dir(data: &SynthData, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, vocab) in
        [("vocab1.txt", &data.corpus.vocab1), ("vocab2.txt", &data.corpus.vocab2)]
    {
        let mut text = vocab.tokens().join("\n");
        text.push('\n');
        fs::write(dir.join(name), text)?;
    }
    save_corpus(&data.corpus, &dir.join("corpus.jsonl")).map_err(io::Error::other)?;

    let all_tokens: Vec<&String> = data
        .corpus
        .vocab1
        .tokens()
        .iter()
        .chain(data.corpus.vocab2.tokens().iter())
        .collect();
    let mut text = format!("{} {}\n", all_tokens.len(), data.table.dim);
    for token in all_tokens {
        let vec = data.table.word_vec(token).expect("generated word has a vector");
        text.push_str(token);
        for x in vec {
            text.push(' ');
            text.push_str(&x.to_string());
        }
        text.push('\n');
    }
    fs::write(dir.join("embeddings.txt"), text)?;
    Ok(())
}

/// Answers refinement prompts with the planted word lists: each candidate
/// pool is matched to the block its words overlap most (ties to the lowest
/// block), and the reply lists that block's first 15 words per language.
pub struct OracleLlm {
    k: usize,
    block_of_l1: HashMap<String, usize>,
    block_of_l2: HashMap<String, usize>,
    top_l1: Vec<Vec<String>>,
    top_l2: Vec<Vec<String>>,
    calls: AtomicUsize,
}

impl OracleLlm {
    pub fn new(spec: &SynthSpec) -> Self {
        assert!(
            spec.words_per_block >= POOL_WORDS,
            "blocks need at least {POOL_WORDS} words to answer with"
        );
        let mut block_of_l1 = HashMap::new();
        let mut block_of_l2 = HashMap::new();
        for b in 0..spec.k {
            for j in 0..spec.words_per_block {
                block_of_l1.insert(token_name(Lang::L1, b, j), b);
                block_of_l2.insert(token_name(Lang::L2, b, j), b);
            }
        }
        OracleLlm {
            k: spec.k,
            block_of_l1,
            block_of_l2,
            top_l1: (0..spec.k).map(|b| planted_words(Lang::L1, b, POOL_WORDS)).collect(),
            top_l2: (0..spec.k).map(|b| planted_words(Lang::L2, b, POOL_WORDS)).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of completions served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn match_block(&self, en: &[String], cn: &[String]) -> usize {
        let mut overlap = vec![0usize; self.k];
        let mut overlap_l1 = vec![0usize; self.k];
        for w in en {
            if let Some(&b) = self.block_of_l1.get(w) {
                overlap[b] += 1;
                overlap_l1[b] += 1;
            }
        }
        for w in cn {
            if let Some(&b) = self.block_of_l2.get(w) {
                overlap[b] += 1;
            }
        }
        // A pool whose two halves come from different blocks ties on the
        // combined count; side with the first-listed language so such pools
        // still land on distinct themes instead of piling onto one block.
        (0..self.k)
            .max_by_key(|&b| (overlap[b], overlap_l1[b], std::cmp::Reverse(b)))
            .unwrap_or(0)
    }
}

/// The candidate pools of a refinement prompt: `(topic id, EN words, CN
/// words)` per pool block, in prompt order.
fn parse_prompt_pools(prompt: &str) -> Vec<(usize, Vec<String>, Vec<String>)> {
    let mut pools: Vec<(usize, Vec<String>, Vec<String>)> = Vec::new();
    for line in prompt.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Topic ") {
            if let Some((id_part, _)) = rest.split_once(':') {
                if let Ok(id) = id_part.trim().parse::<usize>() {
                    pools.push((id, Vec::new(), Vec::new()));
                    continue;
                }
            }
        }
        let Some(cur) = pools.last_mut() else { continue };
        if let Some(rest) = line.strip_prefix("EN:") {
            if cur.1.is_empty() {
                cur.1 = rest.split(" - ").map(|w| w.trim().to_string()).collect();
            }
        } else if let Some(rest) = line.strip_prefix("CN:") {
            if cur.2.is_empty() {
                cur.2 = rest.split(" - ").map(|w| w.trim().to_string()).collect();
            }
        }
    }
    pools
}

impl LlmApi for OracleLlm {
    fn complete(&self, prompt: &str, _round: u32) -> Result<String, RefineError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut reply = String::new();
        for (id, en, cn) in parse_prompt_pools(prompt) {
            let block = self.match_block(&en, &cn);
            reply.push_str(&format!(
                "Topic {id}: planted block {block}\nEN: {}\nCN: {}\n",
                self.top_l1[block].join(" - "),
                self.top_l2[block].join(" - "),
            ));
        }
        Ok(reply)
    }
}

// ===== tests =====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, load_vocab};
    use crate::embed::load_word_embeddings;
    use crate::refine::{build_prompt, parse_response, CandidatePool};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            k: 3,
            words_per_block: 20,
            docs_per_lang: 30,
            n_pairs: 12,
            doc_len: 15,
            embed_dim: 4,
            noise: 0.1,
            seed: 11,
        }
    }

    #[test]
    fn generator_shapes_and_labels() {
        let data = generate(small_spec());
        assert_eq!(data.corpus.vocab1.len(), 60);
        assert_eq!(data.corpus.vocab2.len(), 60);
        assert_eq!(data.corpus.docs.len(), 60);
        assert_eq!(data.corpus.pair_index.len(), 12);
        assert_eq!(data.table.word_count(), 120);
        for doc in &data.corpus.docs {
            let label = doc.label.unwrap();
            assert!((0..3).contains(&label));
            assert!(doc.total_count() == 15);
        }
        // Paired documents share their block.
        for (_pid, &(i1, i2)) in &data.corpus.pair_index {
            assert_eq!(data.corpus.docs[i1].label, data.corpus.docs[i2].label);
        }
    }

    #[test]
    fn documents_stay_mostly_in_their_block() {
        let data = generate(small_spec());
        let wpb = data.spec.words_per_block as u32;
        let mut in_block = 0u64;
        let mut total = 0u64;
        for doc in &data.corpus.docs {
            let block = doc.label.unwrap() as u32;
            for (&idx, &count) in &doc.bow {
                if idx / wpb == block {
                    in_block += count as u64;
                }
                total += count as u64;
            }
        }
        let frac = in_block as f64 / total as f64;
        assert!(frac > 0.8, "only {frac:.2} of tokens in-block");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(small_spec());
        let b = generate(small_spec());
        assert_eq!(a.corpus.docs, b.corpus.docs);
        for t in a.corpus.vocab1.tokens() {
            assert_eq!(a.table.word_vec(t), b.table.word_vec(t));
        }
    }

    #[test]
    fn written_files_load_back_identically() {
        let data = generate(small_spec());
        let dir = tempfile::tempdir().unwrap();
        write_to_dir(&data, dir.path()).unwrap();
        let v1 = load_vocab(&dir.path().join("vocab1.txt")).unwrap();
        let v2 = load_vocab(&dir.path().join("vocab2.txt")).unwrap();
        assert_eq!(v1.tokens(), data.corpus.vocab1.tokens());
        let corpus = load_corpus(&dir.path().join("corpus.jsonl"), v1, v2).unwrap();
        assert_eq!(corpus.docs, data.corpus.docs);
        assert_eq!(corpus.pair_index, data.corpus.pair_index);
        let table = load_word_embeddings(&dir.path().join("embeddings.txt")).unwrap();
        assert_eq!(table.dim, data.table.dim);
        assert_eq!(table.word_count(), data.table.word_count());
        for t in corpus.vocab1.tokens() {
            assert_eq!(table.word_vec(t), data.table.word_vec(t));
        }
    }

    #[test]
    fn oracle_answers_with_planted_words() {
        let spec = small_spec();
        let oracle = OracleLlm::new(&spec);
        // Pools mostly from block 2 / block 0, with some off-block words.
        let mut en_a = planted_words(Lang::L1, 2, 12);
        en_a.extend(planted_words(Lang::L1, 0, 3).into_iter().map(|w| w + "x"));
        let cn_a = planted_words(Lang::L2, 2, POOL_WORDS);
        let pool_a = CandidatePool::new(0, en_a, cn_a).unwrap();
        let pool_b = CandidatePool::new(
            1,
            planted_words(Lang::L1, 0, POOL_WORDS),
            planted_words(Lang::L2, 0, POOL_WORDS),
        )
        .unwrap();
        let prompt = build_prompt(&[pool_a, pool_b]).unwrap();
        let reply = oracle.complete(&prompt, 1).unwrap();
        let rounds = parse_response(&reply, 2, 1).unwrap();
        assert_eq!(rounds[0].words_l1, planted_words(Lang::L1, 2, POOL_WORDS));
        assert_eq!(rounds[0].words_l2, planted_words(Lang::L2, 2, POOL_WORDS));
        assert_eq!(rounds[1].words_l1, planted_words(Lang::L1, 0, POOL_WORDS));
        assert_eq!(oracle.calls(), 1);
    }

    #[test]
    fn oracle_replies_are_consistent_across_rounds() {
        let spec = small_spec();
        let oracle = OracleLlm::new(&spec);
        let pool = CandidatePool::new(
            0,
            planted_words(Lang::L1, 1, POOL_WORDS),
            planted_words(Lang::L2, 1, POOL_WORDS),
        )
        .unwrap();
        let prompt = build_prompt(&[pool]).unwrap();
        let a = oracle.complete(&prompt, 1).unwrap();
        let b = oracle.complete(&prompt, 2).unwrap();
        assert_eq!(a, b);
    }
}
