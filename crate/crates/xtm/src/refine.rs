//! LLM-driven topic refinement: prompt construction, response parsing,
//! self-consistency rounds, vote aggregation, and Top-M selection.
//!
//! One prompt covers all topics. It is sent `R` times; each reply is parsed
//! into per-topic word lists, words are voted across the successfully parsed
//! rounds, and the Top-M words per language (by vote count, then earliest
//! round, then lexicographic order) become the refined topic.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Lang;

/// Candidate pool size per language (top words fed to the prompt) and the
/// word count every reply line must carry.
pub const POOL_WORDS: usize = 15;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("no candidate pools to refine")]
    EmptyBatch,
    #[error("pool for topic {topic} has {got} {lang:?} words, need {POOL_WORDS}")]
    BadPool { topic: usize, lang: Lang, got: usize },
    #[error("response is missing topic {0}")]
    MissingTopic(usize),
    #[error("topic {topic} {lang:?} line has {got} words, expected {POOL_WORDS}")]
    WordCountMismatch { topic: usize, lang: Lang, got: usize },
    #[error("topic {topic} {lang:?} contains multiword token {token:?}")]
    MultiwordToken { topic: usize, lang: Lang, token: String },
    #[error("topics are present but out of order")]
    OutOfOrderTopics,
    #[error("provider error: {0}")]
    ProviderError(String),
    #[error("all {attempts} attempts failed to parse")]
    AllRetriesFailed { attempts: usize },
    #[error("no successfully parsed rounds to aggregate")]
    NoSuccessfulRounds,
}

/// Bilingual candidate words for one topic, fed into the prompt.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub topic_id: usize,
    pub words_l1: Vec<String>,
    pub words_l2: Vec<String>,
}

impl CandidatePool {
    /// Validates the 15-words-per-language and uniqueness invariants.
    pub fn new(
        topic_id: usize,
        words_l1: Vec<String>,
        words_l2: Vec<String>,
    ) -> Result<Self, RefineError> {
        for (lang, words) in [(Lang::L1, &words_l1), (Lang::L2, &words_l2)] {
            if words.len() != POOL_WORDS {
                return Err(RefineError::BadPool { topic: topic_id, lang, got: words.len() });
            }
            let mut seen = std::collections::HashSet::new();
            if !words.iter().all(|w| seen.insert(w)) {
                return Err(RefineError::BadPool { topic: topic_id, lang, got: words.len() });
            }
        }
        Ok(CandidatePool { topic_id, words_l1, words_l2 })
    }
}

/// One parsed reply for one topic in one self-consistency round.
#[derive(Debug, Clone)]
pub struct RefinementRound {
    pub topic_id: usize,
    /// 1-based round index within the R self-consistency rounds.
    pub round_index: u32,
    pub words_l1: Vec<String>,
    pub words_l2: Vec<String>,
    pub theme: String,
    /// Set when deduplication left fewer than the required 15 words.
    pub short: bool,
}

/// Vote tally for one topic across parsed rounds.
#[derive(Debug, Clone)]
pub struct TopicVotes {
    pub topic_id: usize,
    /// Number of rounds that parsed successfully (the vote denominator).
    pub rounds_effective: u32,
    pub l1: BTreeMap<String, Vote>,
    pub l2: BTreeMap<String, Vote>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vote {
    pub count: u32,
    /// Earliest round index in which the word appeared (tie-break key).
    pub first_round: u32,
}

impl TopicVotes {
    /// Self-consistency frequency of a word: votes / parsed rounds.
    pub fn frequency(&self, lang: Lang, token: &str) -> f64 {
        let map = match lang {
            Lang::L1 => &self.l1,
            Lang::L2 => &self.l2,
        };
        map.get(token).map_or(0.0, |v| v.count as f64 / self.rounds_effective as f64)
    }
}

/// Final refined word sets for one topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinedTopic {
    pub topic_id: usize,
    pub votes_l1: BTreeMap<String, u32>,
    pub votes_l2: BTreeMap<String, u32>,
    pub selected_l1: Vec<String>,
    pub selected_l2: Vec<String>,
    /// Set when fewer than top_m distinct words were available.
    pub short_l1: bool,
    pub short_l2: bool,
}

// ===== prompt =====

const PROMPT_INSTRUCTIONS: &str = "\
1) Identify the main theme shared across both languages.
2) Remove irrelevant/noisy words that do not fit the theme.
3) Add relevant words that strengthen coherence and cross-lingual coverage.
4) Use only SINGLE WORDS (no phrases, no underscores, no hyphenated expressions).
5) Return exactly 15 words per language for each topic.";

const PROMPT_FORMAT: &str = "\
Output format for all topics:
Topic <id>: <brief theme>
EN: word1 - word2 - ... - word15
CN: word1 - word2 - ... - word15";

const PROMPT_RULES: &str = "\
Rules:
- Exactly 15 words after EN: and CN:.
- Separate words with \" - \".
- List topics in order from 0 to N\u{2013}1.";

/// Builds the single refinement prompt covering every topic's candidate pool.
pub fn build_prompt(pools: &[CandidatePool]) -> Result<String, RefineError> {
    if pools.is_empty() {
        return Err(RefineError::EmptyBatch);
    }
    let mut prompt = format!(
        "Given the following cross-lingual topic words from English and Chinese for {} topics, refine each topic:\n\n{}\n\n{}\n\n{}\n",
        pools.len(),
        PROMPT_INSTRUCTIONS,
        PROMPT_FORMAT,
        PROMPT_RULES,
    );
    for pool in pools {
        prompt.push_str(&format!(
            "\nTopic {}:\nEN: {}\nCN: {}\n",
            pool.topic_id,
            pool.words_l1.join(" - "),
            pool.words_l2.join(" - "),
        ));
    }
    Ok(prompt)
}

// ===== parsing =====

fn parse_word_line(
    line: &str,
    topic: usize,
    lang: Lang,
) -> Result<(Vec<String>, bool), RefineError> {
    let words: Vec<String> = line
        .split(" - ")
        .map(|w| w.trim().to_string())
        .filter(|w| !w.is_empty())
        .collect();
    if words.len() != POOL_WORDS {
        return Err(RefineError::WordCountMismatch { topic, lang, got: words.len() });
    }
    for w in &words {
        if w.contains(' ') || w.contains('_') || w.contains('-') {
            return Err(RefineError::MultiwordToken { topic, lang, token: w.clone() });
        }
    }
    let mut seen = std::collections::HashSet::new();
    let deduped: Vec<String> = words.into_iter().filter(|w| seen.insert(w.clone())).collect();
    let short = deduped.len() < POOL_WORDS;
    Ok((deduped, short))
}

/// Parses one LLM reply into per-topic rounds. Lenient about surrounding
/// prose; strict about the `Topic i:` / `EN:` / `CN:` block structure, the
/// 15-word count, single-word tokens, and topic order.
pub fn parse_response(
    text: &str,
    expected_topics: usize,
    round_index: u32,
) -> Result<Vec<RefinementRound>, RefineError> {
    struct Block {
        id: usize,
        theme: String,
        en: Option<String>,
        cn: Option<String>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Topic ") {
            if let Some((id_part, theme)) = rest.split_once(':') {
                if let Ok(id) = id_part.trim().parse::<usize>() {
                    blocks.push(Block {
                        id,
                        theme: theme.trim().to_string(),
                        en: None,
                        cn: None,
                    });
                    continue;
                }
            }
        }
        if let Some(cur) = blocks.last_mut() {
            if let Some(rest) = line.strip_prefix("EN:") {
                cur.en.get_or_insert_with(|| rest.trim().to_string());
            } else if let Some(rest) = line.strip_prefix("CN:") {
                cur.cn.get_or_insert_with(|| rest.trim().to_string());
            }
        }
    }
    let ids: Vec<usize> = blocks.iter().map(|b| b.id).collect();
    if ids.len() != expected_topics || ids.iter().enumerate().any(|(i, &id)| id != i) {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted == (0..expected_topics).collect::<Vec<_>>() && ids.len() == expected_topics {
            return Err(RefineError::OutOfOrderTopics);
        }
        let missing =
            (0..expected_topics).find(|i| !ids.contains(i)).unwrap_or(expected_topics);
        if missing < expected_topics {
            return Err(RefineError::MissingTopic(missing));
        }
        return Err(RefineError::OutOfOrderTopics);
    }
    let mut rounds = Vec::with_capacity(blocks.len());
    for block in blocks {
        let en = block.en.ok_or(RefineError::WordCountMismatch {
            topic: block.id,
            lang: Lang::L1,
            got: 0,
        })?;
        let cn = block.cn.ok_or(RefineError::WordCountMismatch {
            topic: block.id,
            lang: Lang::L2,
            got: 0,
        })?;
        let (words_l1, short1) = parse_word_line(&en, block.id, Lang::L1)?;
        let (words_l2, short2) = parse_word_line(&cn, block.id, Lang::L2)?;
        rounds.push(RefinementRound {
            topic_id: block.id,
            round_index,
            words_l1,
            words_l2,
            theme: block.theme,
            short: short1 || short2,
        });
    }
    Ok(rounds)
}

// ===== providers =====

/// Anything that can answer a refinement prompt for a given round.
pub trait LlmApi: Sync {
    fn complete(&self, prompt: &str, round: u32) -> Result<String, RefineError>;
}

/// LLM backend: canned fixture files or a remote HTTP service.
pub enum LlmBackend {
    /// Directory of `<sha256-of-prompt>.r<round>.txt` reply files.
    Fixture { dir: PathBuf },
    /// POST `{"prompt": str}`, reply `{"text": str}`; optional bearer key.
    Remote { endpoint: String, api_key: Option<String> },
}

/// Configured LLM provider with retry/timeout policy and a call counter.
pub struct LlmProvider {
    pub backend: LlmBackend,
    pub max_retries: usize,
    pub timeout: Duration,
    calls: AtomicUsize,
}

impl LlmProvider {
    pub fn fixture(dir: PathBuf) -> Self {
        LlmProvider {
            backend: LlmBackend::Fixture { dir },
            max_retries: 2,
            timeout: Duration::from_secs(60),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn remote(endpoint: String, api_key: Option<String>) -> Self {
        LlmProvider {
            backend: LlmBackend::Remote { endpoint, api_key },
            max_retries: 2,
            timeout: Duration::from_secs(60),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of completions requested so far (attempts included).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LlmApi for LlmProvider {
    fn complete(&self, prompt: &str, round: u32) -> Result<String, RefineError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match &self.backend {
            LlmBackend::Fixture { dir } => {
                let mut hasher = Sha256::new();
                hasher.update(prompt.as_bytes());
                let name = format!("{:x}.r{round}.txt", hasher.finalize());
                let path = dir.join(name);
                fs::read_to_string(&path).map_err(|e| {
                    RefineError::ProviderError(format!(
                        "fixture {} unreadable: {e}",
                        path.display()
                    ))
                })
            }
            LlmBackend::Remote { endpoint, api_key } => {
                let mut req = ureq::post(endpoint).timeout(self.timeout);
                if let Some(key) = api_key {
                    req = req.set("Authorization", &format!("Bearer {key}"));
                }
                match req.send_json(ureq::json!({ "prompt": prompt })) {
                    Ok(resp) => {
                        #[derive(Deserialize)]
                        struct Reply {
                            text: String,
                        }
                        let reply: Reply = resp.into_json().map_err(|e| {
                            RefineError::ProviderError(format!("bad reply: {e}"))
                        })?;
                        Ok(reply.text)
                    }
                    Err(ureq::Error::Status(code, _)) if code == 401 || code == 403 => {
                        Err(RefineError::ProviderError(format!("auth: http status {code}")))
                    }
                    Err(ureq::Error::Status(code, _)) => {
                        Err(RefineError::ProviderError(format!("http status {code}")))
                    }
                    Err(e) => Err(RefineError::ProviderError(format!("transport: {e}"))),
                }
            }
        }
    }
}

/// Runs one self-consistency round: prompt, query, parse. Parse failures are
/// retried with the same prompt up to `max_retries` extra attempts; provider
/// errors are not retried.
pub fn refine_round(
    api: &dyn LlmApi,
    pools: &[CandidatePool],
    round_index: u32,
    max_retries: usize,
) -> Result<Vec<RefinementRound>, RefineError> {
    let prompt = build_prompt(pools)?;
    let attempts = max_retries + 1;
    for attempt in 0..attempts {
        let text = match api.complete(&prompt, round_index) {
            Ok(t) => t,
            Err(RefineError::ProviderError(e)) => return Err(RefineError::ProviderError(e)),
            Err(other) => return Err(other),
        };
        match parse_response(&text, pools.len(), round_index) {
            Ok(rounds) => return Ok(rounds),
            Err(e) => {
                log::warn!("round {round_index} attempt {}: parse failed: {e}", attempt + 1);
            }
        }
    }
    Err(RefineError::AllRetriesFailed { attempts })
}

/// Tallies votes for one topic across its successfully parsed rounds.
pub fn aggregate_votes(rounds: &[RefinementRound]) -> Result<TopicVotes, RefineError> {
    if rounds.is_empty() {
        return Err(RefineError::NoSuccessfulRounds);
    }
    let topic_id = rounds[0].topic_id;
    debug_assert!(rounds.iter().all(|r| r.topic_id == topic_id));
    let mut l1: BTreeMap<String, Vote> = BTreeMap::new();
    let mut l2: BTreeMap<String, Vote> = BTreeMap::new();
    for round in rounds {
        for (map, words) in [(&mut l1, &round.words_l1), (&mut l2, &round.words_l2)] {
            for word in words {
                map.entry(word.clone())
                    .and_modify(|v| {
                        v.count += 1;
                        v.first_round = v.first_round.min(round.round_index);
                    })
                    .or_insert(Vote { count: 1, first_round: round.round_index });
            }
        }
    }
    Ok(TopicVotes { topic_id, rounds_effective: rounds.len() as u32, l1, l2 })
}

fn select_side(votes: &BTreeMap<String, Vote>, top_m: usize) -> (Vec<String>, bool) {
    let mut ranked: Vec<(&String, &Vote)> = votes.iter().collect();
    ranked.sort_by(|(ta, va), (tb, vb)| {
        vb.count
            .cmp(&va.count)
            .then(va.first_round.cmp(&vb.first_round))
            .then(ta.cmp(tb))
    });
    let selected: Vec<String> =
        ranked.into_iter().take(top_m).map(|(t, _)| t.clone()).collect();
    let short = selected.len() < top_m;
    (selected, short)
}

/// Picks the Top-M words per language: descending vote count, then earliest
/// first-appearance round, then lexicographic. Short lists are flagged.
pub fn select_top_m(votes: &TopicVotes, top_m: usize) -> RefinedTopic {
    let (selected_l1, short_l1) = select_side(&votes.l1, top_m);
    let (selected_l2, short_l2) = select_side(&votes.l2, top_m);
    RefinedTopic {
        topic_id: votes.topic_id,
        votes_l1: votes.l1.iter().map(|(t, v)| (t.clone(), v.count)).collect(),
        votes_l2: votes.l2.iter().map(|(t, v)| (t.clone(), v.count)).collect(),
        selected_l1,
        selected_l2,
        short_l1,
        short_l2,
    }
}

// ===== tests =====
