//! Vocabulary and bilingual bag-of-words corpus loading.
//!
//! Vocab files hold one token per line (the line number is the 0-based word
//! index). Corpus files are JSON-lines; each line carries a document id, a
//! language tag, sparse `[index, count]` pairs, and optional `label` /
//! `pair_id` fields. Translation pairs share a `pair_id` across languages.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate token {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("empty vocabulary file")]
    EmptyFile,
    #[error("malformed line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("bad language tag {tag:?} at line {line} (expected \"l1\" or \"l2\")")]
    BadLangTag { tag: String, line: usize },
    #[error("document {id:?}: bow index {index} out of vocabulary (size {vocab_size})")]
    IndexOutOfVocab { id: String, index: u32, vocab_size: usize },
    #[error("document {id:?}: duplicate bow index {index}")]
    DuplicateIndex { id: String, index: u32 },
    #[error("document {id:?}: bow count {count} at index {index} must be >= 1")]
    NonPositiveCount { id: String, index: u32, count: i64 },
    #[error("document {id:?} has an empty bag of words")]
    EmptyBow { id: String },
    #[error("duplicate document id {id:?}")]
    DuplicateId { id: String },
    #[error("pair {pair_id:?} has two documents in the same language")]
    ConflictingPair { pair_id: String },
    #[error("pair {pair_id:?} occurs in only one language")]
    DanglingPair { pair_id: String },
    #[error("corpus contains no documents")]
    EmptyCorpus,
}

/// Which side of the bilingual corpus a document belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::L1 => Lang::L2,
            Lang::L2 => Lang::L1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Lang::L1 => "l1",
            Lang::L2 => "l2",
        }
    }
}

/// Line-indexed token list with reverse lookup.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index_of: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from unique tokens, indexing them in order.
    pub fn new(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::EmptyFile);
        }
        let mut index_of = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index_of.insert(tok.clone(), i as u32).is_some() {
                return Err(CorpusError::DuplicateToken { token: tok.clone(), line: i });
            }
        }
        Ok(Vocabulary { tokens, index_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(|s| s.as_str())
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.index_of.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Loads a vocabulary file: UTF-8, one token per line, 0-based indices.
pub fn load_vocab(path: &Path) -> Result<Vocabulary, CorpusError> {
    let file = fs::File::open(path)?;
    let mut tokens = Vec::new();
    for line in BufReader::new(file).lines() {
        tokens.push(line?);
    }
    // A trailing newline produces one empty last entry; ignore it.
    if tokens.last().is_some_and(|t| t.is_empty()) {
        tokens.pop();
    }
    Vocabulary::new(tokens)
}

/// One bag-of-words document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowDocument {
    pub id: String,
    pub lang: Lang,
    /// Sparse word index -> count map; counts are >= 1.
    pub bow: BTreeMap<u32, u32>,
    pub label: Option<i64>,
    pub pair_id: Option<String>,
}

impl BowDocument {
    /// Total token count (sum of sparse counts).
    pub fn total_count(&self) -> u64 {
        self.bow.values().map(|&c| c as u64).sum()
    }
}

/// Wire format of one corpus line.
#[derive(Serialize, Deserialize)]
struct DocLine {
    id: String,
    lang: String,
    bow: Vec<(u32, i64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair_id: Option<String>,
}

/// A validated bilingual corpus with its two vocabularies.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub docs: Vec<BowDocument>,
    pub vocab1: Vocabulary,
    pub vocab2: Vocabulary,
    /// pair_id -> (position of the L1 doc, position of the L2 doc) in `docs`.
    pub pair_index: BTreeMap<String, (usize, usize)>,
}

impl Corpus {
    pub fn vocab(&self, lang: Lang) -> &Vocabulary {
        match lang {
            Lang::L1 => &self.vocab1,
            Lang::L2 => &self.vocab2,
        }
    }

    /// Assembles and validates a corpus from loaded documents.
    pub fn new(
        docs: Vec<BowDocument>,
        vocab1: Vocabulary,
        vocab2: Vocabulary,
    ) -> Result<Self, CorpusError> {
        if docs.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut seen_ids = HashMap::new();
        for (pos, doc) in docs.iter().enumerate() {
            if seen_ids.insert(doc.id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateId { id: doc.id.clone() });
            }
        }
        let mut halves: BTreeMap<String, (Option<usize>, Option<usize>)> = BTreeMap::new();
        for (pos, doc) in docs.iter().enumerate() {
            if let Some(pid) = &doc.pair_id {
                let entry = halves.entry(pid.clone()).or_default();
                let slot = match doc.lang {
                    Lang::L1 => &mut entry.0,
                    Lang::L2 => &mut entry.1,
                };
                if slot.is_some() {
                    return Err(CorpusError::ConflictingPair { pair_id: pid.clone() });
                }
                *slot = Some(pos);
            }
        }
        let mut pair_index = BTreeMap::new();
        for (pid, (a, b)) in halves {
            match (a, b) {
                (Some(a), Some(b)) => {
                    pair_index.insert(pid, (a, b));
                }
                _ => return Err(CorpusError::DanglingPair { pair_id: pid }),
            }
        }
        Ok(Corpus { docs, vocab1, vocab2, pair_index })
    }
}

/// Loads and validates a JSON-lines corpus against the two vocabularies.
pub fn load_corpus(
    path: &Path,
    vocab1: Vocabulary,
    vocab2: Vocabulary,
) -> Result<Corpus, CorpusError> {
    let file = fs::File::open(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: DocLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedLine { line: lineno, msg: e.to_string() })?;
        let lang = match raw.lang.as_str() {
            "l1" => Lang::L1,
            "l2" => Lang::L2,
            other => {
                return Err(CorpusError::BadLangTag { tag: other.to_string(), line: lineno })
            }
        };
        let vocab_size = match lang {
            Lang::L1 => vocab1.len(),
            Lang::L2 => vocab2.len(),
        };
        let mut bow = BTreeMap::new();
        for (index, count) in raw.bow {
            if index as usize >= vocab_size {
                return Err(CorpusError::IndexOutOfVocab { id: raw.id, index, vocab_size });
            }
            if count < 1 {
                return Err(CorpusError::NonPositiveCount { id: raw.id, index, count });
            }
            if bow.insert(index, count as u32).is_some() {
                return Err(CorpusError::DuplicateIndex { id: raw.id, index });
            }
        }
        if bow.is_empty() {
            return Err(CorpusError::EmptyBow { id: raw.id });
        }
        docs.push(BowDocument { id: raw.id, lang, bow, label: raw.label, pair_id: raw.pair_id });
    }
    Corpus::new(docs, vocab1, vocab2)
}

/// Serializes a corpus back to the JSON-lines format accepted by
/// [`load_corpus`]; a load/save/load round trip is structure-preserving.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for doc in &corpus.docs {
        let line = DocLine {
            id: doc.id.clone(),
            lang: doc.lang.as_str().to_string(),
            bow: doc.bow.iter().map(|(&i, &c)| (i, c as i64)).collect(),
            label: doc.label,
            pair_id: doc.pair_id.clone(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| CorpusError::MalformedLine { line: 0, msg: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ===== tests =====
