//! Word, document, and topic embeddings in one shared vector space.
//!
//! Word vectors come from a word2vec-style text file, document vectors from a
//! JSON-lines file or an encoder, and topic vectors from encoding the refined
//! word list. The encoder is pluggable: a remote HTTP service, a fixture
//! directory keyed by the SHA-256 of the input text, or a deterministic
//! mean-of-words fallback that needs no service at all. Every vector returned
//! from this module is unit-norm so downstream cosine similarity reduces to a
//! dot product.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{BowDocument, Vocabulary};
use crate::math::l2_normalize;
use crate::refine::RefinedTopic;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch for {0:?}")]
    DimMismatch(String),
    #[error("non-finite vector for {0:?}")]
    NonFiniteVector(String),
    #[error("zero vector for {0:?} cannot be normalized")]
    ZeroVector(String),
    #[error("malformed line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("no embeddable words for topic {0}")]
    NoCoveredWords(usize),
    #[error("no embedding for document {0:?}")]
    MissingDocEmbedding(String),
    #[error("encoder provider error: {0}")]
    ProviderError(String),
}

/// Immutable store of word and document vectors of a fixed dimension.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    word_vecs: HashMap<String, Vec<f64>>,
    doc_vecs: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    /// Empty table of a fixed dimension, for programmatic construction.
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, ..Default::default() }
    }

    /// Inserts a word vector; panics on a dimension mismatch or non-finite
    /// values (file loaders report these as errors instead).
    pub fn insert_word(&mut self, token: &str, vec: Vec<f64>) {
        self.check_and_insert_word(token.to_string(), vec).expect("word embedding insert");
    }

    /// Inserts a document vector under a document id.
    pub fn insert_doc(&mut self, id: &str, vec: Vec<f64>) {
        assert_eq!(vec.len(), self.dim, "document embedding dimension");
        assert!(vec.iter().all(|v| v.is_finite()), "document embedding must be finite");
        self.doc_vecs.insert(id.to_string(), vec);
    }

    pub fn word_vec(&self, token: &str) -> Option<&[f64]> {
        self.word_vecs.get(token).map(|v| v.as_slice())
    }

    /// Unit-norm copy of a word vector, if present and normalizable.
    pub fn unit_word_vec(&self, token: &str) -> Option<Vec<f64>> {
        let mut v = self.word_vecs.get(token)?.clone();
        l2_normalize(&mut v).then_some(v)
    }

    pub fn doc_vec(&self, id: &str) -> Option<&[f64]> {
        self.doc_vecs.get(id).map(|v| v.as_slice())
    }

    pub fn word_count(&self) -> usize {
        self.word_vecs.len()
    }

    fn check_and_insert_word(&mut self, token: String, vec: Vec<f64>) -> Result<(), EmbedError> {
        if vec.len() != self.dim {
            return Err(EmbedError::DimMismatch(token));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFiniteVector(token));
        }
        self.word_vecs.insert(token, vec);
        Ok(())
    }
}

/// Loads word vectors from the text format `<count> <dim>` header followed by
/// `<token> v1 .. v<dim>` rows.
pub fn load_word_embeddings(path: &Path) -> Result<EmbeddingTable, EmbedError> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| EmbedError::MalformedHeader("empty file".into()))??;
    let mut parts = header.split_whitespace();
    let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
        (Some(c), Some(d), None) => {
            let count: usize =
                c.parse().map_err(|_| EmbedError::MalformedHeader(header.clone()))?;
            let dim: usize =
                d.parse().map_err(|_| EmbedError::MalformedHeader(header.clone()))?;
            (count, dim)
        }
        _ => return Err(EmbedError::MalformedHeader(header)),
    };
    if dim == 0 {
        return Err(EmbedError::MalformedHeader(header));
    }
    let mut table = EmbeddingTable { dim, ..Default::default() };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let token = it
            .next()
            .ok_or_else(|| EmbedError::MalformedHeader("blank row".into()))?
            .to_string();
        let vec: Vec<f64> = it
            .map(|s| s.parse::<f64>().map_err(|_| EmbedError::NonFiniteVector(token.clone())))
            .collect::<Result<_, _>>()?;
        table.check_and_insert_word(token, vec)?;
    }
    if table.word_vecs.len() != count {
        log::warn!(
            "embedding header declared {count} words, file contained {}",
            table.word_vecs.len()
        );
    }
    Ok(table)
}

#[derive(Deserialize)]
struct DocVecLine {
    id: String,
    vec: Vec<f64>,
}

/// Merges document vectors from a JSON-lines `{"id":…, "vec":[…]}` file into
/// the table; sets the table dimension when it holds no word vectors yet.
pub fn load_doc_embeddings(path: &Path, table: &mut EmbeddingTable) -> Result<(), EmbedError> {
    let file = fs::File::open(path)?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DocVecLine = serde_json::from_str(&line)
            .map_err(|e| EmbedError::MalformedLine { line: lineno + 1, msg: e.to_string() })?;
        if table.dim == 0 {
            table.dim = row.vec.len();
        }
        if row.vec.len() != table.dim {
            return Err(EmbedError::DimMismatch(row.id));
        }
        if row.vec.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFiniteVector(row.id));
        }
        table.doc_vecs.insert(row.id, row.vec);
    }
    Ok(())
}

/// How text is turned into vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncMode {
    /// HTTP service: POST `{"text": str}` returns `{"vec": [floats]}`.
    Remote,
    /// Directory of `<sha256-of-text>.json` files holding `{"vec": [floats]}`.
    Fixture,
    /// Normalized (count-weighted for documents) mean of word vectors.
    MeanOfWords,
}

/// Encoder backend plus a memo cache shared across calls.
pub struct EncoderProvider {
    pub mode: EncMode,
    pub endpoint: Option<String>,
    pub fixture_dir: Option<PathBuf>,
    pub timeout: Duration,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl EncoderProvider {
    pub fn mean_of_words() -> Self {
        Self::new(EncMode::MeanOfWords, None, None)
    }

    pub fn fixture(dir: PathBuf) -> Self {
        Self::new(EncMode::Fixture, None, Some(dir))
    }

    pub fn remote(endpoint: String) -> Self {
        Self::new(EncMode::Remote, Some(endpoint), None)
    }

    fn new(mode: EncMode, endpoint: Option<String>, fixture_dir: Option<PathBuf>) -> Self {
        EncoderProvider {
            mode,
            endpoint,
            fixture_dir,
            timeout: Duration::from_secs(30),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Encodes a text through the fixture directory or the remote service,
    /// memoizing per input; not available in mean-of-words mode.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if let Some(hit) = self.cache.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        let mut vec = match self.mode {
            EncMode::Fixture => self.encode_fixture(text)?,
            EncMode::Remote => self.encode_remote(text)?,
            EncMode::MeanOfWords => {
                return Err(EmbedError::ProviderError(
                    "mean-of-words mode cannot encode raw text".into(),
                ))
            }
        };
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFiniteVector(text.to_string()));
        }
        if !l2_normalize(&mut vec) {
            return Err(EmbedError::ZeroVector(text.to_string()));
        }
        self.cache.lock().unwrap().insert(text.to_string(), vec.clone());
        Ok(vec)
    }

    fn encode_fixture(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let dir = self
            .fixture_dir
            .as_ref()
            .ok_or_else(|| EmbedError::ProviderError("fixture mode needs a directory".into()))?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let name = format!("{:x}.json", hasher.finalize());
        let path = dir.join(name);
        let data = fs::read_to_string(&path).map_err(|e| {
            EmbedError::ProviderError(format!("fixture {} unreadable: {e}", path.display()))
        })?;
        #[derive(Deserialize)]
        struct VecReply {
            vec: Vec<f64>,
        }
        let reply: VecReply = serde_json::from_str(&data)
            .map_err(|e| EmbedError::ProviderError(format!("fixture parse: {e}")))?;
        Ok(reply.vec)
    }

    fn encode_remote(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let endpoint = self
            .endpoint
            .as_ref()
            .ok_or_else(|| EmbedError::ProviderError("remote mode needs an endpoint".into()))?;
        let resp = ureq::post(endpoint)
            .timeout(self.timeout)
            .send_json(ureq::json!({ "text": text }));
        match resp {
            Ok(r) => {
                #[derive(Deserialize)]
                struct VecReply {
                    vec: Vec<f64>,
                }
                let reply: VecReply = r
                    .into_json()
                    .map_err(|e| EmbedError::ProviderError(format!("bad reply: {e}")))?;
                Ok(reply.vec)
            }
            Err(ureq::Error::Status(code, _)) if code == 401 || code == 403 => {
                Err(EmbedError::ProviderError(format!("auth: http status {code}")))
            }
            Err(ureq::Error::Status(code, _)) => {
                Err(EmbedError::ProviderError(format!("http status {code}")))
            }
            Err(e) => Err(EmbedError::ProviderError(format!("transport: {e}"))),
        }
    }
}

/// Text form of a refined topic: L1 words then L2 words, space-separated.
pub fn topic_text(refined: &RefinedTopic) -> String {
    let mut parts: Vec<&str> = refined.selected_l1.iter().map(|s| s.as_str()).collect();
    parts.extend(refined.selected_l2.iter().map(|s| s.as_str()));
    parts.join(" ")
}

/// Embeds a refined topic: encodes the joined word list (remote/fixture) or
/// averages the available word vectors (mean-of-words). Unit-norm result.
pub fn topic_embedding(
    refined: &RefinedTopic,
    provider: &EncoderProvider,
    table: &EmbeddingTable,
) -> Result<Vec<f64>, EmbedError> {
    match provider.mode {
        EncMode::Remote | EncMode::Fixture => provider.encode_text(&topic_text(refined)),
        EncMode::MeanOfWords => {
            let mut sum = vec![0.0; table.dim.max(1)];
            let mut covered = 0usize;
            for word in refined.selected_l1.iter().chain(refined.selected_l2.iter()) {
                if let Some(vec) = table.word_vec(word) {
                    if sum.len() != vec.len() {
                        sum = vec![0.0; vec.len()];
                    }
                    for (s, v) in sum.iter_mut().zip(vec) {
                        *s += v;
                    }
                    covered += 1;
                }
            }
            if covered == 0 {
                return Err(EmbedError::NoCoveredWords(refined.topic_id));
            }
            for s in &mut sum {
                *s /= covered as f64;
            }
            if !l2_normalize(&mut sum) {
                return Err(EmbedError::ZeroVector(format!("topic {}", refined.topic_id)));
            }
            Ok(sum)
        }
    }
}

/// Embeds a document: precomputed vectors win; otherwise mean-of-words mode
/// averages the document's word vectors weighted by counts, and remote mode
/// encodes the document's tokens joined by spaces. Unit-norm result.
pub fn document_embedding(
    doc: &BowDocument,
    vocab: &Vocabulary,
    provider: &EncoderProvider,
    table: &EmbeddingTable,
) -> Result<Vec<f64>, EmbedError> {
    if let Some(stored) = table.doc_vec(&doc.id) {
        let mut v = stored.to_vec();
        if !l2_normalize(&mut v) {
            return Err(EmbedError::ZeroVector(doc.id.clone()));
        }
        return Ok(v);
    }
    match provider.mode {
        EncMode::Fixture => Err(EmbedError::MissingDocEmbedding(doc.id.clone())),
        EncMode::Remote => {
            let tokens: Vec<&str> =
                doc.bow.keys().filter_map(|&i| vocab.token(i)).collect();
            provider.encode_text(&tokens.join(" "))
        }
        EncMode::MeanOfWords => {
            let mut sum = vec![0.0; table.dim.max(1)];
            let mut total = 0.0;
            for (&idx, &count) in &doc.bow {
                let Some(token) = vocab.token(idx) else { continue };
                let Some(vec) = table.word_vec(token) else { continue };
                for (s, v) in sum.iter_mut().zip(vec) {
                    *s += count as f64 * v;
                }
                total += count as f64;
            }
            if total == 0.0 {
                return Err(EmbedError::MissingDocEmbedding(doc.id.clone()));
            }
            for s in &mut sum {
                *s /= total;
            }
            if !l2_normalize(&mut sum) {
                return Err(EmbedError::ZeroVector(doc.id.clone()));
            }
            Ok(sum)
        }
    }
}

// ===== tests =====
