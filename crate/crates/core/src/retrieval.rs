//! Corpus chunking, hashing-based embeddings and cosine retrieval.
//!
//! Queries are grounded against a local corpus before decomposition: the
//! corpus is split into overlapping character windows, each window is
//! embedded with a seeded feature-hashing projector, and the top-scoring
//! windows for a query are injected into the decomposition prompt.
//!
//! The embedder is intentionally cheap and fully deterministic — retrieval
//! here exists to exercise the search stage of the scheduler and to make
//! runs reproducible, not to compete with a real embedding service. The
//! [`TextEmbedder`] trait is the seam where a real service would plug in.

use crate::num::Scalar;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid chunk parameters: {0}")]
    InvalidChunkParams(String),
    #[error("invalid embedding dimension: {0}")]
    InvalidDimension(String),
    #[error("search over an empty index")]
    EmptyIndex,
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("corpus ingestion failed: {0}")]
    Corpus(String),
    #[error("index persistence failed: {0}")]
    Persistence(String),
}

/// Character-window chunking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        ChunkSpec {
            chunk_chars: 512,
            overlap_chars: 64,
        }
    }
}

impl ChunkSpec {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.chunk_chars == 0 {
            return Err(RetrievalError::InvalidChunkParams(
                "chunk size must be positive".into(),
            ));
        }
        if self.overlap_chars >= self.chunk_chars {
            return Err(RetrievalError::InvalidChunkParams(format!(
                "overlap {} must be smaller than chunk size {}",
                self.overlap_chars, self.chunk_chars
            )));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.chunk_chars - self.overlap_chars
    }
}

/// One retrievable window of a source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    /// Position of this chunk within its document, starting at 0.
    pub seq: usize,
    pub text: String,
    /// Character span `[start, end)` in the source document.
    pub span: (usize, usize),
}

/// Splits one document into overlapping windows.
///
/// Consecutive chunks share `overlap_chars` characters. A final window that
/// would sit entirely inside the previous chunk's tail is not emitted, so
/// every chunk contributes at least one new character. Empty documents
/// produce no chunks.
pub fn chunk_text(doc_id: &str, text: &str, spec: &ChunkSpec) -> Result<Vec<Chunk>, RetrievalError> {
    spec.validate()?;
    let chars: Vec<char> = text.chars().collect();
    let len = chars.len();
    let mut out = Vec::new();
    if len == 0 {
        return Ok(out);
    }
    let mut start = 0;
    while start == 0 || start + spec.overlap_chars < len {
        let end = (start + spec.chunk_chars).min(len);
        out.push(Chunk {
            doc_id: doc_id.to_string(),
            seq: out.len(),
            text: chars[start..end].iter().collect(),
            span: (start, end),
        });
        if end == len {
            break;
        }
        start += spec.stride();
    }
    Ok(out)
}

/// A document collection ready for chunking.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    /// (doc id, text), in deterministic ingestion order.
    pub docs: Vec<(String, String)>,
}

impl Corpus {
    pub fn from_texts<I, S1, S2>(docs: I) -> Self
    where
        I: IntoIterator<Item = (S1, S2)>,
        S1: Into<String>,
        S2: Into<String>,
    {
        Corpus {
            docs: docs
                .into_iter()
                .map(|(id, text)| (id.into(), text.into()))
                .collect(),
        }
    }

    /// Loads every `.txt` file in a directory; the doc id is the file stem.
    /// Files are taken in name order so ingestion is deterministic.
    pub fn from_dir(dir: &Path) -> Result<Self, RetrievalError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| RetrievalError::Corpus(format!("{}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        paths.sort();
        let mut docs = Vec::new();
        for path in paths {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| RetrievalError::Corpus(format!("{}: {e}", path.display())))?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            docs.push((id, text));
        }
        Ok(Corpus { docs })
    }

    /// Loads a JSON-lines file of `{"doc_id": ..., "text": ...}` records.
    pub fn from_jsonl(path: &Path) -> Result<Self, RetrievalError> {
        #[derive(Deserialize)]
        struct Line {
            doc_id: String,
            text: String,
        }
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RetrievalError::Corpus(format!("{}: {e}", path.display())))?;
        let mut docs = Vec::new();
        for (n, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(line).map_err(|e| {
                RetrievalError::Corpus(format!("{} line {}: {e}", path.display(), n + 1))
            })?;
            docs.push((rec.doc_id, rec.text));
        }
        Ok(Corpus { docs })
    }
}

/// An embedded text: an L2-normalized vector plus the pre-normalization
/// magnitude. `norm == 0` marks a zero-information text (e.g. empty or
/// punctuation-only); such embeddings are never admitted into an index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding<S> {
    pub vector: Vec<S>,
    pub norm: S,
}

impl<S: Scalar> Embedding<S> {
    pub fn is_zero(&self) -> bool {
        self.norm == S::zero()
    }
}

/// Pluggable text-to-vector interface.
pub trait TextEmbedder<S: Scalar> {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding<S>, RetrievalError>;
}

/// Seeded feature-hashing bag-of-terms projector.
///
/// Each lowercase alphanumeric term hashes to a coordinate and a sign; term
/// counts accumulate and the result is L2-normalized. Identical text always
/// embeds identically, and unrelated texts mostly land on disjoint
/// coordinates, which is all cosine retrieval needs here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

pub const DEFAULT_EMBED_DIM: usize = 256;

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            dimension: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::InvalidDimension(
                "dimension must be positive".into(),
            ));
        }
        Ok(HashEmbedder { dimension, seed })
    }

    fn hash_term(&self, term: &str) -> u64 {
        // FNV-1a, offset perturbed by the seed for reproducible variants.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for b in term.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

/// Lowercased alphanumeric runs of `text`.
fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

impl<S: Scalar> TextEmbedder<S> for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding<S>, RetrievalError> {
        let mut vector = vec![S::zero(); self.dimension];
        for term in terms(text) {
            let h = self.hash_term(&term);
            let sign = if h & 1 == 0 { S::one() } else { -S::one() };
            let idx = ((h >> 1) % self.dimension as u64) as usize;
            vector[idx] += sign;
        }
        let norm_sq = vector.iter().fold(S::zero(), |acc, &v| acc + v * v);
        let norm = norm_sq.sqrt();
        if norm > S::zero() {
            for v in &mut vector {
                *v /= norm;
            }
        }
        Ok(Embedding { vector, norm })
    }
}

/// Cosine similarity of two already-normalized embeddings.
pub fn cosine<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>) -> S {
    if a.is_zero() || b.is_zero() {
        return S::zero();
    }
    a.vector
        .iter()
        .zip(&b.vector)
        .fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Candidate ordering for top-k selection: higher score wins, equal scores
/// fall back to the earlier entry (ascending insertion index).
struct Scored<S> {
    score: S,
    idx: usize,
}

impl<S: Scalar> PartialEq for Scored<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<S: Scalar> Eq for Scored<S> {}
impl<S: Scalar> PartialOrd for Scored<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Scalar> Ord for Scored<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .to_f64_lossy()
            .total_cmp(&other.score.to_f64_lossy())
            .then(other.idx.cmp(&self.idx))
    }
}

/// In-memory vector index over chunk embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorIndex<S> {
    pub dimension: usize,
    pub entries: Vec<IndexEntry<S>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry<S> {
    pub embedding: Embedding<S>,
    pub chunk: Chunk,
}

impl<S: Scalar> VectorIndex<S> {
    pub fn new(dimension: usize) -> Self {
        VectorIndex {
            dimension,
            entries: Vec::new(),
        }
    }

    /// Adds a chunk; zero-information embeddings are silently excluded.
    /// Returns whether the chunk was admitted.
    pub fn insert(&mut self, embedding: Embedding<S>, chunk: Chunk) -> Result<bool, RetrievalError> {
        if embedding.vector.len() != self.dimension {
            return Err(RetrievalError::InvalidDimension(format!(
                "embedding has {} dims, index expects {}",
                embedding.vector.len(),
                self.dimension
            )));
        }
        if embedding.is_zero() {
            return Ok(false);
        }
        self.entries.push(IndexEntry { embedding, chunk });
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices and scores of the `k` best entries, best first. Ties resolve
    /// to the earlier entry.
    pub fn top_k(&self, query: &Embedding<S>, k: usize) -> Result<Vec<(usize, S)>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let mut heap: BinaryHeap<std::cmp::Reverse<Scored<S>>> = BinaryHeap::new();
        for (idx, entry) in self.entries.iter().enumerate() {
            let cand = Scored {
                score: cosine(query, &entry.embedding),
                idx,
            };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(cand));
            } else if let Some(worst) = heap.peek() {
                if cand > worst.0 {
                    heap.pop();
                    heap.push(std::cmp::Reverse(cand));
                }
            }
        }
        // into_sorted_vec on Reverse-wrapped items is descending by the inner
        // ordering, i.e. best first.
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| (r.0.idx, r.0.score))
            .collect())
    }
}

/// End-to-end retriever: chunker + embedder + index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Retriever<S> {
    pub embedder: HashEmbedder,
    pub index: VectorIndex<S>,
}

impl<S: Scalar> Retriever<S> {
    /// Chunks and embeds every document of the corpus.
    pub fn build(
        corpus: &Corpus,
        spec: &ChunkSpec,
        embedder: HashEmbedder,
    ) -> Result<Self, RetrievalError> {
        let mut index = VectorIndex::new(embedder.dimension);
        for (doc_id, text) in &corpus.docs {
            for chunk in chunk_text(doc_id, text, spec)? {
                let embedding = embedder.embed(&chunk.text)?;
                index.insert(embedding, chunk)?;
            }
        }
        Ok(Retriever { embedder, index })
    }

    /// The `k` best chunks for a free-text query, best first.
    pub fn top_k(&self, query: &str, k: usize) -> Result<Vec<(Chunk, S)>, RetrievalError> {
        let q = self.embedder.embed(query)?;
        Ok(self
            .index
            .top_k(&q, k)?
            .into_iter()
            .map(|(idx, score)| (self.index.entries[idx].chunk.clone(), score))
            .collect())
    }

    /// Persists the whole index (embedder parameters included) as one JSON
    /// file, so a corpus needs embedding only once.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file = std::fs::File::create(path)
            .map_err(|e| RetrievalError::Persistence(format!("{}: {e}", path.display())))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| RetrievalError::Persistence(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file = std::fs::File::open(path)
            .map_err(|e| RetrievalError::Persistence(format!("{}: {e}", path.display())))?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| RetrievalError::Persistence(e.to_string()))
    }
}
