//! Embedding store with cosine top-k retrieval.
//!
//! Texts are embedded by hashing space-padded character trigrams of the
//! normalized text into a fixed number of buckets and L2-normalizing the
//! counts. Working on characters keeps CJK and Latin text on the same path
//! without a tokenizer.
//!
//! The corpus persists as JSONL, one document per line. [`MemoryStore::open`]
//! attaches a file that every [`MemoryStore::add`] appends to;
//! [`MemoryStore::persist`] rewrites the whole file.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

pub const DEFAULT_DIM: usize = 256;

const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("duplicate doc_id {0:?}")]
    DuplicateId(String),
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(values: Vec<f64>) -> Self {
        let mut e = Self(values);
        let n = e.norm();
        if n > 0.0 {
            e.0.iter_mut().for_each(|v| *v /= n);
        }
        e
    }
}

/// Seeded FNV-1a; stable across platforms and releases.
fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(HASH_SEED ^ 0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Trigrams of the normalized text padded with one space on each side.
pub fn trigrams(text: &str) -> Vec<String> {
    let norm = text::normalize(text);
    if norm.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = std::iter::once(' ')
        .chain(norm.chars())
        .chain(std::iter::once(' '))
        .collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

pub fn embed_with_dim(text: &str, dim: usize) -> Embedding {
    let mut counts = vec![0.0; dim];
    for gram in trigrams(text) {
        counts[(stable_hash(gram.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    Embedding::normalized(counts)
}

pub fn embed(text: &str) -> Embedding {
    embed_with_dim(text, DEFAULT_DIM)
}

/// Cosine similarity; 0 when either vector has zero norm or dimensions differ.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    if a.dim() != b.dim() {
        return 0.0;
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub timestamp: u64,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_id: String,
    pub similarity: f64,
    pub rank: usize,
}

/// Shared handle for the many-readers-or-one-writer access pattern.
pub type SharedMemory = Arc<RwLock<MemoryStore>>;

#[derive(Debug, Default)]
pub struct MemoryStore {
    dim: usize,
    docs: Vec<Document>,
    ids: HashSet<String>,
    next_timestamp: u64,
    log: Option<PathBuf>,
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.docs == other.docs
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::with_dim(DEFAULT_DIM)
    }

    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            ..Default::default()
        }
    }

    pub fn into_shared(self) -> SharedMemory {
        Arc::new(RwLock::new(self))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn embed(&self, text: &str) -> Embedding {
        embed_with_dim(text, self.dim)
    }

    /// Embeds and appends a document, writing it to the attached log if any.
    pub fn add(&mut self, doc_id: impl Into<String>, text: impl Into<String>) -> Result<&Document, MemoryError> {
        let doc_id = doc_id.into();
        if self.ids.contains(&doc_id) {
            return Err(MemoryError::DuplicateId(doc_id));
        }
        let text = text.into();
        let doc = Document {
            embedding: self.embed(&text),
            doc_id,
            text,
            timestamp: self.next_timestamp,
        };
        if let Some(path) = &self.log {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&doc).expect("document serializes"))?;
        }
        self.insert(doc);
        Ok(self.docs.last().expect("just pushed"))
    }

    /// Inserts a pre-embedded document, e.g. one loaded from disk.
    pub fn insert_document(&mut self, doc: Document) -> Result<(), MemoryError> {
        if self.ids.contains(&doc.doc_id) {
            return Err(MemoryError::DuplicateId(doc.doc_id));
        }
        if self.docs.is_empty() {
            self.dim = doc.embedding.dim().max(1);
        }
        self.insert(doc);
        Ok(())
    }

    fn insert(&mut self, doc: Document) {
        self.next_timestamp = self.next_timestamp.max(doc.timestamp + 1);
        self.ids.insert(doc.doc_id.clone());
        self.docs.push(doc);
    }

    /// The `k` most similar documents, best first. Ties go to the earlier
    /// timestamp, then the smaller doc_id.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<RetrievalResult>, MemoryError> {
        if k == 0 {
            return Err(MemoryError::InvalidK);
        }
        let mut scored: Vec<(f64, &Document)> = self.docs.iter().map(|d| (cosine(query, &d.embedding), d)).collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.timestamp.cmp(&b.1.timestamp))
                .then_with(|| a.1.doc_id.cmp(&b.1.doc_id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (similarity, d))| RetrievalResult {
                doc_id: d.doc_id.clone(),
                similarity,
                rank: i + 1,
            })
            .collect())
    }

    pub fn query(&self, text: &str, k: usize) -> Result<Vec<RetrievalResult>, MemoryError> {
        self.top_k(&self.embed(text), k)
    }

    /// Writes the full corpus as JSONL, replacing the file.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let path = path.as_ref();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for d in &self.docs {
                serde_json::to_writer(&mut w, d).expect("document serializes");
                w.write_all(b"\n")?;
            }
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Reads a JSONL corpus. Any malformed line rejects the whole file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let mut store = Self::new();
        let reader = BufReader::new(File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| MemoryError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let doc: Document = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if !store.docs.is_empty() && doc.embedding.dim() != store.dim {
                return Err(malformed(format!(
                    "embedding has {} dims, corpus has {}",
                    doc.embedding.dim(),
                    store.dim
                )));
            }
            store.insert_document(doc).map_err(|e| malformed(e.to_string()))?;
        }
        Ok(store)
    }

    /// Loads `path` if it exists and appends future additions to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let mut store = if path.exists() { Self::load(path)? } else { Self::new() };
        store.log = Some(path.to_path_buf());
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec())
    }

    #[test]
    fn embedding_is_deterministic() {
        for t in ["", "open the browser", "打开浏览器", "UR10 fault"] {
            assert_eq!(embed(t), embed(t));
        }
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let e = embed("   ");
        assert_eq!(e.norm(), 0.0);
        assert_eq!(e.dim(), DEFAULT_DIM);
    }

    #[test]
    fn near_strings_are_more_similar() {
        // oracle: trigram sets {" ab","abc","bc "} vs {" ab","abd","bd "} share one of three
        let ab = cosine(&embed("abc"), &embed("abd"));
        let ax = cosine(&embed("abc"), &embed("xyz"));
        assert!((ab - 1.0 / 3.0).abs() < 1e-12, "{ab}");
        assert_eq!(ax, 0.0);
        assert!(ab < 1.0 && ab > ax);
    }

    #[test]
    fn cosine_examples() {
        let v = unit(&[0.3, -2.0, 5.0]);
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])), 0.0);
        let q = Embedding(vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0]);
        let d = Embedding(vec![1.0, 0.0, 0.0]);
        assert!((cosine(&q, &d) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert_eq!(cosine(&Embedding::zeros(3), &d), 0.0);
    }

    #[test]
    fn singleton_and_saturated_retrieval() {
        let mut m = MemoryStore::new();
        m.add("only", "robot arm manual").unwrap();
        let r = m.query("anything", 5).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].doc_id.as_str(), r[0].rank), ("only", 1));

        m.add("b", "maps").unwrap();
        m.add("c", "robot arm fault").unwrap();
        let r = m.query("robot arm fault", 10).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].doc_id, "c");
        assert!(r.windows(2).all(|p| p[0].similarity >= p[1].similarity));
        assert!(matches!(m.query("x", 0), Err(MemoryError::InvalidK)));
        assert!(MemoryStore::new().query("x", 3).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_earlier_timestamp() {
        let mut m = MemoryStore::new();
        m.add("z", "same text").unwrap();
        m.add("a", "same text").unwrap();
        let r = m.query("same text", 2).unwrap();
        assert_eq!(r[0].doc_id, "z");
    }

    #[test]
    fn duplicate_id_leaves_store_unchanged() {
        let mut m = MemoryStore::new();
        m.add("x", "one").unwrap();
        assert!(matches!(m.add("x", "two"), Err(MemoryError::DuplicateId(_))));
        assert_eq!(m.len(), 1);
        assert_eq!(m.get("x").unwrap().text, "one");
    }

    #[test]
    fn persist_load_round_trip_keeps_answers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = MemoryStore::new();
        for i in 0..100 {
            let words: Vec<String> = (0..rng.gen_range(1..8))
                .map(|_| (0..rng.gen_range(2..7)).map(|_| rng.gen_range(b'a'..=b'h') as char).collect())
                .collect();
            m.add(format!("doc-{i}"), words.join(" ")).unwrap();
        }
        m.persist(&path).unwrap();
        let back = MemoryStore::load(&path).unwrap();
        assert_eq!(back, m);
        for q in ["abc", "hag fed", "dead beef cafe"] {
            assert_eq!(back.query(q, 5).unwrap(), m.query(q, 5).unwrap());
        }
    }

    #[test]
    fn open_appends_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        {
            let mut m = MemoryStore::open(&path).unwrap();
            m.add("a", "first").unwrap();
            m.add("b", "second").unwrap();
        }
        let mut m = MemoryStore::open(&path).unwrap();
        assert_eq!(m.len(), 2);
        m.add("c", "third").unwrap();
        assert_eq!(m.get("c").unwrap().timestamp, 2);
        assert_eq!(MemoryStore::load(&path).unwrap().len(), 3);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut m = MemoryStore::new();
        m.add("a", "ok").unwrap();
        m.persist(&path).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(f, "{{not json").unwrap();
        match MemoryStore::load(&path) {
            Err(MemoryError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn concurrent_readers() {
        let mut m = MemoryStore::new();
        for i in 0..20 {
            m.add(format!("d{i}"), format!("document number {i}")).unwrap();
        }
        let shared = m.into_shared();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let s = Arc::clone(&shared);
                std::thread::spawn(move || s.read().unwrap().query("document number 7", 1).unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap()[0].doc_id, "d7");
        }
        shared.write().unwrap().add("late", "x").unwrap();
        assert_eq!(shared.read().unwrap().len(), 21);
    }

    proptest! {
        #[test]
        fn nonempty_embeddings_have_unit_norm(s in "\\PC{1,40}") {
            let e = embed(&s);
            if !text::normalize(&s).is_empty() {
                prop_assert!((e.norm() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let (a, b) = (Embedding(a), Embedding(b));
            let ab = cosine(&a, &b);
            prop_assert_eq!(ab, cosine(&b, &a));
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn retrieval_ignores_insertion_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let docs: Vec<Document> = (0..8)
                .map(|i| Document {
                    doc_id: format!("d{i}"),
                    text: String::new(),
                    timestamp: i,
                    embedding: unit(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()),
                })
                .collect();
            let q = unit(&[1.0, 0.5, -0.2, 0.1]);
            let mut fwd = MemoryStore::with_dim(4);
            let mut rev = MemoryStore::with_dim(4);
            docs.iter().for_each(|d| fwd.insert_document(d.clone()).unwrap());
            docs.iter().rev().for_each(|d| rev.insert_document(d.clone()).unwrap());
            prop_assert_eq!(fwd.top_k(&q, 3).unwrap(), rev.top_k(&q, 3).unwrap());
        }
    }
}
