//! Demonstration candidate pools: Okapi BM25 and cosine retrieval over two
//! views of each demonstration, plus seeded samples from the bottom half of
//! every ranking.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, Query};
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;
use crate::rng;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_POOL_K: usize = 16;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    doc_term_freqs: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    doc_freqs: HashMap<String, usize>,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(corpus: &[(String, S)]) -> Result<Self> {
        Self::with_params(corpus, BM25_K1, BM25_B)
    }

    pub fn with_params<S: AsRef<str>>(corpus: &[(String, S)], k1: f64, b: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptySet("BM25 corpus".into()));
        }
        let mut ids = Vec::with_capacity(corpus.len());
        let mut doc_term_freqs = Vec::with_capacity(corpus.len());
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut doc_freqs: HashMap<String, usize> = HashMap::new();
        for (id, text) in corpus {
            let tokens = tokenize(text.as_ref());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freqs.entry(t.clone()).or_default() += 1;
            }
            ids.push(id.clone());
            doc_lengths.push(tokens.len());
            doc_term_freqs.push(tf);
        }
        let avg_doc_length = doc_lengths.iter().sum::<usize>() as f64 / corpus.len() as f64;
        Ok(Bm25Index {
            ids,
            doc_term_freqs,
            doc_lengths,
            avg_doc_length,
            doc_freqs,
            k1,
            b,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freqs.get(term).copied().unwrap_or(0)
    }

    pub fn doc_length(&self, i: usize) -> usize {
        self.doc_lengths[i]
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores every document, best first; ties by ascending id.
    pub fn scores(&self, query_text: &str) -> Vec<(String, f64)> {
        let terms = tokenize(query_text);
        let ranked = (0..self.len())
            .map(|i| {
                let tf = &self.doc_term_freqs[i];
                let norm = if self.avg_doc_length > 0.0 {
                    self.doc_lengths[i] as f64 / self.avg_doc_length
                } else {
                    0.0
                };
                let score: f64 = terms
                    .iter()
                    .map(|t| {
                        let f = tf.get(t).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            return 0.0;
                        }
                        self.idf(t) * f * (self.k1 + 1.0) / (f + self.k1 * (1.0 - self.b + self.b * norm))
                    })
                    .sum();
                (self.ids[i].clone(), score)
            })
            .collect();
        rank(ranked)
    }
}

fn rank(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Cosine similarity of `query_vec` against every stored vector, best first.
pub fn dense_scores(store: &EmbeddingStore, query_vec: &[f32]) -> Result<Vec<(String, f64)>> {
    if query_vec.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            found: query_vec.len(),
        });
    }
    let scored = store
        .ids()
        .iter()
        .map(|id| (id.clone(), cosine(store.get(id).expect("listed id"), query_vec)))
        .collect();
    Ok(rank(scored))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RetrievalConfig {
    #[serde(rename = "bm25-pair")]
    Bm25Pair,
    #[serde(rename = "bm25-answer")]
    Bm25Answer,
    #[serde(rename = "dense-pair")]
    DensePair,
    #[serde(rename = "dense-answer")]
    DenseAnswer,
}

impl RetrievalConfig {
    pub const ALL: [RetrievalConfig; 4] = [
        RetrievalConfig::Bm25Pair,
        RetrievalConfig::Bm25Answer,
        RetrievalConfig::DensePair,
        RetrievalConfig::DenseAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalConfig::Bm25Pair => "bm25-pair",
            RetrievalConfig::Bm25Answer => "bm25-answer",
            RetrievalConfig::DensePair => "dense-pair",
            RetrievalConfig::DenseAnswer => "dense-answer",
        }
    }
}

impl fmt::Display for RetrievalConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Retrieved,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub example_id: String,
    pub config: RetrievalConfig,
    /// 1-based rank in the config's full ranking.
    pub rank: usize,
    pub score: f64,
    pub provenance: Provenance,
}

/// One line of `pool.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub query_id: String,
    pub k: usize,
    pub entries: Vec<PoolEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CandidatePool {
    pub fn retrieved(&self, config: RetrievalConfig) -> Vec<&PoolEntry> {
        self.entries
            .iter()
            .filter(|e| e.config == config && e.provenance == Provenance::Retrieved)
            .collect()
    }

    pub fn random_tail(&self) -> Vec<&PoolEntry> {
        self.entries.iter().filter(|e| e.provenance == Provenance::Random).collect()
    }

    /// Distinct candidate ids, ascending.
    pub fn deduplicated(&self) -> Vec<String> {
        let ids: BTreeSet<&str> = self.entries.iter().map(|e| e.example_id.as_str()).collect();
        ids.into_iter().map(String::from).collect()
    }
}

/// Embedding sidecars for the dense configs. `query` holds vectors for the
/// query inputs, `pair` for rendered demonstrations and `answer` for the
/// answers alone.
#[derive(Debug, Clone, Copy)]
pub struct DenseViews<'a> {
    pub query: &'a EmbeddingStore,
    pub pair: &'a EmbeddingStore,
    pub answer: &'a EmbeddingStore,
}

/// Prebuilt retrievers over a fixed demonstration bank, reused across
/// queries.
pub struct PoolBuilder<'a> {
    bank_ids: Vec<String>,
    bm25_pair: Bm25Index,
    bm25_answer: Bm25Index,
    dense: DenseViews<'a>,
    dense_pair: EmbeddingStore,
    dense_answer: EmbeddingStore,
}

fn restrict(store: &EmbeddingStore, ids: &[String]) -> Result<EmbeddingStore> {
    let mut out = EmbeddingStore::new(store.dim());
    for id in ids {
        let v = store.get(id).ok_or_else(|| Error::MissingEmbedding(id.clone()))?;
        out.insert(id.as_str(), v)?;
    }
    Ok(out)
}

impl<'a> PoolBuilder<'a> {
    pub fn new(bank: &[&Query], template: &PromptTemplate, dense: DenseViews<'a>) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptySet("demonstration bank".into()));
        }
        let bank_ids: Vec<String> = bank.iter().map(|q| q.example_id.clone()).collect();
        let pair_docs = bank
            .iter()
            .map(|q| Ok((q.example_id.clone(), template.render_full(q, &q.gold_answer)?)))
            .collect::<Result<Vec<_>>>()?;
        let answer_docs: Vec<(String, &str)> = bank.iter().map(|q| (q.example_id.clone(), q.gold_answer.as_str())).collect();
        Ok(PoolBuilder {
            bm25_pair: Bm25Index::build(&pair_docs)?,
            bm25_answer: Bm25Index::build(&answer_docs)?,
            dense_pair: restrict(dense.pair, &bank_ids)?,
            dense_answer: restrict(dense.answer, &bank_ids)?,
            bank_ids,
            dense,
        })
    }

    pub fn bank_ids(&self) -> &[String] {
        &self.bank_ids
    }

    fn ranking(&self, config: RetrievalConfig, query: &Query) -> Result<Vec<(String, f64)>> {
        let qvec = || {
            self.dense
                .query
                .get(&query.example_id)
                .ok_or_else(|| Error::MissingEmbedding(query.example_id.clone()))
        };
        let ranked = match config {
            RetrievalConfig::Bm25Pair => self.bm25_pair.scores(&query.input_text),
            RetrievalConfig::Bm25Answer => self.bm25_answer.scores(&query.input_text),
            RetrievalConfig::DensePair => dense_scores(&self.dense_pair, qvec()?)?,
            RetrievalConfig::DenseAnswer => dense_scores(&self.dense_answer, qvec()?)?,
        };
        Ok(ranked.into_iter().filter(|(id, _)| *id != query.example_id).collect())
    }

    /// Top `k` per config, then up to `k` seeded samples per config from the
    /// ranks strictly below the median rank that are not already in that
    /// config's top `k`.
    pub fn build(&self, query: &Query, k: usize, seed: u64) -> Result<CandidatePool> {
        if k == 0 {
            return Err(Error::InvalidArgument("pool size K must be at least 1".into()));
        }
        let mut entries = Vec::new();
        let mut warnings = Vec::new();
        for config in RetrievalConfig::ALL {
            let ranked = self.ranking(config, query)?;
            let n = ranked.len();
            if n < k {
                let msg = format!("{config}: bank has {n} candidates, fewer than K={k}");
                log::warn!("query {}: {msg}", query.example_id);
                warnings.push(msg);
            }
            for (r, (id, score)) in ranked.iter().take(k).enumerate() {
                entries.push(PoolEntry {
                    example_id: id.clone(),
                    config,
                    rank: r + 1,
                    score: *score,
                    provenance: Provenance::Retrieved,
                });
            }
            let tail: Vec<usize> = (0..n).filter(|&r| r >= k && 2 * r > n.saturating_sub(1)).collect();
            let take = k.min(tail.len());
            let mut rng = rng::seeded(rng::derive_seed(seed, &format!("pool/{}/{config}", query.example_id)));
            let mut picked: Vec<usize> = index::sample(&mut rng, tail.len(), take).into_iter().map(|i| tail[i]).collect();
            picked.sort_unstable();
            for r in picked {
                let (id, score) = &ranked[r];
                entries.push(PoolEntry {
                    example_id: id.clone(),
                    config,
                    rank: r + 1,
                    score: *score,
                    provenance: Provenance::Random,
                });
            }
        }
        Ok(CandidatePool {
            query_id: query.example_id.clone(),
            k,
            entries,
            warnings,
        })
    }
}

/// Convenience wrapper building the retrievers for a single query. The
/// query itself is masked out of every ranking.
pub fn build_candidate_pool(
    query: &Query,
    bank: &[&Query],
    k: usize,
    seed: u64,
    template: &PromptTemplate,
    dense: DenseViews<'_>,
) -> Result<CandidatePool> {
    let others: Vec<&Query> = bank.iter().copied().filter(|q| q.example_id != query.example_id).collect();
    PoolBuilder::new(&others, template, dense)?.build(query, k, seed)
}

/// Count of pool entries per config and provenance, for logs.
pub fn pool_summary(pool: &CandidatePool) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in &pool.entries {
        let key = format!("{}/{}", e.config, if e.provenance == Provenance::Retrieved { "retrieved" } else { "random" });
        *out.entry(key).or_default() += 1;
    }
    out
}
