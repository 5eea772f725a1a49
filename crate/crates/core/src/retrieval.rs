//! Document indices, exact inner-product search, re-ranking and ranking
//! metrics.
//!
//! Ranked lists are ordered by non-increasing score with ties broken by
//! ascending doc id, so every metric is deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasim::{Corpus, Qrels};
use crate::encoders::{to_checkpoint_bytes, CeModel, DeModel, PoolingKind};
use crate::error::{Error, Result};
use crate::io::{read_to_string, sha256_hex, write_atomic};
use crate::numerics::{check_dim, dot_unchecked, Mat};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub encoder_hash: String,
    pub pooling: PoolingKind,
    pub empty_query: bool,
}

/// Row `i` holds the embedding of document `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentIndex {
    embeddings: Mat,
    meta: IndexMeta,
}

impl DocumentIndex {
    /// Embeds every document with `embed`; rows are computed in parallel and
    /// stored in doc-id order.
    pub fn build<F>(docs: &[Vec<u32>], meta: IndexMeta, embed: F) -> Result<Self>
    where
        F: Fn(&[u32]) -> Result<Vec<f64>> + Sync,
    {
        if docs.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        let rows: Vec<Vec<f64>> = docs
            .par_iter()
            .enumerate()
            .map(|(i, d)| {
                embed(d).map_err(|e| Error::Encoding {
                    doc_id: i as u32,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let k = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::Encoding {
                    doc_id: i as u32,
                    source: Box::new(Error::DimensionMismatch {
                        expected: k,
                        got: r.len(),
                    }),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            embeddings: Mat::from_vec(rows.len(), k, data)?,
            meta,
        })
    }

    /// Index from the document tower of a dual encoder.
    pub fn from_de(model: &DeModel, docs: &[Vec<u32>]) -> Result<Self> {
        let meta = IndexMeta {
            encoder_hash: sha256_hex(&to_checkpoint_bytes(model)?),
            pooling: model.doc_encoder().pooling(),
            empty_query: false,
        };
        Self::build(docs, meta, |d| model.embed_doc(d))
    }

    /// Index from a dual-pooled cross encoder run on `[CLS][SEP] d [SEP]`.
    pub fn from_ce(model: &CeModel, docs: &[Vec<u32>]) -> Result<Self> {
        let meta = IndexMeta {
            encoder_hash: sha256_hex(&to_checkpoint_bytes(model)?),
            pooling: model.encoder.pooling(),
            empty_query: true,
        };
        Self::build(docs, meta, |d| model.doc_embedding(d))
    }

    pub fn from_parts(embeddings: Mat, meta: IndexMeta) -> Self {
        Self { embeddings, meta }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn embeddings(&self) -> &Mat {
        &self.embeddings
    }

    pub fn row(&self, doc_id: u32) -> Result<&[f64]> {
        if doc_id as usize >= self.len() {
            return Err(Error::UnknownDocument(doc_id));
        }
        Ok(self.embeddings.row(doc_id as usize))
    }

    /// Inner products of `q` with every row.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), q.len())?;
        Ok((0..self.len())
            .map(|i| dot_unchecked(self.embeddings.row(i), q))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            version: INDEX_FORMAT_VERSION,
            k: self.dim(),
            n: self.len(),
            encoder_hash: self.meta.encoder_hash.clone(),
            pooling: self.meta.pooling,
            empty_query: self.meta.empty_query,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for i in 0..self.len() {
            serde_json::to_writer(
                &mut out,
                &IndexRow {
                    doc_id: i as u32,
                    embedding: self.embeddings.row(i).to_vec(),
                },
            )?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header: IndexHeader = serde_json::from_str(
            lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?,
        )
        .map_err(|e| parse_err(1, e.to_string()))?;
        if header.version != INDEX_FORMAT_VERSION {
            return Err(Error::FormatVersion(header.version));
        }
        let mut data = Vec::with_capacity(header.n * header.k);
        let mut count = 0;
        for (i, line) in lines.enumerate() {
            let row: IndexRow =
                serde_json::from_str(line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            if row.doc_id as usize != i || row.embedding.len() != header.k {
                return Err(parse_err(i + 2, "row id or width does not match header".into()));
            }
            data.extend(row.embedding);
            count += 1;
        }
        if count != header.n {
            return Err(parse_err(
                count + 1,
                format!("header declares {} rows, found {count}", header.n),
            ));
        }
        Ok(Self {
            embeddings: Mat::from_vec(header.n, header.k, data)?,
            meta: IndexMeta {
                encoder_hash: header.encoder_hash,
                pooling: header.pooling,
                empty_query: header.empty_query,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(read_to_string(path)?.as_bytes(), path)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    version: u32,
    k: usize,
    n: usize,
    encoder_hash: String,
    pooling: PoolingKind,
    empty_query: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRow {
    doc_id: u32,
    embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: u32,
    pub items: Vec<(u32, f64)>,
}

impl RankedList {
    /// Sorts `items` into ranking order and keeps the first `k`.
    pub fn from_scores(query_id: u32, mut items: Vec<(u32, f64)>, k: usize) -> Self {
        items.sort_by(rank_order);
        items.truncate(k);
        Self { query_id, items }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|x| x.0)
    }

    /// 1-based rank of the first document in `golden`, if any.
    pub fn first_hit(&self, golden: &[u32]) -> Option<usize> {
        self.doc_ids().position(|d| golden.contains(&d)).map(|p| p + 1)
    }
}

/// Score descending, then doc id ascending. Adding `0.0` maps `-0.0` to
/// `0.0` so the two zeros tie.
fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

/// The `k` highest inner products; `k > N` returns all rows.
pub fn top_k(index: &DocumentIndex, query_id: u32, q_emb: &[f64], k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let scores = index.scores(q_emb)?;
    let mut items: Vec<(u32, f64)> = scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i as u32, s))
        .collect();
    let k = k.min(items.len());
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, rank_order);
        items.truncate(k);
    }
    Ok(RankedList::from_scores(query_id, items, k))
}

/// Reorders `candidates` by `score`. Duplicates are collapsed, so the
/// result depends only on the candidate set.
pub fn rerank<F>(query_id: u32, candidates: &[u32], num_docs: usize, score: F) -> Result<RankedList>
where
    F: Fn(u32) -> Result<f64> + Sync,
{
    let set: BTreeSet<u32> = candidates.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&d| d as usize >= num_docs) {
        return Err(Error::UnknownDocument(bad));
    }
    let items = set
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|d| Ok((d, score(d)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = items.len();
    Ok(RankedList::from_scores(query_id, items, n))
}

/// Golden documents and optional answer strings per query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Judgments {
    pub golden: Qrels,
    pub answers: BTreeMap<u32, Vec<String>>,
}

impl Judgments {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self {
            golden: corpus.qrels.clone(),
            answers: corpus
                .queries
                .iter()
                .filter(|q| !q.answers.is_empty())
                .map(|q| (q.query_id, q.answers.clone()))
                .collect(),
        }
    }

    fn golden(&self, q: u32) -> Result<&[u32]> {
        self.golden
            .get(&q)
            .map(Vec::as_slice)
            .ok_or(Error::MissingJudgment(q))
    }
}

fn mean_over<F>(rankings: &[RankedList], mut f: F) -> Result<f64>
where
    F: FnMut(&RankedList) -> Result<f64>,
{
    if rankings.is_empty() {
        return Err(Error::invalid("no rankings to evaluate"));
    }
    let mut total = 0.0;
    for r in rankings {
        total += f(r)?;
    }
    Ok(total / rankings.len() as f64)
}

/// Fraction of queries with a golden document in the top `k`.
pub fn recall_at_k(rankings: &[RankedList], judgments: &Judgments, k: usize) -> Result<f64> {
    mean_over(rankings, |r| {
        let golden = judgments.golden(r.query_id)?;
        Ok(match r.first_hit(golden) {
            Some(rank) if rank <= k => 1.0,
            _ => 0.0,
        })
    })
}

/// Fraction of queries whose answer string occurs as a whole word in any
/// top-`k` document.
pub fn relaxed_recall_at_k(
    rankings: &[RankedList],
    judgments: &Judgments,
    corpus: &Corpus,
    k: usize,
) -> Result<f64> {
    mean_over(rankings, |r| {
        let answers = judgments
            .answers
            .get(&r.query_id)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::invalid(format!("query {} has no answers", r.query_id)))?;
        let needles: Vec<String> = answers
            .iter()
            .map(|a| format!(" {} ", a.split_whitespace().collect::<Vec<_>>().join(" ")))
            .collect();
        for d in r.doc_ids().take(k) {
            let text = corpus.doc(d)?.text.split_whitespace().collect::<Vec<_>>().join(" ");
            let hay = format!(" {text} ");
            if needles.iter().any(|n| hay.contains(n.as_str())) {
                return Ok(1.0);
            }
        }
        Ok(0.0)
    })
}

/// 100 × mean reciprocal rank of the first golden document within the top 10.
pub fn mrr_at_10(rankings: &[RankedList], judgments: &Judgments) -> Result<f64> {
    let m = mean_over(rankings, |r| {
        let golden = judgments.golden(r.query_id)?;
        Ok(match r.first_hit(golden) {
            Some(rank) if rank <= 10 => 1.0 / rank as f64,
            _ => 0.0,
        })
    })?;
    Ok(100.0 * m)
}

/// 100 × mean nDCG@10 with binary gains.
pub fn ndcg_at_10(rankings: &[RankedList], judgments: &Judgments) -> Result<f64> {
    let m = mean_over(rankings, |r| {
        let golden = judgments.golden(r.query_id)?;
        if golden.is_empty() {
            return Err(Error::MissingJudgment(r.query_id));
        }
        let dcg: f64 = r
            .doc_ids()
            .take(10)
            .enumerate()
            .filter(|(_, d)| golden.contains(d))
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let distinct: BTreeSet<u32> = golden.iter().copied().collect();
        let ideal: f64 = (0..distinct.len().min(10))
            .map(|i| 1.0 / ((i + 2) as f64).log2())
            .sum();
        Ok(dcg / ideal)
    })?;
    Ok(100.0 * m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_20: f64,
    pub relaxed_recall_at_5: f64,
    pub mrr_at_10: f64,
    pub ndcg_at_10: f64,
}

impl Metrics {
    /// Recall values are reported ×100 like the other metrics.
    pub fn compute(rankings: &[RankedList], judgments: &Judgments, corpus: &Corpus) -> Result<Self> {
        Ok(Self {
            recall_at_1: 100.0 * recall_at_k(rankings, judgments, 1)?,
            recall_at_5: 100.0 * recall_at_k(rankings, judgments, 5)?,
            recall_at_20: 100.0 * recall_at_k(rankings, judgments, 20)?,
            relaxed_recall_at_5: 100.0 * relaxed_recall_at_k(rankings, judgments, corpus, 5)?,
            mrr_at_10: mrr_at_10(rankings, judgments)?,
            ndcg_at_10: ndcg_at_10(rankings, judgments)?,
        })
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("recall@1", self.recall_at_1),
            ("recall@5", self.recall_at_5),
            ("recall@20", self.recall_at_20),
            ("relaxed_recall@5", self.relaxed_recall_at_5),
            ("mrr@10", self.mrr_at_10),
            ("ndcg@10", self.ndcg_at_10),
        ]
    }
}

/// `query_id \t doc_id \t rank \t score` lines, ranks starting at 1.
pub fn rankings_to_tsv(rankings: &[RankedList]) -> String {
    let mut out = String::new();
    for r in rankings {
        for (i, (d, s)) in r.items.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.query_id, d, i + 1, s));
        }
    }
    out
}

pub fn parse_rankings_tsv(text: &str, path: &Path) -> Result<Vec<RankedList>> {
    let mut by_query: BTreeMap<u32, Vec<(usize, u32, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let q: u32 = fields[0].parse().map_err(|e| err(format!("query_id: {e}")))?;
        let d: u32 = fields[1].parse().map_err(|e| err(format!("doc_id: {e}")))?;
        let rank: usize = fields[2].parse().map_err(|e| err(format!("rank: {e}")))?;
        let score: f64 = fields[3].parse().map_err(|e| err(format!("score: {e}")))?;
        by_query.entry(q).or_default().push((rank, d, score));
    }
    Ok(by_query
        .into_iter()
        .map(|(q, mut rows)| {
            rows.sort_by_key(|r| r.0);
            RankedList {
                query_id: q,
                items: rows.into_iter().map(|(_, d, s)| (d, s)).collect(),
            }
        })
        .collect())
}

/// TF-IDF cosine over bags of words; the lexical candidate generator used
/// for re-ranking.
#[derive(Debug, Clone)]
pub struct BowRetriever {
    idf: BTreeMap<u32, f64>,
    docs: Vec<(BTreeMap<u32, f64>, f64)>,
}

impl BowRetriever {
    pub fn new(docs: &[Vec<u32>]) -> Self {
        let n = docs.len() as f64;
        let mut df: BTreeMap<u32, usize> = BTreeMap::new();
        for d in docs {
            for t in d.iter().collect::<BTreeSet<_>>() {
                *df.entry(*t).or_default() += 1;
            }
        }
        let idf: BTreeMap<u32, f64> = df
            .into_iter()
            .map(|(t, c)| (t, (1.0 + n / c as f64).ln()))
            .collect();
        let docs = docs
            .iter()
            .map(|d| {
                let v = Self::weights(d, &idf);
                let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
                (v, norm)
            })
            .collect();
        Self { idf, docs }
    }

    fn weights(tokens: &[u32], idf: &BTreeMap<u32, f64>) -> BTreeMap<u32, f64> {
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for t in tokens {
            *tf.entry(*t).or_default() += 1.0;
        }
        tf.into_iter()
            .map(|(t, c)| (t, c * idf.get(&t).copied().unwrap_or(0.0)))
            .collect()
    }

    pub fn score(&self, query: &[u32], doc_id: u32) -> f64 {
        let q = Self::weights(query, &self.idf);
        let qn = q.values().map(|x| x * x).sum::<f64>().sqrt();
        self.cosine(&q, qn, doc_id as usize)
    }

    fn cosine(&self, q: &BTreeMap<u32, f64>, qn: f64, d: usize) -> f64 {
        let (v, dn) = &self.docs[d];
        if qn == 0.0 || *dn == 0.0 {
            return 0.0;
        }
        q.iter()
            .filter_map(|(t, w)| v.get(t).map(|x| x * w))
            .sum::<f64>()
            / (qn * dn)
    }

    pub fn rank(&self, query_id: u32, query: &[u32], k: usize) -> RankedList {
        let q = Self::weights(query, &self.idf);
        let qn = q.values().map(|x| x * x).sum::<f64>().sqrt();
        let items = (0..self.docs.len())
            .map(|d| (d as u32, self.cosine(&q, qn, d)))
            .collect();
        RankedList::from_scores(query_id, items, k)
    }
}
