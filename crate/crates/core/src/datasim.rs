//! Synthetic topical retrieval corpora and the on-disk dataset format.
//!
//! Every topic owns a block of topic words and an answer keyword; background
//! words are shared. Documents draw words from their topic's distribution.
//! Each query is written against one golden document of its topic: a share
//! of its words is copied from that document and the rest come from the
//! topic distribution. The golden document always contains the topic's
//! answer keyword, so relaxed recall is never below strict recall.
//!
//! On disk a dataset is a directory with
//! `corpus.jsonl` (`{doc_id, text, topic?}`),
//! `queries.jsonl` (`{query_id, text, answers, topic?}`),
//! `qrels.tsv` (`query_id\tdoc_id`), and optionally
//! `examples.jsonl` (`{query_id, doc_ids, labels}`), `splits.json` and a
//! `dataset.json` record-count file that guards against truncation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{tokenize, Vocab};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u32,
    pub text: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<u32>,
}

/// Golden document ids per query.
pub type Qrels = BTreeMap<u32, Vec<u32>>;

/// Documents and queries are stored so that `docs[i].doc_id == i` and
/// `queries[j].query_id == j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

impl Corpus {
    pub fn doc(&self, id: u32) -> Result<&Document> {
        self.docs.get(id as usize).ok_or(Error::UnknownDocument(id))
    }

    pub fn query(&self, id: u32) -> Result<&Query> {
        self.queries
            .get(id as usize)
            .ok_or_else(|| Error::invalid(format!("unknown query id {id}")))
    }

    pub fn golden(&self, query_id: u32) -> Result<&[u32]> {
        self.qrels
            .get(&query_id)
            .map(Vec::as_slice)
            .ok_or(Error::MissingJudgment(query_id))
    }

    /// Topical relevance; unknown topics count as relevant only through qrels.
    pub fn topic_relevant(&self, query_id: u32, doc_id: u32) -> bool {
        match (
            self.queries.get(query_id as usize).and_then(|q| q.topic),
            self.docs.get(doc_id as usize).and_then(|d| d.topic),
        ) {
            (Some(a), Some(b)) => a == b,
            _ => self
                .qrels
                .get(&query_id)
                .is_some_and(|g| g.contains(&doc_id)),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::build(
            self.docs
                .iter()
                .map(|d| d.text.as_str())
                .chain(self.queries.iter().map(|q| q.text.as_str())),
        )
    }

    fn validate(&self) -> Result<()> {
        for (i, d) in self.docs.iter().enumerate() {
            if d.doc_id as usize != i {
                return Err(Error::invalid(format!(
                    "document ids must be dense and ordered; found {} at position {i}",
                    d.doc_id
                )));
            }
        }
        for (i, q) in self.queries.iter().enumerate() {
            if q.query_id as usize != i {
                return Err(Error::invalid(format!(
                    "query ids must be dense and ordered; found {} at position {i}",
                    q.query_id
                )));
            }
        }
        for (q, docs) in &self.qrels {
            self.query(*q)?;
            for d in docs {
                self.doc(*d)?;
            }
        }
        Ok(())
    }
}

/// Token ids for every document and query (content only, no specials).
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenized {
    pub vocab: Vocab,
    pub docs: Vec<Vec<u32>>,
    pub queries: Vec<Vec<u32>>,
}

impl Tokenized {
    pub fn new(corpus: &Corpus) -> Self {
        let vocab = corpus.vocab();
        let docs = corpus
            .docs
            .iter()
            .map(|d| tokenize(&d.text, &vocab, false).into_ids())
            .collect();
        let queries = corpus
            .queries
            .iter()
            .map(|q| tokenize(&q.text, &vocab, false).into_ids())
            .collect();
        Self {
            vocab,
            docs,
            queries,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, &self.vocab, false).into_ids()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub queries_per_topic: usize,
    /// Number of ordinary words (reserved tokens excluded).
    pub vocab_size: usize,
    pub doc_len: usize,
    pub query_len: usize,
    /// Probability that a query word is copied from its golden document.
    #[serde(default = "default_overlap")]
    pub query_overlap: f64,
    /// Probability mass of topic words in the topic distribution.
    #[serde(default = "default_topic_mass")]
    pub topic_mass: f64,
    /// Probability that a non-golden document of a topic carries the
    /// topic's answer keyword.
    #[serde(default = "default_keyword_rate")]
    pub keyword_rate: f64,
    /// Groups per topic. Document `i` belongs to subtopic `(i / T) % S` and
    /// draws topic words from that group with probability `subtopic_mass`.
    #[serde(default = "default_subtopics")]
    pub subtopics: usize,
    #[serde(default = "default_subtopic_mass")]
    pub subtopic_mass: f64,
    pub seed: u64,
}

fn default_overlap() -> f64 {
    0.6
}
fn default_topic_mass() -> f64 {
    0.6
}
fn default_keyword_rate() -> f64 {
    0.3
}
fn default_subtopics() -> usize {
    1
}
fn default_subtopic_mass() -> f64 {
    0.8
}

impl CorpusSpec {
    pub fn new(
        topics: usize,
        docs_per_topic: usize,
        queries_per_topic: usize,
        vocab_size: usize,
        doc_len: usize,
        query_len: usize,
        seed: u64,
    ) -> Self {
        Self {
            topics,
            docs_per_topic,
            queries_per_topic,
            vocab_size,
            doc_len,
            query_len,
            query_overlap: default_overlap(),
            topic_mass: default_topic_mass(),
            keyword_rate: default_keyword_rate(),
            subtopics: default_subtopics(),
            subtopic_mass: default_subtopic_mass(),
            seed,
        }
    }

    fn background_words(&self) -> usize {
        self.vocab_size / 4
    }

    fn words_per_topic(&self) -> usize {
        (self.vocab_size - self.background_words() - self.topics) / self.topics
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("topics", self.topics),
            ("docs_per_topic", self.docs_per_topic),
            ("queries_per_topic", self.queries_per_topic),
            ("doc_len", self.doc_len),
            ("query_len", self.query_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < self.topics * 3 + 4 {
            return Err(Error::invalid(format!(
                "vocab_size {} too small for {} topics (need at least {})",
                self.vocab_size,
                self.topics,
                self.topics * 3 + 4
            )));
        }
        if self.subtopics == 0 || self.subtopics > self.words_per_topic() {
            return Err(Error::invalid(format!(
                "subtopics must be in 1..={}",
                self.words_per_topic()
            )));
        }
        if self.doc_len < 2 {
            return Err(Error::invalid("doc_len must be at least 2"));
        }
        for (name, p) in [
            ("query_overlap", self.query_overlap),
            ("topic_mass", self.topic_mass),
            ("keyword_rate", self.keyword_rate),
            ("subtopic_mass", self.subtopic_mass),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Topic word distributions over a shared vocabulary.
#[derive(Debug, Clone)]
pub struct TopicModel {
    pub topic_words: Vec<Vec<String>>,
    pub background: Vec<String>,
    pub keywords: Vec<String>,
    pub topic_mass: f64,
    pub subtopics: usize,
    pub subtopic_mass: f64,
}

impl TopicModel {
    pub fn new(spec: &CorpusSpec) -> Self {
        let per = spec.words_per_topic();
        Self {
            topic_words: (0..spec.topics)
                .map(|t| (0..per).map(|j| format!("t{t}w{j}")).collect())
                .collect(),
            background: (0..spec.background_words())
                .map(|j| format!("bg{j}"))
                .collect(),
            keywords: (0..spec.topics).map(|t| format!("answer{t}")).collect(),
            topic_mass: spec.topic_mass,
            subtopics: spec.subtopics,
            subtopic_mass: spec.subtopic_mass,
        }
    }

    /// Contiguous block of topic `t`'s words forming subtopic `s`.
    pub fn subtopic_words(&self, t: usize, s: usize) -> &[String] {
        let words = &self.topic_words[t];
        let per = words.len() / self.subtopics;
        let end = if s + 1 == self.subtopics { words.len() } else { (s + 1) * per };
        &words[s * per..end]
    }

    /// Word probabilities of subtopic `s` of topic `t`; they sum to one.
    pub fn subtopic_distribution(&self, t: usize, s: usize) -> Vec<(&str, f64)> {
        let sub = self.subtopic_words(t, s);
        let words = &self.topic_words[t];
        let rest = self.topic_mass * (1.0 - self.subtopic_mass) / words.len() as f64;
        let own = self.topic_mass * self.subtopic_mass / sub.len() as f64;
        let mut out: Vec<(&str, f64)> = words
            .iter()
            .map(|w| {
                let p = if sub.contains(w) { own + rest } else { rest };
                (w.as_str(), p)
            })
            .collect();
        let bg = (1.0 - self.topic_mass) / self.background.len() as f64;
        out.extend(self.background.iter().map(|w| (w.as_str(), bg)));
        out
    }

    /// One word of subtopic `s` of topic `t`. With a single subtopic this is
    /// the plain topic distribution.
    pub fn sample_sub(&self, t: usize, s: usize, rng: &mut Rng) -> &str {
        if self.subtopics > 1 && rng.bernoulli(self.topic_mass) {
            if rng.bernoulli(self.subtopic_mass) {
                let sub = self.subtopic_words(t, s);
                &sub[rng.below(sub.len())]
            } else {
                let words = &self.topic_words[t];
                &words[rng.below(words.len())]
            }
        } else if self.subtopics > 1 {
            &self.background[rng.below(self.background.len())]
        } else {
            self.sample(t, rng)
        }
    }

    /// Word probabilities of topic `t` as `(word, p)`; they sum to one.
    pub fn distribution(&self, t: usize) -> Vec<(&str, f64)> {
        let words = &self.topic_words[t];
        let mut out: Vec<(&str, f64)> = words
            .iter()
            .map(|w| (w.as_str(), self.topic_mass / words.len() as f64))
            .collect();
        let bg = (1.0 - self.topic_mass) / self.background.len() as f64;
        out.extend(self.background.iter().map(|w| (w.as_str(), bg)));
        out
    }

    pub fn sample(&self, t: usize, rng: &mut Rng) -> &str {
        if rng.bernoulli(self.topic_mass) {
            let words = &self.topic_words[t];
            &words[rng.below(words.len())]
        } else {
            &self.background[rng.below(self.background.len())]
        }
    }
}

/// Generates a corpus; document `i` and query `j` belong to topics `i % T`
/// and `j % T`. Queries follow the subtopic of their golden document.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let model = TopicModel::new(spec);
    let t_count = spec.topics;
    let n_docs = t_count * spec.docs_per_topic;
    let n_queries = t_count * spec.queries_per_topic;
    let mut doc_rng = Rng::derived(spec.seed, "docs");
    let mut doc_words: Vec<Vec<String>> = (0..n_docs)
        .map(|i| {
            (0..spec.doc_len)
                .map(|_| {
                    model
                        .sample_sub(i % t_count, (i / t_count) % spec.subtopics, &mut doc_rng)
                        .to_string()
                })
                .collect()
        })
        .collect();

    let mut q_rng = Rng::derived(spec.seed, "queries");
    let goldens: Vec<u32> = (0..n_queries)
        .map(|j| {
            let t = j % t_count;
            (t + t_count * q_rng.below(spec.docs_per_topic)) as u32
        })
        .collect();
    let golden_set: BTreeSet<u32> = goldens.iter().copied().collect();

    // Keyword placement: goldens always, other topic documents at keyword_rate.
    let mut kw_rng = Rng::derived(spec.seed, "keywords");
    for (i, words) in doc_words.iter_mut().enumerate() {
        let carries = golden_set.contains(&(i as u32)) || kw_rng.bernoulli(spec.keyword_rate);
        let pos = kw_rng.below(spec.doc_len);
        if carries {
            words[pos] = model.keywords[i % t_count].clone();
        }
    }

    let mut queries = Vec::with_capacity(n_queries);
    let mut qrels = Qrels::new();
    for (j, &g) in goldens.iter().enumerate() {
        let t = j % t_count;
        let keyword = &model.keywords[t];
        let source: Vec<&String> = doc_words[g as usize]
            .iter()
            .filter(|w| *w != keyword)
            .collect();
        let words: Vec<String> = (0..spec.query_len)
            .map(|_| {
                if !source.is_empty() && q_rng.bernoulli(spec.query_overlap) {
                    source[q_rng.below(source.len())].clone()
                } else {
                    let sub = (g as usize / t_count) % spec.subtopics;
                    model.sample_sub(t, sub, &mut q_rng).to_string()
                }
            })
            .collect();
        queries.push(Query {
            query_id: j as u32,
            text: words.join(" "),
            answers: vec![keyword.clone()],
            topic: Some(t as u32),
        });
        qrels.insert(j as u32, vec![g]);
    }

    let docs = doc_words
        .into_iter()
        .enumerate()
        .map(|(i, w)| Document {
            doc_id: i as u32,
            text: w.join(" "),
            topic: Some((i % t_count) as u32),
        })
        .collect();
    Ok(Corpus {
        docs,
        queries,
        qrels,
    })
}

/// Disjoint train / eval query ids drawn by a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
}

pub fn split_queries(corpus: &Corpus, n_train: usize, n_eval: usize, seed: u64) -> Result<Split> {
    let n = corpus.queries.len();
    if n_train + n_eval > n {
        return Err(Error::invalid(format!(
            "requested {n_train} train + {n_eval} eval queries but only {n} exist"
        )));
    }
    let mut ids: Vec<u32> = (0..n as u32).collect();
    Rng::derived(seed, "split").shuffle(&mut ids);
    let mut train = ids[..n_train].to_vec();
    let mut eval = ids[n_train..n_train + n_eval].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok(Split { train, eval })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingExample {
    pub query_id: u32,
    pub doc_ids: Vec<u32>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSampling {
    /// Any document other than the golden one.
    #[default]
    Random,
    /// Only documents from other topics.
    InTopicExcluded,
    /// Only documents from the query's own topic.
    SameTopic,
    /// Alternately same-topic and any other document.
    Mixed,
}

/// One example per query: the golden document plus `l − 1` sampled
/// negatives, in shuffled order. With `l == 1` queries alternate between a
/// positive and a negative single-document example.
pub fn make_training_examples(
    corpus: &Corpus,
    query_ids: &[u32],
    l: usize,
    negatives: NegativeSampling,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    if l < 1 {
        return Err(Error::invalid("L must be at least 1"));
    }
    if l > corpus.docs.len() {
        return Err(Error::invalid(format!(
            "L = {l} exceeds corpus size {}",
            corpus.docs.len()
        )));
    }
    let mut rng = Rng::derived(seed, "examples");
    let mut out = Vec::with_capacity(query_ids.len());
    for (i, &qid) in query_ids.iter().enumerate() {
        let golden = corpus.golden(qid)?;
        let pos = golden[0];
        let pool: Vec<u32> = (0..corpus.docs.len() as u32)
            .filter(|d| !golden.contains(d))
            .filter(|&d| match negatives {
                NegativeSampling::InTopicExcluded => !corpus.topic_relevant(qid, d),
                NegativeSampling::SameTopic => corpus.topic_relevant(qid, d),
                _ => true,
            })
            .collect();
        let hard: Vec<u32> = match negatives {
            NegativeSampling::Mixed => pool
                .iter()
                .copied()
                .filter(|&d| corpus.topic_relevant(qid, d))
                .collect(),
            _ => Vec::new(),
        };
        let needed = if l == 1 { usize::from(i % 2 == 1) } else { l - 1 };
        if pool.len() < needed || (negatives == NegativeSampling::Mixed && hard.len() < needed.div_ceil(2)) {
            return Err(Error::invalid(format!(
                "query {qid}: only {} eligible negatives for L = {l}",
                pool.len()
            )));
        }
        let mut negs = BTreeSet::new();
        while negs.len() < needed.div_ceil(2) && !hard.is_empty() {
            negs.insert(hard[rng.below(hard.len())]);
        }
        while negs.len() < needed {
            negs.insert(pool[rng.below(pool.len())]);
        }
        let mut negs: Vec<u32> = negs.into_iter().collect();
        rng.shuffle(&mut negs);
        if l == 1 {
            let (doc, label) = if i % 2 == 0 { (pos, 1) } else { (negs[0], 0) };
            out.push(TrainingExample {
                query_id: qid,
                doc_ids: vec![doc],
                labels: vec![label],
            });
            continue;
        }
        let mut items: Vec<(u32, u8)> = std::iter::once((pos, 1))
            .chain(negs.into_iter().map(|d| (d, 0)))
            .collect();
        rng.shuffle(&mut items);
        out.push(TrainingExample {
            query_id: qid,
            doc_ids: items.iter().map(|x| x.0).collect(),
            labels: items.iter().map(|x| x.1).collect(),
        });
    }
    Ok(out)
}

/// A corpus plus whatever optional artifacts were stored with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub examples: Vec<TrainingExample>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetCounts {
    documents: usize,
    queries: usize,
    qrels: usize,
    examples: usize,
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let c = &data.corpus;
    write_atomic(&dir.join("corpus.jsonl"), &jsonl(&c.docs)?)?;
    write_atomic(&dir.join("queries.jsonl"), &jsonl(&c.queries)?)?;
    let mut qrels = String::new();
    let mut n_qrels = 0;
    for (q, docs) in &c.qrels {
        for d in docs {
            qrels.push_str(&format!("{q}\t{d}\n"));
            n_qrels += 1;
        }
    }
    write_atomic(&dir.join("qrels.tsv"), qrels.as_bytes())?;
    if !data.examples.is_empty() {
        write_atomic(&dir.join("examples.jsonl"), &jsonl(&data.examples)?)?;
    }
    if let Some(split) = &data.split {
        write_atomic(&dir.join("splits.json"), &serde_json::to_vec(split)?)?;
    }
    let counts = DatasetCounts {
        documents: c.docs.len(),
        queries: c.queries.len(),
        qrels: n_qrels,
        examples: data.examples.len(),
    };
    write_atomic(&dir.join("dataset.json"), &serde_json::to_vec(&counts)?)?;
    Ok(())
}

fn parse_lines<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>>
where
    F: FnMut(&str) -> std::result::Result<T, String>,
{
    let text = read_to_string(path)?;
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: "truncated record (missing final newline)".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_lines(path, |line| serde_json::from_str(line).map_err(|e| e.to_string()))
}

/// Parses a `query_id\tdoc_id` file.
pub fn parse_qrels(path: &Path) -> Result<Qrels> {
    let pairs = parse_lines(path, |line| {
        let mut parts = line.split('\t');
        let (Some(q), Some(d), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err("expected two tab-separated fields".to_string());
        };
        let q: u32 = q.trim().parse().map_err(|e| format!("query_id: {e}"))?;
        let d: u32 = d.trim().parse().map_err(|e| format!("doc_id: {e}"))?;
        Ok((q, d))
    })?;
    let mut qrels = Qrels::new();
    for (q, d) in pairs {
        qrels.entry(q).or_default().push(d);
    }
    Ok(qrels)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let docs: Vec<Document> = parse_jsonl(&dir.join("corpus.jsonl"))?;
    let queries: Vec<Query> = parse_jsonl(&dir.join("queries.jsonl"))?;
    let qrels_path = dir.join("qrels.tsv");
    let qrels = parse_qrels(&qrels_path)?;
    let corpus = Corpus {
        docs,
        queries,
        qrels,
    };
    corpus.validate()?;
    let ex_path = dir.join("examples.jsonl");
    let examples: Vec<TrainingExample> = if ex_path.exists() {
        parse_jsonl(&ex_path)?
    } else {
        Vec::new()
    };
    for (i, ex) in examples.iter().enumerate() {
        let loc = |message: String| Error::Parse {
            path: ex_path.clone(),
            line: i + 1,
            message,
        };
        corpus.query(ex.query_id).map_err(|e| loc(e.to_string()))?;
        if ex.doc_ids.len() != ex.labels.len() || ex.doc_ids.is_empty() {
            return Err(loc("doc_ids and labels must be non-empty and of equal length".into()));
        }
        for d in &ex.doc_ids {
            corpus.doc(*d).map_err(|e| loc(e.to_string()))?;
        }
        if ex.labels.iter().any(|&y| y > 1) {
            return Err(loc("labels must be 0 or 1".into()));
        }
    }
    let split_path = dir.join("splits.json");
    let split = if split_path.exists() {
        let s: Split = serde_json::from_str(&read_to_string(&split_path)?)?;
        for q in s.train.iter().chain(&s.eval) {
            corpus.query(*q)?;
        }
        Some(s)
    } else {
        None
    };
    let counts_path = dir.join("dataset.json");
    if counts_path.exists() {
        let counts: DatasetCounts = serde_json::from_str(&read_to_string(&counts_path)?)?;
        let n_qrels = corpus.qrels.values().map(Vec::len).sum();
        let actual = DatasetCounts {
            documents: corpus.docs.len(),
            queries: corpus.queries.len(),
            qrels: n_qrels,
            examples: examples.len(),
        };
        if counts != actual {
            return Err(Error::invalid(format!(
                "record counts {actual:?} do not match dataset.json {counts:?} (truncated file?)"
            )));
        }
    }
    Ok(Dataset {
        corpus,
        examples,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusSpec {
        CorpusSpec::new(8, 50, 10, 200, 12, 5, seed)
    }

    #[test]
    fn deterministic() {
        let a = generate_corpus(&small(0)).unwrap();
        let b = generate_corpus(&small(0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_corpus(&small(1)).unwrap());
    }

    #[test]
    fn golden_contains_answer() {
        let c = generate_corpus(&small(3)).unwrap();
        for q in &c.queries {
            for g in c.golden(q.query_id).unwrap() {
                let doc = c.doc(*g).unwrap();
                assert!(doc.text.split_whitespace().any(|w| w == q.answers[0]));
                assert_eq!(doc.topic, q.topic);
            }
        }
    }

    #[test]
    fn single_topic_all_relevant() {
        let c = generate_corpus(&CorpusSpec::new(1, 5, 3, 20, 6, 3, 0)).unwrap();
        for q in 0..3 {
            for d in 0..5 {
                assert!(c.topic_relevant(q, d));
            }
        }
    }

    #[test]
    fn infeasible_sizes() {
        assert!(generate_corpus(&CorpusSpec::new(8, 5, 3, 10, 6, 3, 0)).is_err());
        assert!(generate_corpus(&CorpusSpec::new(0, 5, 3, 100, 6, 3, 0)).is_err());
    }

    #[test]
    fn topic_distribution_normalized() {
        let spec = small(0);
        let m = TopicModel::new(&spec);
        for t in 0..spec.topics {
            let s: f64 = m.distribution(t).iter().map(|x| x.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn examples_structure() {
        let c = generate_corpus(&small(0)).unwrap();
        let ids: Vec<u32> = (0..80).collect();
        let ex = make_training_examples(&c, &ids, 4, NegativeSampling::Random, 0).unwrap();
        for e in &ex {
            assert_eq!(e.labels.iter().filter(|&&y| y == 1).count(), 1);
            let g = c.golden(e.query_id).unwrap()[0];
            for (d, y) in e.doc_ids.iter().zip(&e.labels) {
                assert_eq!(*d == g, *y == 1);
            }
        }
        let ex = make_training_examples(&c, &ids, 4, NegativeSampling::InTopicExcluded, 0).unwrap();
        for e in &ex {
            for (d, y) in e.doc_ids.iter().zip(&e.labels) {
                if *y == 0 {
                    assert!(!c.topic_relevant(e.query_id, *d));
                }
            }
        }
        let single = make_training_examples(&c, &ids, 1, NegativeSampling::Random, 0).unwrap();
        let pos = single.iter().filter(|e| e.labels[0] == 1).count() as f64;
        assert!((pos / single.len() as f64 - 0.5).abs() <= 0.1);
        assert!(make_training_examples(&c, &ids, 0, NegativeSampling::Random, 0).is_err());
    }
}
