//! End-to-end pipelines shared by the command-line tool and the
//! acceptance suite.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bounds::{mean_abs, pairwise_discrepancy, r_emb, EmbeddingSample};
use crate::datasim::{
    generate_corpus, make_training_examples, split_queries, CorpusSpec, Dataset, NegativeSampling,
    Split, Tokenized,
};
use crate::distill::{
    train_student, train_teacher, Augmentation, LossWeights, Preset, Student, StudentConfig,
    StudentMode, Teacher, TeacherConfig, TeacherKind, TrainConfig, TrainData, TrainHistory,
};
use crate::encoders::PoolingKind;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, distance};
use crate::queryaug::{
    augment_queries, random_queries, train_autoencoder, AutoencoderConfig, AutoencoderHistory,
    AutoencoderParams, GeneratedQuery,
};
use crate::retrieval::{rerank, top_k, BowRetriever, DocumentIndex, Judgments, Metrics, RankedList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of an existing corpus in the JSONL layout; replaces the
    /// generator when set.
    pub path: Option<PathBuf>,
    pub topics: usize,
    pub docs_per_topic: usize,
    pub queries_per_topic: usize,
    pub vocab_size: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub query_overlap: f64,
    pub topic_mass: f64,
    pub keyword_rate: f64,
    pub subtopics: usize,
    pub subtopic_mass: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Documents per training example (`L`).
    pub docs_per_example: usize,
    pub negatives: NegativeSampling,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            topics: 8,
            docs_per_topic: 50,
            queries_per_topic: 63,
            vocab_size: 240,
            doc_len: 24,
            query_len: 6,
            query_overlap: 0.6,
            topic_mass: 0.6,
            keyword_rate: 0.3,
            subtopics: 1,
            subtopic_mass: 0.8,
            n_train: 400,
            n_eval: 100,
            docs_per_example: 8,
            negatives: NegativeSampling::Random,
        }
    }
}

impl DataConfig {
    pub fn corpus_spec(&self, seed: u64) -> CorpusSpec {
        CorpusSpec {
            topics: self.topics,
            docs_per_topic: self.docs_per_topic,
            queries_per_topic: self.queries_per_topic,
            vocab_size: self.vocab_size,
            doc_len: self.doc_len,
            query_len: self.query_len,
            query_overlap: self.query_overlap,
            topic_mass: self.topic_mass,
            keyword_rate: self.keyword_rate,
            subtopics: self.subtopics,
            subtopic_mass: self.subtopic_mass,
            seed: derive_seed(seed, "data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub autoencoder: AutoencoderConfig,
    pub per_query: usize,
    pub sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            autoencoder: AutoencoderConfig::default(),
            per_query: 2,
            sigma: 0.3,
            mask_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Bag-of-words candidates per query for re-ranking.
    pub rerank_candidates: usize,
    /// Depth of dense retrieval.
    pub depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rerank_candidates: 50,
            depth: 20,
        }
    }
}

/// Everything one experiment needs. Each section's training seed is
/// replaced by a sub-seed of `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub teacher_train: TrainConfig,
    pub student: StudentConfig,
    pub student_train: TrainConfig,
    pub preset: Preset,
    /// Replaces the preset's loss weights when set.
    pub weights: Option<LossWeights>,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<PathBuf>,
}

/// The default is the desk-scale ablation setup: a 64-wide teacher and a
/// 32-wide student on eight topics of ten subtopics each.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                vocab_size: 500,
                doc_len: 16,
                query_overlap: 0.8,
                subtopics: 10,
                negatives: NegativeSampling::Mixed,
                ..DataConfig::default()
            },
            teacher: TeacherConfig {
                hidden: 64,
                out_dim: 32,
                shared_towers: true,
                pooling: PoolingKind::Mean,
                ..TeacherConfig::default()
            },
            teacher_train: TrainConfig {
                steps: 300,
                lr: 1e-2,
                in_batch_negatives: true,
                ..TrainConfig::default()
            },
            student: StudentConfig {
                hidden: 32,
                out_dim: 32,
                pooling: PoolingKind::Mean,
                shared_towers: false,
                ..StudentConfig::default()
            },
            student_train: TrainConfig {
                steps: 3000,
                lr: 1e-2,
                temperature: 4.0,
                in_batch_negatives: true,
                ..TrainConfig::default()
            },
            preset: Preset::EmbedMatch,
            weights: None,
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.corpus_spec(self.seed).validate()?;
        if self.data.n_train + self.data.n_eval > self.data.topics * self.data.queries_per_topic {
            return Err(Error::invalid(format!(
                "data: n_train + n_eval = {} exceeds the {} generated queries",
                self.data.n_train + self.data.n_eval,
                self.data.topics * self.data.queries_per_topic
            )));
        }
        if self.data.docs_per_example == 0 {
            return Err(Error::invalid("data.docs_per_example must be at least 1"));
        }
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        self.loss_weights().validate()?;
        if self.eval.rerank_candidates == 0 || self.eval.depth == 0 {
            return Err(Error::invalid("eval depths must be at least 1"));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights.clone().unwrap_or_else(|| self.preset.weights())
    }

    pub fn teacher_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "teacher"),
            ..self.teacher_train.clone()
        }
    }

    pub fn student_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "student"),
            ..self.student_train.clone()
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            mode: self.preset.mode(),
            ..self.student.clone()
        }
    }

    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            seed: derive_seed(self.seed, "autoencoder"),
            ..self.augment.autoencoder.clone()
        }
    }
}

/// Generates the corpus, the query split and the training examples.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.data.corpus_spec(cfg.seed))?;
    complete_dataset(
        cfg,
        Dataset {
            corpus,
            examples: Vec::new(),
            split: None,
        },
    )
}

/// Adds a query split and training examples to a dataset lacking them.
pub fn complete_dataset(cfg: &ExperimentConfig, mut data: Dataset) -> Result<Dataset> {
    if data.split.is_none() {
        data.split = Some(split_queries(
            &data.corpus,
            cfg.data.n_train,
            cfg.data.n_eval,
            derive_seed(cfg.seed, "split"),
        )?);
    }
    if data.examples.is_empty() {
        let train = &data.split.as_ref().map(|s| s.train.clone()).unwrap_or_default();
        data.examples = make_training_examples(
            &data.corpus,
            train,
            cfg.data.docs_per_example,
            cfg.data.negatives,
            derive_seed(cfg.seed, "examples"),
        )?;
    }
    Ok(data)
}

/// A dataset together with its tokenization.
pub struct Prepared {
    pub dataset: Dataset,
    pub tokens: Tokenized,
    pub split: Split,
    pub judgments: Judgments,
}

impl Prepared {
    pub fn new(dataset: Dataset) -> Result<Self> {
        let split = dataset
            .split
            .clone()
            .ok_or_else(|| Error::invalid("dataset has no query split"))?;
        let tokens = Tokenized::new(&dataset.corpus);
        let judgments = Judgments::from_corpus(&dataset.corpus);
        Ok(Self {
            dataset,
            tokens,
            split,
            judgments,
        })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            tokens: &self.tokens,
            examples: &self.dataset.examples,
        }
    }

    fn query_tokens(&self, ids: &[u32]) -> Result<Vec<&[u32]>> {
        ids.iter()
            .map(|&id| {
                self.tokens
                    .queries
                    .get(id as usize)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::invalid(format!("unknown query id {id}")))
            })
            .collect()
    }

    /// Dense retrieval over `index` for the evaluation queries.
    pub fn evaluate_dense<F>(&self, index: &DocumentIndex, depth: usize, embed: F) -> Result<Evaluation>
    where
        F: Fn(&[u32]) -> Result<Vec<f64>> + Sync,
    {
        use rayon::prelude::*;
        let ids = &self.split.eval;
        let queries = self.query_tokens(ids)?;
        let rankings = ids
            .par_iter()
            .zip(&queries)
            .map(|(&id, q)| top_k(index, id, &embed(q)?, depth.min(index.len())))
            .collect::<Result<Vec<_>>>()?;
        Evaluation::new(rankings, self)
    }

    /// Bag-of-words candidates re-ranked by `score(query, doc_id)`.
    pub fn evaluate_rerank<F>(&self, candidates: usize, score: F) -> Result<Evaluation>
    where
        F: Fn(&[u32], u32) -> Result<f64> + Sync,
    {
        let bow = BowRetriever::new(&self.tokens.docs);
        let ids = &self.split.eval;
        let queries = self.query_tokens(ids)?;
        let rankings = ids
            .iter()
            .zip(&queries)
            .map(|(&id, q)| {
                let cand: Vec<u32> = bow.rank(id, q, candidates).doc_ids().collect();
                rerank(id, &cand, self.tokens.docs.len(), |d| score(q, d))
            })
            .collect::<Result<Vec<_>>>()?;
        Evaluation::new(rankings, self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rankings: Vec<RankedList>,
    pub metrics: Metrics,
}

impl Evaluation {
    fn new(rankings: Vec<RankedList>, p: &Prepared) -> Result<Self> {
        let metrics = Metrics::compute(&rankings, &p.judgments, &p.dataset.corpus)?;
        Ok(Self { rankings, metrics })
    }
}

pub struct TeacherRun {
    pub teacher: Teacher,
    pub history: TrainHistory,
    pub index: DocumentIndex,
}

pub fn run_teacher(cfg: &ExperimentConfig, p: &Prepared) -> Result<TeacherRun> {
    let (teacher, history) = train_teacher(&cfg.teacher, &p.train_data(), &cfg.teacher_train())?;
    let index = teacher.build_index(&p.tokens.docs)?;
    Ok(TeacherRun {
        teacher,
        history,
        index,
    })
}

/// Evaluates a teacher: dense retrieval for dual encoders, re-ranking of
/// bag-of-words candidates for cross encoders.
pub fn evaluate_teacher(cfg: &ExperimentConfig, p: &Prepared, run: &TeacherRun) -> Result<Evaluation> {
    match &run.teacher {
        Teacher::De(m) => p.evaluate_dense(&run.index, cfg.eval.depth, |q| m.embed_query(q)),
        Teacher::Ce(_) => p.evaluate_rerank(cfg.eval.rerank_candidates, |q, d| {
            run.teacher.score(q, &p.tokens.docs[d as usize])
        }),
    }
}

pub struct AugmentRun {
    pub autoencoder: AutoencoderParams,
    pub history: AutoencoderHistory,
    pub queries: Vec<GeneratedQuery>,
}

/// Trains the query autoencoder on the training queries and generates
/// `per_query` perturbed neighbors of each.
pub fn run_augment(cfg: &ExperimentConfig, p: &Prepared) -> Result<AugmentRun> {
    let train: Vec<Vec<u32>> = p
        .split
        .train
        .iter()
        .map(|&id| p.tokens.queries[id as usize].clone())
        .collect();
    let ae_cfg = cfg.autoencoder();
    let (autoencoder, history) = train_autoencoder(&train, p.tokens.vocab.len(), &ae_cfg, 0)?;
    let sources: Vec<(u32, &[u32])> = p
        .split
        .train
        .iter()
        .map(|&id| (id, p.tokens.queries[id as usize].as_slice()))
        .collect();
    let queries = augment_queries(
        &autoencoder,
        &sources,
        cfg.augment.per_query,
        cfg.augment.sigma,
        cfg.augment.mask_prob,
        derive_seed(cfg.seed, "augmentation"),
    )?;
    Ok(AugmentRun {
        autoencoder,
        history,
        queries,
    })
}

/// Random-token counterparts of the training queries.
pub fn random_augmentation(cfg: &ExperimentConfig, p: &Prepared) -> Result<Vec<GeneratedQuery>> {
    let sources: Vec<(u32, &[u32])> = p
        .split
        .train
        .iter()
        .map(|&id| (id, p.tokens.queries[id as usize].as_slice()))
        .collect();
    random_queries(
        p.tokens.vocab.len(),
        &sources,
        cfg.augment.per_query,
        derive_seed(cfg.seed, "augmentation"),
    )
}

pub struct StudentRun {
    pub student: Student,
    pub history: TrainHistory,
    pub index: DocumentIndex,
}

/// Trains the student of `cfg.preset`. `aug` supplies the generated
/// queries for presets that use them.
pub fn run_student(
    cfg: &ExperimentConfig,
    p: &Prepared,
    teacher: &TeacherRun,
    aug: &[GeneratedQuery],
) -> Result<StudentRun> {
    let aug = match cfg.preset.augmentation() {
        Augmentation::None => &[][..],
        _ => aug,
    };
    let (student, history) = train_student(
        &teacher.teacher,
        &teacher.index,
        &cfg.student_config(),
        &p.train_data(),
        &cfg.loss_weights(),
        &cfg.student_train(),
        aug,
        None,
    )?;
    let index = student.build_index(&p.tokens.docs, &teacher.index)?;
    Ok(StudentRun {
        student,
        history,
        index,
    })
}

pub fn evaluate_student(cfg: &ExperimentConfig, p: &Prepared, run: &StudentRun) -> Result<Evaluation> {
    p.evaluate_dense(&run.index, cfg.eval.depth, |q| run.student.score_query(q))
}

pub fn rerank_student(cfg: &ExperimentConfig, p: &Prepared, run: &StudentRun) -> Result<Evaluation> {
    let r = run.student.retriever(&run.index)?;
    p.evaluate_rerank(cfg.eval.rerank_candidates, |q, d| r.score(q, d))
}

/// Query-embedding alignment of a student with its teacher on held-out
/// queries, measured in the teacher space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub r_emb_q: f64,
    pub mean_abs_discrepancy: f64,
}

pub fn heldout_alignment(p: &Prepared, teacher: &TeacherRun, student: &Student) -> Result<Alignment> {
    let (t, s) = heldout_query_embeddings(p, teacher, student)?;
    Ok(Alignment {
        r_emb_q: r_emb(&t, &s)?,
        mean_abs_discrepancy: mean_abs(&pairwise_discrepancy(&t, &s)?),
    })
}

/// Held-out query embeddings of teacher and student in the teacher space.
pub fn heldout_query_embeddings(
    p: &Prepared,
    teacher: &TeacherRun,
    student: &Student,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    use rayon::prelude::*;
    let aligned = student.aligned(&teacher.index)?;
    let pairs = p
        .split
        .eval
        .par_iter()
        .map(|&id| {
            let q = p.tokens.queries[id as usize].as_slice();
            let t = teacher.teacher.query_target(q, &teacher_context(p, id))?;
            let s = crate::encoders::DualEncoder::embed_query(&aligned, q)?;
            Ok((t, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Train and held-out samples of (query, document, label) pairs for the
/// risk inequalities: each query with its golden document and one random
/// negative. Student embeddings are mapped into the teacher space when the
/// widths differ or the student is asymmetric; the sample records it.
pub fn bound_samples(
    p: &Prepared,
    teacher: &TeacherRun,
    student: &StudentRun,
    seed: u64,
) -> Result<(EmbeddingSample, EmbeddingSample)> {
    let sample = |ids: &[u32], name: &str| -> Result<EmbeddingSample> {
        let examples = make_training_examples(
            &p.dataset.corpus,
            ids,
            2,
            NegativeSampling::Random,
            derive_seed(seed, name),
        )?;
        pair_sample(p, teacher, student, &examples)
    };
    Ok((sample(&p.split.train, "bounds-train")?, sample(&p.split.eval, "bounds-heldout")?))
}

fn pair_sample(
    p: &Prepared,
    teacher: &TeacherRun,
    student: &StudentRun,
    examples: &[crate::datasim::TrainingExample],
) -> Result<EmbeddingSample> {
    use rayon::prelude::*;
    let s = &student.student;
    let projected = s.mode == StudentMode::AsymmetricInheritDocs || s.query.out_dim() != teacher.index.dim();
    let aligned = s.aligned(&teacher.index)?;
    let pairs: Vec<(u32, u32, u8)> = examples
        .iter()
        .flat_map(|e| e.doc_ids.iter().zip(&e.labels).map(|(&d, &y)| (e.query_id, d, y)))
        .collect();
    let rows = pairs
        .par_iter()
        .map(|&(q_id, d_id, y)| {
            let q = p.tokens.queries[q_id as usize].as_slice();
            let d = p.tokens.docs[d_id as usize].as_slice();
            let (sq, sd) = if projected {
                use crate::encoders::DualEncoder;
                (aligned.embed_query(q)?, aligned.embed_doc(d_id, d)?)
            } else {
                (s.score_query(q)?, student.index.row(d_id)?.to_vec())
            };
            let tq = teacher.teacher.query_target(q, &[d])?;
            let td = teacher.index.row(d_id)?.to_vec();
            Ok((sq, sd, tq, td, f64::from(y)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cols = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (a, b, c, d, y) in rows {
        cols.0.push(a);
        cols.1.push(b);
        cols.2.push(c);
        cols.3.push(d);
        cols.4.push(y);
    }
    Ok(EmbeddingSample::new(cols.0, cols.1, cols.2, cols.3, cols.4)?.with_projected_student(projected))
}

/// Fraction of probe queries whose first generated neighbor lies closer to
/// the probe, in the teacher query-embedding space, than the first random
/// query drawn for it. Probes are the first `probes` training queries that
/// have both.
pub fn locality_rate(
    p: &Prepared,
    teacher: &TeacherRun,
    generated: &[GeneratedQuery],
    random: &[GeneratedQuery],
    probes: usize,
) -> Result<f64> {
    use rayon::prelude::*;
    fn first(items: &[GeneratedQuery], id: u32) -> Option<&[u32]> {
        items
            .iter()
            .find(|g| g.source_query_id == id)
            .map(|g| g.generated_tokens.as_slice())
    }
    let chosen: Vec<(u32, &[u32], &[u32])> = p
        .split
        .train
        .iter()
        .filter_map(|&id| Some((id, first(generated, id)?, first(random, id)?)))
        .take(probes)
        .collect();
    if chosen.is_empty() {
        return Err(Error::invalid("no probe query has both a generated and a random neighbor"));
    }
    let closer = chosen
        .par_iter()
        .map(|&(id, gen, rand)| {
            let ctx = teacher_context(p, id);
            let embed = |q: &[u32]| teacher.teacher.query_target(q, &ctx);
            let anchor = embed(&p.tokens.queries[id as usize])?;
            Ok(distance(&anchor, &embed(gen)?) < distance(&anchor, &embed(rand)?))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(closer.iter().filter(|&&c| c).count() as f64 / closer.len() as f64)
}

/// Documents used to read a cross-encoder query embedding: the query's
/// golden documents.
fn teacher_context(p: &Prepared, query_id: u32) -> Vec<&[u32]> {
    p.dataset
        .corpus
        .golden(query_id)
        .map(|g| g.iter().map(|&d| p.tokens.docs[d as usize].as_slice()).collect())
        .unwrap_or_default()
}

/// Outcome of one preset within an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetOutcome {
    pub preset: Preset,
    pub mode: StudentMode,
    pub metrics: Metrics,
    pub rerank: Metrics,
    pub alignment: Alignment,
    /// The teacher index is byte-identical after distillation and, for
    /// asymmetric students, equal to the index the student serves from.
    pub teacher_index_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seed: u64,
    pub teacher_kind: TeacherKind,
    pub teacher: Metrics,
    pub teacher_checkpoint_unchanged: bool,
    pub autoencoder_accuracy: Option<f64>,
    /// Share of 100 probes whose generated neighbor beats a random query.
    pub locality: Option<f64>,
    pub outcomes: Vec<PresetOutcome>,
}

impl AblationResult {
    pub fn get(&self, preset: Preset) -> Option<&PresetOutcome> {
        self.outcomes.iter().find(|o| o.preset == preset)
    }
}

/// One teacher, then every listed preset distilled from it.
pub fn run_ablation(base: &ExperimentConfig, presets: &[Preset]) -> Result<AblationResult> {
    let p = Prepared::new(generate_dataset(base)?)?;
    let teacher = run_teacher(base, &p)?;
    let teacher_eval = evaluate_teacher(base, &p, &teacher)?;
    let teacher_bytes = teacher.teacher.to_bytes()?;
    let index_bytes = teacher.index.to_bytes()?;
    let needs = |a: Augmentation| presets.iter().any(|p| p.augmentation() == a);
    let augment = if needs(Augmentation::Generated) {
        Some(run_augment(base, &p)?)
    } else {
        None
    };
    let random = if augment.is_some() || needs(Augmentation::Random) {
        random_augmentation(base, &p)?
    } else {
        Vec::new()
    };
    let autoencoder_accuracy = match &augment {
        Some(a) => {
            let train: Vec<Vec<u32>> = p
                .split
                .train
                .iter()
                .map(|&id| p.tokens.queries[id as usize].clone())
                .collect();
            Some(crate::queryaug::round_trip_accuracy(&a.autoencoder, &train)?)
        }
        None => None,
    };
    let locality = match &augment {
        Some(a) => Some(locality_rate(&p, &teacher, &a.queries, &random, 100)?),
        None => None,
    };
    let mut outcomes = Vec::new();
    for &preset in presets {
        let cfg = ExperimentConfig {
            preset,
            ..base.clone()
        };
        let aug: &[GeneratedQuery] = match preset.augmentation() {
            Augmentation::Generated => augment.as_ref().map(|a| a.queries.as_slice()).unwrap_or(&[]),
            Augmentation::Random => &random,
            Augmentation::None => &[],
        };
        let run = run_student(&cfg, &p, &teacher, aug)?;
        outcomes.push(PresetOutcome {
            preset,
            mode: preset.mode(),
            metrics: evaluate_student(&cfg, &p, &run)?.metrics,
            rerank: rerank_student(&cfg, &p, &run)?.metrics,
            alignment: heldout_alignment(&p, &teacher, &run.student)?,
            teacher_index_unchanged: teacher.index.to_bytes()? == index_bytes
                && (run.student.mode != StudentMode::AsymmetricInheritDocs
                    || run.index.to_bytes()? == index_bytes),
        });
    }
    Ok(AblationResult {
        seed: base.seed,
        teacher_kind: base.teacher.kind,
        teacher: teacher_eval.metrics,
        teacher_checkpoint_unchanged: teacher.teacher.to_bytes()? == teacher_bytes,
        autoencoder_accuracy,
        locality,
        outcomes,
    })
}
