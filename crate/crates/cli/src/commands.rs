//! Subcommand implementations. Each reads its inputs from the output root,
//! writes one stage directory and returns its manifest.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use irdistill_core::bounds::{discrepancy_csv, lemma4_check, lemma5_check, mean_abs, pairwise_discrepancy, theorem1_terms, BoundReport};
use irdistill_core::datasim::{load_dataset, save_dataset};
use irdistill_core::distill::{Augmentation, Preset, Student, Teacher, TrainHistory, train_teacher};
use irdistill_core::encoders::{from_checkpoint_bytes, to_checkpoint_bytes};
use irdistill_core::experiment::{
    bound_samples, complete_dataset, evaluate_student, evaluate_teacher, generate_dataset,
    heldout_query_embeddings, random_augmentation, rerank_student, run_augment, run_student,
    Evaluation, ExperimentConfig, Prepared, StudentRun, TeacherRun,
};
use irdistill_core::queryaug::{generated_from_jsonl, generated_to_jsonl, round_trip_accuracy};
use irdistill_core::retrieval::{parse_rankings_tsv, rankings_to_tsv, DocumentIndex, Metrics};
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::manifest::{Manifest, Stage, MANIFEST};

pub const DATA_DIR: &str = "data";
pub const TEACHER_DIR: &str = "teacher";
pub const INDEX_DIR: &str = "index";
pub const AUGMENT_DIR: &str = "augment";
pub const STUDENTS_DIR: &str = "students";
pub const EVAL_DIR: &str = "eval";
pub const BOUNDS_DIR: &str = "bounds";

const DATA_FILES: [&str; 6] = [
    "corpus.jsonl",
    "queries.jsonl",
    "qrels.tsv",
    "examples.jsonl",
    "splits.json",
    "dataset.json",
];

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    hash: String,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, root: PathBuf) -> Self {
        let hash = config_hash(&cfg);
        Self { cfg, root, hash }
    }

    fn stage(&self, dir: &str, command: &str) -> Stage {
        Stage::new(&self.root, dir, command, &self.hash, self.cfg.seed)
    }

    fn prepared(&self, stage: &mut Stage) -> Result<Prepared> {
        let dir = self.root.join(DATA_DIR);
        stage.read_input(&dir.join(MANIFEST))?;
        let data = load_dataset(&dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
        Ok(Prepared::new(data)?)
    }

    fn teacher(&self, stage: &mut Stage) -> Result<TeacherRun> {
        let path = self.root.join(TEACHER_DIR).join("checkpoint.json");
        let teacher = Teacher::from_bytes(&stage.read_input(&path)?)
            .with_context(|| format!("loading {}", path.display()))?;
        let path = self.root.join(INDEX_DIR).join("index.json");
        let index = DocumentIndex::from_bytes(&stage.read_input(&path)?, &path)?;
        Ok(TeacherRun {
            teacher,
            history: TrainHistory::default(),
            index,
        })
    }

    fn student(&self, stage: &mut Stage, preset: Preset, p: &Prepared, teacher: &TeacherRun) -> Result<StudentRun> {
        let path = self.root.join(STUDENTS_DIR).join(preset.name()).join("student.json");
        let student: Student = from_checkpoint_bytes(&stage.read_input(&path)?)
            .with_context(|| format!("loading {}", path.display()))?;
        let index = student.build_index(&p.tokens.docs, &teacher.index)?;
        Ok(StudentRun {
            student,
            history: TrainHistory::default(),
            index,
        })
    }

    fn with_preset(&self, preset: Option<Preset>) -> ExperimentConfig {
        ExperimentConfig {
            preset: preset.unwrap_or(self.cfg.preset),
            ..self.cfg.clone()
        }
    }
}

fn json_pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

pub fn gen_data(ctx: &Ctx) -> Result<Manifest> {
    let cfg = &ctx.cfg;
    let mut stage = ctx.stage(DATA_DIR, "gen-data");
    let data = match &cfg.data.path {
        Some(src) => {
            let data = load_dataset(src).with_context(|| format!("ingesting {}", src.display()))?;
            complete_dataset(cfg, data)?
        }
        None => generate_dataset(cfg)?,
    };
    save_dataset(stage.dir(), &data)?;
    for f in DATA_FILES {
        if stage.dir().join(f).exists() {
            stage.record(f)?;
        }
    }
    println!(
        "dataset: {} documents, {} queries, {} training examples",
        data.corpus.docs.len(),
        data.corpus.queries.len(),
        data.examples.len()
    );
    stage.finish()
}

pub fn train_teacher_cmd(ctx: &Ctx) -> Result<Manifest> {
    let mut stage = ctx.stage(TEACHER_DIR, "train-teacher");
    let p = ctx.prepared(&mut stage)?;
    let (teacher, history) = train_teacher(&ctx.cfg.teacher, &p.train_data(), &ctx.cfg.teacher_train())?;
    stage.write("checkpoint.json", &teacher.to_bytes()?)?;
    stage.write("history.csv", history.to_csv().as_bytes())?;
    println!(
        "teacher: objective {:?} -> {:?}",
        history.initial_loss.unwrap_or(f64::NAN),
        history.final_loss.unwrap_or(f64::NAN)
    );
    stage.finish()
}

pub fn build_index(ctx: &Ctx) -> Result<Manifest> {
    let mut stage = ctx.stage(INDEX_DIR, "build-index");
    let p = ctx.prepared(&mut stage)?;
    let path = ctx.root.join(TEACHER_DIR).join("checkpoint.json");
    let teacher = Teacher::from_bytes(&stage.read_input(&path)?)?;
    let index = teacher.build_index(&p.tokens.docs)?;
    stage.write("index.json", &index.to_bytes()?)?;
    println!("index: {} documents, dimension {}", index.len(), index.dim());
    stage.finish()
}

#[derive(Debug, Serialize, Deserialize)]
struct AugmentSummary {
    round_trip_accuracy: f64,
    generated: usize,
}

pub fn augment(ctx: &Ctx) -> Result<Manifest> {
    let mut stage = ctx.stage(AUGMENT_DIR, "augment");
    let p = ctx.prepared(&mut stage)?;
    let run = run_augment(&ctx.cfg, &p)?;
    let train: Vec<Vec<u32>> = p.split.train.iter().map(|&id| p.tokens.queries[id as usize].clone()).collect();
    let summary = AugmentSummary {
        round_trip_accuracy: round_trip_accuracy(&run.autoencoder, &train)?,
        generated: run.queries.len(),
    };
    let mut history = String::from("step,metric,value\n");
    for (step, v) in &run.history.losses {
        history.push_str(&format!("{step},loss,{v}\n"));
    }
    for (step, v) in &run.history.accuracy {
        history.push_str(&format!("{step},round_trip_accuracy,{v}\n"));
    }
    stage.write("autoencoder.json", &to_checkpoint_bytes(&run.autoencoder)?)?;
    stage.write("generated.jsonl", &generated_to_jsonl(&run.queries)?)?;
    stage.write("history.csv", history.as_bytes())?;
    stage.write("summary.json", &json_pretty(&summary)?)?;
    println!(
        "augment: round-trip accuracy {:.3}, {} generated queries",
        summary.round_trip_accuracy, summary.generated
    );
    stage.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub preset: Preset,
    pub mode: irdistill_core::distill::StudentMode,
    pub weights: irdistill_core::distill::LossWeights,
    pub augmentation: Augmentation,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Hash of the teacher index the student scores against, when
    /// asymmetric.
    pub inherited_index: Option<String>,
}

pub fn distill(ctx: &Ctx, preset: Option<Preset>) -> Result<Manifest> {
    let cfg = ctx.with_preset(preset);
    let preset = cfg.preset;
    let mut stage = ctx.stage(&format!("{STUDENTS_DIR}/{}", preset.name()), "distill");
    let p = ctx.prepared(&mut stage)?;
    let teacher = ctx.teacher(&mut stage)?;
    let teacher_bytes = teacher.teacher.to_bytes()?;
    let index_bytes = teacher.index.to_bytes()?;
    let aug = match preset.augmentation() {
        Augmentation::None => Vec::new(),
        Augmentation::Random => random_augmentation(&cfg, &p)?,
        Augmentation::Generated => {
            let path = ctx.root.join(AUGMENT_DIR).join("generated.jsonl");
            let bytes = stage.read_input(&path)?;
            generated_from_jsonl(std::str::from_utf8(&bytes)?, &path)?
        }
    };
    let run = run_student(&cfg, &p, &teacher, &aug)?;
    if teacher.teacher.to_bytes()? != teacher_bytes || teacher.index.to_bytes()? != index_bytes {
        bail!("teacher or its index changed during distillation");
    }
    let summary = DistillSummary {
        preset,
        mode: run.student.mode,
        weights: cfg.loss_weights(),
        augmentation: preset.augmentation(),
        initial_loss: run.history.initial_loss,
        final_loss: run.history.final_loss,
        inherited_index: run.student.index_hash.clone(),
    };
    stage.write("student.json", &to_checkpoint_bytes(&run.student)?)?;
    stage.write("history.csv", run.history.to_csv().as_bytes())?;
    stage.write("summary.json", &json_pretty(&summary)?)?;
    println!(
        "distill {}: objective {:?} -> {:?}",
        preset.name(),
        summary.initial_loss.unwrap_or(f64::NAN),
        summary.final_loss.unwrap_or(f64::NAN)
    );
    stage.finish()
}

/// What `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalSource {
    Rankings(PathBuf),
    Teacher,
    Student(Preset),
}

pub fn eval(ctx: &Ctx, source: &EvalSource, rerank: bool, name: Option<&str>) -> Result<Manifest> {
    let name = match (name, source) {
        (Some(n), _) => n.to_string(),
        (None, EvalSource::Rankings(p)) => format!(
            "rankings-{}",
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        ),
        (None, EvalSource::Teacher) => "teacher".to_string(),
        (None, EvalSource::Student(preset)) => format!("student-{}", preset.name()),
    };
    let name = if rerank && name_is_default(&name, source) {
        format!("{name}-rerank")
    } else {
        name
    };
    check_name(&name)?;
    let mut stage = ctx.stage(&format!("{EVAL_DIR}/{name}"), "eval");
    let p = ctx.prepared(&mut stage)?;
    let cfg = &ctx.cfg;
    let evaluation = match source {
        EvalSource::Rankings(path) => {
            let bytes = stage.read_input(path)?;
            let rankings = parse_rankings_tsv(std::str::from_utf8(&bytes)?, path)?;
            let metrics = Metrics::compute(&rankings, &p.judgments, &p.dataset.corpus)?;
            Evaluation { rankings, metrics }
        }
        EvalSource::Teacher => {
            let t = ctx.teacher(&mut stage)?;
            if rerank {
                p.evaluate_rerank(cfg.eval.rerank_candidates, |q, d| t.teacher.score(q, &p.tokens.docs[d as usize]))?
            } else {
                evaluate_teacher(cfg, &p, &t)?
            }
        }
        EvalSource::Student(preset) => {
            let t = ctx.teacher(&mut stage)?;
            let run = ctx.student(&mut stage, *preset, &p, &t)?;
            let c = ctx.with_preset(Some(*preset));
            if rerank {
                rerank_student(&c, &p, &run)?
            } else {
                evaluate_student(&c, &p, &run)?
            }
        }
    };
    stage.write("metrics.json", &json_pretty(&evaluation.metrics)?)?;
    if !matches!(source, EvalSource::Rankings(_)) {
        stage.write("rankings.tsv", rankings_to_tsv(&evaluation.rankings).as_bytes())?;
    }
    for (metric, value) in evaluation.metrics.named() {
        println!("{name}\t{metric}\t{value}");
    }
    stage.finish()
}

fn name_is_default(name: &str, source: &EvalSource) -> bool {
    match source {
        EvalSource::Teacher => name == "teacher",
        EvalSource::Student(p) => name == format!("student-{}", p.name()),
        EvalSource::Rankings(_) => false,
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.starts_with('.') || name.contains(['/', '\\']) {
        return Err(crate::config::UsageError(format!("invalid evaluation name {name:?}")).into());
    }
    Ok(())
}

/// Everything `bounds` writes besides the discrepancy values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsSummary {
    pub preset: Preset,
    pub lemma4: BoundReport,
    pub lemma5: BoundReport,
    pub theorem1: BoundReport,
    pub mean_abs_discrepancy: f64,
}

pub fn bounds(ctx: &Ctx, preset: Option<Preset>) -> Result<Manifest> {
    let preset = preset.unwrap_or(ctx.cfg.preset);
    let mut stage = ctx.stage(&format!("{BOUNDS_DIR}/{}", preset.name()), "bounds");
    let p = ctx.prepared(&mut stage)?;
    let teacher = ctx.teacher(&mut stage)?;
    let student = ctx.student(&mut stage, preset, &p, &teacher)?;
    let (train, heldout) = bound_samples(&p, &teacher, &student, ctx.cfg.seed)?;
    let (t, s) = heldout_query_embeddings(&p, &teacher, &student.student)?;
    let disc = pairwise_discrepancy(&t, &s)?;
    let summary = BoundsSummary {
        preset,
        lemma4: lemma4_check(&train)?,
        lemma5: lemma5_check(&train)?,
        theorem1: theorem1_terms(&train, &heldout)?,
        mean_abs_discrepancy: mean_abs(&disc),
    };
    stage.write("bounds.json", &json_pretty(&summary)?)?;
    stage.write("discrepancy.csv", discrepancy_csv(&disc).as_bytes())?;
    for (name, r) in [("lemma4", &summary.lemma4), ("lemma5", &summary.lemma5), ("theorem1", &summary.theorem1)] {
        println!("{name}: lhs {} rhs {} holds {}", r.lhs, r.rhs, r.verdict);
    }
    println!("mean |discrepancy| {}", summary.mean_abs_discrepancy);
    stage.finish()
}
