//! Generation-based question answering over graph triples: prompt
//! templates for four sub-tasks, greedy decoding and exact-match scoring.

use std::collections::HashSet;
use std::fmt::Write as _;

use candle_core::{DType, IndexOp};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::model::{Encoder, Mode};
use crate::text::{normalize, template, tokenize, Vocab, END_ID};

/// Instruction wording of each sub-task. `{list}` is replaced by the
/// relation list joined with `" | "`.
pub mod prompts {
    pub const HEAD: &str =
        "Given the tail entity and inverse relation, write a head entity that completes the triple";
    pub const TAIL: &str = crate::text::template::TRIPLE_COMPLETION;
    pub const RELATION: &str =
        "Given the head entity and tail entity, write the relation between them, chosen from this relation list : {list}";
    pub const CLASSIFICATION: &str = "Is the following triple true ? Answer yes or no";
    pub const YES: &str = "yes";
    pub const NO: &str = "no";

    pub fn all_text() -> String {
        [HEAD, TAIL, RELATION, CLASSIFICATION, YES, NO].join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum QaTask {
    HeadPrediction,
    TailPrediction,
    RelationPrediction,
    TripleClassification,
}

impl QaTask {
    pub const ALL: [QaTask; 4] = [
        QaTask::HeadPrediction,
        QaTask::TailPrediction,
        QaTask::RelationPrediction,
        QaTask::TripleClassification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QaTask::HeadPrediction => "head",
            QaTask::TailPrediction => "tail",
            QaTask::RelationPrediction => "relation",
            QaTask::TripleClassification => "classification",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        QaTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown KGQA task '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QaSample {
    pub task: QaTask,
    pub triple: Triple,
    pub prompt: String,
    pub gold: String,
    pub exemplars: Vec<Triple>,
}

fn original(kg: &KnowledgeGraph, t: Triple) -> Triple {
    if kg.is_inverse(t.relation) {
        Triple {
            head: t.tail,
            relation: kg.inverse_of(t.relation).expect("augmented"),
            tail: t.head,
        }
    } else {
        t
    }
}

fn relation_name(kg: &KnowledgeGraph, r: RelationId) -> &str {
    kg.relation(r).name()
}

fn entity_name(kg: &KnowledgeGraph, e: EntityId) -> &str {
    &kg.entity(e).name
}

fn relation_list(kg: &KnowledgeGraph) -> String {
    kg.relations()[..kg.num_original_relations()]
        .iter()
        .map(|r| r.name())
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Instruction, input and gold answer of one sub-task for `t`.
/// `is_true` only affects triple classification.
fn task_fields(task: QaTask, t: Triple, kg: &KnowledgeGraph, is_true: bool) -> (String, String, String) {
    match task {
        QaTask::TailPrediction => (
            prompts::TAIL.into(),
            format!("{} {}", entity_name(kg, t.head), relation_name(kg, t.relation)),
            entity_name(kg, t.tail).into(),
        ),
        QaTask::HeadPrediction => {
            // phrase as tail entity + "inverse" relation
            let o = original(kg, t);
            (
                prompts::HEAD.into(),
                format!("{} inverse {}", entity_name(kg, o.tail), relation_name(kg, o.relation)),
                entity_name(kg, o.head).into(),
            )
        }
        QaTask::RelationPrediction => {
            let o = original(kg, t);
            (
                prompts::RELATION.replace("{list}", &relation_list(kg)),
                format!("{} {}", entity_name(kg, o.head), entity_name(kg, o.tail)),
                relation_name(kg, o.relation).into(),
            )
        }
        QaTask::TripleClassification => (
            prompts::CLASSIFICATION.into(),
            format!(
                "{} {} {}",
                entity_name(kg, t.head),
                relation_name(kg, t.relation),
                entity_name(kg, t.tail)
            ),
            if is_true { prompts::YES } else { prompts::NO }.into(),
        ),
    }
}

fn block(instruction: &str, input: &str) -> String {
    format!(
        "{}\n{instruction}\n\n{}\n{input}\n\n{}\n",
        template::INSTRUCTION_HEADER,
        template::INPUT_HEADER,
        template::RESPONSE_HEADER
    )
}

fn mix(seed: u64, t: &Triple, task: QaTask) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(t.head.0.to_le_bytes());
    h.update(t.relation.0.to_le_bytes());
    h.update(t.tail.0.to_le_bytes());
    h.update(task.as_str().as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Prompt for `triple`, preceded by `k_shots` worked examples drawn from the
/// validation split (original relations only).
pub fn build_prompt(
    task: QaTask,
    triple: Triple,
    kg: &KnowledgeGraph,
    k_shots: usize,
    seed: u64,
) -> Result<QaSample> {
    let all: HashSet<Triple> = kg.all_triples().copied().collect();
    build_prompt_labeled(task, triple, all.contains(&triple), kg, k_shots, seed)
}

fn build_prompt_labeled(
    task: QaTask,
    triple: Triple,
    is_true: bool,
    kg: &KnowledgeGraph,
    k_shots: usize,
    seed: u64,
) -> Result<QaSample> {
    let pool: Vec<Triple> = kg
        .valid()
        .iter()
        .copied()
        .filter(|t| !kg.is_inverse(t.relation) && *t != triple)
        .collect();
    if k_shots > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "{k_shots} shots requested but the validation split offers {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &triple, task));
    let exemplars: Vec<Triple> = pool.choose_multiple(&mut rng, k_shots).copied().collect();
    let mut prompt = format!("{}\n\n", template::PREAMBLE);
    for ex in &exemplars {
        let (inst, input, answer) = task_fields(task, *ex, kg, true);
        let _ = write!(prompt, "{}{answer}\n\n", block(&inst, &input));
    }
    let (inst, input, gold) = task_fields(task, triple, kg, is_true);
    prompt.push_str(&block(&inst, &input));
    Ok(QaSample {
        task,
        triple,
        prompt,
        gold,
        exemplars,
    })
}

/// Triple-classification items: each positive followed by one negative
/// made by replacing the tail with a uniformly drawn entity that does not
/// form a known triple.
pub fn classification_items(triples: &[Triple], kg: &KnowledgeGraph, seed: u64) -> Vec<(Triple, bool)> {
    let all: HashSet<Triple> = kg.all_triples().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * triples.len());
    for &t in triples {
        out.push((t, true));
        for _ in 0..1000 {
            let tail = EntityId(rng.gen_range(0..kg.num_entities() as u32));
            let neg = Triple { tail, ..t };
            if !all.contains(&neg) {
                out.push((neg, false));
                break;
            }
        }
    }
    out
}

/// Samples for `task` over `triples` (positives and corrupted negatives
/// for classification).
pub fn build_samples(
    task: QaTask,
    triples: &[Triple],
    kg: &KnowledgeGraph,
    k_shots: usize,
    seed: u64,
) -> Result<Vec<QaSample>> {
    let items = match task {
        QaTask::TripleClassification => classification_items(triples, kg, seed),
        _ => triples.iter().map(|&t| (t, true)).collect(),
    };
    items
        .into_iter()
        .map(|(t, truth)| build_prompt_labeled(task, t, truth, kg, k_shots, seed))
        .collect()
}

/// Argmax continuation of `prompt` until the end marker or `max_new`
/// tokens. The end marker is not included in the output.
pub fn greedy_decode(encoder: &Encoder, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let max = encoder.config().max_seq_len;
    if prompt.is_empty() || prompt.len() + max_new > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + max_new,
            max,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let fwd = encoder.forward(&[&seq], Mode::Eval, false, true)?;
        let logits = fwd.logits.expect("logits requested");
        let row: Vec<f64> = logits.i((0, seq.len() - 1))?.to_dtype(DType::F64)?.to_vec1()?;
        let next = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32;
        if next == END_ID {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

const CLAUSE_BREAKS: [&str; 5] = [":", ",", ";", ".", "!"];

/// Answer text used for matching: the normalized output up to the first
/// clause punctuation.
pub fn extract_answer(task: QaTask, output: &str) -> String {
    let tokens = tokenize(output);
    match task {
        QaTask::TripleClassification => tokens
            .into_iter()
            .find(|t| t == prompts::YES || t == prompts::NO)
            .unwrap_or_default(),
        _ => tokens
            .into_iter()
            .take_while(|t| !CLAUSE_BREAKS.contains(&t.as_str()))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

pub fn is_correct(sample: &QaSample, output: &str) -> bool {
    let answer = extract_answer(sample.task, output);
    !answer.is_empty() && answer == normalize(&sample.gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: QaTask,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

pub fn score(samples: &[QaSample], outputs: &[String]) -> Result<Vec<TaskScore>> {
    if samples.len() != outputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples but {} outputs",
            samples.len(),
            outputs.len()
        )));
    }
    let mut scores = Vec::new();
    for task in QaTask::ALL {
        let (mut correct, mut total) = (0, 0);
        for (s, o) in samples.iter().zip(outputs).filter(|(s, _)| s.task == task) {
            total += 1;
            correct += usize::from(is_correct(s, o));
        }
        if total > 0 {
            scores.push(TaskScore {
                task,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            });
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptRow {
    pub task: QaTask,
    pub prompt_hash: String,
    pub gold: String,
    pub output: String,
    pub correct: bool,
}

pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Decode every sample and score the outputs.
pub fn run(
    encoder: &Encoder,
    vocab: &Vocab,
    samples: &[QaSample],
    max_new: usize,
) -> Result<(Vec<TaskScore>, Vec<TranscriptRow>)> {
    let mut outputs = Vec::with_capacity(samples.len());
    for s in samples {
        let prompt = vocab.encode(&s.prompt);
        let ids = greedy_decode(encoder, &prompt, max_new)?;
        outputs.push(vocab.decode(&ids));
    }
    let transcript = samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| TranscriptRow {
            task: s.task,
            prompt_hash: prompt_hash(&s.prompt),
            gold: s.gold.clone(),
            output: o.clone(),
            correct: is_correct(s, o),
        })
        .collect();
    Ok((score(samples, &outputs)?, transcript))
}

pub fn transcript_csv(rows: &[TranscriptRow]) -> String {
    let field = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut out = String::from("task,prompt_hash,gold,output,correct\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.task.as_str(),
            r.prompt_hash,
            field(&r.gold),
            field(&r.output),
            r.correct
        );
    }
    out
}
