use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use kalign_core::checkpoint::Checkpoint;
use kalign_core::config::TrainConfig;
use kalign_core::diagnostics::{
    anisotropy_bound_check, anisotropy_report, asymptotic_gap, export_similarity_matrix, layer_epoch_curves,
    write_curves, write_theorem_report, Sampling,
};
use kalign_core::kg::{load_kg, make_pairs, KnowledgeGraph, Split, Triple};
use kalign_core::kgc::{evaluate, EvalOptions, TiePolicy};
use kalign_core::kgqa::{self, QaTask};
use kalign_core::losses::similarity_matrix;
use kalign_core::model::Encoder;
use kalign_core::synth::{sentences, synthetic_kg, SynthConfig};
use kalign_core::text::{encode_pair, encode_view, TextLimits, TokenSeq, View, Vocab};
use kalign_core::train::{build_vocab, toy_perplexity, Trainer};

#[derive(Parser)]
#[command(name = "kalign", version, about = "Knowledge-aligned language modeling on text-described knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) from a key-value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Filtered link-prediction metrics.
    EvalKgc {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = TieArg::Optimistic)]
        tie: TieArg,
        /// Write per-query ranks as CSV.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Generation-based question answering accuracy.
    EvalKgqa {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated: head, tail, relation, classification.
        #[arg(long, default_value = "head,tail,relation,classification")]
        tasks: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        shots: usize,
        /// Maximum triples per task.
        #[arg(long, default_value_t = 200)]
        limit: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write `task,prompt_hash,gold,output,correct` rows.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Representation diagnostics.
    Diagnose {
        #[command(flatten)]
        model: ModelArgs,
        /// Export the in-batch similarity matrix of the first `--count` triples.
        #[arg(long)]
        sim_matrix: Option<PathBuf>,
        /// Per-layer anisotropy of the probe corpus (JSON on stdout).
        #[arg(long)]
        anisotropy: bool,
        /// Write bound and large-N limit checks as CSV.
        #[arg(long)]
        theorems: Option<PathBuf>,
        /// Layer curves over these extra checkpoints (plus `--ckpt`), as CSV.
        #[arg(long, num_args = 1..)]
        curve_ckpts: Vec<PathBuf>,
        #[arg(long)]
        curves: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// One sentence per line; defaults to sentences of the split.
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the vocabulary of a checkpoint, or build one from a dataset.
    ExportVocab {
        #[arg(long, conflicts_with = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8192)]
        vocab_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity of a checkpoint on a plain-text corpus (one line per text).
    Perplexity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Write the built-in synthetic graph as a dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TieArg {
    Optimistic,
    Pessimistic,
}

struct Loaded {
    ckpt: Checkpoint,
    encoder: Encoder,
    kg: KnowledgeGraph,
}

impl Loaded {
    fn limits(&self) -> TextLimits {
        self.ckpt.train.limits()
    }

    fn vocab(&self) -> &Vocab {
        &self.ckpt.vocab
    }
}

fn load(args: &ModelArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let encoder = ckpt.encoder()?;
    let kg = load_kg(&args.data)?.augment_inverse()?;
    Ok(Loaded { ckpt, encoder, kg })
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let data = cfg
        .data
        .clone()
        .context("config must set `data` to a dataset directory")?;
    let kg = load_kg(&data)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, cfg, &kg)?,
        None => Trainer::new(cfg, &kg)?,
    };
    trainer.run()?;
    let ckpt = trainer.checkpoint()?;
    if let Some(dir) = &trainer.config().output_dir {
        ckpt.save(&dir.join("last.ckpt"))?;
    }
    let last = trainer.log().steps().last().copied();
    print_json(&json!({
        "steps": trainer.state().step,
        "epochs": trainer.state().epoch,
        "tau": trainer.tau()?,
        "last_step": last,
        "output_dir": trainer.config().output_dir,
    }))
}

fn cmd_eval_kgc(model: &ModelArgs, split: Split, tie: TieArg, per_query: Option<&Path>) -> Result<()> {
    let m = load(model)?;
    let opts = EvalOptions {
        tie: match tie {
            TieArg::Optimistic => TiePolicy::Optimistic,
            TieArg::Pessimistic => TiePolicy::Pessimistic,
        },
        ..EvalOptions::default()
    };
    let report = evaluate(&m.kg, split, &m.encoder, m.vocab(), &m.limits(), &opts)?;
    if let Some(p) = per_query {
        write_file(p, &report.per_query_csv(&m.kg))?;
    }
    print_json(&json!({
        "split": split.to_string(),
        "all": report.metrics,
        "tail": report.tail,
        "head": report.head,
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval_kgqa(
    model: &ModelArgs,
    tasks: &str,
    split: Split,
    shots: usize,
    limit: usize,
    max_new: usize,
    seed: u64,
    transcript: Option<&Path>,
) -> Result<()> {
    let m = load(model)?;
    let tasks = tasks
        .split(',')
        .map(|t| QaTask::parse(t.trim()))
        .collect::<kalign_core::Result<Vec<_>>>()?;
    let mut pool: Vec<Triple> = m.kg.split(split).to_vec();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        pool.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    }
    let originals: Vec<Triple> = pool.iter().copied().filter(|t| !m.kg.is_inverse(t.relation)).collect();
    let mut samples = Vec::new();
    for task in tasks {
        // tail prediction also covers inverse triples; the other tasks are
        // phrased over original triples
        let source = if task == QaTask::TailPrediction { &pool } else { &originals };
        let chosen: Vec<Triple> = source.iter().copied().take(limit).collect();
        samples.extend(kgqa::build_samples(task, &chosen, &m.kg, shots, seed)?);
    }
    let (scores, rows) = kgqa::run(&m.encoder, m.vocab(), &samples, max_new)?;
    if let Some(p) = transcript {
        write_file(p, &kgqa::transcript_csv(&rows))?;
    }
    let per_task: serde_json::Map<String, serde_json::Value> = scores
        .iter()
        .map(|s| {
            (
                s.task.as_str().to_string(),
                json!({"accuracy": s.accuracy, "correct": s.correct, "total": s.total}),
            )
        })
        .collect();
    print_json(&json!({ "split": split.to_string(), "shots": shots, "tasks": per_task }))
}

fn probe_views(m: &Loaded, split: Split, probe: Option<&Path>) -> Result<Vec<TokenSeq>> {
    let texts: Vec<String> = match probe {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => {
            let originals: Vec<Triple> =
                m.kg.split(split).iter().copied().filter(|t| !m.kg.is_inverse(t.relation)).collect();
            sentences(&m.kg, &originals)
        }
    };
    let max = m.ckpt.model.max_seq_len;
    Ok(texts
        .iter()
        .map(|t| encode_view(t, View::Tail, m.vocab(), max))
        .collect::<kalign_core::Result<Vec<_>>>()?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_diagnose(
    model: &ModelArgs,
    sim_matrix: Option<&Path>,
    anisotropy: bool,
    theorems: Option<&Path>,
    curve_ckpts: &[PathBuf],
    curves: Option<&Path>,
    split: Split,
    count: usize,
    probe: Option<&Path>,
    seed: u64,
) -> Result<()> {
    if sim_matrix.is_none() && !anisotropy && theorems.is_none() && curves.is_none() {
        bail!("nothing to do: pass --sim-matrix, --anisotropy, --theorems or --curves");
    }
    let m = load(model)?;
    let limits = m.limits();
    let mut out = serde_json::Map::new();
    let views = probe_views(&m, split, probe)?;
    let refs: Vec<&[u32]> = views.iter().map(|v| v.ids()).collect();

    if let Some(path) = sim_matrix {
        let triples: Vec<Triple> = m
            .kg
            .split(split)
            .iter()
            .copied()
            .filter(|t| !m.kg.is_inverse(t.relation))
            .take(count)
            .collect();
        let pairs = make_pairs(&triples, &m.kg);
        let encoded: Vec<_> = pairs.iter().map(|p| encode_pair(p, m.vocab(), &limits)).collect();
        let hr: Vec<&[u32]> = encoded.iter().map(|e| e.0.ids()).collect();
        let t: Vec<&[u32]> = encoded.iter().map(|e| e.1.ids()).collect();
        let sim = similarity_matrix(&m.encoder.embed_batch(&hr)?, &m.encoder.embed_batch(&t)?)?;
        let rows: Vec<String> = pairs.iter().map(|p| p.hr_text.clone()).collect();
        let cols: Vec<String> = pairs.iter().map(|p| p.t_text.clone()).collect();
        export_similarity_matrix(&sim, &rows, &cols, path)?;
        out.insert("similarity_gap".into(), json!(sim.diagonal_gap()));
    }
    if anisotropy {
        let report = anisotropy_report(&m.encoder, &refs, "probe", Some(m.ckpt.state.epoch as u32))?;
        out.insert("anisotropy".into(), serde_json::to_value(report)?);
    }
    if let Some(path) = theorems {
        let embs = m.encoder.embed_batch(&refs)?;
        let mut checks = Vec::new();
        for tau in [0.05, 0.5, 1.0] {
            checks.push(anisotropy_bound_check(&embs, tau)?);
        }
        let triples: Vec<Triple> = m.kg.train().iter().copied().take(512).collect();
        let encoded: Vec<_> = make_pairs(&triples, &m.kg)
            .iter()
            .map(|p| encode_pair(p, m.vocab(), &limits))
            .collect();
        let hr: Vec<&[u32]> = encoded.iter().map(|e| e.0.ids()).collect();
        let t: Vec<&[u32]> = encoded.iter().map(|e| e.1.ids()).collect();
        let e_t = m.encoder.embed_batch(&t)?;
        let pairs: Vec<_> = m.encoder.embed_batch(&hr)?.into_iter().zip(e_t.iter().cloned()).collect();
        let tau = m.ckpt.log_tau()?.exp();
        let series = asymptotic_gap(&pairs, &e_t, tau, &[4, 16, 64, 256], 1, Sampling::WithReplacement, seed)?;
        checks.extend(series.checks());
        write_theorem_report(&checks, path)?;
        out.insert("theorems".into(), serde_json::to_value(&checks)?);
    }
    if let Some(path) = curves {
        let mut encoders: Vec<(String, Encoder)> = Vec::new();
        for p in curve_ckpts {
            let c = Checkpoint::load(p)?;
            if c.vocab.hash() != m.ckpt.vocab.hash() {
                bail!("{} uses a different vocabulary", p.display());
            }
            encoders.push((p.display().to_string(), c.encoder()?));
        }
        encoders.push((model.ckpt.display().to_string(), m.ckpt.encoder()?));
        let list: Vec<(String, &Encoder)> = encoders.iter().map(|(n, e)| (n.clone(), e)).collect();
        let rows = layer_epoch_curves(&list, &refs)?;
        write_curves(&rows, path)?;
        out.insert("curves".into(), json!(rows.len()));
    }
    print_json(&serde_json::Value::Object(out))
}

fn cmd_export_vocab(ckpt: Option<&Path>, data: Option<&Path>, vocab_size: usize, out: Option<&Path>) -> Result<()> {
    let vocab = match (ckpt, data) {
        (Some(c), _) => Checkpoint::load(c)?.vocab,
        (None, Some(d)) => build_vocab(&load_kg(d)?.augment_inverse()?, vocab_size)?,
        (None, None) => bail!("pass --ckpt or --data"),
    };
    match out {
        Some(p) => {
            vocab.save(p)?;
            eprintln!("{} tokens, hash {}", vocab.len(), vocab.hash());
        }
        None => {
            for t in vocab.tokens() {
                println!("{t}");
            }
        }
    }
    Ok(())
}

fn cmd_perplexity(ckpt: &Path, corpus: &Path) -> Result<()> {
    let c = Checkpoint::load(ckpt)?;
    let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let ppl = toy_perplexity(&c.encoder()?, &c.vocab, &lines)?;
    print_json(&json!({ "perplexity": ppl, "lines": lines.len() }))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { config, resume } => cmd_train(config, resume.as_deref()),
        Command::EvalKgc { model, split, tie, per_query } => {
            cmd_eval_kgc(model, (*split).into(), *tie, per_query.as_deref())
        }
        Command::EvalKgqa { model, tasks, split, shots, limit, max_new, seed, transcript } => cmd_eval_kgqa(
            model,
            tasks,
            (*split).into(),
            *shots,
            *limit,
            *max_new,
            *seed,
            transcript.as_deref(),
        ),
        Command::Diagnose {
            model,
            sim_matrix,
            anisotropy,
            theorems,
            curve_ckpts,
            curves,
            split,
            count,
            probe,
            seed,
        } => cmd_diagnose(
            model,
            sim_matrix.as_deref(),
            *anisotropy,
            theorems.as_deref(),
            curve_ckpts,
            curves.as_deref(),
            (*split).into(),
            *count,
            probe.as_deref(),
            *seed,
        ),
        Command::ExportVocab { ckpt, data, vocab_size, out } => {
            cmd_export_vocab(ckpt.as_deref(), data.as_deref(), *vocab_size, out.as_deref())
        }
        Command::Perplexity { ckpt, corpus } => cmd_perplexity(ckpt, corpus),
        Command::Synth { out, seed } => {
            let kg = synthetic_kg(&SynthConfig { seed: *seed, ..SynthConfig::default() })?;
            kg.save(out)?;
            print_json(&json!({
                "entities": kg.num_entities(),
                "relations": kg.num_relations(),
                "train": kg.train().len(),
                "valid": kg.valid().len(),
                "test": kg.test().len(),
            }))
        }
    }
}
