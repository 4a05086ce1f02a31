//! Joint explicit + implicit alignment training loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{Checkpoint, TrainState, LOG_TAU};
use crate::config::TrainConfig;
use crate::diagnostics::anisotropy_report;
use crate::error::{Error, Result};
use crate::kg::{make_pairs, KnowledgeGraph, Split};
use crate::kgc::{evaluate, EvalOptions, KgcMetrics};
use crate::kgqa::prompts;
use crate::losses::{explicit_loss, implicit_loss, similarity_tensor};
use crate::model::{Encoder, Mode};
use crate::synth::sentences;
use crate::text::{
    encode_pair, encode_view, render_instruction, template, InstructionSample, TokenSeq, View, Vocab,
    END_ID,
};

const STREAM_EXPLICIT: u64 = 1;
const STREAM_IMPLICIT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) ^ index);
    rng
}

fn permutation(n: usize, seed: u64, stream: u64, index: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut stream_rng(seed, stream, index));
    p
}

/// Vocabulary over entity names and descriptions, relation texts and the
/// prompt templates.
pub fn build_vocab(kg: &KnowledgeGraph, max_size: usize) -> Result<Vocab> {
    let mut corpus: Vec<String> = Vec::new();
    for e in kg.entities() {
        corpus.push(e.name.clone());
        corpus.push(e.text().to_string());
    }
    for r in kg.relations() {
        corpus.push(r.text().to_string());
    }
    corpus.push(template::all_text());
    corpus.push(prompts::all_text());
    corpus.push("inverse".into());
    Vocab::build(&corpus, max_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_exp: f64,
    pub l_imp: f64,
    pub l_joint: f64,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_l_exp: f64,
    pub mean_l_imp: f64,
    pub valid: Option<KgcMetrics>,
    pub anisotropy: Option<f64>,
}

/// Append-only training log, mirrored to a JSON-lines file when a path is
/// set.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<Value>,
    path: Option<PathBuf>,
}

impl MetricsLog {
    pub fn new(path: Option<PathBuf>) -> Self {
        MetricsLog { records: Vec::new(), path }
    }

    fn push(&mut self, kind: &str, mut value: Value) -> Result<()> {
        value["kind"] = json!(kind);
        if let Some(path) = &self.path {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{value}").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(value);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn steps(&self) -> Vec<StepRecord> {
        self.records
            .iter()
            .filter(|r| r["kind"] == "step")
            .filter_map(|r| serde_json::from_value(r.clone()).ok())
            .collect()
    }

    pub fn epochs(&self) -> Vec<&Value> {
        self.records.iter().filter(|r| r["kind"] == "epoch").collect()
    }

    pub fn config_deltas(&self) -> Vec<&Value> {
        self.records.iter().filter(|r| r["kind"] == "config_delta").collect()
    }
}

/// Loss tensors of one batch.
pub struct BatchLosses {
    pub explicit: Tensor,
    pub implicit: Tensor,
    pub joint: Tensor,
}

/// `L_exp + λ·L_imp` over one explicit batch of view pairs and one implicit
/// batch of instruction samples. Both views of every pair go through a
/// single forward pass.
pub fn batch_losses(
    encoder: &Encoder,
    tau: &Tensor,
    margin: f64,
    lambda: f64,
    pairs: &[(&TokenSeq, &TokenSeq)],
    samples: &[&InstructionSample],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchLosses> {
    let n = pairs.len();
    let views: Vec<&[u32]> = pairs
        .iter()
        .map(|(hr, _)| hr.ids())
        .chain(pairs.iter().map(|(_, t)| t.ids()))
        .collect();
    let emb = encoder.embed_tensor(&views, Mode::Train { rng: dropout.as_deref_mut() })?;
    let s = similarity_tensor(&emb.narrow(0, 0, n)?, &emb.narrow(0, n, n)?)?;
    let explicit = explicit_loss(&s, &tau.to_dtype(s.dtype())?, margin)?;
    let seqs: Vec<&[u32]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let out = encoder.forward(&seqs, Mode::Train { rng: dropout }, false, true)?;
    let implicit = implicit_loss(&out.logits.expect("logits requested"), samples)?;
    let joint = (&explicit + (&implicit * lambda)?)?;
    Ok(BatchLosses {
        explicit,
        implicit,
        joint,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct Trainer {
    cfg: TrainConfig,
    kg: KnowledgeGraph,
    vocab: Vocab,
    encoder: Encoder,
    log_tau: Var,
    opt: crate::optim::AdamW,
    state: TrainState,
    pairs: Vec<(TokenSeq, TokenSeq)>,
    samples: Vec<InstructionSample>,
    probe: Vec<TokenSeq>,
    explicit_perm: Vec<usize>,
    implicit_perm: Vec<usize>,
    epoch_losses: Vec<(f64, f64)>,
    log: MetricsLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, kg: &KnowledgeGraph) -> Result<Self> {
        let kg = prepare_graph(kg)?;
        let vocab = build_vocab(&kg, cfg.vocab_size)?;
        let mut mcfg = cfg.model;
        mcfg.vocab_size = vocab.len();
        let mut encoder = Encoder::new(mcfg, DType::F32)?;
        if cfg.use_adapters {
            encoder.attach_adapters(cfg.adapter)?;
        }
        let log_tau = Var::new(cfg.temperature.ln(), &Device::Cpu)?;
        let state = TrainState {
            seed: cfg.seed,
            ..TrainState::default()
        };
        Self::assemble(cfg, kg, vocab, encoder, log_tau, state, Vec::new())
    }

    /// Continue from `ckpt` with `cfg`. Dimensions and vocabulary must
    /// match; other changes are recorded as a config delta.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, kg: &KnowledgeGraph) -> Result<Self> {
        let kg = prepare_graph(kg)?;
        let vocab = build_vocab(&kg, cfg.vocab_size)?;
        if vocab.hash() != ckpt.vocab.hash() {
            return Err(Error::Incompatible(format!(
                "vocabulary hash {} differs from checkpoint {}",
                vocab.hash(),
                ckpt.vocab.hash()
            )));
        }
        let mut mcfg = cfg.model;
        mcfg.vocab_size = vocab.len();
        if mcfg != ckpt.model {
            return Err(Error::Incompatible(format!(
                "model dimensions {mcfg:?} differ from checkpoint {:?}",
                ckpt.model
            )));
        }
        let wants = cfg.use_adapters.then_some(cfg.adapter);
        if wants != ckpt.adapter {
            return Err(Error::Incompatible(format!(
                "adapter setting {wants:?} differs from checkpoint {:?}",
                ckpt.adapter
            )));
        }
        let encoder = ckpt.encoder()?;
        let log_tau = Var::new(ckpt.log_tau()?, &Device::Cpu)?;
        let delta = ckpt.train.delta(&cfg);
        let mut t = Self::assemble(cfg, kg, vocab, encoder, log_tau, ckpt.state, ckpt.optimizer_tensors())?;
        if !delta.is_empty() {
            let changes: Vec<Value> = delta
                .iter()
                .map(|(k, a, b)| json!({"key": k, "old": a, "new": b}))
                .collect();
            t.log.push("config_delta", json!({"step": t.state.step, "changes": changes}))?;
        }
        Ok(t)
    }

    fn assemble(
        cfg: TrainConfig,
        kg: KnowledgeGraph,
        vocab: Vocab,
        encoder: Encoder,
        log_tau: Var,
        state: TrainState,
        optim_state: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let limits = cfg.limits();
        let kp = make_pairs(kg.train(), &kg);
        if kp.len() < cfg.explicit_batch_size {
            return Err(Error::Config(format!(
                "{} training pairs cannot fill an explicit batch of {}",
                kp.len(),
                cfg.explicit_batch_size
            )));
        }
        if kp.len() < cfg.implicit_batch_size {
            return Err(Error::Config("too few training pairs for one implicit batch".into()));
        }
        let pairs: Vec<_> = kp.iter().map(|p| encode_pair(p, &vocab, &limits)).collect();
        let samples = kp
            .iter()
            .map(|p| render_instruction(p, &vocab, &limits))
            .collect::<Result<Vec<_>>>()?;
        let probe = match &cfg.probe_corpus {
            Some(path) => read_lines(path)?,
            None => sentences(&kg, kg.valid()),
        }
        .iter()
        .map(|s| encode_view(s, View::Tail, &vocab, cfg.model.max_seq_len.min(2 * cfg.max_description_length + 2)))
        .collect::<Result<Vec<_>>>()?;
        let mut params: Vec<(String, Var)> = encoder
            .trainable_parameters()
            .into_iter()
            .map(|(n, v)| (n, v.clone()))
            .collect();
        if cfg.learn_temperature {
            params.push((LOG_TAU.into(), log_tau.clone()));
        }
        let mut opt = crate::optim::AdamW::new(params, cfg.optimizer)?;
        if state.step > 0 {
            opt.load_state(state.step, &optim_state)?;
        }
        let log = MetricsLog::new(cfg.output_dir.as_ref().map(|d| d.join("metrics.jsonl")));
        if let Some(dir) = &cfg.output_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            vocab.save(&dir.join("vocab.txt"))?;
            let p = dir.join("config.txt");
            fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
        }
        let n = pairs.len();
        Ok(Trainer {
            explicit_perm: permutation(n, state.seed, STREAM_EXPLICIT, state.epoch as u64),
            implicit_perm: permutation(n, state.seed, STREAM_IMPLICIT, state.implicit_round),
            cfg,
            kg,
            vocab,
            encoder,
            log_tau,
            opt,
            state,
            pairs,
            samples,
            probe,
            epoch_losses: Vec::new(),
            log,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.kg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn tau(&self) -> Result<f64> {
        Ok(scalar(self.log_tau.as_tensor())?.exp())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs.len() / self.cfg.explicit_batch_size
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.epochs * self.steps_per_epoch();
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.state.step as usize >= self.total_steps()
    }

    fn tau_tensor(&self) -> Result<Tensor> {
        let lt = if self.cfg.learn_temperature {
            self.log_tau.as_tensor().clone()
        } else {
            self.log_tau.as_tensor().detach()
        };
        Ok(lt.exp()?)
    }

    /// One optimizer step; finishes the epoch when the explicit cursor runs
    /// out.
    pub fn step(&mut self) -> Result<StepRecord> {
        let n = self.cfg.explicit_batch_size;
        let m = self.cfg.implicit_batch_size;
        if self.state.implicit_cursor + m > self.samples.len() {
            self.state.implicit_round += 1;
            self.state.implicit_cursor = 0;
            self.implicit_perm =
                permutation(self.samples.len(), self.state.seed, STREAM_IMPLICIT, self.state.implicit_round);
        }
        let e0 = self.state.explicit_cursor;
        let i0 = self.state.implicit_cursor;
        let explicit_ids: Vec<usize> = self.explicit_perm[e0..e0 + n].to_vec();
        let implicit_ids: Vec<usize> = self.implicit_perm[i0..i0 + m].to_vec();
        let pairs: Vec<(&TokenSeq, &TokenSeq)> =
            explicit_ids.iter().map(|&i| (&self.pairs[i].0, &self.pairs[i].1)).collect();
        let samples: Vec<&InstructionSample> = implicit_ids.iter().map(|&i| &self.samples[i]).collect();
        let mut dropout = stream_rng(self.state.seed, STREAM_DROPOUT, self.state.step);
        let tau = self.tau_tensor()?;
        let losses = batch_losses(
            &self.encoder,
            &tau,
            self.cfg.margin,
            self.cfg.lambda,
            &pairs,
            &samples,
            Some(&mut dropout),
        )?;
        let l_exp = scalar(&losses.explicit)?;
        let l_imp = scalar(&losses.implicit)?;
        let l_joint = scalar(&losses.joint)?;
        if !l_joint.is_finite() || !l_exp.is_finite() || !l_imp.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                explicit: explicit_ids,
                implicit: implicit_ids,
            });
        }
        let lr = self.cfg.schedule.lr(self.cfg.learning_rate, self.state.step as usize, self.total_steps());
        let grads = losses.joint.backward()?;
        self.opt.step(&grads, lr)?;
        let record = StepRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            l_exp,
            l_imp,
            l_joint,
            tau: scalar(&tau)?,
            lr,
        };
        self.log.push("step", serde_json::to_value(record)?)?;
        self.epoch_losses.push((l_exp, l_imp));
        self.state.step += 1;
        self.state.explicit_cursor += n;
        self.state.implicit_cursor += m;
        if self.state.explicit_cursor + n > self.pairs.len() {
            self.end_epoch()?;
        }
        Ok(record)
    }

    fn end_epoch(&mut self) -> Result<()> {
        let k = self.epoch_losses.len().max(1) as f64;
        let mean_l_exp = self.epoch_losses.iter().map(|l| l.0).sum::<f64>() / k;
        let mean_l_imp = self.epoch_losses.iter().map(|l| l.1).sum::<f64>() / k;
        self.epoch_losses.clear();
        let (valid, anisotropy) = if self.cfg.eval_every_epoch {
            let valid = if self.kg.valid().is_empty() {
                None
            } else {
                Some(
                    evaluate(
                        &self.kg,
                        Split::Valid,
                        &self.encoder,
                        &self.vocab,
                        &self.cfg.limits(),
                        &EvalOptions::default(),
                    )?
                    .metrics,
                )
            };
            let views: Vec<&[u32]> = self.probe.iter().map(|v| v.ids()).collect();
            let aniso = if views.len() >= 2 {
                Some(anisotropy_report(&self.encoder, &views, "probe", Some(self.state.epoch as u32))?.final_layer())
            } else {
                None
            };
            (valid, aniso)
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            mean_l_exp,
            mean_l_imp,
            valid,
            anisotropy,
        };
        self.log.push("epoch", serde_json::to_value(&record)?)?;
        let finished = self.state.epoch;
        self.state.epoch += 1;
        self.state.explicit_cursor = 0;
        self.explicit_perm = permutation(self.pairs.len(), self.state.seed, STREAM_EXPLICIT, self.state.epoch as u64);
        if self.cfg.checkpoint_every_epoch {
            if let Some(dir) = self.cfg.output_dir.clone() {
                let ckpt = self.checkpoint()?;
                ckpt.save(&dir.join(format!("epoch-{finished:03}.ckpt")))?;
                ckpt.save(&dir.join("last.ckpt"))?;
            }
        }
        Ok(())
    }

    /// Train until the configured number of steps.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_steps(&mut self, k: usize) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.is_done() {
                break;
            }
            out.push(self.step()?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> = self
            .encoder
            .named_parameters()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        tensors.push((LOG_TAU.into(), self.log_tau.as_tensor().copy()?));
        tensors.extend(self.opt.state());
        Ok(Checkpoint {
            model: *self.encoder.config(),
            adapter: self.encoder.adapter_config().copied(),
            dtype: self.encoder.dtype(),
            vocab: self.vocab.clone(),
            train: self.cfg.clone(),
            state: self.state,
            tensors,
        })
    }

    pub fn into_log(self) -> MetricsLog {
        self.log
    }
}

fn prepare_graph(kg: &KnowledgeGraph) -> Result<KnowledgeGraph> {
    if kg.is_inverse_augmented() {
        Ok(kg.clone())
    } else {
        kg.clone().augment_inverse()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Train from scratch and return the final checkpoint and log.
pub fn train(cfg: TrainConfig, kg: &KnowledgeGraph) -> Result<(Checkpoint, MetricsLog)> {
    let mut t = Trainer::new(cfg, kg)?;
    t.run()?;
    finish(t)
}

pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, kg: &KnowledgeGraph) -> Result<(Checkpoint, MetricsLog)> {
    let mut t = Trainer::resume(ckpt, cfg, kg)?;
    t.run()?;
    finish(t)
}

fn finish(t: Trainer) -> Result<(Checkpoint, MetricsLog)> {
    let ckpt = t.checkpoint()?;
    if let Some(dir) = &t.cfg.output_dir {
        ckpt.save(&dir.join("last.ckpt"))?;
    }
    Ok((ckpt, t.into_log()))
}

/// `exp` of the mean next-token NLL over the corpus. Each line is scored
/// as its tokens followed by the end marker.
pub fn toy_perplexity<S: AsRef<str>>(encoder: &Encoder, vocab: &Vocab, corpus: &[S]) -> Result<f64> {
    let max = encoder.config().max_seq_len;
    let mut total = crate::diagnostics::CompensatedSum::default();
    let mut count = 0usize;
    for line in corpus {
        let mut ids = vocab.encode(line.as_ref());
        ids.push(END_ID);
        ids.truncate(max);
        if ids.len() < 2 {
            continue;
        }
        let (_, logits) = encoder.forward_seq(&ids)?;
        let logp = crate::model::log_softmax_last(&logits.to_dtype(DType::F64)?)?;
        let rows: Vec<Vec<f64>> = logp.to_vec2()?;
        for p in 1..ids.len() {
            total.add(-rows[p - 1][ids[p] as usize]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("perplexity corpus has no scorable tokens".into()));
    }
    Ok((total.value() / count as f64).exp())
}
