//! Small causal transformer used both as a language model and as the
//! knowledge encoder.
//!
//! Pre-norm decoder blocks, learned positional embeddings and an output
//! projection tied to the token embedding. Sequence embeddings are the
//! final (normalized) hidden state at the last position of a view, which
//! must be one of the view eos markers.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{is_eos_marker, TokenSeq, PAD_ID};

const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            vocab_size: 8192,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("model dims must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Which linear maps receive low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterTarget {
    #[serde(rename = "ffn")]
    Ffn,
    #[serde(rename = "att")]
    Attention,
    #[serde(rename = "att-ffn")]
    AttentionFfn,
}

impl AdapterTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ffn" => Ok(AdapterTarget::Ffn),
            "att" => Ok(AdapterTarget::Attention),
            "att-ffn" => Ok(AdapterTarget::AttentionFfn),
            other => Err(Error::Config(format!("unknown adapter target '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterTarget::Ffn => "ffn",
            AdapterTarget::Attention => "att",
            AdapterTarget::AttentionFfn => "att-ffn",
        }
    }

    fn ffn(self) -> bool {
        matches!(self, AdapterTarget::Ffn | AdapterTarget::AttentionFfn)
    }

    fn attention(self) -> bool {
        matches!(self, AdapterTarget::Attention | AdapterTarget::AttentionFfn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target: AdapterTarget,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            target: AdapterTarget::Ffn,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Unit-norm sequence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` to unit Euclidean norm. A zero vector stays zero.
    pub fn new(v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Embedding(v);
        }
        Embedding(v.into_iter().map(|x| x / norm).collect())
    }

    pub fn from_f32(v: &[f32]) -> Self {
        Self::new(v.iter().map(|&x| x as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// How a forward pass treats parameters and randomness.
pub enum Mode<'a> {
    /// Parameters detached; no autograd graph is recorded.
    Eval,
    /// Trainable parameters tracked; adapter dropout drawn from `rng` when
    /// present.
    Train { rng: Option<&'a mut ChaCha8Rng> },
}

impl Mode<'_> {
    pub fn train() -> Self {
        Mode::Train { rng: None }
    }
}

/// Hidden activations of a padded batch.
pub struct HiddenStates {
    /// Residual stream after each block, `(B, T, d)`; empty unless requested.
    pub layers: Vec<Tensor>,
    /// Final-norm output, `(B, T, d)`.
    pub last: Tensor,
    /// Unpadded length of each sequence.
    pub lengths: Vec<usize>,
}

pub struct ForwardOutput {
    pub hidden: HiddenStates,
    /// `(B, T, V)` when requested.
    pub logits: Option<Tensor>,
}

struct Lora {
    a: Var,
    b: Var,
    scale: f64,
    dropout: f64,
}

struct Linear {
    weight: Var,
    bias: Var,
    lora: Option<Lora>,
}

struct LayerNorm {
    gain: Var,
    bias: Var,
}

struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
}

pub struct Encoder {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    adapter: Option<AdapterConfig>,
    sequences_forwarded: AtomicU64,
}

struct Initializer {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Initializer {
    fn normal(&mut self, shape: (usize, usize), std: f64) -> Result<Var> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f64> = (0..shape.0 * shape.1).map(|_| dist.sample(&mut self.rng)).collect();
        self.var(data, &[shape.0, shape.1])
    }

    fn uniform(&mut self, shape: (usize, usize), bound: f64) -> Result<Var> {
        let data: Vec<f64> = (0..shape.0 * shape.1)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.var(data, &[shape.0, shape.1])
    }

    fn constant(&self, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.var(vec![value; n], shape)
    }

    fn var(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn linear(&mut self, out_dim: usize, in_dim: usize, std: f64) -> Result<Linear> {
        Ok(Linear {
            weight: self.normal((out_dim, in_dim), std)?,
            bias: self.constant(&[out_dim], 0.0)?,
            lora: None,
        })
    }

    fn layer_norm(&self, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.constant(&[d], 1.0)?,
            bias: self.constant(&[d], 0.0)?,
        })
    }
}

/// Parameter view used by one forward pass.
struct Params {
    detach_base: bool,
    detach_adapters: bool,
}

impl Params {
    fn base(&self, v: &Var) -> Tensor {
        if self.detach_base {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }

    fn adapter(&self, v: &Var) -> Tensor {
        if self.detach_adapters {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }
}

fn layer_norm(x: &Tensor, ln: &LayerNorm, p: &Params) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed
        .broadcast_mul(&p.base(&ln.gain))?
        .broadcast_add(&p.base(&ln.bias))?)
}

/// Numerically stable softmax over the last dimension.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax over the last dimension.
pub(crate) fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

impl Linear {
    /// `x`: `(N, in)`.
    fn forward(&self, x: &Tensor, p: &Params, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut y = x
            .matmul(&p.base(&self.weight).t()?)?
            .broadcast_add(&p.base(&self.bias))?;
        if let Some(lora) = &self.lora {
            let input = match rng.as_deref_mut() {
                Some(rng) if lora.dropout > 0.0 => dropout(x, lora.dropout, rng)?,
                _ => x.clone(),
            };
            let delta = input
                .matmul(&p.adapter(&lora.a).t()?)?
                .matmul(&p.adapter(&lora.b).t()?)?;
            y = (y + (delta * lora.scale)?)?;
        }
        Ok(y)
    }

    fn dims(&self) -> (usize, usize) {
        let (o, i) = self.weight.dims2().expect("2-d weight");
        (o, i)
    }
}

fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

impl Encoder {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut init = Initializer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            dtype,
            device: device.clone(),
        };
        let d = config.d_model;
        let std = 0.02;
        let residual_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = init.normal((config.vocab_size, d), std)?;
        let pos_emb = init.normal((config.max_seq_len, d), std / 2.0)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                ln1: init.layer_norm(d)?,
                qkv: init.linear(3 * d, d, std)?,
                proj: init.linear(d, d, residual_std)?,
                ln2: init.layer_norm(d)?,
                up: init.linear(config.d_ff, d, std)?,
                down: init.linear(d, config.d_ff, residual_std)?,
            });
        }
        let ln_f = init.layer_norm(d)?;
        Ok(Encoder {
            config,
            dtype,
            device,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            adapter: None,
            sequences_forwarded: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        self.adapter.as_ref()
    }

    /// Number of sequences passed through `forward` so far.
    pub fn sequences_forwarded(&self) -> u64 {
        self.sequences_forwarded.load(Ordering::Relaxed)
    }

    fn targeted(&mut self, target: AdapterTarget) -> Vec<(String, &mut Linear)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if target.attention() {
                out.push((format!("blocks.{i}.attn.qkv"), &mut b.qkv));
                out.push((format!("blocks.{i}.attn.proj"), &mut b.proj));
            }
            if target.ffn() {
                out.push((format!("blocks.{i}.ffn.up"), &mut b.up));
                out.push((format!("blocks.{i}.ffn.down"), &mut b.down));
            }
        }
        out
    }

    /// Add `(alpha/r)·B·A` to every targeted weight, with `A` small random
    /// and `B` zero. Base weights become frozen.
    pub fn attach_adapters(&mut self, cfg: AdapterConfig) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::InvalidArgument("adapters are already attached".into()));
        }
        if cfg.rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::InvalidArgument(format!(
                "adapter dropout {} outside [0, 1)",
                cfg.dropout
            )));
        }
        let mut init = Initializer {
            rng: ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x4c6f_5241),
            dtype: self.dtype,
            device: self.device.clone(),
        };
        let targets = self.targeted(cfg.target);
        for (name, lin) in &targets {
            let (out_dim, in_dim) = lin.dims();
            if cfg.rank > out_dim.min(in_dim) {
                return Err(Error::InvalidArgument(format!(
                    "adapter rank {} exceeds min dim of {name} ({out_dim}x{in_dim})",
                    cfg.rank
                )));
            }
        }
        for (_, lin) in targets {
            let (out_dim, in_dim) = lin.dims();
            lin.lora = Some(Lora {
                a: init.uniform((cfg.rank, in_dim), 1.0 / (in_dim as f64).sqrt())?,
                b: init.constant(&[out_dim, cfg.rank], 0.0)?,
                scale: cfg.scale(),
                dropout: cfg.dropout,
            });
        }
        self.adapter = Some(cfg);
        Ok(())
    }

    /// Fold adapters into the base weights (`W += (alpha/r)·B·A`) and
    /// remove them.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let Some(cfg) = self.adapter.take() else {
            return Err(Error::InvalidArgument("no adapters attached".into()));
        };
        for (_, lin) in self.targeted(cfg.target) {
            if let Some(lora) = lin.lora.take() {
                let delta = (lora.b.as_tensor().matmul(lora.a.as_tensor())? * lora.scale)?;
                let merged = (lin.weight.as_tensor() + delta)?;
                lin.weight.set(&merged)?;
            }
        }
        Ok(())
    }

    /// All parameters in a fixed order, by name.
    pub fn named_parameters(&self) -> Vec<(String, &Var)> {
        let mut out: Vec<(String, &Var)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let lns = [("ln1", &b.ln1), ("ln2", &b.ln2)];
            for (n, ln) in lns {
                out.push((format!("blocks.{i}.{n}.gain"), &ln.gain));
                out.push((format!("blocks.{i}.{n}.bias"), &ln.bias));
            }
            let lins = [
                ("attn.qkv", &b.qkv),
                ("attn.proj", &b.proj),
                ("ffn.up", &b.up),
                ("ffn.down", &b.down),
            ];
            for (n, lin) in lins {
                out.push((format!("blocks.{i}.{n}.weight"), &lin.weight));
                out.push((format!("blocks.{i}.{n}.bias"), &lin.bias));
                if let Some(l) = &lin.lora {
                    out.push((format!("blocks.{i}.{n}.lora_a"), &l.a));
                    out.push((format!("blocks.{i}.{n}.lora_b"), &l.b));
                }
            }
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.bias".into(), &self.ln_f.bias));
        out
    }

    /// Parameters that receive gradients: adapter factors when adapters are
    /// attached, every parameter otherwise.
    pub fn trainable_parameters(&self) -> Vec<(String, &Var)> {
        let adapters = self.adapter.is_some();
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| !adapters || n.contains(".lora_"))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite parameters by name; shapes must match.
    pub fn load_parameters(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let params: std::collections::HashMap<String, &Var> =
            self.named_parameters().into_iter().collect();
        if params.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let var = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
            if var.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{name}': {:?} vs {:?}",
                    var.shape(),
                    t.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Padded batch forward. Padding goes on the right, so under the causal
    /// mask real positions never see it.
    pub fn forward(
        &self,
        seqs: &[&[u32]],
        mut mode: Mode<'_>,
        want_layers: bool,
        want_logits: bool,
    ) -> Result<ForwardOutput> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("empty batch or sequence".into()));
        }
        let b = seqs.len();
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if t > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = seqs
            .iter()
            .flat_map(|s| s.iter())
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        self.sequences_forwarded.fetch_add(b as u64, Ordering::Relaxed);

        let (p, mut rng) = match &mut mode {
            Mode::Eval => (
                Params {
                    detach_base: true,
                    detach_adapters: true,
                },
                None,
            ),
            Mode::Train { rng } => (
                Params {
                    detach_base: self.adapter.is_some(),
                    detach_adapters: false,
                },
                rng.as_deref_mut(),
            ),
        };

        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let mut ids = Vec::with_capacity(b * t);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD_ID).take(t - s.len()));
        }
        let ids = Tensor::from_vec(ids, b * t, &self.device)?;
        let tok = p.base(&self.tok_emb).index_select(&ids, 0)?.reshape((b, t, d))?;
        let pos = p.base(&self.pos_emb).narrow(0, 0, t)?;
        let mut x = tok.broadcast_add(&pos)?.reshape((b * t, d))?;

        let mask: Vec<f64> = (0..t * t)
            .map(|k| if k % t > k / t { MASK_VALUE } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, (t, t), &self.device)?.to_dtype(self.dtype)?;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut layers = Vec::new();
        for block in &self.blocks {
            let hn = layer_norm(&x, &block.ln1, &p)?;
            let qkv = block.qkv.forward(&hn, &p, &mut rng)?;
            let split = |k: usize| -> Result<Tensor> {
                Ok(qkv
                    .narrow(1, k * d, d)?
                    .reshape((b, t, h, dh))?
                    .transpose(1, 2)?
                    .contiguous()?)
            };
            let (q, k, v) = (split(0)?, split(1)?, split(2)?);
            let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&mask)?;
            let att = softmax_last(&scores)?.matmul(&v)?;
            let att = att.transpose(1, 2)?.contiguous()?.reshape((b * t, d))?;
            x = (x + block.proj.forward(&att, &p, &mut rng)?)?;

            let hn = layer_norm(&x, &block.ln2, &p)?;
            let up = block.up.forward(&hn, &p, &mut rng)?.gelu_erf()?;
            x = (x + block.down.forward(&up, &p, &mut rng)?)?;
            if want_layers {
                layers.push(x.reshape((b, t, d))?);
            }
        }
        let last = layer_norm(&x, &self.ln_f, &p)?;
        let logits = if want_logits {
            let w = p.base(&self.tok_emb);
            Some(last.matmul(&w.t()?)?.reshape((b, t, self.config.vocab_size))?)
        } else {
            None
        };
        Ok(ForwardOutput {
            hidden: HiddenStates {
                layers,
                last: last.reshape((b, t, d))?,
                lengths: seqs.iter().map(|s| s.len()).collect(),
            },
            logits,
        })
    }

    /// Hidden states and `(T, V)` next-token logits of one sequence.
    pub fn forward_seq(&self, seq: &[u32]) -> Result<(HiddenStates, Tensor)> {
        let out = self.forward(&[seq], Mode::Eval, true, true)?;
        let logits = out.logits.expect("logits requested").squeeze(0)?;
        Ok((out.hidden, logits))
    }

    /// Rows of `states` (`(B, T, d)`) at each sequence's final position,
    /// L2-normalized: `(B, d)`.
    pub fn pool_last(states: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, t, d) = states.dims3()?;
        let idx: Vec<u32> = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| (i * t + len - 1) as u32)
            .collect();
        let idx = Tensor::from_vec(idx, b, states.device())?;
        let rows = states.reshape((b * t, d))?.index_select(&idx, 0)?;
        let norm = rows.sqr()?.sum_keepdim(1)?.sqrt()?;
        Ok(rows.broadcast_div(&norm)?)
    }

    /// Differentiable `(B, d)` unit embeddings of a batch of views.
    pub fn embed_tensor(&self, seqs: &[&[u32]], mode: Mode<'_>) -> Result<Tensor> {
        check_views(seqs)?;
        let out = self.forward(seqs, mode, false, false)?;
        Self::pool_last(&out.hidden.last, &out.hidden.lengths)
    }

    pub fn embed(&self, view: &TokenSeq) -> Result<Embedding> {
        Ok(self.embed_batch(&[view.ids()])?.remove(0))
    }

    /// Embeddings of many views, computed in chunks.
    pub fn embed_batch(&self, views: &[&[u32]]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(views.len());
        for chunk in views.chunks(64) {
            let t = self.embed_tensor(chunk, Mode::Eval)?.to_dtype(DType::F64)?;
            out.extend(t.to_vec2::<f64>()?.into_iter().map(Embedding::new));
        }
        Ok(out)
    }

    /// Per-layer unit embeddings at the final position of each sequence:
    /// `result[layer][seq]`. The last entry uses the final-norm output, so
    /// it coincides with [`Encoder::embed_batch`].
    pub fn layer_embeddings(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<Embedding>>> {
        let n_layers = self.config.n_layers;
        let mut out = vec![Vec::with_capacity(seqs.len()); n_layers];
        for chunk in seqs.chunks(64) {
            let fwd = self.forward(chunk, Mode::Eval, true, false)?;
            let lengths = &fwd.hidden.lengths;
            for (l, states) in fwd.hidden.layers.iter().enumerate() {
                let states = if l + 1 == n_layers { &fwd.hidden.last } else { states };
                let pooled = Self::pool_last(states, lengths)?.to_dtype(DType::F64)?;
                out[l].extend(pooled.to_vec2::<f64>()?.into_iter().map(Embedding::new));
            }
        }
        Ok(out)
    }
}

fn check_views(seqs: &[&[u32]]) -> Result<()> {
    if seqs.iter().any(|s| s.last().map_or(true, |&id| !is_eos_marker(id))) {
        return Err(Error::MissingEosMarker);
    }
    Ok(())
}
