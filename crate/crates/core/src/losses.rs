//! Dual-view contrastive loss, triple-completion language-modeling loss and
//! their weighted combination.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax_last, Embedding};
use crate::text::InstructionSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplicitLossConfig {
    /// Initial temperature; trained as `log τ`.
    pub initial_temperature: f64,
    /// Additive margin subtracted from positive similarities.
    pub margin: f64,
    /// Number of positive pairs per batch.
    pub batch_size: usize,
}

impl Default for ExplicitLossConfig {
    fn default() -> Self {
        ExplicitLossConfig {
            initial_temperature: 0.05,
            margin: 0.02,
            batch_size: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicitLossConfig {
    pub batch_size: usize,
}

impl Default for ImplicitLossConfig {
    fn default() -> Self {
        ImplicitLossConfig { batch_size: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossConfig {
    pub lambda: f64,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig { lambda: 0.1 }
    }
}

/// `S[i][j] = cos(e_hr_i, e_t_j)`; rows are hr views, columns tail views.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n)
    }

    /// Mean of the diagonal minus mean of the off-diagonal entries.
    pub fn diagonal_gap(&self) -> f64 {
        let n = self.n;
        let diag: f64 = (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64;
        if n < 2 {
            return diag;
        }
        let total: f64 = self.values.iter().sum();
        let off = (total - diag * n as f64) / (n * (n - 1)) as f64;
        diag - off
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            (self.n, self.n),
            &candle_core::Device::Cpu,
        )?)
    }
}

pub fn similarity_matrix(e_hr: &[Embedding], e_t: &[Embedding]) -> Result<SimilarityMatrix> {
    if e_hr.is_empty() || e_hr.len() != e_t.len() {
        return Err(Error::InvalidArgument(format!(
            "similarity matrix needs equal non-empty view lists, got {} and {}",
            e_hr.len(),
            e_t.len()
        )));
    }
    let n = e_hr.len();
    let mut values = Vec::with_capacity(n * n);
    for a in e_hr {
        values.extend(e_t.iter().map(|b| a.dot(b)));
    }
    Ok(SimilarityMatrix { n, values })
}

/// Differentiable `(B, B)` similarity of unit-norm `(B, d)` embeddings.
pub fn similarity_tensor(e_hr: &Tensor, e_t: &Tensor) -> Result<Tensor> {
    if e_hr.dims() != e_t.dims() {
        return Err(Error::InvalidArgument(format!(
            "view embedding shapes differ: {:?} vs {:?}",
            e_hr.dims(),
            e_t.dims()
        )));
    }
    Ok(e_hr.matmul(&e_t.t()?)?)
}

fn logsumexp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let lse = x.broadcast_sub(&max)?.exp()?.sum_keepdim(dim)?.log()?;
    Ok((lse + max)?.squeeze(dim)?)
}

/// Row + column InfoNCE with additive margin on the positives (the
/// diagonal), averaged over the batch. `tau` is a scalar tensor so the loss
/// is differentiable with respect to the temperature.
pub fn explicit_loss(s: &Tensor, tau: &Tensor, margin: f64) -> Result<Tensor> {
    let (n, m) = s.dims2()?;
    if n != m || n == 0 {
        return Err(Error::InvalidArgument(format!("similarity matrix is {n}x{m}")));
    }
    let tau_value = tau.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if tau_value.len() != 1 || !(tau_value[0] > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau_value:?}")));
    }
    let eye = Tensor::eye(n, s.dtype(), s.device())?;
    let logits = (s - (eye.clone() * margin)?)?.broadcast_div(&tau.reshape(())?)?;
    let positive = (&logits * &eye)?.sum(1)?;
    let row = (logsumexp(&logits, 1)? - &positive)?;
    let col = (logsumexp(&logits, 0)? - &positive)?;
    Ok(((row + col)? * 0.5)?.mean_all()?)
}

/// Mean over samples of the length-normalized response NLL. `logits` is
/// `(M, T, V)` with `logits[b, p]` predicting token `p + 1` of sample `b`.
pub fn implicit_loss(logits: &Tensor, samples: &[&InstructionSample]) -> Result<Tensor> {
    let (m, t, _) = logits.dims3()?;
    if m != samples.len() || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} samples for {m} logit rows",
            samples.len()
        )));
    }
    let mut targets = vec![0u32; m * t];
    let mut weights = vec![0f64; m * t];
    for (b, s) in samples.iter().enumerate() {
        let count = s.mask.iter().filter(|&&x| x).count();
        if count == 0 {
            return Err(Error::InvalidArgument(format!("sample {b} has an empty loss mask")));
        }
        if s.mask.first() == Some(&true) {
            return Err(Error::InvalidArgument(format!(
                "sample {b} masks its first token, which has no prediction"
            )));
        }
        if s.tokens.len() > t + 1 {
            return Err(Error::InvalidArgument(format!(
                "sample {b} has {} tokens but logits cover {t} positions",
                s.tokens.len()
            )));
        }
        for p in 1..s.tokens.len() {
            if s.mask[p] {
                targets[b * t + p - 1] = s.tokens[p];
                weights[b * t + p - 1] = 1.0 / count as f64;
            }
        }
    }
    let device = logits.device();
    let targets = Tensor::from_vec(targets, (m, t, 1), device)?;
    let weights = Tensor::from_vec(weights, (m, t), device)?.to_dtype(logits.dtype())?;
    let logp = log_softmax_last(logits)?.gather(&targets, D::Minus1)?.squeeze(D::Minus1)?;
    Ok(((logp * weights)?.sum_all()? * (-1.0 / m as f64))?)
}

/// `L_exp + λ·L_imp`.
pub fn joint_loss(explicit: &Tensor, implicit: &Tensor, cfg: &JointLossConfig) -> Result<Tensor> {
    Ok((explicit + (implicit * cfg.lambda)?)?)
}

pub fn joint_value(explicit: f64, implicit: f64, cfg: &JointLossConfig) -> f64 {
    explicit + cfg.lambda * implicit
}
