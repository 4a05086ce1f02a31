//! Representation diagnostics: alignment, uniformity, anisotropy, the
//! large-negative-count limit of the contrastive loss, and the anisotropy
//! upper bound. All functions read embeddings only; none touch parameters.
//!
//! Sums go through [`CompensatedSum`] so results do not depend on the
//! reduction order beyond float noise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::SimilarityMatrix;
use crate::model::{Embedding, Encoder};

/// Neumaier summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

fn csum(iter: impl IntoIterator<Item = f64>) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

fn squared_distance(a: &Embedding, b: &Embedding) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// `log Σ exp(x_i)` without overflow.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + csum(xs.map(|x| (x - max).exp())).ln()
}

/// Mean of `‖f(D_hr) − f(D_t)‖^α` over positive pairs.
pub fn alignment_metric(pairs: &[(Embedding, Embedding)], alpha: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("alignment needs at least one pair".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    let total = csum(pairs.iter().map(|(a, b)| squared_distance(a, b).sqrt().powf(alpha)));
    Ok(total / pairs.len() as f64)
}

/// `log` of the mean of `exp(−t·‖f(D_i) − f(D_j)‖²)` over ordered pairs
/// `i ≠ j`.
pub fn uniformity_metric(samples: &[Embedding], t: f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument("uniformity needs at least two samples".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("t must be > 0, got {t}")));
    }
    let exponents = (0..n).flat_map(|i| {
        (0..n)
            .filter(move |&j| j != i)
            .map(move |j| -t * squared_distance(&samples[i], &samples[j]))
    });
    Ok(log_sum_exp(exponents) - ((n * (n - 1)) as f64).ln())
}

/// Mean off-diagonal pairwise dot product.
pub fn anisotropy(embeddings: &[Embedding]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidArgument("anisotropy needs at least two embeddings".into()));
    }
    let total = csum((0..n).flat_map(|i| {
        (0..n)
            .filter(move |&j| j != i)
            .map(move |j| embeddings[i].dot(&embeddings[j]))
    }));
    Ok(total / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnisotropyReport {
    pub corpus: String,
    pub samples: usize,
    pub epoch: Option<u32>,
    /// One value per layer, first layer first.
    pub layers: Vec<f64>,
}

impl AnisotropyReport {
    pub fn final_layer(&self) -> f64 {
        *self.layers.last().expect("at least one layer")
    }
}

/// Anisotropy of every layer's final-position states over `views`.
pub fn anisotropy_report(
    encoder: &Encoder,
    views: &[&[u32]],
    corpus: &str,
    epoch: Option<u32>,
) -> Result<AnisotropyReport> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument("anisotropy corpus needs at least two sentences".into()));
    }
    let layers = encoder
        .layer_embeddings(views)?
        .iter()
        .map(|e| anisotropy(e))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnisotropyReport {
        corpus: corpus.into(),
        samples: views.len(),
        epoch,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tau: f64,
    pub n: usize,
    pub samples: usize,
}

impl TheoremCheck {
    pub fn params(&self) -> String {
        format!("tau={};n={};samples={}", self.tau, self.n, self.samples)
    }
}

/// `E_i[log E_j exp(e_jᵀe_i/τ)]` (self term included) against
/// `(N−1)/(τN)·anisotropy + 1/(τN)`.
pub fn anisotropy_bound_check(embeddings: &[Embedding], tau: f64) -> Result<TheoremCheck> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidArgument("bound check needs at least two embeddings".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let log_n = (n as f64).ln();
    let lhs = csum(embeddings.iter().map(|ei| {
        log_sum_exp(embeddings.iter().map(|ej| ej.dot(ei) / tau)) - log_n
    })) / n as f64;
    let nf = n as f64;
    let rhs = (nf - 1.0) / (tau * nf) * anisotropy(embeddings)? + 1.0 / (tau * nf);
    Ok(TheoremCheck {
        name: "anisotropy_bound".into(),
        lhs,
        rhs,
        slack: lhs - rhs,
        tau,
        n,
        samples: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    WithReplacement,
    WithoutReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapPoint {
    pub negatives: usize,
    /// Monte-Carlo estimate of `L_exp(f; τ, N) − log N`.
    pub gap: f64,
    /// Two-term limit as `N → ∞`, computed exactly on the finite corpus.
    pub limit: f64,
    pub samples: usize,
}

impl GapPoint {
    pub fn error(&self) -> f64 {
        (self.gap - self.limit).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSeries {
    pub tau: f64,
    pub seed: u64,
    pub points: Vec<GapPoint>,
    /// `−(1/τ)·E[f(D_hr)ᵀf(D_t)]`.
    pub alignment_term: f64,
    /// `E_hr[log E_D exp(f(D)ᵀf(D_hr)/τ)]`.
    pub uniformity_term: f64,
}

impl GapSeries {
    /// Rows for the theorem report: `lhs` is the estimated gap and `rhs`
    /// its limit.
    pub fn checks(&self) -> Vec<TheoremCheck> {
        self.points
            .iter()
            .map(|p| TheoremCheck {
                name: "asymptotic_gap".into(),
                lhs: p.gap,
                rhs: p.limit,
                slack: p.gap - p.limit,
                tau: self.tau,
                n: p.negatives,
                samples: p.samples,
            })
            .collect()
    }
}

/// Contrastive loss minus `log N` for each negative count in `schedule`,
/// next to its large-`N` limit.
///
/// The outer expectation over positive pairs is enumerated (`repeats`
/// passes over `pairs`); the `N` negatives of each term are drawn from
/// `data` with a seeded generator. No margin is applied.
pub fn asymptotic_gap(
    pairs: &[(Embedding, Embedding)],
    data: &[Embedding],
    tau: f64,
    schedule: &[usize],
    repeats: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<GapSeries> {
    if pairs.is_empty() || data.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("asymptotic gap needs pairs, data and repeats".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let alignment_term = -csum(pairs.iter().map(|(h, t)| h.dot(t))) / (tau * pairs.len() as f64);
    let log_m = (data.len() as f64).ln();
    let uniformity_term = csum(
        pairs
            .iter()
            .map(|(h, _)| log_sum_exp(data.iter().map(|d| d.dot(h) / tau)) - log_m),
    ) / pairs.len() as f64;
    let limit = alignment_term + uniformity_term;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(schedule.len());
    for &n in schedule {
        if n == 0 {
            return Err(Error::InvalidArgument("negative count must be >= 1".into()));
        }
        if sampling == Sampling::WithoutReplacement && n > data.len() {
            return Err(Error::InvalidArgument(format!(
                "{n} negatives exceed the corpus of {} without replacement",
                data.len()
            )));
        }
        let mut total = CompensatedSum::default();
        let mut idx: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..repeats {
            for (h, t) in pairs {
                idx.clear();
                match sampling {
                    Sampling::WithReplacement => {
                        idx.extend((0..n).map(|_| rng.gen_range(0..data.len())));
                    }
                    Sampling::WithoutReplacement => {
                        idx.extend(rand::seq::index::sample(&mut rng, data.len(), n).into_iter());
                    }
                }
                let pos = h.dot(t) / tau;
                let lse = log_sum_exp(
                    std::iter::once(pos).chain(idx.iter().map(|&i| data[i].dot(h) / tau)),
                );
                total.add(lse - pos);
            }
        }
        let samples = repeats * pairs.len();
        points.push(GapPoint {
            negatives: n,
            gap: total.value() / samples as f64 - (n as f64).ln(),
            limit,
            samples,
        });
    }
    Ok(GapSeries {
        tau,
        seed,
        points,
        alignment_term,
        uniformity_term,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV with a header of column labels; each row starts with its label.
pub fn similarity_csv(sim: &SimilarityMatrix, row_labels: &[String], col_labels: &[String]) -> Result<String> {
    let n = sim.size();
    if n < 2 {
        return Err(Error::InvalidArgument("similarity export needs a batch of at least 2".into()));
    }
    if row_labels.len() != n || col_labels.len() != n {
        return Err(Error::InvalidArgument("one label per row and column required".into()));
    }
    let mut out = String::from("hr\\t");
    for c in col_labels {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for (label, row) in row_labels.iter().zip(sim.rows()) {
        out.push_str(&csv_field(label));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_similarity_matrix(
    sim: &SimilarityMatrix,
    row_labels: &[String],
    col_labels: &[String],
    path: &Path,
) -> Result<()> {
    write_text(path, &similarity_csv(sim, row_labels, col_labels)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub checkpoint: String,
    pub layer: usize,
    pub value: f64,
}

/// One row per `(checkpoint, layer)`; layers are numbered from 1.
pub fn layer_epoch_curves(checkpoints: &[(String, &Encoder)], views: &[&[u32]]) -> Result<Vec<CurveRow>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("at least one checkpoint required".into()));
    }
    let mut rows = Vec::new();
    for (tag, enc) in checkpoints {
        let report = anisotropy_report(enc, views, "curve", None)?;
        rows.extend(report.layers.iter().enumerate().map(|(l, &value)| CurveRow {
            checkpoint: tag.clone(),
            layer: l + 1,
            value,
        }));
    }
    Ok(rows)
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("checkpoint,layer,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", csv_field(&r.checkpoint), r.layer, r.value);
    }
    out
}

pub fn write_curves(rows: &[CurveRow], path: &Path) -> Result<()> {
    write_text(path, &curves_csv(rows))
}

pub fn theorem_csv(checks: &[TheoremCheck]) -> String {
    let mut out = String::from("name,lhs,rhs,slack,params\n");
    for c in checks {
        let _ = writeln!(out, "{},{},{},{},{}", csv_field(&c.name), c.lhs, c.rhs, c.slack, c.params());
    }
    out
}

pub fn write_theorem_report(checks: &[TheoremCheck], path: &Path) -> Result<()> {
    write_text(path, &theorem_csv(checks))
}
