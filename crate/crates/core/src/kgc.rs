//! Embedding-based link prediction under the filtered setting.
//!
//! Tail queries embed `D_h ⊕ D_r` as an hr view; head queries are tail
//! queries over inverse triples, so a graph must be inverse-augmented
//! before evaluation. Candidates are all entities embedded as tail views.

use std::collections::HashMap;
use std::fmt::Write as _;

use candle_core::{Device, Tensor};
use serde::Serialize;

use crate::diagnostics::CompensatedSum;
use crate::error::{Error, Result};
use crate::kg::{make_pairs, EntityId, KnowledgeGraph, RelationId, Split, Triple};
use crate::model::{Embedding, Encoder};
use crate::text::{encode_pair, encode_view, TextLimits, View, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    #[serde(rename = "tail")]
    TailPrediction,
    #[serde(rename = "head")]
    HeadPrediction,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TailPrediction => "tail",
            Direction::HeadPrediction => "head",
        }
    }
}

/// How a gold entity is ranked against equal-scoring candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    /// Only strictly higher scores count against the gold entity.
    #[default]
    Optimistic,
    /// Ties also count against the gold entity.
    Pessimistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingQuery {
    pub direction: Direction,
    pub query: Embedding,
    pub gold: EntityId,
    /// Other known-true answers, excluded from ranking.
    pub filter: Vec<EntityId>,
}

/// Candidate embeddings indexed by entity id.
#[derive(Debug, Clone)]
pub struct EntityTable {
    embeddings: Vec<Embedding>,
}

impl EntityTable {
    pub fn new(embeddings: Vec<Embedding>) -> Self {
        EntityTable { embeddings }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn get(&self, id: EntityId) -> &Embedding {
        &self.embeddings[id.index()]
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    fn matrix(&self) -> Result<Tensor> {
        let d = self.embeddings.first().map_or(0, Embedding::dim);
        let data: Vec<f64> = self.embeddings.iter().flat_map(|e| e.as_slice().iter().copied()).collect();
        Ok(Tensor::from_vec(data, (self.embeddings.len(), d), &Device::Cpu)?)
    }
}

/// Tail-view embedding of every entity, index-aligned with entity ids.
pub fn embed_all_entities(
    kg: &KnowledgeGraph,
    encoder: &Encoder,
    vocab: &Vocab,
    limits: &TextLimits,
) -> Result<EntityTable> {
    let views = kg
        .entities()
        .iter()
        .map(|e| encode_view(e.text(), View::Tail, vocab, limits.max_description_length + 2))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[u32]> = views.iter().map(|v| v.ids()).collect();
    Ok(EntityTable::new(encoder.embed_batch(&refs)?))
}

/// 1-based rank of `gold` among `scores`, ignoring filtered entities.
pub fn rank_scores(scores: &[f64], gold: EntityId, filter: &[EntityId], tie: TiePolicy) -> Result<usize> {
    if gold.index() >= scores.len() {
        return Err(Error::InvalidArgument(format!("gold {gold:?} outside candidate set")));
    }
    if filter.contains(&gold) {
        return Err(Error::InvalidArgument(format!("gold {gold:?} is in its own filter set")));
    }
    let mut masked = scores.to_vec();
    for f in filter {
        if let Some(s) = masked.get_mut(f.index()) {
            *s = f64::NEG_INFINITY;
        }
    }
    let g = masked[gold.index()];
    let ahead = masked
        .iter()
        .enumerate()
        .filter(|&(i, &s)| {
            i != gold.index()
                && match tie {
                    TiePolicy::Optimistic => s > g,
                    TiePolicy::Pessimistic => s >= g && s > f64::NEG_INFINITY,
                }
        })
        .count();
    Ok(ahead + 1)
}

pub fn rank(query: &RankingQuery, table: &EntityTable, tie: TiePolicy) -> Result<usize> {
    let scores: Vec<f64> = table.embeddings.iter().map(|e| e.dot(&query.query)).collect();
    rank_scores(&scores, query.gold, &query.filter, tie)
}

/// Known answers of each `(entity, relation)` query over all splits.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    answers: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut answers: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for t in kg.all_triples() {
            answers.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        FilterIndex { answers }
    }

    /// All known tails of `(t.head, t.relation)` except `t.tail`.
    pub fn filter_for(&self, t: &Triple) -> Vec<EntityId> {
        self.answers
            .get(&(t.head, t.relation))
            .map(|v| v.iter().copied().filter(|&e| e != t.tail).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KgcMetrics {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl KgcMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("no ranks to aggregate".into()));
        }
        let n = ranks.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).collect::<CompensatedSum>().value() / n;
        let hits = |k: usize| mean(&|r| f64::from(u8::from(r <= k)));
        Ok(KgcMetrics {
            mr: mean(&|r| r as f64),
            mrr: mean(&|r| 1.0 / r as f64),
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            queries: ranks.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRank {
    pub triple: Triple,
    pub direction: Direction,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KgcReport {
    pub metrics: KgcMetrics,
    pub tail: KgcMetrics,
    pub head: KgcMetrics,
    #[serde(skip)]
    pub per_query: Vec<QueryRank>,
}

impl KgcReport {
    /// `triple,direction,rank` with entity and relation keys.
    pub fn per_query_csv(&self, kg: &KnowledgeGraph) -> String {
        let mut out = String::from("triple,direction,rank\n");
        for q in &self.per_query {
            let t = q.triple;
            let _ = writeln!(
                out,
                "{} {} {},{},{}",
                kg.entity(t.head).key,
                kg.relation(t.relation).key,
                kg.entity(t.tail).key,
                q.direction.as_str(),
                q.rank
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub tie: TiePolicy,
    /// Queries scored per matrix product.
    pub block_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tie: TiePolicy::Optimistic,
            block_size: 256,
        }
    }
}

/// Rank every augmented triple of `split`; original relations give tail
/// queries and inverse relations give head queries.
pub fn evaluate_with_table(
    kg: &KnowledgeGraph,
    split: Split,
    queries: &[Embedding],
    table: &EntityTable,
    opts: &EvalOptions,
) -> Result<KgcReport> {
    if !kg.is_inverse_augmented() {
        return Err(Error::InvalidArgument("evaluation requires an inverse-augmented graph".into()));
    }
    let triples = kg.split(split);
    if triples.is_empty() {
        return Err(Error::InvalidArgument(format!("{split} split is empty")));
    }
    if queries.len() != triples.len() {
        return Err(Error::InvalidArgument("one query embedding per triple required".into()));
    }
    let filters = FilterIndex::new(kg);
    let entities = table.matrix()?;
    let mut per_query = Vec::with_capacity(triples.len());
    let block = opts.block_size.max(1);
    for (chunk_idx, chunk) in queries.chunks(block).enumerate() {
        let d = chunk[0].dim();
        let data: Vec<f64> = chunk.iter().flat_map(|e| e.as_slice().iter().copied()).collect();
        let q = Tensor::from_vec(data, (chunk.len(), d), &Device::Cpu)?;
        let scores: Vec<Vec<f64>> = q.matmul(&entities.t()?)?.to_vec2()?;
        for (k, row) in scores.iter().enumerate() {
            let t = triples[chunk_idx * block + k];
            let r = rank_scores(row, t.tail, &filters.filter_for(&t), opts.tie)?;
            let direction = if kg.is_inverse(t.relation) {
                Direction::HeadPrediction
            } else {
                Direction::TailPrediction
            };
            per_query.push(QueryRank {
                triple: t,
                direction,
                rank: r,
            });
        }
    }
    let ranks_of = |dir: Option<Direction>| -> Vec<usize> {
        per_query
            .iter()
            .filter(|q| dir.map_or(true, |d| q.direction == d))
            .map(|q| q.rank)
            .collect()
    };
    Ok(KgcReport {
        metrics: KgcMetrics::from_ranks(&ranks_of(None))?,
        tail: KgcMetrics::from_ranks(&ranks_of(Some(Direction::TailPrediction)))?,
        head: KgcMetrics::from_ranks(&ranks_of(Some(Direction::HeadPrediction)))?,
        per_query,
    })
}

/// hr-view embeddings of the triples of `split`.
pub fn query_embeddings(
    kg: &KnowledgeGraph,
    split: Split,
    encoder: &Encoder,
    vocab: &Vocab,
    limits: &TextLimits,
) -> Result<Vec<Embedding>> {
    let views: Vec<_> = make_pairs(kg.split(split), kg)
        .iter()
        .map(|p| encode_pair(p, vocab, limits).0)
        .collect();
    let refs: Vec<&[u32]> = views.iter().map(|v| v.ids()).collect();
    encoder.embed_batch(&refs)
}

pub fn evaluate(
    kg: &KnowledgeGraph,
    split: Split,
    encoder: &Encoder,
    vocab: &Vocab,
    limits: &TextLimits,
    opts: &EvalOptions,
) -> Result<KgcReport> {
    if kg.split(split).is_empty() {
        return Err(Error::InvalidArgument(format!("{split} split is empty")));
    }
    let table = embed_all_entities(kg, encoder, vocab, limits)?;
    let queries = query_embeddings(kg, split, encoder, vocab, limits)?;
    evaluate_with_table(kg, split, &queries, &table, opts)
}
