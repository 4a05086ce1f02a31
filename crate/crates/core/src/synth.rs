//! Synthetic knowledge graph with compositional structure.
//!
//! Every entity is a (color, material, shape) combination, 8 × 5 × 5 = 200
//! entities. Each of the 8 relations shifts one or two attributes by a
//! fixed offset and keeps the rest, so the tail of `(h, r, ?)` is fully
//! determined by the head's attributes and the relation.
//!
//! Entities carry no description, so their text is the display name and
//! training prompts read like the question-answering prompts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kg::{make_pairs, Entity, KnowledgeGraph, Relation, Triple};

pub const COLORS: [&str; 8] = ["red", "orange", "yellow", "green", "blue", "purple", "white", "black"];
pub const MATERIALS: [&str; 5] = ["glass", "stone", "iron", "wood", "clay"];
pub const SHAPES: [&str; 5] = ["cube", "sphere", "cone", "ring", "star"];

/// Relation descriptions and their (color, material, shape) offsets.
pub const RELATIONS: [(&str, [usize; 3]); 8] = [
    ("follows", [1, 0, 0]),
    ("guards", [0, 1, 0]),
    ("feeds", [0, 0, 1]),
    ("mirrors", [3, 0, 0]),
    ("lifts", [0, 2, 0]),
    ("hides", [0, 0, 2]),
    ("paints", [2, 1, 0]),
    ("trades with", [0, 3, 3]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub valid: usize,
    pub test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            valid: 50,
            test: 150,
        }
    }
}

fn attributes(index: usize) -> [usize; 3] {
    [index / 25, (index / 5) % 5, index % 5]
}

fn index_of(attrs: [usize; 3]) -> usize {
    attrs[0] * 25 + attrs[1] * 5 + attrs[2]
}

pub fn entity_name(index: usize) -> String {
    let [c, m, s] = attributes(index);
    format!("{} {} {}", COLORS[c], MATERIALS[m], SHAPES[s])
}

/// Tail index of `(head, relation)`.
pub fn apply_relation(head: usize, relation: usize) -> usize {
    let a = attributes(head);
    let shift = RELATIONS[relation].1;
    let sizes = [COLORS.len(), MATERIALS.len(), SHAPES.len()];
    let mut out = [0; 3];
    for k in 0..3 {
        out[k] = (a[k] + shift[k]) % sizes[k];
    }
    index_of(out)
}

/// All 1600 `(h, r, t)` facts, shuffled and split into train/valid/test.
pub fn synthetic_kg(cfg: &SynthConfig) -> Result<KnowledgeGraph> {
    let n = COLORS.len() * MATERIALS.len() * SHAPES.len();
    let entities = (0..n)
        .map(|i| Entity {
            key: format!("e{i:03}"),
            name: entity_name(i),
            description: String::new(),
        })
        .collect();
    let relations = RELATIONS
        .iter()
        .enumerate()
        .map(|(k, (desc, _))| Relation {
            key: format!("r{k}"),
            description: desc.to_string(),
        })
        .collect();
    let mut triples: Vec<Triple> = (0..n)
        .flat_map(|h| {
            (0..RELATIONS.len()).map(move |r| Triple::new(h as u32, r as u32, apply_relation(h, r) as u32))
        })
        .collect();
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test = triples.drain(..cfg.test.min(triples.len())).collect();
    let valid = triples.drain(..cfg.valid.min(triples.len())).collect();
    KnowledgeGraph::new(entities, relations, triples, valid, test)
}

/// Plain sentences `D_h D_r D_t` for the given triples.
pub fn sentences(kg: &KnowledgeGraph, triples: &[Triple]) -> Vec<String> {
    make_pairs(triples, kg)
        .into_iter()
        .map(|p| format!("{} {}", p.hr_text, p.t_text))
        .collect()
}
