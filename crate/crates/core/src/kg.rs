//! Knowledge graphs with textual descriptions.
//!
//! A graph directory holds five UTF-8, tab-separated files without header
//! rows:
//!
//! ```text
//! entities.tsv   entity_key  display_name  description
//! relations.tsv  relation_key  description
//! train.tsv      head_key  relation_key  tail_key
//! valid.tsv      (same as train.tsv)
//! test.tsv       (same as train.tsv)
//! ```
//!
//! Ids are assigned in file order. Inverse augmentation appends one inverse
//! relation per original relation (id `r + |R|`) and one inverse triple per
//! triple in every split.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Dense entity handle in `0..num_entities`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

/// Dense relation handle in `0..num_relations` (inverse relations included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub key: String,
    pub name: String,
    pub description: String,
}

impl Entity {
    /// Description, or the display name when the description is empty.
    pub fn text(&self) -> &str {
        if self.description.trim().is_empty() {
            &self.name
        } else {
            &self.description
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub key: String,
    pub description: String,
}

impl Relation {
    /// Display form of a relation: its description, or the key when empty.
    pub fn name(&self) -> &str {
        if self.description.trim().is_empty() {
            &self.key
        } else {
            &self.description
        }
    }

    pub fn text(&self) -> &str {
        self.name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// The two textual views of one fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgePair {
    /// Head text followed by relation text, joined by a single space.
    pub hr_text: String,
    pub t_text: String,
    /// The two halves of `hr_text`, kept so descriptions can be truncated
    /// independently before encoding.
    pub head_text: String,
    pub relation_text: String,
    pub source: Triple,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    num_original_relations: usize,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    inverse_augmented: bool,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
}

impl KnowledgeGraph {
    /// Build a graph from in-memory tables; triples are validated the same
    /// way as when loading from disk.
    pub fn new(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let entity_index = index_keys(entities.iter().map(|e| e.key.as_str()), "entities")?
            .into_iter()
            .map(|(k, v)| (k, EntityId(v)))
            .collect();
        let relation_index = index_keys(relations.iter().map(|r| r.key.as_str()), "relations")?
            .into_iter()
            .map(|(k, v)| (k, RelationId(v)))
            .collect();
        for (i, e) in entities.iter().enumerate() {
            if e.name.trim().is_empty() {
                return Err(Error::Validation {
                    file: "entities".into(),
                    line: i + 1,
                    message: format!("entity '{}' has an empty display name", e.key),
                });
            }
        }
        let kg = KnowledgeGraph {
            num_original_relations: relations.len(),
            entities,
            relations,
            train,
            valid,
            test,
            inverse_augmented: false,
            entity_index,
            relation_index,
        };
        for split in Split::ALL {
            let mut seen = HashSet::new();
            for (i, t) in kg.split(split).iter().enumerate() {
                let bad = t.head.index() >= kg.entities.len()
                    || t.tail.index() >= kg.entities.len()
                    || t.relation.index() >= kg.relations.len();
                if bad {
                    return Err(Error::Validation {
                        file: split.to_string(),
                        line: i + 1,
                        message: format!("dangling id in {t:?}"),
                    });
                }
                if !seen.insert(*t) {
                    return Err(Error::Validation {
                        file: split.to_string(),
                        line: i + 1,
                        message: "duplicate triple".into(),
                    });
                }
            }
        }
        Ok(kg)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count including inverse relations once augmented.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_original_relations(&self) -> usize {
        self.num_original_relations
    }

    pub fn is_inverse_augmented(&self) -> bool {
        self.inverse_augmented
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.index()]
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id.index()]
    }

    pub fn entity_id(&self, key: &str) -> Option<EntityId> {
        self.entity_index.get(key).copied()
    }

    pub fn relation_id(&self, key: &str) -> Option<RelationId> {
        self.relation_index.get(key).copied()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn valid(&self) -> &[Triple] {
        &self.valid
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Whether `r` is an inverse relation added by augmentation.
    pub fn is_inverse(&self, r: RelationId) -> bool {
        self.inverse_augmented && r.index() >= self.num_original_relations
    }

    /// Inverse of an original relation, or the original of an inverse one.
    pub fn inverse_of(&self, r: RelationId) -> Option<RelationId> {
        if !self.inverse_augmented {
            return None;
        }
        let n = self.num_original_relations as u32;
        Some(if r.0 < n { RelationId(r.0 + n) } else { RelationId(r.0 - n) })
    }

    /// Entity text: description with display-name fallback.
    pub fn entity_text(&self, id: EntityId) -> &str {
        self.entity(id).text()
    }

    pub fn relation_text(&self, id: RelationId) -> &str {
        self.relation(id).text()
    }

    /// Add `(t, r⁻¹, h)` for every `(h, r, t)` in every split.
    pub fn augment_inverse(mut self) -> Result<Self> {
        if self.inverse_augmented {
            return Err(Error::AlreadyAugmented);
        }
        let n = self.relations.len() as u32;
        let inverse: Vec<Relation> = self
            .relations
            .iter()
            .map(|r| Relation {
                key: format!("{}{}", r.key, INVERSE_KEY_SUFFIX),
                description: format!("inverse {}", r.name()),
            })
            .collect();
        for (i, r) in inverse.iter().enumerate() {
            if self.relation_index.contains_key(&r.key) {
                return Err(Error::Validation {
                    file: "relations".into(),
                    line: i + 1,
                    message: format!("inverse relation key '{}' already exists", r.key),
                });
            }
            self.relation_index.insert(r.key.clone(), RelationId(n + i as u32));
        }
        self.relations.extend(inverse);
        for split in [&mut self.train, &mut self.valid, &mut self.test] {
            let inv: Vec<Triple> = split
                .iter()
                .map(|t| Triple {
                    head: t.tail,
                    relation: RelationId(t.relation.0 + n),
                    tail: t.head,
                })
                .collect();
            split.extend(inv);
        }
        self.inverse_augmented = true;
        Ok(self)
    }

    /// Write the original (non-inverse) part of the graph as TSV files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = String::new();
        for e in &self.entities {
            out.push_str(&format!("{}\t{}\t{}\n", e.key, e.name, e.description));
        }
        write_file(&dir.join("entities.tsv"), &out)?;
        out.clear();
        for r in &self.relations[..self.num_original_relations] {
            out.push_str(&format!("{}\t{}\n", r.key, r.description));
        }
        write_file(&dir.join("relations.tsv"), &out)?;
        for split in Split::ALL {
            out.clear();
            for t in self.split(split) {
                if t.relation.index() >= self.num_original_relations {
                    continue;
                }
                out.push_str(&format!(
                    "{}\t{}\t{}\n",
                    self.entity(t.head).key,
                    self.relation(t.relation).key,
                    self.entity(t.tail).key
                ));
            }
            write_file(&dir.join(split.file_name()), &out)?;
        }
        Ok(())
    }
}

const INVERSE_KEY_SUFFIX: &str = "#inverse";

fn index_keys<'a>(
    keys: impl Iterator<Item = &'a str>,
    file: &str,
) -> Result<HashMap<String, u32>> {
    let mut index = HashMap::new();
    for (i, key) in keys.enumerate() {
        if index.insert(key.to_string(), i as u32).is_some() {
            return Err(Error::Validation {
                file: file.into(),
                line: i + 1,
                message: format!("duplicate key '{key}'"),
            });
        }
    }
    Ok(index)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Load a graph directory. Blank lines are skipped; every other line must
/// parse and every key in a triple file must resolve.
pub fn load_kg(dir: &Path) -> Result<KnowledgeGraph> {
    let ent_path = dir.join("entities.tsv");
    let mut entities = Vec::new();
    for (i, line) in read_lines(&ent_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.splitn(3, '\t');
        let key = cols.next().unwrap_or_default();
        let name = cols.next().unwrap_or_default();
        let description = cols.next().unwrap_or_default();
        if key.is_empty() || name.trim().is_empty() {
            return Err(Error::Validation {
                file: file_label(&ent_path),
                line: i + 1,
                message: "expected entity_key<TAB>display_name<TAB>description".into(),
            });
        }
        entities.push(Entity {
            key: key.into(),
            name: name.into(),
            description: description.into(),
        });
    }

    let rel_path = dir.join("relations.tsv");
    let mut relations = Vec::new();
    for (i, line) in read_lines(&rel_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.splitn(2, '\t');
        let key = cols.next().unwrap_or_default();
        if key.is_empty() {
            return Err(Error::Validation {
                file: file_label(&rel_path),
                line: i + 1,
                message: "expected relation_key<TAB>description".into(),
            });
        }
        relations.push(Relation {
            key: key.into(),
            description: cols.next().unwrap_or_default().into(),
        });
    }

    let ent_index = index_keys(entities.iter().map(|e| e.key.as_str()), "entities.tsv")?;
    let rel_index = index_keys(relations.iter().map(|r| r.key.as_str()), "relations.tsv")?;

    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let mut triples = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in read_lines(&path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |message: String| Error::Validation {
                file: file_label(&path),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(invalid(format!("expected 3 columns, found {}", cols.len())));
            }
            let resolve_entity = |k: &str| {
                ent_index
                    .get(k)
                    .copied()
                    .ok_or_else(|| invalid(format!("unknown entity '{k}'")))
            };
            let head = resolve_entity(cols[0])?;
            let relation = rel_index
                .get(cols[1])
                .copied()
                .ok_or_else(|| invalid(format!("unknown relation '{}'", cols[1])))?;
            let tail = resolve_entity(cols[2])?;
            let triple = Triple::new(head, relation, tail);
            if !seen.insert(triple) {
                return Err(invalid("duplicate triple".into()));
            }
            triples.push(triple);
        }
        splits.push(triples);
    }
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    KnowledgeGraph::new(entities, relations, train, valid, test)
}

/// One pair per triple, in input order.
pub fn make_pairs(triples: &[Triple], kg: &KnowledgeGraph) -> Vec<KnowledgePair> {
    triples
        .iter()
        .map(|&t| {
            let head_text = kg.entity_text(t.head).to_string();
            let relation_text = kg.relation_text(t.relation).to_string();
            KnowledgePair {
                hr_text: format!("{head_text} {relation_text}"),
                t_text: kg.entity_text(t.tail).to_string(),
                head_text,
                relation_text,
                source: t,
            }
        })
        .collect()
}
