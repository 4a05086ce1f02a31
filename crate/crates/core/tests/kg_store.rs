use std::fs;
use std::path::Path;

use kalign_core::kg::{load_kg, make_pairs, Entity, KnowledgeGraph, Relation, Split, Triple};
use kalign_core::Error;
use proptest::prelude::*;

fn write_toy(dir: &Path) {
    fs::write(
        dir.join("entities.tsv"),
        "e0\trefrigerator\ta kitchen appliance for keeping food cold\n\
         e1\twhite goods\tlarge electrical household appliances\n\
         e2\tsalviniaceae\ta family of floating ferns\n\
         e3\tsalvinia\t\n\
         e4\tfern\tflowerless plant\n",
    )
    .unwrap();
    fs::write(dir.join("relations.tsv"), "hyp\thypernym\nmm\tmember meronym\n").unwrap();
    fs::write(
        dir.join("train.tsv"),
        "e0\thyp\te1\ne2\tmm\te3\ne3\thyp\te4\ne2\thyp\te4\ne1\thyp\te4\ne0\thyp\te4\n",
    )
    .unwrap();
    fs::write(dir.join("valid.tsv"), "e4\tmm\te3\ne3\tmm\te2\n").unwrap();
    fs::write(dir.join("test.tsv"), "e4\thyp\te0\n\ne1\tmm\te0\n").unwrap();
}

#[test]
fn loads_counts_and_fallback() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let kg = load_kg(dir.path()).unwrap();
    assert_eq!(kg.num_entities(), 5);
    assert_eq!(kg.num_relations(), 2);
    assert_eq!((kg.train().len(), kg.valid().len(), kg.test().len()), (6, 2, 2));
    let salvinia = kg.entity_id("e3").unwrap();
    assert_eq!(kg.entity_text(salvinia), "salvinia");
}

#[test]
fn augmentation_adds_inverse_companions() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let kg = load_kg(dir.path()).unwrap().augment_inverse().unwrap();
    assert_eq!(kg.num_relations(), 4);
    assert_eq!(kg.train().len(), 12);
    let hyp = kg.relation_id("hyp").unwrap();
    let inv = kg.inverse_of(hyp).unwrap();
    assert_eq!(kg.relation_text(inv), "inverse hypernym");
    for split in Split::ALL {
        for t in kg.split(split) {
            let back = Triple {
                head: t.tail,
                relation: kg.inverse_of(t.relation).unwrap(),
                tail: t.head,
            };
            assert!(kg.split(split).contains(&back), "{t:?} has no companion");
        }
    }
    assert!(matches!(kg.augment_inverse(), Err(Error::AlreadyAugmented)));
}

#[test]
fn pair_text_concatenates_head_and_relation() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let kg = load_kg(dir.path()).unwrap();
    let t = kg.train()[1];
    let p = &make_pairs(&[t], &kg)[0];
    assert_eq!(p.hr_text, "a family of floating ferns member meronym");
    assert_eq!(p.t_text, "salvinia");
    assert_eq!(p.source, t);
}

#[test]
fn dangling_key_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    fs::write(dir.path().join("valid.tsv"), "e4\tmm\te3\ne9\tmm\te2\n").unwrap();
    match load_kg(dir.path()) {
        Err(Error::Validation { file, line, .. }) => {
            assert!(file.contains("valid"), "{file}");
            assert_eq!(line, 2);
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_kg(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let kg = load_kg(dir.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    kg.save(out.path()).unwrap();
    let back = load_kg(out.path()).unwrap();
    assert_eq!(back.entities(), kg.entities());
    assert_eq!(back.relations(), kg.relations());
    for split in Split::ALL {
        assert_eq!(back.split(split), kg.split(split));
    }
}

fn random_kg(n: usize, r: usize, edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let entities = (0..n)
        .map(|i| Entity {
            key: format!("e{i}"),
            name: format!("entity {i}"),
            description: if i % 2 == 0 { format!("thing number {i}") } else { String::new() },
        })
        .collect();
    let relations = (0..r)
        .map(|k| Relation {
            key: format!("r{k}"),
            description: format!("rel {k}"),
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    let train = edges
        .iter()
        .map(|&(h, k, t)| Triple::new((h % n) as u32, (k % r) as u32, (t % n) as u32))
        .filter(|t| seen.insert(*t))
        .collect();
    KnowledgeGraph::new(entities, relations, train, vec![], vec![]).unwrap()
}

proptest! {
    #[test]
    fn one_pair_per_triple(n in 1usize..12, r in 1usize..4,
                           edges in proptest::collection::vec((0usize..50, 0usize..50, 0usize..50), 0..40)) {
        let kg = random_kg(n, r, &edges);
        let pairs = make_pairs(kg.train(), &kg);
        prop_assert_eq!(pairs.len(), kg.train().len());
        for p in &pairs {
            let expect = format!("{} {}", kg.entity_text(p.source.head), kg.relation_text(p.source.relation));
            prop_assert_eq!(&p.hr_text, &expect);
            prop_assert_eq!(p.t_text.as_str(), kg.entity_text(p.source.tail));
        }
    }
}
