use kalign_core::kg::{make_pairs, Split};
use kalign_core::synth::{synthetic_kg, SynthConfig};
use kalign_core::text::{
    encode_pair, encode_view, is_eos_marker, render_instruction, TextLimits, View, Vocab, END_ID, UNK_ID,
};
use kalign_core::train::build_vocab;
use proptest::prelude::*;

fn toy() -> (kalign_core::kg::KnowledgeGraph, Vocab) {
    let kg = synthetic_kg(&SynthConfig::default()).unwrap().augment_inverse().unwrap();
    let vocab = build_vocab(&kg, 8192).unwrap();
    (kg, vocab)
}

#[test]
fn valid_split_is_almost_fully_covered() {
    let (kg, vocab) = toy();
    let texts: Vec<String> = make_pairs(kg.split(Split::Valid), &kg)
        .into_iter()
        .flat_map(|p| [p.hr_text, p.t_text])
        .collect();
    assert!(vocab.oov_rate(&texts) < 0.05);
}

#[test]
fn views_carry_their_markers() {
    let (kg, vocab) = toy();
    let limits = TextLimits::default();
    for p in make_pairs(&kg.train()[..20], &kg) {
        let (hr, t) = encode_pair(&p, &vocab, &limits);
        assert_eq!(hr.ids()[0], View::HeadRelation.bos());
        assert_eq!(*hr.ids().last().unwrap(), View::HeadRelation.eos());
        assert_eq!(t.ids()[0], View::Tail.bos());
        assert_eq!(*t.ids().last().unwrap(), View::Tail.eos());
        assert!(!hr.ids()[1..hr.len() - 1].iter().any(|&i| is_eos_marker(i)));
    }
}

#[test]
fn description_budget_applies_per_part() {
    let (kg, vocab) = toy();
    let limits = TextLimits {
        max_description_length: 3,
        ..TextLimits::default()
    };
    let p = &make_pairs(&kg.train()[..1], &kg)[0];
    let (hr, t) = encode_pair(p, &vocab, &limits);
    assert_eq!(hr.len(), 2 + 3 + 3.min(vocab.encode(&p.relation_text).len()));
    assert_eq!(t.len(), 2 + 3);
}

#[test]
fn instruction_mask_covers_response_only() {
    let (kg, vocab) = toy();
    let p = &make_pairs(&kg.train()[..1], &kg)[0];
    let s = render_instruction(p, &vocab, &TextLimits::default()).unwrap();
    assert_eq!(s.tokens.len(), s.mask.len());
    assert!(s.mask[..s.prompt_len].iter().all(|&m| !m));
    assert!(s.mask[s.prompt_len..].iter().all(|&m| m));
    assert_eq!(*s.target().last().unwrap(), END_ID);
    assert_eq!(&s.target()[..s.target_len() - 1], vocab.encode(&p.t_text).as_slice());
}

#[test]
fn too_short_lm_budget_is_an_error() {
    let (kg, vocab) = toy();
    let p = &make_pairs(&kg.train()[..1], &kg)[0];
    let limits = TextLimits {
        max_lm_length: 16,
        ..TextLimits::default()
    };
    assert!(render_instruction(p, &vocab, &limits).is_err());
}

#[test]
fn unknown_words_map_to_unk() {
    let (_, vocab) = toy();
    let ids = vocab.encode("red zyzzyva cube");
    assert_eq!(ids[1], UNK_ID);
    assert_eq!(vocab.decode(&[ids[0], ids[2]]), "red cube");
}

#[test]
fn overlong_view_is_truncated_before_the_marker() {
    let (_, vocab) = toy();
    let v = encode_view("red glass cube red glass cube red glass cube", View::Tail, &vocab, 6).unwrap();
    assert_eq!(v.len(), 6);
    assert_eq!(*v.ids().last().unwrap(), View::Tail.eos());
}

proptest! {
    #[test]
    fn vocab_round_trips_known_text(words in proptest::collection::vec(0usize..8, 1..12)) {
        let (_, vocab) = toy();
        let pool = ["red", "glass", "cube", "sphere", "iron", "follows", "inverse", "blue"];
        let text = words.iter().map(|&i| pool[i]).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(vocab.decode(&vocab.encode(&text)), text);
    }
}
