use std::sync::Arc;

use domus_core::downstream::{
    argmax, finetune, largest_remainder, nextk_predict, nextk_target, AdlHead, EventMultiset, EventType, Example,
    FinetuneConfig, FinetuneStrategy, Head, NextKHead, Target, ADL_GROUP,
};
use domus_core::embedding::{AttributeEmbeddingTable, Lexicon};
use domus_core::event::{Event, Sensor, Status};
use domus_core::event_encoder::encode_events;
use domus_core::model::{Model, ModelConfig, CONTEXT_GROUP, EVENT_GROUP};
use domus_nn::Tensor;
use proptest::prelude::*;

fn ty(s: &str, st: Status) -> EventType {
    (s.to_string(), st)
}

#[test]
fn adl_argmax_examples() {
    let mut model = Model::new(ModelConfig::default(), 8, 1).unwrap();
    let classes: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let head = AdlHead::attach(&mut model, classes.clone(), 1).unwrap();
    let pooled = Tensor::from_rows(&[vec![0.5; 64]]).unwrap();

    model.store.get_mut(head.linear.weight).data_mut().fill(0.0);
    let out = head.predict(&model.store, &pooled).unwrap();
    assert_eq!(out[0], (vec![0.0; 3], 0));

    // Column 2 reads the input; the others are zero.
    let w = model.store.get_mut(head.linear.weight);
    for r in 0..64 {
        w.data_mut()[r * 3 + 2] = 1.0;
    }
    assert_eq!(head.predict(&model.store, &pooled).unwrap()[0].1, 2);
    assert_eq!(head.predict(&model.store, &pooled).unwrap(), head.predict(&model.store, &pooled).unwrap());
    assert!(head.class_index("zzz").is_err());
    assert!(AdlHead::attach(&mut Model::new(ModelConfig::default(), 8, 1).unwrap(), vec!["x".into()], 0).is_err());
}

#[test]
fn largest_remainder_examples() {
    assert_eq!(largest_remainder(&[1.6, 0.9, 0.5], 3), vec![2, 1, 0]);
    assert_eq!(largest_remainder(&[0.2], 7), vec![7]);
    assert_eq!(largest_remainder(&[0.0, 0.0, 0.0], 5), vec![2, 2, 1]);
    assert_eq!(largest_remainder(&[1.0, 1.0], 3), vec![2, 1]);
    let vocab = vec![ty("a", Status::On), ty("b", Status::On), ty("c", Status::Off)];
    let m = nextk_predict(&[1.6, 0.9, 0.5], &vocab, 3);
    assert_eq!(m.to_string(), "a:ON=2;b:ON=1");
}

proptest! {
    #[test]
    fn apportionment_totals_k_and_is_scale_invariant(
        expected in prop::collection::vec(0.0f64..10.0, 1..12),
        k in 1u32..60,
        scale in prop::sample::select(vec![0.5f64, 2.0, 4.0, 8.0]),
    ) {
        let counts = largest_remainder(&expected, k);
        prop_assert_eq!(counts.iter().sum::<u32>(), k);
        let scaled: Vec<f64> = expected.iter().map(|x| x * scale).collect();
        prop_assert_eq!(largest_remainder(&scaled, k), counts);
    }

    #[test]
    fn argmax_ignores_logit_shift(logits in prop::collection::vec(-4i32..4, 1..10), c in -8i32..8) {
        let base: Vec<f32> = logits.iter().map(|&x| x as f32).collect();
        let shifted: Vec<f32> = base.iter().map(|x| x + c as f32).collect();
        prop_assert_eq!(argmax(&base), argmax(&shifted));
        prop_assert!(base[..argmax(&base)].iter().all(|&v| v < base[argmax(&base)]));
    }
}

fn stream(n: usize) -> Vec<Event> {
    let a = Arc::new(Sensor::new("A", Some("stove"), Some("kitchen"), "motion").unwrap());
    let b = Arc::new(Sensor::new("B", Some("bed"), Some("bedroom"), "motion").unwrap());
    (0..n)
        .map(|i| {
            let sensor = if (i / 2) % 3 == 0 { &b } else { &a };
            let status = if i % 2 == 0 { Status::On } else { Status::Off };
            let label = if (i / 2) % 3 == 0 { "sleep" } else { "cook" };
            Event::new(1_760_509_800 + 60 * i as i64, sensor.clone(), status).labeled(label)
        })
        .collect()
}

#[test]
fn nextk_targets() {
    let a = Arc::new(Sensor::new("A", None, None, "motion").unwrap());
    let ev: Vec<Event> = [Status::Off, Status::On, Status::Off, Status::On]
        .iter()
        .enumerate()
        .map(|(i, &s)| Event::new(i as i64 + 1, a.clone(), s))
        .collect();
    let t = nextk_target(&ev, 0, 3).unwrap();
    assert_eq!((t.get(&ty("A", Status::On)), t.get(&ty("A", Status::Off)), t.total()), (2, 1, 3));
    assert_eq!(nextk_target(&ev, 2, 1).unwrap().to_string(), "A:ON=1");
    assert_eq!(nextk_target(&ev, 3, 1), None);
    assert_eq!(nextk_target(&ev, 1, 3), None);
    assert_eq!(EventMultiset::from_events(&ev).total(), 4);
}

fn adl_examples(events: &[Event], head: &AdlHead, window: usize) -> Vec<Example> {
    (0..=events.len() - window)
        .map(|s| Example {
            start: s,
            target: Target::Class(head.class_index(events[s + window - 1].activity.as_deref().unwrap()).unwrap()),
        })
        .collect()
}

#[test]
fn head_only_keeps_backbone_bits() {
    let events = stream(40);
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(8));
    let codes = encode_events(&events, &mut lex, 0).unwrap();
    let mut model = Model::new(ModelConfig::default(), 8, 2).unwrap();
    let head = AdlHead::attach(&mut model, vec!["cook".into(), "sleep".into()], 3).unwrap();
    let examples = adl_examples(&events, &head, 6);
    let before = model.store.clone();
    for strategy in [FinetuneStrategy::HeadOnly, FinetuneStrategy::FrozenFeatures] {
        let cfg = FinetuneConfig { strategy, epochs: 2, ..Default::default() };
        finetune(&mut model, &Head::Adl(head.clone()), &lex, &codes, 6, &examples, &cfg).unwrap();
        assert!(model.store.group_bits_equal(&before, EVENT_GROUP));
        assert!(model.store.group_bits_equal(&before, CONTEXT_GROUP));
        assert!(!model.store.group_bits_equal(&before, ADL_GROUP));
    }
    let cfg = FinetuneConfig { strategy: FinetuneStrategy::Full, epochs: 1, ..Default::default() };
    finetune(&mut model, &Head::Adl(head.clone()), &lex, &codes, 6, &examples, &cfg).unwrap();
    assert!(!model.store.group_bits_equal(&before, EVENT_GROUP));
    assert!(finetune(&mut model, &Head::Adl(head), &lex, &codes, 6, &[], &cfg).is_err());
}

#[test]
fn finetune_loss_decreases_on_separable_task() {
    let events = stream(60);
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(8));
    let codes = encode_events(&events, &mut lex, 0).unwrap();
    let (mut first, mut last) = (0.0, 0.0);
    for seed in [1, 2, 3] {
        let mut model = Model::new(ModelConfig::default(), 8, seed).unwrap();
        let head = AdlHead::attach(&mut model, vec!["cook".into(), "sleep".into()], seed).unwrap();
        let examples = adl_examples(&events, &head, 4);
        let cfg = FinetuneConfig { seed, ..Default::default() };
        let h = finetune(&mut model, &Head::Adl(head), &lex, &codes, 4, &examples, &cfg).unwrap();
        assert_eq!(h.len(), 10);
        first += h[0];
        last += h[9];
    }
    assert!(last < first, "{first} → {last}");
}

#[test]
fn nextk_finetune_and_predict() {
    let events = stream(50);
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(8));
    let codes = encode_events(&events, &mut lex, 0).unwrap();
    let mut model = Model::new(ModelConfig::default(), 8, 4).unwrap();
    let vocab = NextKHead::vocabulary(["A", "B"]);
    assert_eq!(vocab.len(), 4);
    let head = NextKHead::attach(&mut model, vocab, 5, 4).unwrap();
    let examples: Vec<Example> = (0..40)
        .map(|s| Example {
            start: s,
            target: Target::Counts(head.count_vector(&nextk_target(&events, s + 5, 5).unwrap()).unwrap()),
        })
        .collect();
    let cfg = FinetuneConfig { epochs: 4, ..Default::default() };
    let h = finetune(&mut model, &Head::NextK(head.clone()), &lex, &codes, 6, &examples, &cfg).unwrap();
    assert!(h[3] < h[0]);
    let pooled = model.pooled_embeddings(&lex, &codes, 6, &[0, 10]).unwrap();
    for m in head.predict(&model.store, &pooled).unwrap() {
        assert_eq!(m.total(), 5);
    }
    let stranger = nextk_target(&stream(3), 0, 2).unwrap();
    let mut other = EventMultiset::default();
    other.insert(ty("Z", Status::On), 1);
    assert!(head.count_vector(&stranger).is_ok());
    assert!(head.count_vector(&other).is_err());
}

#[test]
fn strategy_names_roundtrip() {
    for s in [FinetuneStrategy::FrozenFeatures, FinetuneStrategy::HeadOnly, FinetuneStrategy::Full] {
        assert_eq!(FinetuneStrategy::parse(s.as_str()).unwrap(), s);
    }
    assert!(FinetuneStrategy::parse("partial").is_err());
}
