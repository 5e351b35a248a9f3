use std::sync::Arc;

use domus_core::embedding::{AttributeEmbeddingTable, Lexicon};
use domus_core::event::{Event, Sensor, Status};
use domus_core::event_encoder::{encode_events, harmonic_features, EventCode, EventEncoder, EventEncoderConfig, SlotMask};
use domus_core::model::{Model, ModelConfig, WindowBatch};
use domus_nn::{grad_check, Graph, NodeId, ParamStore, Result as NnResult, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [11, 12, 13];
// Wed 2025-10-15 06:30:00 UTC.
const T0: i64 = 1_760_509_800;

fn sensors() -> Vec<Arc<Sensor>> {
    vec![
        Arc::new(Sensor::new("M001", Some("stove"), Some("kitchen"), "motion").unwrap()),
        Arc::new(Sensor::new("D002", None, Some("hall"), "door").unwrap()),
        Arc::new(Sensor::new("M003", Some("bed"), Some("bedroom"), "motion").unwrap()),
    ]
}

fn events(n: usize, seed: u64) -> Vec<Event> {
    let s = sensors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = T0;
    (0..n)
        .map(|i| {
            t += rng.gen_range(1..5000);
            let status = if i % 2 == 0 { Status::On } else { Status::Off };
            Event::new(t, s[rng.gen_range(0..s.len())].clone(), status)
        })
        .collect()
}

fn small_model() -> ModelConfig {
    ModelConfig { d: 8, heads: 2, layers: 1, harmonics: 2, seconds_buckets: 4, context_enabled: true }
}

/// Sum of the node weighted by fixed random values.
fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NnResult<NodeId> {
    let v = g.value(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let w: Vec<f64> = (0..v.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(v.shape().to_vec(), w).unwrap());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn harmonic_features_are_periodic_bitwise() {
    for x in 0..24 {
        assert_eq!(harmonic_features(f64::from(x), 24.0, 4), harmonic_features(f64::from(x + 24), 24.0, 4));
    }
    let f = harmonic_features(6.0, 24.0, 1);
    assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15);
}

#[test]
fn temporal_encoding_repeats_after_a_day_and_a_week() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(6));
    let model = Model::new(ModelConfig::default(), 6, 3).unwrap();
    let s = sensors();
    let mut at = |t: i64| encode_events(&[Event::new(t, s[0].clone(), Status::On)], &mut lex, 0).unwrap()[0];
    let (base, day, week) = (at(T0), at(T0 + 86_400), at(T0 + 7 * 86_400));
    let mut g = Graph::<f32>::new();
    let [d0, h0, s0] = model.event.encode_temporal(&mut g, &model.store, base.time).unwrap();
    let [d1, h1, s1] = model.event.encode_temporal(&mut g, &model.store, day.time).unwrap();
    assert_eq!(g.value(h0), g.value(h1));
    assert_eq!(g.value(s0), g.value(s1));
    assert_ne!(g.value(d0), g.value(d1));
    assert_eq!(base, week);
    let a = model.event.encode_event(&mut g, &model.store, &lex, &base, SlotMask::NONE).unwrap();
    let b = model.event.encode_event(&mut g, &model.store, &lex, &week, SlotMask::NONE).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn fully_masked_events_only_see_mask_rows() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(6));
    let model = Model::new(ModelConfig::default(), 6, 4).unwrap();
    let codes = encode_events(&events(5, 1), &mut lex, 0).unwrap();
    let masked = model.masked_event_embedding(&lex).unwrap();
    let mut g = Graph::<f32>::new();
    let h = model.event.forward(&mut g, &model.store, &lex, &codes, &[SlotMask::ALL; 5]).unwrap();
    for r in 0..5 {
        assert_eq!(g.value(h).row(r), masked.as_slice());
    }
    let x = model.event.slot_inputs(&mut g, &model.store, &lex, &codes[..1], &[SlotMask::ALL]).unwrap();
    let slot = model.store.get(model.event.slot_embedding);
    let status = model.store.get(model.event.status);
    let seconds = model.store.get(model.event.seconds);
    let text = model.store.get(model.event.text_special[1]);
    let row = |t: &Tensor<f32>, r: usize, s: usize| -> Vec<f32> {
        t.row(r).iter().zip(slot.row(s)).map(|(a, b)| a + b).collect()
    };
    assert_eq!(g.value(x).row(1), row(text, 1, 1).as_slice());
    assert_eq!(g.value(x).row(5), row(seconds, model.config.seconds_buckets, 5).as_slice());
    assert_eq!(g.value(x).row(6), row(status, 2, 6).as_slice());
}

#[test]
fn null_and_mask_are_distinct() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(6));
    let model = Model::new(ModelConfig::default(), 6, 5).unwrap();
    let code = encode_events(&events(1, 2), &mut lex, 0).unwrap()[0];
    let null = EventCode { text: [None; 3], ..code };
    let mut g = Graph::<f32>::new();
    let a = model.event.encode_event(&mut g, &model.store, &lex, &null, SlotMask::NONE).unwrap();
    let b = model.event.encode_event(&mut g, &model.store, &lex, &null, SlotMask(0b111)).unwrap();
    assert_ne!(g.value(a), g.value(b));
}

#[test]
fn event_encoder_gradients() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(5));
    for seed in SEEDS {
        let codes = encode_events(&events(2, seed), &mut lex, 0).unwrap();
        let masks = [SlotMask::NONE, SlotMask(0b0100_1001)];
        let cfg = EventEncoderConfig { d: 8, d_text: 5, heads: 2, harmonics: 2, seconds_buckets: 4 };
        let mut store = ParamStore::<f64>::new();
        let gi = store.add_group("event_encoder").unwrap();
        let enc = EventEncoder::new(&mut store, gi, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let report = grad_check(
            |g, s| {
                let h = enc.forward(g, s, &lex, &codes, &masks).map_err(|e| domus_nn::NnError::Config(e.to_string()))?;
                project(g, h, seed)
            },
            &store,
            1e-5,
            seed,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn window_pipeline_gradients() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(5));
    for seed in SEEDS {
        let codes = encode_events(&events(3, seed), &mut lex, 0).unwrap();
        let model = Model::new(small_model(), 5, seed).unwrap();
        let store = model.store.cast::<f64>();
        let mut batch = WindowBatch::default();
        batch.push_window(0, 0, &codes, &[SlotMask::NONE, SlotMask::ALL, SlotMask(0b10)]).unwrap();
        let report = grad_check(
            |g, s| {
                let e = model.window_embeddings(g, s, &lex, &batch).map_err(|e| domus_nn::NnError::Config(e.to_string()))?;
                project(g, e, seed)
            },
            &store,
            1e-5,
            seed,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn pooled_window_ignores_event_order() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(6));
    let model = Model::new(ModelConfig::default(), 6, 8).unwrap();
    let codes = encode_events(&events(6, 3), &mut lex, 0).unwrap();
    let mut rev = codes.clone();
    rev.reverse();
    let a = model.window_representation(&lex, &codes).unwrap();
    let b = model.window_representation(&lex, &rev).unwrap();
    for (x, y) in a.pooled.data().iter().zip(b.pooled.data()) {
        assert!((x - y).abs() < 1e-5);
    }
    assert_eq!(a.contextualized.shape(), &[6, 64]);
}

#[test]
fn batched_and_cached_paths_agree() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(6));
    let model = Model::new(ModelConfig::default(), 6, 9).unwrap();
    let codes = encode_events(&events(12, 4), &mut lex, 0).unwrap();
    let starts = [0, 1, 5];
    let mut batch = WindowBatch::default();
    for &s in &starts {
        batch.push_window(0, s, &codes[s..s + 6], &[SlotMask::NONE; 6]).unwrap();
    }
    // Overlapping windows share their events.
    assert_eq!(batch.codes.len(), 11);
    let mut g = Graph::<f32>::new();
    let batched = model.window_embeddings(&mut g, &model.store, &lex, &batch).unwrap();
    let cached = model.pooled_embeddings(&lex, &codes, 6, &starts).unwrap();
    for (i, &s) in starts.iter().enumerate() {
        let single = model.window_representation(&lex, &codes[s..s + 6]).unwrap();
        for ((a, b), c) in g.value(batched).row(i).iter().zip(cached.row(i)).zip(single.pooled.data()) {
            assert!((a - c).abs() < 1e-5 && (b - c).abs() < 1e-5);
        }
    }
}

#[test]
fn context_can_be_disabled() {
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(6));
    let cfg = ModelConfig { context_enabled: false, ..ModelConfig::default() };
    let model = Model::new(cfg, 6, 10).unwrap();
    let codes = encode_events(&events(4, 5), &mut lex, 0).unwrap();
    let rep = model.window_representation(&lex, &codes).unwrap();
    let table = model.event_embedding_table(&lex, &codes).unwrap();
    for r in 0..4 {
        for (a, b) in rep.contextualized.row(r).iter().zip(table.row(r)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
