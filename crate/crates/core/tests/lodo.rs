use domus_core::embedding::{AttributeEmbeddingTable, Lexicon};
use domus_core::event::EventStream;
use domus_core::evaluation::{lodo_run, predictions_csv, EvalProtocol, LodoConfig, Variant};
use domus_core::ingestion::synth::{generate_synthetic_corpus, preset, PRESET_NAMES};
use domus_core::ingestion::Dataset;
use domus_core::model::ModelConfig;
use domus_core::downstream::FinetuneConfig;
use domus_core::pretraining::PretrainConfig;

fn small_homes(events: usize) -> Vec<Dataset> {
    PRESET_NAMES
        .iter()
        .map(|n| {
            let full = generate_synthetic_corpus(&preset(n).unwrap()).unwrap();
            let mut d = Dataset::from_stream(n, EventStream::new(full.stream.events[..events].to_vec())).unwrap();
            d.activity_set = full.activity_set.clone();
            d
        })
        .collect()
}

fn tiny_config() -> LodoConfig {
    LodoConfig {
        model: ModelConfig { d: 16, heads: 2, layers: 1, harmonics: 2, seconds_buckets: 12, context_enabled: true },
        window: 10,
        overlap: 9,
        pretrain: PretrainConfig { batch_size: 8, epochs_phase1: 1, epochs_phase2: 1, windows_per_dataset: 16, ..Default::default() },
        finetune: FinetuneConfig { epochs: 2, ..Default::default() },
        seed: 4,
    }
}

fn tiny_protocol() -> EvalProtocol {
    EvalProtocol {
        pcts: vec![20.0, 50.0],
        folds: 3,
        k_values: vec![5],
        seeds: vec![1, 2],
        ..EvalProtocol::new("home_c")
    }
}

#[test]
fn report_shape_and_isolation() {
    let datasets = small_homes(150);
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(8));
    let protocol = tiny_protocol();
    let out = lodo_run(&datasets, &mut lex, &protocol, &tiny_config()).unwrap();
    assert_eq!(out.pretrain.datasets_seen, vec!["home_a".to_string(), "home_b".to_string()]);

    let rows = &out.transfer.report.rows;
    // adl: 1 metric per variant, next5: 3 metrics per variant.
    let per_run = 4 * (1 + 3);
    assert_eq!(rows.len(), protocol.pcts.len() * protocol.folds * protocol.seeds.len() * per_run);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.value) && r.dataset == "home_c"));
    let agg = out.transfer.report.aggregate();
    assert_eq!(agg.len(), 2 * 4 * 4);
    assert!(agg.iter().all(|a| a.count == protocol.folds * protocol.seeds.len()));

    let csv = out.transfer.report.to_csv();
    assert_eq!(csv.lines().count(), 1 + rows.len() + agg.len());
    let dump = String::from_utf8(predictions_csv(&out.transfer.predictions).unwrap()).unwrap();
    assert!(dump.starts_with("window_id,task,prediction,target\n"));
    assert!(dump.contains(",adl.pretrained,") && dump.contains(",next5.majority,"));

    let mut lex2 = Lexicon::new(AttributeEmbeddingTable::fallback(8));
    let again = lodo_run(&datasets, &mut lex2, &protocol, &tiny_config()).unwrap();
    assert_eq!(again.transfer.report.to_csv(), csv);
}

#[test]
fn bad_protocols_rejected() {
    let datasets = small_homes(80);
    let mut lex = Lexicon::new(AttributeEmbeddingTable::fallback(8));
    let unknown = EvalProtocol { held_out: "home_z".into(), ..tiny_protocol() };
    assert!(lodo_run(&datasets, &mut lex, &unknown, &tiny_config()).is_err());
    let one_fold = EvalProtocol { folds: 1, ..tiny_protocol() };
    assert!(lodo_run(&datasets, &mut lex, &one_fold, &tiny_config()).is_err());
    let bad_pct = EvalProtocol { pcts: vec![0.0], ..tiny_protocol() };
    assert!(lodo_run(&datasets, &mut lex, &bad_pct, &tiny_config()).is_err());
    assert!(lodo_run(&datasets[2..], &mut lex, &tiny_protocol(), &tiny_config()).is_err());
    assert_eq!(Variant::parse("no_context").unwrap(), Variant::NoContext);
}
