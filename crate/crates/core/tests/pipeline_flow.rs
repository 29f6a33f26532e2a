use orbpred::chem::Family;
use orbpred::datagen::{generate_dataset, generate_records, read_dataset, DatasetSpec};
use orbpred::model::{init_params, Checkpoint, ModelConfig};
use orbpred::pipeline::{
    evaluate, parse_metrics_csv, resume_training, timing_comparison, train, warm_start_eval, TrainConfig,
    BEST_CHECKPOINT, CONFIG_FILE, LAST_CHECKPOINT, METRICS_FILE,
};

fn small_model() -> ModelConfig {
    ModelConfig { hidden_dim: 8, proj_dim: 8, kernel_hidden: 8, readout_hidden: 16, gnn_layers: 1, ..ModelConfig::default() }
}

#[test]
fn dataset_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("h4.jsonl");
    let spec = DatasetSpec { family: Family::PlanarRandom, n: 4, count: 16, seed: 3 };
    let summary = generate_dataset(&spec, &data).unwrap();
    assert_eq!(summary.written, 16);
    let records = read_dataset(&data).unwrap();
    assert_eq!(records.len(), 16);

    let cfg = TrainConfig {
        lr0: 1e-3,
        epochs: 3,
        batch_size: 5,
        model: small_model(),
        datasets: vec![data.clone()],
        val_fraction: 0.25,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = dir.path().join("run");
    let outcome = train(&cfg, &run).unwrap();
    assert_eq!(outcome.history.len(), 3);
    assert!(outcome.history.iter().all(|m| m.val.is_some()));
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, CONFIG_FILE] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let logged = parse_metrics_csv(&std::fs::read_to_string(run.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(logged, outcome.history);

    let best = Checkpoint::load(&run.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.params, outcome.best_params);

    let longer = TrainConfig { epochs: 5, ..cfg.clone() };
    let resumed = resume_training(&longer, &run).unwrap();
    assert_eq!(resumed.history.len(), 5);
    assert_eq!(&resumed.history[..3], &outcome.history[..]);

    // any other change to the config is refused
    let changed = TrainConfig { lr0: 2e-3, epochs: 6, ..cfg };
    assert!(resume_training(&changed, &run).is_err());

    let held = generate_records(&DatasetSpec { family: Family::Random3d, n: 6, count: 4, seed: 99 }).unwrap().0;
    let report = evaluate(&best, &held).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert!(row.e_model >= row.e_spa - 1e-9);
        assert!(row.orthogonality < 1e-10);
    }
    assert_eq!(report.sizes.len(), 1);
    let warm = warm_start_eval(&best, &held).unwrap();
    for row in &warm.rows {
        assert!(row.e_warm_pred <= row.e_model + 1e-12);
        assert!(row.e_warm_pred >= row.e_spa - 1e-9);
    }
}

#[test]
fn prediction_is_much_faster_than_optimization() {
    let cfg = ModelConfig::default();
    let ck = Checkpoint { config: cfg, params: init_params(&cfg).unwrap(), train: None };
    let records = generate_records(&DatasetSpec { family: Family::Random3d, n: 8, count: 5, seed: 123 }).unwrap().0;
    let t = timing_comparison(&ck, &records).unwrap();
    assert_eq!(t.records, 5);
    assert!(t.speedup() >= 5.0, "speedup only {:.1}x", t.speedup());
}
