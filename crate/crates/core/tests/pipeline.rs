use eemax_core::chanmodel::{generate, load_dataset, save_dataset, ScenarioConfig};
use eemax_core::inet::{load_checkpoint, save_checkpoint};
use eemax_core::objective::{nats_to_mbit_per_joule, PowerModel};
use eemax_core::oracle::{read_comparison_csv, solve_dataset, write_comparison_csv, ComparisonRow, OracleConfig, OracleMode};
use eemax_core::trainer::{evaluate, read_metrics_csv, train, write_metrics_csv, TrainConfig, TrainState};

#[test]
fn files_written_by_one_stage_feed_the_next() {
    let dir = tempfile::tempdir().unwrap();
    let sc = ScenarioConfig {
        num_users: 2,
        ..Default::default()
    };
    let train_path = dir.path().join("train.bin");
    let test_path = dir.path().join("test.bin");
    save_dataset(&generate(&sc, 32, 1).unwrap(), &train_path).unwrap();
    save_dataset(&generate(&sc, 8, 2).unwrap(), &test_path).unwrap();
    let train_ds = load_dataset(&train_path).unwrap();
    let test_ds = load_dataset(&test_path).unwrap();

    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let out = train(&train_ds, &cfg).unwrap();
    save_checkpoint(dir.path().join("net.bin"), &out.alpha, &out.beta).unwrap();
    out.state.save(dir.path().join("state.json")).unwrap();
    write_metrics_csv(dir.path().join("metrics.csv"), &out.metrics).unwrap();

    let (alpha, beta) = load_checkpoint(dir.path().join("net.bin")).unwrap();
    assert_eq!(alpha, out.alpha);
    assert_eq!(beta, out.beta);
    let state = TrainState::load(dir.path().join("state.json")).unwrap();
    assert_eq!(state, out.state);
    assert_eq!(read_metrics_csv(dir.path().join("metrics.csv")).unwrap(), out.metrics);

    let model = PowerModel::default();
    let rows: Vec<ComparisonRow> = solve_dataset(&test_ds, 1.0, &model, &OracleConfig::for_users(2), OracleMode::Grid, 0)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(k, r)| ComparisonRow {
            sample_index: k,
            ee_oracle: nats_to_mbit_per_joule(r.objective, cfg.bandwidth_hz),
            ee_net: None,
            p_oracle: r.p,
            p_net: None,
        })
        .collect();
    let oracle_path = dir.path().join("oracle.csv");
    write_comparison_csv(&oracle_path, 2, &rows).unwrap();
    let rows = read_comparison_csv(&oracle_path).unwrap();

    let eval = evaluate(&alpha, &test_ds, state.region.s, &model, cfg.bandwidth_hz, Some(&rows)).unwrap();
    let ratio = eval.mean_ratio.unwrap();
    assert!(ratio > 0.0 && ratio <= 1.0 + 1e-9, "ratio {ratio}");
    assert_eq!(eval.samples.len(), 8);
    for s in &eval.samples {
        assert!(s.p_w.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
