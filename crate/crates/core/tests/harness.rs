use std::fs;
use std::path::Path;

use fairdrl_core::fairness::compute_metrics;
use fairdrl_core::grid::{label_groups, DemographicMap, GridSpec, STTensor};
use fairdrl_core::harness::{
    cmd_evaluate, cmd_predict, cmd_sweep, cmd_synth, cmd_train, write_sweep_csv, DataSource, Dataset, RunConfig,
    SweepRow, Variant,
};
use fairdrl_core::synth::{default_start, ScenarioConfig};
use fairdrl_core::train::{ha_baseline, TrainConfig, TrainLog};
use fairdrl_core::FairError;

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        height: 4,
        width: 4,
        t: 40,
        period: 8,
        smooth_radius: 1,
        ..ScenarioConfig::default()
    }
}

fn small_run(out: &Path) -> RunConfig {
    RunConfig {
        run_id: "small".into(),
        data: DataSource::Synthetic {
            scenario: small_scenario(),
        },
        train: TrainConfig {
            window: 4,
            epochs: 1,
            d_s: 2,
            d_ns: 3,
            head_epochs: 3,
            ..TrainConfig::default()
        },
        out_dir: out.to_path_buf(),
        seeds: vec![0, 1],
        lambdas: vec![0.0, 0.6],
        ..RunConfig::default()
    }
}

#[test]
fn config_json_round_trip_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    let path = dir.path().join("run.json");
    run.write(&path).unwrap();
    assert_eq!(RunConfig::read(&path).unwrap(), run);

    let err = RunConfig::from_json(r#"{"run_id": "x", "learning_rate": 1.0}"#, "inline").unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn both_modules_off_with_positive_lambda_is_rejected() {
    let mut run = small_run(Path::new("unused"));
    run.train.sensitive = false;
    run.train.nonsensitive = false;
    run.train.lambda = 0.6;
    let err = run.validate().unwrap_err();
    assert!(matches!(err, FairError::Invalid { .. }), "{err}");

    run.train.lambda = 0.0;
    run.validate().unwrap();
}

#[test]
fn missing_demographics_is_a_named_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let paths = cmd_synth(&small_scenario(), dir.path()).unwrap();
    let missing = dir.path().join("nowhere.csv");
    let err = Dataset::load(&DataSource::Files {
        stack: paths.stack,
        demographics: missing.clone(),
    })
    .unwrap_err();
    match &err {
        FairError::Io { path, .. } => assert_eq!(path, &missing),
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("nowhere.csv"));
    assert!(err.is_validation());
}

#[test]
fn synth_files_load_back_as_the_same_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario();
    let paths = cmd_synth(&scenario, dir.path()).unwrap();
    for p in [&paths.stack, &paths.demographics, &paths.trips, &paths.truth] {
        assert!(p.exists(), "{}", p.display());
    }
    let direct = Dataset::load(&DataSource::Synthetic { scenario }).unwrap();
    let loaded = Dataset::load(&DataSource::Files {
        stack: paths.stack,
        demographics: paths.demographics,
    })
    .unwrap();
    assert_eq!(loaded.stack, direct.stack);
    for (a, b) in loaded.dem.p().iter().zip(direct.dem.p()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in loaded.s.values().iter().zip(direct.s.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ha_is_exact_on_constant_demand() {
    let grid = GridSpec::new(2, 2).unwrap();
    let levels = [3.0, 5.0, 7.0, 11.0];
    let values: Vec<f64> = levels.iter().flat_map(|v| std::iter::repeat_n(*v, 10)).collect();
    let x = STTensor::new(grid.clone(), 10, 1, values, default_start()).unwrap();
    let truth: Vec<f64> = levels.iter().flat_map(|v| std::iter::repeat_n(*v, 4)).collect();
    let ha = ha_baseline(&x, 4).unwrap().with_truth(truth).unwrap();
    let dem = DemographicMap::from_counts(grid, &[1.0, 2.0, 3.0, 4.0], vec![0.9, 0.8, 0.2, 0.1]).unwrap();
    let m = compute_metrics(&ha, &dem, &label_groups(&dem)).unwrap();
    assert_eq!(m.mae, Some(0.0));
}

#[test]
fn train_evaluate_predict_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    let train_dir = dir.path().join("train");
    let t = cmd_train(&run, &train_dir).unwrap();
    for f in ["checkpoint.fdt", "train_log.csv", "train_meta.json", "run_config.json"] {
        assert!(train_dir.join(f).exists(), "{f}");
    }
    let rows = TrainLog::read_csv(&train_dir.join("train_log.csv")).unwrap();
    assert_eq!(rows, t.log.rows);
    assert!(rows.windows(2).all(|w| w[0].step < w[1].step));

    let eval_dir = dir.path().join("eval");
    let (reports, warnings) = cmd_evaluate(&run, &t.checkpoint, &eval_dir).unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    assert_eq!(reports.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["model", "ha"]);
    assert!(reports.iter().all(|r| r.mae.is_some_and(f64::is_finite)));
    assert!(eval_dir.join("report.csv").exists() && eval_dir.join("report.json").exists());

    let mut other = run.clone();
    other.train.lr *= 2.0;
    let (_, warnings) = cmd_evaluate(&other, &t.checkpoint, &eval_dir).unwrap();
    assert_eq!(warnings.len(), 1, "{warnings:?}");

    let pred_dir = dir.path().join("pred");
    let preds = cmd_predict(&run, &t.checkpoint, 3, &pred_dir).unwrap();
    let text = fs::read_to_string(pred_dir.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("cell,row,col,step,yhat"));
    assert_eq!(lines.count(), 16 * 3);
    assert!(preds.yhat().iter().all(|v| *v >= 0.0 && v.is_finite()));
}

#[test]
fn sweep_writes_one_row_per_cell_plus_medians() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = small_run(dir.path());
    run.train.head_epochs = 1;
    let rows = cmd_sweep(&run, dir.path()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| !r.failed()));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda,seed,mae,rfg,ifg,sr,status");
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert_eq!(lines.iter().filter(|l| l.contains(",median,")).count(), 2);
}

#[test]
fn sweep_table_for_five_seeds_and_four_lambdas() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for lambda in [0.0, 0.1, 0.3, 0.6] {
        for seed in 0..5 {
            rows.push(SweepRow {
                variant: Variant::Both,
                lambda,
                seed,
                mae: Some(1.0 + seed as f64),
                rfg: Some(10.0 - lambda),
                ifg: Some(2.0),
                sr: Some(0.1),
                error: (seed == 4 && lambda == 0.3).then(|| "non-finite loss".to_string()),
            });
        }
    }
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&rows, &path).unwrap();
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let records: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 24);
    let medians: Vec<&csv::StringRecord> = records.iter().filter(|r| &r[1] == "median").collect();
    assert_eq!(medians.len(), 4);
    let failed_lambda = medians.iter().find(|r| &r[0] == "0.3").unwrap();
    assert_eq!(&failed_lambda[6], "n=4");
    assert_eq!(&failed_lambda[2], "2.5");
    assert_eq!(records.iter().filter(|r| &r[6] == "failed").count(), 1);
}
