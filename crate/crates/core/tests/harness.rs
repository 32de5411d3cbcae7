mod common;

use common::{channel, scenario, tiny_dims};
use proptest::prelude::*;
use rispls::baselines::OracleConfig;
use rispls::channel::ScenarioConfig;
use rispls::harness::{
    ablate, ablation_rows, default_power_grid, default_scale_grid, label, parse_head, power_rows, scale_rows,
    sweep_power, sweep_scale, write_csv, AblationData, DatasetError, DatasetFile, ABLATION_COLUMNS, POWER_COLUMNS,
    SCALE_COLUMNS,
};
use rispls::hetgraph::InputScaling;
use rispls::model::{HeadKind, HgnnModel, ModelFlags};
use rispls::training::{fmt_f64, TrainConfig, EVAL_COLUMNS};

fn quick_oracle() -> OracleConfig {
    OracleConfig {
        restarts: 2,
        steps: 150,
        decay_every: 50,
        ..OracleConfig::default()
    }
}

fn tiny_model(cfg: &ScenarioConfig, head: HeadKind) -> HgnnModel {
    HgnnModel::new(cfg.n_t, tiny_dims(), head, ModelFlags::default(), InputScaling::from_scenario(cfg), 1).unwrap()
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn generated_dataset_is_reproducible_and_round_trips() {
    let cfg = scenario(4, 4, 2, 2, 7);
    let a = DatasetFile::generate(&cfg, 1000).unwrap();
    let b = DatasetFile::generate(&cfg, 1000).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.samples.len(), 1000);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    a.write(&path).unwrap();
    let back = DatasetFile::read(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(std::fs::read(&path).unwrap(), a.to_bytes());
    assert_eq!(back.samples[123], channel(&cfg, 123));
}

#[test]
fn labels_survive_the_appendix() {
    let cfg = scenario(4, 3, 2, 1, 8);
    let mut data = DatasetFile::generate(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    assert!(data.labels(&path).is_err());
    label(&mut data, &quick_oracle()).unwrap();
    data.write(&path).unwrap();
    let back = DatasetFile::read(&path).unwrap();
    assert_eq!(back.oracle, data.oracle);
    assert!(back.labels(&path).unwrap().iter().all(|v| *v > 0.0));
}

#[test]
fn unreadable_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    assert!(matches!(DatasetFile::read(&missing), Err(DatasetError::Io { .. })));
    let cfg = scenario(4, 4, 2, 2, 9);
    let mut bytes = DatasetFile::generate(&cfg, 3).unwrap().to_bytes();
    bytes[7] = 99;
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(DatasetFile::read(&path), Err(DatasetError::Format { .. })));
    let unwritable = dir.path().join("no/such/dir/out.csv");
    assert!(write_csv(&unwritable, &["a"], &[]).is_err());
}

#[test]
fn empty_report_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    write_csv(&path, &EVAL_COLUMNS, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "sample_id,see,oracle_see,ratio,feasible\n");
}

proptest! {
    #[test]
    fn csv_floats_round_trip_exactly(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        let rows: Vec<Vec<String>> = values.iter().map(|v| vec![fmt_f64(*v)]).collect();
        write_csv(&path, &["v"], &rows).unwrap();
        let (_, back) = read_csv(&path);
        for (v, r) in values.iter().zip(&back) {
            prop_assert_eq!(r[0].parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}

#[test]
fn power_sweep_covers_the_grid_reproducibly() {
    let cfg = scenario(4, 4, 2, 2, 10);
    let model = tiny_model(&cfg, HeadKind::ModelBased);
    let samples: Vec<_> = (0..4).map(|s| channel(&cfg, s)).collect();
    let grid = default_power_grid();
    assert_eq!(grid, (0..12).map(|i| 3.0 * i as f64).collect::<Vec<_>>());
    let a = sweep_power(&model, &samples, cfg.p_c_watt, &grid, &quick_oracle()).unwrap();
    let b = sweep_power(&model, &samples, cfg.p_c_watt, &grid, &quick_oracle()).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_csv(&path, &POWER_COLUMNS, &power_rows(&a)).unwrap();
    let (header, rows) = read_csv(&path);
    assert_eq!(header, POWER_COLUMNS);
    assert_eq!(rows.len(), 12);
    assert!(sweep_power(&model, &[], cfg.p_c_watt, &grid, &quick_oracle()).is_err());
}

#[test]
fn scale_sweep_reuses_one_model() {
    let cfg = scenario(4, 4, 2, 2, 11);
    let model = tiny_model(&cfg, HeadKind::ModelBased);
    let snapshot = |m: &HgnnModel| -> Vec<(String, Vec<f64>)> {
        m.params.iter().map(|(n, p)| (n.to_string(), p.value.to_vec())).collect()
    };
    let before = snapshot(&model);
    let grid = default_scale_grid();
    assert_eq!(grid.len(), 7);
    let points = sweep_scale(&model, &cfg, &grid, 3, &quick_oracle()).unwrap();
    assert_eq!(snapshot(&model), before);
    assert_eq!(points.len(), 7);
    for (p, &(l, k, m)) in points.iter().zip(&grid) {
        assert_eq!((p.l, p.k, p.m), (l, k, m));
        assert_eq!(p.violations, 0);
        assert_eq!(p.param_count, points[0].param_count);
        assert!(p.mean_see.is_finite());
    }
    assert_eq!(scale_rows(&points)[0].len(), SCALE_COLUMNS.len());
}

#[test]
fn ablation_runs_all_four_settings() {
    let cfg = scenario(4, 4, 2, 2, 12);
    let chs: Vec<_> = (0..20).map(|s| channel(&cfg, s)).collect();
    let labels = vec![1.0; 4];
    let data = AblationData {
        scenario: &cfg,
        train: &chs[..12],
        val: &chs[12..16],
        test: &chs[16..],
        labels: &labels,
    };
    let base = TrainConfig {
        batch_size: 6,
        epochs: 1,
        head: HeadKind::BeamDirect,
        dims: tiny_dims(),
        ..TrainConfig::default()
    };
    let out = ablate(&base, &data).unwrap();
    let flags: Vec<_> = out.iter().map(|(r, _)| (r.residual, r.two_stage)).collect();
    assert_eq!(flags, vec![(true, true), (false, true), (true, false), (false, false)]);
    assert!(out.iter().all(|(r, m)| r.violations == 0 && m.flags.residual == r.residual));
    let rows = ablation_rows(&out.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>());
    assert!(rows.iter().all(|r| r.len() == ABLATION_COLUMNS.len()));
    let short = AblationData { labels: &labels[..2], ..data };
    assert!(ablate(&base, &short).is_err());
}

#[test]
fn heads_parse_from_flags() {
    assert_eq!(parse_head("model-based").unwrap(), HeadKind::ModelBased);
    assert_eq!(parse_head("beam-direct").unwrap(), HeadKind::BeamDirect);
    assert!(parse_head("mlp").is_err());
}
