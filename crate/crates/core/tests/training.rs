use std::path::Path;

use hrgnn_core::checkpoint::Checkpoint;
use hrgnn_core::config::RunConfig;
use hrgnn_core::experiment::{multi_seed_run, prepare, run_seed};
use hrgnn_core::Error;

fn config(name: &str) -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn default_config_file_matches_built_in_defaults() {
    assert_eq!(config("default.json"), RunConfig::default());
}

#[test]
fn shipped_configs_validate() {
    for name in ["default.json", "smoke.json", "ablation-rqa.json", "sweep-example.json"] {
        config(name).validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let run = config("smoke.json");
    let data = prepare(&run.data).unwrap();
    let (ck_a, report_a) = run_seed(&run, &data, 3).unwrap();
    let (ck_b, report_b) = run_seed(&run, &data, 3).unwrap();
    assert_eq!(report_a, report_b);
    let bytes = ck_a.to_bytes();
    assert_eq!(bytes, ck_b.to_bytes());

    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(restored.to_bytes(), bytes);
    assert_eq!(
        restored.model.predict(&data.test).unwrap(),
        ck_a.model.predict(&data.test).unwrap()
    );
    restored.ensure_compatible(&run.model_config(), &run.data.text).unwrap();

    let mut other = run.model_config();
    other.node_dim += 1;
    assert!(matches!(
        restored.ensure_compatible(&other, &run.data.text),
        Err(Error::CheckpointMismatch(_))
    ));
    let mut ablated = run.model_config();
    ablated.ablation.use_rgat = false;
    assert!(restored.ensure_compatible(&ablated, &run.data.text).is_err());

    let mut corrupt = bytes.clone();
    corrupt.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
}

#[test]
fn different_seeds_give_different_models() {
    let run = config("smoke.json");
    let data = prepare(&run.data).unwrap();
    let (a, _) = run_seed(&run, &data, 1).unwrap();
    let (b, _) = run_seed(&run, &data, 2).unwrap();
    assert_ne!(a.to_bytes(), b.to_bytes());
}

#[test]
fn multi_seed_report_aggregates_every_seed() {
    let run = config("smoke.json");
    let data = prepare(&run.data).unwrap();
    let report = multi_seed_run(&run, &data, &[1, 2]).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.completed, 2);
    let accs: Vec<f64> = report.runs.iter().map(|r| r.report.as_ref().unwrap().accuracy).collect();
    assert!((report.mean.accuracy - (accs[0] + accs[1]) / 2.0).abs() < 1e-12);
    assert!(multi_seed_run(&run, &data, &[]).is_err());
}
