use std::collections::BTreeSet;
use std::path::Path;

use minchange::eval::scaling::{scaling_curve, scaling_run};
use minchange::manifest::{from_str, load_manifest, save_manifest, to_string};
use minchange::model::{AttributeCategory, Manifest};
use minchange::pipeline::{write_toy_dataset, Pipeline, PipelineConfig};
use minchange::train::encoder::ToyEncoder;
use minchange::train::{load_train_data, train_on, DataRegime, FeasibilityRegime, Regime, TrainConfig, TrainData};
use minchange::Error;

fn run_toy(root: &Path) -> Manifest {
    write_toy_dataset(root, "manifest.jsonl", "pets", &["Abyssinian", "Bengal"], 3, 1, 40, 9).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.prompts.auto_accept = true;
    cfg.prompts.per_group = 4;
    cfg.generation.k = 2;
    cfg.generation.categories = vec![AttributeCategory::Background];
    cfg.generation.working_long_side = 32;
    let p = Pipeline::new(cfg, root).unwrap();
    assert!(p.run_all().unwrap().iter().all(|r| r.ok()));
    p.load_manifest().unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { total_iterations: 12, batch_size: 4, lr: 1e-2, holdout_fraction: 0.0, augmentations: vec![], ..Default::default() }
}

#[test]
fn manifest_survives_text_and_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_toy(dir.path());
    assert_eq!(from_str(&to_string(&m).unwrap()).unwrap(), m);
    let copy = dir.path().join("copy.jsonl");
    save_manifest(&m, &copy).unwrap();
    assert_eq!(load_manifest(&copy).unwrap(), m);
}

#[test]
fn ratio_one_point_equals_direct_mixed_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_toy(dir.path());
    let enc = ToyEncoder::default();
    let regime = Regime::new(DataRegime::Mixed, FeasibilityRegime::Mix);
    let mut seen: Vec<TrainData> = Vec::new();
    let curves = scaling_run(&m, dir.path(), &[1], 5, |_, _, _, d| {
        seen.push(d.clone());
        Ok(minchange::train::evaluate(&enc, Some(&train_on(d, regime, &enc, &small_cfg(), "h")?.checkpoint.adapters), &d.real, &d.class_names)?.accuracy)
    })
    .unwrap();
    assert_eq!(curves.len(), 2);
    for (curve, data) in curves.iter().zip(&seen) {
        let p = curve.points[0];
        assert_eq!(p.n_syn, data.real.len());
        let direct = train_on(data, regime, &enc, &small_cfg(), "h").unwrap();
        let acc = minchange::train::evaluate(&enc, Some(&direct.checkpoint.adapters), &data.real, &data.class_names).unwrap().accuracy;
        assert_eq!(acc, p.accuracy);
    }
}

#[test]
fn larger_ratios_contain_smaller_subsamples() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_toy(dir.path());
    let data = load_train_data(&m, dir.path(), Regime::new(DataRegime::Mixed, FeasibilityRegime::Mix)).unwrap();
    let real = &data.real[..2];
    let mut sets: Vec<BTreeSet<String>> = Vec::new();
    scaling_curve(real, &data.syn, &data.class_names, &[1, 2, 3], 8, |_, d| {
        sets.push(d.syn.iter().map(|e| e.id.clone()).collect());
        Ok(0.0)
    })
    .unwrap();
    assert_eq!(sets.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![2, 4, 6]);
    assert!(sets[0].is_subset(&sets[1]) && sets[1].is_subset(&sets[2]));

    let err = scaling_curve(real, &data.syn[..3], &data.class_names, &[2], 8, |_, _| Ok(0.0)).unwrap_err();
    assert!(matches!(err, Error::InsufficientSynthetic { ratio: 2, needed: 4, available: 3 }));
}
