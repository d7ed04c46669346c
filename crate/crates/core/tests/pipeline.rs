use std::fs;
use std::path::Path;

use cat_core::harness::report::{write_pgm, BASE_CKPT};
use cat_core::harness::{
    evaluate_batch, finetune_batch, open_experiment, pretrain_base, pretrain_to_dir, run_batch, run_experiment,
    run_multiconcept, sweep_alpha, DatasetKind, Experiment, ExperimentConfig, PretrainConfig, RunSpec, WithoutToken,
};
use cat_core::model::BaseModel;
use cat_core::training::Mode;
use cat_core::Error;

const TINY: &str = r#"
[dataset]
kind = "gauss2d"
seed = 3
per_class = 200
identities = 2
identity_pool = 200

[pretrain]
steps = 300
hidden = [32, 32]

[pretrain.schedule]
steps = 50

[encoder]
steps = 600
input_noise = 0.05

[train]
steps = 30
rank = 2
lr = 0.001

[experiment]
seeds = [1, 2]
alphas = [0.0, 0.5]
concepts = 2
concept_steps = 30
eval_samples = 6
sweep_steps = 30
"#;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn tiny_experiment(dir: &Path) -> Experiment {
    pretrain_to_dir(tiny(dir)).unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    assert_eq!(cfg.dataset.kind, DatasetKind::Gauss2d);
    assert_eq!(cfg.pretrain.schedule.steps, 50);
    assert_eq!(cfg.experiment.without_token, WithoutToken::Null);
    let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
}

#[test]
fn shipped_config_matches_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shapes16.toml");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::shapes16());
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "[train]\nlearning_rate = 0.1\n",
        "[extra]\nx = 1\n",
        "steps = 3\n",
        "[pretrain.schedule]\nsteps = 5\nbeta = 0.1\n",
    ] {
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn invalid_sections_are_rejected() {
    for text in [
        "[experiment]\nseeds = []\n",
        "[experiment]\nalphas = [0.0, -0.5]\n",
        "[experiment]\nidentity = 7\n",
        "[train]\nalpha = -1.0\n",
        "[dataset]\nkind = \"spirals\"\n",
    ] {
        assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
    }
}

#[test]
fn run_ids_name_every_varied_setting() {
    let spec = RunSpec { mode: Mode::Cat, alpha: 0.5, seed: 2, steps: 600, lr: 1e-4 };
    assert_eq!(spec.run_id(), "cat_a0.5_s2_n600_lr0.0001");
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = tiny(Path::new("unused"));
    let data = cat_core::harness::gen_dataset_with(cfg.dataset.kind, cfg.dataset.seed, &cfg.dataset.spec());
    let pc = PretrainConfig { steps: 50, ..cfg.pretrain.clone() };
    let a = pretrain_base(&data, &pc).unwrap();
    let b = pretrain_base(&data, &pc).unwrap();
    assert_eq!(a.to_array_file().to_bytes().unwrap(), b.to_array_file().to_bytes().unwrap());
    assert!(a.params.frozen);
}

#[test]
fn pgm_header_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    write_pgm(&path, 3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(bytes.len(), "P5\n3 2\n255\n".len() + 6);
    assert!(write_pgm(&path, 3, 3, &[0; 6]).is_err());
}

#[test]
fn experiment_rows_artifacts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let outcome = run_experiment(&exp).unwrap();
    assert!(outcome.failures.is_empty());
    for seed in [1, 2] {
        for mode in [Mode::Lora, Mode::Cat] {
            let alpha = if mode == Mode::Cat { exp.config.train.alpha } else { 0.0 };
            let run = outcome.get(mode, alpha, seed).expect("row for every (mode, seed)");
            let id = run.spec.run_id();
            for suffix in [".adapter", "_trainlog.csv", "_with_token.pgm", "_without_token.pgm"] {
                assert!(dir.path().join(format!("{id}{suffix}")).exists(), "{id}{suffix}");
            }
        }
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "run_id,mode,alpha,seed,steps,prompt_score,identity_score,kps");
    assert_eq!(csv.lines().count(), 5);

    // rerun from the cached checkpoints reproduces the CSV exactly
    let reopened = open_experiment(tiny(dir.path())).unwrap();
    run_experiment(&reopened).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), csv);
}

#[test]
fn finetune_then_evaluate_matches_one_shot() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let specs = exp.default_runs();
    assert!(finetune_batch(&exp, &specs).unwrap().is_empty());
    let staged = evaluate_batch(&exp, &specs).unwrap();
    let staged_csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();

    let other = tempfile::tempdir().unwrap();
    let direct = run_experiment(&Experiment { config: tiny(other.path()), ..exp.clone() }).unwrap();
    assert_eq!(staged.reports(), direct.reports());
    assert_eq!(staged_csv, fs::read_to_string(other.path().join("metrics.csv")).unwrap());
}

#[test]
fn failed_run_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let good = RunSpec { mode: Mode::Lora, alpha: 0.0, seed: 1, steps: 20, lr: 1e-3 };
    let bad = RunSpec { lr: f64::NAN, ..good.clone() };
    let outcome = run_batch(&exp, &[bad.clone(), good.clone()], dir.path(), "metrics.csv").unwrap();
    assert_eq!(outcome.results.len(), 1);
    assert_eq!(outcome.failures[0].0, bad.run_id());
    let failures = fs::read_to_string(dir.path().join("failures.csv")).unwrap();
    assert!(failures.contains(&bad.run_id()));
    assert!(dir.path().join(format!("{}.adapter", good.run_id())).exists());
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap().lines().count(), 2);
}

#[test]
fn sweep_baseline_is_plain_lora() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let (outcome, rows) = sweep_alpha(&exp).unwrap();
    assert_eq!(rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![0.0, 0.5]);
    assert!(dir.path().join("sweep_summary.csv").exists());
    for seed in [1, 2] {
        let cat0 = outcome.get(Mode::Cat, 0.0, seed).unwrap();
        let lora = exp.fit(&RunSpec { mode: Mode::Lora, ..cat0.spec.clone() }).unwrap();
        assert!(cat0.log.same_trajectory(&lora.log));
        assert_eq!(cat0.bundle.adapter, lora.bundle.adapter);
    }

    let mut no_zero = exp.clone();
    no_zero.config.experiment.alphas = vec![0.5];
    assert!(matches!(sweep_alpha(&no_zero), Err(Error::Config(_))));
}

#[test]
fn multiconcept_reports_every_concept() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let (results, failures) = run_multiconcept(&exp).unwrap();
    assert!(failures.is_empty());
    assert_eq!(results.len(), 4);
    for r in &results {
        assert_eq!(r.concepts.len(), 2);
        assert!(r.concepts.iter().all(|c| c.cross_identity.len() == 1));
    }
    let csv = fs::read_to_string(dir.path().join("multiconcept.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    // one concept trains exactly the single-concept adapter
    let single = exp.multiconcept(Mode::Cat, 0.5, 1, 1).unwrap();
    let direct = exp.fit(&RunSpec { mode: Mode::Cat, alpha: 0.5, seed: 1, steps: 30, lr: 1e-3 }).unwrap();
    assert!(single.log.same_trajectory(&direct.log));
    assert!(exp.multiconcept(Mode::Cat, 0.5, 1, 3).is_err());
}

#[test]
fn stale_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    tiny_experiment(dir.path());
    let mut changed = tiny(dir.path());
    changed.pretrain.steps += 1;
    assert!(matches!(open_experiment(changed), Err(Error::Config(_))));
    let base = BaseModel::load(&dir.path().join(BASE_CKPT)).unwrap();
    assert_eq!(base.params.config.data_dim, 2);
}
