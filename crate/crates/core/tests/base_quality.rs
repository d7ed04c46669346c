use std::path::PathBuf;

use cat_core::diffusion::ScheduleConfig;
use cat_core::harness::{
    generate, open_experiment, pretrain_base, DatasetKind, Experiment, ExperimentConfig, PretrainConfig,
    SyntheticDataset,
};
use cat_core::model::NULL_TOKEN;
use cat_core::{rng, Error};

/// Same directory and config as the acceptance suite, so whichever target
/// runs first pretrains and the other reuses the checkpoints.
fn shared_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::shapes16();
    cfg.output_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_base");
    cfg
}

fn shared_experiment() -> Experiment {
    let config = shared_config();
    match open_experiment(config.clone()) {
        Err(Error::Config(_)) => {
            std::fs::remove_dir_all(&config.output_dir).unwrap();
            open_experiment(config).unwrap()
        }
        other => other.unwrap(),
    }
}

#[test]
fn glyph_base_follows_class_and_null_prompts() {
    let exp = shared_experiment();
    let n_classes = exp.dataset.n_classes();
    let n = 200;
    let seeds: Vec<u64> = (0..n as u64).map(|i| 10_000 + i).collect();

    let tokens: Vec<usize> = (0..n).map(|i| 1 + i % n_classes).collect();
    let conditioned = generate(&exp.base, None, &exp.base.conditions, &tokens, &seeds).unwrap();
    let hits = conditioned.iter().zip(&tokens).filter(|(x, &t)| exp.encoder.classify(x).unwrap() == t - 1).count();
    assert!(hits * 5 >= n * 4, "class-conditional accuracy {hits}/{n}");

    let unconditioned = generate(&exp.base, None, &exp.base.conditions, &vec![NULL_TOKEN; n], &seeds).unwrap();
    let mut counts = vec![0; exp.encoder.n_classes()];
    for x in &unconditioned {
        counts[exp.encoder.classify(x).unwrap()] += 1;
    }
    assert!(counts[..n_classes].iter().all(|&c| c * 10 >= n), "null-token class counts {counts:?}");
}

#[test]
fn standard_normal_target_is_matched() {
    let mut r = rng::seeded(11);
    let samples: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng::normal(&mut r)]).collect();
    let dataset = SyntheticDataset {
        kind: DatasetKind::Gauss2d,
        seed: 11,
        class_names: vec!["normal".into()],
        labels: vec![0; samples.len()],
        samples,
        identities: vec![],
    };
    let config = PretrainConfig {
        steps: 4000,
        hidden: vec![32, 32],
        schedule: ScheduleConfig::default(),
        ..PretrainConfig::default()
    };
    let base = pretrain_base(&dataset, &config).unwrap();
    assert_eq!(base.params.config.data_dim, 1);

    let n = 10_000;
    let seeds: Vec<u64> = (0..n as u64).collect();
    let xs: Vec<f64> =
        generate(&base, None, &base.conditions, &vec![1; n], &seeds).unwrap().into_iter().flatten().collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}
