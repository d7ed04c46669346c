use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::data::GLYPH_SIDE;
use super::experiment::{median, Experiment, MultiConceptResult, RunResult, RunSpec};
use crate::error::{Error, Result};
use crate::metrics::{FeatureEncoder, MetricReport};
use crate::model::{AdapterBundle, BaseModel};
use crate::training::{Mode, TrainLog};

/// Binary PGM (P5) with 8-bit gray levels.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_gray(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Lays glyphs out left to right with a one-pixel mid-gray gutter.
pub fn glyph_grid(samples: &[Vec<f64>]) -> (usize, usize, Vec<u8>) {
    let n = samples.len().max(1);
    let width = n * (GLYPH_SIDE + 1) - 1;
    let mut px = vec![128u8; width * GLYPH_SIDE];
    for (k, s) in samples.iter().enumerate() {
        for y in 0..GLYPH_SIDE {
            for x in 0..GLYPH_SIDE {
                px[y * width + k * (GLYPH_SIDE + 1) + x] = to_gray(s[y * GLYPH_SIDE + x]);
            }
        }
    }
    (width, GLYPH_SIDE, px)
}

/// 2-D points as a 64×64 occupancy image over `[-4, 4]²`.
pub fn scatter_grid(samples: &[Vec<f64>]) -> (usize, usize, Vec<u8>) {
    const SIDE: usize = 64;
    let mut px = vec![0u8; SIDE * SIDE];
    for s in samples {
        let cell = |v: f64| ((v + 4.0) / 8.0 * SIDE as f64).floor();
        let (cx, cy) = (cell(s[0]), cell(-s[1]));
        if (0.0..SIDE as f64).contains(&cx) && (0.0..SIDE as f64).contains(&cy) {
            px[cy as usize * SIDE + cx as usize] = 255;
        }
    }
    (SIDE, SIDE, px)
}

pub fn write_sample_grid(path: &Path, samples: &[Vec<f64>]) -> Result<()> {
    let (w, h, px) = match samples.first().map(Vec::len) {
        Some(d) if d == GLYPH_SIDE * GLYPH_SIDE => glyph_grid(samples),
        _ => scatter_grid(samples),
    };
    write_pgm(path, w, h, &px)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(reports: &[&MetricReport]) -> String {
    let mut out = String::from(MetricReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Artifacts of one run: the adapter bundle, its training log and the two
/// sample grids. Each run writes only files prefixed with its own id.
pub fn write_run_artifacts(dir: &Path, run: &RunResult) -> Result<()> {
    let id = run.spec.run_id();
    run.bundle.save(&dir.join(format!("{id}.adapter")))?;
    write_text(&dir.join(format!("{id}_trainlog.csv")), &run.log.to_csv())?;
    write_sample_grid(&dir.join(format!("{id}_with_token.pgm")), &run.with_token)?;
    write_sample_grid(&dir.join(format!("{id}_without_token.pgm")), &run.without_token)
}

/// Outcome of a batch of runs: successes in spec order and the failures.
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub results: Vec<RunResult>,
    pub failures: Vec<(String, Error)>,
}

impl BatchOutcome {
    pub fn reports(&self) -> Vec<&MetricReport> {
        self.results.iter().map(|r| &r.report).collect()
    }

    pub fn get(&self, mode: Mode, alpha: f64, seed: u64) -> Option<&RunResult> {
        self.results.iter().find(|r| r.spec.mode == mode && r.spec.alpha == alpha && r.spec.seed == seed)
    }
}

/// Runs `specs`, writes per-run artifacts and `metrics.csv` into `dir`, and
/// records failures in `failures.csv` without stopping the batch.
pub fn run_batch(exp: &Experiment, specs: &[RunSpec], dir: &Path, csv_name: &str) -> Result<BatchOutcome> {
    create_dir(dir)?;
    let mut outcome = BatchOutcome::default();
    for (spec, res) in specs.iter().zip(exp.run_all(specs)) {
        match res.and_then(|r| write_run_artifacts(dir, &r).map(|_| r)) {
            Ok(r) => outcome.results.push(r),
            Err(e) => outcome.failures.push((spec.run_id(), e)),
        }
    }
    write_text(&dir.join(csv_name), &metrics_csv(&outcome.reports()))?;
    write_failures(dir, &outcome.failures)?;
    Ok(outcome)
}

fn write_failures(dir: &Path, failures: &[(String, Error)]) -> Result<()> {
    let failure_path = dir.join("failures.csv");
    if failures.is_empty() {
        if failure_path.exists() {
            fs::remove_file(&failure_path).map_err(|e| Error::io(&failure_path, e))?;
        }
        return Ok(());
    }
    let mut text = String::from("run_id,error\n");
    for (id, e) in failures {
        let _ = writeln!(text, "{id},\"{}\"", e.to_string().replace('"', "'"));
    }
    write_text(&failure_path, &text)
}

/// Fine-tunes and evaluates every configured (mode, seed) pair.
pub fn run_experiment(exp: &Experiment) -> Result<BatchOutcome> {
    run_batch(exp, &exp.default_runs(), &exp.config.output_dir, "metrics.csv")
}

/// Median scores per α over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub prompt_score: f64,
    pub identity_score: f64,
    pub kps: f64,
}

pub fn sweep_table(outcome: &BatchOutcome, alphas: &[f64]) -> Vec<SweepRow> {
    alphas
        .iter()
        .map(|&alpha| {
            let rs: Vec<&MetricReport> =
                outcome.results.iter().map(|r| &r.report).filter(|r| r.alpha == alpha).collect();
            let col = |f: fn(&MetricReport) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                alpha,
                prompt_score: col(MetricReport::prompt_score),
                identity_score: col(MetricReport::identity_score),
                kps: col(MetricReport::kps),
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,median_prompt_score,median_identity_score,median_kps\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.alpha, r.prompt_score, r.identity_score, r.kps);
    }
    out
}

/// The α sweep: one cat run per (α, seed), `metrics.csv` plus
/// `sweep_summary.csv` with per-α medians.
pub fn sweep_alpha(exp: &Experiment) -> Result<(BatchOutcome, Vec<SweepRow>)> {
    let alphas = &exp.config.experiment.alphas;
    if !alphas.contains(&0.0) {
        return Err(Error::Config("sweep alphas must include 0 as the baseline".into()));
    }
    let dir = &exp.config.output_dir;
    let outcome = run_batch(exp, &exp.sweep_runs(), dir, "metrics.csv")?;
    let rows = sweep_table(&outcome, alphas);
    write_text(&dir.join("sweep_summary.csv"), &sweep_csv(&rows))?;
    Ok((outcome, rows))
}

pub fn multiconcept_csv(results: &[MultiConceptResult]) -> String {
    let mut out = String::from("run_id,mode,seed,concept,own_identity,max_cross_identity,margin,kps\n");
    for r in results {
        for c in &r.concepts {
            let cross = c.cross_identity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.run_id,
                r.mode,
                r.seed,
                c.concept,
                c.own_identity,
                cross,
                c.margin(),
                r.kps
            );
        }
    }
    out
}

/// Multi-concept runs for cat and plain lora over every seed, written to
/// `multiconcept.csv`. Failed runs are reported and skipped.
pub fn run_multiconcept(exp: &Experiment) -> Result<(Vec<MultiConceptResult>, Vec<(String, Error)>)> {
    let dir: PathBuf = exp.config.output_dir.clone();
    create_dir(&dir)?;
    let k = exp.config.experiment.concepts;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &exp.config.experiment.seeds {
        for (mode, alpha) in [(Mode::Cat, exp.config.train.alpha), (Mode::Lora, 0.0)] {
            match exp.multiconcept(mode, alpha, seed, k) {
                Ok(r) => {
                    write_text(&dir.join(format!("{}_trainlog.csv", r.run_id)), &r.log.to_csv())?;
                    results.push(r);
                }
                Err(e) => failures.push((format!("multi{k}_{mode}_s{seed}"), e)),
            }
        }
    }
    write_text(&dir.join("multiconcept.csv"), &multiconcept_csv(&results))?;
    Ok((results, failures))
}

pub const BASE_CKPT: &str = "base.ckpt";
pub const ENCODER_CKPT: &str = "encoder.ckpt";
const PRETRAIN_STAMP: &str = "pretrain.toml";

/// The stage-one configuration a base/encoder pair was produced from.
fn pretrain_stamp(config: &ExperimentConfig) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Stamp<'a> {
        dataset: &'a super::config::DatasetSection,
        pretrain: &'a super::pretrain::PretrainConfig,
        encoder: &'a crate::metrics::EncoderConfig,
    }
    toml::to_string(&Stamp { dataset: &config.dataset, pretrain: &config.pretrain, encoder: &config.encoder })
        .map_err(|e| Error::Config(e.to_string()))
}

/// Pretrains the base and encoder and writes both checkpoints to the
/// output directory.
pub fn pretrain_to_dir(config: ExperimentConfig) -> Result<Experiment> {
    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    let stamp = pretrain_stamp(&config)?;
    let exp = Experiment::prepare(config)?;
    exp.base.save(&dir.join(BASE_CKPT))?;
    exp.encoder.save(&dir.join(ENCODER_CKPT))?;
    write_text(&dir.join(PRETRAIN_STAMP), &stamp)?;
    Ok(exp)
}

/// Loads the checkpoints in the output directory, or pretrains them when
/// absent. Checkpoints produced under a different dataset, pretrain or
/// encoder section are rejected rather than silently reused.
pub fn open_experiment(config: ExperimentConfig) -> Result<Experiment> {
    let dir = config.output_dir.clone();
    let (base_path, enc_path, stamp_path) = (dir.join(BASE_CKPT), dir.join(ENCODER_CKPT), dir.join(PRETRAIN_STAMP));
    if !(base_path.exists() && enc_path.exists()) {
        return pretrain_to_dir(config);
    }
    let stamp = fs::read_to_string(&stamp_path).map_err(|e| Error::io(&stamp_path, e))?;
    if stamp != pretrain_stamp(&config)? {
        return Err(Error::Config(format!(
            "checkpoints in {} were produced by a different configuration; rerun pretrain or pick another output directory",
            dir.display()
        )));
    }
    let base = BaseModel::load(&base_path)?;
    let encoder = FeatureEncoder::load(&enc_path)?;
    Experiment::from_parts(config, base, encoder)
}

/// Fine-tunes every spec and writes the adapter and training log of each,
/// without evaluating.
pub fn finetune_batch(exp: &Experiment, specs: &[RunSpec]) -> Result<Vec<(String, Error)>> {
    let dir = &exp.config.output_dir;
    create_dir(dir)?;
    let mut failures = Vec::new();
    for spec in specs {
        let id = spec.run_id();
        let res = exp.fit(spec).and_then(|out| {
            out.bundle.save(&dir.join(format!("{id}.adapter")))?;
            write_text(&dir.join(format!("{id}_trainlog.csv")), &out.log.to_csv())
        });
        if let Err(e) = res {
            failures.push((id, e));
        }
    }
    Ok(failures)
}

/// Scores adapters previously written by [`finetune_batch`]; specs whose
/// adapter is missing are trained first.
pub fn evaluate_batch(exp: &Experiment, specs: &[RunSpec]) -> Result<BatchOutcome> {
    let dir = exp.config.output_dir.clone();
    create_dir(&dir)?;
    let mut outcome = BatchOutcome::default();
    for spec in specs {
        let id = spec.run_id();
        let res = (|| {
            let adapter = dir.join(format!("{id}.adapter"));
            let run = if adapter.exists() {
                let bundle = AdapterBundle::load(&adapter)?;
                let log_path = dir.join(format!("{id}_trainlog.csv"));
                let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
                exp.score(spec, bundle, TrainLog::from_csv(&text, spec.seed)?)?
            } else {
                exp.run(spec)?
            };
            write_run_artifacts(&dir, &run)?;
            Ok(run)
        })();
        match res {
            Ok(r) => outcome.results.push(r),
            Err(e) => outcome.failures.push((id, e)),
        }
    }
    write_text(&dir.join("metrics.csv"), &metrics_csv(&outcome.reports()))?;
    write_failures(&dir, &outcome.failures)?;
    Ok(outcome)
}
