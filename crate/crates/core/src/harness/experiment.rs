use rand::Rng as _;

use super::config::{ExperimentConfig, WithoutToken};
use super::data::{gen_dataset_with, IdentityConcept, SyntheticDataset};
use super::pretrain::{generate, pretrain_base};
use crate::error::{Error, Result};
use crate::metrics::{
    clamp_similarity, harmonic_mean, identity_score_features, kps_features, prompt_score_features, FeatureEncoder,
    MetricReport,
};
use crate::model::{AdapterBundle, BaseModel, ConditionTable, TokenKind, NULL_TOKEN};
use crate::rng;
use crate::training::{register_identity, train_adapter, IdentityDataset, Mode, TrainConfig, TrainLog, TrainOutput};

/// One fine-tuning run of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub mode: Mode,
    pub alpha: f64,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        format!("{}_a{}_s{}_n{}_lr{}", self.mode, self.alpha, self.seed, self.steps, self.lr)
    }

    pub fn train_config(&self, defaults: &TrainConfig) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            alpha: self.alpha,
            seed: self.seed,
            steps: self.steps,
            lr: self.lr,
            ..defaults.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub report: MetricReport,
    pub log: TrainLog,
    pub bundle: AdapterBundle,
    pub with_token: Vec<Vec<f64>>,
    pub without_token: Vec<Vec<f64>>,
}

/// Per-concept outcome of a multi-concept run.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptScore {
    pub concept: String,
    pub own_identity: f64,
    /// Identity score of this concept's generations against each other
    /// concept's originals, in concept order (own entry omitted).
    pub cross_identity: Vec<f64>,
}

impl ConceptScore {
    pub fn margin(&self) -> f64 {
        let worst = self.cross_identity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.own_identity - worst
    }
}

#[derive(Clone, Debug)]
pub struct MultiConceptResult {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub concepts: Vec<ConceptScore>,
    /// KPS pooled over every concept's with/without pairs.
    pub kps: f64,
    pub log: TrainLog,
}

/// A pretrained base, its dataset and the frozen feature encoder: everything
/// fine-tuning runs share read-only.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: SyntheticDataset,
    pub base: BaseModel,
    pub encoder: FeatureEncoder,
}

/// Trains the feature encoder on base classes plus every configured identity.
pub fn train_encoder(config: &ExperimentConfig, dataset: &SyntheticDataset) -> Result<FeatureEncoder> {
    let (xs, ys) = dataset.encoder_training_set(dataset.identities.len());
    let mut names = dataset.class_names.clone();
    names.extend(dataset.identities.iter().map(|i| i.name.clone()));
    FeatureEncoder::train(&xs, &ys, names, &config.encoder, &mut rng::stream(config.dataset.seed, 77))
}

impl Experiment {
    /// Generates the dataset, pretrains the base and fits the encoder.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = gen_dataset_with(config.dataset.kind, config.dataset.seed, &config.dataset.spec());
        let base = pretrain_base(&dataset, &config.pretrain)?;
        let encoder = train_encoder(&config, &dataset)?;
        Ok(Experiment { config, dataset, base, encoder })
    }

    pub fn from_parts(config: ExperimentConfig, base: BaseModel, encoder: FeatureEncoder) -> Result<Self> {
        config.validate()?;
        let dataset = gen_dataset_with(config.dataset.kind, config.dataset.seed, &config.dataset.spec());
        if base.params.config.data_dim != dataset.data_dim() || encoder.input_dim() != dataset.data_dim() {
            return Err(Error::Config("checkpoint dimensions do not match the configured dataset".into()));
        }
        Ok(Experiment { config, dataset, base, encoder })
    }

    pub fn concept(&self, k: usize) -> Result<&IdentityConcept> {
        self.dataset.identities.get(k).ok_or_else(|| Error::Config(format!("dataset has no identity concept {k}")))
    }

    /// The default runs: every configured mode and seed at the configured
    /// step budget; cat runs use `train.alpha`, the others α = 0.
    pub fn default_runs(&self) -> Vec<RunSpec> {
        let t = &self.config.train;
        let mut runs = Vec::new();
        for &seed in &self.config.experiment.seeds {
            for &mode in &self.config.experiment.modes {
                let alpha = if mode == Mode::Cat { t.alpha } else { 0.0 };
                runs.push(RunSpec { mode, alpha, seed, steps: t.steps, lr: t.lr });
            }
        }
        runs
    }

    /// One cat run per (α, seed) at the sweep step budget.
    pub fn sweep_runs(&self) -> Vec<RunSpec> {
        let t = &self.config.train;
        let e = &self.config.experiment;
        let mut runs = Vec::new();
        for &alpha in &e.alphas {
            for &seed in &e.seeds {
                runs.push(RunSpec { mode: Mode::Cat, alpha, seed, steps: e.sweep_steps, lr: t.lr });
            }
        }
        runs
    }

    /// Registers triggers for `concepts` on a copy of the base. Trigger noise
    /// depends only on the seed, so every mode starts from the same tokens.
    fn with_triggers(&self, concepts: &[usize], seed: u64, noise: f64) -> Result<(BaseModel, IdentityDataset)> {
        let mut base = self.base.clone();
        let mut r = rng::stream(seed, 3);
        let mut parts = Vec::new();
        for &k in concepts {
            let c = self.concept(k)?;
            parts.push(register_identity(&mut base, &c.name, c.nearest_class, c.subset.clone(), noise, &mut r)?);
        }
        Ok((base, IdentityDataset::concat(&parts)?))
    }

    fn eval_seeds(seed: u64, stream: u64, n: usize) -> Vec<u64> {
        let mut r = rng::stream(seed, stream);
        (0..n).map(|_| r.random()).collect()
    }

    fn without_tokens(&self, conditions: &ConditionTable, trigger: usize, n: usize) -> Result<Vec<usize>> {
        let token = match self.config.experiment.without_token {
            WithoutToken::Null => NULL_TOKEN,
            WithoutToken::Class => match conditions.kind(trigger)? {
                TokenKind::Trigger { base_class, .. } => conditions.class_token(*base_class)?,
                _ => return Err(Error::invalid("trigger id does not name a trigger")),
            },
        };
        Ok(vec![token; n])
    }

    /// Paired with/without-token generations of one trigger.
    fn paired_generations(
        &self,
        bundle: &AdapterBundle,
        trigger: usize,
        seed: u64,
        stream: u64,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = self.config.experiment.eval_samples;
        let seeds = Self::eval_seeds(seed, stream, n);
        let other_seeds =
            if self.config.experiment.paired_seeds { seeds.clone() } else { Self::eval_seeds(seed, stream + 1000, n) };
        let adapter = bundle.adapter.as_ref();
        let with = generate(&self.base, adapter, &bundle.conditions, &vec![trigger; n], &seeds)?;
        let without_tokens = self.without_tokens(&bundle.conditions, trigger, n)?;
        let without = generate(&self.base, adapter, &bundle.conditions, &without_tokens, &other_seeds)?;
        Ok((with, without))
    }

    /// Fine-tunes one adapter on the configured identity without scoring it.
    pub fn fit(&self, spec: &RunSpec) -> Result<TrainOutput> {
        let k = self.config.experiment.identity;
        let (base, identity) = self.with_triggers(&[k], spec.seed, self.config.experiment.trigger_noise)?;
        train_adapter(&base, &spec.train_config(&self.config.train), &identity)
    }

    /// Fine-tunes one adapter and scores it.
    pub fn run(&self, spec: &RunSpec) -> Result<RunResult> {
        let out = self.fit(spec)?;
        self.score(spec, out.bundle, out.log)
    }

    /// Scores a trained bundle (fresh or loaded from disk) for `spec`.
    pub fn score(&self, spec: &RunSpec, bundle: AdapterBundle, log: TrainLog) -> Result<RunResult> {
        let concept = self.concept(self.config.experiment.identity)?;
        let trigger = bundle
            .conditions
            .trigger_by_name(&concept.name)
            .ok_or_else(|| Error::invalid(format!("bundle has no trigger '{}'", concept.name)))?;
        let n = self.config.experiment.eval_samples;
        let (with, without) = self.paired_generations(&bundle, trigger, spec.seed, 10)?;

        let n_classes = self.dataset.n_classes();
        let prompts: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        let prompt_tokens = prompts.iter().map(|&c| bundle.conditions.class_token(c)).collect::<Result<Vec<_>>>()?;
        let prompt_gens = generate(
            &self.base,
            bundle.adapter.as_ref(),
            &bundle.conditions,
            &prompt_tokens,
            &Self::eval_seeds(spec.seed, 20, n),
        )?;

        let enc = &self.encoder;
        let prompt = prompt_score_features(enc.prototypes(), &prompts, &enc.encode_all(&prompt_gens)?)?;
        let identity = identity_score_features(&enc.encode_all(&concept.subset)?, &enc.encode_all(&with)?)?;
        let kps = kps_features(&enc.encode_all(&with)?, &enc.encode_all(&without)?)?;
        let report = MetricReport {
            run_id: spec.run_id(),
            mode: spec.mode.to_string(),
            alpha: spec.alpha,
            seed: spec.seed,
            steps: spec.steps,
            prompt,
            identity,
            kps,
        };
        Ok(RunResult { spec: spec.clone(), report, log, bundle, with_token: with, without_token: without })
    }

    /// Runs every spec, in parallel up to the configured worker count.
    /// Results keep the order of `specs`; a failed run yields its error
    /// without affecting the others.
    pub fn run_all(&self, specs: &[RunSpec]) -> Vec<Result<RunResult>> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.config.experiment.workers).build();
        match pool {
            Ok(pool) => pool.install(|| specs.par_iter().map(|s| self.run(s)).collect()),
            Err(_) => specs.iter().map(|s| self.run(s)).collect(),
        }
    }

    /// Trains one adapter on the first `k` concepts with interleaved steps.
    /// The run takes `k * experiment.concept_steps` steps, and with `k > 1`
    /// triggers start from `experiment.concept_trigger_noise`.
    pub fn multiconcept(&self, mode: Mode, alpha: f64, seed: u64, k: usize) -> Result<MultiConceptResult> {
        if k == 0 || k > self.dataset.identities.len() {
            return Err(Error::Config(format!(
                "{k} concepts requested, dataset has {}",
                self.dataset.identities.len()
            )));
        }
        let concepts: Vec<usize> = (0..k).collect();
        let e = &self.config.experiment;
        let noise = if k > 1 { e.concept_trigger_noise } else { e.trigger_noise };
        let (base, identity) = self.with_triggers(&concepts, seed, noise)?;
        let t = &self.config.train;
        let spec = RunSpec { mode, alpha, seed, steps: k * self.config.experiment.concept_steps, lr: t.lr };
        let out = train_adapter(&base, &spec.train_config(t), &identity)?;

        let enc = &self.encoder;
        let originals: Vec<Vec<Vec<f64>>> =
            concepts.iter().map(|&c| enc.encode_all(&self.dataset.identities[c].subset)).collect::<Result<_>>()?;
        let mut scores = Vec::new();
        let mut kps_sims = Vec::new();
        for (j, &c) in concepts.iter().enumerate() {
            let name = &self.dataset.identities[c].name;
            let trigger = out.bundle.conditions.trigger_by_name(name).expect("registered above");
            let (with, without) = self.paired_generations(&out.bundle, trigger, seed, 30 + j as u64)?;
            let with_f = enc.encode_all(&with)?;
            let own = identity_score_features(&originals[j], &with_f)?.score;
            let cross = (0..k)
                .filter(|&o| o != j)
                .map(|o| identity_score_features(&originals[o], &with_f).map(|s| s.score))
                .collect::<Result<Vec<_>>>()?;
            kps_sims.extend(kps_features(&with_f, &enc.encode_all(&without)?)?.similarities);
            scores.push(ConceptScore { concept: name.clone(), own_identity: own, cross_identity: cross });
        }
        let clamped: Vec<f64> = kps_sims.iter().map(|&s| clamp_similarity(s)).collect();
        Ok(MultiConceptResult {
            run_id: format!("multi{k}_{}", spec.run_id()),
            mode,
            seed,
            concepts: scores,
            kps: 1.0 - harmonic_mean(&clamped)?,
            log: out.log,
        })
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
