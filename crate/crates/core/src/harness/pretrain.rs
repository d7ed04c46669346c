use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use crate::autodiff::{AdamW, Feeds, Graph, GraphOptimizer, Tensor};
use crate::diffusion::{p_sample_batch, q_sample_rows, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::{
    build_branch, time_embeddings, BaseModel, BaseNodes, ConditionTable, Denoiser, DenoiserConfig, DenoiserParams,
    LoraAdapter, NULL_TOKEN,
};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub weight_decay: f64,
    /// Probability of replacing a sample's class token with the null token.
    pub cond_dropout: f64,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            batch_size: 64,
            lr: 1e-3,
            cosine_decay: true,
            weight_decay: 0.0,
            cond_dropout: 0.1,
            hidden: vec![256, 256],
            time_dim: 16,
            cond_dim: 16,
            schedule: ScheduleConfig::default(),
            seed: 0,
        }
    }
}

/// Trains a conditional denoiser and its class embeddings from scratch on
/// the base classes of `dataset`, with classifier-free condition dropout so
/// the null token learns the unconditional distribution.
pub fn pretrain_base(dataset: &SyntheticDataset, config: &PretrainConfig) -> Result<BaseModel> {
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::Config("pretraining needs steps and batch_size of at least 1".into()));
    }
    if !(0.0..1.0).contains(&config.cond_dropout) {
        return Err(Error::Config(format!("cond_dropout must lie in [0, 1), got {}", config.cond_dropout)));
    }
    let schedule = NoiseSchedule::from_config(&config.schedule)?;
    let mut rng = rng::seeded(config.seed);
    let dim = dataset.data_dim();
    let dcfg = DenoiserConfig {
        data_dim: dim,
        time_dim: config.time_dim,
        cond_dim: config.cond_dim,
        hidden: config.hidden.clone(),
    };
    let params = DenoiserParams::init(dcfg, &mut rng);
    let conditions = ConditionTable::new(config.cond_dim, dataset.n_classes(), &mut rng);

    let b = config.batch_size;
    let mut g = Graph::new();
    g.index_input("tokens", b);
    let z = g.input("z", vec![b, dim])?;
    let temb = g.input("temb", vec![b, config.time_dim])?;
    let eps = g.input("eps", vec![b, dim])?;
    let table = g.param("conditions", conditions.as_tensor(), true);
    let base = BaseNodes::register(&mut g, &params, true);
    let cond = g.gather(table, "tokens")?;
    let pred = build_branch(&mut g, &base, None, z, temb, cond)?;
    let loss = g.mse(eps, pred)?;
    let mut opt =
        GraphOptimizer::new(AdamW { lr: config.lr, weight_decay: config.weight_decay, ..AdamW::default() }, &g);

    for step in 1..=config.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..dataset.samples.len())).collect();
        let tokens: Vec<usize> = idx
            .iter()
            .map(|&i| if rng.random::<f64>() < config.cond_dropout { NULL_TOKEN } else { dataset.labels[i] + 1 })
            .collect();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let e = Tensor::matrix(b, dim, rng::normal_vec(&mut rng, b * dim));
        let x0 = Tensor::matrix(b, dim, idx.iter().flat_map(|&i| dataset.samples[i].iter().copied()).collect());
        let zt = q_sample_rows(&x0, &ts, &e, &schedule)?;
        let feeds = Feeds::new()
            .tensor("z", zt)
            .tensor("temb", time_embeddings(&ts, config.time_dim))
            .tensor("eps", e)
            .indices("tokens", tokens);
        g.forward(&feeds)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(loss, None)?;
        if config.cosine_decay {
            let progress = (step - 1) as f64 / config.steps as f64;
            opt.config.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        opt.step(&mut g, &grads).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::Diverged { step },
            other => other,
        })?;
    }

    let mut params = params;
    base.read_into(&g, &mut params);
    params.frozen = true;
    let trained = g.param_value(table);
    let mut conditions = conditions;
    for id in 0..conditions.len() {
        conditions.set_embedding(id, trained.row(id))?;
    }
    Ok(BaseModel { params, conditions, schedule: config.schedule })
}

/// Reverse-diffusion samples, one per `(token, seed)`; row `i` starts from
/// a generator seeded with `seeds[i]`, so equal seeds pair samples across
/// tokens or models.
pub fn generate(
    base: &BaseModel,
    adapter: Option<&LoraAdapter>,
    conditions: &ConditionTable,
    tokens: &[usize],
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    let schedule = NoiseSchedule::from_config(&base.schedule)?;
    let mut model = Denoiser::new(&base.params, adapter, conditions)?;
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| rng::seeded(s)).collect();
    p_sample_batch(&mut model, tokens, &schedule, &mut rngs)
}
