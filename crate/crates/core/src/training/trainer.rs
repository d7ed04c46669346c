use std::time::Instant;

use rand::Rng as _;

use super::config::{ContrastivePolicy, IdentityDataset, Mode, StepRecord, TrainConfig, TrainLog};
use crate::autodiff::{Feeds, Graph, GraphOptimizer, NodeId, Tensor};
use crate::diffusion::{p_sample_batch, q_sample_rows, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{
    build_branch, time_embeddings, AdapterBundle, AdapterNodes, BaseModel, BaseNodes, Denoiser, LoraAdapter, NULL_TOKEN,
};
use crate::rng::{self, Rng};

/// Samples drawn from the frozen base under one class prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizationSet {
    pub token: usize,
    pub samples: Vec<Vec<f64>>,
}

/// Runs `n` reverse chains of the base model conditioned on `class_token`.
/// Each chain gets its own generator seeded from `rng`.
pub fn generate_regularization_set(
    base: &BaseModel,
    class_token: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<RegularizationSet> {
    if n == 0 {
        return Err(Error::invalid("regularization set size must be at least 1"));
    }
    let schedule = NoiseSchedule::from_config(&base.schedule)?;
    let mut model = Denoiser::new(&base.params, None, &base.conditions)?;
    let mut rngs: Vec<Rng> = (0..n).map(|_| rng::seeded(rng.random())).collect();
    let samples = p_sample_batch(&mut model, &vec![class_token; n], &schedule, &mut rngs)?;
    Ok(RegularizationSet { token: class_token, samples })
}

/// One minibatch of every input a [`LossGraph`] reads.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    pub z: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub tokens: Vec<usize>,
    /// Prompt ids for the contrastive branches (CAT only).
    pub uncond: Vec<usize>,
    /// `(z, ts, eps, tokens)` drawn from the regularization set (prior
    /// preservation only).
    pub reg: Option<(Tensor, Vec<usize>, Tensor, Vec<usize>)>,
}

impl LossBatch {
    fn feeds(&self, time_dim: usize) -> Feeds {
        let mut f = Feeds::new()
            .tensor("z", self.z.clone())
            .tensor("temb", time_embeddings(&self.ts, time_dim))
            .tensor("eps", self.eps.clone())
            .indices("tokens", self.tokens.clone())
            .indices("uncond", self.uncond.clone());
        if let Some((z, ts, eps, tokens)) = &self.reg {
            f.set_tensor("reg_z", z.clone());
            f.set_tensor("reg_temb", time_embeddings(ts, time_dim));
            f.set_tensor("reg_eps", eps.clone());
            f.set_indices("reg_tokens", tokens.clone());
        }
        f
    }
}

/// The training objective of one fine-tuning regime as a graph over a
/// frozen base, with the adapter (or trigger embeddings) as the only
/// trainable parameters.
pub struct LossGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub recon: NodeId,
    /// α·contrastive for CAT, weight·prior for prior preservation.
    pub aux: Option<NodeId>,
    pub base: BaseNodes,
    pub adapter: Option<AdapterNodes>,
    /// Trainable trigger rows in textual-embedding mode, starting at
    /// `trigger_start` in the condition table.
    pub trigger_rows: Option<NodeId>,
    pub trigger_start: usize,
    time_dim: usize,
}

impl LossGraph {
    pub fn build(base: &BaseModel, adapter: Option<&LoraAdapter>, config: &TrainConfig, batch: usize) -> Result<Self> {
        let cfg = &base.params.config;
        let mut g = Graph::new();
        g.index_input("tokens", batch);
        g.index_input("uncond", batch);
        let z = g.input("z", vec![batch, cfg.data_dim])?;
        let temb = g.input("temb", vec![batch, cfg.time_dim])?;
        let eps = g.input("eps", vec![batch, cfg.data_dim])?;

        let trigger_start = 1 + base.conditions.n_classes();
        let (table, trigger_rows) = if config.mode == Mode::TextualEmbedding {
            if base.conditions.len() <= trigger_start {
                return Err(Error::invalid("textual-embedding mode needs at least one registered trigger"));
            }
            let fixed = g.param("conditions.fixed", base.conditions.rows_tensor(0..trigger_start), false);
            let rows =
                g.param("conditions.triggers", base.conditions.rows_tensor(trigger_start..base.conditions.len()), true);
            (g.concat_rows(&[fixed, rows])?, Some(rows))
        } else {
            (g.param("conditions", base.conditions.as_tensor(), false), None)
        };

        let base_nodes = BaseNodes::register(&mut g, &base.params, false);
        let adapter_nodes = match (config.mode.trains_adapter(), adapter) {
            (true, Some(a)) => {
                a.check_matches(&base.params)?;
                Some(AdapterNodes::register(&mut g, a, true))
            }
            (true, None) => return Err(Error::invalid(format!("mode {} needs an adapter", config.mode))),
            (false, _) => None,
        };

        let cond = g.gather(table, "tokens")?;
        let pred = build_branch(&mut g, &base_nodes, adapter_nodes.as_ref(), z, temb, cond)?;
        let recon = g.mse(eps, pred)?;
        let aux = match config.mode {
            Mode::Cat => {
                let cu = g.gather(table, "uncond")?;
                let base_u = build_branch(&mut g, &base_nodes, None, z, temb, cu)?;
                let adapted_u = build_branch(&mut g, &base_nodes, adapter_nodes.as_ref(), z, temb, cu)?;
                let c = g.mse(base_u, adapted_u)?;
                Some(g.scale(c, config.alpha))
            }
            Mode::PriorPreservation => {
                g.index_input("reg_tokens", batch);
                let rz = g.input("reg_z", vec![batch, cfg.data_dim])?;
                let rt = g.input("reg_temb", vec![batch, cfg.time_dim])?;
                let re = g.input("reg_eps", vec![batch, cfg.data_dim])?;
                let rc = g.gather(table, "reg_tokens")?;
                let rp = build_branch(&mut g, &base_nodes, adapter_nodes.as_ref(), rz, rt, rc)?;
                let prior = g.mse(re, rp)?;
                Some(g.scale(prior, config.prior_weight))
            }
            Mode::Lora | Mode::TextualEmbedding => None,
        };
        let total = match aux {
            Some(a) => g.add(recon, a)?,
            None => recon,
        };
        Ok(LossGraph {
            graph: g,
            total,
            recon,
            aux,
            base: base_nodes,
            adapter: adapter_nodes,
            trigger_rows,
            trigger_start,
            time_dim: cfg.time_dim,
        })
    }

    /// Forward pass; returns `(total, recon, aux)`.
    pub fn evaluate(&mut self, batch: &LossBatch) -> Result<(f64, f64, f64)> {
        self.graph.forward(&batch.feeds(self.time_dim))?;
        let aux = self.aux.map_or(0.0, |a| self.graph.value(a).item());
        Ok((self.graph.value(self.total).item(), self.graph.value(self.recon).item(), aux))
    }
}

/// Result of a fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub bundle: AdapterBundle,
    pub log: TrainLog,
}

/// Fine-tunes `base` on `identity` under `config.mode`.
///
/// `base.conditions` must already contain the identity's trigger tokens. The
/// base weights are only read; the returned bundle holds the trained adapter
/// (absent in textual-embedding mode) and the condition table with trained
/// trigger rows. With several concepts in `identity`, steps cycle through them
/// in order of first appearance.
pub fn train_adapter(base: &BaseModel, config: &TrainConfig, identity: &IdentityDataset) -> Result<TrainOutput> {
    config.validate()?;
    let cfg = &base.params.config;
    identity.validate(&base.conditions, cfg.data_dim)?;
    let schedule = NoiseSchedule::from_config(&base.schedule)?;
    let start = Instant::now();

    let mut init_rng = rng::stream(config.seed, 0);
    let mut draw_rng = rng::stream(config.seed, 1);
    let mut reg_rng = rng::stream(config.seed, 2);

    let adapter = if config.mode.trains_adapter() {
        Some(LoraAdapter::init(&base.params, config.rank, config.lora_scale, &mut init_rng)?)
    } else {
        None
    };

    let groups = identity.groups();
    let group_classes: Vec<usize> =
        groups.iter().map(|g| identity.class_of(g[0], &base.conditions)).collect::<Result<_>>()?;
    let reg_sets: Vec<RegularizationSet> = if config.mode == Mode::PriorPreservation {
        let mut sets: Vec<RegularizationSet> = Vec::new();
        for &c in &group_classes {
            let token = base.conditions.class_token(c)?;
            if !sets.iter().any(|s| s.token == token) {
                sets.push(generate_regularization_set(base, token, config.reg_set_size, &mut reg_rng)?);
            }
        }
        sets
    } else {
        Vec::new()
    };

    let b = config.batch_size;
    let mut lg = LossGraph::build(base, adapter.as_ref(), config, b)?;
    let mut opt = GraphOptimizer::new(config.optimizer(), &lg.graph);
    let mut records = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let gi = (step - 1) % groups.len();
        let group = &groups[gi];
        let idx: Vec<usize> = (0..b).map(|_| group[draw_rng.random_range(0..group.len())]).collect();
        let ts: Vec<usize> = (0..b).map(|_| draw_rng.random_range(1..=schedule.steps())).collect();
        let eps = Tensor::matrix(b, cfg.data_dim, rng::normal_vec(&mut draw_rng, b * cfg.data_dim));
        let x0 =
            Tensor::matrix(b, cfg.data_dim, idx.iter().flat_map(|&i| identity.samples[i].iter().copied()).collect());
        let z = q_sample_rows(&x0, &ts, &eps, &schedule)?;
        let tokens: Vec<usize> = idx.iter().map(|&i| identity.triggers[i]).collect();
        let uncond = match config.contrastive {
            ContrastivePolicy::NullToken => vec![NULL_TOKEN; b],
            ContrastivePolicy::ClassToken => idx
                .iter()
                .map(|&i| base.conditions.class_token(identity.class_of(i, &base.conditions)?))
                .collect::<Result<_>>()?,
        };
        let reg = if config.mode == Mode::PriorPreservation {
            let token = base.conditions.class_token(group_classes[gi])?;
            let set = reg_sets.iter().find(|s| s.token == token).expect("regularization set per class");
            let ridx: Vec<usize> = (0..b).map(|_| draw_rng.random_range(0..set.samples.len())).collect();
            let rts: Vec<usize> = (0..b).map(|_| draw_rng.random_range(1..=schedule.steps())).collect();
            let reps = Tensor::matrix(b, cfg.data_dim, rng::normal_vec(&mut draw_rng, b * cfg.data_dim));
            let rx0 =
                Tensor::matrix(b, cfg.data_dim, ridx.iter().flat_map(|&i| set.samples[i].iter().copied()).collect());
            let rz = q_sample_rows(&rx0, &rts, &reps, &schedule)?;
            Some((rz, rts, reps, vec![token; b]))
        } else {
            None
        };
        let batch = LossBatch { z, ts, eps, tokens, uncond, reg };

        let (total, recon, aux) = lg.evaluate(&batch)?;
        if !(total.is_finite() && recon.is_finite() && aux.is_finite()) {
            return Err(Error::Diverged { step });
        }
        records.push(StepRecord { step, total, recon, contrastive: aux });
        let grads = lg.graph.backward(lg.total, None)?;
        opt.step(&mut lg.graph, &grads).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::Diverged { step },
            other => other,
        })?;
    }

    let mut conditions = base.conditions.clone();
    if let Some(rows) = lg.trigger_rows {
        conditions.set_rows(lg.trigger_start, lg.graph.param_value(rows));
    }
    let adapter = match (adapter, &lg.adapter) {
        (Some(mut a), Some(nodes)) => {
            nodes.read_into(&lg.graph, &mut a);
            Some(a)
        }
        _ => None,
    };
    let log = TrainLog { seed: config.seed, records, wall_clock_secs: start.elapsed().as_secs_f64() };
    Ok(TrainOutput { bundle: AdapterBundle { adapter, conditions }, log })
}
