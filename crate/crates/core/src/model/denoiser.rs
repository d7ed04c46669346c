use serde::{Deserialize, Serialize};

use super::condition::ConditionTable;
use super::lora::LoraAdapter;
use crate::autodiff::{Feeds, Graph, NodeId, Tensor};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl DenoiserConfig {
    pub fn new(data_dim: usize) -> Self {
        DenoiserConfig { data_dim, time_dim: 16, cond_dim: 16, hidden: vec![128, 128] }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    /// `(in, out)` of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// A dense layer `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Weights of the conditional noise predictor
/// `ε_θ(z_t, t, c) = MLP([z_t, e_t, c]) + (G·e_t + g) ⊙ z_t`.
///
/// The gate `(G, g)` maps the time embedding to a per-coordinate skip
/// weight on `z_t`. At high noise ε is almost `z_t` itself, which a SiLU
/// bottleneck reproduces poorly; the gate carries that part directly.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub layers: Vec<Linear>,
    /// `[data_dim, time_dim]` skip gate. Not targeted by adapters.
    pub gate: Linear,
    pub frozen: bool,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Self {
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let std = 1.0 / (i as f64).sqrt();
                let w = rng::normal_vec(rng, i * o).into_iter().map(|v| v * std).collect();
                Linear { weight: Tensor::matrix(o, i, w), bias: Tensor::zeros(vec![o]) }
            })
            .collect();
        let gate = Linear {
            weight: Tensor::zeros(vec![config.data_dim, config.time_dim]),
            bias: Tensor::zeros(vec![config.data_dim]),
        };
        DenoiserParams { config, layers, gate, frozen: false }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().chain([&self.gate]).map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().chain([&self.gate]).all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.config.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Topology(format!("{} layers for {} declared", self.layers.len(), dims.len())));
        }
        for (l, ((i, o), layer)) in dims.iter().zip(&self.layers).enumerate() {
            if layer.weight.shape() != [*o, *i] || layer.bias.shape() != [*o] {
                return Err(Error::Topology(format!(
                    "layer {l}: weight {:?} / bias {:?}, expected [{o}, {i}] / [{o}]",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        let (d, t) = (self.config.data_dim, self.config.time_dim);
        if self.gate.weight.shape() != [d, t] || self.gate.bias.shape() != [d] {
            return Err(Error::Topology(format!(
                "gate: weight {:?} / bias {:?}, expected [{d}, {t}] / [{d}]",
                self.gate.weight.shape(),
                self.gate.bias.shape()
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("denoiser weights".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep: `[sin(t·f_k)…, cos(t·f_k)…]`
/// with `f_k = 10000^(−k/half)`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

pub(crate) fn time_embeddings(ts: &[usize], dim: usize) -> Tensor {
    Tensor::matrix(ts.len(), dim, ts.iter().flat_map(|&t| time_embedding(t, dim)).collect())
}

/// Graph handles for the base network's weights.
#[derive(Clone, Debug)]
pub struct BaseNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub gate: (NodeId, NodeId),
}

/// Graph handles for an adapter's factors, aligned with the base layers.
#[derive(Clone, Debug)]
pub struct AdapterNodes {
    pub layers: Vec<Option<(NodeId, NodeId)>>,
    pub scale: f64,
}

impl BaseNodes {
    pub fn register(graph: &mut Graph, params: &DenoiserParams, trainable: bool) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, layer) in params.layers.iter().enumerate() {
            weights.push(graph.param(&format!("base.{l}.weight"), layer.weight.clone(), trainable));
            biases.push(graph.param(&format!("base.{l}.bias"), layer.bias.clone(), trainable));
        }
        let gate = (
            graph.param("base.gate.weight", params.gate.weight.clone(), trainable),
            graph.param("base.gate.bias", params.gate.bias.clone(), trainable),
        );
        BaseNodes { weights, biases, gate }
    }

    /// Copies the graph's current values back into `params`.
    pub fn read_into(&self, graph: &Graph, params: &mut DenoiserParams) {
        for (l, layer) in params.layers.iter_mut().enumerate() {
            layer.weight = graph.param_value(self.weights[l]).clone();
            layer.bias = graph.param_value(self.biases[l]).clone();
        }
        params.gate.weight = graph.param_value(self.gate.0).clone();
        params.gate.bias = graph.param_value(self.gate.1).clone();
    }
}

impl AdapterNodes {
    pub fn register(graph: &mut Graph, adapter: &LoraAdapter, trainable: bool) -> Self {
        let layers = adapter
            .layers
            .iter()
            .enumerate()
            .map(|(l, f)| {
                f.as_ref().map(|f| {
                    let down = graph.param(&format!("lora.{l}.down"), f.down.clone(), trainable);
                    let up = graph.param(&format!("lora.{l}.up"), f.up.clone(), trainable);
                    (down, up)
                })
            })
            .collect();
        AdapterNodes { layers, scale: adapter.scale }
    }

    pub fn read_into(&self, graph: &Graph, adapter: &mut LoraAdapter) {
        for (slot, f) in self.layers.iter().zip(adapter.layers.iter_mut()) {
            if let (Some((down, up)), Some(f)) = (slot, f.as_mut()) {
                f.down = graph.param_value(*down).clone();
                f.up = graph.param_value(*up).clone();
            }
        }
    }
}

/// Appends one evaluation of the denoiser to `graph`.
///
/// `z` is `[batch, data_dim]`, `temb` is `[batch, time_dim]` and `cond` is the
/// gathered `[batch, cond_dim]` condition. Each targeted layer computes
/// `x·Wᵀ + b + s·((x·downᵀ)·upᵀ)`; the gated skip `(e_t·Gᵀ + g) ⊙ z` is
/// added to the last layer's output.
pub fn build_branch(
    graph: &mut Graph,
    base: &BaseNodes,
    adapter: Option<&AdapterNodes>,
    z: NodeId,
    temb: NodeId,
    cond: NodeId,
) -> Result<NodeId> {
    let mut x = graph.concat_cols(&[z, temb, cond])?;
    let n = base.weights.len();
    for l in 0..n {
        let lora = adapter.and_then(|a| a.layers.get(l).copied().flatten().map(|(d, u)| (d, u, a.scale)));
        let h = linear_layer(graph, x, base.weights[l], base.biases[l], lora)?;
        x = if l + 1 < n { graph.silu(h) } else { h };
    }
    let gate = linear_layer(graph, temb, base.gate.0, base.gate.1, None)?;
    let skip = graph.mul(gate, z)?;
    graph.add(x, skip)
}

/// `x·Wᵀ + b`, plus `s·((x·downᵀ)·upᵀ)` when a `(down, up, s)` adapter is given.
pub fn linear_layer(
    graph: &mut Graph,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
    lora: Option<(NodeId, NodeId, f64)>,
) -> Result<NodeId> {
    let h = graph.matmul_t(x, weight)?;
    let h = graph.add_bias(h, bias)?;
    match lora {
        Some((down, up, scale)) => {
            let low = graph.matmul_t(x, down)?;
            let delta = graph.matmul_t(low, up)?;
            let delta = graph.scale(delta, scale);
            graph.add(h, delta)
        }
        None => Ok(h),
    }
}

/// Inference wrapper: a frozen base, an optional adapter and a condition
/// table, evaluated through a cached forward-only graph.
pub struct Denoiser<'a> {
    base: &'a DenoiserParams,
    adapter: Option<&'a LoraAdapter>,
    conditions: &'a ConditionTable,
    cache: Option<(usize, Graph, NodeId)>,
}

impl<'a> Denoiser<'a> {
    pub fn new(
        base: &'a DenoiserParams,
        adapter: Option<&'a LoraAdapter>,
        conditions: &'a ConditionTable,
    ) -> Result<Self> {
        base.validate()?;
        if conditions.dim() != base.config.cond_dim {
            return Err(Error::Shape {
                node: "condition table".into(),
                detail: format!("dim {} vs denoiser cond_dim {}", conditions.dim(), base.config.cond_dim),
            });
        }
        if !conditions.is_finite() {
            return Err(Error::NonFinite("condition embeddings".into()));
        }
        if let Some(a) = adapter {
            a.check_matches(base)?;
            if !a.is_finite() {
                return Err(Error::NonFinite("adapter weights".into()));
            }
        }
        Ok(Denoiser { base, adapter, conditions, cache: None })
    }

    fn graph_for(&mut self, batch: usize) -> Result<(&mut Graph, NodeId)> {
        if self.cache.as_ref().map(|c| c.0) != Some(batch) {
            let cfg = &self.base.config;
            let mut g = Graph::new();
            g.index_input("tokens", batch);
            let z = g.input("z", vec![batch, cfg.data_dim])?;
            let temb = g.input("temb", vec![batch, cfg.time_dim])?;
            let table = g.param("conditions", self.conditions.as_tensor(), false);
            let cond = g.gather(table, "tokens")?;
            let base = BaseNodes::register(&mut g, self.base, false);
            let adapter = self.adapter.map(|a| AdapterNodes::register(&mut g, a, false));
            let out = build_branch(&mut g, &base, adapter.as_ref(), z, temb, cond)?;
            self.cache = Some((batch, g, out));
        }
        let (_, g, out) = self.cache.as_mut().expect("cached graph");
        Ok((g, *out))
    }
}

impl NoisePredictor for Denoiser<'_> {
    fn data_dim(&self) -> usize {
        self.base.config.data_dim
    }

    fn predict(&mut self, z: &Tensor, ts: &[usize], tokens: &[usize]) -> Result<Tensor> {
        let batch = ts.len();
        if tokens.len() != batch || z.shape() != [batch, self.base.config.data_dim] {
            return Err(Error::Shape {
                node: "denoiser input".into(),
                detail: format!("z {:?}, {} timesteps, {} tokens", z.shape(), batch, tokens.len()),
            });
        }
        for &tok in tokens {
            self.conditions.embed(tok)?;
        }
        let time_dim = self.base.config.time_dim;
        let feeds = Feeds::new()
            .tensor("z", z.clone())
            .tensor("temb", time_embeddings(ts, time_dim))
            .indices("tokens", tokens.to_vec());
        let (g, out) = self.graph_for(batch)?;
        g.forward(&feeds)?;
        Ok(g.value(out).clone())
    }
}

/// One evaluation of ε̂ for a batch `z_t`, with or without an adapter.
pub fn denoise_forward(
    base: &DenoiserParams,
    adapter: Option<&LoraAdapter>,
    conditions: &ConditionTable,
    z: &Tensor,
    ts: &[usize],
    tokens: &[usize],
) -> Result<Tensor> {
    Denoiser::new(base, adapter, conditions)?.predict(z, ts, tokens)
}
