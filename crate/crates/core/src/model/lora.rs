use super::denoiser::DenoiserParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Rank-r factors of one adapted layer: `Δ = s · up · down` with `down`
/// `[r, in]` and `up` `[out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub down: Tensor,
    pub up: Tensor,
}

/// Low-rank residual adapter over the denoiser's linear layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    /// One entry per base layer; `None` for layers left untouched.
    pub layers: Vec<Option<LoraFactors>>,
}

impl LoraAdapter {
    /// Adapter on every linear layer of `base`: `down ~ N(0, 1/in)`, `up = 0`,
    /// so the initial delta is exactly zero.
    pub fn init(base: &DenoiserParams, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let targets: Vec<usize> = (0..base.layers.len()).collect();
        Self::init_targets(base, &targets, rank, scale, rng)
    }

    pub fn init_targets(
        base: &DenoiserParams,
        targets: &[usize],
        rank: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be at least 1"));
        }
        let mut layers = vec![None; base.layers.len()];
        for &l in targets {
            let layer = base.layers.get(l).ok_or_else(|| Error::Topology(format!("no layer {l}")))?;
            let (i, o) = (layer.in_dim(), layer.out_dim());
            if rank > i.min(o) {
                return Err(Error::invalid(format!("rank {rank} exceeds layer {l} dims ({o}x{i})")));
            }
            let std = 1.0 / (i as f64).sqrt();
            let down = rng::normal_vec(rng, rank * i).into_iter().map(|v| v * std).collect();
            layers[l] = Some(LoraFactors { down: Tensor::matrix(rank, i, down), up: Tensor::zeros(vec![o, rank]) });
        }
        Ok(LoraAdapter { rank, scale, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flatten().map(|f| f.down.numel() + f.up.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|f| f.down.is_finite() && f.up.is_finite())
    }

    pub fn check_matches(&self, base: &DenoiserParams) -> Result<()> {
        if self.layers.len() != base.layers.len() {
            return Err(Error::Topology(format!(
                "adapter has {} layer slots, base has {} layers",
                self.layers.len(),
                base.layers.len()
            )));
        }
        for (l, (f, layer)) in self.layers.iter().zip(&base.layers).enumerate() {
            if let Some(f) = f {
                if f.down.shape() != [self.rank, layer.in_dim()] || f.up.shape() != [layer.out_dim(), self.rank] {
                    return Err(Error::Topology(format!(
                        "layer {l}: down {:?}, up {:?} for a {}x{} weight",
                        f.down.shape(),
                        f.up.shape(),
                        layer.out_dim(),
                        layer.in_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Effective `[out, in]` weight delta `s · up · down` of layer `l`.
    pub fn delta(&self, l: usize) -> Option<Tensor> {
        let f = self.layers.get(l)?.as_ref()?;
        let (o, r, i) = (f.up.rows(), self.rank, f.down.cols());
        let mut out = vec![0.0; o * i];
        for a in 0..o {
            for k in 0..r {
                let u = self.scale * f.up.data()[a * r + k];
                for (dst, &d) in out[a * i..(a + 1) * i].iter_mut().zip(f.down.row(k)) {
                    *dst += u * d;
                }
            }
        }
        Some(Tensor::matrix(o, i, out))
    }

    /// A new parameter set with `W' = W + s·up·down` on every adapted layer.
    pub fn merge_into(&self, base: &DenoiserParams) -> Result<DenoiserParams> {
        self.check_matches(base)?;
        let mut merged = base.clone();
        for (l, layer) in merged.layers.iter_mut().enumerate() {
            if let Some(delta) = self.delta(l) {
                for (w, d) in layer.weight.data_mut().iter_mut().zip(delta.data()) {
                    *w += d;
                }
            }
        }
        Ok(merged)
    }
}

/// `init_lora` over every linear layer.
pub fn init_lora(base: &DenoiserParams, rank: usize, scale: f64, rng: &mut Rng) -> Result<LoraAdapter> {
    LoraAdapter::init(base, rank, scale, rng)
}

pub fn merge_adapter(base: &DenoiserParams, adapter: &LoraAdapter) -> Result<DenoiserParams> {
    adapter.merge_into(base)
}
