//! DDPM machinery: linear noise schedule, closed-form forward noising and
//! the ancestral reverse chain driven by an ε-predicting network.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// When set, the reverse chain clamps its x₀ estimate to `[-c, c]`
    /// before forming the posterior mean (for data of known range).
    pub clip_x0: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: DEFAULT_STEPS, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX, clip_x0: None }
    }
}

/// β, α = 1 − β and ᾱ (cumulative product of α) for t = 1..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")));
        }
        let betas: Vec<f64> =
            (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let schedule = NoiseSchedule {
            config: ScheduleConfig { steps, beta_min, beta_max, clip_x0: None },
            betas,
            alphas,
            alpha_bars,
        };
        schedule.check_monotone()?;
        Ok(schedule)
    }

    pub fn from_config(config: &ScheduleConfig) -> Result<Self> {
        if let Some(c) = config.clip_x0 {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("clip_x0 must be positive, got {c}")));
            }
        }
        let mut s = Self::linear(config.steps, config.beta_min, config.beta_max)?;
        s.config.clip_x0 = config.clip_x0;
        Ok(s)
    }

    fn check_monotone(&self) -> Result<()> {
        let betas_ok = self.betas.windows(2).all(|w| w[0] <= w[1]) && self.betas.iter().all(|&b| b > 0.0 && b < 1.0);
        let bars_ok = self.alpha_bars.windows(2).all(|w| w[1] < w[0]) && self.alpha_bars[0] < 1.0;
        if betas_ok && bars_ok {
            Ok(())
        } else {
            Err(Error::invalid("schedule is not monotone (alpha_bar underflow?)"))
        }
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `z_t = √ᾱ_t · x₀ + √(1 − ᾱ_t) · ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape {
            node: "q_sample".into(),
            detail: format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Row-wise `q_sample` with one timestep per row of a `[batch, dim]` tensor.
pub fn q_sample_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() || x0.rows() != ts.len() {
        return Err(Error::Shape {
            node: "q_sample_rows".into(),
            detail: format!("x0 {:?}, eps {:?}, {} timesteps", x0.shape(), eps.shape(), ts.len()),
        });
    }
    let d = x0.cols();
    let mut out = Vec::with_capacity(x0.numel());
    for (r, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        out.extend(x0.row(r).iter().zip(eps.row(r)).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(vec![ts.len(), d], out)
}

/// A network predicting the added noise ε from `(z_t, t, condition)`.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;

    /// `z` is `[batch, data_dim]`; one timestep and one token id per row.
    fn predict(&mut self, z: &Tensor, ts: &[usize], tokens: &[usize]) -> Result<Tensor>;
}

/// Ancestral DDPM chain for a single sample: starts from `x_T ~ N(0, I)` drawn
/// from `rng` and applies the posterior-mean step with variance `β_t`.
pub fn p_sample_loop(
    model: &mut dyn NoisePredictor,
    token: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut out = p_sample_batch(model, &[token], schedule, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one sample"))
}

/// Runs one reverse chain per `(token, rng)` pair in a single batch. Row `i`
/// consumes only `rngs[i]`, so the result for a row equals the single-sample
/// chain with the same generator state.
pub fn p_sample_batch(
    model: &mut dyn NoisePredictor,
    tokens: &[usize],
    schedule: &NoiseSchedule,
    rngs: &mut [Rng],
) -> Result<Vec<Vec<f64>>> {
    if tokens.len() != rngs.len() || tokens.is_empty() {
        return Err(Error::invalid(format!("{} tokens for {} generators", tokens.len(), rngs.len())));
    }
    let dim = model.data_dim();
    let batch = tokens.len();
    let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| rng::normal_vec(r, dim)).collect();
    let mut ts = vec![0; batch];
    let clip = schedule.config().clip_x0;
    for t in (1..=schedule.steps()).rev() {
        ts.iter_mut().for_each(|v| *v = t);
        let z = Tensor::new(vec![batch, dim], x.clone())?;
        let eps = model.predict(&z, &ts, tokens)?;
        let beta = schedule.beta(t)?;
        let abar = schedule.alpha_bar(t)?;
        let abar_prev = if t > 1 { schedule.alpha_bar(t - 1)? } else { 1.0 };
        let coef = beta / (1.0 - abar).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t)?.sqrt();
        // posterior mean as a mix of the x₀ estimate and z_t
        let c_x0 = abar_prev.sqrt() * beta / (1.0 - abar);
        let c_z = schedule.alpha(t)?.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        let sigma = beta.sqrt();
        for (r, rng) in rngs.iter_mut().enumerate() {
            let row = &mut x[r * dim..(r + 1) * dim];
            let e = eps.row(r);
            match clip {
                None => {
                    for (xv, &ev) in row.iter_mut().zip(e) {
                        *xv = inv_sqrt_alpha * (*xv - coef * ev);
                    }
                }
                Some(c) => {
                    for (xv, &ev) in row.iter_mut().zip(e) {
                        let x0 = ((*xv - (1.0 - abar).sqrt() * ev) / abar.sqrt()).clamp(-c, c);
                        *xv = c_x0 * x0 + c_z * *xv;
                    }
                }
            }
            if t > 1 {
                for xv in row.iter_mut() {
                    *xv += sigma * rng::normal(rng);
                }
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reverse diffusion sample".into()));
    }
    Ok(x.chunks(dim).map(|c| c.to_vec()).collect())
}
