use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn check_same(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { node: what.into(), detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    Ok(())
}

/// Denoising objective: mean over batch and dimensions of `(ε − ε̂)²`.
pub fn ldm_loss(eps: &Tensor, pred: &Tensor) -> Result<f64> {
    check_same("ldm_loss", eps, pred)?;
    let mut acc = 0.0;
    for (&x, &y) in eps.data().iter().zip(pred.data()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / eps.numel() as f64)
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("{name} must be finite and non-negative, got {w}")));
    }
    Ok(())
}

/// Reconstruction on the trigger branch plus `alpha` times the distance
/// between the frozen and adapted predictions under the unconditioned prompt.
pub fn cat_loss(
    eps: &Tensor,
    pred_token: &Tensor,
    base_uncond: &Tensor,
    adapted_uncond: &Tensor,
    alpha: f64,
) -> Result<f64> {
    check_weight("alpha", alpha)?;
    check_same("cat_loss token branch", eps, pred_token)?;
    check_same("cat_loss unconditioned branch", eps, base_uncond)?;
    Ok(ldm_loss(eps, pred_token)? + alpha * ldm_loss(base_uncond, adapted_uncond)?)
}

/// Reconstruction on the identity batch plus `weight` times reconstruction
/// on a batch from the self-generated regularization set.
pub fn prior_preservation_loss(
    eps: &Tensor,
    pred_token: &Tensor,
    eps_reg: &Tensor,
    pred_reg: &Tensor,
    weight: f64,
) -> Result<f64> {
    check_weight("prior weight", weight)?;
    Ok(ldm_loss(eps, pred_token)? + weight * ldm_loss(eps_reg, pred_reg)?)
}
