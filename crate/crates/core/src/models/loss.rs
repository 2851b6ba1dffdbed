//! Reconstruction and regularisation losses, as graph nodes and as plain
//! tensor reductions for scoring.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Per-element mean squared difference (over batch and pixels).
pub fn mse_loss<T: Real>(g: &mut Graph<T>, x_in: Var, x_out: Var) -> Result<Var> {
    if g.value(x_in).shape() != g.value(x_out).shape() {
        return Err(Error::shape(
            "mse_loss",
            format!(
                "{:?} vs {:?}",
                g.value(x_in).shape(),
                g.value(x_out).shape()
            ),
        ));
    }
    let d = g.sub(x_in, x_out)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Same quantity as [`mse_loss`] on plain tensors, accumulated in f64.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// KL divergence between N(μ, diag(exp(log_var))) and N(0, I):
/// `½ Σ_j (exp(log_var_j) + μ_j² − 1 − log_var_j)`, summed over latent
/// entries and averaged over the batch (leading axis of a rank-2 input).
pub fn kl_divergence<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    let shape = g.value(mu).shape().to_vec();
    if shape != g.value(log_var).shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{shape:?} vs {:?}", g.value(log_var).shape()),
        ));
    }
    let batch = match shape.len() {
        1 => 1,
        2 => shape[0],
        _ => return Err(Error::shape("kl_divergence", format!("latent {shape:?}"))),
    };
    let count = T::from_usize(g.value(mu).numel()).expect("count fits");
    let var = g.exp(log_var);
    let mu2 = g.square(mu);
    let a = g.add(var, mu2)?;
    let b = g.sub(a, log_var)?;
    let s = g.sum(b);
    let centered = g.add_scalar(s, -count);
    let half = T::from_f64_lossy(0.5) / T::from_usize(batch).expect("batch fits");
    Ok(g.scale(centered, half))
}

/// Closed-form KL on plain values (f64), for reporting.
pub fn kl_closed_form(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// `mse_loss + kl_divergence`, unit weighting.
pub fn cvae_loss<T: Real>(
    g: &mut Graph<T>,
    x_in: Var,
    x_out: Var,
    mu: Var,
    log_var: Var,
) -> Result<(Var, Var, Var)> {
    let rec = mse_loss(g, x_in, x_out)?;
    let kl = kl_divergence(g, mu, log_var)?;
    let total = g.add(rec, kl)?;
    Ok((total, rec, kl))
}

/// Terms of the VQ-VAE objective.
#[derive(Clone, Copy, Debug)]
pub struct VqLossTerms {
    pub total: Var,
    pub reconstruction: Var,
    /// `mean(‖sg[x_enc] − z_q‖²)`: reaches the codebook only.
    pub alignment: Var,
    /// `mean(‖x_enc − sg[z_q]‖²)` before weighting: reaches the encoder only.
    pub commitment: Var,
}

/// `mse(x_in, x_out) + mean‖sg[x_enc] − z_q‖² + β·mean‖x_enc − sg[z_q]‖²`.
///
/// `x_out` should be decoded from the straight-through node so that the
/// reconstruction gradient reaches the encoder unchanged.
pub fn vqvae_loss<T: Real>(
    g: &mut Graph<T>,
    x_in: Var,
    x_out: Var,
    x_enc: Var,
    z_q: Var,
    beta: T,
) -> Result<VqLossTerms> {
    if !(beta > T::zero()) {
        return Err(Error::Contract(format!("beta must be > 0, got {beta}")));
    }
    let reconstruction = mse_loss(g, x_in, x_out)?;
    let enc_frozen = g.stop_gradient(x_enc);
    let alignment = mse_loss(g, enc_frozen, z_q)?;
    let zq_frozen = g.stop_gradient(z_q);
    let commitment = mse_loss(g, x_enc, zq_frozen)?;
    let weighted = g.scale(commitment, beta);
    let reg = g.add(alignment, weighted)?;
    let total = g.add(reconstruction, reg)?;
    Ok(VqLossTerms {
        total,
        reconstruction,
        alignment,
        commitment,
    })
}
