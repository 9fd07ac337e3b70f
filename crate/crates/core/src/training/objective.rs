//! The weighted four-term objective and its exact gradient.

use rayon::prelude::*;

use super::batch::Batch;
use super::losses::{
    contrastive_loss_grad, kl_divergence, normalize, normalize_backward, reconstruction_loss,
};
use super::{LossBreakdown, TrainConfig};
use crate::error::Result;
use crate::model::{decode, draw_noise, reparameterise, ForwardCache, LatentGrad, ModelParams};
use crate::scalar::Scalar;

/// Noise seed for scan `slot` of a batch (originals first, then augmentations).
pub(crate) fn slot_seed(seed: u64, slot: usize) -> u64 {
    seed.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ (slot as u64)
            .wrapping_mul(0xE703_7ED1_A0B4_28DB)
            .wrapping_add(1)
}

struct Evaluation<T> {
    breakdown: LossBreakdown<T>,
    caches: Vec<ForwardCache<T>>,
    upstream: Vec<LatentGrad<T>>,
    decoder_w: Vec<T>,
    decoder_b: Vec<T>,
}

fn evaluate<T: Scalar>(
    batch: &Batch,
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    seed: u64,
    want_grad: bool,
) -> Result<Evaluation<T>> {
    cfg.validate()?;
    let m = batch.len();
    let d = params.config.embed_dim;
    let f = params.config.feature_dim;
    let scans: Vec<_> = batch.originals.iter().chain(&batch.augmented).collect();
    let caches = scans
        .par_iter()
        .map(|s| params.forward(s))
        .collect::<Result<Vec<_>>>()?;

    let tau = T::lit(cfg.temperature);
    let margin = T::lit(cfg.negative_margin);
    let w = cfg.loss_weights;
    let (w_inv, w_var, w_kl, w_rec) = (T::lit(w.inv), T::lit(w.var), T::lit(w.kl), T::lit(w.rec));
    let half = T::lit(0.5);

    let eps: Vec<Vec<T>> = (0..2 * m)
        .map(|s| draw_noise(d, slot_seed(seed, s)))
        .collect();
    let combined: Vec<Vec<T>> = caches
        .iter()
        .zip(&eps)
        .map(|(c, e)| {
            let l = &c.latent;
            let zv = reparameterise(&l.mu_var, &l.log_var, e);
            l.z_inv.iter().zip(zv).map(|(a, b)| *a + b).collect()
        })
        .collect();

    // contrastive terms on independently normalised streams
    let contrast = |raw: Vec<&Vec<T>>| -> Result<(T, Vec<Vec<T>>)> {
        let normed: Vec<(Vec<T>, T)> = raw.iter().map(|v| normalize(v)).collect();
        let units: Vec<Vec<T>> = normed.iter().map(|(u, _)| u.clone()).collect();
        let (loss, g_orig, g_aug) = contrastive_loss_grad(&units[..m], &units[m..], tau, margin)?;
        let grads = g_orig
            .iter()
            .chain(&g_aug)
            .zip(&normed)
            .map(|(g, (u, n))| normalize_backward(u, *n, g))
            .collect();
        Ok((loss, grads))
    };
    let (l_con_inv, g_inv) = contrast(caches.iter().map(|c| &c.latent.z_inv).collect())?;
    let (l_con_var, g_var) = contrast(combined.iter().collect())?;

    let mut kl = T::zero();
    let mut l_rec = T::zero();
    let mut decoder_w = vec![T::zero(); params.dec_w.len()];
    let mut decoder_b = vec![T::zero(); params.dec_b.len()];
    let mut upstream = Vec::with_capacity(2 * m);
    for s in 0..2 * m {
        let l = &caches[s].latent;
        kl += kl_divergence(&l.mu_var, &l.log_var)?;
        let recon = decode(params, &combined[s])?;
        l_rec += reconstruction_loss(&recon, &l.feature_map)?;
        if !want_grad {
            continue;
        }

        let residual: Vec<T> = recon
            .iter()
            .zip(&l.feature_map)
            .map(|(a, b)| *a - *b)
            .collect();
        let norm = residual.iter().map(|r| *r * *r).sum::<T>().sqrt();
        let unit: Vec<T> = if norm > T::zero() {
            residual.iter().map(|r| *r / norm).collect()
        } else {
            vec![T::zero(); f]
        };
        // decoder: recon = dec_w z + dec_b
        let mut dz_rec = vec![T::zero(); d];
        for o in 0..f {
            let g = w_rec * unit[o];
            decoder_b[o] += g;
            for t in 0..d {
                decoder_w[o * d + t] += g * combined[s][t];
                dz_rec[t] += unit[o] * params.dec_w[o * d + t];
            }
        }

        let mut grad = LatentGrad::zeros(&params.config);
        for t in 0..d {
            let dz = w_var * g_var[s][t] + w_rec * dz_rec[t];
            let sigma = (l.log_var[t] * half).exp();
            grad.z_inv[t] = w_inv * g_inv[s][t] + dz;
            grad.mu_var[t] = dz + w_kl * l.mu_var[t];
            grad.log_var[t] = dz * half * sigma * eps[s][t] + w_kl * half * l.log_var[t].exp_m1();
        }
        for o in 0..f {
            grad.feature_map[o] = -w_rec * unit[o];
        }
        upstream.push(grad);
    }

    let total = w_inv * l_con_inv + w_var * l_con_var + w_kl * kl + w_rec * l_rec;
    Ok(Evaluation {
        breakdown: LossBreakdown {
            l_con_inv,
            l_con_var,
            kl,
            l_rec,
            total,
        },
        caches,
        upstream,
        decoder_w,
        decoder_b,
    })
}

/// Weighted objective on one batch. `seed` fixes the reparameterisation noise.
pub fn total_loss<T: Scalar>(
    batch: &Batch,
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossBreakdown<T>> {
    evaluate(batch, params, cfg, seed, false).map(|e| e.breakdown)
}

/// Exact gradient of [`total_loss`] with the reparameterisation noise held
/// fixed. Per-scan backward passes run in parallel and are summed in batch
/// order, so results are bit-reproducible.
pub fn gradients<T: Scalar>(
    batch: &Batch,
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossBreakdown<T>, ModelParams<T>)> {
    let eval = evaluate(batch, params, cfg, seed, true)?;
    let per_scan: Vec<ModelParams<T>> = eval
        .caches
        .par_iter()
        .zip(&eval.upstream)
        .map(|(cache, up)| {
            let mut g = params.zeros_like();
            params.backward(cache, up, &mut g);
            g
        })
        .collect();
    let mut grads = params.zeros_like();
    for g in &per_scan {
        grads.add_scaled(g, T::one());
    }
    for (a, b) in grads.dec_w.iter_mut().zip(&eval.decoder_w) {
        *a += *b;
    }
    for (a, b) in grads.dec_b.iter_mut().zip(&eval.decoder_b) {
        *a += *b;
    }
    Ok((eval.breakdown, grads))
}
