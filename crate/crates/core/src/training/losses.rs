//! Loss terms of the variational contrastive objective.
//!
//! The batch contrastive loss treats every original scan as its own class:
//! an augmented view should be recognised as its source instance, and no
//! original should be recognised as another. Functions here operate on
//! embeddings as given; callers normalise first.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped into `[eps, 1 - eps]` before taking logs.
pub const LOG_CLAMP_EPS: f64 = 1e-12;

fn log_clamp_eps<T: Scalar>() -> T {
    // 1 - 1e-12 rounds to 1 in single precision
    T::lit(LOG_CLAMP_EPS).max(T::epsilon())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Softmax over anchors of `(anchor . query - margin * [k != own]) / tau`.
fn recognition_distribution<T: Scalar>(
    query: &[T],
    anchors: &[Vec<T>],
    own: Option<usize>,
    tau: T,
    margin: T,
) -> Vec<T> {
    let logits: Vec<T> = anchors
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let s = dot(a, query);
            let s = if Some(k) == own { s } else { s - margin };
            s / tau
        })
        .collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) {
        return Err(Error::config("temperature must be > 0"));
    }
    Ok(())
}

fn check_batch<T>(batch: &[Vec<T>], what: &'static str) -> Result<usize> {
    let d = batch.first().map(|v| v.len()).unwrap_or(0);
    if let Some(bad) = batch.iter().find(|v| v.len() != d) {
        return Err(Error::dim(what, d, bad.len()));
    }
    Ok(d)
}

/// Probability that the sample embedded as `z_j` is recognised as instance
/// `i` of `batch_z`: softmax of `batch_z[k] . z_j / tau` over `k`.
pub fn recognition_prob<T: Scalar>(i: usize, z_j: &[T], batch_z: &[Vec<T>], tau: T) -> Result<T> {
    check_tau(tau)?;
    let d = check_batch(batch_z, "recognition_prob")?;
    if z_j.len() != d {
        return Err(Error::dim("recognition_prob", d, z_j.len()));
    }
    if i >= batch_z.len() {
        return Err(Error::domain(format!(
            "instance {i} outside batch of {}",
            batch_z.len()
        )));
    }
    Ok(recognition_distribution(z_j, batch_z, None, tau, T::zero())[i])
}

/// Batch contrastive loss without margin.
pub fn contrastive_loss<T: Scalar>(
    batch_z: &[Vec<T>],
    augmented_z: &[Vec<T>],
    tau: T,
) -> Result<T> {
    contrastive_loss_with_margin(batch_z, augmented_z, tau, T::zero())
}

/// `-sum_i log P(i | x̂_i) - sum_i sum_{j != i} log(1 - P(i | x_j))`, with
/// `margin` subtracted from every non-own similarity before the softmax.
pub fn contrastive_loss_with_margin<T: Scalar>(
    batch_z: &[Vec<T>],
    augmented_z: &[Vec<T>],
    tau: T,
    margin: T,
) -> Result<T> {
    contrastive_terms(batch_z, augmented_z, tau, margin, false).map(|(l, _, _)| l)
}

/// Loss plus gradients with respect to the original and augmented embeddings.
pub(crate) fn contrastive_loss_grad<T: Scalar>(
    batch_z: &[Vec<T>],
    augmented_z: &[Vec<T>],
    tau: T,
    margin: T,
) -> Result<(T, Vec<Vec<T>>, Vec<Vec<T>>)> {
    contrastive_terms(batch_z, augmented_z, tau, margin, true)
}

fn contrastive_terms<T: Scalar>(
    batch_z: &[Vec<T>],
    augmented_z: &[Vec<T>],
    tau: T,
    margin: T,
    want_grad: bool,
) -> Result<(T, Vec<Vec<T>>, Vec<Vec<T>>)> {
    check_tau(tau)?;
    let m = batch_z.len();
    if augmented_z.len() != m {
        return Err(Error::dim("contrastive_loss", m, augmented_z.len()));
    }
    let d = check_batch(batch_z, "contrastive_loss")?;
    if let Some(bad) = augmented_z.iter().find(|v| v.len() != d) {
        return Err(Error::dim("contrastive_loss", d, bad.len()));
    }
    let eps = log_clamp_eps::<T>();
    let hi = T::one() - eps;
    let mut loss = T::zero();
    let mut d_batch = vec![vec![T::zero(); d]; if want_grad { m } else { 0 }];
    let mut d_aug = vec![vec![T::zero(); d]; if want_grad { m } else { 0 }];

    // one softmax per query; `positive` queries are the augmented views
    let mut accumulate = |query: &[T],
                          own: usize,
                          positive: bool,
                          d_query: Option<&mut Vec<T>>,
                          d_batch: &mut Vec<Vec<T>>| {
        let p = recognition_distribution(query, batch_z, Some(own), tau, margin);
        // dC/dP_k for the clamped log terms
        let mut g = vec![T::zero(); m];
        if positive {
            let pc = p[own].max(eps).min(hi);
            loss -= pc.ln();
            if p[own] > eps && p[own] < hi {
                g[own] = -T::one() / p[own];
            }
        } else {
            for i in (0..m).filter(|i| *i != own) {
                let pc = p[i].max(eps).min(hi);
                loss -= (T::one() - pc).ln();
                if p[i] > eps && p[i] < hi {
                    g[i] = T::one() / (T::one() - p[i]);
                }
            }
        }
        if let Some(d_query) = d_query {
            let mean_g: T = g.iter().zip(&p).map(|(a, b)| *a * *b).sum();
            for k in 0..m {
                let dl = p[k] * (g[k] - mean_g) / tau;
                if dl == T::zero() {
                    continue;
                }
                for t in 0..d {
                    d_query[t] += dl * batch_z[k][t];
                    d_batch[k][t] += dl * query[t];
                }
            }
        }
    };

    for i in 0..m {
        let dq = if want_grad { Some(&mut d_aug[i]) } else { None };
        accumulate(&augmented_z[i], i, true, dq, &mut d_batch);
    }
    for j in 0..m {
        if want_grad {
            // the query is itself an anchor, so its gradient lands in d_batch
            let mut dq = vec![T::zero(); d];
            accumulate(&batch_z[j], j, false, Some(&mut dq), &mut d_batch);
            for (a, b) in d_batch[j].iter_mut().zip(dq) {
                *a += b;
            }
        } else {
            accumulate(&batch_z[j], j, false, None, &mut d_batch);
        }
    }
    Ok((loss, d_batch, d_aug))
}

/// KL divergence of `N(mu, diag(exp(log_var)))` from `N(0, I)`.
pub fn kl_divergence<T: Scalar>(mu_var: &[T], log_var: &[T]) -> Result<T> {
    if mu_var.len() != log_var.len() {
        return Err(Error::dim("kl_divergence", mu_var.len(), log_var.len()));
    }
    let half = T::lit(0.5);
    Ok(mu_var
        .iter()
        .zip(log_var)
        .map(|(m, lv)| half * (lv.exp_m1() - *lv + *m * *m))
        .sum())
}

/// Euclidean distance between the reconstructed and extracted feature maps.
pub fn reconstruction_loss<T: Scalar>(m_r: &[T], m_feat: &[T]) -> Result<T> {
    if m_r.len() != m_feat.len() {
        return Err(Error::dim("reconstruction_loss", m_feat.len(), m_r.len()));
    }
    Ok(m_r
        .iter()
        .zip(m_feat)
        .map(|(a, b)| (*a - *b) * (*a - *b))
        .sum::<T>()
        .sqrt())
}

/// `v / sqrt(|v|^2 + eps^2)` and the norm used.
pub(crate) fn normalize<T: Scalar>(v: &[T]) -> (Vec<T>, T) {
    let eps = T::lit(1e-12);
    let n = (v.iter().map(|x| *x * *x).sum::<T>() + eps * eps).sqrt();
    (v.iter().map(|x| *x / n).collect(), n)
}

/// Pulls a gradient on `normalize(v)` back onto `v`.
pub(crate) fn normalize_backward<T: Scalar>(unit: &[T], norm: T, grad: &[T]) -> Vec<T> {
    let proj: T = unit.iter().zip(grad).map(|(u, g)| *u * *g).sum();
    unit.iter()
        .zip(grad)
        .map(|(u, g)| (*g - *u * proj) / norm)
        .collect()
}
