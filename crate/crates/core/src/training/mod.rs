//! Variational contrastive training: losses, spinning augmentation, exact
//! gradients and a plain SGD loop.

mod batch;
mod losses;
mod objective;

pub use batch::{make_batch, Batch, RotationPolicy, TrainingSession};
pub use losses::{
    contrastive_loss, contrastive_loss_with_margin, kl_divergence, recognition_prob,
    reconstruction_loss, LOG_CLAMP_EPS,
};
pub use objective::{gradients, total_loss};

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub inv: f64,
    pub var: f64,
    pub kl: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            inv: 1.0,
            var: 1.0,
            kl: 1.0,
            rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            inv: 0.0,
            var: 0.0,
            kl: 0.0,
            rec: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Batch size `m`.
    pub batch_size: usize,
    pub temperature: f64,
    pub negative_margin: f64,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    /// Maximum frame offset of the augmented view.
    pub temporal_window: usize,
    pub rotation: RotationPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 8,
            temperature: 1.0,
            negative_margin: 0.1,
            epochs: 10,
            loss_weights: LossWeights::default(),
            temporal_window: 1,
            rotation: RotationPolicy::Uniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        let w = self.loss_weights;
        if [w.inv, w.var, w.kl, w.rec].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_con_inv: T,
    pub l_con_var: T,
    pub kl: T,
    pub l_rec: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn zero() -> Self {
        Self {
            l_con_inv: T::zero(),
            l_con_var: T::zero(),
            kl: T::zero(),
            l_rec: T::zero(),
            total: T::zero(),
        }
    }

    fn components(&self) -> [(&'static str, T); 5] {
        [
            ("l_con_inv", self.l_con_inv),
            ("l_con_var", self.l_con_var),
            ("kl", self.kl),
            ("l_rec", self.l_rec),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory<T> {
    pub steps: Vec<StepRecord<T>>,
}

impl<T: Scalar> TrainHistory<T> {
    /// Mean breakdown of each epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<LossBreakdown<T>> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<_> = self.steps.iter().filter(|s| s.epoch == e).collect();
                let n = T::lit(rows.len().max(1) as f64);
                let mut acc = LossBreakdown::<T>::zero();
                for r in rows {
                    acc.l_con_inv += r.loss.l_con_inv;
                    acc.l_con_var += r.loss.l_con_var;
                    acc.kl += r.loss.kl;
                    acc.l_rec += r.loss.l_rec;
                    acc.total += r.loss.total;
                }
                LossBreakdown {
                    l_con_inv: acc.l_con_inv / n,
                    l_con_var: acc.l_con_var / n,
                    kl: acc.kl / n,
                    l_rec: acc.l_rec / n,
                    total: acc.total / n,
                }
            })
            .collect()
    }

    /// CSV with header `epoch,step,l_con_inv,l_con_var,kl,l_rec,total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,l_con_inv,l_con_var,kl,l_rec,total\n");
        for s in &self.steps {
            let l = &s.loss;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.epoch,
                s.step,
                l.l_con_inv.to_f64_lossy(),
                l.l_con_var.to_f64_lossy(),
                l.kl.to_f64_lossy(),
                l.l_rec.to_f64_lossy(),
                l.total.to_f64_lossy()
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Batches of one epoch as `(session, frames)`; each batch stays within one
/// traversal so repeated visits to a place never act as negatives.
fn epoch_plan(
    sessions: &[TrainingSession],
    m: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(usize, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0x7E57));
    let mut plan = Vec::new();
    for (s, session) in sessions.iter().enumerate() {
        let mut frames: Vec<usize> = (0..session.len()).collect();
        frames.shuffle(&mut rng);
        for chunk in frames.chunks_exact(m) {
            plan.push((s, chunk.to_vec()));
        }
    }
    plan.shuffle(&mut rng);
    plan
}

/// Stochastic gradient descent over shuffled batches.
///
/// Deterministic given `cfg.seed`. Aborts with [`Error::NonFinite`] naming
/// the first loss component that stops being finite.
pub fn train<T: Scalar>(
    sessions: &[TrainingSession],
    params: &ModelParams<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainHistory<T>)> {
    cfg.validate()?;
    let m = cfg.batch_size;
    let total_frames: usize = sessions.iter().map(|s| s.len()).sum();
    if total_frames < 2 * m {
        return Err(Error::domain(format!(
            "training needs at least {} scans, got {total_frames}",
            2 * m
        )));
    }
    if sessions.iter().all(|s| s.len() < m) {
        return Err(Error::domain("no session holds a full batch"));
    }
    let lr = T::lit(-cfg.learning_rate);
    let mut params = params.clone();
    let mut history = TrainHistory { steps: Vec::new() };
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(sessions, m, cfg.seed, epoch);
        for (step, (s, frames)) in plan.iter().enumerate() {
            let batch_seed = mix(cfg.seed, epoch as u64, step as u64);
            let batch = make_batch(
                &sessions[*s],
                frames,
                cfg.rotation,
                cfg.temporal_window,
                batch_seed,
            )?;
            let (loss, grads) = gradients(&batch, &params, cfg, batch_seed ^ 0xE5)?;
            if let Some(component) = loss.first_non_finite() {
                return Err(Error::NonFinite {
                    component,
                    epoch,
                    step,
                });
            }
            params.add_scaled(&grads, lr);
            if !params.is_finite() {
                return Err(Error::NonFinite {
                    component: "parameters",
                    epoch,
                    step,
                });
            }
            debug!("epoch {epoch} step {step}: total {}", loss.total);
            history.steps.push(StepRecord { epoch, step, loss });
        }
        if let Some(mean) = history.epoch_means().last() {
            info!(
                "epoch {epoch}: total {:.4} (inv {:.4}, var {:.4}, kl {:.4}, rec {:.4})",
                mean.total.to_f64_lossy(),
                mean.l_con_inv.to_f64_lossy(),
                mean.l_con_var.to_f64_lossy(),
                mean.kl.to_f64_lossy(),
                mean.l_rec.to_f64_lossy()
            );
        }
    }
    Ok((params, history))
}

/// Number of SGD steps one epoch takes over `sessions`.
pub fn steps_per_epoch(sessions: &[TrainingSession], batch_size: usize) -> usize {
    sessions.iter().map(|s| s.len() / batch_size).sum()
}
