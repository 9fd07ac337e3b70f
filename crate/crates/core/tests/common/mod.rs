//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use introspect_pr::model::{ModelConfig, ModelParams};
use introspect_pr::scan_synth::{CartesianScan, Pose};
use introspect_pr::training::{
    gradients, make_batch, total_loss, LossWeights, RotationPolicy, TrainConfig, TrainingSession,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Smallest model the encoder supports: f = 8, d = 4.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_side: 16,
        conv1_channels: 2,
        conv2_channels: 2,
        rings: 2,
        sectors: 2,
        feature_dim: 8,
        embed_dim: 4,
        lv_hidden: 3,
    }
}

pub fn random_session(n: usize, seed: u64) -> TrainingSession {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scans = (0..n)
        .map(|i| {
            let mut s = CartesianScan::zeros(16, 1.0, i as u64);
            s.intensities
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.0..1.0));
            s
        })
        .collect();
    let poses = (0..n)
        .map(|i| Pose {
            x: i as f64,
            y: 0.0,
            heading: 0.0,
            timestamp: i as f64,
        })
        .collect();
    TrainingSession::new(scans, poses).unwrap()
}

/// Worst elementwise disagreement between the analytic gradient and central
/// differences on a batch of two, relative to the larger magnitude with a
/// 1e-3 floor.
pub fn worst_gradient_error(weights: LossWeights) -> f64 {
    let session = random_session(4, 11);
    let batch = make_batch(&session, &[0, 2], RotationPolicy::Fixed(0.7), 1, 5).unwrap();
    let cfg = TrainConfig {
        loss_weights: weights,
        ..TrainConfig::default()
    };
    let params = ModelParams::<f64>::init(tiny_config(), 3).unwrap();
    let seed = 99;
    let (_, analytic) = gradients(&batch, &params, &cfg, seed).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (t, grad) in analytic.tensors().iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + FD_STEP;
            let up = total_loss(&batch, &probe, &cfg, seed).unwrap().total;
            probe.tensors_mut()[t][i] = orig - FD_STEP;
            let down = total_loss(&batch, &probe, &cfg, seed).unwrap().total;
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn only(inv: f64, var: f64, kl: f64, rec: f64) -> LossWeights {
    LossWeights { inv, var, kl, rec }
}

/// KL of `N(mu, var)` from `N(0, 1)` by Simpson's rule on `q log(q/p)`.
pub fn kl_by_quadrature(mu: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let (lo, hi) = (mu - 14.0 * sd, mu + 14.0 * sd);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let integrand = |x: f64| {
        let log_q = -0.5 * ((x - mu) * (x - mu) / var + var.ln() + ln_2pi);
        let log_p = -0.5 * (x * x + ln_2pi);
        log_q.exp() * (log_q - log_p)
    };
    let mut sum = integrand(lo) + integrand(hi);
    for i in 1..n {
        sum += integrand(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}
