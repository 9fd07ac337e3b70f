//! Variational encoder-decoder producing disentangled embeddings.
//!
//! The encoder is two 3x3 convolutions (tanh), a 2x2 average pool between
//! them, and a polar pool that averages the second feature map over
//! ring-by-sector bins around the sensor. With one sector the pool is a
//! rotation-invariant ring pool. The pooled descriptor is standardised per
//! scan, then a fully connected layer turns it into the feature map `M`, from which three linear heads predict
//! the invariant embedding, the variant mean and the variant log-variance.
//! The decoder maps a combined embedding back to `M`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, LeReader};
use crate::scalar::Scalar;
use crate::scan_synth::CartesianScan;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCPR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the Cartesian input scan; must be divisible by 2.
    pub input_side: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub rings: usize,
    /// Angular bins per ring.
    #[serde(default = "one")]
    pub sectors: usize,
    /// Feature map dimension `f`.
    pub feature_dim: usize,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    /// Width of the hidden tanh layer in the log-variance head; 0 makes the
    /// head a single linear map.
    #[serde(default)]
    pub lv_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 64,
            conv1_channels: 4,
            conv2_channels: 8,
            rings: 8,
            sectors: 1,
            feature_dim: 32,
            embed_dim: 16,
            lv_hidden: 0,
        }
    }
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn pooled_side(&self) -> usize {
        self.input_side / 2
    }

    pub fn descriptor_dim(&self) -> usize {
        self.conv2_channels * self.bins()
    }

    /// Number of polar pooling bins.
    pub fn bins(&self) -> usize {
        self.rings * self.sectors
    }

    /// Input width of the final log-variance layer.
    pub fn lv_input_dim(&self) -> usize {
        if self.lv_hidden == 0 {
            self.feature_dim
        } else {
            self.lv_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 2 || self.input_side % 2 != 0 {
            return Err(Error::config(format!(
                "input_side {} must be even and >= 2",
                self.input_side
            )));
        }
        for (name, v) in [
            ("conv1_channels", self.conv1_channels),
            ("conv2_channels", self.conv2_channels),
            ("rings", self.rings),
            ("sectors", self.sectors),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        let (_, counts) = bin_layout(self);
        if let Some(b) = counts.iter().position(|c| *c == 0) {
            return Err(Error::config(format!(
                "pooling bin {b} is empty for input_side {} with {} rings x {} sectors",
                self.input_side, self.rings, self.sectors
            )));
        }
        Ok(())
    }
}

/// Polar bin `ring * sectors + sector` of every pooled cell (`None` outside
/// the inscribed circle) and the number of cells per bin.
fn bin_layout(cfg: &ModelConfig) -> (Vec<Option<usize>>, Vec<usize>) {
    let h = cfg.pooled_side();
    // the sensor sits at input index side/2, i.e. pooled coordinate h/2 - 1/4
    let c = h as f64 / 2.0 - 0.25;
    let scale = h as f64 / 2.0;
    let sector_width = std::f64::consts::TAU / cfg.sectors as f64;
    let mut bins = Vec::with_capacity(h * h);
    let mut counts = vec![0usize; cfg.bins()];
    for p in 0..h {
        for q in 0..h {
            let (dx, dy) = (p as f64 - c, q as f64 - c);
            let r = (dx.hypot(dy) / scale * cfg.rings as f64).floor() as usize;
            if r < cfg.rings {
                let s = ((dy.atan2(dx).rem_euclid(std::f64::consts::TAU) / sector_width) as usize)
                    .min(cfg.sectors - 1);
                let b = r * cfg.sectors + s;
                counts[b] += 1;
                bins.push(Some(b));
            } else {
                bins.push(None);
            }
        }
    }
    (bins, counts)
}

macro_rules! param_tensors {
    ($mac:ident) => {
        $mac!(
            conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b, inv_w, inv_b, mu_w, mu_b, lvh_w, lvh_b,
            lv_w, lv_b, dec_w, dec_b
        )
    };
}

/// All trainable weights. Also used as the gradient container.
///
/// Layouts: `conv1_w[c][k]`, `conv2_w[c2][c1][k]` with `k = 3*ki + kj`;
/// dense weights are `[out][in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub fc_w: Vec<T>,
    pub fc_b: Vec<T>,
    pub inv_w: Vec<T>,
    pub inv_b: Vec<T>,
    pub mu_w: Vec<T>,
    pub mu_b: Vec<T>,
    /// Hidden log-variance layer; empty when `lv_hidden` is 0.
    pub lvh_w: Vec<T>,
    pub lvh_b: Vec<T>,
    pub lv_w: Vec<T>,
    pub lv_b: Vec<T>,
    pub dec_w: Vec<T>,
    pub dec_b: Vec<T>,
}

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 16] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b", "inv_w", "inv_b", "mu_w", "mu_b",
    "lvh_w", "lvh_b", "lv_w", "lv_b", "dec_w", "dec_b",
];

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (c1, c2, f, d) = (
            config.conv1_channels,
            config.conv2_channels,
            config.feature_dim,
            config.embed_dim,
        );
        let z = |n: usize| vec![T::zero(); n];
        Ok(Self {
            config,
            conv1_w: z(c1 * 9),
            conv1_b: z(c1),
            conv2_w: z(c2 * c1 * 9),
            conv2_b: z(c2),
            fc_w: z(f * config.descriptor_dim()),
            fc_b: z(f),
            inv_w: z(d * f),
            inv_b: z(d),
            mu_w: z(d * f),
            mu_b: z(d),
            lvh_w: z(config.lv_hidden * f),
            lvh_b: z(config.lv_hidden),
            lv_w: z(d * config.lv_input_dim()),
            lv_b: z(d),
            dec_w: z(f * d),
            dec_b: z(f),
        })
    }

    /// Glorot-uniform weights, zero biases. The log-variance head starts
    /// ten times smaller so initial variances sit near the unit prior.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, f, d) = (
            config.conv1_channels,
            config.conv2_channels,
            config.feature_dim,
            config.embed_dim,
        );
        let mut fill = |w: &mut Vec<T>, fan_in: usize, fan_out: usize, gain: f64| {
            let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w.iter_mut() {
                *v = T::lit(rng.random_range(-a..a));
            }
        };
        fill(&mut p.conv1_w, 9, 9 * c1, 1.0);
        fill(&mut p.conv2_w, 9 * c1, 9 * c2, 1.0);
        fill(&mut p.fc_w, config.descriptor_dim(), f, 0.3);
        fill(&mut p.inv_w, f, d, 1.0);
        fill(&mut p.mu_w, f, d, 1.0);
        fill(&mut p.lvh_w, f, config.lv_hidden, 1.0);
        fill(&mut p.lv_w, config.lv_input_dim(), d, 0.1);
        fill(&mut p.dec_w, d, f, 1.0);
        Ok(p)
    }

    /// Zeroed tensor set with the same configuration.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn tensors(&self) -> [&[T]; 16] {
        macro_rules! refs {
            ($($f:ident),*) => { [$(&self.$f[..]),*] };
        }
        param_tensors!(refs)
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 16] {
        macro_rules! refs {
            ($($f:ident),*) => { [$(&mut self.$f),*] };
        }
        param_tensors!(refs)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * *b;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Converts every weight to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.config).expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a = U::lit(b.to_f64_lossy());
            }
        }
        out
    }
}

/// Encoder output for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentOutput<T> {
    pub z_inv: Vec<T>,
    pub mu_var: Vec<T>,
    /// Clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Vec<T>,
    pub feature_map: Vec<T>,
}

/// Retrieval-time representation of a scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub z: Vec<T>,
    pub uncertainty: T,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache<T> {
    input: Vec<T>,
    a1: Vec<T>,
    p1: Vec<T>,
    a2: Vec<T>,
    /// Standardised pooled descriptor and the scale it was divided by.
    descriptor: Vec<T>,
    desc_scale: T,
    /// Hidden log-variance activations; empty for a linear head.
    lv_hidden: Vec<T>,
    /// Whether each raw log-variance was inside the clamp range.
    lv_active: Vec<bool>,
    pub latent: LatentOutput<T>,
}

/// Upstream gradients on the encoder outputs of one scan.
#[derive(Debug, Clone)]
pub(crate) struct LatentGrad<T> {
    pub z_inv: Vec<T>,
    pub mu_var: Vec<T>,
    pub log_var: Vec<T>,
    pub feature_map: Vec<T>,
}

impl<T: Scalar> LatentGrad<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            z_inv: vec![T::zero(); d],
            mu_var: vec![T::zero(); d],
            log_var: vec![T::zero(); d],
            feature_map: vec![T::zero(); cfg.feature_dim],
        }
    }
}

fn tanh_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        *x = x.tanh();
    }
}

/// `out[o] = b[o] + sum_i w[o][i] * x[i]`
fn dense<T: Scalar>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            w[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .fold(bias, |acc, (wi, xi)| acc + *wi * *xi)
        })
        .collect()
}

/// Accumulates `dw += g x^T`, `db += g` and returns `w^T g`.
fn dense_backward<T: Scalar>(w: &[T], x: &[T], g: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    let n_in = x.len();
    let mut dx = vec![T::zero(); n_in];
    for (o, &go) in g.iter().enumerate() {
        db[o] += go;
        if go == T::zero() {
            continue;
        }
        let row = o * n_in..(o + 1) * n_in;
        for ((dwi, wi), (xi, dxi)) in dw[row.clone()]
            .iter_mut()
            .zip(&w[row])
            .zip(x.iter().zip(dx.iter_mut()))
        {
            *dwi += go * *xi;
            *dxi += go * *wi;
        }
    }
    dx
}

/// Same-padded 3x3 convolution over `in_ch` square planes of side `side`.
fn conv3x3<T: Scalar>(input: &[T], in_ch: usize, side: usize, w: &[T], b: &[T]) -> Vec<T> {
    let out_ch = b.len();
    let plane = side * side;
    let mut out = vec![T::zero(); out_ch * plane];
    for o in 0..out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..in_ch {
            let src = &input[c * plane..(c + 1) * plane];
            for ki in 0..3 {
                for kj in 0..3 {
                    let wk = w[(o * in_ch + c) * 9 + ki * 3 + kj];
                    if wk == T::zero() {
                        continue;
                    }
                    for i in 0..side {
                        let si = i as isize + ki as isize - 1;
                        if si < 0 || si >= side as isize {
                            continue;
                        }
                        let (j_lo, j_hi) = (
                            if kj == 0 { 1 } else { 0 },
                            if kj == 2 { side - 1 } else { side },
                        );
                        let srow = &src[si as usize * side..(si as usize + 1) * side];
                        let drow = &mut dst[i * side..(i + 1) * side];
                        for j in j_lo..j_hi {
                            drow[j] += wk * srow[j + kj - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3`]: accumulates weight and bias gradients and, when
/// requested, returns the input gradient.
fn conv3x3_backward<T: Scalar>(
    input: &[T],
    in_ch: usize,
    side: usize,
    w: &[T],
    grad_out: &[T],
    dw: &mut [T],
    db: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let out_ch = db.len();
    let plane = side * side;
    let mut din = want_input_grad.then(|| vec![T::zero(); in_ch * plane]);
    for o in 0..out_ch {
        let g = &grad_out[o * plane..(o + 1) * plane];
        db[o] += g.iter().copied().sum::<T>();
        for c in 0..in_ch {
            let src = &input[c * plane..(c + 1) * plane];
            for ki in 0..3 {
                for kj in 0..3 {
                    let widx = (o * in_ch + c) * 9 + ki * 3 + kj;
                    let wk = w[widx];
                    let mut acc = T::zero();
                    for i in 0..side {
                        let si = i as isize + ki as isize - 1;
                        if si < 0 || si >= side as isize {
                            continue;
                        }
                        let si = si as usize;
                        let (j_lo, j_hi) = (
                            if kj == 0 { 1 } else { 0 },
                            if kj == 2 { side - 1 } else { side },
                        );
                        let grow = &g[i * side..(i + 1) * side];
                        let srow = &src[si * side..(si + 1) * side];
                        for j in j_lo..j_hi {
                            acc += grow[j] * srow[j + kj - 1];
                        }
                        if let Some(din) = din.as_mut() {
                            let drow = &mut din[c * plane + si * side..c * plane + (si + 1) * side];
                            for j in j_lo..j_hi {
                                drow[j + kj - 1] += grow[j] * wk;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    din
}

const STANDARDISE_EPS: f64 = 1e-6;

/// Zero mean, unit variance across the vector; returns the divisor used.
fn standardise<T: Scalar>(x: &[T]) -> (Vec<T>, T) {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, v| a + *v) / n;
    let var = x
        .iter()
        .fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean))
        / n;
    let scale = (var + T::lit(STANDARDISE_EPS)).sqrt();
    (x.iter().map(|v| (*v - mean) / scale).collect(), scale)
}

fn standardise_backward<T: Scalar>(y: &[T], scale: T, grad: &[T]) -> Vec<T> {
    let n = T::lit(y.len() as f64);
    let g_mean = grad.iter().fold(T::zero(), |a, v| a + *v) / n;
    let gy_mean = grad.iter().zip(y).fold(T::zero(), |a, (g, v)| a + *g * *v) / n;
    grad.iter()
        .zip(y)
        .map(|(g, v)| (*g - g_mean - *v * gy_mean) / scale)
        .collect()
}

fn avg_pool2<T: Scalar>(input: &[T], ch: usize, side: usize) -> Vec<T> {
    let h = side / 2;
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); ch * h * h];
    for c in 0..ch {
        let src = &input[c * side * side..(c + 1) * side * side];
        for p in 0..h {
            for q in 0..h {
                let s = src[2 * p * side + 2 * q]
                    + src[2 * p * side + 2 * q + 1]
                    + src[(2 * p + 1) * side + 2 * q]
                    + src[(2 * p + 1) * side + 2 * q + 1];
                out[c * h * h + p * h + q] = s * quarter;
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Scalar>(grad: &[T], ch: usize, side: usize) -> Vec<T> {
    let h = side / 2;
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); ch * side * side];
    for c in 0..ch {
        for p in 0..h {
            for q in 0..h {
                let g = grad[c * h * h + p * h + q] * quarter;
                let base = c * side * side;
                out[base + 2 * p * side + 2 * q] = g;
                out[base + 2 * p * side + 2 * q + 1] = g;
                out[base + (2 * p + 1) * side + 2 * q] = g;
                out[base + (2 * p + 1) * side + 2 * q + 1] = g;
            }
        }
    }
    out
}

impl<T: Scalar> ModelParams<T> {
    fn check_input(&self, scan: &CartesianScan) -> Result<()> {
        if scan.side != self.config.input_side {
            return Err(Error::dim("encode", self.config.input_side, scan.side));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, scan: &CartesianScan) -> Result<ForwardCache<T>> {
        self.check_input(scan)?;
        let cfg = &self.config;
        let side = cfg.input_side;
        let h = cfg.pooled_side();
        let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);

        let input: Vec<T> = scan.intensities.iter().map(|v| T::lit(*v as f64)).collect();
        let mut a1 = conv3x3(&input, 1, side, &self.conv1_w, &self.conv1_b);
        tanh_inplace(&mut a1);
        let p1 = avg_pool2(&a1, c1, side);
        let mut a2 = conv3x3(&p1, c1, h, &self.conv2_w, &self.conv2_b);
        tanh_inplace(&mut a2);

        let (bins, counts) = bin_layout(cfg);
        let nb = cfg.bins();
        let mut descriptor = vec![T::zero(); cfg.descriptor_dim()];
        for c in 0..c2 {
            for (cell, bin) in bins.iter().enumerate() {
                if let Some(b) = bin {
                    descriptor[c * nb + b] += a2[c * h * h + cell];
                }
            }
            for b in 0..nb {
                descriptor[c * nb + b] /= T::lit(counts[b] as f64);
            }
        }

        let (descriptor, desc_scale) = standardise(&descriptor);
        let mut feature_map = dense(&self.fc_w, &self.fc_b, &descriptor);
        tanh_inplace(&mut feature_map);
        let z_inv = dense(&self.inv_w, &self.inv_b, &feature_map);
        let mu_var = dense(&self.mu_w, &self.mu_b, &feature_map);
        let lv_hidden = if cfg.lv_hidden == 0 {
            Vec::new()
        } else {
            let mut h = dense(&self.lvh_w, &self.lvh_b, &feature_map);
            tanh_inplace(&mut h);
            h
        };
        let lv_input = if cfg.lv_hidden == 0 {
            &feature_map
        } else {
            &lv_hidden
        };
        let raw_lv = dense(&self.lv_w, &self.lv_b, lv_input);
        let (lo, hi) = (T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        let lv_active = raw_lv.iter().map(|v| *v >= lo && *v <= hi).collect();
        let log_var = raw_lv.iter().map(|v| v.max(lo).min(hi)).collect();

        Ok(ForwardCache {
            input,
            a1,
            p1,
            a2,
            descriptor,
            desc_scale,
            lv_hidden,
            lv_active,
            latent: LatentOutput {
                z_inv,
                mu_var,
                log_var,
                feature_map,
            },
        })
    }

    /// Accumulates encoder parameter gradients for one scan into `grads`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache<T>,
        upstream: &LatentGrad<T>,
        grads: &mut ModelParams<T>,
    ) {
        let cfg = &self.config;
        let side = cfg.input_side;
        let h = cfg.pooled_side();
        let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);
        let m = &cache.latent.feature_map;

        let mut d_feat = upstream.feature_map.clone();
        let add = |acc: &mut Vec<T>, v: Vec<T>| acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        let g = dense_backward(
            &self.inv_w,
            m,
            &upstream.z_inv,
            &mut grads.inv_w,
            &mut grads.inv_b,
        );
        add(&mut d_feat, g);
        let g = dense_backward(
            &self.mu_w,
            m,
            &upstream.mu_var,
            &mut grads.mu_w,
            &mut grads.mu_b,
        );
        add(&mut d_feat, g);
        let d_lv: Vec<T> = upstream
            .log_var
            .iter()
            .zip(&cache.lv_active)
            .map(|(g, active)| if *active { *g } else { T::zero() })
            .collect();
        if cfg.lv_hidden == 0 {
            let g = dense_backward(&self.lv_w, m, &d_lv, &mut grads.lv_w, &mut grads.lv_b);
            add(&mut d_feat, g);
        } else {
            let hid = &cache.lv_hidden;
            let d_hid = dense_backward(&self.lv_w, hid, &d_lv, &mut grads.lv_w, &mut grads.lv_b);
            let d_pre: Vec<T> = d_hid
                .iter()
                .zip(hid)
                .map(|(g, a)| *g * (T::one() - *a * *a))
                .collect();
            let g = dense_backward(&self.lvh_w, m, &d_pre, &mut grads.lvh_w, &mut grads.lvh_b);
            add(&mut d_feat, g);
        }

        let d_feat_pre: Vec<T> = d_feat
            .iter()
            .zip(m)
            .map(|(g, a)| *g * (T::one() - *a * *a))
            .collect();
        let d_norm = dense_backward(
            &self.fc_w,
            &cache.descriptor,
            &d_feat_pre,
            &mut grads.fc_w,
            &mut grads.fc_b,
        );
        let d_desc = standardise_backward(&cache.descriptor, cache.desc_scale, &d_norm);

        let (bins, counts) = bin_layout(cfg);
        let nb = cfg.bins();
        let mut d_a2 = vec![T::zero(); c2 * h * h];
        for c in 0..c2 {
            for (cell, bin) in bins.iter().enumerate() {
                if let Some(b) = bin {
                    let idx = c * h * h + cell;
                    let a = cache.a2[idx];
                    d_a2[idx] = d_desc[c * nb + b] / T::lit(counts[*b] as f64) * (T::one() - a * a);
                }
            }
        }
        let d_p1 = conv3x3_backward(
            &cache.p1,
            c1,
            h,
            &self.conv2_w,
            &d_a2,
            &mut grads.conv2_w,
            &mut grads.conv2_b,
            true,
        )
        .expect("input grad requested");
        let mut d_a1 = avg_pool2_backward(&d_p1, c1, side);
        for (g, a) in d_a1.iter_mut().zip(&cache.a1) {
            *g *= T::one() - *a * *a;
        }
        conv3x3_backward(
            &cache.input,
            1,
            side,
            &self.conv1_w,
            &d_a1,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
            false,
        );
    }
}

/// Encodes a scan into its four latent components.
pub fn encode<T: Scalar>(params: &ModelParams<T>, scan: &CartesianScan) -> Result<LatentOutput<T>> {
    params.forward(scan).map(|c| c.latent)
}

/// Standard normal draws of length `d` from `seed`.
pub fn draw_noise<T: Scalar>(d: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn clamp_log_var<T: Scalar>(lv: T) -> T {
    lv.max(T::lit(LOG_VAR_MIN)).min(T::lit(LOG_VAR_MAX))
}

/// Reparameterised sample `mu + exp(log_var / 2) * eps`, `eps ~ N(0, I)` from `seed`.
pub fn sample_variant<T: Scalar>(mu_var: &[T], log_var: &[T], seed: u64) -> Result<Vec<T>> {
    if mu_var.len() != log_var.len() {
        return Err(Error::dim("sample_variant", mu_var.len(), log_var.len()));
    }
    let eps = draw_noise::<T>(mu_var.len(), seed);
    Ok(reparameterise(mu_var, log_var, &eps))
}

pub(crate) fn reparameterise<T: Scalar>(mu_var: &[T], log_var: &[T], eps: &[T]) -> Vec<T> {
    let half = T::lit(0.5);
    mu_var
        .iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| *m + (clamp_log_var(*lv) * half).exp() * *e)
        .collect()
}

/// Elementwise sum of the invariant and variant parts.
pub fn combine<T: Scalar>(z_inv: &[T], z_var: &[T]) -> Result<Vec<T>> {
    if z_inv.len() != z_var.len() {
        return Err(Error::dim("combine", z_inv.len(), z_var.len()));
    }
    Ok(z_inv.iter().zip(z_var).map(|(a, b)| *a + *b).collect())
}

/// Reconstructs the feature map from a combined embedding.
pub fn decode<T: Scalar>(params: &ModelParams<T>, z: &[T]) -> Result<Vec<T>> {
    if z.len() != params.config.embed_dim {
        return Err(Error::dim("decode", params.config.embed_dim, z.len()));
    }
    Ok(dense(&params.dec_w, &params.dec_b, z))
}

/// Deterministic embedding `z_inv + mu_var` and its scalar uncertainty, the
/// mean predicted variance over latent dimensions.
pub fn inference_embedding<T: Scalar>(latent: &LatentOutput<T>) -> Embedding<T> {
    let z = latent
        .z_inv
        .iter()
        .zip(&latent.mu_var)
        .map(|(a, b)| *a + *b)
        .collect();
    let d = T::lit(latent.log_var.len().max(1) as f64);
    let uncertainty = latent.log_var.iter().map(|lv| lv.exp()).sum::<T>() / d;
    Embedding { z, uncertainty }
}

/// Writes a checkpoint: magic, u32 version, eight u32 dims (input side, conv1
/// channels, conv2 channels, rings, sectors, f, d, log-variance hidden width),
/// u64 weight count, then every
/// tensor as f32 in [`TENSOR_NAMES`] order.
pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let c = &params.config;
    let mut buf = Vec::with_capacity(40 + 4 * params.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.input_side,
        c.conv1_channels,
        c.conv2_channels,
        c.rings,
        c.sectors,
        c.feature_dim,
        c.embed_dim,
        c.lv_hidden,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(params.param_count() as u64).to_le_bytes());
    for t in params.tensors() {
        for v in t {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &std::path::Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(params))
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = LeReader::new(bytes, "checkpoint");
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        input_side: dims[0],
        conv1_channels: dims[1],
        conv2_channels: dims[2],
        rings: dims[3],
        sectors: dims[4],
        feature_dim: dims[5],
        embed_dim: dims[6],
        lv_hidden: dims[7],
    };
    let mut params = ModelParams::<T>::zeros(config).map_err(|e| Error::format(e.to_string()))?;
    let count = r.u64()? as usize;
    if count != params.param_count() {
        return Err(Error::format(format!(
            "checkpoint holds {count} weights, dims imply {}",
            params.param_count()
        )));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = T::lit(r.f32()? as f64);
        }
    }
    r.finish()?;
    Ok(params)
}

pub fn load_checkpoint<T: Scalar>(path: &std::path::Path) -> Result<ModelParams<T>> {
    parse_checkpoint(&std::fs::read(path)?)
}
