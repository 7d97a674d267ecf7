//! Residual-quantized autoencoder that turns fused item vectors into
//! fixed-length semantic ids.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{debug, info, warn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emb;
use crate::optim::{derive_seed, gaussian, gaussian_matrix, rng_from_seed, Adam, Parameters, SeededRng};
use crate::{Error, Result, Scalar};

/// Two-layer perceptron `y = relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Array2<T>,
    h: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: gaussian_matrix(rng, input, hidden, (2.0 / input as f64).sqrt()),
            b1: Array1::zeros(hidden),
            w2: gaussian_matrix(rng, hidden, output, (1.0 / hidden as f64).sqrt()),
            b2: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, MlpCache<T>) {
        let mut h = x.dot(&self.w1) + &self.b1;
        h.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        let y = h.dot(&self.w2) + &self.b2;
        (y, MlpCache { x: x.to_owned(), h })
    }

    /// Accumulate parameter gradients into `grads` and return `∂L/∂x`.
    pub fn backward(&self, cache: &MlpCache<T>, dy: ArrayView2<'_, T>, grads: &mut Mlp<T>) -> Array2<T> {
        grads.w2 += &cache.h.t().dot(&dy);
        grads.b2 += &dy.sum_axis(Axis(0));
        let mut dh = dy.dot(&self.w2.t());
        dh.zip_mut_with(&cache.h, |g, &h| {
            if h <= T::zero() {
                *g = T::zero();
            }
        });
        grads.w1 += &cache.x.t().dot(&dh);
        grads.b1 += &dh.sum_axis(Axis(0));
        dh.dot(&self.w1.t())
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w1".into(), self.w1.shape().to_vec()),
            ("b1".into(), self.b1.shape().to_vec()),
            ("w2".into(), self.w2.shape().to_vec()),
            ("b2".into(), self.b2.shape().to_vec()),
        ]
    }
}

/// One quantization level: `K` code vectors of width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub level: u32,
    pub vectors: Array2<T>,
    pub usage_counts: Vec<u64>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(level: u32, vectors: Array2<T>) -> Self {
        let k = vectors.nrows();
        Self {
            level,
            vectors,
            usage_counts: vec![0; k],
        }
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Nearest code by squared distance; ties go to the lowest index.
    pub fn nearest(&self, r: ArrayView1<'_, T>) -> (u32, T) {
        nearest_row(self.vectors.view(), r)
    }
}

fn sq_dist<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

fn nearest_row<T: Scalar>(rows: ArrayView2<'_, T>, r: ArrayView1<'_, T>) -> (u32, T) {
    let mut best = (0u32, T::infinity());
    for (k, row) in rows.rows().into_iter().enumerate() {
        let d = sq_dist(row, r);
        if d < best.1 {
            best = (k as u32, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<T> {
    pub codes: Vec<u32>,
    /// `‖r_0‖ .. ‖r_M‖`.
    pub residual_norms: Vec<T>,
    /// `Σ_m b_{m,c_m}`, summed level by level.
    pub quantized: Array1<T>,
    /// Final residual `r_M`.
    pub residual: Array1<T>,
}

fn norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

/// Greedy residual quantization of `z`.
pub fn quantize<T: Scalar>(z: ArrayView1<'_, T>, codebooks: &[Codebook<T>]) -> QuantizationResult<T> {
    let mut r = z.to_owned();
    let mut quantized = Array1::<T>::zeros(z.len());
    let mut codes = Vec::with_capacity(codebooks.len());
    let mut residual_norms = vec![norm(r.view())];
    for cb in codebooks {
        let (c, _) = cb.nearest(r.view());
        let b = cb.vectors.row(c as usize);
        r -= &b;
        quantized += &b;
        codes.push(c);
        residual_norms.push(norm(r.view()));
    }
    QuantizationResult {
        codes,
        residual_norms,
        quantized,
        residual: r,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqVaeConfig {
    #[serde(rename = "M")]
    pub n_levels: usize,
    #[serde(rename = "K")]
    pub codebook_size: usize,
    pub hidden: usize,
    pub latent: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lambda_q: f64,
    pub lambda_d: f64,
    #[serde(rename = "beta")]
    pub beta_commit: f64,
    pub tau: f64,
    pub kmeans_iters: usize,
    pub kmeans_sample: usize,
    pub dead_code_noise: f64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            n_levels: 4,
            codebook_size: 512,
            hidden: 512,
            latent: 256,
            lr: 1e-4,
            epochs: 100,
            batch: 256,
            seed: 42,
            lambda_q: 0.25,
            lambda_d: 0.01,
            beta_commit: 0.25,
            tau: 1.0,
            kmeans_iters: 10,
            kmeans_sample: 4096,
            dead_code_noise: 0.01,
        }
    }
}

impl RqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 || self.codebook_size == 0 || self.latent == 0 || self.hidden == 0 {
            return Err(Error::config("tokenizer levels, codebook size, hidden and latent widths must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("tokenizer batch must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("soft-assignment temperature must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("tokenizer learning rate must be positive"));
        }
        if self.codebook_size > u32::MAX as usize {
            return Err(Error::config("codebook too large"));
        }
        Ok(())
    }
}

/// Per-sample-mean loss components of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub quant: f64,
    pub div: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVae<T> {
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub codebooks: Vec<Codebook<T>>,
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub beta_commit: f64,
    pub tau: f64,
}

/// Quantities treated as constants by the stop-gradient operator, captured
/// at the current parameters. Evaluating the loss with a fixed snapshot
/// gives a smooth surrogate whose gradient equals the training gradient at
/// the snapshot point.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<T> {
    /// `codes[i][m]`.
    pub codes: Vec<Vec<u32>>,
    /// `quantized − z`, added to the decoder input.
    pub delta: Array2<T>,
    /// Sum of chosen codes before level `m`, per level.
    pub offsets: Vec<Array2<T>>,
    /// `sg(r_{m−1})` per level.
    pub residuals: Vec<Array2<T>>,
    /// `sg(b_{m,c})` per level.
    pub chosen: Vec<Array2<T>>,
}

struct Forward<T> {
    enc: MlpCache<T>,
    dec: MlpCache<T>,
    x: Array2<T>,
    x_hat: Array2<T>,
    /// Live residuals `z − offset_m`.
    residuals: Vec<Array2<T>>,
    /// Soft assignments per level, `B × K`.
    soft: Vec<Array2<T>>,
    usage: Vec<Array1<f64>>,
    parts: LossParts,
}

impl<T: Scalar> RqVae<T> {
    pub fn new(input_dim: usize, cfg: &RqVaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "rqvae/init"));
        let encoder = Mlp::new(&mut rng, input_dim, cfg.hidden, cfg.latent);
        let decoder = Mlp::new(&mut rng, cfg.latent, cfg.hidden, input_dim);
        let codebooks = (0..cfg.n_levels)
            .map(|m| Codebook::new(m as u32 + 1, gaussian_matrix(&mut rng, cfg.codebook_size, cfg.latent, 0.1)))
            .collect();
        Ok(Self {
            encoder,
            decoder,
            codebooks,
            lambda_q: cfg.lambda_q,
            lambda_d: cfg.lambda_d,
            beta_commit: cfg.beta_commit,
            tau: cfg.tau,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.size())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            codebooks: self
                .codebooks
                .iter()
                .map(|c| Codebook::new(c.level, Array2::zeros(c.vectors.raw_dim())))
                .collect(),
            ..*self
        }
    }

    pub fn encode(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.encoder.forward(x).0
    }

    pub fn decode(&self, z: ArrayView2<'_, T>) -> Array2<T> {
        self.decoder.forward(z).0
    }

    /// Quantize one fused vector, also returning its reconstruction.
    pub fn quantize_item(&self, x: ArrayView1<'_, T>) -> (QuantizationResult<T>, Array1<T>) {
        let x2 = x.insert_axis(Axis(0));
        let z = self.encode(x2);
        let q = quantize(z.row(0), &self.codebooks);
        let rec = self.decode(q.quantized.view().insert_axis(Axis(0)));
        (q, rec.row(0).to_owned())
    }

    /// Codes of every row of `x`.
    pub fn codes(&self, x: ArrayView2<'_, T>) -> Vec<Vec<u32>> {
        let z = self.encode(x);
        z.rows().into_iter().map(|r| quantize(r, &self.codebooks).codes).collect()
    }

    /// Snapshot of the stop-gradient quantities for batch `x`.
    pub fn freeze(&self, x: ArrayView2<'_, T>) -> Frozen<T> {
        let z = self.encode(x);
        let (b, h) = z.dim();
        let m = self.n_levels();
        let mut codes = vec![Vec::with_capacity(m); b];
        let mut offsets = Vec::with_capacity(m);
        let mut residuals = Vec::with_capacity(m);
        let mut chosen = Vec::with_capacity(m);
        let mut offset = Array2::<T>::zeros((b, h));
        for cb in &self.codebooks {
            let r = &z - &offset;
            let mut sel = Array2::<T>::zeros((b, h));
            for i in 0..b {
                let (c, _) = cb.nearest(r.row(i));
                codes[i].push(c);
                sel.row_mut(i).assign(&cb.vectors.row(c as usize));
            }
            offsets.push(offset.clone());
            residuals.push(r);
            offset += &sel;
            chosen.push(sel);
        }
        Frozen {
            codes,
            delta: &offset - &z,
            offsets,
            residuals,
            chosen,
        }
    }

    fn forward(&self, x: ArrayView2<'_, T>, frozen: &Frozen<T>) -> Forward<T> {
        let (b, _) = x.dim();
        let bf = b.max(1) as f64;
        let (z, enc) = self.encoder.forward(x);
        let dec_in = &z + &frozen.delta;
        let (x_hat, dec) = self.decoder.forward(dec_in.view());
        let recon = sum_sq(&(&x.to_owned() - &x_hat)) / bf;
        let mut quant = 0.0;
        let mut div = 0.0;
        let mut residuals = Vec::with_capacity(self.n_levels());
        let mut soft = Vec::with_capacity(self.n_levels());
        let mut usage = Vec::with_capacity(self.n_levels());
        for (m, cb) in self.codebooks.iter().enumerate() {
            let r = &z - &frozen.offsets[m];
            let mut codebook_term = 0.0;
            let mut commit_term = 0.0;
            for i in 0..b {
                let c = frozen.codes[i][m] as usize;
                codebook_term += sq_dist(frozen.residuals[m].row(i), cb.vectors.row(c)).as_f64();
                commit_term += sq_dist(r.row(i), frozen.chosen[m].row(i)).as_f64();
            }
            quant += (codebook_term + self.beta_commit * commit_term) / bf;
            let q = soft_assign(r.view(), cb.vectors.view(), self.tau);
            let p = if b == 0 {
                Array1::zeros(cb.size())
            } else {
                q.map(|v| v.as_f64()).sum_axis(Axis(0)) / bf
            };
            if b > 0 {
                div += p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            }
            residuals.push(r);
            soft.push(q);
            usage.push(p);
        }
        let total = recon + self.lambda_q * quant + self.lambda_d * div;
        Forward {
            enc,
            dec,
            x: x.to_owned(),
            x_hat,
            residuals,
            soft,
            usage,
            parts: LossParts { total, recon, quant, div },
        }
    }

    /// Loss of batch `x` with stop-gradient quantities taken from `frozen`.
    pub fn surrogate_loss(&self, x: ArrayView2<'_, T>, frozen: &Frozen<T>) -> LossParts {
        self.forward(x, frozen).parts
    }

    /// Loss of batch `x` at the current parameters.
    pub fn loss_total(&self, x: ArrayView2<'_, T>) -> LossParts {
        let frozen = self.freeze(x);
        self.surrogate_loss(x, &frozen)
    }

    /// Loss, accumulated parameter gradients and `∂L/∂x`.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, T>, grads: &mut RqVae<T>) -> (LossParts, Array2<T>, Vec<Vec<u32>>) {
        let frozen = self.freeze(x);
        let fwd = self.forward(x, &frozen);
        let dx = self.backward(&fwd, &frozen, grads);
        (fwd.parts, dx, frozen.codes)
    }

    fn backward(&self, fwd: &Forward<T>, frozen: &Frozen<T>, grads: &mut RqVae<T>) -> Array2<T> {
        let b = fwd.x.nrows();
        if b == 0 {
            return Array2::zeros(fwd.x.raw_dim());
        }
        let inv_b = T::of(1.0 / b as f64);
        let two = T::of(2.0);
        let mut dx_direct = (&fwd.x - &fwd.x_hat) * (two * inv_b);
        let d_xhat = dx_direct.mapv(|v| -v);
        // Straight-through: the decoder input gradient reaches z unchanged.
        let mut dz = self.decoder.backward(&fwd.dec, d_xhat.view(), &mut grads.decoder);
        let lq = T::of(self.lambda_q);
        let ld = self.lambda_d;
        let beta = T::of(self.beta_commit);
        let tau2 = T::of(2.0 / self.tau);
        for (m, cb) in self.codebooks.iter().enumerate() {
            let r = &fwd.residuals[m];
            let gcb = &mut grads.codebooks[m].vectors;
            for i in 0..b {
                let c = frozen.codes[i][m] as usize;
                let mut grow = gcb.row_mut(c);
                for ((g, &bv), &rf) in grow.iter_mut().zip(cb.vectors.row(c)).zip(frozen.residuals[m].row(i)) {
                    *g += lq * two * (bv - rf) * inv_b;
                }
                let mut dzr = dz.row_mut(i);
                for ((g, &rv), &bf) in dzr.iter_mut().zip(r.row(i)).zip(frozen.chosen[m].row(i)) {
                    *g += lq * beta * two * (rv - bf) * inv_b;
                }
            }
            if ld != 0.0 {
                let p = &fwd.usage[m];
                let gk: Vec<f64> = p.iter().map(|&v| if v > 0.0 { v.ln() + 1.0 } else { 0.0 }).collect();
                let q = &fwd.soft[m];
                let k = cb.size();
                for i in 0..b {
                    let qi = q.row(i);
                    let mean: f64 = (0..k).map(|j| qi[j].as_f64() * gk[j]).sum();
                    for j in 0..k {
                        let ds = ld * qi[j].as_f64() * (gk[j] - mean) / b as f64;
                        if ds == 0.0 {
                            continue;
                        }
                        let ds = T::of(ds);
                        let bk = cb.vectors.row(j);
                        let ri = r.row(i);
                        let mut grow = gcb.row_mut(j);
                        for t in 0..ri.len() {
                            let diff = tau2 * (ri[t] - bk[t]) * ds;
                            grow[t] += diff;
                            dz[[i, t]] -= diff;
                        }
                    }
                }
            }
        }
        let dx_enc = self.encoder.backward(&fwd.enc, dz.view(), &mut grads.encoder);
        dx_direct += &dx_enc;
        dx_direct
    }
}

fn sum_sq<T: Scalar>(m: &Array2<T>) -> f64 {
    m.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

/// `softmax_k(−‖r_i − b_k‖² / τ)` for each row of `r`.
pub fn soft_assign<T: Scalar>(r: ArrayView2<'_, T>, codebook: ArrayView2<'_, T>, tau: f64) -> Array2<T> {
    let (b, k) = (r.nrows(), codebook.nrows());
    let mut out = Array2::<T>::zeros((b, k));
    let mut logits = vec![0.0f64; k];
    for i in 0..b {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = -sq_dist(r.row(i), codebook.row(j)).as_f64() / tau;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for j in 0..k {
            out[[i, j]] = T::of((logits[j] - mx).exp() / z);
        }
    }
    out
}

/// Diversity term `Σ_k p_k ln p_k` of a usage distribution.
pub fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

impl<T: Scalar> Parameters<T> for RqVae<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.encoder.tensors();
        v.extend(self.decoder.tensors());
        v.extend(self.codebooks.iter().map(|c| c.vectors.as_slice().expect("standard layout")));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v.extend(
            self.codebooks
                .iter_mut()
                .map(|c| c.vectors.as_slice_mut().expect("standard layout")),
        );
        v
    }

    fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut v: Vec<_> = self
            .encoder
            .tensor_specs()
            .into_iter()
            .map(|(n, s)| (format!("enc_{n}"), s))
            .collect();
        v.extend(self.decoder.tensor_specs().into_iter().map(|(n, s)| (format!("dec_{n}"), s)));
        v.extend(
            self.codebooks
                .iter()
                .map(|c| (format!("codebook_{}", c.level), c.vectors.shape().to_vec())),
        );
        v
    }
}

/// Supplies fused input rows during training and receives their gradients,
/// so upstream parameters can be trained jointly with the tokenizer.
pub trait InputSource<T: Scalar> {
    fn n_items(&self) -> usize;
    fn rows(&self, items: &[usize]) -> Array2<T>;
    /// Called once per batch with `∂L/∂x` for the rows returned by `rows`.
    fn apply_gradient(&mut self, _items: &[usize], _grad: ArrayView2<'_, T>) {}
}

/// Fixed input matrix; gradients are discarded.
pub struct FixedInputs<'a, T>(pub ArrayView2<'a, T>);

impl<T: Scalar> InputSource<T> for FixedInputs<'_, T> {
    fn n_items(&self) -> usize {
        self.0.nrows()
    }

    fn rows(&self, items: &[usize]) -> Array2<T> {
        self.0.select(Axis(0), items)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossParts,
    pub perplexity: Vec<f64>,
    pub reseeded: usize,
}

#[derive(Debug, Clone)]
pub struct RqVaeOutcome<T> {
    pub model: RqVae<T>,
    pub history: Vec<EpochStats>,
    /// Set when training stopped on a non-finite loss; `model` then holds
    /// the last finite state.
    pub aborted: Option<String>,
}

/// Lloyd's k-means with centers seeded from distinct random points.
/// Empty clusters keep their previous center.
pub fn kmeans<T: Scalar>(points: ArrayView2<'_, T>, k: usize, iters: usize, rng: &mut SeededRng) -> Array2<T> {
    let (n, h) = points.dim();
    let mut centers = Array2::<T>::zeros((k, h));
    if n == 0 {
        return centers;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for j in 0..k {
        let src = order[j % n];
        centers.row_mut(j).assign(&points.row(src));
        if j >= n {
            for v in centers.row_mut(j).iter_mut() {
                *v += gaussian::<T, _>(rng, 1e-3);
            }
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest_row(centers.view(), points.row(i)).0 as usize;
        }
        let mut sums = Array2::<f64>::zeros((k, h));
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &p) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += p.as_f64();
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (dst, &s) in centers.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = T::of(s / c);
                }
            }
        }
    }
    centers
}

/// Initialise every codebook by k-means over residuals of a sample of items.
pub fn init_codebooks<T: Scalar>(model: &mut RqVae<T>, source: &dyn InputSource<T>, cfg: &RqVaeConfig) {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "rqvae/kmeans"));
    let mut idx: Vec<usize> = (0..source.n_items()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.kmeans_sample.max(1));
    idx.sort_unstable();
    let x = source.rows(&idx);
    let mut r = model.encode(x.view());
    for cb in model.codebooks.iter_mut() {
        cb.vectors = kmeans(r.view(), cb.size(), cfg.kmeans_iters, &mut rng);
        for mut row in r.rows_mut() {
            let (c, _) = nearest_row(cb.vectors.view(), row.view());
            row -= &cb.vectors.row(c as usize);
        }
    }
}

/// Perplexity `exp(H)` of hard code usage at one level.
pub fn code_perplexity(codes: &[Vec<u32>], level: usize, k: usize) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0u64; k];
    for c in codes {
        counts[c[level] as usize] += 1;
    }
    let n = codes.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

pub fn level_perplexities(codes: &[Vec<u32>], n_levels: usize, k: usize) -> Vec<f64> {
    (0..n_levels).map(|m| code_perplexity(codes, m, k)).collect()
}

pub fn mean_perplexity(codes: &[Vec<u32>], n_levels: usize, k: usize) -> f64 {
    if n_levels == 0 {
        return 0.0;
    }
    level_perplexities(codes, n_levels, k).iter().sum::<f64>() / n_levels as f64
}

/// Train the tokenizer; gradients w.r.t. the inputs are handed back to
/// `source` after every batch.
pub fn train_rqvae<T: Scalar>(source: &mut dyn InputSource<T>, cfg: &RqVaeConfig) -> Result<RqVaeOutcome<T>> {
    cfg.validate()?;
    let n = source.n_items();
    if n == 0 {
        return Err(Error::EmptyDataset("no items to tokenize".into()));
    }
    if n < cfg.codebook_size {
        warn!("{n} items but codebook size {}; many codes will stay unused", cfg.codebook_size);
    }
    let input_dim = source.rows(&[0]).ncols();
    let mut model = RqVae::new(input_dim, cfg)?;
    init_codebooks(&mut model, source, cfg);
    let mut adam = Adam::new(cfg.lr);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "rqvae/batches"));
    let mut history = Vec::with_capacity(cfg.epochs);
    let k = cfg.codebook_size;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        model.codebooks.iter_mut().for_each(Codebook::reset_usage);
        let mut sums = LossParts::default();
        let mut epoch_codes: Vec<Vec<u32>> = Vec::with_capacity(n);
        for chunk in order.chunks(cfg.batch) {
            let x = source.rows(chunk);
            let mut grads = model.zeros_like();
            let (parts, dx, codes) = model.loss_and_grad(x.view(), &mut grads);
            if !parts.total.is_finite() || !grads.all_finite() {
                let msg = format!("tokenizer loss became {} at epoch {epoch}", parts.total);
                warn!("{msg}; keeping last finite parameters");
                return Ok(RqVaeOutcome {
                    model,
                    history,
                    aborted: Some(msg),
                });
            }
            let w = chunk.len() as f64 / n as f64;
            sums.total += parts.total * w;
            sums.recon += parts.recon * w;
            sums.quant += parts.quant * w;
            sums.div += parts.div * w;
            for c in &codes {
                for (m, &code) in c.iter().enumerate() {
                    model.codebooks[m].usage_counts[code as usize] += 1;
                }
            }
            epoch_codes.extend(codes);
            adam.step(model.tensors_mut(), grads.tensors());
            source.apply_gradient(chunk, dx.view());
        }
        let perplexity = level_perplexities(&epoch_codes, cfg.n_levels, k);
        let reseeded = if epoch + 1 < cfg.epochs {
            reseed_dead_codes(&mut model, source, cfg, &mut rng)
        } else {
            0
        };
        debug!(
            "rqvae epoch {epoch}: total {:.5} recon {:.5} quant {:.5} div {:.4} ppl {:?} reseeded {reseeded}",
            sums.total, sums.recon, sums.quant, sums.div, perplexity
        );
        history.push(EpochStats {
            epoch,
            loss: sums,
            perplexity,
            reseeded,
        });
    }
    if let Some(last) = history.last() {
        info!("tokenizer trained: loss {:.5}, perplexity {:?}", last.loss.total, last.perplexity);
    }
    Ok(RqVaeOutcome {
        model,
        history,
        aborted: None,
    })
}

/// Move codes unused during the last epoch onto the residual of a random
/// item at that level plus small noise. Returns how many were moved.
fn reseed_dead_codes<T: Scalar>(
    model: &mut RqVae<T>,
    source: &dyn InputSource<T>,
    cfg: &RqVaeConfig,
    rng: &mut SeededRng,
) -> usize {
    let mut moved = 0;
    for m in 0..model.n_levels() {
        let dead: Vec<usize> = model.codebooks[m]
            .usage_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(k, _)| k)
            .collect();
        for k in dead {
            let item = rng.random_range(0..source.n_items());
            let x = source.rows(&[item]);
            let mut r = model.encode(x.view()).row(0).to_owned();
            for cb in &model.codebooks[..m] {
                let (c, _) = cb.nearest(r.view());
                r -= &cb.vectors.row(c as usize);
            }
            for v in r.iter_mut() {
                *v += gaussian::<T, _>(rng, cfg.dead_code_noise);
            }
            model.codebooks[m].vectors.row_mut(k).assign(&r);
            moved += 1;
        }
    }
    moved
}

/// Fixed-length token sequence identifying one item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId {
    pub item_id: u32,
    pub tokens: Vec<u32>,
}

/// Quantize every item and make the item→id map injective: items sharing a
/// full code sequence are ordered by item id, the first keeps its codes and
/// each later one takes the nearest last-level code not used by any item
/// under the same prefix.
pub fn assign_ids<T: Scalar>(fused: ArrayView2<'_, T>, model: &RqVae<T>) -> Result<Vec<SemanticId>> {
    let m = model.n_levels();
    let k = model.codebook_size();
    if fused.ncols() != model.input_dim() {
        return Err(Error::mismatch("fused representation width", model.input_dim(), fused.ncols()));
    }
    let z = model.encode(fused);
    let mut codes = Vec::with_capacity(z.nrows());
    let mut last_residual = Vec::with_capacity(z.nrows());
    for row in z.rows() {
        let mut r = row.to_owned();
        let mut c = Vec::with_capacity(m);
        for (level, cb) in model.codebooks.iter().enumerate() {
            if level + 1 == m {
                last_residual.push(r.clone());
            }
            let (code, _) = cb.nearest(r.view());
            r -= &cb.vectors.row(code as usize);
            c.push(code);
        }
        codes.push(c);
    }
    resolve_collisions(&mut codes, &last_residual, model.codebooks.last().map(|c| c.vectors.view()), k)?;
    Ok(codes
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| SemanticId {
            item_id: i as u32,
            tokens,
        })
        .collect())
}

/// Collision resolution on raw codes; `last_residual[i]` is item `i`'s
/// residual entering the last level.
pub fn resolve_collisions<T: Scalar>(
    codes: &mut [Vec<u32>],
    last_residual: &[Array1<T>],
    last_codebook: Option<ArrayView2<'_, T>>,
    k: usize,
) -> Result<()> {
    let Some(book) = last_codebook else {
        return Ok(());
    };
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, c) in codes.iter().enumerate() {
        groups.entry(c.clone()).or_default().push(i);
    }
    let mut used: BTreeMap<Vec<u32>, HashSet<u32>> = BTreeMap::new();
    for c in codes.iter() {
        let (prefix, last) = c.split_at(c.len() - 1);
        used.entry(prefix.to_vec()).or_default().insert(last[0]);
    }
    for (full, members) in groups {
        if members.len() < 2 {
            continue;
        }
        let prefix = full[..full.len() - 1].to_vec();
        let taken = used.get_mut(&prefix).expect("prefix recorded");
        for &item in &members[1..] {
            let r = last_residual[item].view();
            let best = (0..k as u32)
                .filter(|c| !taken.contains(c))
                .map(|c| (c, sq_dist(book.row(c as usize), r)))
                .fold(None, |best: Option<(u32, T)>, (c, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((c, d)),
                });
            let Some((c, _)) = best else {
                let colliding = codes.iter().filter(|c| c[..c.len() - 1] == prefix[..]).count();
                return Err(Error::CollisionExhausted { prefix, colliding, k });
            };
            taken.insert(c);
            let len = codes[item].len();
            codes[item][len - 1] = c;
        }
    }
    Ok(())
}

/// Fail if two items share a token sequence.
pub fn check_bijection(ids: &[SemanticId]) -> Result<()> {
    let mut seen: BTreeMap<&[u32], u32> = BTreeMap::new();
    for id in ids {
        if let Some(&first) = seen.get(id.tokens.as_slice()) {
            return Err(Error::DuplicateId {
                tokens: id.tokens.clone(),
                first,
                second: id.item_id,
            });
        }
        seen.insert(&id.tokens, id.item_id);
    }
    Ok(())
}

pub fn write_semantic_ids(path: &Path, ids: &[SemanticId]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let m = ids.first().map_or(0, |i| i.tokens.len());
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("item_id".to_string())
        .chain((1..=m).map(|j| format!("c{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for id in ids {
        let row: Vec<String> = std::iter::once(id.item_id.to_string())
            .chain(id.tokens.iter().map(u32::to_string))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_semantic_ids(path: &Path) -> Result<Vec<SemanticId>> {
    let f = BufReader::new(fs::File::open(path)?);
    let origin = path.display().to_string();
    let mut ids = Vec::new();
    let mut width = None;
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        let parse_err = |msg: String| Error::Parse {
            path: origin.clone(),
            line: n + 1,
            msg,
        };
        if n == 0 {
            if !line.starts_with("item_id") {
                return Err(parse_err("missing `item_id,c1,...` header".into()));
            }
            width = Some(line.split(',').count() - 1);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<u32> = line
            .split(',')
            .map(|f| f.trim().parse::<u32>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<_>>()?;
        if Some(fields.len() - 1) != width {
            return Err(parse_err(format!("expected {} codes, found {}", width.unwrap_or(0), fields.len() - 1)));
        }
        ids.push(SemanticId {
            item_id: fields[0],
            tokens: fields[1..].to_vec(),
        });
    }
    Ok(ids)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    n_levels: usize,
    codebook_size: usize,
    latent: usize,
    hidden: usize,
    input_dim: usize,
    lambda_q: f64,
    lambda_d: f64,
    beta_commit: f64,
    tau: f64,
    seed: u64,
}

impl<T: Scalar> RqVae<T> {
    /// Tensors as EMB files plus `rqvae.json`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        emb::save_params(dir, "rqvae_", self)?;
        let side = Sidecar {
            n_levels: self.n_levels(),
            codebook_size: self.codebook_size(),
            latent: self.latent_dim(),
            hidden: self.encoder.w1.ncols(),
            input_dim: self.input_dim(),
            lambda_q: self.lambda_q,
            lambda_d: self.lambda_d,
            beta_commit: self.beta_commit,
            tau: self.tau,
            seed,
        };
        fs::write(dir.join("rqvae.json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join("rqvae.json"))?)?;
        let cfg = RqVaeConfig {
            n_levels: side.n_levels,
            codebook_size: side.codebook_size,
            hidden: side.hidden,
            latent: side.latent,
            lambda_q: side.lambda_q,
            lambda_d: side.lambda_d,
            beta_commit: side.beta_commit,
            tau: side.tau,
            seed: side.seed,
            ..RqVaeConfig::default()
        };
        let mut model = RqVae::new(side.input_dim, &cfg)?;
        emb::load_params(dir, "rqvae_", &mut model)?;
        Ok(model)
    }
}

/// Mean reconstruction error `‖x − x̂‖²` through the quantized path.
pub fn reconstruction_error<T: Scalar>(model: &RqVae<T>, x: ArrayView2<'_, T>) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    let z = model.encode(x);
    let mut q = Array2::<T>::zeros(z.raw_dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        q.row_mut(i).assign(&quantize(row, &model.codebooks).quantized);
    }
    let xh = model.decode(q.view());
    sum_sq(&(&x.to_owned() - &xh)) / x.nrows() as f64
}
