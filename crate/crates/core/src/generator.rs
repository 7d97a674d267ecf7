//! Semantic-token vocabulary, prompts and a small decoder-only transformer
//! trained with next-token prediction.

use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::emb;
use crate::optim::{clip_global_norm, derive_seed, gaussian_matrix, rng_from_seed, Adam, Parameters};
use crate::rqvae::SemanticId;
use crate::{Error, Result, Scalar};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
const N_SPECIAL: u32 = 2;

/// Token layout: `PAD = 0`, `BOS = 1`, then level-major code tokens
/// `2 + (m − 1)·K + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_levels: u32,
    pub codebook_size: u32,
}

impl VocabSpec {
    pub fn new(n_levels: u32, codebook_size: u32) -> Self {
        Self {
            n_levels,
            codebook_size,
        }
    }

    pub fn size(&self) -> usize {
        (N_SPECIAL + self.n_levels * self.codebook_size) as usize
    }

    /// Token for code `k` at 1-based level `m`.
    pub fn token_id(&self, m: u32, k: u32) -> u32 {
        debug_assert!(m >= 1 && m <= self.n_levels && k < self.codebook_size);
        N_SPECIAL + (m - 1) * self.codebook_size + k
    }

    /// Inverse of [`token_id`](Self::token_id); `None` for specials and
    /// out-of-range ids.
    pub fn decode(&self, token: u32) -> Option<(u32, u32)> {
        if token < N_SPECIAL || token as usize >= self.size() {
            return None;
        }
        let t = token - N_SPECIAL;
        Some((t / self.codebook_size + 1, t % self.codebook_size))
    }

    pub fn item_tokens(&self, codes: &[u32]) -> Vec<u32> {
        codes
            .iter()
            .enumerate()
            .map(|(m, &k)| self.token_id(m as u32 + 1, k))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub token_ids: Vec<u32>,
    pub max_len: usize,
}

/// `[BOS]` followed by each history item's tokens in order, keeping only the
/// most recent whole items that fit in `max_len`.
pub fn build_prompt(history: &[SemanticId], vocab: &VocabSpec, max_len: usize) -> Result<Prompt> {
    let codes: Vec<&[u32]> = history.iter().map(|s| s.tokens.as_slice()).collect();
    build_prompt_codes(&codes, vocab, max_len)
}

pub fn build_prompt_codes(history: &[&[u32]], vocab: &VocabSpec, max_len: usize) -> Result<Prompt> {
    if history.is_empty() {
        return Err(Error::invalid("prompt history is empty"));
    }
    let m = vocab.n_levels as usize;
    if max_len < 1 + m {
        return Err(Error::config(format!("max_len {max_len} cannot hold one item of {m} tokens")));
    }
    let keep = ((max_len - 1) / m).min(history.len());
    let mut token_ids = Vec::with_capacity(1 + keep * m);
    token_ids.push(BOS);
    for codes in &history[history.len() - keep..] {
        if codes.len() != m {
            return Err(Error::mismatch("semantic id length", m, codes.len()));
        }
        token_ids.extend(vocab.item_tokens(codes));
    }
    Ok(Prompt { token_ids, max_len })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub width: usize,
    pub ffn_mult: usize,
    /// Positions; `0` means `1 + 50·M`.
    pub max_len: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub init_std: f64,
    pub weight_decay: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            width: 256,
            ffn_mult: 4,
            max_len: 0,
            lr: 1e-4,
            epochs: 50,
            batch: 32,
            seed: 42,
            grad_clip: 1.0,
            init_std: 0.02,
            weight_decay: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn resolved_max_len(&self, vocab: &VocabSpec) -> usize {
        if self.max_len == 0 {
            1 + 50 * vocab.n_levels as usize
        } else {
            self.max_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_heads == 0 || self.width % self.n_heads != 0 {
            return Err(Error::config(format!(
                "generator width {} must be a positive multiple of n_heads {}",
                self.width, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.batch == 0 {
            return Err(Error::config("generator layers, ffn_mult and batch must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("generator learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub w_qkv: Array2<T>,
    pub b_qkv: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w_1: Array2<T>,
    pub b_1: Array1<T>,
    pub w_2: Array2<T>,
    pub b_2: Array1<T>,
}

/// Decoder-only pre-norm transformer with learned token and position
/// embeddings and a separate output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub vocab: VocabSpec,
    pub n_heads: usize,
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

const LN_EPS: f64 = 1e-5;

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

fn layer_norm<T: Scalar>(x: ArrayView2<'_, T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = Array2::<T>::zeros((n, d));
    let mut rstd = Array1::<T>::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * r;
        }
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    c: &LnCache<T>,
    g: &Array1<T>,
    dy: ArrayView2<'_, T>,
    dg: &mut Array1<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    let (n, d) = dy.dim();
    *dg += &(&dy * &c.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = Array2::<T>::zeros((n, d));
    for i in 0..n {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            m1 += dxh;
            m2 += dxh * c.xhat[[i, j]];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = c.rstd[i] * (dxh - m1 - c.xhat[[i, j]] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

/// `tanh` through one `exp`; libm's `tanhf` dominates otherwise.
fn tanh<T: Scalar>(y: T) -> T {
    let two = T::of(2.0);
    let y = y.max(T::of(-20.0)).min(T::of(20.0));
    T::one() - two / ((two * y).exp() + T::one())
}

/// `gelu'(x)` given `t = tanh(c (x + a x³))` from the forward pass.
fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    tanh(T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x))
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    qkv: Array2<T>,
    /// Attention probabilities per head, `n × n` lower triangular.
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    ln2: LnCache<T>,
    b: Array2<T>,
    h_pre: Array2<T>,
    h_tanh: Array2<T>,
    h_act: Array2<T>,
}

/// Activations of one forward pass over a single sequence.
pub struct SeqCache<T> {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    xf: Array2<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(vocab: VocabSpec, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "generator/init"));
        let d = cfg.width;
        let f = cfg.ffn_mult * d;
        let v = vocab.size();
        let p = cfg.resolved_max_len(&vocab);
        let std = cfg.init_std;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let ones = || Array1::<T>::ones(d);
        let zeros = |n: usize| Array1::<T>::zeros(n);
        let tok_emb = gaussian_matrix(&mut rng, v, d, std);
        let pos_emb = gaussian_matrix(&mut rng, p, d, std);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: ones(),
                ln1_b: zeros(d),
                w_qkv: gaussian_matrix(&mut rng, d, 3 * d, std),
                b_qkv: zeros(3 * d),
                w_o: gaussian_matrix(&mut rng, d, d, resid_std),
                b_o: zeros(d),
                ln2_g: ones(),
                ln2_b: zeros(d),
                w_1: gaussian_matrix(&mut rng, d, f, std),
                b_1: zeros(f),
                w_2: gaussian_matrix(&mut rng, f, d, resid_std),
                b_2: zeros(d),
            })
            .collect();
        Ok(Self {
            vocab,
            n_heads: cfg.n_heads,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: ones(),
            lnf_b: zeros(d),
            w_out: gaussian_matrix(&mut rng, d, v, std),
            b_out: zeros(v),
        })
    }

    pub fn width(&self) -> usize {
        self.tok_emb.ncols()
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.nrows()
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.max_len() {
            return Err(Error::Overlength {
                len: tokens.len(),
                max: self.max_len(),
            });
        }
        let v = self.vocab.size() as u32;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("token {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// Logits for every position of `tokens` (`n × V`).
    pub fn forward(&self, tokens: &[u32]) -> Result<(Array2<T>, SeqCache<T>)> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.width();
        let hcount = self.n_heads;
        let dh = d / hcount;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut x = Array2::<T>::zeros((n, d));
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.tok_emb.row(t as usize));
            row += &self.pos_emb.row(i);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a, ln1) = layer_norm(x.view(), &blk.ln1_g, &blk.ln1_b);
            let qkv = a.dot(&blk.w_qkv) + &blk.b_qkv;
            let mut attn = Array2::<T>::zeros((n, d));
            let mut probs = Vec::with_capacity(hcount);
            for h in 0..hcount {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                for i in 0..n {
                    causal_softmax_row(p.row_mut(i), i, scale);
                }
                attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
            x += &(attn.dot(&blk.w_o) + &blk.b_o);
            let (b, ln2) = layer_norm(x.view(), &blk.ln2_g, &blk.ln2_b);
            let h_pre = b.dot(&blk.w_1) + &blk.b_1;
            let h_tanh = h_pre.mapv(gelu_tanh);
            let mut h_act = h_pre.clone();
            h_act.zip_mut_with(&h_tanh, |x, &t| *x = T::of(0.5) * *x * (T::one() + t));
            x += &(h_act.dot(&blk.w_2) + &blk.b_2);
            caches.push(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                b,
                h_pre,
                h_tanh,
                h_act,
            });
        }
        let (xf, lnf) = layer_norm(x.view(), &self.lnf_g, &self.lnf_b);
        let logits = xf.dot(&self.w_out) + &self.b_out;
        Ok((
            logits,
            SeqCache {
                tokens: tokens.to_vec(),
                blocks: caches,
                lnf,
                xf,
            },
        ))
    }

    /// Accumulate gradients of a loss with `∂L/∂logits = dlogits`.
    pub fn backward(&self, cache: &SeqCache<T>, dlogits: ArrayView2<'_, T>, grads: &mut Generator<T>) {
        let n = cache.tokens.len();
        let d = self.width();
        let hcount = self.n_heads;
        let dh = d / hcount;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        grads.w_out += &cache.xf.t().dot(&dlogits);
        grads.b_out += &dlogits.sum_axis(Axis(0));
        let dxf = dlogits.dot(&self.w_out.t());
        let mut dx = layer_norm_backward(&cache.lnf, &self.lnf_g, dxf.view(), &mut grads.lnf_g, &mut grads.lnf_b);
        for (l, blk) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[l];
            let g = &mut grads.blocks[l];
            // feed-forward branch
            g.w_2 += &c.h_act.t().dot(&dx);
            g.b_2 += &dx.sum_axis(Axis(0));
            let mut dh_act = dx.dot(&blk.w_2.t());
            Zip::from(&mut dh_act)
                .and(&c.h_pre)
                .and(&c.h_tanh)
                .for_each(|v, &hp, &t| *v *= gelu_grad(hp, t));
            g.w_1 += &c.b.t().dot(&dh_act);
            g.b_1 += &dh_act.sum_axis(Axis(0));
            let db = dh_act.dot(&blk.w_1.t());
            dx += &layer_norm_backward(&c.ln2, &blk.ln2_g, db.view(), &mut g.ln2_g, &mut g.ln2_b);
            // attention branch
            g.w_o += &c.attn.t().dot(&dx);
            g.b_o += &dx.sum_axis(Axis(0));
            let dattn = dx.dot(&blk.w_o.t());
            let mut dqkv = Array2::<T>::zeros((n, 3 * d));
            for h in 0..hcount {
                let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let p = &c.probs[h];
                let do_ = dattn.slice(s![.., h * dh..(h + 1) * dh]);
                dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&p.t().dot(&do_));
                let dp = do_.dot(&v.t());
                let mut ds = Array2::<T>::zeros((n, n));
                for i in 0..n {
                    let mut dot = T::zero();
                    for j in 0..=i {
                        dot += dp[[i, j]] * p[[i, j]];
                    }
                    for j in 0..=i {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                    }
                }
                dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&ds.t().dot(&q));
            }
            g.w_qkv += &c.a.t().dot(&dqkv);
            g.b_qkv += &dqkv.sum_axis(Axis(0));
            let da = dqkv.dot(&blk.w_qkv.t());
            dx += &layer_norm_backward(&c.ln1, &blk.ln1_g, da.view(), &mut g.ln1_g, &mut g.ln1_b);
        }
        for (i, &t) in cache.tokens.iter().enumerate() {
            let mut r = grads.tok_emb.row_mut(t as usize);
            r += &dx.row(i);
            let mut p = grads.pos_emb.row_mut(i);
            p += &dx.row(i);
        }
    }

    /// Log-softmax of the logits after the last token of `prefix`.
    pub fn next_token_logprobs(&self, prefix: &[u32]) -> Result<Vec<T>> {
        if prefix.is_empty() {
            return Err(Error::invalid("empty prefix"));
        }
        if prefix.len() >= self.max_len() {
            return Err(Error::Overlength {
                len: prefix.len(),
                max: self.max_len() - 1,
            });
        }
        let (logits, _) = self.forward(prefix)?;
        Ok(crate::optim::log_softmax(logits.row(prefix.len() - 1).as_slice().expect("contiguous")))
    }

    /// Empty incremental decoding state.
    pub fn start(&self) -> DecodeState<T> {
        DecodeState {
            len: 0,
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            logits: Vec::new(),
        }
    }

    /// Feed every token of `tokens` into a fresh state.
    pub fn prime(&self, tokens: &[u32]) -> Result<DecodeState<T>> {
        let mut st = self.start();
        for &t in tokens {
            self.extend(&mut st, t)?;
        }
        Ok(st)
    }

    /// Append one token to `state` and store the logits that follow it.
    pub fn extend(&self, state: &mut DecodeState<T>, token: u32) -> Result<()> {
        if state.len >= self.max_len() {
            return Err(Error::Overlength {
                len: state.len + 1,
                max: self.max_len(),
            });
        }
        if token as usize >= self.vocab.size() {
            return Err(Error::invalid(format!("token {token} outside vocabulary")));
        }
        let d = self.width();
        let hcount = self.n_heads;
        let dh = d / hcount;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let pos = state.len;
        let n = pos + 1;
        let mut x: Vec<T> = self
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(self.pos_emb.row(pos))
            .map(|(&a, &b)| a + b)
            .collect();
        let mut scores = vec![T::zero(); n];
        for (l, blk) in self.blocks.iter().enumerate() {
            let a = layer_norm_vec(&x, &blk.ln1_g, &blk.ln1_b);
            let qkv = vec_mat(&a, &blk.w_qkv, &blk.b_qkv);
            state.keys[l].extend_from_slice(&qkv[d..2 * d]);
            state.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, vals) = (&state.keys[l], &state.values[l]);
            let mut attn = vec![T::zero(); d];
            for h in 0..hcount {
                let q = &qkv[h * dh..(h + 1) * dh];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    *sc = q.iter().zip(k).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                }
                causal_softmax_row(ndarray::ArrayViewMut1::from(&mut scores[..]), pos, scale);
                let out = &mut attn[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let v = &vals[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            let proj = vec_mat(&attn, &blk.w_o, &blk.b_o);
            x.iter_mut().zip(&proj).for_each(|(xv, &p)| *xv += p);
            let b = layer_norm_vec(&x, &blk.ln2_g, &blk.ln2_b);
            let mut h_act = vec_mat(&b, &blk.w_1, &blk.b_1);
            h_act.iter_mut().for_each(|v| *v = gelu(*v));
            let ff = vec_mat(&h_act, &blk.w_2, &blk.b_2);
            x.iter_mut().zip(&ff).for_each(|(xv, &f)| *xv += f);
        }
        let xf = layer_norm_vec(&x, &self.lnf_g, &self.lnf_b);
        state.logits = vec_mat(&xf, &self.w_out, &self.b_out);
        state.len += 1;
        Ok(())
    }
}

/// `x W + b` for a single row.
fn vec_mat<T: Scalar>(x: &[T], w: &Array2<T>, b: &Array1<T>) -> Vec<T> {
    let mut out: Vec<T> = b.to_vec();
    for (&xi, row) in x.iter().zip(w.rows()) {
        let row = row.to_slice().expect("row-major weights");
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

/// Same arithmetic as [`layer_norm`] on one row.
fn layer_norm_vec<T: Scalar>(x: &[T], g: &Array1<T>, b: &Array1<T>) -> Vec<T> {
    let inv_d = T::of(1.0 / x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
    let r = T::one() / (var + T::of(LN_EPS)).sqrt();
    x.iter().zip(g).zip(b).map(|((&v, &gg), &bb)| (v - mean) * r * gg + bb).collect()
}

fn causal_softmax_row<T: Scalar>(mut row: ndarray::ArrayViewMut1<'_, T>, i: usize, scale: T) {
    let n = row.len();
    let mut mx = T::neg_infinity();
    for j in 0..=i {
        row[j] *= scale;
        if row[j] > mx {
            mx = row[j];
        }
    }
    let mut z = T::zero();
    for j in 0..=i {
        row[j] = (row[j] - mx).exp();
        z += row[j];
    }
    for j in 0..=i {
        row[j] /= z;
    }
    for j in i + 1..n {
        row[j] = T::zero();
    }
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    logits: Vec<T>,
}

impl<T: Scalar> DecodeState<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits following the last fed token.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }
}

impl<T: Scalar> Parameters<T> for Generator<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![as_slice2(&self.tok_emb), as_slice2(&self.pos_emb)];
        for b in &self.blocks {
            v.extend([
                as_slice1(&b.ln1_g),
                as_slice1(&b.ln1_b),
                as_slice2(&b.w_qkv),
                as_slice1(&b.b_qkv),
                as_slice2(&b.w_o),
                as_slice1(&b.b_o),
                as_slice1(&b.ln2_g),
                as_slice1(&b.ln2_b),
                as_slice2(&b.w_1),
                as_slice1(&b.b_1),
                as_slice2(&b.w_2),
                as_slice1(&b.b_2),
            ]);
        }
        v.extend([as_slice1(&self.lnf_g), as_slice1(&self.lnf_b), as_slice2(&self.w_out), as_slice1(&self.b_out)]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = vec![
            self.tok_emb.as_slice_mut().expect("standard layout"),
            self.pos_emb.as_slice_mut().expect("standard layout"),
        ];
        for b in &mut self.blocks {
            v.extend([
                b.ln1_g.as_slice_mut().expect("standard layout"),
                b.ln1_b.as_slice_mut().expect("standard layout"),
                b.w_qkv.as_slice_mut().expect("standard layout"),
                b.b_qkv.as_slice_mut().expect("standard layout"),
                b.w_o.as_slice_mut().expect("standard layout"),
                b.b_o.as_slice_mut().expect("standard layout"),
                b.ln2_g.as_slice_mut().expect("standard layout"),
                b.ln2_b.as_slice_mut().expect("standard layout"),
                b.w_1.as_slice_mut().expect("standard layout"),
                b.b_1.as_slice_mut().expect("standard layout"),
                b.w_2.as_slice_mut().expect("standard layout"),
                b.b_2.as_slice_mut().expect("standard layout"),
            ]);
        }
        v.extend([
            self.lnf_g.as_slice_mut().expect("standard layout"),
            self.lnf_b.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_out.as_slice_mut().expect("standard layout"),
        ]);
        v
    }

    fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![
            ("tok_emb".to_string(), self.tok_emb.shape().to_vec()),
            ("pos_emb".to_string(), self.pos_emb.shape().to_vec()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let named: [(&str, &[usize]); 12] = [
                ("ln1_g", b.ln1_g.shape()),
                ("ln1_b", b.ln1_b.shape()),
                ("w_qkv", b.w_qkv.shape()),
                ("b_qkv", b.b_qkv.shape()),
                ("w_o", b.w_o.shape()),
                ("b_o", b.b_o.shape()),
                ("ln2_g", b.ln2_g.shape()),
                ("ln2_b", b.ln2_b.shape()),
                ("w_1", b.w_1.shape()),
                ("b_1", b.b_1.shape()),
                ("w_2", b.w_2.shape()),
                ("b_2", b.b_2.shape()),
            ];
            v.extend(named.iter().map(|(n, s)| (format!("block{l}_{n}"), s.to_vec())));
        }
        v.extend([
            ("lnf_g".to_string(), self.lnf_g.shape().to_vec()),
            ("lnf_b".to_string(), self.lnf_b.shape().to_vec()),
            ("w_out".to_string(), self.w_out.shape().to_vec()),
            ("b_out".to_string(), self.b_out.shape().to_vec()),
        ]);
        v
    }
}

fn as_slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn as_slice2<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

/// A training or evaluation sequence. Targets are `tokens[t]` for
/// `t ≥ max(1, loss_from)`, predicted from `tokens[..t]`; `PAD` targets
/// are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub loss_from: usize,
}

impl Sequence {
    pub fn full(tokens: Vec<u32>) -> Self {
        Self { tokens, loss_from: 1 }
    }

    fn targets(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        let start = self.loss_from.max(1);
        (start..self.tokens.len())
            .map(|t| (t - 1, self.tokens[t]))
            .filter(|&(_, tok)| tok != PAD)
    }

    pub fn n_targets(&self) -> usize {
        self.targets().count()
    }
}

fn batch_targets(batch: &[Sequence]) -> Result<usize> {
    let n: usize = batch.iter().map(Sequence::n_targets).sum();
    if n == 0 {
        return Err(Error::invalid("batch has no unmasked target positions"));
    }
    Ok(n)
}

fn input_tokens(seq: &Sequence) -> &[u32] {
    &seq.tokens[..seq.tokens.len().saturating_sub(1)]
}

/// Mean next-token cross-entropy over unmasked targets.
pub fn ntp_loss<T: Scalar>(model: &Generator<T>, batch: &[Sequence]) -> Result<f64> {
    let count = batch_targets(batch)?;
    let mut total = 0.0;
    for seq in batch {
        if seq.n_targets() == 0 {
            continue;
        }
        let (logits, _) = model.forward(input_tokens(seq))?;
        for (pos, tok) in seq.targets() {
            total += row_nll(logits.row(pos), tok);
        }
    }
    Ok(total / count as f64)
}

fn row_nll<T: Scalar>(row: ArrayView1<'_, T>, target: u32) -> f64 {
    let lse = crate::optim::log_sum_exp(row.iter().map(|v| v.as_f64()));
    lse - row[target as usize].as_f64()
}

/// Loss and accumulated parameter gradients.
pub fn ntp_loss_and_grad<T: Scalar>(model: &Generator<T>, batch: &[Sequence], grads: &mut Generator<T>) -> Result<f64> {
    let count = batch_targets(batch)?;
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for seq in batch {
        if seq.n_targets() == 0 {
            continue;
        }
        let (logits, cache) = model.forward(input_tokens(seq))?;
        let mut dlogits = Array2::<T>::zeros(logits.raw_dim());
        for (pos, tok) in seq.targets() {
            let row = logits.row(pos);
            let lse = crate::optim::log_sum_exp(row.iter().map(|v| v.as_f64()));
            total += lse - row[tok as usize].as_f64();
            for (j, g) in dlogits.row_mut(pos).iter_mut().enumerate() {
                let p = (row[j].as_f64() - lse).exp();
                *g = T::of((p - if j == tok as usize { 1.0 } else { 0.0 }) * inv);
            }
        }
        model.backward(&cache, dlogits.view(), grads);
    }
    Ok(total * inv)
}

/// Semantic-id lookup by dense item id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdTable {
    pub vocab: VocabSpec,
    codes: Vec<Vec<u32>>,
}

impl IdTable {
    pub fn new(ids: &[SemanticId], vocab: VocabSpec) -> Result<Self> {
        let n = ids.iter().map(|s| s.item_id as usize + 1).max().unwrap_or(0);
        let mut codes = vec![Vec::new(); n];
        for s in ids {
            if s.tokens.len() != vocab.n_levels as usize {
                return Err(Error::mismatch("semantic id length", vocab.n_levels as usize, s.tokens.len()));
            }
            if let Some(&bad) = s.tokens.iter().find(|&&k| k >= vocab.codebook_size) {
                return Err(Error::invalid(format!("code {bad} exceeds codebook size {}", vocab.codebook_size)));
            }
            codes[s.item_id as usize] = s.tokens.clone();
        }
        Ok(Self { vocab, codes })
    }

    pub fn codes(&self, item: u32) -> Result<&[u32]> {
        self.codes
            .get(item as usize)
            .filter(|c| !c.is_empty())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("item {item} has no semantic id")))
    }

    pub fn n_items(&self) -> usize {
        self.codes.len()
    }

    /// Prompt for a history of item ids.
    pub fn prompt(&self, items: &[u32], max_len: usize) -> Result<Prompt> {
        let codes: Vec<&[u32]> = items.iter().map(|&i| self.codes(i)).collect::<Result<_>>()?;
        build_prompt_codes(&codes, &self.vocab, max_len)
    }
}

/// Training sequences from every user's training prefix. Prefixes longer
/// than the context are cut into consecutive windows, each starting with
/// `BOS`, so every item is a target exactly once.
pub fn training_sequences(split: &SplitDataset, table: &IdTable, max_len: usize) -> Result<Vec<Sequence>> {
    let m = table.vocab.n_levels as usize;
    let cap = (max_len - 1) / m;
    if cap == 0 {
        return Err(Error::config("generator context cannot hold one item"));
    }
    let mut out = Vec::new();
    for u in &split.users {
        for window in u.train.chunks(cap) {
            let p = table.prompt(window, max_len)?;
            out.push(Sequence::full(p.token_ids));
        }
    }
    Ok(out)
}

/// `[prompt(history)] ++ tokens(target)`, with loss on the target only.
pub fn continuation_sequence(history: &[u32], target: u32, table: &IdTable, max_len: usize) -> Result<Sequence> {
    let m = table.vocab.n_levels as usize;
    let p = table.prompt(history, max_len - m)?;
    let mut tokens = p.token_ids;
    let loss_from = tokens.len();
    tokens.extend(table.vocab.item_tokens(table.codes(target)?));
    Ok(Sequence { tokens, loss_from })
}

pub fn validation_sequences(split: &SplitDataset, table: &IdTable, max_len: usize) -> Result<Vec<Sequence>> {
    split
        .users
        .iter()
        .map(|u| continuation_sequence(&u.train, u.valid, table, max_len))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutcome<T> {
    /// Best-validation parameters.
    pub model: Generator<T>,
    pub history: Vec<GeneratorEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub aborted: Option<String>,
}

/// Train on `train` sequences, keeping the parameters with the lowest
/// loss on `valid` (or the last epoch when `valid` is empty).
pub fn train_on_sequences<T: Scalar>(
    vocab: VocabSpec,
    train: &[Sequence],
    valid: &[Sequence],
    cfg: &GeneratorConfig,
) -> Result<GeneratorOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("no generator training sequences".into()));
    }
    let mut model = Generator::<T>::new(vocab, cfg)?;
    let mut adam = Adam::new(cfg.lr);
    adam.weight_decay = cfg.weight_decay;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "generator/batches"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut aborted = None;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Sequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let Ok(count) = batch_targets(&batch) else { continue };
            let mut grads = model.zeros_like();
            let loss = ntp_loss_and_grad(&model, &batch, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                let msg = format!("generator loss became {loss} at epoch {epoch}");
                warn!("{msg}; keeping best checkpoint");
                aborted = Some(msg);
                break 'epochs;
            }
            weighted += loss * count as f64;
            seen += count;
            let mut gt = grads.tensors_mut();
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut gt, cfg.grad_clip);
            }
            let gt: Vec<&[T]> = gt.into_iter().map(|g| &*g).collect();
            adam.step(model.tensors_mut(), gt);
        }
        let train_loss = weighted / seen.max(1) as f64;
        let val_loss = if valid.is_empty() { train_loss } else { ntp_loss(&model, valid)? };
        debug!("generator epoch {epoch}: train {train_loss:.5} valid {val_loss:.5}");
        history.push(GeneratorEpoch { epoch, train_loss, val_loss });
        if val_loss < best.1 || (valid.is_empty() && val_loss.is_finite()) {
            best = (model.clone(), val_loss, epoch);
        }
    }
    if best.1.is_infinite() && aborted.is_none() {
        best.0 = model;
    }
    info!("generator trained: best validation loss {:.5} at epoch {}", best.1, best.2);
    Ok(GeneratorOutcome {
        model: best.0,
        history,
        best_epoch: best.2,
        best_val_loss: best.1,
        aborted,
    })
}

pub fn train_generator<T: Scalar>(
    split: &SplitDataset,
    ids: &[SemanticId],
    vocab: VocabSpec,
    cfg: &GeneratorConfig,
) -> Result<GeneratorOutcome<T>> {
    let table = IdTable::new(ids, vocab)?;
    let max_len = cfg.resolved_max_len(&vocab);
    let train = training_sequences(split, &table, max_len)?;
    let valid = validation_sequences(split, &table, max_len)?;
    train_on_sequences(vocab, &train, &valid, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    vocab: VocabSpec,
    n_layers: usize,
    n_heads: usize,
    width: usize,
    ffn_mult: usize,
    max_len: usize,
    seed: u64,
    epoch: usize,
    val_loss: f64,
    shapes: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> Generator<T> {
    pub fn save(&self, dir: &Path, seed: u64, epoch: usize, val_loss: f64) -> Result<()> {
        fs::create_dir_all(dir)?;
        emb::save_params(dir, "gen_", self)?;
        let m = Manifest {
            vocab: self.vocab,
            n_layers: self.n_layers(),
            n_heads: self.n_heads,
            width: self.width(),
            ffn_mult: self.blocks.first().map_or(4, |b| b.w_1.ncols() / self.width()),
            max_len: self.max_len(),
            seed,
            epoch,
            val_loss: if val_loss.is_finite() { val_loss } else { -1.0 },
            shapes: self.tensor_specs(),
        };
        fs::write(dir.join("generator.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("generator.json"))?)?;
        let cfg = GeneratorConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            width: m.width,
            ffn_mult: m.ffn_mult,
            max_len: m.max_len,
            seed: m.seed,
            ..GeneratorConfig::default()
        };
        let mut model = Generator::new(m.vocab, &cfg)?;
        emb::load_params(dir, "gen_", &mut model)?;
        Ok(model)
    }
}
