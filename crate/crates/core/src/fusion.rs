//! Collaborative-guided attention fusion.
//!
//! The collaborative embedding is the query, the visual and textual
//! embeddings are keys and values:
//! `α_m = softmax_m((W_q e_c)ᵀ (W_k e_m))` for `m ∈ {v, t}` and the fused
//! vector is `x = [α_v e_v + α_t e_t ; e_c]`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::ItemCatalog;
use crate::optim::{derive_seed, gaussian_matrix, rng_from_seed, Adam, Parameters};
use crate::rqvae::InputSource;
pub use crate::pca::{fit_pca, mean_row_norm, PcaReducer};
use crate::{Error, Result, Scalar};

/// Learnable query and key projections, both `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Array2::eye(d),
            w_k: Array2::eye(d),
        }
    }

    /// Identity plus Gaussian noise of standard deviation `noise_std`.
    pub fn init(d: usize, noise_std: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, "fusion/init"));
        let mut p = Self::identity(d);
        p.w_q += &gaussian_matrix(&mut rng, d, d, noise_std);
        p.w_k += &gaussian_matrix(&mut rng, d, d, noise_std);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Array2::zeros(self.w_q.raw_dim()),
            w_k: Array2::zeros(self.w_k.raw_dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [("W_q", &self.w_q), ("W_k", &self.w_k)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::mismatch(format!("{name} (must be square)"), d, m.ncols()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: "fusion parameters".into(),
                    detail: format!("{name} has non-finite entries"),
                });
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for FusionParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.w_q.as_slice().expect("standard layout"),
            self.w_k.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_q.as_slice_mut().expect("standard layout"),
            self.w_k.as_slice_mut().expect("standard layout"),
        ]
    }

    fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w_q".into(), self.w_q.shape().to_vec()),
            ("w_k".into(), self.w_k.shape().to_vec()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionWeights<T> {
    pub alpha_v: T,
    pub alpha_t: T,
}

/// Which signals participate in fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModalityMask {
    pub use_collab: bool,
    pub use_image: bool,
    pub use_text: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self {
            use_collab: true,
            use_image: true,
            use_text: true,
        }
    }
}

impl ModalityMask {
    /// Attention is learned only when the query and both keys are present.
    pub fn attention_active(&self) -> bool {
        self.use_collab && self.use_image && self.use_text
    }

    /// Weights imposed by the mask when attention is inactive.
    fn fixed_weights<T: Scalar>(&self) -> Option<AttentionWeights<T>> {
        let half = T::of(0.5);
        match (self.use_image, self.use_text) {
            (true, false) => Some(AttentionWeights { alpha_v: T::one(), alpha_t: T::zero() }),
            (false, true) => Some(AttentionWeights { alpha_v: T::zero(), alpha_t: T::one() }),
            (false, false) => Some(AttentionWeights { alpha_v: half, alpha_t: half }),
            (true, true) if !self.use_collab => Some(AttentionWeights { alpha_v: half, alpha_t: half }),
            (true, true) => None,
        }
    }
}

fn mat_vec_f64<T: Scalar>(w: &Array2<T>, x: ArrayView1<'_, T>) -> Vec<f64> {
    w.rows()
        .into_iter()
        .map(|r| r.iter().zip(x.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
        .collect()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-way softmax of logits, max-subtracted.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

/// Attention logits `(W_q e_c)ᵀ (W_k e_m)` for `m = v, t`.
pub fn attention_logits<T: Scalar>(
    e_c: ArrayView1<'_, T>,
    e_v: ArrayView1<'_, T>,
    e_t: ArrayView1<'_, T>,
    p: &FusionParams<T>,
) -> [f64; 2] {
    let q = mat_vec_f64(&p.w_q, e_c);
    [dot64(&q, &mat_vec_f64(&p.w_k, e_v)), dot64(&q, &mat_vec_f64(&p.w_k, e_t))]
}

pub fn guided_attention<T: Scalar>(
    e_c: ArrayView1<'_, T>,
    e_v: ArrayView1<'_, T>,
    e_t: ArrayView1<'_, T>,
    p: &FusionParams<T>,
) -> Result<AttentionWeights<T>> {
    let d = p.dim();
    for (name, v) in [("e_c", &e_c), ("e_v", &e_v), ("e_t", &e_t)] {
        if v.len() != d {
            return Err(Error::mismatch(name, d, v.len()));
        }
    }
    let [a, b] = softmax2(attention_logits(e_c, e_v, e_t, p));
    Ok(AttentionWeights {
        alpha_v: T::of(a),
        alpha_t: T::of(b),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation<T> {
    pub x: Array1<T>,
}

impl<T: Scalar> FusedRepresentation<T> {
    pub fn content(&self) -> ArrayView1<'_, T> {
        let d = self.x.len() / 2;
        self.x.slice(s![..d])
    }

    pub fn collaborative(&self) -> ArrayView1<'_, T> {
        let d = self.x.len() / 2;
        self.x.slice(s![d..])
    }
}

pub fn fuse<T: Scalar>(
    e_c: ArrayView1<'_, T>,
    e_v: ArrayView1<'_, T>,
    e_t: ArrayView1<'_, T>,
    w: &AttentionWeights<T>,
) -> FusedRepresentation<T> {
    let d = e_c.len();
    let mut x = Array1::<T>::zeros(2 * d);
    for j in 0..d {
        x[j] = w.alpha_v * e_v[j] + w.alpha_t * e_t[j];
    }
    x.slice_mut(s![d..]).assign(&e_c);
    FusedRepresentation { x }
}

/// Per-item reduced modality matrices, all `N × d`, with the ablation mask
/// already applied (disabled signals are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityInputs<T> {
    pub collab: Array2<T>,
    pub visual: Array2<T>,
    pub text: Array2<T>,
    pub mask: ModalityMask,
}

impl<T: Scalar> ModalityInputs<T> {
    pub fn new(
        collab: Array2<T>,
        visual: Array2<T>,
        text: Array2<T>,
        mask: ModalityMask,
    ) -> Result<Self> {
        let (n, d) = collab.dim();
        for (name, m) in [("visual features", &visual), ("text features", &text)] {
            if m.nrows() != n {
                return Err(Error::mismatch(format!("{name} rows"), n, m.nrows()));
            }
            if m.ncols() != d {
                return Err(Error::mismatch(format!("{name} width"), d, m.ncols()));
            }
        }
        let zero_if = |m: Array2<T>, keep: bool| if keep { m } else { Array2::zeros((n, d)) };
        Ok(Self {
            collab: zero_if(collab, mask.use_collab),
            visual: zero_if(visual, mask.use_image),
            text: zero_if(text, mask.use_text),
            mask,
        })
    }

    pub fn n_items(&self) -> usize {
        self.collab.nrows()
    }

    pub fn dim(&self) -> usize {
        self.collab.ncols()
    }

    fn weights(&self, item: usize, p: &FusionParams<T>) -> AttentionWeights<T> {
        self.mask.fixed_weights().unwrap_or_else(|| {
            let [a, b] = softmax2(attention_logits(
                self.collab.row(item),
                self.visual.row(item),
                self.text.row(item),
                p,
            ));
            AttentionWeights {
                alpha_v: T::of(a),
                alpha_t: T::of(b),
            }
        })
    }

    /// Fused rows for the listed items.
    pub fn fuse_rows(&self, items: &[usize], p: &FusionParams<T>) -> (Array2<T>, Vec<AttentionWeights<T>>) {
        let d = self.dim();
        let mut out = Array2::<T>::zeros((items.len(), 2 * d));
        let mut weights = Vec::with_capacity(items.len());
        for (r, &i) in items.iter().enumerate() {
            let w = self.weights(i, p);
            let f = fuse(self.collab.row(i), self.visual.row(i), self.text.row(i), &w);
            out.row_mut(r).assign(&f.x);
            weights.push(w);
        }
        (out, weights)
    }

    pub fn fuse_all(&self, p: &FusionParams<T>) -> Array2<T> {
        let items: Vec<usize> = (0..self.n_items()).collect();
        self.fuse_rows(&items, p).0
    }

    /// Accumulate into `grads` the gradient of a loss with respect to
    /// `W_q, W_k`, given `grad_x` (rows aligned with `items`) of the fused rows.
    pub fn backward_rows(
        &self,
        items: &[usize],
        p: &FusionParams<T>,
        grad_x: ArrayView2<'_, T>,
        grads: &mut FusionParams<T>,
    ) {
        if !self.mask.attention_active() {
            return;
        }
        let d = self.dim();
        let mut gq = Array2::<f64>::zeros((d, d));
        let mut gk = Array2::<f64>::zeros((d, d));
        for (r, &i) in items.iter().enumerate() {
            let (ec, ev, et) = (self.collab.row(i), self.visual.row(i), self.text.row(i));
            let q = mat_vec_f64(&p.w_q, ec);
            let kv = mat_vec_f64(&p.w_k, ev);
            let kt = mat_vec_f64(&p.w_k, et);
            let [av, at] = softmax2([dot64(&q, &kv), dot64(&q, &kt)]);
            let g = grad_x.row(r);
            let (mut dav, mut dat) = (0.0, 0.0);
            for j in 0..d {
                dav += g[j].as_f64() * ev[j].as_f64();
                dat += g[j].as_f64() * et[j].as_f64();
            }
            let mean = av * dav + at * dat;
            let dsv = av * (dav - mean);
            let dst = at * (dat - mean);
            for a in 0..d {
                let dq = dsv * kv[a] + dst * kt[a];
                let (qa_v, qa_t) = (dsv * q[a], dst * q[a]);
                for b in 0..d {
                    gq[[a, b]] += dq * ec[b].as_f64();
                    gk[[a, b]] += qa_v * ev[b].as_f64() + qa_t * et[b].as_f64();
                }
            }
        }
        grads.w_q.zip_mut_with(&gq, |g, &v| *g += T::of(v));
        grads.w_k.zip_mut_with(&gk, |g, &v| *g += T::of(v));
    }
}

/// Fusion parameters trained jointly with the tokenizer: rows are fused on
/// demand and the tokenizer's input gradients update `W_q, W_k`.
pub struct JointFusion<T: Scalar> {
    pub inputs: ModalityInputs<T>,
    pub params: FusionParams<T>,
    adam: Adam<T>,
}

impl<T: Scalar> JointFusion<T> {
    pub fn new(inputs: ModalityInputs<T>, params: FusionParams<T>, lr: f64) -> Self {
        Self {
            inputs,
            params,
            adam: Adam::new(lr),
        }
    }

    pub fn fused(&self) -> Array2<T> {
        self.inputs.fuse_all(&self.params)
    }
}

impl<T: Scalar> InputSource<T> for JointFusion<T> {
    fn n_items(&self) -> usize {
        self.inputs.n_items()
    }

    fn rows(&self, items: &[usize]) -> Array2<T> {
        self.inputs.fuse_rows(items, &self.params).0
    }

    fn apply_gradient(&mut self, items: &[usize], grad: ArrayView2<'_, T>) {
        if !self.inputs.mask.attention_active() {
            return;
        }
        let mut g = self.params.zeros_like();
        self.inputs.backward_rows(items, &self.params, grad, &mut g);
        self.adam.step(self.params.tensors_mut(), g.tensors());
    }
}

/// Reducers mapping raw visual and textual features to width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityReducers<T> {
    pub visual: PcaReducer<T>,
    pub text: PcaReducer<T>,
}

impl<T: Scalar> ModalityReducers<T> {
    /// Fit both reducers on the catalog, normalising projections to unit
    /// mean row norm.
    pub fn fit(catalog: &ItemCatalog, d: usize) -> Result<Self> {
        let v = catalog.visual.mapv(|x| T::of(x as f64));
        let t = catalog.text.mapv(|x| T::of(x as f64));
        let mut visual = fit_pca(v.view(), d)?;
        visual.normalize_output(v.view())?;
        let mut text = fit_pca(t.view(), d)?;
        text.normalize_output(t.view())?;
        Ok(Self { visual, text })
    }

    pub fn project(&self, catalog: &ItemCatalog) -> Result<(Array2<T>, Array2<T>)> {
        let v = catalog.visual.mapv(|x| T::of(x as f64));
        let t = catalog.text.mapv(|x| T::of(x as f64));
        let pv = self.visual.project(v.view()).map_err(|e| rename(e, "visual features"))?;
        let pt = self.text.project(t.view()).map_err(|e| rename(e, "text features"))?;
        Ok((pv, pt))
    }
}

fn rename(e: Error, what: &str) -> Error {
    match e {
        Error::DimensionMismatch { expected, got, .. } => Error::mismatch(what, expected, got),
        other => other,
    }
}

/// Fuse every catalog item: row `i` is `fuse(guided_attention(..))` of item `i`.
pub fn fuse_catalog<T: Scalar>(
    catalog: &ItemCatalog,
    collab_items: ArrayView2<'_, T>,
    p: &FusionParams<T>,
    reducers: &ModalityReducers<T>,
    mask: ModalityMask,
) -> Result<Array2<T>> {
    p.validate()?;
    let d = p.dim();
    if collab_items.nrows() != catalog.n_items() {
        return Err(Error::mismatch(
            "collaborative embedding rows",
            catalog.n_items(),
            collab_items.nrows(),
        ));
    }
    if collab_items.ncols() != d {
        return Err(Error::mismatch("collaborative embedding width", d, collab_items.ncols()));
    }
    let (v, t) = reducers.project(catalog)?;
    if v.ncols() != d {
        return Err(Error::mismatch("reduced visual features", d, v.ncols()));
    }
    if t.ncols() != d {
        return Err(Error::mismatch("reduced text features", d, t.ncols()));
    }
    let inputs = ModalityInputs::new(collab_items.to_owned(), v, t, mask)?;
    Ok(inputs.fuse_all(p))
}

/// Scale rows of `m` in place to unit mean L2 norm; returns the factor used.
pub fn normalize_mean_norm<T: Scalar>(m: &mut Array2<T>) -> f64 {
    let n = mean_row_norm(m.view());
    if n > 0.0 {
        let f = T::of(1.0 / n);
        m.mapv_inplace(|v| v * f);
        1.0 / n
    } else {
        1.0
    }
}

/// Mean attention weights over items; `(α_v, α_t)`.
pub fn mean_attention<T: Scalar>(weights: &[AttentionWeights<T>]) -> (f64, f64) {
    if weights.is_empty() {
        return (0.0, 0.0);
    }
    let n = weights.len() as f64;
    let v = weights.iter().map(|w| w.alpha_v.as_f64()).sum::<f64>() / n;
    let t = weights.iter().map(|w| w.alpha_t.as_f64()).sum::<f64>() / n;
    (v, t)
}
