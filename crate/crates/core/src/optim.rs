//! Parameter containers, seeded initialisation and the optimisers used by
//! the trainable stages.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// Seeded, portable RNG used for every stochastic step.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named sub-task.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z * std)
}

pub fn gaussian_matrix<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || gaussian(rng, std))
}

pub fn uniform_matrix<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    bound: f64,
) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(-bound..bound)))
}

/// A model whose trainable tensors can be enumerated in a fixed order.
///
/// The order returned by [`tensors`](Self::tensors),
/// [`tensors_mut`](Self::tensors_mut) and [`tensor_specs`](Self::tensor_specs)
/// must agree; gradients are stored in a value of the same type.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;
    /// Name and shape of every tensor.
    fn tensor_specs(&self) -> Vec<(String, Vec<usize>)>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }
}

pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = {
        let views: Vec<&[T]> = grads.iter().map(|g| &**g).collect();
        global_norm(&views)
    };
    if norm > max_norm && norm > 0.0 {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::of(self.lr / bc1);
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                if self.weight_decay != 0.0 {
                    p[i] *= decay;
                }
                p[i] -= step_size * m[i] / denom;
            }
        }
    }
}

/// Plain SGD step, `p -= lr * g`.
pub fn sgd_step<T: Scalar>(params: Vec<&mut [T]>, grads: Vec<&[T]>, lr: f64) {
    let lr = T::of(lr);
    for (p, g) in params.into_iter().zip(grads) {
        p.iter_mut().zip(g).for_each(|(p, &g)| *p -= lr * g);
    }
}

/// Numerically stable log-sum-exp in f64.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// In-place softmax of a slice, max-subtracted.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax over the whole slice.
pub fn log_softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let lse = T::of(log_sum_exp(xs.iter().map(|v| v.as_f64())));
    xs.iter().map(|&v| v - lse).collect()
}
