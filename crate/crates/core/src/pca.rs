//! Principal component reduction of modality features.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result, Scalar};

/// Mean-centred orthonormal projection onto the leading principal axes.
///
/// `components` holds `min(output_dim, source_dim)` orthonormal rows; when
/// the requested output is wider than the source, projections are padded
/// with zeros. Each component's largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaReducer<T> {
    pub mean: Array1<T>,
    pub components: Array2<T>,
    pub explained_variance: Array1<T>,
    pub output_dim: usize,
    /// Multiplier applied to every projection.
    pub output_scale: T,
}

pub fn fit_pca<T: Scalar>(features: ArrayView2<'_, T>, target_d: usize) -> Result<PcaReducer<T>> {
    let (n, src) = features.dim();
    if n == 0 || src == 0 {
        return Err(Error::invalid("PCA needs a non-empty feature matrix"));
    }
    if target_d == 0 {
        return Err(Error::config("PCA target dimension must be positive"));
    }
    let x = features.mapv(|v| v.as_f64());
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;
    let cov = DMatrix::from_fn(src, src, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..src).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let k = target_d.min(src);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = 1e-12 * top.max(1e-300);
    let mut components = Array2::<T>::zeros((k, src));
    let mut explained = Array1::<T>::zeros(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = (0..src)
            .max_by(|&a, &b| {
                col[a]
                    .abs()
                    .partial_cmp(&col[b].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..src {
            components[[row, j]] = T::of(sign * col[j]);
        }
        let lambda = eig.eigenvalues[idx];
        explained[row] = T::of(if lambda > floor { lambda } else { 0.0 });
    }
    Ok(PcaReducer {
        mean: mean.mapv(T::of),
        components,
        explained_variance: explained,
        output_dim: target_d,
        output_scale: T::one(),
    })
}

impl<T: Scalar> PcaReducer<T> {
    pub fn source_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// Rows of `x` projected to `output_dim` columns.
    pub fn project(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if x.ncols() != self.source_dim() {
            return Err(Error::mismatch(
                "PCA input width",
                self.source_dim(),
                x.ncols(),
            ));
        }
        let centered = &x - &self.mean;
        let mut out = Array2::<T>::zeros((x.nrows(), self.output_dim));
        let proj = centered.dot(&self.components.t()) * self.output_scale;
        out.slice_mut(s![.., ..self.n_components()]).assign(&proj);
        Ok(out)
    }

    /// Map projections back to the source space (padding columns ignored).
    pub fn reconstruct(&self, y: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if y.ncols() != self.output_dim {
            return Err(Error::mismatch("PCA projection width", self.output_dim, y.ncols()));
        }
        let k = self.n_components();
        let unscaled = &y.slice(s![.., ..k]) / self.output_scale;
        Ok(unscaled.dot(&self.components) + &self.mean)
    }

    /// Set `output_scale` so projected rows of `x` have unit mean L2 norm.
    pub fn normalize_output(&mut self, x: ArrayView2<'_, T>) -> Result<()> {
        self.output_scale = T::one();
        let y = self.project(x)?;
        let mean_norm = mean_row_norm(y.view());
        if mean_norm > 0.0 {
            self.output_scale = T::of(1.0 / mean_norm);
        }
        Ok(())
    }
}

pub fn mean_row_norm<T: Scalar>(m: ArrayView2<'_, T>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / m.nrows() as f64
}
