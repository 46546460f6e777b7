//! PCA whitening.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};

pub const EIGEN_FLOOR: f64 = 1e-8;
pub const DEFAULT_OUT_DIM: usize = 384;
const BLOB_KIND: &str = "pca";

/// `y_j = ⟨x − mean, p_j⟩ / sqrt(λ_j + floor)` for the top `out_dim`
/// eigenvectors `p_j` of the sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub input_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f32>,
    /// `out_dim × input_dim`: one unit eigenvector per row, largest eigenvalue first.
    pub components: Vec<f32>,
    pub eigenvalues: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct PcaHeader {
    input_dim: usize,
    out_dim: usize,
    floor: f64,
}

/// Fit on row-major `samples` of width `dim`.
pub fn fit_pca(samples: &[f32], dim: usize, out_dim: usize) -> Result<PcaModel> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::invalid("PCA samples must be a multiple of dim"));
    }
    let n = samples.len() / dim;
    if out_dim == 0 || out_dim > dim {
        return Err(Error::invalid(format!(
            "PCA output dim {out_dim} must be in 1..={dim}"
        )));
    }
    if n < out_dim {
        return Err(Error::invalid(format!(
            "PCA to {out_dim} dims needs at least {out_dim} samples, got {n}"
        )));
    }
    let mut mean = vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (c, (&x, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = x as f64 - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(out_dim * dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for &c in order.iter().take(out_dim) {
        let v = eig.eigenvectors.column(c);
        // Sign convention: the largest-magnitude entry is positive.
        let mut pivot = 0;
        for i in 1..dim {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|&x| (sign * x) as f32));
        eigenvalues.push(eig.eigenvalues[c].max(0.0) as f32);
    }

    Ok(PcaModel {
        input_dim: dim,
        out_dim,
        mean: mean.into_iter().map(|m| m as f32).collect(),
        components,
        eigenvalues,
    })
}

impl PcaModel {
    fn scale(&self, j: usize) -> f64 {
        (self.eigenvalues[j] as f64 + EIGEN_FLOOR).sqrt()
    }

    pub fn transform(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(&a, &m)| a as f64 - m as f64).collect();
        Ok((0..self.out_dim)
            .map(|j| {
                let p = &self.components[j * self.input_dim..(j + 1) * self.input_dim];
                let proj: f64 = p.iter().zip(&centered).map(|(&a, b)| a as f64 * b).sum();
                (proj / self.scale(j)) as f32
            })
            .collect())
    }

    /// Map whitened coordinates back to the input space (exact only when
    /// `out_dim == input_dim`).
    pub fn inverse_transform(&self, y: &[f32]) -> Result<Vec<f32>> {
        if y.len() != self.out_dim {
            return Err(Error::DimMismatch {
                expected: self.out_dim,
                got: y.len(),
            });
        }
        let mut x: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (j, &yj) in y.iter().enumerate() {
            let w = yj as f64 * self.scale(j);
            let p = &self.components[j * self.input_dim..(j + 1) * self.input_dim];
            x.iter_mut().zip(p).for_each(|(a, &b)| *a += w * b as f64);
        }
        Ok(x.into_iter().map(|v| v as f32).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let header = PcaHeader {
            input_dim: self.input_dim,
            out_dim: self.out_dim,
            floor: EIGEN_FLOOR,
        };
        let mut payload = self.mean.clone();
        payload.extend_from_slice(&self.components);
        payload.extend_from_slice(&self.eigenvalues);
        blob::write(path, BLOB_KIND, &header, &blob::f32_bytes(&payload))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, payload): (PcaHeader, _) = blob::read(path, BLOB_KIND)?;
        let v = blob::bytes_f32(&payload)?;
        let (d, o) = (h.input_dim, h.out_dim);
        if v.len() != d + o * d + o {
            return Err(Error::Corruption("pca: payload size does not match header".into()));
        }
        Ok(Self {
            input_dim: d,
            out_dim: o,
            mean: v[..d].to_vec(),
            components: v[d..d + o * d].to_vec(),
            eigenvalues: v[d + o * d..].to_vec(),
        })
    }
}
