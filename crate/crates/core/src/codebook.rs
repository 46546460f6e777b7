//! Global K-means dictionaries and VLAD encoding.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::aggregation::{InstanceTokenSet, Provenance};
use crate::blob;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::linalg;
use crate::pca::PcaModel;
use crate::pooling::{GlobalDescriptor, PoolMethod};
use crate::rng;
use crate::store::TokenSet;

pub const DEFAULT_ITERS: usize = 25;
pub const DEFAULT_SAMPLE_BUDGET: usize = 500_000;
pub const DEFAULT_SOFT_ALPHA: f32 = 10.0;
const BLOB_KIND: &str = "codebook";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub sample_size: usize,
    pub rng_seed: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`.
    pub centroids: Vec<f32>,
    pub meta: CodebookMeta,
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    k: usize,
    dim: usize,
    meta: CodebookMeta,
}

/// Up to `budget` tokens drawn uniformly without replacement from all tokens
/// of `sets`, in (set, token) order.
pub fn sample_tokens(sets: &[&TokenSet], budget: usize, seed: u64) -> Result<(usize, Vec<f32>)> {
    let dim = sets.first().map_or(0, |s| s.dim());
    if sets.iter().any(|s| s.dim() != dim) {
        return Err(Error::Format("token sets differ in dim".into()));
    }
    let total: usize = sets.iter().map(|s| s.n_tokens()).sum();
    let mut picks: Vec<usize> = if total <= budget {
        (0..total).collect()
    } else {
        sample(&mut rng::rng(seed), total, budget).into_vec()
    };
    picks.sort_unstable();
    let mut out = Vec::with_capacity(picks.len() * dim);
    let mut set = 0;
    let mut base = 0;
    for p in picks {
        while p >= base + sets[set].n_tokens() {
            base += sets[set].n_tokens();
            set += 1;
        }
        out.extend_from_slice(sets[set].token(p - base));
    }
    Ok((dim, out))
}

/// k-means++ seeded Lloyd over a token sample.
pub fn train_codebook(sample: &[f32], dim: usize, k: usize, iters: usize, rng_seed: u64) -> Result<Codebook> {
    if dim == 0 || sample.len() % dim != 0 {
        return Err(Error::invalid("codebook sample must be a multiple of dim"));
    }
    let n = sample.len() / dim;
    if n < k {
        return Err(Error::invalid(format!(
            "codebook sample of {n} tokens is smaller than K={k}"
        )));
    }
    let r = kmeans(
        sample,
        dim,
        KMeansConfig {
            k,
            max_iters: iters,
            seed: rng_seed,
        },
    )?;
    if r.centroids.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("codebook centroid is not finite".into()));
    }
    Ok(Codebook {
        k,
        dim,
        centroids: r.centroids,
        meta: CodebookMeta {
            sample_size: n,
            rng_seed,
            iterations: r.iterations,
        },
    })
}

impl Codebook {
    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    fn centroid_norms(&self) -> Vec<f32> {
        (0..self.k).map(|k| linalg::norm(self.centroid(k))).collect()
    }

    /// Cosine of a unit token to every centroid.
    fn cosines(&self, t: &[f32], norms: &[f32], out: &mut [f32]) {
        for (k, o) in out.iter_mut().enumerate() {
            let n = norms[k];
            *o = if n > 0.0 { linalg::dot(t, self.centroid(k)) / n } else { f32::NEG_INFINITY };
        }
    }

    /// Nearest centroid of each token by cosine (ties to the lowest index).
    pub fn assign(&self, ts: &TokenSet) -> Vec<usize> {
        let norms = self.centroid_norms();
        let mut cos = vec![0.0; self.k];
        ts.rows()
            .map(|t| {
                self.cosines(t, &norms, &mut cos);
                linalg::argmax(&cos).unwrap_or(0)
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let h = CodebookHeader {
            k: self.k,
            dim: self.dim,
            meta: self.meta.clone(),
        };
        blob::write(path, BLOB_KIND, &h, &blob::f32_bytes(&self.centroids))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, payload): (CodebookHeader, _) = blob::read(path, BLOB_KIND)?;
        let centroids = blob::bytes_f32(&payload)?;
        if centroids.len() != h.k * h.dim {
            return Err(Error::Corruption("codebook: payload size does not match header".into()));
        }
        Ok(Self {
            k: h.k,
            dim: h.dim,
            centroids,
            meta: h.meta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VladMode {
    /// One PCA-whitened vector.
    Sv,
    /// The intra-normalized residual blocks as a multi-vector set.
    Mv,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VladOutput {
    Single(GlobalDescriptor),
    Multi(InstanceTokenSet),
}

/// Per-cluster residual sums `Σ w_ik (t_i − c_k)`, each block L2-normalized
/// (all-zero blocks stay zero). Returns the `K × dim` blocks and the
/// assignment mass per cluster.
pub fn vlad_residuals(ts: &TokenSet, cb: &Codebook, soft_alpha: Option<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    if ts.dim() != cb.dim {
        return Err(Error::DimMismatch {
            expected: cb.dim,
            got: ts.dim(),
        });
    }
    if let Some(a) = soft_alpha {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::invalid(format!("soft VLAD alpha must be positive, got {a}")));
        }
    }
    let (k, dim) = (cb.k, cb.dim);
    let norms = cb.centroid_norms();
    let mut res = vec![0.0f64; k * dim];
    let mut mass = vec![0.0f64; k];
    let mut cos = vec![0.0f32; k];
    let mut w = vec![0.0f64; k];
    for t in ts.rows() {
        cb.cosines(t, &norms, &mut cos);
        match soft_alpha {
            None => {
                w.iter_mut().for_each(|x| *x = 0.0);
                w[linalg::argmax(&cos).unwrap_or(0)] = 1.0;
            }
            Some(a) => {
                let top = cos.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                for (wk, &c) in w.iter_mut().zip(&cos) {
                    *wk = (a as f64 * (c as f64 - top)).exp();
                }
                let z: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= z);
            }
        }
        for c in 0..k {
            if w[c] == 0.0 {
                continue;
            }
            mass[c] += w[c];
            let centroid = cb.centroid(c);
            for ((r, &x), &m) in res[c * dim..(c + 1) * dim].iter_mut().zip(t).zip(centroid) {
                *r += w[c] * (x as f64 - m as f64);
            }
        }
    }
    let mut out: Vec<f32> = res.into_iter().map(|x| x as f32).collect();
    for block in out.chunks_exact_mut(dim) {
        let n = linalg::norm(block);
        if n > 1e-12 {
            block.iter_mut().for_each(|x| *x /= n);
        } else {
            block.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok((out, mass.into_iter().map(|m| m as f32).collect()))
}

/// Concatenated, L2-normalized VLAD vector before PCA (`K·dim` values).
pub fn vlad_raw_sv(ts: &TokenSet, cb: &Codebook, soft_alpha: Option<f32>) -> Result<Vec<f32>> {
    let (mut v, _) = vlad_residuals(ts, cb, soft_alpha)?;
    if linalg::normalize(&mut v) == 0.0 {
        return Err(Error::Degenerate(format!(
            "{}: every VLAD residual is zero",
            ts.image_id
        )));
    }
    Ok(v)
}

/// VLAD descriptor of one image.
///
/// `Mv` keeps the residual block of every cluster that received tokens. A
/// cluster whose tokens sum exactly to its centroid has a zero residual; it is
/// replaced by the unit centroid direction and a warning is logged.
pub fn vlad_encode(
    ts: &TokenSet,
    cb: &Codebook,
    mode: VladMode,
    soft_alpha: Option<f32>,
    pca: Option<&PcaModel>,
) -> Result<VladOutput> {
    match mode {
        VladMode::Sv => {
            let pca = pca.ok_or_else(|| {
                Error::invalid("single-vector VLAD needs a PCA model fitted on gallery descriptors")
            })?;
            let raw = vlad_raw_sv(ts, cb, soft_alpha)?;
            let mut v = pca.transform(&raw)?;
            if linalg::normalize(&mut v) == 0.0 {
                return Err(Error::Degenerate(format!("{}: whitened VLAD is zero", ts.image_id)));
            }
            Ok(VladOutput::Single(GlobalDescriptor {
                image_id: ts.image_id.clone(),
                vector: v,
                method: PoolMethod::Mean,
            }))
        }
        VladMode::Mv => {
            let (blocks, mass) = vlad_residuals(ts, cb, soft_alpha)?;
            let dim = cb.dim;
            let mut tokens = Vec::new();
            let mut clusters = Vec::new();
            let mut placeholders = 0;
            for c in 0..cb.k {
                if mass[c] <= 0.0 {
                    continue;
                }
                let block = &blocks[c * dim..(c + 1) * dim];
                if block.iter().all(|&x| x == 0.0) {
                    let mut p = cb.centroid(c).to_vec();
                    if linalg::normalize(&mut p) == 0.0 {
                        continue;
                    }
                    placeholders += 1;
                    tokens.extend_from_slice(&p);
                } else {
                    tokens.extend_from_slice(block);
                }
                clusters.push(c);
            }
            if placeholders > 0 {
                log::warn!(
                    "{}: degenerate VLAD descriptor, {placeholders} zero residual block(s) replaced by centroid directions",
                    ts.image_id
                );
            }
            if clusters.is_empty() {
                return Err(Error::Degenerate(format!("{}: no usable VLAD blocks", ts.image_id)));
            }
            Ok(VladOutput::Multi(InstanceTokenSet {
                image_id: ts.image_id.clone(),
                dim,
                tokens,
                seeds: clusters,
                provenance: Provenance {
                    method: if soft_alpha.is_some() { "vlad_soft" } else { "vlad" }.into(),
                    strategy: None,
                    mode: None,
                    k: cb.k,
                    tau: soft_alpha,
                    rng_seed: cb.meta.rng_seed,
                },
            }))
        }
    }
}
