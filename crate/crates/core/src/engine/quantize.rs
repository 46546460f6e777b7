//! Token codecs: FP16, per-vector symmetric INT8 and product quantization.

use std::fmt;
use std::str::FromStr;

use half::f16;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::mvstore::{MultiVectorStore, Payload};
use crate::error::{Error, Result};
use crate::kmeans::{self, kmeans, KMeansConfig};
use crate::par;
use crate::rng;

pub const PQ_CENTROIDS: usize = 256;
pub const PQ_ITERS: usize = 25;
/// Default cap on PQ training vectors.
pub const PQ_TRAIN_BUDGET: usize = PQ_CENTROIDS * 40;

/// Serialized as its name: `f32`, `fp16`, `int8` or `pq:{m}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Codec {
    F32,
    Fp16,
    Int8,
    Pq(usize),
}

impl Codec {
    pub fn bytes_per_token(self, dim: usize) -> usize {
        match self {
            Codec::F32 => 4 * dim,
            Codec::Fp16 => 2 * dim,
            Codec::Int8 => dim + 4,
            Codec::Pq(m) => m,
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Codec::F32 => f.write_str("f32"),
            Codec::Fp16 => f.write_str("fp16"),
            Codec::Int8 => f.write_str("int8"),
            Codec::Pq(m) => write!(f, "pq:{m}"),
        }
    }
}

impl FromStr for Codec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "fp32" => Ok(Codec::F32),
            "fp16" | "f16" => Ok(Codec::Fp16),
            "int8" => Ok(Codec::Int8),
            _ => s
                .strip_prefix("pq:")
                .and_then(|m| m.parse().ok())
                .filter(|&m: &usize| m > 0)
                .map(Codec::Pq)
                .ok_or_else(|| Error::invalid(format!("unknown codec {s:?}"))),
        }
    }
}

impl From<Codec> for String {
    fn from(c: Codec) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Codec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Symmetric per-vector INT8: `scale = max|x| / 127`, `code = round(x / scale)`.
pub fn int8_encode(x: &[f32], codes: &mut Vec<i8>) -> f32 {
    let amax = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = amax / 127.0;
    if scale == 0.0 {
        codes.extend(std::iter::repeat_n(0, x.len()));
        return 0.0;
    }
    // Exact division keeps |x − code·scale| ≤ scale/2 in exact arithmetic.
    let s = scale as f64;
    codes.extend(
        x.iter()
            .map(|&v| (v as f64 / s).round().clamp(-127.0, 127.0) as i8),
    );
    scale
}

pub fn int8_decode(codes: &[i8], scale: f32, out: &mut [f32]) {
    for (o, &c) in out.iter_mut().zip(codes) {
        *o = c as f32 * scale;
    }
}

/// One 256-entry codebook per sub-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqCodebooks {
    pub m: usize,
    pub dsub: usize,
    /// `m × 256 × dsub`.
    pub centroids: Vec<f32>,
}

impl PqCodebooks {
    pub fn train(sample: &[f32], dim: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || dim % m != 0 {
            return Err(Error::invalid(format!("PQ: dim {dim} is not divisible by m={m}")));
        }
        let n = sample.len() / dim;
        if n < PQ_CENTROIDS {
            return Err(Error::invalid(format!(
                "PQ: need at least {PQ_CENTROIDS} training vectors, got {n}"
            )));
        }
        let dsub = dim / m;
        let subspaces: Vec<usize> = (0..m).collect();
        let books = par::try_map(&subspaces, |&j| {
            let sub: Vec<f32> = sample
                .chunks_exact(dim)
                .flat_map(|v| v[j * dsub..(j + 1) * dsub].iter().copied())
                .collect();
            kmeans(
                &sub,
                dsub,
                KMeansConfig {
                    k: PQ_CENTROIDS,
                    max_iters: PQ_ITERS,
                    seed: rng::splitmix64(seed ^ j as u64),
                },
            )
            .map(|r| r.centroids)
        })?;
        Ok(Self {
            m,
            dsub,
            centroids: books.concat(),
        })
    }

    fn book(&self, j: usize) -> &[f32] {
        let len = PQ_CENTROIDS * self.dsub;
        &self.centroids[j * len..(j + 1) * len]
    }

    pub fn encode(&self, x: &[f32], out: &mut Vec<u8>) {
        for j in 0..self.m {
            let (c, _) = kmeans::nearest(&x[j * self.dsub..(j + 1) * self.dsub], self.book(j), self.dsub);
            out.push(c as u8);
        }
    }

    pub fn decode(&self, codes: &[u8], out: &mut [f32]) {
        for (j, &c) in codes.iter().enumerate() {
            let c = c as usize;
            out[j * self.dsub..(j + 1) * self.dsub]
                .copy_from_slice(&self.book(j)[c * self.dsub..(c + 1) * self.dsub]);
        }
    }
}

/// Re-encode an `f32` store with `codec`.
///
/// PQ codebooks are trained on `train_sample` when given, otherwise on a
/// seeded sample of at most [`PQ_TRAIN_BUDGET`] of the store's own vectors.
pub fn quantize_store(
    store: &MultiVectorStore,
    codec: Codec,
    train_sample: Option<&[f32]>,
    seed: u64,
) -> Result<MultiVectorStore> {
    let Payload::F32(raw) = &store.payload else {
        return Err(Error::invalid("quantize_store expects an f32 store"));
    };
    let dim = store.dim();
    let payload = match codec {
        Codec::F32 => Payload::F32(raw.clone()),
        Codec::Fp16 => Payload::F16(raw.iter().map(|&x| f16::from_f32(x).to_bits()).collect()),
        Codec::Int8 => {
            let mut codes = Vec::with_capacity(raw.len());
            let scales = raw
                .chunks_exact(dim)
                .map(|v| int8_encode(v, &mut codes))
                .collect();
            Payload::Int8 { codes, scales }
        }
        Codec::Pq(m) => {
            if dim % m != 0 {
                return Err(Error::invalid(format!("PQ: dim {dim} is not divisible by m={m}")));
            }
            let owned;
            let sample = match train_sample {
                Some(s) => s,
                None => {
                    owned = subsample(raw, dim, PQ_TRAIN_BUDGET, rng::stage_seed(seed, "pq-sample"));
                    &owned
                }
            };
            let books = PqCodebooks::train(sample, dim, m, rng::stage_seed(seed, "pq"))?;
            let vectors: Vec<&[f32]> = raw.chunks_exact(dim).collect();
            let codes = par::map(&vectors, |v| {
                let mut c = Vec::with_capacity(m);
                books.encode(v, &mut c);
                c
            });
            Payload::Pq {
                codes: codes.concat(),
                books,
            }
        }
    };
    Ok(store.with_payload(codec, payload))
}

/// Up to `budget` rows drawn uniformly without replacement, in row order.
pub fn subsample(rows: &[f32], dim: usize, budget: usize, seed: u64) -> Vec<f32> {
    let n = rows.len() / dim;
    if n <= budget {
        return rows.to_vec();
    }
    let mut picked = sample(&mut rng::rng(seed), n, budget).into_vec();
    picked.sort_unstable();
    picked
        .iter()
        .flat_map(|&i| rows[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}
