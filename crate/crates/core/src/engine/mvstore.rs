//! Per-image multi-vector payloads for reranking.

use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use super::quantize::{int8_decode, Codec, PqCodebooks};
use crate::blob;
use crate::error::{Error, Result};
use crate::linalg;

const BLOB_KIND: &str = "multi-vector-store";

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Payload {
    F32(Vec<f32>),
    F16(Vec<u16>),
    Int8 { codes: Vec<i8>, scales: Vec<f32> },
    Pq { codes: Vec<u8>, books: PqCodebooks },
}

/// Token sets of a gallery, sorted by image id, in one of the [`Codec`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVectorStore {
    ids: Vec<String>,
    dim: usize,
    /// Token offsets; image `i` owns tokens `offsets[i]..offsets[i + 1]`.
    offsets: Vec<usize>,
    codec: Codec,
    pub(crate) payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    dim: usize,
    codec: Codec,
    ids: Vec<String>,
    counts: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pq: Option<PqHeader>,
}

#[derive(Serialize, Deserialize)]
struct PqHeader {
    m: usize,
    dsub: usize,
}

impl MultiVectorStore {
    /// Build an `f32` store from `(image_id, row-major tokens)` pairs.
    pub fn from_f32(dim: usize, mut entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateId(w[0].0.clone()));
            }
        }
        let mut offsets = Vec::with_capacity(entries.len() + 1);
        offsets.push(0);
        let mut data = Vec::new();
        let mut ids = Vec::with_capacity(entries.len());
        for (id, tokens) in entries {
            if tokens.is_empty() || tokens.len() % dim != 0 {
                return Err(Error::Format(format!(
                    "{id}: {} values is not a positive multiple of dim {dim}",
                    tokens.len()
                )));
            }
            let k = tokens.len() / dim;
            if k > u16::MAX as usize {
                return Err(Error::Capacity(format!("{id}: {k} tokens exceeds 65535")));
            }
            offsets.push(offsets.last().unwrap() + k);
            data.extend_from_slice(&tokens);
            ids.push(id);
        }
        Ok(Self {
            ids,
            dim,
            offsets,
            codec: Codec::F32,
            payload: Payload::F32(data),
        })
    }

    pub(crate) fn with_payload(&self, codec: Codec, payload: Payload) -> Self {
        Self {
            ids: self.ids.clone(),
            dim: self.dim,
            offsets: self.offsets.clone(),
            codec,
            payload,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(image_id)).ok()
    }

    pub fn token_count(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn total_tokens(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Bytes spent on token payloads (PQ codebooks excluded).
    pub fn payload_bytes(&self) -> usize {
        self.total_tokens() * self.codec.bytes_per_token(self.dim)
    }

    /// Decode image `i` into `out` (resized to `K × dim`).
    pub fn decode_into(&self, i: usize, out: &mut Vec<f32>) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        let d = self.dim;
        out.resize((b - a) * d, 0.0);
        match &self.payload {
            Payload::F32(v) => out.copy_from_slice(&v[a * d..b * d]),
            Payload::F16(v) => {
                for (o, &h) in out.iter_mut().zip(&v[a * d..b * d]) {
                    *o = f16::from_bits(h).to_f32();
                }
            }
            Payload::Int8 { codes, scales } => {
                for t in a..b {
                    let r = t - a;
                    int8_decode(&codes[t * d..(t + 1) * d], scales[t], &mut out[r * d..(r + 1) * d]);
                }
            }
            Payload::Pq { codes, books } => {
                let m = books.m;
                for t in a..b {
                    let r = t - a;
                    let row = &mut out[r * d..(r + 1) * d];
                    books.decode(&codes[t * m..(t + 1) * m], row);
                    // Stored tokens are unit-norm; a PQ reconstruction is not.
                    linalg::normalize(row);
                }
            }
        }
    }

    pub fn decode(&self, i: usize) -> Vec<f32> {
        let mut v = Vec::new();
        self.decode_into(i, &mut v);
        v
    }

    /// Borrow image `i` without copying when the store is `f32`.
    pub fn f32_tokens(&self, i: usize) -> Option<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Some(&v[self.offsets[i] * self.dim..self.offsets[i + 1] * self.dim]),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let counts = (0..self.len()).map(|i| self.token_count(i) as u16).collect();
        let mut pq = None;
        let payload = match &self.payload {
            Payload::F32(v) => blob::f32_bytes(v),
            Payload::F16(v) => v.iter().flat_map(|h| h.to_le_bytes()).collect(),
            Payload::Int8 { codes, scales } => {
                let mut b: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
                b.extend(blob::f32_bytes(scales));
                b
            }
            Payload::Pq { codes, books } => {
                pq = Some(PqHeader {
                    m: books.m,
                    dsub: books.dsub,
                });
                let mut b = blob::f32_bytes(&books.centroids);
                b.extend_from_slice(codes);
                b
            }
        };
        let header = StoreHeader {
            dim: self.dim,
            codec: self.codec,
            ids: self.ids.clone(),
            counts,
            pq,
        };
        blob::encode(BLOB_KIND, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (StoreHeader, Vec<u8>) = blob::decode(BLOB_KIND, bytes)?;
        let bad = |what: &str| Error::Corruption(format!("multi-vector store: {what}"));
        if h.ids.len() != h.counts.len() || h.dim == 0 {
            return Err(bad("header is inconsistent"));
        }
        if h.ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("ids not strictly ascending"));
        }
        let mut offsets = vec![0usize];
        for &c in &h.counts {
            offsets.push(offsets.last().unwrap() + c as usize);
        }
        let total = *offsets.last().unwrap();
        let d = h.dim;
        let expect = match h.codec {
            Codec::Pq(m) => {
                let p = h.pq.as_ref().ok_or_else(|| bad("missing PQ header"))?;
                if p.m != m || p.m * p.dsub != d {
                    return Err(bad("PQ header does not match dim"));
                }
                m * 256 * p.dsub * 4 + total * m
            }
            c => total * c.bytes_per_token(d),
        };
        if payload.len() != expect {
            return Err(bad("payload size does not match header"));
        }
        let payload = match h.codec {
            Codec::F32 => Payload::F32(blob::bytes_f32(&payload)?),
            Codec::Fp16 => Payload::F16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            Codec::Int8 => Payload::Int8 {
                codes: payload[..total * d].iter().map(|&b| b as i8).collect(),
                scales: blob::bytes_f32(&payload[total * d..])?,
            },
            Codec::Pq(m) => {
                let p = h.pq.unwrap();
                let cb_len = m * 256 * p.dsub * 4;
                Payload::Pq {
                    books: PqCodebooks {
                        m,
                        dsub: p.dsub,
                        centroids: blob::bytes_f32(&payload[..cb_len])?,
                    },
                    codes: payload[cb_len..].to_vec(),
                }
            }
        };
        Ok(Self {
            ids: h.ids,
            dim: d,
            offsets,
            codec: h.codec,
            payload,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path.as_ref(), &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::quantize::quantize_store;

    fn store() -> MultiVectorStore {
        let mk = |s: f32, k: usize| -> Vec<f32> {
            (0..k * 8).map(|i| ((i as f32 + s) * 0.37).sin()).collect()
        };
        MultiVectorStore::from_f32(
            8,
            (0..100).map(|i| (format!("img{i:03}"), mk(i as f32, 1 + i % 5))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sorted_and_addressable() {
        let s = MultiVectorStore::from_f32(
            2,
            vec![("b".into(), vec![1.0, 0.0]), ("a".into(), vec![0.0, 1.0, 1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(s.ids(), ["a", "b"]);
        assert_eq!(s.decode(0), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(s.position("b"), Some(1));
        assert!(MultiVectorStore::from_f32(2, vec![("a".into(), vec![1.0]), ]).is_err());
    }

    #[test]
    fn persistence_round_trips_every_codec() {
        let base = store();
        for codec in [Codec::F32, Codec::Fp16, Codec::Int8, Codec::Pq(4)] {
            let q = quantize_store(&base, codec, None, 1).unwrap();
            let back = MultiVectorStore::from_bytes(&q.to_bytes().unwrap()).unwrap();
            assert_eq!(back, q, "{codec}");
            assert_eq!(q.payload_bytes(), q.total_tokens() * codec.bytes_per_token(8));
        }
    }

    #[test]
    fn fp16_decodes_close() {
        let base = store();
        let q = quantize_store(&base, Codec::Fp16, None, 0).unwrap();
        for i in 0..base.len() {
            for (a, b) in base.decode(i).iter().zip(q.decode(i)) {
                assert!((a - b).abs() <= a.abs() * 1e-3 + 1e-7);
            }
        }
    }
}
