//! Exact inner-product search over unit vectors.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::linalg;
use crate::par;
use crate::pooling::{GlobalDescriptor, PoolMethod};

const BLOB_KIND: &str = "flat-index";
const ROW_BLOCK: usize = 512;
const QUERY_BLOCK: usize = 16;

/// Gallery descriptors sorted by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    method: PoolMethod,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Row in the index (equivalently, rank of the id in ascending order).
    pub row: usize,
    pub score: f32,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    count: usize,
    method: PoolMethod,
    ids: Vec<String>,
}

/// Best-first order: score descending, then row (id) ascending.
#[inline]
pub(crate) fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.row.cmp(&b.row))
}

pub fn build_flat_index(descriptors: &[GlobalDescriptor]) -> Result<FlatIndex> {
    let method = descriptors.first().map_or(PoolMethod::Mean, |d| d.method);
    let dim = descriptors.first().map_or(0, |d| d.dim());
    let mut order: Vec<&GlobalDescriptor> = descriptors.iter().collect();
    order.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for w in order.windows(2) {
        if w[0].image_id == w[1].image_id {
            return Err(Error::DuplicateId(w[0].image_id.clone()));
        }
    }
    let mut data = Vec::with_capacity(dim * order.len());
    for d in &order {
        if d.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: d.dim(),
            });
        }
        let n = linalg::norm(&d.vector);
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!(
                "{}: descriptor norm {n} is not 1",
                d.image_id
            )));
        }
        data.extend_from_slice(&d.vector);
    }
    Ok(FlatIndex {
        ids: order.iter().map(|d| d.image_id.clone()).collect(),
        dim,
        data,
        method,
    })
}

impl FlatIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn method(&self) -> PoolMethod {
        self.method
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(image_id)).ok()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            dim: self.dim,
            count: self.ids.len(),
            method: self.method,
            ids: self.ids.clone(),
        };
        blob::encode(BLOB_KIND, &header, &blob::f32_bytes(&self.data))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (IndexHeader, _) = blob::decode(BLOB_KIND, bytes)?;
        let data = blob::bytes_f32(&payload)?;
        if h.ids.len() != h.count || data.len() != h.count * h.dim {
            return Err(Error::Corruption("flat index: header does not match payload".into()));
        }
        if h.ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Corruption("flat index: ids not strictly ascending".into()));
        }
        Ok(Self {
            ids: h.ids,
            dim: h.dim,
            data,
            method: h.method,
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

    fn check_query(&self, q: &[f32]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Exact top-`s` for one query.
    pub fn search(&self, q: &[f32], s: usize) -> Result<Vec<Hit>> {
        self.check_query(q)?;
        let scores: Vec<f32> = self.data.chunks_exact(self.dim).map(|g| linalg::dot(q, g)).collect();
        Ok(top_s(&scores, s))
    }

    /// Exact top-`s` for many queries. The gallery is scanned in blocks shared
    /// by groups of queries; scores are identical to [`FlatIndex::search`].
    pub fn search_batch(&self, queries: &[&[f32]], s: usize) -> Result<Vec<Vec<Hit>>> {
        for q in queries {
            self.check_query(q)?;
        }
        let groups: Vec<&[&[f32]]> = queries.chunks(QUERY_BLOCK).collect();
        let per_group = par::map(&groups, |group| {
            let n = self.len();
            let mut scores = vec![0.0f32; group.len() * n];
            for (b, block) in self.data.chunks(ROW_BLOCK * self.dim).enumerate() {
                let base = b * ROW_BLOCK;
                for (qi, q) in group.iter().enumerate() {
                    let out = &mut scores[qi * n + base..];
                    for (r, g) in block.chunks_exact(self.dim).enumerate() {
                        out[r] = linalg::dot(q, g);
                    }
                }
            }
            scores.chunks_exact(n).map(|sc| top_s(sc, s)).collect::<Vec<_>>()
        });
        Ok(per_group.into_iter().flatten().collect())
    }
}

/// Top `s` hits (clamped to the gallery size), best first.
fn top_s(scores: &[f32], s: usize) -> Vec<Hit> {
    let s = s.min(scores.len());
    if s == 0 {
        return Vec::new();
    }
    let mut hits: Vec<Hit> = scores
        .iter()
        .enumerate()
        .map(|(row, &score)| Hit { row, score })
        .collect();
    if s < hits.len() {
        hits.select_nth_unstable_by(s - 1, hit_order);
        hits.truncate(s);
    }
    hits.sort_by(hit_order);
    hits
}

/// Exact top-`s` by inner product, returned as `(image_id, score)`.
pub fn search_flat(idx: &FlatIndex, q: &GlobalDescriptor, s: usize) -> Result<Vec<(String, f32)>> {
    Ok(idx
        .search(&q.vector, s)?
        .into_iter()
        .map(|h| (idx.id(h.row).to_string(), h.score))
        .collect())
}
