//! Per-image K-means over patch tokens, returning centroids or medoids.

use serde::{Deserialize, Serialize};

use super::{InstanceTokenSet, Provenance};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig, KMeansResult};
use crate::linalg;
use crate::rng;
use crate::store::TokenSet;

pub const DEFAULT_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMeansVariant {
    /// L2-normalized cluster means.
    Centroid,
    /// The member token closest to each cluster mean.
    Medoid,
}

pub fn kmeans_per_image(
    ts: &TokenSet,
    k: usize,
    iters: usize,
    rng_seed: u64,
    variant: KMeansVariant,
) -> Result<InstanceTokenSet> {
    kmeans_per_image_traced(ts, k, iters, rng_seed, variant).map(|(z, _)| z)
}

/// As [`kmeans_per_image`], also returning the clustering (with its SSE trace).
pub fn kmeans_per_image_traced(
    ts: &TokenSet,
    k: usize,
    iters: usize,
    rng_seed: u64,
    variant: KMeansVariant,
) -> Result<(InstanceTokenSet, KMeansResult)> {
    let n = ts.n_tokens();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "{}: K={k} must be in 1..={n}",
            ts.image_id
        )));
    }
    let dim = ts.dim();
    let cfg = KMeansConfig {
        k,
        max_iters: iters,
        seed: rng::image_seed(rng_seed, &ts.image_id),
    };
    let km = kmeans(ts.tokens(), dim, cfg)?;

    let mut tokens = Vec::with_capacity(k * dim);
    let mut anchors = Vec::new();
    match variant {
        KMeansVariant::Centroid => {
            for c in 0..k {
                let mut z = km.centroid(c).to_vec();
                if !(linalg::normalize(&mut z) >= super::DEGENERATE_NORM) {
                    return Err(Error::Degenerate(format!(
                        "{}: cluster {c} mean is zero",
                        ts.image_id
                    )));
                }
                tokens.extend_from_slice(&z);
            }
        }
        KMeansVariant::Medoid => {
            for c in 0..k {
                let centroid = km.centroid(c);
                let mut best: Option<(usize, f32)> = None;
                for (i, _) in km.assignments.iter().enumerate().filter(|(_, &a)| a == c) {
                    let d = linalg::sq_dist(ts.token(i), centroid);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                let (i, _) = best.ok_or_else(|| {
                    Error::Degenerate(format!("{}: cluster {c} is empty", ts.image_id))
                })?;
                anchors.push(i);
                tokens.extend_from_slice(ts.token(i));
            }
        }
    }
    let method = match variant {
        KMeansVariant::Centroid => "kmeans",
        KMeansVariant::Medoid => "medoid",
    };
    Ok((
        InstanceTokenSet {
            image_id: ts.image_id.clone(),
            dim,
            tokens,
            seeds: anchors,
            provenance: Provenance {
                method: method.into(),
                strategy: None,
                mode: None,
                k,
                tau: None,
                rng_seed,
            },
        },
        km,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_duplicate_pairs() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0];
        let ts = TokenSet::new("p", 3, [a, a, b, b].concat()).unwrap();
        for variant in [KMeansVariant::Centroid, KMeansVariant::Medoid] {
            let z = kmeans_per_image(&ts, 2, 20, 5, variant).unwrap();
            let mut got: Vec<Vec<f32>> = (0..2).map(|k| z.token(k).to_vec()).collect();
            got.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(got, vec![b.to_vec(), a.to_vec()]);
        }
    }

    #[test]
    fn k_equals_n_gives_each_token() {
        let rows = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let ts = TokenSet::new("p", 2, rows.concat()).unwrap();
        let (z, km) = kmeans_per_image_traced(&ts, 3, 20, 1, KMeansVariant::Centroid).unwrap();
        assert_eq!(*km.sse_history.last().unwrap(), 0.0);
        let mut got: Vec<Vec<f32>> = (0..3).map(|k| z.token(k).to_vec()).collect();
        got.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut want: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        want.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn medoids_are_member_tokens() {
        let rows: Vec<f32> = (0..30 * 4).map(|i| ((i * 13 % 17) as f32 - 8.0) / 8.0 + 0.05).collect();
        let ts = TokenSet::new("m", 4, rows).unwrap();
        let z = kmeans_per_image(&ts, 5, 20, 9, KMeansVariant::Medoid).unwrap();
        for (k, &i) in z.seeds.iter().enumerate() {
            assert_eq!(z.token(k), ts.token(i));
        }
    }

    #[test]
    fn k_above_n_rejected() {
        let ts = TokenSet::new("p", 2, vec![1.0, 0.0]).unwrap();
        assert!(kmeans_per_image(&ts, 2, 20, 0, KMeansVariant::Centroid).is_err());
    }
}
