//! Instance-token aggregation.
//!
//! N patch tokens become K instance tokens in three steps: pick K seed tokens,
//! assign every other token to seeds, then combine each seed with the mean of
//! its assigned tokens:
//!
//! ```text
//! z_k = l2( t_{s_k} + Σ_{i∈C_k} w_ik·t_i / max(Σ_{i∈C_k} w_ik, ε) ),   ε = 1
//! ```
//!
//! With hard assignment `w_ik = 1`, so the denominator is the cluster size and
//! an empty cluster returns the seed unchanged.

mod assign;
mod per_image_kmeans;
mod seeds;

use serde::{Deserialize, Serialize};

pub use assign::{assign_tokens, AssignMode, Assignment, TokenWeights};
pub use per_image_kmeans::{kmeans_per_image, kmeans_per_image_traced, KMeansVariant, DEFAULT_ITERS as KMEANS_ITERS};
pub use seeds::{fps_start, select_seeds, select_seeds_counted, SeedSelection, SeedStrategy};

use crate::error::{Error, Result};
use crate::linalg;
use crate::par;
use crate::store::TokenSet;

/// Denominator floor in the seed-plus-mean combination.
pub const EPSILON: f32 = 1.0;
/// Instance tokens with a pre-normalization norm below this are rejected.
pub const DEGENERATE_NORM: f32 = 1e-6;
pub const DEFAULT_TAU: f32 = 1.0;

/// How a set of instance tokens was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<SeedStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<AssignMode>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f32>,
    pub rng_seed: u64,
}

/// K unit-norm vectors describing one image.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTokenSet {
    pub image_id: String,
    pub dim: usize,
    /// `K × dim`, row-major.
    pub tokens: Vec<f32>,
    /// Token indices the vectors are anchored on (seeds or medoids).
    pub seeds: Vec<usize>,
    pub provenance: Provenance,
}

impl InstanceTokenSet {
    pub fn k(&self) -> usize {
        self.tokens.len() / self.dim
    }

    pub fn token(&self, k: usize) -> &[f32] {
        &self.tokens[k * self.dim..(k + 1) * self.dim]
    }

    /// As a token set with `N = K` and no optional channels.
    pub fn to_token_set(&self) -> Result<TokenSet> {
        TokenSet::new(self.image_id.clone(), self.dim, self.tokens.clone())
    }
}

pub fn aggregate(ts: &TokenSet, seeds: &[usize], asg: &Assignment) -> Result<InstanceTokenSet> {
    let dim = ts.dim();
    let k = seeds.len();
    assign::validate_seeds(seeds, ts.n_tokens())?;
    if asg.k != k {
        return Err(Error::invalid(format!(
            "assignment has {} clusters for {k} seeds",
            asg.k
        )));
    }

    let mut sums = vec![0.0f64; k * dim];
    let mut mass = vec![0.0f64; k];
    for tw in &asg.tokens {
        if tw.token >= ts.n_tokens() {
            return Err(Error::invalid(format!("assigned token {} out of range", tw.token)));
        }
        let t = ts.token(tw.token);
        for &(c, w) in &tw.weights {
            if c >= k {
                return Err(Error::invalid(format!("cluster {c} out of range")));
            }
            mass[c] += w as f64;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(t) {
                *s += w as f64 * x as f64;
            }
        }
    }

    let mut tokens = Vec::with_capacity(k * dim);
    for (c, &s) in seeds.iter().enumerate() {
        let seed = ts.token(s);
        if mass[c] == 0.0 {
            tokens.extend_from_slice(seed);
            continue;
        }
        let denom = mass[c].max(EPSILON as f64);
        let mut z: Vec<f32> = seed
            .iter()
            .zip(&sums[c * dim..(c + 1) * dim])
            .map(|(&x, &acc)| (x as f64 + acc / denom) as f32)
            .collect();
        let norm = linalg::normalize(&mut z);
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::Degenerate(format!(
                "{}: degenerate instance token {c} (seed {s}): assigned mean cancels the seed",
                ts.image_id
            )));
        }
        tokens.extend_from_slice(&z);
    }

    Ok(InstanceTokenSet {
        image_id: ts.image_id.clone(),
        dim,
        tokens,
        seeds: seeds.to_vec(),
        provenance: Provenance {
            method: "instance".into(),
            strategy: None,
            mode: Some(asg.mode),
            k,
            tau: Some(asg.tau),
            rng_seed: 0,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub strategy: SeedStrategy,
    pub mode: AssignMode,
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f32,
    pub rng_seed: u64,
}

impl AggregationConfig {
    pub fn new(strategy: SeedStrategy, mode: AssignMode, k: usize) -> Self {
        Self {
            strategy,
            mode,
            k,
            tau: DEFAULT_TAU,
            rng_seed: 0,
        }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            method: "instance".into(),
            strategy: Some(self.strategy),
            mode: Some(self.mode),
            k: self.k,
            tau: Some(self.tau),
            rng_seed: self.rng_seed,
        }
    }
}

/// Per-image cost counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggregationStats {
    pub seed_similarity_evals: u64,
    pub assign_similarity_evals: u64,
}

/// Seed selection, assignment and aggregation in one call.
pub fn instance_tokens(ts: &TokenSet, cfg: &AggregationConfig) -> Result<(InstanceTokenSet, AggregationStats)> {
    let sel = SeedSelection {
        strategy: cfg.strategy,
        k: cfg.k,
        rng_seed: cfg.rng_seed,
    };
    let (seeds, seed_sims) = select_seeds_counted(ts, &sel)?;
    let asg = assign_tokens(ts, &seeds, cfg.mode, cfg.tau)?;
    let mut out = aggregate(ts, &seeds, &asg)?;
    out.provenance = cfg.provenance();
    Ok((
        out,
        AggregationStats {
            seed_similarity_evals: seed_sims,
            assign_similarity_evals: asg.similarity_evals,
        },
    ))
}

/// Aggregate every image. Errors name the failing record.
pub fn instance_tokens_batch(
    sets: &[TokenSet],
    cfg: &AggregationConfig,
) -> Result<Vec<(InstanceTokenSet, AggregationStats)>> {
    let indexed: Vec<(usize, &TokenSet)> = sets.iter().enumerate().collect();
    par::try_map(&indexed, |(i, ts)| {
        instance_tokens(ts, cfg).map_err(|e| {
            Error::InvalidInput(format!("record {i} ({}): {e}", ts.image_id))
        })
    })
}
