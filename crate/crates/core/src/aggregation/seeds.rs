//! Seed selection strategies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::store::TokenSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStrategy {
    /// Top-K by CLS→patch attention.
    Attention,
    /// Greedy farthest-point sampling in cosine distance.
    Fps,
    /// Top-K by pre-normalization token norm.
    Norm,
    /// Top-K by norm × attention.
    NormXAttn,
    /// K uniform draws without replacement.
    Random,
    /// Stride sampling over the flattened token order.
    Grid,
    /// Top-K by cosine to the CLS vector.
    ClsSim,
    /// Bottom-K by cosine to the CLS vector.
    ClsDist,
}

impl SeedStrategy {
    pub const ALL: [SeedStrategy; 8] = [
        SeedStrategy::Attention,
        SeedStrategy::Fps,
        SeedStrategy::Norm,
        SeedStrategy::NormXAttn,
        SeedStrategy::Random,
        SeedStrategy::Grid,
        SeedStrategy::ClsSim,
        SeedStrategy::ClsDist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SeedStrategy::Attention => "attention",
            SeedStrategy::Fps => "fps",
            SeedStrategy::Norm => "norm",
            SeedStrategy::NormXAttn => "norm_x_attn",
            SeedStrategy::Random => "random",
            SeedStrategy::Grid => "grid",
            SeedStrategy::ClsSim => "cls_sim",
            SeedStrategy::ClsDist => "cls_dist",
        }
    }

    fn needs_attention(self) -> bool {
        matches!(self, SeedStrategy::Attention | SeedStrategy::NormXAttn)
    }

    fn needs_cls(self) -> bool {
        matches!(self, SeedStrategy::ClsSim | SeedStrategy::ClsDist)
    }
}

impl fmt::Display for SeedStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeedStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SeedStrategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown seed strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSelection {
    pub strategy: SeedStrategy,
    pub k: usize,
    /// Only used by [`SeedStrategy::Random`]; mixed with the image id.
    pub rng_seed: u64,
}

/// Pick `sel.k` distinct token indices. The returned order is the seed rank
/// (best first for ranked strategies, draw order for `random`).
pub fn select_seeds(ts: &TokenSet, sel: &SeedSelection) -> Result<Vec<usize>> {
    select_seeds_counted(ts, sel).map(|(s, _)| s)
}

/// As [`select_seeds`], also returning the number of token-pair similarity
/// evaluations performed.
pub fn select_seeds_counted(ts: &TokenSet, sel: &SeedSelection) -> Result<(Vec<usize>, u64)> {
    let n = ts.n_tokens();
    let k = sel.k;
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "{}: K={k} exceeds the {n} available tokens",
            ts.image_id
        )));
    }
    if sel.strategy.needs_attention() && ts.attention().is_none() {
        return Err(Error::invalid(format!(
            "{}: seed strategy {} needs attention weights",
            ts.image_id, sel.strategy
        )));
    }
    if sel.strategy.needs_cls() && ts.cls().is_none() {
        return Err(Error::invalid(format!(
            "{}: seed strategy {} needs a CLS vector",
            ts.image_id, sel.strategy
        )));
    }

    let mut sims = 0u64;
    let seeds = match sel.strategy {
        SeedStrategy::Attention => linalg::top_k_desc(ts.attention().unwrap(), k),
        SeedStrategy::Norm => linalg::top_k_desc(ts.raw_norms(), k),
        SeedStrategy::NormXAttn => {
            let score: Vec<f32> = ts
                .raw_norms()
                .iter()
                .zip(ts.attention().unwrap())
                .map(|(n, a)| n * a)
                .collect();
            linalg::top_k_desc(&score, k)
        }
        SeedStrategy::ClsSim | SeedStrategy::ClsDist => {
            let cls = ts.cls().unwrap();
            let sign = if sel.strategy == SeedStrategy::ClsSim { 1.0 } else { -1.0 };
            let score: Vec<f32> = ts.rows().map(|t| sign * linalg::dot(t, cls)).collect();
            sims += n as u64;
            linalg::top_k_desc(&score, k)
        }
        SeedStrategy::Random => random_subset(n, k, rng::image_seed(sel.rng_seed, &ts.image_id)),
        SeedStrategy::Grid => grid(n, k),
        SeedStrategy::Fps => {
            let (s, c) = farthest_point(ts, k);
            sims += c;
            s
        }
    };
    Ok((seeds, sims))
}

/// Partial Fisher–Yates: the first `k` entries of a seeded shuffle of `0..n`.
fn random_subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = r.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// `round(i·N/K)` for `i = 0..K`, deduplicated in order, then padded from the
/// lowest unused indices.
fn grid(n: usize, k: usize) -> Vec<usize> {
    let mut used = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        // floor(i·N/K + 1/2) in integer arithmetic.
        let j = (2 * i * n + k) / (2 * k);
        if j < n && !used[j] {
            used[j] = true;
            out.push(j);
        }
    }
    let mut next = 0;
    while out.len() < k {
        if !used[next] {
            used[next] = true;
            out.push(next);
        }
        next += 1;
    }
    out
}

/// Start point: argmax attention, else argmax raw norm (index 0 when all tie).
pub fn fps_start(ts: &TokenSet) -> usize {
    ts.attention()
        .and_then(linalg::argmax)
        .or_else(|| linalg::argmax(ts.raw_norms()))
        .unwrap_or(0)
}

fn farthest_point(ts: &TokenSet, k: usize) -> (Vec<usize>, u64) {
    let n = ts.n_tokens();
    let start = fps_start(ts);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_dist = vec![f32::INFINITY; n];
    let mut sims = 0u64;
    let mut cur = start;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == k {
            break;
        }
        let c = ts.token(cur);
        for (i, t) in ts.rows().enumerate() {
            if taken[i] {
                continue;
            }
            let d = 1.0 - linalg::dot(t, c);
            sims += 1;
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
        let mut best: Option<(usize, f32)> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|(_, b)| min_dist[i] > b) {
                best = Some((i, min_dist[i]));
            }
        }
        cur = best.expect("k <= n leaves a candidate").0;
    }
    (chosen, sims)
}
