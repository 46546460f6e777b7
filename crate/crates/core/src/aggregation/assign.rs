//! Assignment of non-seed tokens to seeds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::store::TokenSet;

/// Serialized as its name: `hard_top1`, `soft_top{m}` or `group_dense`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AssignMode {
    /// Nearest seed by cosine, weight 1.
    HardTop1,
    /// Softmax over the `m` most similar seeds.
    SoftTop(usize),
    /// Softmax over all seeds.
    GroupDense,
}

impl fmt::Display for AssignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssignMode::HardTop1 => f.write_str("hard_top1"),
            AssignMode::SoftTop(m) => write!(f, "soft_top{m}"),
            AssignMode::GroupDense => f.write_str("group_dense"),
        }
    }
}

impl FromStr for AssignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" | "hard_top1" => Ok(AssignMode::HardTop1),
            "group_dense" | "dense" => Ok(AssignMode::GroupDense),
            _ => s
                .strip_prefix("soft_top")
                .and_then(|m| m.parse::<usize>().ok())
                .filter(|&m| m >= 1)
                .map(AssignMode::SoftTop)
                .ok_or_else(|| Error::invalid(format!("unknown assignment mode {s:?}"))),
        }
    }
}

impl From<AssignMode> for String {
    fn from(m: AssignMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for AssignMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Weights of one non-seed token over seed ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    pub token: usize,
    /// `(seed rank k, weight)`, strongest first.
    pub weights: Vec<(usize, f32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub mode: AssignMode,
    pub tau: f32,
    pub k: usize,
    /// One entry per non-seed token, ascending token index.
    pub tokens: Vec<TokenWeights>,
    /// Token-to-seed cosine evaluations performed.
    pub similarity_evals: u64,
}

impl Assignment {
    /// Members of each hard cluster, ascending token index.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut c = vec![Vec::new(); self.k];
        for tw in &self.tokens {
            for &(k, _) in &tw.weights {
                c[k].push(tw.token);
            }
        }
        c
    }
}

pub fn assign_tokens(ts: &TokenSet, seeds: &[usize], mode: AssignMode, tau: f32) -> Result<Assignment> {
    let n = ts.n_tokens();
    let k = seeds.len();
    validate_seeds(seeds, n)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if let AssignMode::SoftTop(m) = mode {
        if m == 0 || m > k {
            return Err(Error::invalid(format!("soft_top{m} needs 1 ≤ M ≤ K={k}")));
        }
    }

    let mut is_seed = vec![false; n];
    for &s in seeds {
        is_seed[s] = true;
    }
    let seed_rows: Vec<&[f32]> = seeds.iter().map(|&s| ts.token(s)).collect();

    // The full N×K similarity block is evaluated; seed rows are then skipped.
    let mut sims = vec![0.0f32; k];
    let mut tokens = Vec::with_capacity(n - k);
    for (i, t) in ts.rows().enumerate() {
        for (s, r) in sims.iter_mut().zip(&seed_rows) {
            *s = linalg::dot(t, r);
        }
        if is_seed[i] {
            continue;
        }
        let weights = match mode {
            AssignMode::HardTop1 => vec![(linalg::argmax(&sims).unwrap_or(0), 1.0)],
            AssignMode::SoftTop(m) => softmax_over(&sims, &linalg::top_k_desc(&sims, m), tau),
            AssignMode::GroupDense => softmax_over(&sims, &linalg::top_k_desc(&sims, k), tau),
        };
        tokens.push(TokenWeights { token: i, weights });
    }
    Ok(Assignment {
        mode,
        tau,
        k,
        tokens,
        similarity_evals: (n * k) as u64,
    })
}

fn softmax_over(sims: &[f32], ranks: &[usize], tau: f32) -> Vec<(usize, f32)> {
    let top = ranks.iter().map(|&r| sims[r]).fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = ranks
        .iter()
        .map(|&r| ((sims[r] as f64 - top) / tau as f64).exp())
        .collect();
    let z: f64 = e.iter().sum();
    ranks
        .iter()
        .zip(e)
        .map(|(&r, w)| (r, (w / z) as f32))
        .collect()
}

pub(crate) fn validate_seeds(seeds: &[usize], n: usize) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds"));
    }
    let mut seen = vec![false; n];
    for &s in seeds {
        if s >= n {
            return Err(Error::invalid(format!("seed index {s} out of range for {n} tokens")));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::invalid(format!("seed index {s} repeated")));
        }
    }
    Ok(())
}
