//! Single-vector descriptors: CLS, mean, per-dimension max and GeM pooling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::store::TokenSet;

/// Floor applied before the GeM power in [`GemMode::Clamp`].
pub const GEM_CLAMP_FLOOR: f32 = 1e-6;
pub const DEFAULT_GEM_P: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Cls,
    Mean,
    Max,
    Gem,
}

impl fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMethod::Cls => "cls",
            PoolMethod::Mean => "mean",
            PoolMethod::Max => "max",
            PoolMethod::Gem => "gem",
        })
    }
}

impl FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(PoolMethod::Cls),
            "mean" | "gap" => Ok(PoolMethod::Mean),
            "max" => Ok(PoolMethod::Max),
            "gem" => Ok(PoolMethod::Gem),
            _ => Err(Error::invalid(format!("unknown pooling method {s:?}"))),
        }
    }
}

/// How GeM treats negative activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GemMode {
    /// `max(x, 1e-6)^p`.
    #[default]
    Clamp,
    /// `sign(x)·|x|^p`, with the signed root applied to the mean.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub method: PoolMethod,
    pub gem_p: f32,
    #[serde(default)]
    pub gem_mode: GemMode,
}

impl PoolConfig {
    pub fn new(method: PoolMethod) -> Self {
        Self {
            method,
            gem_p: DEFAULT_GEM_P,
            gem_mode: GemMode::Clamp,
        }
    }
}

/// One unit-norm vector per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub image_id: String,
    pub vector: Vec<f32>,
    pub method: PoolMethod,
}

impl GlobalDescriptor {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// A descriptor as an `N = 1` token set, for CBTK persistence.
    pub fn to_token_set(&self) -> Result<TokenSet> {
        TokenSet::new(self.image_id.clone(), self.vector.len(), self.vector.clone())
    }

    pub fn from_token_set(ts: &TokenSet, method: PoolMethod) -> Result<Self> {
        if ts.n_tokens() != 1 {
            return Err(Error::Format(format!(
                "{}: descriptor records hold exactly one vector, found {}",
                ts.image_id,
                ts.n_tokens()
            )));
        }
        Ok(Self {
            image_id: ts.image_id.clone(),
            vector: ts.token(0).to_vec(),
            method,
        })
    }
}

pub fn pool(ts: &TokenSet, method: PoolMethod, gem_p: f32) -> Result<GlobalDescriptor> {
    pool_with(
        ts,
        &PoolConfig {
            method,
            gem_p,
            gem_mode: GemMode::Clamp,
        },
    )
}

pub fn pool_with(ts: &TokenSet, cfg: &PoolConfig) -> Result<GlobalDescriptor> {
    let dim = ts.dim();
    let mut v = match cfg.method {
        PoolMethod::Cls => ts
            .cls()
            .ok_or_else(|| {
                Error::invalid(format!("{}: cls pooling needs a stored CLS vector", ts.image_id))
            })?
            .to_vec(),
        PoolMethod::Mean => {
            let mut acc = vec![0.0f64; dim];
            for row in ts.rows() {
                acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x as f64);
            }
            let n = ts.n_tokens() as f64;
            acc.into_iter().map(|a| (a / n) as f32).collect()
        }
        PoolMethod::Max => {
            let mut acc = vec![f32::NEG_INFINITY; dim];
            for row in ts.rows() {
                acc.iter_mut().zip(row).for_each(|(a, &x)| *a = a.max(x));
            }
            acc
        }
        PoolMethod::Gem => gem(ts, cfg.gem_p, cfg.gem_mode)?,
    };
    let n = linalg::normalize(&mut v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "{}: pooled {} vector has zero norm",
            ts.image_id, cfg.method
        )));
    }
    Ok(GlobalDescriptor {
        image_id: ts.image_id.clone(),
        vector: v,
        method: cfg.method,
    })
}

fn gem(ts: &TokenSet, p: f32, mode: GemMode) -> Result<Vec<f32>> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::invalid(format!("GeM exponent must be positive, got {p}")));
    }
    let p = p as f64;
    let mut acc = vec![0.0f64; ts.dim()];
    for row in ts.rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += match mode {
                GemMode::Clamp => (x.max(GEM_CLAMP_FLOOR) as f64).powf(p),
                GemMode::Signed => (x as f64).signum() * (x as f64).abs().powf(p),
            };
        }
    }
    let n = ts.n_tokens() as f64;
    Ok(acc
        .into_iter()
        .map(|a| {
            let m = a / n;
            (m.signum() * m.abs().powf(1.0 / p)) as f32
        })
        .collect())
}
