//! Ranked result lists and their TSV form.
//!
//! `query_id<TAB>rank<TAB>image_id<TAB>score<TAB>stage`, one line per item,
//! ranks starting at 1. Scores use the shortest decimal form that round-trips
//! the `f32` exactly.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Single-vector (Stage 1) score.
    Sv,
    /// Late-interaction score.
    Li,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sv => "sv",
            Stage::Li => "li",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sv" => Ok(Stage::Sv),
            "li" => Ok(Stage::Li),
            _ => Err(Error::Format(format!("unknown stage tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub rank: usize,
    pub image_id: String,
    pub score: f32,
    pub stage: Stage,
}

/// Ordered results for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRanking {
    pub query_id: String,
    pub items: Vec<RankedItem>,
    /// Stage-1 shortlist size (the gallery size for exhaustive runs).
    pub shortlist: usize,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
}

impl RunRanking {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.image_id.as_str())
    }
}

pub fn write_run_tsv<W: Write>(runs: &[RunRanking], mut w: W) -> Result<()> {
    for run in runs {
        for it in &run.items {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                run.query_id, it.rank, it.image_id, it.score, it.stage
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse a run file. Queries keep their order of first appearance; items are
/// ordered by rank, which must run 1..=n without gaps.
pub fn read_run_tsv<R: BufRead>(r: R) -> Result<Vec<RunRanking>> {
    let mut order: Vec<RunRanking> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("run line {}: {what}", lineno + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let rank: usize = f[1].parse().map_err(|_| bad("bad rank"))?;
        let score: f32 = f[3].parse().map_err(|_| bad("bad score"))?;
        let stage: Stage = f[4].parse()?;
        let i = *slot.entry(f[0].to_string()).or_insert_with(|| {
            order.push(RunRanking {
                query_id: f[0].to_string(),
                items: Vec::new(),
                shortlist: 0,
                stage1_ms: 0.0,
                stage2_ms: 0.0,
            });
            order.len() - 1
        });
        order[i].items.push(RankedItem {
            rank,
            image_id: f[2].to_string(),
            score,
            stage,
        });
    }
    for run in &mut order {
        run.items.sort_by_key(|it| it.rank);
        if run.items.iter().enumerate().any(|(i, it)| it.rank != i + 1) {
            return Err(Error::Format(format!(
                "run for {}: ranks are not contiguous from 1",
                run.query_id
            )));
        }
        run.shortlist = run.items.len();
    }
    Ok(order)
}

/// Mean per-query latency of a batch of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub stage1_ms_mean: f64,
    pub stage2_ms_mean: f64,
    pub total_ms_mean: f64,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "K")]
    pub k: usize,
}

impl TimingSummary {
    pub fn from_runs(runs: &[RunRanking], s: usize, k: usize) -> Self {
        let n = runs.len().max(1) as f64;
        let s1 = runs.iter().map(|r| r.stage1_ms).sum::<f64>() / n;
        let s2 = runs.iter().map(|r| r.stage2_ms).sum::<f64>() / n;
        Self {
            stage1_ms_mean: s1,
            stage2_ms_mean: s2,
            total_ms_mean: s1 + s2,
            s,
            k,
        }
    }
}
