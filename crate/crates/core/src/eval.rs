//! Retrieval metrics under cluster-tolerant relevance.
//!
//! A gallery image is relevant to a query when their crater-id sets intersect.
//! Every metric is a macro average over the queries present in the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::RunRanking;
use crate::error::{Error, Result};
use crate::manifest::{RelevanceManifest, Role};
use crate::par;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

fn relevant<'m>(m: &'m RelevanceManifest, run: &RunRanking) -> Result<BTreeSet<&'m str>> {
    let rel = m.relevant_set(&run.query_id).ok_or_else(|| {
        Error::Protocol(format!("query {:?} is not a query in the manifest", run.query_id))
    })?;
    if rel.is_empty() {
        return Err(Error::Protocol(format!(
            "query {:?} has no relevant gallery image",
            run.query_id
        )));
    }
    Ok(rel)
}

fn check_gallery(m: &RelevanceManifest, run: &RunRanking) -> Result<()> {
    for id in run.ids() {
        if m.role(id) != Some(Role::Gallery) {
            return Err(Error::Protocol(format!(
                "run for {:?} returns {id:?}, which is not in the manifest gallery (mixed gallery?)",
                run.query_id
            )));
        }
    }
    Ok(())
}

fn non_empty(runs: &[RunRanking]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Protocol("no queries to evaluate".into()));
    }
    Ok(())
}

/// `(1/|R(q)|) Σ precision@r` over the ranks of retrieved relevant images.
/// Relevant images missing from a truncated run contribute zero.
pub fn average_precision(run: &RunRanking, m: &RelevanceManifest) -> Result<f64> {
    let rel = relevant(m, run)?;
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (i, id) in run.ids().enumerate() {
        if rel.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / rel.len() as f64)
}

/// Fraction of queries with at least one relevant image in the top `k`.
pub fn recall_at_k(runs: &[RunRanking], m: &RelevanceManifest, k: usize) -> Result<f64> {
    non_empty(runs)?;
    let hits = par::try_map(runs, |run| {
        let rel = relevant(m, run)?;
        Ok::<_, Error>(run.ids().take(k).any(|id| rel.contains(id)))
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / runs.len() as f64)
}

/// Mean over queries of `|R(q) ∩ top-S| / |R(q)|`.
pub fn shortlist_recall(runs: &[RunRanking], m: &RelevanceManifest, s: usize) -> Result<f64> {
    non_empty(runs)?;
    let fr = par::try_map(runs, |run| {
        let rel = relevant(m, run)?;
        let found = run.ids().take(s).filter(|id| rel.contains(id)).count();
        Ok::<_, Error>(found as f64 / rel.len() as f64)
    })?;
    Ok(fr.iter().sum::<f64>() / runs.len() as f64)
}

/// Fraction of queries with at least one relevant image in the top `s`.
pub fn shortlist_hit_rate(runs: &[RunRanking], m: &RelevanceManifest, s: usize) -> Result<f64> {
    recall_at_k(runs, m, s)
}

pub fn mean_average_precision(runs: &[RunRanking], m: &RelevanceManifest) -> Result<f64> {
    non_empty(runs)?;
    let aps = par::try_map(runs, |r| average_precision(r, m))?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_queries: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub recall_at: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortlist_recall: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortlist_hit_rate: Option<BTreeMap<usize, f64>>,
    /// Sorted by query id.
    pub per_query: Vec<QueryAp>,
    pub config: BTreeMap<String, String>,
}

/// Aggregate every metric for one run set.
///
/// `shortlists` lists the S values at which R@S is reported (each run's first
/// S items are taken as its shortlist).
pub fn emit_report(
    runs: &[RunRanking],
    m: &RelevanceManifest,
    ks: &[usize],
    shortlists: &[usize],
    config: BTreeMap<String, String>,
) -> Result<MetricsReport> {
    non_empty(runs)?;
    let mut seen = BTreeSet::new();
    for run in runs {
        if !seen.insert(run.query_id.as_str()) {
            return Err(Error::Protocol(format!("query {:?} appears twice", run.query_id)));
        }
        check_gallery(m, run)?;
    }
    let aps = par::try_map(runs, |r| average_precision(r, m))?;
    let mut per_query: Vec<QueryAp> = runs
        .iter()
        .zip(&aps)
        .map(|(r, &ap)| QueryAp {
            query_id: r.query_id.clone(),
            ap,
        })
        .collect();
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    // Sum in id order so the mean does not depend on query order.
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;

    let mut recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(runs, m, k)?);
    }
    let (mut srec, mut shit) = (BTreeMap::new(), BTreeMap::new());
    for &s in shortlists {
        srec.insert(s, shortlist_recall(runs, m, s)?);
        shit.insert(s, shortlist_hit_rate(runs, m, s)?);
    }
    let has_s = !shortlists.is_empty();
    Ok(MetricsReport {
        n_queries: runs.len(),
        map,
        recall_at,
        shortlist_recall: has_s.then_some(srec),
        shortlist_hit_rate: has_s.then_some(shit),
        per_query,
        config,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per shortlist size (or a single row), columns
    /// `S | R@S | hit@S | R@k... | mAP`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["S".to_string(), "R@S".into(), "hit@S".into()];
        header.extend(self.recall_at.keys().map(|k| format!("R@{k}")));
        header.push("mAP".into());

        let tail: Vec<String> = self
            .recall_at
            .values()
            .map(|v| format!("{v:.3}"))
            .chain(std::iter::once(format!("{:.3}", self.map)))
            .collect();
        let mut rows = Vec::new();
        match (&self.shortlist_recall, &self.shortlist_hit_rate) {
            (Some(r), Some(h)) => {
                for (s, v) in r {
                    let mut row = vec![s.to_string(), format!("{v:.3}"), format!("{:.3}", h[s])];
                    row.extend(tail.iter().cloned());
                    rows.push(row);
                }
            }
            _ => {
                let mut row = vec!["-".to_string(), "-".into(), "-".into()];
                row.extend(tail);
                rows.push(row);
            }
        }

        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = writeln!(out, "# queries: {}", self.n_queries);
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(out, "{}", line(&header));
        for r in &rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }
}
