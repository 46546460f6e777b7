//! Helpers and brute-force reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenrank::engine::{RankedItem, RunRanking, Stage};
use tokenrank::manifest::ManifestEntry;
use tokenrank::{RelevanceManifest, Role, TokenSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` unit rows of width `dim`, row-major.
pub fn unit_rows(r: &mut impl Rng, n: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let mut v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        v.iter_mut().for_each(|x| *x /= norm);
        out.extend(v);
    }
    out
}

pub fn token_set(r: &mut impl Rng, id: &str, n: usize, dim: usize) -> TokenSet {
    TokenSet::new(id, dim, unit_rows(r, n, dim)).unwrap()
}

/// Textbook late interaction: mean over query rows of the best dot product.
pub fn naive_li(q: &[f32], g: &[f32], dim: usize) -> f64 {
    let mut total = 0.0f64;
    for qi in q.chunks(dim) {
        let best = g
            .chunks(dim)
            .map(|gj| qi.iter().zip(gj).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / (q.len() / dim) as f64
}

/// Max-min farthest point sampling evaluated from scratch at every step.
pub fn naive_fps(rows: &[f32], dim: usize, start: usize, k: usize) -> Vec<usize> {
    let n = rows.len() / dim;
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let dist = |a: usize, b: usize| {
        1.0 - row(a).iter().zip(row(b)).map(|(x, y)| x * y).sum::<f32>()
    };
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = None;
        let mut best_d = f32::NEG_INFINITY;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let d = chosen.iter().map(|&c| dist(i, c)).fold(f32::INFINITY, f32::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

/// A random benchmark: `n_crater` craters, each with 1..=3 gallery views,
/// distractor gallery images, and queries that see 1..=2 craters.
pub struct RandomBench {
    pub manifest: RelevanceManifest,
    pub gallery: Vec<String>,
    pub queries: Vec<(String, BTreeSet<String>)>,
    /// Gallery id to crater id.
    pub crater_of: std::collections::HashMap<String, String>,
}

pub fn random_bench(r: &mut impl Rng, n_crater: usize, n_distractor: usize, n_query: usize) -> RandomBench {
    let mut entries = Vec::new();
    let mut gallery = Vec::new();
    let mut crater_of = std::collections::HashMap::new();
    let mut push_gallery = |id: String, crater: String, entries: &mut Vec<ManifestEntry>| {
        crater_of.insert(id.clone(), crater.clone());
        gallery.push(id.clone());
        entries.push(ManifestEntry {
            image_id: id,
            role: Role::Gallery,
            crater_ids: BTreeSet::from([crater]),
            view: None,
            context: None,
        });
    };
    for c in 0..n_crater {
        for v in 0..r.random_range(1..=3) {
            push_gallery(format!("g{c:03}_{v}"), format!("c{c:03}"), &mut entries);
        }
    }
    for d in 0..n_distractor {
        push_gallery(format!("d{d:03}"), format!("x{d:03}"), &mut entries);
    }
    let mut queries = Vec::new();
    for q in 0..n_query {
        let mut craters = BTreeSet::new();
        for _ in 0..r.random_range(1..=2) {
            craters.insert(format!("c{:03}", r.random_range(0..n_crater)));
        }
        let id = format!("q{q:03}");
        entries.push(ManifestEntry {
            image_id: id.clone(),
            role: Role::Query,
            crater_ids: craters.clone(),
            view: None,
            context: None,
        });
        queries.push((id, craters));
    }
    RandomBench {
        manifest: RelevanceManifest::from_entries(entries).unwrap(),
        gallery,
        queries,
        crater_of,
    }
}

/// A random permutation of the gallery, truncated to `len`, as a run.
pub fn random_run(r: &mut impl Rng, query: &str, gallery: &[String], len: usize) -> RunRanking {
    let mut ids = gallery.to_vec();
    for i in (1..ids.len()).rev() {
        ids.swap(i, r.random_range(0..=i));
    }
    ids.truncate(len);
    RunRanking {
        query_id: query.into(),
        items: ids
            .into_iter()
            .enumerate()
            .map(|(i, image_id)| RankedItem {
                rank: i + 1,
                image_id,
                score: -(i as f32),
                stage: Stage::Li,
            })
            .collect(),
        shortlist: len,
        stage1_ms: 0.0,
        stage2_ms: 0.0,
    }
}

pub fn naive_ap(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1.0;
            sum += hits / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}
