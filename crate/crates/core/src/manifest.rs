//! Query/gallery manifests with cluster-tolerant relevance.
//!
//! One JSON object per line:
//! `{"image_id": "...", "role": "query"|"gallery", "crater_ids": [...], "view"?: ..., "context"?: ...}`.
//! A gallery image is relevant to a query when its single crater id belongs to
//! the query's co-visible id set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub role: Role,
    pub crater_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

#[derive(Deserialize)]
struct RawEntry {
    image_id: String,
    role: String,
    crater_ids: Vec<String>,
    #[serde(default)]
    view: Option<serde_json::Value>,
    #[serde(default)]
    context: Option<serde_json::Value>,
}

fn tag(v: Option<serde_json::Value>) -> Option<String> {
    match v? {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s),
        other => Some(other.to_string()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RelevanceManifest {
    entries: BTreeMap<String, ManifestEntry>,
    gallery_by_crater: HashMap<String, Vec<String>>,
}

impl RelevanceManifest {
    pub fn from_entries(entries: impl IntoIterator<Item = ManifestEntry>) -> Result<Self> {
        let mut m = Self::default();
        for e in entries {
            m.insert(e)?;
        }
        for ids in m.gallery_by_crater.values_mut() {
            ids.sort();
        }
        Ok(m)
    }

    fn insert(&mut self, e: ManifestEntry) -> Result<()> {
        if e.crater_ids.is_empty() {
            return Err(Error::Manifest(format!(
                "{}: crater_ids must be non-empty",
                e.image_id
            )));
        }
        if e.role == Role::Gallery && e.crater_ids.len() != 1 {
            return Err(Error::Manifest(format!(
                "{}: gallery entries carry exactly one crater id, found {}",
                e.image_id,
                e.crater_ids.len()
            )));
        }
        if self.entries.contains_key(&e.image_id) {
            return Err(Error::Manifest(format!("duplicate image_id {:?}", e.image_id)));
        }
        if e.role == Role::Gallery {
            let c = e.crater_ids.iter().next().unwrap().clone();
            self.gallery_by_crater
                .entry(c)
                .or_default()
                .push(e.image_id.clone());
        }
        self.entries.insert(e.image_id.clone(), e);
        Ok(())
    }

    pub fn parse_line(line: &str) -> Result<ManifestEntry> {
        let raw: RawEntry = serde_json::from_str(line)?;
        let role = match raw.role.as_str() {
            "query" => Role::Query,
            "gallery" => Role::Gallery,
            other => {
                return Err(Error::Manifest(format!(
                    "{}: unknown role {other:?}",
                    raw.image_id
                )))
            }
        };
        Ok(ManifestEntry {
            image_id: raw.image_id,
            role,
            crater_ids: raw.crater_ids.into_iter().collect(),
            view: tag(raw.view),
            context: tag(raw.context),
        })
    }

    pub fn from_reader<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = Self::parse_line(&line).map_err(|e| match e {
                Error::Manifest(m) => Error::Manifest(format!("line {}: {m}", lineno + 1)),
                other => Error::Manifest(format!("line {}: {other}", lineno + 1)),
            })?;
            entries.push(e);
        }
        Self::from_entries(entries)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in self.entries.values() {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.get(image_id)
    }

    pub fn role(&self, image_id: &str) -> Option<Role> {
        self.entries.get(image_id).map(|e| e.role)
    }

    /// Query ids in ascending order.
    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.ids_with(Role::Query)
    }

    /// Gallery ids in ascending order.
    pub fn gallery(&self) -> impl Iterator<Item = &str> {
        self.ids_with(Role::Gallery)
    }

    fn ids_with(&self, role: Role) -> impl Iterator<Item = &str> {
        self.entries
            .values()
            .filter(move |e| e.role == role)
            .map(|e| e.image_id.as_str())
    }

    /// Cluster-tolerant relevance: `crater_ids(g) ∩ crater_ids(q) ≠ ∅`.
    pub fn is_relevant(&self, query: &str, gallery: &str) -> bool {
        match (self.entries.get(query), self.entries.get(gallery)) {
            (Some(q), Some(g)) if g.role == Role::Gallery => {
                !q.crater_ids.is_disjoint(&g.crater_ids)
            }
            _ => false,
        }
    }

    /// All gallery images relevant to `query`, ascending. `None` when the query
    /// is unknown or not a query.
    pub fn relevant_set(&self, query: &str) -> Option<BTreeSet<&str>> {
        let q = self.entries.get(query)?;
        if q.role != Role::Query {
            return None;
        }
        let mut out = BTreeSet::new();
        for c in &q.crater_ids {
            if let Some(ids) = self.gallery_by_crater.get(c) {
                out.extend(ids.iter().map(String::as_str));
            }
        }
        Some(out)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<RelevanceManifest> {
    RelevanceManifest::from_reader(BufReader::new(File::open(path.as_ref())?))
}
