//! Stage-1 shortlist, late-interaction rerank and exhaustive late interaction.

use std::cmp::Ordering;
use std::time::Instant;

use super::flat::{FlatIndex, Hit};
use super::maxsim::late_interaction_unchecked;
use super::mvstore::MultiVectorStore;
use super::run::{RankedItem, RunRanking, Stage};
use crate::error::{Error, Result};
use crate::linalg;
use crate::par;

/// A flat index paired with the multi-vector store covering the same ids.
/// Row `i` of the index and entry `i` of the store are the same image.
#[derive(Debug, Clone, Copy)]
pub struct Searcher<'a> {
    index: &'a FlatIndex,
    store: &'a MultiVectorStore,
}

struct Scored {
    row: usize,
    li: f32,
    sv: f32,
}

fn final_order(a: &Scored, b: &Scored) -> Ordering {
    b.li.total_cmp(&a.li)
        .then(b.sv.total_cmp(&a.sv))
        .then(a.row.cmp(&b.row))
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> Searcher<'a> {
    pub fn new(index: &'a FlatIndex, store: &'a MultiVectorStore) -> Result<Self> {
        if index.ids() != store.ids() {
            let missing = index
                .ids()
                .iter()
                .find(|id| store.position(id).is_none())
                .or_else(|| store.ids().iter().find(|id| index.position(id).is_none()));
            return Err(Error::InvalidInput(format!(
                "index ({}) and store ({}) cover different image ids{}",
                index.len(),
                store.len(),
                missing.map(|m| format!(", e.g. {m:?}")).unwrap_or_default()
            )));
        }
        Ok(Self { index, store })
    }

    pub fn index(&self) -> &FlatIndex {
        self.index
    }

    pub fn store(&self) -> &MultiVectorStore {
        self.store
    }

    fn check_tokens(&self, q_tokens: &[f32]) -> Result<()> {
        let d = self.store.dim();
        if q_tokens.is_empty() {
            return Err(Error::invalid("query token set is empty"));
        }
        if q_tokens.len() % d != 0 {
            return Err(Error::DimMismatch {
                expected: d,
                got: q_tokens.len() % d,
            });
        }
        Ok(())
    }

    fn li(&self, q_tokens: &[f32], row: usize) -> f32 {
        let d = self.store.dim();
        match self.store.f32_tokens(row) {
            Some(g) => late_interaction_unchecked(q_tokens, g, d),
            None => late_interaction_unchecked(q_tokens, &self.store.decode(row), d),
        }
    }

    /// Stage 1 only: the top-`s` single-vector results.
    pub fn stage1(&self, query_id: &str, q_desc: &[f32], s: usize) -> Result<RunRanking> {
        let t = Instant::now();
        let hits = self.index.search(q_desc, s)?;
        let ms = elapsed_ms(t);
        Ok(self.sv_run(query_id, &hits, s, ms))
    }

    pub(crate) fn sv_run(&self, query_id: &str, hits: &[Hit], s: usize, ms: f64) -> RunRanking {
        RunRanking {
            query_id: query_id.to_string(),
            items: hits
                .iter()
                .enumerate()
                .map(|(i, h)| RankedItem {
                    rank: i + 1,
                    image_id: self.index.id(h.row).to_string(),
                    score: h.score,
                    stage: Stage::Sv,
                })
                .collect(),
            shortlist: s.min(self.index.len()),
            stage1_ms: ms,
            stage2_ms: 0.0,
        }
    }

    /// Rerank an existing Stage-1 shortlist by late interaction.
    pub fn rerank(&self, query_id: &str, q_tokens: &[f32], shortlist: &[Hit], stage1_ms: f64) -> Result<RunRanking> {
        self.check_tokens(q_tokens)?;
        let t = Instant::now();
        let mut scored = par::map(shortlist, |h| Scored {
            row: h.row,
            li: self.li(q_tokens, h.row),
            sv: h.score,
        });
        scored.sort_by(final_order);
        let stage2_ms = elapsed_ms(t);
        Ok(self.li_run(query_id, &scored, shortlist.len(), stage1_ms, stage2_ms))
    }

    fn li_run(&self, query_id: &str, scored: &[Scored], s: usize, s1: f64, s2: f64) -> RunRanking {
        RunRanking {
            query_id: query_id.to_string(),
            items: scored
                .iter()
                .enumerate()
                .map(|(i, c)| RankedItem {
                    rank: i + 1,
                    image_id: self.index.id(c.row).to_string(),
                    score: c.li,
                    stage: Stage::Li,
                })
                .collect(),
            shortlist: s,
            stage1_ms: s1,
            stage2_ms: s2,
        }
    }

    /// Shortlist `s` candidates by single-vector search, then rerank them by
    /// late interaction. Final order: LI score desc, Stage-1 score desc, id asc.
    pub fn two_stage(&self, query_id: &str, q_desc: &[f32], q_tokens: &[f32], s: usize) -> Result<RunRanking> {
        self.check_tokens(q_tokens)?;
        let t = Instant::now();
        let hits = self.index.search(q_desc, s)?;
        let stage1_ms = elapsed_ms(t);
        self.rerank(query_id, q_tokens, &hits, stage1_ms)
    }

    /// Late interaction against every gallery image. Ties on the LI score
    /// fall back to the single-vector score and then the id, the same order
    /// [`Searcher::two_stage`] produces.
    pub fn exhaustive(&self, query_id: &str, q_desc: &[f32], q_tokens: &[f32]) -> Result<RunRanking> {
        self.check_tokens(q_tokens)?;
        if q_desc.len() != self.index.dim() {
            return Err(Error::DimMismatch {
                expected: self.index.dim(),
                got: q_desc.len(),
            });
        }
        exhaustive_inner(self.store, query_id, q_tokens, |row| {
            linalg::dot(q_desc, self.index.row(row))
        })
    }
}

pub fn two_stage_search(
    idx: &FlatIndex,
    store: &MultiVectorStore,
    query_id: &str,
    q_desc: &[f32],
    q_tokens: &[f32],
    s: usize,
) -> Result<RunRanking> {
    Searcher::new(idx, store)?.two_stage(query_id, q_desc, q_tokens, s)
}

/// Late interaction against every image in `store` (LI desc, id asc).
pub fn exhaustive_search(store: &MultiVectorStore, query_id: &str, q_tokens: &[f32]) -> Result<RunRanking> {
    exhaustive_inner(store, query_id, q_tokens, |_| 0.0)
}

fn exhaustive_inner<F>(store: &MultiVectorStore, query_id: &str, q_tokens: &[f32], sv: F) -> Result<RunRanking>
where
    F: Fn(usize) -> f32 + Sync + Send,
{
    let d = store.dim();
    if store.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if q_tokens.is_empty() || q_tokens.len() % d != 0 {
        return Err(Error::invalid("query tokens do not match the store dim"));
    }
    let t = Instant::now();
    let rows: Vec<usize> = (0..store.len()).collect();
    let mut scored = par::map(&rows, |&row| {
        let li = match store.f32_tokens(row) {
            Some(g) => late_interaction_unchecked(q_tokens, g, d),
            None => late_interaction_unchecked(q_tokens, &store.decode(row), d),
        };
        Scored { row, li, sv: sv(row) }
    });
    scored.sort_by(final_order);
    let ms = elapsed_ms(t);
    Ok(RunRanking {
        query_id: query_id.to_string(),
        items: scored
            .iter()
            .enumerate()
            .map(|(i, c)| RankedItem {
                rank: i + 1,
                image_id: store.ids()[c.row].clone(),
                score: c.li,
                stage: Stage::Li,
            })
            .collect(),
        shortlist: store.len(),
        stage1_ms: 0.0,
        stage2_ms: ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::build_flat_index;
    use crate::pooling::{GlobalDescriptor, PoolMethod};

    fn unit(v: &[f32]) -> Vec<f32> {
        let mut v = v.to_vec();
        linalg::normalize(&mut v);
        v
    }

    fn fixture() -> (FlatIndex, MultiVectorStore) {
        let ids = ["a", "b", "c"];
        let descs: Vec<GlobalDescriptor> = ids
            .iter()
            .zip([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
            .map(|(id, v)| GlobalDescriptor {
                image_id: id.to_string(),
                vector: v.to_vec(),
                method: PoolMethod::Mean,
            })
            .collect();
        let store = MultiVectorStore::from_f32(
            2,
            vec![
                ("a".into(), [unit(&[1.0, 0.1]), unit(&[0.0, 1.0])].concat()),
                ("b".into(), unit(&[0.3, 1.0])),
                ("c".into(), [unit(&[1.0, 0.0]), unit(&[0.1, 1.0])].concat()),
            ],
        )
        .unwrap();
        (build_flat_index(&descs).unwrap(), store)
    }

    #[test]
    fn rerank_reorders_within_shortlist() {
        let (idx, store) = fixture();
        let s = Searcher::new(&idx, &store).unwrap();
        let q_tokens = [1.0, 0.0, 0.0, 1.0];
        let r = s.two_stage("q", &[1.0, 0.0], &q_tokens, 2).unwrap();
        // Shortlist {a, b}; c would win on LI but is outside it.
        assert_eq!(r.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert!(r.items.iter().all(|i| i.stage == Stage::Li));
        let one = s.two_stage("q", &[1.0, 0.0], &q_tokens, 1).unwrap();
        assert_eq!(one.ids().collect::<Vec<_>>(), ["a"]);
    }

    #[test]
    fn full_shortlist_equals_exhaustive() {
        let (idx, store) = fixture();
        let s = Searcher::new(&idx, &store).unwrap();
        let q_tokens = [1.0, 0.0, 0.0, 1.0];
        let two = s.two_stage("q", &[0.0, 1.0], &q_tokens, 3).unwrap();
        let ex = s.exhaustive("q", &[0.0, 1.0], &q_tokens).unwrap();
        assert_eq!(two.items, ex.items);
        assert_eq!(ex.ids().next(), Some("c"));
        let plain = exhaustive_search(&store, "q", &q_tokens).unwrap();
        let mut a: Vec<_> = plain.items.iter().map(|i| (i.image_id.clone(), i.score)).collect();
        let mut b: Vec<_> = ex.items.iter().map(|i| (i.image_id.clone(), i.score)).collect();
        a.sort_by(|x, y| x.0.cmp(&y.0));
        b.sort_by(|x, y| x.0.cmp(&y.0));
        assert_eq!(a, b);
    }

    #[test]
    fn id_mismatch_rejected() {
        let (idx, _) = fixture();
        let other = MultiVectorStore::from_f32(2, vec![("a".into(), vec![1.0, 0.0])]).unwrap();
        assert!(Searcher::new(&idx, &other).is_err());
    }
}
