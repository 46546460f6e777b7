use crate::error::{Error, Result};
use crate::linalg;

/// Late-interaction (MaxSim) score: the mean over query tokens of each
/// token's best inner product against the gallery tokens.
///
/// `query` and `gallery` are row-major token matrices of width `dim`. The
/// score is not symmetric in its arguments.
pub fn late_interaction_score(query: &[f32], gallery: &[f32], dim: usize) -> Result<f32> {
    if dim == 0 {
        return Err(Error::invalid("dim must be positive"));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("late interaction needs non-empty token sets"));
    }
    for m in [query, gallery] {
        if m.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                got: m.len() % dim,
            });
        }
    }
    Ok(late_interaction_unchecked(query, gallery, dim))
}

/// [`late_interaction_score`] without argument validation.
#[inline]
pub fn late_interaction_unchecked(query: &[f32], gallery: &[f32], dim: usize) -> f32 {
    let kq = query.len() / dim;
    let mut total = 0.0f32;
    for q in query.chunks_exact(dim) {
        let mut best = f32::NEG_INFINITY;
        for g in gallery.chunks_exact(dim) {
            let s = linalg::dot(q, g);
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    total / kq as f32
}
