//! Scoring and search.

mod flat;
mod maxsim;
mod mvstore;
mod quantize;
mod run;
mod search;

pub use flat::{build_flat_index, search_flat, FlatIndex, Hit};
pub use maxsim::{late_interaction_score, late_interaction_unchecked};
pub use mvstore::MultiVectorStore;
pub use quantize::{int8_decode, int8_encode, quantize_store, Codec, PqCodebooks, PQ_CENTROIDS, PQ_ITERS};
pub use run::{read_run_tsv, write_run_tsv, RankedItem, RunRanking, Stage, TimingSummary};
pub use search::{exhaustive_search, two_stage_search, Searcher};
