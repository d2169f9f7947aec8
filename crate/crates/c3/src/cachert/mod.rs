//! Cache runtime: the incremental trace structures behind the caching
//! execution strategies.
//!
//! - [`tree`] — the callsite cache tree with its undo journal;
//! - [`table`] — the set of proposable random choices;
//! - [`ledger`] — per-site log scores and the canonical delta fold;
//! - [`adaptive`] — permanent un-caching of callsites that never pay off;
//! - [`dump`] — deterministic state dumps for debugging and tests.

pub mod adaptive;
pub mod dump;
pub mod ledger;
pub mod table;
pub mod tree;

pub use adaptive::AdaptiveCaching;
pub use ledger::{fold_deltas, DeltaSummary, ScoreDelta, ScoreEntry, ScoreKind, ScoreLedger};
pub use table::ChoiceTable;
pub use tree::{Cache, CacheCounters, Enter, Exit, Node, NodeKind};
