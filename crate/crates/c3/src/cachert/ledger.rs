//! Per-site log-score bookkeeping shared by every execution strategy.
//!
//! The ledger maps each random-choice or observation address to its current
//! log score and keeps a running total. Proposals stage score *changes*
//! (old entry → new entry) rather than rewriting the total; the acceptance
//! computation folds those deltas in a canonical order so that all execution
//! strategies arrive at bit-identical totals for the same proposal.

use std::collections::HashMap;

use crate::lang::addr::Address;

/// What kind of scored site an entry belongs to. Only `Choice` entries
/// contribute to the fresh/removed proposal correction terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Choice,
    Observation,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreEntry {
    pub score: f64,
    pub kind: ScoreKind,
}

/// One site's score change within a proposal: `None` means the site did not
/// exist on that side of the transition.
#[derive(Debug, Clone)]
pub struct ScoreDelta {
    pub addr: Address,
    pub old: Option<ScoreEntry>,
    pub new: Option<ScoreEntry>,
}

/// The folded result of a proposal's score deltas.
#[derive(Debug, Clone, Copy)]
pub struct DeltaSummary {
    /// Proposed total log score ℓ'.
    pub new_total: f64,
    /// Σ log p(value) over choices that exist only in the proposed trace.
    pub fresh_logp: f64,
    /// Σ log p(value) over choices that exist only in the current trace.
    pub removed_logp: f64,
}

#[derive(Default)]
pub struct ScoreLedger {
    map: HashMap<Address, ScoreEntry>,
    total: f64,
}

impl ScoreLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, addr: &Address) -> Option<ScoreEntry> {
        self.map.get(addr).copied()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Raw entry write; journaling is the caller's responsibility.
    pub fn set_raw(&mut self, addr: &Address, entry: Option<ScoreEntry>) {
        match entry {
            Some(e) => {
                self.map.insert(addr.clone(), e);
            }
            None => {
                self.map.remove(addr);
            }
        }
    }

    /// Overwrites the stored total (at commit, with the folded ℓ').
    pub fn set_total(&mut self, total: f64) {
        self.total = total;
    }

    /// Recomputes the total from scratch in sorted address order. Used by
    /// drift checks; the fold order matches `fold_deltas` so a drift-free
    /// chain stays drift-free regardless of execution strategy.
    pub fn recompute_sorted(&self) -> f64 {
        let mut entries: Vec<(&Address, &ScoreEntry)> = self.map.iter().collect();
        entries.sort_by(|x, y| x.0.cmp(y.0));
        entries.iter().fold(0.0, |acc, (_, e)| acc + e.score)
    }

    pub fn iter_sorted(&self) -> Vec<(Address, ScoreEntry)> {
        let mut entries: Vec<(Address, ScoreEntry)> =
            self.map.iter().map(|(a, e)| (a.clone(), *e)).collect();
        entries.sort_by(|x, y| x.0.cmp(&y.0));
        entries
    }
}

/// Folds a proposal's score deltas into the proposed total and the
/// fresh/removed correction terms.
///
/// Deltas are first coalesced per address (a site staged several times keeps
/// its earliest `old` and latest `new`, in staging order) and then applied in
/// sorted address order, so the resulting floating-point sums are identical
/// for every execution strategy that stages the same net changes.
pub fn fold_deltas(base_total: f64, deltas: Vec<ScoreDelta>) -> DeltaSummary {
    let mut merged: HashMap<Address, ScoreDelta> = HashMap::new();
    let mut order: Vec<Address> = Vec::new();
    for d in deltas {
        match merged.get_mut(&d.addr) {
            Some(existing) => existing.new = d.new,
            None => {
                order.push(d.addr.clone());
                merged.insert(d.addr.clone(), d);
            }
        }
    }
    order.sort();

    let mut summary = DeltaSummary {
        new_total: base_total,
        fresh_logp: 0.0,
        removed_logp: 0.0,
    };
    for addr in &order {
        let d = &merged[addr];
        let old_score = d.old.map_or(0.0, |e| e.score);
        let new_score = d.new.map_or(0.0, |e| e.score);
        summary.new_total += new_score - old_score;
        match (d.old, d.new) {
            (None, Some(e)) if e.kind == ScoreKind::Choice => summary.fresh_logp += e.score,
            (Some(e), None) if e.kind == ScoreKind::Choice => summary.removed_logp += e.score,
            _ => {}
        }
    }
    summary
}

// ═══════════════════════════════════════════════════════════════════════
