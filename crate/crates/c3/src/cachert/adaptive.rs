//! Adaptive callsite un-caching.
//!
//! Caching a callsite only pays off if it sometimes short-circuits. A
//! callsite is un-cached once, after at least [`MIN_PROPOSALS`] proposals
//! have reached it, it has been entered [`FRUITLESS_LIMIT`] times in a row
//! without producing a short-circuit on entry or on exit. Either kind of
//! short-circuit resets the fruitless streak. Un-caching is permanent for
//! the rest of the chain and takes effect from the callsite's next visit.
//!
//! This is a performance heuristic, not part of the trace: its counters are
//! deliberately *not* journaled, so they persist across rejected proposals.

use std::collections::{HashMap, HashSet};

use crate::lang::ast::SourceId;

/// Minimum number of distinct proposals that must have reached a callsite
/// before it can be un-cached.
pub const MIN_PROPOSALS: u64 = 10;

/// Number of consecutive fruitless entries after which a callsite is
/// un-cached.
pub const FRUITLESS_LIMIT: u64 = 50;

#[derive(Default, Clone, Copy)]
struct SiteStats {
    proposals_reached: u64,
    last_proposal: u64,
    fruitless: u64,
}

pub struct AdaptiveCaching {
    enabled: bool,
    /// 0 during the initial run; incremented at the start of each proposal.
    current_proposal: u64,
    stats: HashMap<SourceId, SiteStats>,
    uncached: HashSet<SourceId>,
}

impl AdaptiveCaching {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            current_proposal: 0,
            stats: HashMap::new(),
            uncached: HashSet::new(),
        }
    }

    pub fn begin_proposal(&mut self) {
        self.current_proposal += 1;
    }

    pub fn is_uncached(&self, callsite: SourceId) -> bool {
        self.uncached.contains(&callsite)
    }

    pub fn uncached_count(&self) -> usize {
        self.uncached.len()
    }

    /// Records an entry that ran the body without short-circuiting. Returns
    /// true if this visit tripped the un-caching threshold (the current
    /// visit still runs cached; later visits bypass the cache).
    pub fn fruitless_visit(&mut self, callsite: SourceId) -> bool {
        if !self.enabled || self.current_proposal == 0 || self.uncached.contains(&callsite) {
            return false;
        }
        let s = self.stats.entry(callsite).or_default();
        if s.last_proposal != self.current_proposal {
            s.last_proposal = self.current_proposal;
            s.proposals_reached += 1;
        }
        s.fruitless += 1;
        if s.proposals_reached >= MIN_PROPOSALS && s.fruitless >= FRUITLESS_LIMIT {
            self.uncached.insert(callsite);
            true
        } else {
            false
        }
    }

    /// Un-caches a callsite immediately, bypassing the statistics. Useful
    /// for experiments that pin the caching decision externally.
    pub fn force_uncache(&mut self, callsite: SourceId) {
        self.uncached.insert(callsite);
    }

    /// Records a short-circuit (entry or exit): the streak restarts.
    pub fn fruitful(&mut self, callsite: SourceId) {
        if !self.enabled || self.current_proposal == 0 {
            return;
        }
        let s = self.stats.entry(callsite).or_default();
        if s.last_proposal != self.current_proposal {
            s.last_proposal = self.current_proposal;
            s.proposals_reached += 1;
        }
        s.fruitless = 0;
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;

    const SITE: SourceId = 42;

    #[test]
    fn uncaches_after_enough_fruitless_visits_across_enough_proposals() {
        let mut a = AdaptiveCaching::new(true);
        // 10 proposals x 5 fruitless visits = 50 visits at proposal 10.
        for p in 1..=10 {
            a.begin_proposal();
            for v in 1..=5 {
                let tripped = a.fruitless_visit(SITE);
                assert_eq!(tripped, p == 10 && v == 5, "proposal {p} visit {v}");
            }
        }
        assert!(a.is_uncached(SITE));
        assert_eq!(a.uncached_count(), 1);
    }

    #[test]
    fn needs_both_thresholds() {
        // 50 fruitless visits inside too few proposals: still cached.
        let mut a = AdaptiveCaching::new(true);
        for _ in 0..5 {
            a.begin_proposal();
            for _ in 0..10 {
                assert!(!a.fruitless_visit(SITE));
            }
        }
        assert!(!a.is_uncached(SITE));

        // The streak persists across proposals; once the proposal gate is
        // also met, the very next fruitless visit trips the threshold.
        for p in 6..=10 {
            a.begin_proposal();
            let tripped = a.fruitless_visit(SITE);
            assert_eq!(tripped, p == 10);
        }
        assert!(a.is_uncached(SITE));
        // Further visits report false: it is already un-cached.
        a.begin_proposal();
        assert!(!a.fruitless_visit(SITE));
    }

    #[test]
    fn a_short_circuit_resets_the_streak() {
        let mut a = AdaptiveCaching::new(true);
        for _ in 0..20 {
            a.begin_proposal();
            for _ in 0..4 {
                assert!(!a.fruitless_visit(SITE));
            }
            a.fruitful(SITE); // streak back to zero every proposal
        }
        assert!(!a.is_uncached(SITE));
    }

    #[test]
    fn initial_run_and_disabled_mode_never_count() {
        let mut a = AdaptiveCaching::new(true);
        for _ in 0..1000 {
            assert!(!a.fruitless_visit(SITE)); // before any proposal
        }
        assert!(!a.is_uncached(SITE));

        let mut b = AdaptiveCaching::new(false);
        for _ in 0..100 {
            b.begin_proposal();
            for _ in 0..100 {
                assert!(!b.fruitless_visit(SITE));
            }
        }
        assert!(!b.is_uncached(SITE));
    }
}
