//! The set of proposable random choices in the current trace.

use std::collections::HashMap;

use crate::lang::addr::Address;

/// Addresses of all live random choices, supporting O(1) insert/remove and
/// uniform picking. Observations are not proposable and never appear here.
#[derive(Default, Clone)]
pub struct ChoiceTable {
    addrs: Vec<Address>,
    index: HashMap<Address, usize>,
}

impl ChoiceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.index.contains_key(addr)
    }

    /// Inserts a new choice. Idempotent inserts are a bug upstream.
    pub fn insert(&mut self, addr: Address) {
        debug_assert!(!self.index.contains_key(&addr), "duplicate choice {addr}");
        self.index.insert(addr.clone(), self.addrs.len());
        self.addrs.push(addr);
    }

    /// Removes a choice by swapping the last element into its slot.
    pub fn remove(&mut self, addr: &Address) {
        let Some(i) = self.index.remove(addr) else {
            debug_assert!(false, "removing absent choice {addr}");
            return;
        };
        self.addrs.swap_remove(i);
        if i < self.addrs.len() {
            self.index.insert(self.addrs[i].clone(), i);
        }
    }

    /// Maps a uniform draw in [0, 1) to a choice. In deterministic mode the
    /// draw indexes the lexicographically sorted addresses, which makes the
    /// picked *address* independent of this table's internal order — and
    /// therefore identical across execution strategies.
    pub fn pick(&self, u: f64, deterministic: bool) -> Option<Address> {
        if self.addrs.is_empty() {
            return None;
        }
        let i = ((u * self.addrs.len() as f64) as usize).min(self.addrs.len() - 1);
        if deterministic {
            let mut sorted: Vec<&Address> = self.addrs.iter().collect();
            sorted.sort();
            Some(sorted[i].clone())
        } else {
            Some(self.addrs[i].clone())
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Address> {
        self.addrs.iter()
    }

    /// Addresses in lexicographic order (for dumps and drift checks).
    pub fn sorted(&self) -> Vec<Address> {
        let mut out = self.addrs.clone();
        out.sort();
        out
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;

    fn a(components: &[u32]) -> Address {
        let mut addr = Address::root();
        for &c in components {
            addr = addr.extend(c);
        }
        addr
    }

    #[test]
    fn insert_remove_and_len() {
        let mut t = ChoiceTable::new();
        t.insert(a(&[1]));
        t.insert(a(&[2, 3]));
        t.insert(a(&[0]));
        assert_eq!(t.len(), 3);
        assert!(t.contains(&a(&[2, 3])));
        t.remove(&a(&[1]));
        assert_eq!(t.len(), 2);
        assert!(!t.contains(&a(&[1])));
        assert!(t.contains(&a(&[0])));
    }

    #[test]
    fn deterministic_pick_is_order_independent() {
        let mut t1 = ChoiceTable::new();
        let mut t2 = ChoiceTable::new();
        for addr in [a(&[5]), a(&[1]), a(&[3])] {
            t1.insert(addr);
        }
        for addr in [a(&[3]), a(&[5]), a(&[1])] {
            t2.insert(addr);
        }
        for u in [0.0, 0.4, 0.7, 0.999] {
            assert_eq!(t1.pick(u, true), t2.pick(u, true));
        }
        // u = 0 picks the smallest address.
        assert_eq!(t1.pick(0.0, true), Some(a(&[1])));
    }

    #[test]
    fn pick_clamps_the_top_of_the_unit_interval() {
        let mut t = ChoiceTable::new();
        t.insert(a(&[1]));
        t.insert(a(&[2]));
        assert!(t.pick(0.9999999999, false).is_some());
        assert!(t.pick(0.0, false).is_some());
        assert_eq!(ChoiceTable::new().pick(0.5, false), None);
    }
}
