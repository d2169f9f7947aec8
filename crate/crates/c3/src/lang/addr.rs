//! Hierarchical call-path addresses.
//!
//! Every random choice, observation, and query write is identified by the
//! chain of callsites leading to it plus its own site id. Addresses are
//! persistent cons lists extended at call boundaries: extension is O(1) and
//! prefixes are shared, so the address of a choice deep in a recursion shares
//! structure with every other choice under the same call.
//!
//! Each node caches the path length and a deterministic rolling hash of the
//! whole path, which makes equality checks cheap (hash/length mismatch
//! rejects immediately) and keeps everything keyed or ordered by addresses
//! reproducible across processes.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

const ROOT_HASH: u64 = 0x51_7c_c1_b7_27_22_0a_95;

#[derive(Clone)]
pub struct Address(Option<Rc<Node>>);

struct Node {
    component: u32,
    /// Components from the root up to and including this node.
    len: u32,
    /// Rolling hash of the full path.
    hash: u64,
    parent: Address,
}

impl Drop for Node {
    /// Paths under deep recursion are tens of thousands of nodes long;
    /// unlink the parent chain iteratively so dropping the last reference to
    /// a leaf can't recurse once per ancestor.
    fn drop(&mut self) {
        let mut cur = std::mem::replace(&mut self.parent, Address(None));
        while let Address(Some(rc)) = cur {
            match Rc::try_unwrap(rc) {
                Ok(mut node) => cur = std::mem::replace(&mut node.parent, Address(None)),
                Err(_) => break,
            }
        }
    }
}

/// splitmix64 finalizer; chosen because it is cheap, stateless, and mixes
/// small integer components well.
fn mix(parent_hash: u64, component: u32) -> u64 {
    let mut z = parent_hash ^ (u64::from(component)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Address {
    pub fn root() -> Self {
        Address(None)
    }

    pub fn is_root(&self) -> bool {
        self.0.is_none()
    }

    pub fn extend(&self, component: u32) -> Self {
        let (len, hash) = match &self.0 {
            Some(n) => (n.len + 1, mix(n.hash, component)),
            None => (1, mix(ROOT_HASH, component)),
        };
        Address(Some(Rc::new(Node {
            component,
            len,
            hash,
            parent: self.clone(),
        })))
    }

    pub fn len(&self) -> u32 {
        self.0.as_ref().map_or(0, |n| n.len)
    }

    pub fn is_empty(&self) -> bool {
        self.is_root()
    }

    fn hash_key(&self) -> u64 {
        self.0.as_ref().map_or(ROOT_HASH, |n| n.hash)
    }

    /// Path components in root-first order.
    pub fn components(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.len() as usize);
        let mut cur = &self.0;
        while let Some(n) = cur {
            out.push(n.component);
            cur = &n.parent.0;
        }
        out.reverse();
        out
    }

    /// Parent path, or the root if this is already the root.
    pub fn parent(&self) -> Address {
        match &self.0 {
            Some(n) => n.parent.clone(),
            None => Address::root(),
        }
    }
}

impl PartialEq for Address {
    fn eq(&self, other: &Self) -> bool {
        if self.hash_key() != other.hash_key() || self.len() != other.len() {
            return false;
        }
        let mut a = &self.0;
        let mut b = &other.0;
        loop {
            match (a, b) {
                (None, None) => return true,
                (Some(x), Some(y)) => {
                    if Rc::ptr_eq(x, y) {
                        return true;
                    }
                    if x.component != y.component {
                        return false;
                    }
                    a = &x.parent.0;
                    b = &y.parent.0;
                }
                _ => return false,
            }
        }
    }
}

impl Eq for Address {}

impl Hash for Address {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.hash_key());
    }
}

impl Ord for Address {
    /// Lexicographic over root-first components, so a path sorts immediately
    /// before its extensions. Never consults the hash: total order must agree
    /// with structural equality even under hash collisions.
    fn cmp(&self, other: &Self) -> Ordering {
        self.components().cmp(&other.components())
    }
}

impl PartialOrd for Address {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_root() {
            return write!(f, "·");
        }
        let comps = self.components();
        let mut first = true;
        for c in comps {
            if !first {
                write!(f, "/")?;
            }
            write!(f, "{c}")?;
            first = false;
        }
        Ok(())
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({self})")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn extend_and_components() {
        let a = Address::root().extend(0).extend(3).extend(7);
        assert_eq!(a.components(), vec![0, 3, 7]);
        assert_eq!(a.len(), 3);
        assert_eq!(a.to_string(), "0/3/7");
        assert_eq!(Address::root().to_string(), "·");
    }

    #[test]
    fn structural_equality_across_construction_paths() {
        let shared = Address::root().extend(1);
        let a = shared.extend(2);
        let b = Address::root().extend(1).extend(2);
        assert_eq!(a, b);
        assert_ne!(a, shared);
        assert_ne!(a, Address::root().extend(1).extend(3));
        assert_ne!(Address::root().extend(1), Address::root().extend(1).extend(1));
    }

    #[test]
    fn hash_is_deterministic_for_equal_paths() {
        let a = Address::root().extend(4).extend(9);
        let b = Address::root().extend(4).extend(9);
        assert_eq!(a.hash_key(), b.hash_key());
    }

    #[test]
    fn ordering_is_root_first_lexicographic() {
        let mut set = BTreeSet::new();
        set.insert(Address::root().extend(2));
        set.insert(Address::root().extend(1).extend(5));
        set.insert(Address::root().extend(1));
        set.insert(Address::root());
        let order: Vec<String> = set.iter().map(|a| a.to_string()).collect();
        assert_eq!(order, vec!["·", "1", "1/5", "2"]);
    }

    #[test]
    fn parent_walks_back_up() {
        let a = Address::root().extend(1).extend(2);
        assert_eq!(a.parent(), Address::root().extend(1));
        assert_eq!(a.parent().parent(), Address::root());
        assert_eq!(Address::root().parent(), Address::root());
    }
}
