//! The callsite cache: a tree of call records and effect leaves mirroring
//! the program's dynamic extent, with journaled mutation so a rejected
//! proposal can be rolled back exactly.
//!
//! # Structure
//!
//! Every cached call gets a [`NodeKind::Call`] node keyed by its call-path
//! address; random choices, observations, and query writes get leaf nodes.
//! Children are kept in execution order, and each node carries a cursor
//! (`next_child`) marking where the current pass expects the next child.
//!
//! # Equality-based reuse
//!
//! On entry to a cached call whose stored callee is structurally equivalent
//! and whose arguments are shallow-equal to the stored ones, the recorded
//! return value is reused and the body skipped. Because the language is
//! pure — values are immutable and data flows only through arguments,
//! return values, and captured environments — this check is sound: any
//! value change must arrive through one of the compared inputs.
//!
//! On exit the new return value is compared with the stored one; if it is
//! unchanged and the body was never entered this pass (we only *resumed*
//! into its middle), nothing downstream of the call can differ, and the
//! whole proposal short-circuits.
//!
//! # Staging and rollback
//!
//! All mutations during a proposal — structural edits, score changes,
//! choice-table edits — are applied eagerly and recorded in an undo journal.
//! Rejection replays the journal in reverse; acceptance clears it and frees
//! subtrees condemned by the reachability sweep.

use std::collections::HashMap;
use std::rc::Rc;

use crate::erp::{self, ChainRng, ErpParams};
use crate::lang::addr::Address;
use crate::lang::ast::{ErpKind, SourceId};
use crate::lang::eval::RuntimeError;
use crate::lang::value::{fn_equiv, shallow_eq, ClosureData, FnEquivMemo, NodeId, Value};

use super::adaptive::AdaptiveCaching;
use super::ledger::{ScoreDelta, ScoreEntry, ScoreKind, ScoreLedger};
use super::table::ChoiceTable;

// ═══════════════════════════════════════════════════════════════════════
// Nodes

#[derive(Debug)]
pub struct CallData {
    pub callsite: SourceId,
    pub callee: Rc<ClosureData>,
    pub args: Vec<Value>,
    /// Return value of the last completed execution; `None` only while the
    /// node is fresh and still on the stack.
    pub retval: Option<Value>,
    /// Continuation the call was last *invoked* with, stored by
    /// continuation-passing drivers and refreshed on every visit — reused
    /// visits included. A resumed proposal that unwinds out of this call
    /// must return through this, never through the continuation captured
    /// when the body last ran: values pending in that older one (say, an
    /// earlier sibling's draw feeding a constructor) may have been changed
    /// by intervening proposals whose re-runs skipped the body.
    pub kont: Option<Value>,
}

#[derive(Debug)]
pub struct ChoiceData {
    pub erp: ErpKind,
    pub params: ErpParams,
    pub value: Value,
    /// Continuation of the program from just after this choice, stored by
    /// continuation-passing drivers so proposals can resume here.
    pub kont: Option<Value>,
}

#[derive(Debug)]
pub struct ObserveData {
    pub erp: ErpKind,
    pub params: ErpParams,
    pub observed: Value,
}

#[derive(Debug)]
pub struct QueryData {
    pub key: Value,
    pub value: Value,
}

#[derive(Debug)]
pub enum NodeKind {
    Root,
    Call(CallData),
    Choice(ChoiceData),
    Observe(ObserveData),
    QueryWrite(QueryData),
}

#[derive(Debug)]
pub struct Node {
    pub addr: Address,
    pub parent: Option<NodeId>,
    pub index_in_parent: usize,
    pub children: Vec<NodeId>,
    /// Cleared for all children when a body re-runs; set again on visit.
    /// Children still unreachable at the node's exit are condemned.
    pub reachable: bool,
    /// True between a call's entry and exit within one pass. A call that
    /// exits without having been entered was merely resumed into.
    pub entered: bool,
    /// Position where the current pass expects the next child.
    pub next_child: usize,
    pub kind: NodeKind,
}

impl Node {
    fn is_leaf_site(&self) -> bool {
        matches!(
            self.kind,
            NodeKind::Choice(_) | NodeKind::Observe(_) | NodeKind::QueryWrite(_)
        )
    }
}

/// Result of [`Cache::enter_call`].
pub enum Enter {
    /// Run the body under cache control; pair with [`Cache::exit_call`].
    Run(NodeId),
    /// Inputs matched: skip the body and use the recorded value.
    Reuse(Value),
    /// The callsite has been un-cached; run the body outside the cache.
    Bypass,
}

/// Result of [`Cache::exit_call`].
pub enum Exit {
    /// Proceed with `value`. `kont`, when present, is the call's freshest
    /// stored continuation; continuation-passing drivers must prefer it
    /// over whatever continuation their unwinding captured lexically.
    Continue { value: Value, kont: Option<Value> },
    /// Return value unchanged at a call that was never entered this pass:
    /// the rest of the program is guaranteed identical, stop the proposal.
    ShortCircuit,
}

/// Cumulative event counters (never rolled back; report per-proposal deltas
/// by snapshotting).
#[derive(Debug, Default, Clone, Copy)]
pub struct CacheCounters {
    pub entry_shortcircuits: u64,
    pub exit_shortcircuits: u64,
    pub cached_runs: u64,
    pub bypassed_calls: u64,
    /// Cumulative count of cache nodes allocated, including nodes later
    /// rolled back or swept. Stops growing once the structure around a
    /// proposal stabilizes (or its callsites are adaptively un-cached).
    pub nodes_created: u64,
}

// ═══════════════════════════════════════════════════════════════════════
// Undo journal

enum UndoOp {
    NodeCreated(NodeId),
    ChildInserted {
        parent: NodeId,
        pos: usize,
    },
    ChildRemoved {
        parent: NodeId,
        pos: usize,
        child: NodeId,
    },
    ChildMoved {
        parent: NodeId,
        from: usize,
        to: usize,
    },
    SetParent {
        id: NodeId,
        old: Option<NodeId>,
    },
    SetReachable {
        id: NodeId,
        old: bool,
    },
    SetEntered {
        id: NodeId,
        old: bool,
    },
    SetCursor {
        id: NodeId,
        old: usize,
    },
    SetCallInputs {
        id: NodeId,
        old_callee: Rc<ClosureData>,
        old_args: Vec<Value>,
    },
    SetCallKont {
        id: NodeId,
        old: Option<Value>,
    },
    SetRetval {
        id: NodeId,
        old: Option<Value>,
    },
    SetChoiceValue {
        id: NodeId,
        old: Value,
    },
    SetChoiceParams {
        id: NodeId,
        old: ErpParams,
    },
    SetChoiceKont {
        id: NodeId,
        old: Option<Value>,
    },
    SetObserve {
        id: NodeId,
        old_params: ErpParams,
        old_observed: Value,
    },
    SetQuery {
        id: NodeId,
        old_key: Value,
        old_value: Value,
    },
    Condemned,
    SiteInserted(Address),
    SiteRemoved(Address, NodeId),
    ChoiceInserted(Address),
    ChoiceRemoved(Address),
    ScoreChanged {
        addr: Address,
        old: Option<ScoreEntry>,
        new: Option<ScoreEntry>,
    },
    SetFinal(Option<Value>),
}

// ═══════════════════════════════════════════════════════════════════════
// The cache

pub struct Cache {
    arena: Vec<Option<Node>>,
    free: Vec<NodeId>,
    /// Nodes condemned this proposal; freed at commit, resurrected by
    /// rollback. Slots are never reused within a proposal.
    condemned: Vec<NodeId>,
    root: NodeId,
    stack: Vec<NodeId>,
    /// Address → leaf node, for choices, observations, and query writes.
    /// Call nodes are found by scanning their parent's children instead.
    site_index: HashMap<Address, NodeId>,
    pub choices: ChoiceTable,
    ledger: ScoreLedger,
    journal: Vec<UndoOp>,
    pub adaptive: AdaptiveCaching,
    memo: FnEquivMemo,
    final_value: Option<Value>,
    pub counters: CacheCounters,
}

impl Cache {
    pub fn new(adaptive_enabled: bool) -> Self {
        let root_node = Node {
            addr: Address::root(),
            parent: None,
            index_in_parent: 0,
            children: Vec::new(),
            reachable: true,
            entered: false,
            next_child: 0,
            kind: NodeKind::Root,
        };
        Self {
            arena: vec![Some(root_node)],
            free: Vec::new(),
            condemned: Vec::new(),
            root: NodeId(0),
            stack: vec![NodeId(0)],
            site_index: HashMap::new(),
            choices: ChoiceTable::new(),
            ledger: ScoreLedger::new(),
            journal: Vec::new(),
            adaptive: AdaptiveCaching::new(adaptive_enabled),
            memo: FnEquivMemo::default(),
            final_value: None,
            counters: CacheCounters::default(),
        }
    }

    // ── plain accessors ──────────────────────────────────────────────

    pub fn node(&self, id: NodeId) -> &Node {
        self.arena[id.0 as usize]
            .as_ref()
            .expect("dangling node id")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.arena[id.0 as usize]
            .as_mut()
            .expect("dangling node id")
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn stack_top(&self) -> NodeId {
        *self.stack.last().expect("empty node stack")
    }

    pub fn total_score(&self) -> f64 {
        self.ledger.total()
    }

    pub fn score_entry(&self, addr: &Address) -> Option<ScoreEntry> {
        self.ledger.get(addr)
    }

    pub fn scores_sorted(&self) -> Vec<(Address, ScoreEntry)> {
        self.ledger.iter_sorted()
    }

    pub fn recompute_total(&self) -> f64 {
        self.ledger.recompute_sorted()
    }

    pub fn final_value(&self) -> Option<&Value> {
        self.final_value.as_ref()
    }

    pub fn site_node(&self, addr: &Address) -> Option<NodeId> {
        self.site_index.get(addr).copied()
    }

    /// Current parameters and value of a live random choice.
    pub fn choice_state(&self, addr: &Address) -> Option<(ErpParams, Value)> {
        let id = self.site_node(addr)?;
        match &self.node(id).kind {
            NodeKind::Choice(c) => Some((c.params.clone(), c.value.clone())),
            _ => None,
        }
    }

    pub fn live_nodes(&self) -> usize {
        self.arena.len() - self.free.len() - self.condemned.len()
    }

    // ── raw structural edits (journaling is the caller's job) ────────

    fn raw_insert_child(&mut self, parent: NodeId, pos: usize, child: NodeId) {
        let p = self.node_mut(parent);
        p.children.insert(pos, child);
        let ids: Vec<NodeId> = p.children[pos..].to_vec();
        for (off, cid) in ids.into_iter().enumerate() {
            self.node_mut(cid).index_in_parent = pos + off;
        }
    }

    fn raw_remove_child(&mut self, parent: NodeId, pos: usize) -> NodeId {
        let p = self.node_mut(parent);
        let child = p.children.remove(pos);
        let ids: Vec<NodeId> = p.children[pos..].to_vec();
        for (off, cid) in ids.into_iter().enumerate() {
            self.node_mut(cid).index_in_parent = pos + off;
        }
        child
    }

    fn raw_move_child(&mut self, parent: NodeId, from: usize, to: usize) {
        let p = self.node_mut(parent);
        let child = p.children.remove(from);
        p.children.insert(to, child);
        let (lo, hi) = (from.min(to), from.max(to));
        let ids: Vec<NodeId> = self.node(parent).children[lo..=hi].to_vec();
        for (off, cid) in ids.into_iter().enumerate() {
            self.node_mut(cid).index_in_parent = lo + off;
        }
    }

    // ── journaled edits ──────────────────────────────────────────────

    fn alloc(&mut self, node: Node) -> NodeId {
        let id = match self.free.pop() {
            Some(id) => {
                self.arena[id.0 as usize] = Some(node);
                id
            }
            None => {
                let id = NodeId(self.arena.len() as u32);
                self.arena.push(Some(node));
                id
            }
        };
        self.counters.nodes_created += 1;
        self.journal.push(UndoOp::NodeCreated(id));
        id
    }

    fn j_insert_child(&mut self, parent: NodeId, pos: usize, child: NodeId) {
        self.raw_insert_child(parent, pos, child);
        self.journal.push(UndoOp::ChildInserted { parent, pos });
    }

    fn j_remove_child(&mut self, parent: NodeId, pos: usize) -> NodeId {
        let child = self.raw_remove_child(parent, pos);
        self.journal.push(UndoOp::ChildRemoved { parent, pos, child });
        child
    }

    fn j_move_child(&mut self, parent: NodeId, from: usize, to: usize) {
        self.raw_move_child(parent, from, to);
        self.journal.push(UndoOp::ChildMoved { parent, from, to });
    }

    fn j_set_parent(&mut self, id: NodeId, new_parent: Option<NodeId>) {
        let old = self.node(id).parent;
        if old != new_parent {
            self.node_mut(id).parent = new_parent;
            self.journal.push(UndoOp::SetParent { id, old });
        }
    }

    fn j_set_reachable(&mut self, id: NodeId, val: bool) {
        let old = self.node(id).reachable;
        if old != val {
            self.node_mut(id).reachable = val;
            self.journal.push(UndoOp::SetReachable { id, old });
        }
    }

    fn j_set_entered(&mut self, id: NodeId, val: bool) {
        let old = self.node(id).entered;
        if old != val {
            self.node_mut(id).entered = val;
            self.journal.push(UndoOp::SetEntered { id, old });
        }
    }

    fn j_set_cursor(&mut self, id: NodeId, val: usize) {
        let old = self.node(id).next_child;
        if old != val {
            self.node_mut(id).next_child = val;
            self.journal.push(UndoOp::SetCursor { id, old });
        }
    }

    fn j_site_insert(&mut self, addr: &Address, id: NodeId) {
        let prev = self.site_index.insert(addr.clone(), id);
        debug_assert!(prev.is_none(), "duplicate site {addr}");
        self.journal.push(UndoOp::SiteInserted(addr.clone()));
    }

    fn j_site_remove(&mut self, addr: &Address) {
        if let Some(old) = self.site_index.remove(addr) {
            self.journal.push(UndoOp::SiteRemoved(addr.clone(), old));
        }
    }

    fn j_choice_insert(&mut self, addr: &Address) {
        self.choices.insert(addr.clone());
        self.journal.push(UndoOp::ChoiceInserted(addr.clone()));
    }

    fn j_choice_remove(&mut self, addr: &Address) {
        self.choices.remove(addr);
        self.journal.push(UndoOp::ChoiceRemoved(addr.clone()));
    }

    /// Replaces a call's stored continuation. A `None`-for-`None` swap (the
    /// full-re-execution driver carries no continuations) is a no-op so it
    /// doesn't bloat the journal.
    fn j_set_call_kont(&mut self, id: NodeId, kont: Option<Value>) {
        let needs_update = {
            let NodeKind::Call(call) = &self.node(id).kind else {
                unreachable!("kont update against a call node");
            };
            call.kont.is_some() || kont.is_some()
        };
        if needs_update {
            let old = {
                let NodeKind::Call(call) = &mut self.node_mut(id).kind else {
                    unreachable!("checked above");
                };
                std::mem::replace(&mut call.kont, kont)
            };
            self.journal.push(UndoOp::SetCallKont { id, old });
        }
    }

    /// Stages a score entry, skipping the write when old and new are
    /// bit-identical (this also sidesteps −∞ − −∞ in the delta fold).
    fn j_score(&mut self, addr: &Address, new: Option<ScoreEntry>) {
        let old = self.ledger.get(addr);
        let same = match (old, new) {
            (None, None) => true,
            (Some(a), Some(b)) => a.score.to_bits() == b.score.to_bits() && a.kind == b.kind,
            _ => false,
        };
        if same {
            return;
        }
        self.ledger.set_raw(addr, new);
        self.journal.push(UndoOp::ScoreChanged {
            addr: addr.clone(),
            old,
            new,
        });
    }

    // ── reachability marking, sweeping, condemnation ─────────────────

    /// Marks `parent`'s children from position `start` onward unreachable.
    fn mark_unreachable_from(&mut self, parent: NodeId, start: usize) {
        let ids: Vec<NodeId> = self.node(parent).children[start..].to_vec();
        for id in ids {
            self.j_set_reachable(id, false);
        }
    }

    /// Removes and condemns every child of `id` still marked unreachable.
    fn sweep_children(&mut self, id: NodeId) {
        let doomed: Vec<usize> = self
            .node(id)
            .children
            .iter()
            .enumerate()
            .filter(|(_, c)| !self.node(**c).reachable)
            .map(|(pos, _)| pos)
            .collect();
        for pos in doomed.into_iter().rev() {
            let child = self.j_remove_child(id, pos);
            self.condemn_subtree(child);
        }
    }

    /// Detaches are already done by the caller; this walks the subtree,
    /// removing its sites, choices, and scores from the live tables. The
    /// subtree's internal structure is left intact so rollback can reattach
    /// it wholesale.
    fn condemn_subtree(&mut self, top: NodeId) {
        let mut work = vec![top];
        while let Some(id) = work.pop() {
            self.condemned.push(id);
            self.journal.push(UndoOp::Condemned);
            let addr = self.node(id).addr.clone();
            match &self.node(id).kind {
                NodeKind::Root => unreachable!("root can never be condemned"),
                NodeKind::Call(_) => {}
                NodeKind::Choice(_) => {
                    self.j_site_remove(&addr);
                    self.j_choice_remove(&addr);
                    self.j_score(&addr, None);
                }
                NodeKind::Observe(_) => {
                    self.j_site_remove(&addr);
                    self.j_score(&addr, None);
                }
                NodeKind::QueryWrite(_) => {
                    self.j_site_remove(&addr);
                }
            }
            work.extend(self.node(id).children.iter().copied());
        }
    }

    // ── call entry and exit ──────────────────────────────────────────

    /// Looks up `addr` among `parent`'s children. A hit before the cursor
    /// means the same call path executed twice in one pass, which the
    /// address discipline rules out.
    fn find_child(
        &self,
        parent: NodeId,
        addr: &Address,
    ) -> Result<Option<(usize, NodeId)>, RuntimeError> {
        let p = self.node(parent);
        for (pos, &cid) in p.children.iter().enumerate() {
            if &self.node(cid).addr == addr {
                if pos < p.next_child {
                    return Err(RuntimeError::Internal(format!(
                        "call path {addr} revisited within one pass"
                    )));
                }
                return Ok(Some((pos, cid)));
            }
        }
        Ok(None)
    }

    pub fn enter_call(
        &mut self,
        callsite: SourceId,
        addr: &Address,
        callee: &Rc<ClosureData>,
        args: &[Value],
        kont: Option<&Value>,
        forced: bool,
    ) -> Result<Enter, RuntimeError> {
        if self.adaptive.is_uncached(callsite) {
            self.counters.bypassed_calls += 1;
            return Ok(Enter::Bypass);
        }

        let parent = self.stack_top();
        let cursor = self.node(parent).next_child;

        let (id, fresh) = match self.find_child(parent, addr)? {
            Some((pos, id)) => {
                if pos != cursor {
                    self.j_move_child(parent, pos, cursor);
                }
                (id, false)
            }
            None => {
                let id = self.alloc(Node {
                    addr: addr.clone(),
                    parent: Some(parent),
                    index_in_parent: cursor,
                    children: Vec::new(),
                    reachable: false,
                    entered: false,
                    next_child: 0,
                    kind: NodeKind::Call(CallData {
                        callsite,
                        callee: Rc::clone(callee),
                        args: args.to_vec(),
                        retval: None,
                        kont: kont.cloned(),
                    }),
                });
                self.j_insert_child(parent, cursor, id);
                (id, true)
            }
        };
        self.j_set_reachable(id, true);

        if !fresh {
            let (equal, retval) = {
                let NodeKind::Call(call) = &self.node(id).kind else {
                    return Err(RuntimeError::Internal(format!(
                        "call path {addr} collides with a non-call record"
                    )));
                };
                let stored_callee = Rc::clone(&call.callee);
                let stored_args = call.args.clone();
                let retval = call.retval.clone();
                let equal = retval.is_some()
                    && fn_equiv(&mut self.memo, &stored_callee, callee)
                    && stored_args.len() == args.len()
                    && stored_args
                        .iter()
                        .zip(args)
                        .all(|(a, b)| shallow_eq(&mut self.memo, a, b));
                (equal, retval)
            };
            // This visit's continuation supersedes the stored one even when
            // the body is about to be skipped: upstream values pending in it
            // are current, and a later proposal resumed from inside this
            // subtree must unwind into them rather than into whatever the
            // skipped body captured last time it actually ran.
            self.j_set_call_kont(id, kont.cloned());
            if equal && !forced {
                self.counters.entry_shortcircuits += 1;
                self.adaptive.fruitful(callsite);
                let pos = self.node(id).index_in_parent;
                self.j_set_cursor(parent, pos + 1);
                return Ok(Enter::Reuse(retval.expect("checked above")));
            }
            if !equal {
                let (old_callee, old_args) = {
                    let NodeKind::Call(call) = &mut self.node_mut(id).kind else {
                        unreachable!("checked above");
                    };
                    let old_callee = std::mem::replace(&mut call.callee, Rc::clone(callee));
                    let old_args = std::mem::replace(&mut call.args, args.to_vec());
                    (old_callee, old_args)
                };
                self.journal.push(UndoOp::SetCallInputs {
                    id,
                    old_callee,
                    old_args,
                });
            }
        }

        // Running the body. Forced runs never had a chance to short-circuit,
        // so they are excluded from the adaptive statistics.
        if !forced {
            self.adaptive.fruitless_visit(callsite);
        }
        self.counters.cached_runs += 1;
        self.mark_unreachable_from(id, 0);
        self.j_set_cursor(id, 0);
        self.j_set_entered(id, true);
        self.stack.push(id);
        Ok(Enter::Run(id))
    }

    /// Exit bookkeeping for the call on top of the stack. `expected` (when
    /// known, as in the continuation-passing driver) cross-checks pairing.
    /// `allow_shortcircuit` is false during full re-execution passes, where
    /// every exit follows an entry and a short-circuit would be a bug.
    pub fn exit_call(
        &mut self,
        expected: Option<NodeId>,
        retval: &Value,
        allow_shortcircuit: bool,
    ) -> Result<Exit, RuntimeError> {
        if self.stack.len() <= 1 {
            return Err(RuntimeError::Internal(
                "call exit with no call on the stack".into(),
            ));
        }
        let id = self.stack.pop().expect("checked above");
        if let Some(e) = expected {
            if e != id {
                return Err(RuntimeError::Internal(format!(
                    "mismatched call exit: expected node {} got {}",
                    e.0, id.0
                )));
            }
        }

        self.sweep_children(id);

        let (callsite, entered, rveq) = {
            let node = self.node(id);
            let NodeKind::Call(call) = &node.kind else {
                return Err(RuntimeError::Internal(
                    "call exit at a non-call record".into(),
                ));
            };
            let stored = call.retval.clone();
            let callsite = call.callsite;
            let entered = node.entered;
            let rveq = match &stored {
                Some(old) => shallow_eq(&mut self.memo, old, retval),
                None => false,
            };
            (callsite, entered, rveq)
        };

        if !entered && rveq {
            if !allow_shortcircuit {
                return Err(RuntimeError::Internal(
                    "exit short-circuit outside a resumed proposal".into(),
                ));
            }
            self.counters.exit_shortcircuits += 1;
            self.adaptive.fruitful(callsite);
            return Ok(Exit::ShortCircuit);
        }

        if entered {
            self.j_set_entered(id, false);
        }

        let parent = self.node(id).parent.expect("non-root call has a parent");
        if !rveq {
            // Anything after this call in the parent's body consumed the old
            // value; those siblings must re-run or be swept.
            let pos = self.node(id).index_in_parent;
            self.mark_unreachable_from(parent, pos + 1);
            let old = {
                let NodeKind::Call(call) = &mut self.node_mut(id).kind else {
                    unreachable!("checked above");
                };
                std::mem::replace(&mut call.retval, Some(retval.clone()))
            };
            self.journal.push(UndoOp::SetRetval { id, old });
        }
        // When the values matched we keep the stored object (pointer
        // stability makes future shallow-equality checks cheap).
        let (out, kont) = {
            let NodeKind::Call(call) = &self.node(id).kind else {
                unreachable!("checked above");
            };
            (
                call.retval.clone().expect("retval set on every exit path"),
                call.kont.clone(),
            )
        };
        let pos = self.node(id).index_in_parent;
        self.j_set_cursor(parent, pos + 1);
        Ok(Exit::Continue { value: out, kont })
    }

    // ── effect leaves ────────────────────────────────────────────────

    /// Places an existing leaf at the current cursor, reparenting it when
    /// its old parent was bypassed or inlined away, and advances the cursor.
    fn place_existing_leaf(&mut self, id: NodeId) -> Result<(), RuntimeError> {
        let here = self.stack_top();
        let cursor = self.node(here).next_child;
        if self.node(id).parent == Some(here) {
            let pos = self.node(id).index_in_parent;
            if pos < cursor {
                return Err(RuntimeError::Internal(format!(
                    "site {} revisited within one pass",
                    self.node(id).addr
                )));
            }
            if pos != cursor {
                self.j_move_child(here, pos, cursor);
            }
        } else {
            let old_parent = self
                .node(id)
                .parent
                .expect("leaf sites always have a parent");
            let old_pos = self.node(id).index_in_parent;
            self.j_remove_child(old_parent, old_pos);
            self.j_set_parent(id, Some(here));
            self.j_insert_child(here, cursor, id);
        }
        self.j_set_reachable(id, true);
        self.j_set_cursor(here, cursor + 1);
        Ok(())
    }

    fn insert_fresh_leaf(&mut self, addr: &Address, kind: NodeKind) -> NodeId {
        let here = self.stack_top();
        let cursor = self.node(here).next_child;
        let id = self.alloc(Node {
            addr: addr.clone(),
            parent: Some(here),
            index_in_parent: cursor,
            children: Vec::new(),
            reachable: true,
            entered: false,
            next_child: 0,
            kind,
        });
        self.j_insert_child(here, cursor, id);
        self.j_set_cursor(here, cursor + 1);
        self.j_site_insert(addr, id);
        id
    }

    /// A `sample` site was reached: returns the (possibly fresh) value.
    pub fn visit_choice(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        param_vals: &[Value],
        kont: Option<Value>,
        rng: &mut ChainRng,
    ) -> Result<Value, RuntimeError> {
        let params = erp::parse_params(erp, param_vals)?;
        match self.site_node(addr) {
            Some(id) => {
                {
                    let NodeKind::Choice(c) = &self.node(id).kind else {
                        return Err(RuntimeError::Internal(format!(
                            "site {addr} is not a random choice"
                        )));
                    };
                    if c.erp != erp {
                        return Err(RuntimeError::Internal(format!(
                            "choice {addr} changed distribution kind"
                        )));
                    }
                }
                self.place_existing_leaf(id)?;
                let (params_changed, value) = {
                    let NodeKind::Choice(c) = &self.node(id).kind else {
                        unreachable!("checked above");
                    };
                    (!erp::params_eq(&params, &c.params), c.value.clone())
                };
                if params_changed {
                    let score = erp::score(&params, &value)?;
                    let old_params = {
                        let NodeKind::Choice(c) = &mut self.node_mut(id).kind else {
                            unreachable!("checked above");
                        };
                        std::mem::replace(&mut c.params, params)
                    };
                    self.journal.push(UndoOp::SetChoiceParams {
                        id,
                        old: old_params,
                    });
                    self.j_score(
                        addr,
                        Some(ScoreEntry {
                            score,
                            kind: ScoreKind::Choice,
                        }),
                    );
                }
                // The continuation from this execution supersedes the stored
                // one — the old one resumes into a context that no longer
                // exists if anything upstream changed.
                {
                    let needs_update = {
                        let NodeKind::Choice(c) = &self.node(id).kind else {
                            unreachable!("checked above");
                        };
                        c.kont.is_some() || kont.is_some()
                    };
                    if needs_update {
                        let old = {
                            let NodeKind::Choice(c) = &mut self.node_mut(id).kind else {
                                unreachable!("checked above");
                            };
                            std::mem::replace(&mut c.kont, kont)
                        };
                        self.journal.push(UndoOp::SetChoiceKont { id, old });
                    }
                }
                Ok(value)
            }
            None => {
                let value = erp::draw(&params, rng);
                let score = erp::score(&params, &value)?;
                self.insert_fresh_leaf(
                    addr,
                    NodeKind::Choice(ChoiceData {
                        erp,
                        params,
                        value: value.clone(),
                        kont,
                    }),
                );
                self.j_choice_insert(addr);
                self.j_score(
                    addr,
                    Some(ScoreEntry {
                        score,
                        kind: ScoreKind::Choice,
                    }),
                );
                Ok(value)
            }
        }
    }

    /// An `observe` site was reached.
    pub fn visit_observe(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        param_vals: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError> {
        let params = erp::parse_params(erp, param_vals)?;
        match self.site_node(addr) {
            Some(id) => {
                {
                    let NodeKind::Observe(o) = &self.node(id).kind else {
                        return Err(RuntimeError::Internal(format!(
                            "site {addr} is not an observation"
                        )));
                    };
                    if o.erp != erp {
                        return Err(RuntimeError::Internal(format!(
                            "observation {addr} changed distribution kind"
                        )));
                    }
                }
                self.place_existing_leaf(id)?;
                let (params_changed, stored_observed) = {
                    let NodeKind::Observe(o) = &self.node(id).kind else {
                        unreachable!("checked above");
                    };
                    (!erp::params_eq(&params, &o.params), o.observed.clone())
                };
                let changed =
                    params_changed || !shallow_eq(&mut self.memo, &stored_observed, observed);
                if changed {
                    let score = erp::score(&params, observed)?;
                    let (old_params, old_observed) = {
                        let NodeKind::Observe(o) = &mut self.node_mut(id).kind else {
                            unreachable!("checked above");
                        };
                        (
                            std::mem::replace(&mut o.params, params),
                            std::mem::replace(&mut o.observed, observed.clone()),
                        )
                    };
                    self.journal.push(UndoOp::SetObserve {
                        id,
                        old_params,
                        old_observed,
                    });
                    self.j_score(
                        addr,
                        Some(ScoreEntry {
                            score,
                            kind: ScoreKind::Observation,
                        }),
                    );
                }
                Ok(())
            }
            None => {
                let score = erp::score(&params, observed)?;
                self.insert_fresh_leaf(
                    addr,
                    NodeKind::Observe(ObserveData {
                        erp,
                        params,
                        observed: observed.clone(),
                    }),
                );
                self.j_score(
                    addr,
                    Some(ScoreEntry {
                        score,
                        kind: ScoreKind::Observation,
                    }),
                );
                Ok(())
            }
        }
    }

    /// A `query-add` site was reached.
    pub fn visit_query(
        &mut self,
        addr: &Address,
        key: &Value,
        value: &Value,
    ) -> Result<(), RuntimeError> {
        match self.site_node(addr) {
            Some(id) => {
                if !matches!(self.node(id).kind, NodeKind::QueryWrite(_)) {
                    return Err(RuntimeError::Internal(format!(
                        "site {addr} is not a query write"
                    )));
                }
                self.place_existing_leaf(id)?;
                let (stored_key, stored_value) = {
                    let NodeKind::QueryWrite(q) = &self.node(id).kind else {
                        unreachable!("checked above");
                    };
                    (q.key.clone(), q.value.clone())
                };
                let changed = !shallow_eq(&mut self.memo, &stored_key, key)
                    || !shallow_eq(&mut self.memo, &stored_value, value);
                if changed {
                    let (old_key, old_value) = {
                        let NodeKind::QueryWrite(q) = &mut self.node_mut(id).kind else {
                            unreachable!("checked above");
                        };
                        (
                            std::mem::replace(&mut q.key, key.clone()),
                            std::mem::replace(&mut q.value, value.clone()),
                        )
                    };
                    self.journal.push(UndoOp::SetQuery {
                        id,
                        old_key,
                        old_value,
                    });
                }
                Ok(())
            }
            None => {
                self.insert_fresh_leaf(
                    addr,
                    NodeKind::QueryWrite(QueryData {
                        key: key.clone(),
                        value: value.clone(),
                    }),
                );
                Ok(())
            }
        }
    }

    // ── proposal choreography ────────────────────────────────────────

    /// Stages a new value (and score) for an existing random choice.
    pub fn stage_choice_value(
        &mut self,
        addr: &Address,
        value: Value,
    ) -> Result<(), RuntimeError> {
        let id = self.site_node(addr).ok_or_else(|| {
            RuntimeError::Internal(format!("proposal target {addr} is not a live choice"))
        })?;
        let params = {
            let NodeKind::Choice(c) = &self.node(id).kind else {
                return Err(RuntimeError::Internal(format!(
                    "proposal target {addr} is not a random choice"
                )));
            };
            c.params.clone()
        };
        let score = erp::score(&params, &value)?;
        let old = {
            let NodeKind::Choice(c) = &mut self.node_mut(id).kind else {
                unreachable!("checked above");
            };
            std::mem::replace(&mut c.value, value)
        };
        self.journal.push(UndoOp::SetChoiceValue { id, old });
        self.j_score(
            addr,
            Some(ScoreEntry {
                score,
                kind: ScoreKind::Choice,
            }),
        );
        Ok(())
    }

    /// Prepares a resumption at choice `target`: restores the node stack to
    /// the choice's ancestor chain, invalidates everything after the choice
    /// in its parent's body, and returns the stored continuation.
    pub fn begin_resume(&mut self, target: &Address) -> Result<Value, RuntimeError> {
        let id = self.site_node(target).ok_or_else(|| {
            RuntimeError::Internal(format!("resume target {target} is not a live site"))
        })?;
        let kont = {
            let NodeKind::Choice(c) = &self.node(id).kind else {
                return Err(RuntimeError::Internal(format!(
                    "resume target {target} is not a random choice"
                )));
            };
            c.kont.clone().ok_or_else(|| {
                RuntimeError::Internal(format!("choice {target} has no stored continuation"))
            })?
        };

        let parent = self.node(id).parent.expect("leaf sites have a parent");
        let mut chain = vec![parent];
        let mut cur = parent;
        while let Some(up) = self.node(cur).parent {
            chain.push(up);
            cur = up;
        }
        chain.reverse();
        debug_assert_eq!(chain[0], self.root);
        debug_assert!(
            chain.iter().all(|&n| !self.node(n).entered),
            "resume across a call that is still entered"
        );
        self.stack = chain;

        let pos = self.node(id).index_in_parent;
        self.mark_unreachable_from(parent, pos + 1);
        self.j_set_cursor(parent, pos + 1);
        Ok(kont)
    }

    /// Prepares a full re-execution from the program root (the strategy
    /// without continuations): every root child is provisionally
    /// unreachable and the cursor rewinds.
    pub fn begin_full_pass(&mut self) {
        self.stack = vec![self.root];
        self.mark_unreachable_from(self.root, 0);
        self.j_set_cursor(self.root, 0);
    }

    /// Records the program's final value and sweeps stale top-level work.
    /// Used on the initial run and whenever a pass runs to completion; a
    /// short-circuited pass leaves both untouched by construction.
    pub fn finish_pass(&mut self, value: Value) {
        let old = std::mem::replace(&mut self.final_value, Some(value));
        self.journal.push(UndoOp::SetFinal(old));
        self.sweep_children(self.root);
    }

    /// Addresses of the target's proper ancestor calls (for strategies that
    /// force re-entry along the path to the proposal target).
    pub fn ancestor_call_addrs(&self, target: &Address) -> Vec<Address> {
        let mut out = Vec::new();
        let Some(id) = self.site_node(target) else {
            return out;
        };
        let mut cur = self.node(id).parent;
        while let Some(up) = cur {
            if matches!(self.node(up).kind, NodeKind::Call(_)) {
                out.push(self.node(up).addr.clone());
            }
            cur = self.node(up).parent;
        }
        out
    }

    /// All live query writes as (address, key, value), sorted by address.
    pub fn query_writes(&self) -> Vec<(Address, Value, Value)> {
        let mut out: Vec<(Address, Value, Value)> = self
            .site_index
            .iter()
            .filter_map(|(addr, &id)| match &self.node(id).kind {
                NodeKind::QueryWrite(q) => Some((addr.clone(), q.key.clone(), q.value.clone())),
                _ => None,
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// The score deltas staged so far in this proposal, in staging order.
    pub fn proposal_deltas(&self) -> Vec<ScoreDelta> {
        self.journal
            .iter()
            .filter_map(|op| match op {
                UndoOp::ScoreChanged { addr, old, new } => Some(ScoreDelta {
                    addr: addr.clone(),
                    old: *old,
                    new: *new,
                }),
                _ => None,
            })
            .collect()
    }

    /// Accepts the staged proposal: the journal is discarded, condemned
    /// subtrees are freed, and the ledger total becomes `new_total` (the
    /// canonically folded value, so every strategy stores the same bits).
    pub fn commit(&mut self, new_total: f64) {
        self.ledger.set_total(new_total);
        self.journal.clear();
        for id in std::mem::take(&mut self.condemned) {
            self.arena[id.0 as usize] = None;
            self.free.push(id);
        }
        self.memo.clear();
        self.stack.clear();
        self.stack.push(self.root);
    }

    /// Rejects the staged proposal by replaying the journal in reverse.
    pub fn rollback(&mut self) {
        while let Some(op) = self.journal.pop() {
            match op {
                UndoOp::NodeCreated(id) => {
                    self.arena[id.0 as usize] = None;
                    self.free.push(id);
                }
                UndoOp::ChildInserted { parent, pos } => {
                    self.raw_remove_child(parent, pos);
                }
                UndoOp::ChildRemoved { parent, pos, child } => {
                    self.raw_insert_child(parent, pos, child);
                }
                UndoOp::ChildMoved { parent, from, to } => {
                    self.raw_move_child(parent, to, from);
                }
                UndoOp::SetParent { id, old } => {
                    self.node_mut(id).parent = old;
                }
                UndoOp::SetReachable { id, old } => {
                    self.node_mut(id).reachable = old;
                }
                UndoOp::SetEntered { id, old } => {
                    self.node_mut(id).entered = old;
                }
                UndoOp::SetCursor { id, old } => {
                    self.node_mut(id).next_child = old;
                }
                UndoOp::SetCallInputs {
                    id,
                    old_callee,
                    old_args,
                } => {
                    let NodeKind::Call(call) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against a call node");
                    };
                    call.callee = old_callee;
                    call.args = old_args;
                }
                UndoOp::SetCallKont { id, old } => {
                    let NodeKind::Call(call) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against a call node");
                    };
                    call.kont = old;
                }
                UndoOp::SetRetval { id, old } => {
                    let NodeKind::Call(call) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against a call node");
                    };
                    call.retval = old;
                }
                UndoOp::SetChoiceValue { id, old } => {
                    let NodeKind::Choice(c) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against a choice node");
                    };
                    c.value = old;
                }
                UndoOp::SetChoiceParams { id, old } => {
                    let NodeKind::Choice(c) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against a choice node");
                    };
                    c.params = old;
                }
                UndoOp::SetChoiceKont { id, old } => {
                    let NodeKind::Choice(c) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against a choice node");
                    };
                    c.kont = old;
                }
                UndoOp::SetObserve {
                    id,
                    old_params,
                    old_observed,
                } => {
                    let NodeKind::Observe(o) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against an observe node");
                    };
                    o.params = old_params;
                    o.observed = old_observed;
                }
                UndoOp::SetQuery {
                    id,
                    old_key,
                    old_value,
                } => {
                    let NodeKind::QueryWrite(q) = &mut self.node_mut(id).kind else {
                        unreachable!("journaled against a query node");
                    };
                    q.key = old_key;
                    q.value = old_value;
                }
                UndoOp::Condemned => {
                    self.condemned.pop();
                }
                UndoOp::SiteInserted(addr) => {
                    self.site_index.remove(&addr);
                }
                UndoOp::SiteRemoved(addr, id) => {
                    self.site_index.insert(addr, id);
                }
                UndoOp::ChoiceInserted(addr) => {
                    self.choices.remove(&addr);
                }
                UndoOp::ChoiceRemoved(addr) => {
                    self.choices.insert(addr);
                }
                UndoOp::ScoreChanged { addr, old, .. } => {
                    self.ledger.set_raw(&addr, old);
                }
                UndoOp::SetFinal(old) => {
                    self.final_value = old;
                }
            }
        }
        debug_assert!(self.condemned.is_empty(), "condemned list survived rollback");
        self.condemned.clear();
        self.memo.clear();
        self.stack.clear();
        self.stack.push(self.root);
    }

    // ── integrity checking ───────────────────────────────────────────

    /// Verifies every structural invariant that should hold *between*
    /// proposals. Returns a description of the first violation found.
    pub fn check_consistency(&self) -> Result<(), String> {
        if !self.journal.is_empty() {
            return Err(format!("journal not empty: {} ops", self.journal.len()));
        }
        if !self.condemned.is_empty() {
            return Err("condemned list not empty".into());
        }
        if self.stack != vec![self.root] {
            return Err("node stack not reset to the root".into());
        }

        let mut live = 0usize;
        let mut leaf_sites = 0usize;
        let mut n_choices = 0usize;
        let mut n_scored = 0usize;
        let mut work = vec![self.root];
        while let Some(id) = work.pop() {
            live += 1;
            let node = self.node(id);
            if !node.reachable {
                return Err(format!("node {} ({}) unreachable", id.0, node.addr));
            }
            if node.entered {
                return Err(format!("node {} ({}) still entered", id.0, node.addr));
            }
            let mut seen = std::collections::HashSet::new();
            for (pos, &cid) in node.children.iter().enumerate() {
                let child = self.node(cid);
                if child.parent != Some(id) {
                    return Err(format!("child {} has wrong parent", cid.0));
                }
                if child.index_in_parent != pos {
                    return Err(format!(
                        "child {} index {} but position {}",
                        cid.0, child.index_in_parent, pos
                    ));
                }
                if !seen.insert(child.addr.clone()) {
                    return Err(format!("duplicate child address {}", child.addr));
                }
                work.push(cid);
            }
            if node.is_leaf_site() {
                leaf_sites += 1;
                if self.site_index.get(&node.addr) != Some(&id) {
                    return Err(format!("site index misses leaf {}", node.addr));
                }
                match &node.kind {
                    NodeKind::Choice(_) => {
                        n_choices += 1;
                        n_scored += 1;
                        if !self.choices.contains(&node.addr) {
                            return Err(format!("choice table misses {}", node.addr));
                        }
                        match self.ledger.get(&node.addr) {
                            Some(e) if e.kind == ScoreKind::Choice => {}
                            _ => return Err(format!("ledger misses choice {}", node.addr)),
                        }
                    }
                    NodeKind::Observe(_) => {
                        n_scored += 1;
                        match self.ledger.get(&node.addr) {
                            Some(e) if e.kind == ScoreKind::Observation => {}
                            _ => return Err(format!("ledger misses observation {}", node.addr)),
                        }
                    }
                    _ => {}
                }
            }
        }
        if self.site_index.len() != leaf_sites {
            return Err(format!(
                "site index has {} entries but the tree has {} leaves",
                self.site_index.len(),
                leaf_sites
            ));
        }
        if self.choices.len() != n_choices {
            return Err(format!(
                "choice table has {} entries but the tree has {} choices",
                self.choices.len(),
                n_choices
            ));
        }
        if self.ledger.len() != n_scored {
            return Err(format!(
                "ledger has {} entries but the tree has {} scored sites",
                self.ledger.len(),
                n_scored
            ));
        }
        if live + self.free.len() != self.arena.len() {
            return Err(format!(
                "arena accounting: {} live + {} free != {} slots",
                live,
                self.free.len(),
                self.arena.len()
            ));
        }
        let recomputed = self.ledger.recompute_sorted();
        let drift = (self.ledger.total() - recomputed).abs();
        if drift > 1e-6 * self.ledger.total().abs().max(1.0) && recomputed.is_finite() {
            return Err(format!(
                "score drift: stored {} recomputed {}",
                self.ledger.total(),
                recomputed
            ));
        }
        Ok(())
    }
}

// ═══════════════════════════════════════════════════════════════════════
