//! Deterministic textual dump of a cache's complete semantic state.
//!
//! The dump covers everything the undo journal can touch — tree structure,
//! cursors, flags, stored values, the choice table, the score ledger, and
//! the final value — so "dump before == dump after rollback" is a complete
//! statement of rollback exactness. Node ids and cumulative counters are
//! deliberately excluded: ids are an allocation artifact, and counters are
//! monotone instrumentation.

use std::fmt::Write as _;

use crate::lang::value::Value;

use super::ledger::ScoreKind;
use super::tree::{Cache, Node, NodeKind};
use crate::lang::value::NodeId;

fn fmt_values(vals: &[Value]) -> String {
    let parts: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
    parts.join(" ")
}

fn write_tree(out: &mut String, cache: &Cache, root: NodeId) {
    let mut work: Vec<(NodeId, usize)> = vec![(root, 0)];
    while let Some((id, depth)) = work.pop() {
        write_node(out, cache, id, depth);
        let node = cache.node(id);
        for &child in node.children.iter().rev() {
            work.push((child, depth + 1));
        }
    }
}

fn write_node(out: &mut String, cache: &Cache, id: NodeId, depth: usize) {
    let node: &Node = cache.node(id);
    let indent = "  ".repeat(depth);
    let flags = format!(
        "{}{}",
        if node.reachable { "" } else { " UNREACHABLE" },
        if node.entered { " ENTERED" } else { "" },
    );
    match &node.kind {
        NodeKind::Root => {
            let _ = writeln!(out, "{indent}root cursor={}{}", node.next_child, flags);
        }
        NodeKind::Call(c) => {
            let ret = match &c.retval {
                Some(v) => v.to_string(),
                None => "<pending>".into(),
            };
            let _ = writeln!(
                out,
                "{indent}call<{}> @{} fn=#<fn:{}> args=({}) ret={} cursor={}{}",
                c.callsite,
                node.addr,
                c.callee.lambda.id,
                fmt_values(&c.args),
                ret,
                node.next_child,
                flags,
            );
        }
        NodeKind::Choice(c) => {
            let score = cache
                .score_entry(&node.addr)
                .map_or("<unscored>".into(), |e| format!("{:?}", e.score));
            let _ = writeln!(
                out,
                "{indent}choice @{} {} val={} score={}{}{}",
                node.addr,
                c.erp.name(),
                c.value,
                score,
                if c.kont.is_some() { " +kont" } else { "" },
                flags,
            );
        }
        NodeKind::Observe(o) => {
            let score = cache
                .score_entry(&node.addr)
                .map_or("<unscored>".into(), |e| format!("{:?}", e.score));
            let _ = writeln!(
                out,
                "{indent}observe @{} {} obs={} score={}{}",
                node.addr,
                o.erp.name(),
                o.observed,
                score,
                flags,
            );
        }
        NodeKind::QueryWrite(q) => {
            let _ = writeln!(
                out,
                "{indent}qwrite @{} key={} val={}{}",
                node.addr, q.key, q.value, flags,
            );
        }
    }
}

/// Renders the cache's full semantic state as stable text.
pub fn dump(cache: &Cache) -> String {
    let mut out = String::new();
    write_tree(&mut out, cache, cache.root());

    let _ = writeln!(out, "choices: {}", cache.choices.len());
    for addr in cache.choices.sorted() {
        let _ = writeln!(out, "  @{addr}");
    }

    let scores = cache.scores_sorted();
    let _ = writeln!(out, "scores: {}", scores.len());
    for (addr, e) in scores {
        let kind = match e.kind {
            ScoreKind::Choice => "choice",
            ScoreKind::Observation => "observe",
        };
        let _ = writeln!(out, "  @{addr} {kind} {:?}", e.score);
    }
    let _ = writeln!(
        out,
        "total: {:?} (bits {:#018x})",
        cache.total_score(),
        cache.total_score().to_bits()
    );
    let _ = writeln!(
        out,
        "final: {}",
        cache
            .final_value()
            .map_or("<none>".into(), |v| v.to_string())
    );
    out
}
