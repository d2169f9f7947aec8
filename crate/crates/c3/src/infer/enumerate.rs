//! Exact posterior enumeration for finite-support models.
//!
//! Sampler correctness is checked against ground truth: when every random
//! choice in a program has finite support (flips and categorical draws),
//! the posterior can be computed exactly by running the program once per
//! assignment of values to choices. The traversal is depth-first with an
//! odometer over the *execution-order* choice sequence, so programs whose
//! set of choices depends on earlier choices (branching traces) enumerate
//! correctly: backtracking a prefix discards whatever downstream choices
//! that prefix created.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::erp::{self};
use crate::lang::addr::Address;
use crate::lang::ast::{ErpKind, SourceId};
use crate::lang::eval::RuntimeError;
use crate::lang::value::{ClosureData, Value};
use crate::lang::{DirectHooks, EnterAction, Evaluator, Program};
use crate::transform;

use super::eval_preamble;
use super::mh::assemble_query;

/// One complete run of the program under a fixed choice assignment.
#[derive(Debug)]
pub struct PathOutcome {
    /// Joint log-density of the path: every choice score plus every
    /// observation score.
    pub log_weight: f64,
    pub final_value: Value,
    pub query: Vec<(String, Value)>,
}

struct EnumHooks {
    /// Chosen support index per choice, in execution order. Indices past
    /// `pos` belong to a previous (longer) path and get truncated by the
    /// odometer before the next run.
    path: Vec<usize>,
    /// Support size of each choice reached on the current run.
    supports: Vec<usize>,
    pos: usize,
    logp: f64,
    queries: Vec<(Address, Value, Value)>,
}

impl DirectHooks for EnumHooks {
    fn sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
    ) -> Result<Value, RuntimeError> {
        let params = erp::parse_params(erp, params)?;
        let support = erp::support(&params).ok_or_else(|| {
            RuntimeError::Internal(format!(
                "exact enumeration needs finite support, but {} at {addr} is continuous",
                erp.name()
            ))
        })?;
        let i = self.pos;
        self.pos += 1;
        if i >= self.path.len() {
            self.path.push(0);
        }
        self.supports.push(support.len());
        let value = support[self.path[i]].clone();
        self.logp += erp::score(&params, &value)?;
        Ok(value)
    }

    fn observe(
        &mut self,
        _addr: &Address,
        erp: ErpKind,
        params: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError> {
        let params = erp::parse_params(erp, params)?;
        self.logp += erp::score(&params, observed)?;
        Ok(())
    }

    fn query_add(&mut self, addr: &Address, key: &Value, value: &Value) -> Result<(), RuntimeError> {
        self.queries.push((addr.clone(), key.clone(), value.clone()));
        Ok(())
    }

    fn call_enter(
        &mut self,
        _callsite: SourceId,
        _addr: &Address,
        _callee: &Rc<ClosureData>,
        _args: &[Value],
    ) -> Result<EnterAction, RuntimeError> {
        Ok(EnterAction::Bypass)
    }

    fn call_exit(&mut self, _retval: &Value) -> Result<(), RuntimeError> {
        super::unsupported_exit()
    }
}

/// Enumerates every trace of `prog`, up to `max_paths` (guarding against
/// combinatorial blowups). All choices must be finite-support.
pub fn enumerate(prog: &Program, max_paths: usize) -> Result<Vec<PathOutcome>, RuntimeError> {
    // Addresses are needed for query assembly; nothing else is.
    let transformed = transform::transform_for(prog, transform::Engine::Lightweight);
    let (env, main) = eval_preamble(&transformed)?;

    let mut outcomes = Vec::new();
    let mut path: Vec<usize> = Vec::new();
    loop {
        let mut hooks = EnumHooks {
            path: std::mem::take(&mut path),
            supports: Vec::new(),
            pos: 0,
            logp: 0.0,
            queries: Vec::new(),
        };
        let final_value = Evaluator::new(&mut hooks).eval(&main, &env)?;
        let EnumHooks {
            path: mut taken,
            supports,
            pos,
            logp,
            mut queries,
        } = hooks;
        queries.sort_by(|a, b| a.0.cmp(&b.0));
        outcomes.push(PathOutcome {
            log_weight: logp,
            final_value,
            query: assemble_query(&queries),
        });
        if outcomes.len() > max_paths {
            return Err(RuntimeError::Internal(format!(
                "enumeration exceeded {max_paths} paths"
            )));
        }

        // Advance the odometer: bump the deepest choice with support left,
        // discarding everything after it. `pos` is the number of choices
        // actually reached this run; stale deeper entries are dropped first.
        taken.truncate(pos);
        let mut i = pos;
        let advanced = loop {
            if i == 0 {
                break false;
            }
            i -= 1;
            if taken[i] + 1 < supports[i] {
                taken[i] += 1;
                taken.truncate(i + 1);
                break true;
            }
        };
        if !advanced {
            return Ok(outcomes);
        }
        path = taken;
    }
}

/// Normalized posterior over a key extracted from each path, sorted by key.
pub fn posterior<F: Fn(&PathOutcome) -> String>(
    outcomes: &[PathOutcome],
    key: F,
) -> Vec<(String, f64)> {
    if outcomes.is_empty() {
        return Vec::new();
    }
    let m = outcomes
        .iter()
        .map(|o| o.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut table: BTreeMap<String, f64> = BTreeMap::new();
    let mut z = 0.0;
    for o in outcomes {
        let w = (o.log_weight - m).exp();
        z += w;
        *table.entry(key(o)).or_insert(0.0) += w;
    }
    table.into_iter().map(|(k, w)| (k, w / z)).collect()
}

/// Empirical distribution of a key over chain samples, sorted by key.
pub fn empirical<I: IntoIterator<Item = String>>(keys: I) -> Vec<(String, f64)> {
    let mut table: BTreeMap<String, f64> = BTreeMap::new();
    let mut n = 0u64;
    for k in keys {
        *table.entry(k).or_insert(0.0) += 1.0;
        n += 1;
    }
    if n == 0 {
        return Vec::new();
    }
    table.into_iter().map(|(k, c)| (k, c / n as f64)).collect()
}

/// Total-variation distance between two distributions over string keys.
pub fn tv_distance(p: &[(String, f64)], q: &[(String, f64)]) -> f64 {
    let mut keys: Vec<&str> = p.iter().chain(q).map(|(k, _)| k.as_str()).collect();
    keys.sort_unstable();
    keys.dedup();
    let lookup = |d: &[(String, f64)], k: &str| -> f64 {
        d.iter().find(|(dk, _)| dk == k).map_or(0.0, |(_, v)| *v)
    };
    0.5 * keys
        .iter()
        .map(|k| (lookup(p, k) - lookup(q, k)).abs())
        .sum::<f64>()
}

// ═══════════════════════════════════════════════════════════════════════
