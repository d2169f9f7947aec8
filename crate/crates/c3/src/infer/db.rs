//! Database-backed execution strategies.
//!
//! Both strategies here keep the trace as a flat map from structural
//! addresses to site records. The **lightweight** strategy re-runs the whole
//! program for every proposal, reusing stored values at matching addresses;
//! the **cps** strategy stores each choice's continuation and re-runs only
//! the part of the program downstream of the changed choice.
//!
//! # Staleness
//!
//! After a full re-run, any site not visited this pass is dead. After a
//! partial (resumed) run the untouched *upstream* prefix is still alive, so
//! liveness needs a second signal: every visit stamps a monotone sequence
//! number, and a resume restamps the entire downstream suffix in execution
//! order. A site is stale only if it was not visited this pass *and* its
//! stamp places it after the proposal target.
//!
//! # Staging
//!
//! A proposal snapshots the database up front and mutates it in place;
//! rejection restores the snapshot. Score changes are also recorded as
//! deltas so the acceptance computation can fold them in the canonical
//! order shared by all strategies.

use std::collections::HashMap;
use std::rc::Rc;

use crate::cachert::{ChoiceTable, ScoreDelta, ScoreEntry, ScoreKind};
use crate::erp::{self, ChainRng, ErpParams};
use crate::lang::addr::Address;
use crate::lang::ast::{ErpKind, SourceId};
use crate::lang::eval::RuntimeError;
use crate::lang::value::{ClosureData, Value};
use crate::lang::{
    CallAction, DirectHooks, EnterAction, Evaluator, ExitAction, Machine, MachineHooks, Outcome,
    Program,
};
use crate::transform;

use super::mh::{Engine, EngineCounters};
use super::{eval_preamble, unsupported_exit};

// ═══════════════════════════════════════════════════════════════════════
// The trace database

#[derive(Clone)]
pub enum DbSiteKind {
    Choice {
        erp: ErpKind,
        params: ErpParams,
        value: Value,
        score: f64,
        kont: Option<Value>,
    },
    Observe {
        erp: ErpKind,
        params: ErpParams,
        observed: Value,
        score: f64,
    },
    QueryWrite {
        key: Value,
        value: Value,
    },
}

#[derive(Clone)]
pub struct DbSite {
    /// Monotone stamp of the site's most recent visit, in execution order.
    pub seq: u64,
    /// Pass number of the site's most recent visit.
    pub epoch: u64,
    pub kind: DbSiteKind,
}

#[derive(Default)]
struct DbState {
    db: HashMap<Address, DbSite>,
    table: ChoiceTable,
    total: f64,
    final_value: Option<Value>,
    epoch: u64,
    seq: u64,
    deltas: Vec<ScoreDelta>,
    snapshot: Option<(HashMap<Address, DbSite>, ChoiceTable, Option<Value>)>,
}

impl DbState {
    fn begin_proposal(&mut self) {
        self.snapshot = Some((self.db.clone(), self.table.clone(), self.final_value.clone()));
        self.epoch += 1;
        self.deltas.clear();
    }

    fn commit(&mut self, new_total: f64) {
        self.snapshot = None;
        self.total = new_total;
        self.deltas.clear();
    }

    fn rollback(&mut self) {
        if let Some((db, table, final_value)) = self.snapshot.take() {
            self.db = db;
            self.table = table;
            self.final_value = final_value;
        }
        self.deltas.clear();
    }

    fn stage_score(&mut self, addr: &Address, old: Option<f64>, new: Option<f64>, kind: ScoreKind) {
        stage(&mut self.deltas, addr, old, new, kind);
    }

    fn visit_sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        param_vals: &[Value],
        kont: Option<Value>,
        rng: &mut ChainRng,
    ) -> Result<Value, RuntimeError> {
        let params = erp::parse_params(erp, param_vals)?;
        self.seq += 1;
        let (seq, epoch) = (self.seq, self.epoch);
        match self.db.get_mut(addr) {
            Some(site) => {
                let DbSiteKind::Choice {
                    erp: stored_erp,
                    params: stored_params,
                    value,
                    score,
                    kont: stored_kont,
                } = &mut site.kind
                else {
                    return Err(RuntimeError::Internal(format!(
                        "site {addr} is not a random choice"
                    )));
                };
                if *stored_erp != erp {
                    return Err(RuntimeError::Internal(format!(
                        "choice {addr} changed distribution kind"
                    )));
                }
                site.seq = seq;
                site.epoch = epoch;
                let out = value.clone();
                if !erp::params_eq(&params, stored_params) {
                    let new_score = erp::score(&params, &out)?;
                    *stored_params = params;
                    let old_score = *score;
                    *score = new_score;
                    stage(
                        &mut self.deltas,
                        addr,
                        Some(old_score),
                        Some(new_score),
                        ScoreKind::Choice,
                    );
                }
                *stored_kont = kont;
                Ok(out)
            }
            None => {
                let value = erp::draw(&params, rng);
                let score = erp::score(&params, &value)?;
                self.db.insert(
                    addr.clone(),
                    DbSite {
                        seq,
                        epoch,
                        kind: DbSiteKind::Choice {
                            erp,
                            params,
                            value: value.clone(),
                            score,
                            kont,
                        },
                    },
                );
                self.table.insert(addr.clone());
                self.stage_score(addr, None, Some(score), ScoreKind::Choice);
                Ok(value)
            }
        }
    }

    fn visit_observe(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        param_vals: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError> {
        let params = erp::parse_params(erp, param_vals)?;
        self.seq += 1;
        let (seq, epoch) = (self.seq, self.epoch);
        match self.db.get_mut(addr) {
            Some(site) => {
                let DbSiteKind::Observe {
                    erp: stored_erp,
                    params: stored_params,
                    observed: stored_observed,
                    score,
                } = &mut site.kind
                else {
                    return Err(RuntimeError::Internal(format!(
                        "site {addr} is not an observation"
                    )));
                };
                if *stored_erp != erp {
                    return Err(RuntimeError::Internal(format!(
                        "observation {addr} changed distribution kind"
                    )));
                }
                site.seq = seq;
                site.epoch = epoch;
                let new_score = erp::score(&params, observed)?;
                *stored_params = params;
                *stored_observed = observed.clone();
                let old_score = *score;
                *score = new_score;
                self.stage_score(
                    addr,
                    Some(old_score),
                    Some(new_score),
                    ScoreKind::Observation,
                );
                Ok(())
            }
            None => {
                let score = erp::score(&params, observed)?;
                self.db.insert(
                    addr.clone(),
                    DbSite {
                        seq,
                        epoch,
                        kind: DbSiteKind::Observe {
                            erp,
                            params,
                            observed: observed.clone(),
                            score,
                        },
                    },
                );
                self.stage_score(addr, None, Some(score), ScoreKind::Observation);
                Ok(())
            }
        }
    }

    fn visit_query(
        &mut self,
        addr: &Address,
        key: &Value,
        value: &Value,
    ) -> Result<(), RuntimeError> {
        self.seq += 1;
        let (seq, epoch) = (self.seq, self.epoch);
        match self.db.get_mut(addr) {
            Some(site) => {
                let DbSiteKind::QueryWrite {
                    key: stored_key,
                    value: stored_value,
                } = &mut site.kind
                else {
                    return Err(RuntimeError::Internal(format!(
                        "site {addr} is not a query write"
                    )));
                };
                site.seq = seq;
                site.epoch = epoch;
                *stored_key = key.clone();
                *stored_value = value.clone();
                Ok(())
            }
            None => {
                self.db.insert(
                    addr.clone(),
                    DbSite {
                        seq,
                        epoch,
                        kind: DbSiteKind::QueryWrite {
                            key: key.clone(),
                            value: value.clone(),
                        },
                    },
                );
                Ok(())
            }
        }
    }

    /// Stages a new value and score for the proposal target.
    fn stage_choice(&mut self, addr: &Address, value: Value) -> Result<(), RuntimeError> {
        let site = self.db.get_mut(addr).ok_or_else(|| {
            RuntimeError::Internal(format!("proposal target {addr} is not a live choice"))
        })?;
        let DbSiteKind::Choice {
            params,
            value: stored_value,
            score,
            ..
        } = &mut site.kind
        else {
            return Err(RuntimeError::Internal(format!(
                "proposal target {addr} is not a random choice"
            )));
        };
        let new_score = erp::score(params, &value)?;
        *stored_value = value;
        let old_score = *score;
        *score = new_score;
        self.stage_score(addr, Some(old_score), Some(new_score), ScoreKind::Choice);
        Ok(())
    }

    /// Removes sites not visited this pass. With `min_seq`, only sites
    /// stamped after it are eligible (the upstream prefix of a resumed run
    /// was legitimately skipped).
    fn sweep_stale(&mut self, min_seq: Option<u64>) {
        let mut dead: Vec<Address> = self
            .db
            .iter()
            .filter(|(_, site)| {
                site.epoch != self.epoch && min_seq.is_none_or(|m| site.seq > m)
            })
            .map(|(addr, _)| addr.clone())
            .collect();
        dead.sort();
        for addr in dead {
            let site = self.db.remove(&addr).expect("collected above");
            match site.kind {
                DbSiteKind::Choice { score, .. } => {
                    self.table.remove(&addr);
                    self.stage_score(&addr, Some(score), None, ScoreKind::Choice);
                }
                DbSiteKind::Observe { score, .. } => {
                    self.stage_score(&addr, Some(score), None, ScoreKind::Observation);
                }
                DbSiteKind::QueryWrite { .. } => {}
            }
        }
    }

    fn choice_state(&self, addr: &Address) -> Option<(ErpParams, Value)> {
        match &self.db.get(addr)?.kind {
            DbSiteKind::Choice { params, value, .. } => Some((params.clone(), value.clone())),
            _ => None,
        }
    }

    fn query_writes(&self) -> Vec<(Address, Value, Value)> {
        let mut out: Vec<(Address, Value, Value)> = self
            .db
            .iter()
            .filter_map(|(addr, site)| match &site.kind {
                DbSiteKind::QueryWrite { key, value } => {
                    Some((addr.clone(), key.clone(), value.clone()))
                }
                _ => None,
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Structural invariants that must hold between proposals.
    fn integrity(&self) -> Result<(), String> {
        if self.snapshot.is_some() {
            return Err("snapshot survived past the proposal".into());
        }
        let mut n_choices = 0usize;
        let mut entries: Vec<(&Address, f64)> = Vec::new();
        for (addr, site) in &self.db {
            match &site.kind {
                DbSiteKind::Choice { score, .. } => {
                    n_choices += 1;
                    if !self.table.contains(addr) {
                        return Err(format!("choice table misses {addr}"));
                    }
                    entries.push((addr, *score));
                }
                DbSiteKind::Observe { score, .. } => entries.push((addr, *score)),
                DbSiteKind::QueryWrite { .. } => {}
            }
        }
        if self.table.len() != n_choices {
            return Err(format!(
                "choice table has {} entries but the database has {} choices",
                self.table.len(),
                n_choices
            ));
        }
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let recomputed: f64 = entries.iter().fold(0.0, |acc, (_, s)| acc + s);
        let drift = (self.total - recomputed).abs();
        if drift > 1e-6 * self.total.abs().max(1.0) && recomputed.is_finite() {
            return Err(format!(
                "score drift: stored {} recomputed {}",
                self.total, recomputed
            ));
        }
        Ok(())
    }
}

/// Records a score change, skipping bitwise-identical rewrites so proposals
/// that merely revisit a site stage nothing for it.
fn stage(
    deltas: &mut Vec<ScoreDelta>,
    addr: &Address,
    old: Option<f64>,
    new: Option<f64>,
    kind: ScoreKind,
) {
    let same = match (old, new) {
        (None, None) => true,
        (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
        _ => false,
    };
    if same {
        return;
    }
    deltas.push(ScoreDelta {
        addr: addr.clone(),
        old: old.map(|score| ScoreEntry { score, kind }),
        new: new.map(|score| ScoreEntry { score, kind }),
    });
}

// ═══════════════════════════════════════════════════════════════════════
// Hook adapters

struct DirectDbHooks<'a> {
    st: &'a mut DbState,
    rng: &'a mut ChainRng,
}

impl DirectHooks for DirectDbHooks<'_> {
    fn sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
    ) -> Result<Value, RuntimeError> {
        self.st.visit_sample(addr, erp, params, None, self.rng)
    }

    fn observe(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError> {
        self.st.visit_observe(addr, erp, params, observed)
    }

    fn query_add(&mut self, addr: &Address, key: &Value, value: &Value) -> Result<(), RuntimeError> {
        self.st.visit_query(addr, key, value)
    }

    fn call_enter(
        &mut self,
        _callsite: SourceId,
        _addr: &Address,
        _callee: &Rc<ClosureData>,
        _args: &[Value],
    ) -> Result<EnterAction, RuntimeError> {
        // This pipeline never marks calls cached; run any that slip through.
        Ok(EnterAction::Bypass)
    }

    fn call_exit(&mut self, _retval: &Value) -> Result<(), RuntimeError> {
        unsupported_exit()
    }
}

struct MachineDbHooks<'a> {
    st: &'a mut DbState,
    rng: &'a mut ChainRng,
}

impl MachineHooks for MachineDbHooks<'_> {
    fn sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        kont: &Value,
    ) -> Result<Value, RuntimeError> {
        self.st
            .visit_sample(addr, erp, params, Some(kont.clone()), self.rng)
    }

    fn observe(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError> {
        self.st.visit_observe(addr, erp, params, observed)
    }

    fn query_add(&mut self, addr: &Address, key: &Value, value: &Value) -> Result<(), RuntimeError> {
        self.st.visit_query(addr, key, value)
    }

    fn call_enter(
        &mut self,
        _callsite: SourceId,
        _addr: &Address,
        _callee: &Rc<ClosureData>,
        _args: &[Value],
        _kont: &Value,
    ) -> Result<CallAction, RuntimeError> {
        Ok(CallAction::Bypass)
    }

    fn call_exit(&mut self, _node: crate::lang::value::NodeId, _retval: &Value) -> Result<ExitAction, RuntimeError> {
        unsupported_exit()
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Lightweight: full re-execution against the database

pub struct LightweightEngine {
    main: Rc<crate::lang::Expr>,
    env: crate::lang::Env,
    st: DbState,
    bodies: u64,
}

impl LightweightEngine {
    pub fn new(prog: &Program) -> Result<Self, RuntimeError> {
        let transformed = transform::transform_for(prog, transform::Engine::Lightweight);
        let (env, main) = eval_preamble(&transformed)?;
        Ok(Self {
            main,
            env,
            st: DbState::default(),
            bodies: 0,
        })
    }

    fn run_full(&mut self, rng: &mut ChainRng) -> Result<Value, RuntimeError> {
        let mut hooks = DirectDbHooks {
            st: &mut self.st,
            rng,
        };
        let mut ev = Evaluator::new(&mut hooks);
        let v = ev.eval(&self.main, &self.env)?;
        self.bodies += ev.stats.bodies_executed;
        Ok(v)
    }
}

impl Engine for LightweightEngine {
    fn name(&self) -> &'static str {
        "lightweight"
    }

    fn initial_run(&mut self, rng: &mut ChainRng) -> Result<(), RuntimeError> {
        let v = self.run_full(rng)?;
        self.st.final_value = Some(v);
        Ok(())
    }

    fn num_choices(&self) -> usize {
        self.st.table.len()
    }

    fn choice_addrs(&self) -> Vec<Address> {
        self.st.table.sorted()
    }

    fn pick_target(&self, u: f64, deterministic: bool) -> Option<Address> {
        self.st.table.pick(u, deterministic)
    }

    fn choice_state(&self, addr: &Address) -> Option<(ErpParams, Value)> {
        self.st.choice_state(addr)
    }

    fn total_score(&self) -> f64 {
        self.st.total
    }

    fn propose(
        &mut self,
        target: &Address,
        value: Value,
        rng: &mut ChainRng,
    ) -> Result<(), RuntimeError> {
        self.st.begin_proposal();
        self.st.stage_choice(target, value)?;
        let v = self.run_full(rng)?;
        self.st.final_value = Some(v);
        self.st.sweep_stale(None);
        Ok(())
    }

    fn staged_deltas(&self) -> Vec<ScoreDelta> {
        self.st.deltas.clone()
    }

    fn commit(&mut self, new_total: f64) {
        self.st.commit(new_total);
    }

    fn rollback(&mut self) {
        self.st.rollback();
    }

    fn final_value(&self) -> Option<Value> {
        self.st.final_value.clone()
    }

    fn query_writes(&self) -> Vec<(Address, Value, Value)> {
        self.st.query_writes()
    }

    fn counters(&self) -> EngineCounters {
        EngineCounters {
            bodies_executed: self.bodies,
            ..EngineCounters::default()
        }
    }

    fn check_integrity(&self) -> Result<(), String> {
        self.st.integrity()
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Cps: resume-from-continuation against the database

pub struct CpsOnlyEngine {
    main: Rc<crate::lang::Expr>,
    env: crate::lang::Env,
    st: DbState,
    bodies: u64,
}

impl CpsOnlyEngine {
    pub fn new(prog: &Program) -> Result<Self, RuntimeError> {
        let transformed = transform::transform_for(prog, transform::Engine::Cps);
        let (env, main) = eval_preamble(&transformed)?;
        Ok(Self {
            main,
            env,
            st: DbState::default(),
            bodies: 0,
        })
    }
}

impl Engine for CpsOnlyEngine {
    fn name(&self) -> &'static str {
        "cps"
    }

    fn initial_run(&mut self, rng: &mut ChainRng) -> Result<(), RuntimeError> {
        let outcome = {
            let mut hooks = MachineDbHooks {
                st: &mut self.st,
                rng,
            };
            let mut machine = Machine::new(&mut hooks);
            let out = machine.run(&self.main, &self.env)?;
            self.bodies += machine.stats.bodies_executed;
            out
        };
        match outcome {
            Outcome::Finished(v) => {
                self.st.final_value = Some(v);
                Ok(())
            }
            Outcome::EarlyExit => Err(RuntimeError::Internal(
                "initial run ended in a short-circuit".into(),
            )),
        }
    }

    fn num_choices(&self) -> usize {
        self.st.table.len()
    }

    fn choice_addrs(&self) -> Vec<Address> {
        self.st.table.sorted()
    }

    fn pick_target(&self, u: f64, deterministic: bool) -> Option<Address> {
        self.st.table.pick(u, deterministic)
    }

    fn choice_state(&self, addr: &Address) -> Option<(ErpParams, Value)> {
        self.st.choice_state(addr)
    }

    fn total_score(&self) -> f64 {
        self.st.total
    }

    fn propose(
        &mut self,
        target: &Address,
        value: Value,
        rng: &mut ChainRng,
    ) -> Result<(), RuntimeError> {
        let (target_seq, kont) = {
            let site = self.st.db.get(target).ok_or_else(|| {
                RuntimeError::Internal(format!("proposal target {target} is not a live choice"))
            })?;
            let DbSiteKind::Choice { kont, .. } = &site.kind else {
                return Err(RuntimeError::Internal(format!(
                    "proposal target {target} is not a random choice"
                )));
            };
            let kont = kont.clone().ok_or_else(|| {
                RuntimeError::Internal(format!("choice {target} has no stored continuation"))
            })?;
            (site.seq, kont)
        };
        self.st.begin_proposal();
        self.st.stage_choice(target, value.clone())?;
        let outcome = {
            let mut hooks = MachineDbHooks {
                st: &mut self.st,
                rng,
            };
            let mut machine = Machine::new(&mut hooks);
            let out = machine.resume(kont, value)?;
            self.bodies += machine.stats.bodies_executed;
            out
        };
        match outcome {
            Outcome::Finished(v) => {
                self.st.final_value = Some(v);
                self.st.sweep_stale(Some(target_seq));
                Ok(())
            }
            Outcome::EarlyExit => Err(RuntimeError::Internal(
                "short-circuit without a call cache".into(),
            )),
        }
    }

    fn staged_deltas(&self) -> Vec<ScoreDelta> {
        self.st.deltas.clone()
    }

    fn commit(&mut self, new_total: f64) {
        self.st.commit(new_total);
    }

    fn rollback(&mut self) {
        self.st.rollback();
    }

    fn final_value(&self) -> Option<Value> {
        self.st.final_value.clone()
    }

    fn query_writes(&self) -> Vec<(Address, Value, Value)> {
        self.st.query_writes()
    }

    fn counters(&self) -> EngineCounters {
        EngineCounters {
            bodies_executed: self.bodies,
            ..EngineCounters::default()
        }
    }

    fn check_integrity(&self) -> Result<(), String> {
        self.st.integrity()
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cachert::fold_deltas;
    use crate::infer::mh::{trace_summary, Engine};
    use crate::lang::parse_program;
    use rand::SeedableRng;

    const BRANCHING: &str = r#"
        (let (a (sample bernoulli 0.5))
          (let (b (if a (sample gaussian 0.0 1.0) (sample gaussian 10.0 1.0)))
            (let (o (observe gaussian b 1.0 2.5))
              (let (q (query-add "b" b))
                b))))"#;

    const UPSTREAM: &str = "
        (let (z (sample gaussian 0.0 1.0))
          (let (a (sample bernoulli 0.5))
            (if a (+ z (sample gaussian 0.0 1.0)) (sample gaussian 10.0 1.0))))";

    const CHAIN: &str = "
        (define step (lambda (i n acc)
          (if (< i n)
              (step (+ i 1) n (+ acc (if (sample bernoulli 0.5) 1 0)))
              acc)))
        (step 0 12 0)";

    fn lightweight(src: &str) -> LightweightEngine {
        LightweightEngine::new(&parse_program(src).unwrap()).unwrap()
    }

    fn cps(src: &str) -> CpsOnlyEngine {
        CpsOnlyEngine::new(&parse_program(src).unwrap()).unwrap()
    }

    fn initialized<E: Engine>(mut engine: E, seed: u64) -> (E, ChainRng) {
        let mut rng = ChainRng::seed_from_u64(seed);
        engine.initial_run(&mut rng).unwrap();
        let summary = fold_deltas(0.0, engine.staged_deltas());
        engine.commit(summary.new_total);
        (engine, rng)
    }

    /// The address of the (single) flip in a trace.
    fn bernoulli_addr<E: Engine>(engine: &E) -> Address {
        engine
            .choice_addrs()
            .into_iter()
            .find(|a| {
                matches!(
                    engine.choice_state(a),
                    Some((ErpParams::Bernoulli { .. }, _))
                )
            })
            .expect("model has a flip")
    }

    fn flipped<E: Engine>(engine: &E, addr: &Address) -> Value {
        match engine.choice_state(addr) {
            Some((_, Value::Bool(b))) => Value::Bool(!b),
            other => panic!("expected a boolean choice, got {other:?}"),
        }
    }

    #[test]
    fn initial_run_commits_a_consistent_trace() {
        let (engine, _) = initialized(lightweight(BRANCHING), 1);
        assert_eq!(engine.num_choices(), 2);
        assert!(engine.total_score().is_finite());
        assert!(engine.final_value().is_some());
        engine.check_integrity().unwrap();
        let query = engine.query_writes();
        assert_eq!(query.len(), 1);
        assert_eq!(query[0].1.to_string(), "\"b\"");
    }

    #[test]
    fn rejecting_a_proposal_restores_the_exact_trace() {
        let (mut engine, mut rng) = initialized(lightweight(BRANCHING), 2);
        let before = trace_summary(&engine);
        let target = bernoulli_addr(&engine);
        let value = flipped(&engine, &target);
        engine.propose(&target, value, &mut rng).unwrap();
        engine.rollback();
        engine.check_integrity().unwrap();
        assert_eq!(trace_summary(&engine), before);
    }

    #[test]
    fn accepting_a_branch_flip_swaps_exactly_one_choice() {
        let (mut engine, mut rng) = initialized(lightweight(BRANCHING), 3);
        let before: Vec<Address> = engine.choice_addrs();
        let total = engine.total_score();
        let target = bernoulli_addr(&engine);
        let value = flipped(&engine, &target);
        engine.propose(&target, value, &mut rng).unwrap();
        let summary = fold_deltas(total, engine.staged_deltas());
        // One gaussian was removed, another created.
        assert!(summary.removed_logp != 0.0);
        assert!(summary.fresh_logp != 0.0);
        engine.commit(summary.new_total);
        engine.check_integrity().unwrap();
        let after = engine.choice_addrs();
        assert_eq!(after.len(), 2);
        let kept: Vec<_> = after.iter().filter(|a| before.contains(a)).collect();
        assert_eq!(kept.len(), 1, "only the flip itself survives");
        assert_eq!(kept[0], &target);
    }

    #[test]
    fn resuming_preserves_untouched_upstream_choices() {
        let (mut engine, mut rng) = initialized(cps(UPSTREAM), 4);
        let before = engine.choice_addrs();
        assert_eq!(before.len(), 3);
        let target = bernoulli_addr(&engine);
        let z = before.iter().min().unwrap().clone();
        assert!(z < target, "first draw has the smallest address");
        let total = engine.total_score();
        let value = flipped(&engine, &target);
        engine.propose(&target, value, &mut rng).unwrap();
        let summary = fold_deltas(total, engine.staged_deltas());
        engine.commit(summary.new_total);
        engine.check_integrity().unwrap();
        let after = engine.choice_addrs();
        assert_eq!(after.len(), 3);
        assert!(after.contains(&z), "upstream draw was never stale");
        assert!(after.contains(&target));
        let survivors = after.iter().filter(|a| before.contains(a)).count();
        assert_eq!(survivors, 2, "the old branch gaussian was swept");
    }

    #[test]
    fn resuming_runs_fewer_bodies_than_re_executing() {
        let (mut lw, mut lw_rng) = initialized(lightweight(CHAIN), 5);
        let (mut cp, mut cp_rng) = initialized(cps(CHAIN), 5);
        // Same seed, same draw discipline: the traces agree.
        assert_eq!(trace_summary(&lw), trace_summary(&cp));

        // Deepest choice = longest address.
        let target = cp
            .choice_addrs()
            .into_iter()
            .max_by_key(|a| a.components().len())
            .unwrap();
        let value = flipped(&cp, &target);

        let lw_before = lw.counters().bodies_executed;
        lw.propose(&target, value.clone(), &mut lw_rng).unwrap();
        lw.rollback();
        let lw_cost = lw.counters().bodies_executed - lw_before;

        let cp_before = cp.counters().bodies_executed;
        cp.propose(&target, value, &mut cp_rng).unwrap();
        cp.rollback();
        let cp_cost = cp.counters().bodies_executed - cp_before;

        assert_eq!(lw_cost, 13, "full re-run enters every recursive call");
        assert!(
            cp_cost <= 2,
            "resume at the deepest choice runs at most the tail call, got {cp_cost}"
        );
    }

    #[test]
    fn every_choice_has_a_usable_continuation() {
        let (mut engine, mut rng) = initialized(cps(CHAIN), 6);
        for target in engine.choice_addrs() {
            let value = flipped(&engine, &target);
            engine.propose(&target, value, &mut rng).unwrap();
            engine.rollback();
            engine.check_integrity().unwrap();
        }
    }

    #[test]
    fn proposing_a_dead_address_fails_cleanly() {
        let (mut engine, mut rng) = initialized(lightweight(BRANCHING), 7);
        let bogus = Address::root().extend(9999);
        assert!(engine.propose(&bogus, Value::Bool(true), &mut rng).is_err());
        engine.rollback();
        engine.check_integrity().unwrap();
    }
}
