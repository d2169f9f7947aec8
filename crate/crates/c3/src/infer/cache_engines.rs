//! Cache-backed execution strategies.
//!
//! Both strategies here keep the trace as the call tree of
//! [`crate::cachert::Cache`], so equal-input calls can reuse recorded return
//! values. The **caching** strategy still re-runs proposals from the top of
//! the program (its savings come from entry short-circuits along the way);
//! the **c3** strategy also stores each choice's continuation and resumes
//! proposals from the changed choice, with unchanged call exits able to stop
//! the run early.
//!
//! A proposal that re-runs from the top must not reuse the calls *enclosing*
//! the changed choice — their recorded inputs are unchanged but their bodies
//! now behave differently. Those callsites are forced to run by address
//! (computed from the target's ancestor chain before the pass starts).

use std::collections::HashSet;
use std::rc::Rc;

use crate::cachert::{Cache, Enter, Exit, ScoreDelta};
use crate::erp::{ChainRng, ErpParams};
use crate::lang::addr::Address;
use crate::lang::ast::{ErpKind, SourceId};
use crate::lang::eval::RuntimeError;
use crate::lang::value::{ClosureData, NodeId, Value};
use crate::lang::{
    CallAction, DirectHooks, EnterAction, Evaluator, ExitAction, Machine, MachineHooks, Outcome,
    Program,
};
use crate::transform;

use super::mh::{Engine, EngineCounters};
use super::eval_preamble;

// ═══════════════════════════════════════════════════════════════════════
// Hook adapters

struct CacheDirectHooks<'a> {
    cache: &'a mut Cache,
    rng: &'a mut ChainRng,
    /// Call addresses on the path from the root to the proposal target;
    /// these must run even when their recorded inputs match.
    forced: &'a HashSet<Address>,
}

impl DirectHooks for CacheDirectHooks<'_> {
    fn sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
    ) -> Result<Value, RuntimeError> {
        self.cache.visit_choice(addr, erp, params, None, self.rng)
    }

    fn observe(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError> {
        self.cache.visit_observe(addr, erp, params, observed)
    }

    fn query_add(&mut self, addr: &Address, key: &Value, value: &Value) -> Result<(), RuntimeError> {
        self.cache.visit_query(addr, key, value)
    }

    fn call_enter(
        &mut self,
        callsite: SourceId,
        addr: &Address,
        callee: &Rc<ClosureData>,
        args: &[Value],
    ) -> Result<EnterAction, RuntimeError> {
        let forced = self.forced.contains(addr);
        Ok(
            match self.cache.enter_call(callsite, addr, callee, args, None, forced)? {
                Enter::Run(_) => EnterAction::Run,
                Enter::Reuse(v) => EnterAction::Reuse(v),
                Enter::Bypass => EnterAction::Bypass,
            },
        )
    }

    fn call_exit(&mut self, retval: &Value) -> Result<(), RuntimeError> {
        // Without continuations there is nothing to cut short; the exit only
        // updates the cache. The direct evaluator keeps its own value.
        match self.cache.exit_call(None, retval, false)? {
            Exit::Continue { .. } => Ok(()),
            Exit::ShortCircuit => Err(RuntimeError::Internal(
                "short-circuit from a full re-run".into(),
            )),
        }
    }
}

struct CacheMachineHooks<'a> {
    cache: &'a mut Cache,
    rng: &'a mut ChainRng,
}

impl MachineHooks for CacheMachineHooks<'_> {
    fn sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        kont: &Value,
    ) -> Result<Value, RuntimeError> {
        self.cache
            .visit_choice(addr, erp, params, Some(kont.clone()), self.rng)
    }

    fn observe(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError> {
        self.cache.visit_observe(addr, erp, params, observed)
    }

    fn query_add(&mut self, addr: &Address, key: &Value, value: &Value) -> Result<(), RuntimeError> {
        self.cache.visit_query(addr, key, value)
    }

    fn call_enter(
        &mut self,
        callsite: SourceId,
        addr: &Address,
        callee: &Rc<ClosureData>,
        args: &[Value],
        kont: &Value,
    ) -> Result<CallAction, RuntimeError> {
        Ok(
            match self.cache.enter_call(callsite, addr, callee, args, Some(kont), false)? {
                Enter::Run(node) => CallAction::Run(node),
                Enter::Reuse(v) => CallAction::Reuse(v),
                Enter::Bypass => CallAction::Bypass,
            },
        )
    }

    fn call_exit(&mut self, node: NodeId, retval: &Value) -> Result<ExitAction, RuntimeError> {
        Ok(match self.cache.exit_call(Some(node), retval, true)? {
            Exit::Continue { value, kont } => ExitAction::Continue(value, kont),
            Exit::ShortCircuit => ExitAction::ShortCircuit,
        })
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Caching: full re-execution against the call tree

pub struct CachingEngine {
    main: Rc<crate::lang::Expr>,
    env: crate::lang::Env,
    cache: Cache,
    bodies: u64,
}

impl CachingEngine {
    pub fn new(prog: &Program, adaptive: bool) -> Result<Self, RuntimeError> {
        let transformed = transform::transform_for(prog, transform::Engine::Caching);
        let (env, main) = eval_preamble(&transformed)?;
        Ok(Self {
            main,
            env,
            cache: Cache::new(adaptive),
            bodies: 0,
        })
    }

    fn run_full(&mut self, rng: &mut ChainRng, forced: &HashSet<Address>) -> Result<Value, RuntimeError> {
        let mut hooks = CacheDirectHooks {
            cache: &mut self.cache,
            rng,
            forced,
        };
        let mut ev = Evaluator::new(&mut hooks);
        let v = ev.eval(&self.main, &self.env)?;
        self.bodies += ev.stats.bodies_executed;
        Ok(v)
    }
}

impl Engine for CachingEngine {
    fn name(&self) -> &'static str {
        "caching"
    }

    fn initial_run(&mut self, rng: &mut ChainRng) -> Result<(), RuntimeError> {
        let forced = HashSet::new();
        let v = self.run_full(rng, &forced)?;
        self.cache.finish_pass(v);
        Ok(())
    }

    fn num_choices(&self) -> usize {
        self.cache.choices.len()
    }

    fn choice_addrs(&self) -> Vec<Address> {
        self.cache.choices.sorted()
    }

    fn pick_target(&self, u: f64, deterministic: bool) -> Option<Address> {
        self.cache.choices.pick(u, deterministic)
    }

    fn choice_state(&self, addr: &Address) -> Option<(ErpParams, Value)> {
        self.cache.choice_state(addr)
    }

    fn total_score(&self) -> f64 {
        self.cache.total_score()
    }

    fn propose(
        &mut self,
        target: &Address,
        value: Value,
        rng: &mut ChainRng,
    ) -> Result<(), RuntimeError> {
        self.cache.adaptive.begin_proposal();
        self.cache.stage_choice_value(target, value)?;
        let forced: HashSet<Address> = self.cache.ancestor_call_addrs(target).into_iter().collect();
        self.cache.begin_full_pass();
        let v = self.run_full(rng, &forced)?;
        self.cache.finish_pass(v);
        Ok(())
    }

    fn staged_deltas(&self) -> Vec<ScoreDelta> {
        self.cache.proposal_deltas()
    }

    fn commit(&mut self, new_total: f64) {
        self.cache.commit(new_total);
    }

    fn rollback(&mut self) {
        self.cache.rollback();
    }

    fn final_value(&self) -> Option<Value> {
        self.cache.final_value().cloned()
    }

    fn query_writes(&self) -> Vec<(Address, Value, Value)> {
        self.cache.query_writes()
    }

    fn counters(&self) -> EngineCounters {
        cache_counters(&self.cache, self.bodies)
    }

    fn check_integrity(&self) -> Result<(), String> {
        self.cache.check_consistency()
    }
}

// ═══════════════════════════════════════════════════════════════════════
// C3: resume-from-continuation against the call tree

pub struct C3Engine {
    main: Rc<crate::lang::Expr>,
    env: crate::lang::Env,
    cache: Cache,
    bodies: u64,
}

impl C3Engine {
    pub fn new(prog: &Program, adaptive: bool) -> Result<Self, RuntimeError> {
        let transformed = transform::transform_for(prog, transform::Engine::C3);
        let (env, main) = eval_preamble(&transformed)?;
        Ok(Self {
            main,
            env,
            cache: Cache::new(adaptive),
            bodies: 0,
        })
    }
}

impl Engine for C3Engine {
    fn name(&self) -> &'static str {
        "c3"
    }

    fn initial_run(&mut self, rng: &mut ChainRng) -> Result<(), RuntimeError> {
        let outcome = {
            let mut hooks = CacheMachineHooks {
                cache: &mut self.cache,
                rng,
            };
            let mut machine = Machine::new(&mut hooks);
            let out = machine.run(&self.main, &self.env)?;
            self.bodies += machine.stats.bodies_executed;
            out
        };
        match outcome {
            Outcome::Finished(v) => {
                self.cache.finish_pass(v);
                Ok(())
            }
            Outcome::EarlyExit => Err(RuntimeError::Internal(
                "initial run ended in a short-circuit".into(),
            )),
        }
    }

    fn num_choices(&self) -> usize {
        self.cache.choices.len()
    }

    fn choice_addrs(&self) -> Vec<Address> {
        self.cache.choices.sorted()
    }

    fn pick_target(&self, u: f64, deterministic: bool) -> Option<Address> {
        self.cache.choices.pick(u, deterministic)
    }

    fn choice_state(&self, addr: &Address) -> Option<(ErpParams, Value)> {
        self.cache.choice_state(addr)
    }

    fn total_score(&self) -> f64 {
        self.cache.total_score()
    }

    fn propose(
        &mut self,
        target: &Address,
        value: Value,
        rng: &mut ChainRng,
    ) -> Result<(), RuntimeError> {
        self.cache.adaptive.begin_proposal();
        self.cache.stage_choice_value(target, value.clone())?;
        let kont = self.cache.begin_resume(target)?;
        let outcome = {
            let mut hooks = CacheMachineHooks {
                cache: &mut self.cache,
                rng,
            };
            let mut machine = Machine::new(&mut hooks);
            let out = machine.resume(kont, value)?;
            self.bodies += machine.stats.bodies_executed;
            out
        };
        match outcome {
            Outcome::Finished(v) => {
                self.cache.finish_pass(v);
                Ok(())
            }
            // The run stopped at an exit whose return value matched the
            // previous pass: everything above it is untouched, including the
            // recorded final value.
            Outcome::EarlyExit => Ok(()),
        }
    }

    fn staged_deltas(&self) -> Vec<ScoreDelta> {
        self.cache.proposal_deltas()
    }

    fn commit(&mut self, new_total: f64) {
        self.cache.commit(new_total);
    }

    fn rollback(&mut self) {
        self.cache.rollback();
    }

    fn final_value(&self) -> Option<Value> {
        self.cache.final_value().cloned()
    }

    fn query_writes(&self) -> Vec<(Address, Value, Value)> {
        self.cache.query_writes()
    }

    fn counters(&self) -> EngineCounters {
        cache_counters(&self.cache, self.bodies)
    }

    fn check_integrity(&self) -> Result<(), String> {
        self.cache.check_consistency()
    }
}

fn cache_counters(cache: &Cache, bodies: u64) -> EngineCounters {
    EngineCounters {
        bodies_executed: bodies,
        entry_shortcircuits: cache.counters.entry_shortcircuits,
        exit_shortcircuits: cache.counters.exit_shortcircuits,
        cached_runs: cache.counters.cached_runs,
        bypassed_calls: cache.counters.bypassed_calls,
        nodes_created: cache.counters.nodes_created,
        uncached_sites: cache.adaptive.uncached_count() as u64,
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cachert::fold_deltas;
    use crate::erp::ErpParams;
    use crate::infer::mh::{run_chain, trace_summary, ChainOptions, Engine};
    use crate::lang::parse_program;
    use rand::SeedableRng;

    const TWO_BLOCKS: &str = "
        (define blk (lambda (mu) (let (x (sample gaussian mu 1.0)) x)))
        (+ (blk 0.0) (blk 10.0))";

    const NOISY_CONST: &str = "
        (define noisy (lambda () (let (x (sample bernoulli 0.5)) 42)))
        (let (a (noisy))
          (let (y (sample gaussian 0.0 1.0))
            (+ a 0)))";

    const CHAIN: &str = "
        (define step (lambda (i n acc)
          (if (< i n)
              (step (+ i 1) n (+ acc (if (sample bernoulli 0.5) 1 0)))
              acc)))
        (step 0 8 0)";

    /// Same shape, continuous draws: a redrawn gaussian almost never equals
    /// the old value, so downstream call inputs change on every proposal and
    /// the recursive callsite never earns a reuse.
    const GCHAIN: &str = "
        (define step (lambda (i n acc)
          (if (< i n)
              (step (+ i 1) n (+ acc (sample gaussian 0.0 1.0)))
              acc)))
        (step 0 8 0.0)";

    fn caching(src: &str, adaptive: bool) -> CachingEngine {
        CachingEngine::new(&parse_program(src).unwrap(), adaptive).unwrap()
    }

    fn c3(src: &str, adaptive: bool) -> C3Engine {
        C3Engine::new(&parse_program(src).unwrap(), adaptive).unwrap()
    }

    fn initialized<E: Engine>(mut engine: E, seed: u64) -> (E, ChainRng) {
        let mut rng = ChainRng::seed_from_u64(seed);
        engine.initial_run(&mut rng).unwrap();
        let summary = fold_deltas(0.0, engine.staged_deltas());
        engine.commit(summary.new_total);
        (engine, rng)
    }

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
    fn an_unchanged_sibling_call_is_reused_not_rerun() {
        let (mut engine, mut rng) = initialized(caching(TWO_BLOCKS, false), 11);
        let choices = engine.choice_addrs();
        assert_eq!(choices.len(), 2);
        // Propose at the first block's draw; the second block's inputs are
        // untouched and its recorded value must be reused.
        let target = choices.into_iter().min().unwrap();
        let (params, old) = engine.choice_state(&target).unwrap();
        let value = match (&params, &old) {
            (ErpParams::Gaussian { .. }, Value::Num(x)) => Value::Num(x + 1.0),
            other => panic!("unexpected draw {other:?}"),
        };
        let before = engine.counters();
        let total = engine.total_score();
        engine.propose(&target, value, &mut rng).unwrap();
        let cost = engine.counters().since(&before);
        assert_eq!(cost.entry_shortcircuits, 1, "the sibling block is reused");
        assert_eq!(cost.bodies_executed, 1, "only the forced block re-runs");
        let summary = fold_deltas(total, engine.staged_deltas());
        engine.commit(summary.new_total);
        engine.check_integrity().unwrap();
    }

    #[test]
    fn an_unchanged_return_value_stops_the_resumed_run() {
        let (mut engine, mut rng) = initialized(c3(NOISY_CONST, false), 12);
        let target = bernoulli_addr(&engine);
        let value = flipped(&engine, &target);
        let final_before = engine.final_value().unwrap().to_string();
        let before = engine.counters();
        let total = engine.total_score();
        engine.propose(&target, value, &mut rng).unwrap();
        let cost = engine.counters().since(&before);
        assert_eq!(cost.exit_shortcircuits, 1, "the call returns 42 either way");
        assert_eq!(cost.bodies_executed, 0, "no call body re-ran");
        // A fair flip scores identically on both sides: nothing staged.
        assert!(engine.staged_deltas().is_empty());
        let summary = fold_deltas(total, engine.staged_deltas());
        engine.commit(summary.new_total);
        engine.check_integrity().unwrap();
        assert_eq!(engine.final_value().unwrap().to_string(), final_before);
    }

    #[test]
    fn rejecting_a_cached_proposal_restores_the_exact_trace() {
        for adaptive in [false, true] {
            let (mut engine, mut rng) = initialized(c3(CHAIN, adaptive), 13);
            let before = trace_summary(&engine);
            let target = bernoulli_addr(&engine);
            let value = flipped(&engine, &target);
            engine.propose(&target, value, &mut rng).unwrap();
            engine.rollback();
            engine.check_integrity().unwrap();
            assert_eq!(trace_summary(&engine), before);
        }
    }

    #[test]
    fn chains_run_clean_under_both_cache_strategies() {
        let opts = ChainOptions {
            steps: 120,
            seed: 14,
            integrity_every: Some(20),
            ..ChainOptions::default()
        };
        let (mut a, _) = (caching(CHAIN, false), ());
        let ra = run_chain(&mut a, &opts).unwrap();
        assert_eq!(ra.steps_attempted, 120);
        a.check_integrity().unwrap();

        let mut b = c3(CHAIN, false);
        let rb = run_chain(&mut b, &opts).unwrap();
        assert_eq!(rb.steps_attempted, 120);
        b.check_integrity().unwrap();
        assert!(rb.counters.exit_shortcircuits > 0 || rb.counters.entry_shortcircuits > 0);
    }

    #[test]
    fn a_fruitless_callsite_is_eventually_uncached() {
        let opts = ChainOptions {
            steps: 300,
            seed: 15,
            integrity_every: Some(50),
            ..ChainOptions::default()
        };
        let mut engine = caching(GCHAIN, true);
        let result = run_chain(&mut engine, &opts).unwrap();
        assert!(
            result.counters.uncached_sites >= 1,
            "the accumulator-threading callsite never reuses and must demote"
        );
        assert!(result.counters.bypassed_calls > 0);
        engine.check_integrity().unwrap();
    }

    #[test]
    fn c3_chains_stay_consistent_with_adaptive_uncaching() {
        let opts = ChainOptions {
            steps: 300,
            seed: 16,
            integrity_every: Some(25),
            ..ChainOptions::default()
        };
        let mut engine = c3(GCHAIN, true);
        let result = run_chain(&mut engine, &opts).unwrap();
        assert_eq!(result.steps_attempted, 300);
        assert!(result.counters.uncached_sites >= 1);
        engine.check_integrity().unwrap();
    }
}
