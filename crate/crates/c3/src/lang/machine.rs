//! Trampolined machine for continuation-passing programs.
//!
//! The direct evaluator in [`super::eval`] recurses through the expression
//! tree, so a proposal must re-run a program from the top. This machine
//! instead executes the output of the CPS pass: control flow is reified as
//! continuation values, every step is a loop iteration (no machine-stack
//! growth, however deep the user recursion), and a run can *start* from any
//! previously captured continuation — which is exactly how
//! continuation-based proposals resume from the changed choice instead of
//! from the program entry.
//!
//! Cached calls are routed through [`MachineHooks::call_enter`]. When the
//! hook asks for the body to run, the machine wraps the call's continuation
//! in an exit record ([`Value::ExitK`]); when the body's result later flows
//! into that record, [`MachineHooks::call_exit`] gets a chance to update the
//! cache and — if nothing downstream of the call can have changed — stop the
//! whole run early ([`Outcome::EarlyExit`]).

use std::rc::Rc;

use super::addr::Address;
use super::ast::{ErpKind, Expr, SourceId};
use super::eval::{apply_prim, bind_call_env, expect_bool, make_closure, EvalStats};
use super::eval::RuntimeError;
use super::value::{env_bind, env_lookup, ClosureData, Env, ExitKData, NodeId, Value};

// ═══════════════════════════════════════════════════════════════════════
// Hooks
// ═══════════════════════════════════════════════════════════════════════

/// What a cached call should do, decided at entry.
#[derive(Debug, Clone)]
pub enum CallAction {
    /// Execute the body; the continuation is wrapped so that `call_exit`
    /// runs for `node` when the body finishes.
    Run(NodeId),
    /// Skip the body entirely and continue with this value.
    Reuse(Value),
    /// Execute the body with no cache bookkeeping (the callsite has been
    /// uncached at runtime).
    Bypass,
}

/// What to do when a cached call's body has produced `retval`.
#[derive(Debug, Clone)]
pub enum ExitAction {
    /// Keep going, passing the value to the supplied continuation when one
    /// is given, else to the call's lexically captured one. Cache engines
    /// supply the continuation from the call's latest *visit*: when a
    /// resumed proposal unwinds out of a call whose body hasn't re-run for
    /// a while, the captured continuation is exactly that stale body's, and
    /// upstream values pending inside it may have changed since.
    Continue(Value, Option<Value>),
    /// Nothing downstream can differ from the previous run: stop now.
    ShortCircuit,
}

/// Runtime callbacks for probabilistic effects and the call cache.
pub trait MachineHooks {
    /// Produce the value of the random choice at `addr`. `kont` is the
    /// choice's continuation; continuation-based engines store it so a later
    /// proposal can resume from this exact point.
    fn sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        kont: &Value,
    ) -> Result<Value, RuntimeError>;

    fn observe(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
        observed: &Value,
    ) -> Result<(), RuntimeError>;

    fn query_add(
        &mut self,
        addr: &Address,
        key: &Value,
        value: &Value,
    ) -> Result<(), RuntimeError>;

    /// Intercepts a cached call before the callee's body runs. `kont` is the
    /// call's continuation; cache engines store it on the call's record on
    /// every visit so unwinding always returns into current values.
    fn call_enter(
        &mut self,
        callsite: SourceId,
        addr: &Address,
        callee: &Rc<ClosureData>,
        args: &[Value],
        kont: &Value,
    ) -> Result<CallAction, RuntimeError>;

    /// Runs when the body started by `CallAction::Run(node)` finishes.
    fn call_exit(&mut self, node: NodeId, retval: &Value) -> Result<ExitAction, RuntimeError>;
}

/// Hooks for deterministic continuation-passing code: effects are errors and
/// cached calls run as plain calls.
pub struct NoMachineHooks;

impl MachineHooks for NoMachineHooks {
    fn sample(
        &mut self,
        _addr: &Address,
        _erp: ErpKind,
        _params: &[Value],
        _kont: &Value,
    ) -> Result<Value, RuntimeError> {
        Err(RuntimeError::Internal(
            "sample outside an inference run".into(),
        ))
    }

    fn observe(
        &mut self,
        _addr: &Address,
        _erp: ErpKind,
        _params: &[Value],
        _observed: &Value,
    ) -> Result<(), RuntimeError> {
        Err(RuntimeError::Internal(
            "observe outside an inference run".into(),
        ))
    }

    fn query_add(
        &mut self,
        _addr: &Address,
        _key: &Value,
        _value: &Value,
    ) -> Result<(), RuntimeError> {
        Err(RuntimeError::Internal(
            "query-add outside an inference run".into(),
        ))
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

    fn call_exit(&mut self, _node: NodeId, retval: &Value) -> Result<ExitAction, RuntimeError> {
        Ok(ExitAction::Continue(retval.clone(), None))
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Machine
// ═══════════════════════════════════════════════════════════════════════

/// How a machine run ended.
#[derive(Debug, Clone)]
pub enum Outcome {
    /// The program's halt continuation received this value.
    Finished(Value),
    /// A cache exit proved the rest of the run redundant and stopped it.
    EarlyExit,
}

enum Step {
    /// Evaluate a tail expression.
    Eval { expr: Rc<Expr>, env: Env },
    /// Apply a continuation value to a result.
    Invoke { kont: Value, value: Value },
}

pub struct Machine<'h, H: MachineHooks> {
    hooks: &'h mut H,
    pub stats: EvalStats,
}

impl<'h, H: MachineHooks> Machine<'h, H> {
    pub fn new(hooks: &'h mut H) -> Self {
        Machine {
            hooks,
            stats: EvalStats::default(),
        }
    }

    /// Runs a tail expression (normally the transformed program's main
    /// expression, with `_addr` and `_k` bound by the initial environment).
    pub fn run(&mut self, expr: &Rc<Expr>, env: &Env) -> Result<Outcome, RuntimeError> {
        self.trampoline(Step::Eval {
            expr: expr.clone(),
            env: env.clone(),
        })
    }

    /// Resumes a previously captured continuation with a (possibly new)
    /// value for the point that captured it.
    pub fn resume(&mut self, kont: Value, value: Value) -> Result<Outcome, RuntimeError> {
        self.trampoline(Step::Invoke { kont, value })
    }

    fn trampoline(&mut self, start: Step) -> Result<Outcome, RuntimeError> {
        let mut step = start;
        loop {
            step = match step {
                Step::Eval { expr, env } => match self.eval_tail(&expr, env)? {
                    Transfer::Step(next) => next,
                    Transfer::Done(outcome) => return Ok(outcome),
                },
                Step::Invoke { kont, value } => match self.invoke(kont, value)? {
                    Transfer::Step(next) => next,
                    Transfer::Done(outcome) => return Ok(outcome),
                },
            };
        }
    }

    fn invoke(&mut self, kont: Value, value: Value) -> Result<Transfer, RuntimeError> {
        match kont {
            Value::HaltK => Ok(Transfer::Done(Outcome::Finished(value))),
            Value::ExitK(exit) => match self.hooks.call_exit(exit.node, &value)? {
                ExitAction::Continue(v, k) => Ok(Transfer::Step(Step::Invoke {
                    kont: k.unwrap_or_else(|| exit.k.clone()),
                    value: v,
                })),
                ExitAction::ShortCircuit => Ok(Transfer::Done(Outcome::EarlyExit)),
            },
            Value::Closure(c) if c.lambda.is_kont => {
                // Continuation bodies are sequencing plumbing, not user
                // function bodies: they don't count as executed nodes.
                let env = bind_call_env(&c, vec![value], None, None)?;
                Ok(Transfer::Step(Step::Eval {
                    expr: c.lambda.body.clone(),
                    env,
                }))
            }
            other => Err(RuntimeError::Internal(format!(
                "continuation position held a {}",
                other.type_name()
            ))),
        }
    }

    fn eval_tail(&mut self, expr: &Rc<Expr>, env: Env) -> Result<Transfer, RuntimeError> {
        match expr.as_ref() {
            Expr::Let(l) => {
                let bound = if l.recursive {
                    match l.bound.as_ref() {
                        Expr::Lambda(lambda) => make_closure(lambda, &env, Some(l.name.clone()))?,
                        _ => {
                            return Err(RuntimeError::Internal(
                                "recursive binding is not a lambda".into(),
                            ))
                        }
                    }
                } else {
                    self.eval_trivial(&l.bound, &env)?
                };
                Ok(Transfer::Step(Step::Eval {
                    expr: l.body.clone(),
                    env: env_bind(&env, l.name.clone(), bound),
                }))
            }
            Expr::If(i) => {
                let cond = self.eval_trivial(&i.cond, &env)?;
                let branch = if expect_bool(&cond, "if condition")? {
                    &i.then_branch
                } else {
                    &i.else_branch
                };
                Ok(Transfer::Step(Step::Eval {
                    expr: branch.clone(),
                    env,
                }))
            }
            Expr::Apply(a) => {
                let callee = self.eval_trivial(&a.callee, &env)?;
                let mut args = Vec::with_capacity(a.args.len());
                for arg in &a.args {
                    args.push(self.eval_trivial(arg, &env)?);
                }
                match (&a.kont, &a.addr) {
                    (None, None) => {
                        // Continuation application.
                        if args.len() != 1 {
                            return Err(RuntimeError::Internal(format!(
                                "continuation applied to {} values",
                                args.len()
                            )));
                        }
                        Ok(Transfer::Step(Step::Invoke {
                            kont: callee,
                            value: args.pop().expect("one argument"),
                        }))
                    }
                    (Some(kont_expr), addr_expr) => {
                        let c = match callee {
                            Value::Closure(c) if !c.lambda.is_kont => c,
                            other => {
                                return Err(RuntimeError::NotAFunction(
                                    other.type_name().to_string(),
                                ))
                            }
                        };
                        let addr = match addr_expr {
                            Some(e) => match self.eval_trivial(e, &env)? {
                                Value::Addr(addr) => addr,
                                other => {
                                    return Err(RuntimeError::Type {
                                        expected: "address",
                                        got: other.type_name().to_string(),
                                        context: "call path",
                                    })
                                }
                            },
                            None => Address::root(),
                        };
                        let kont = self.eval_trivial(kont_expr, &env)?;
                        self.enter_call(a.callsite, a.cached, c, args, addr, kont)
                    }
                    (None, Some(_)) => Err(RuntimeError::Internal(
                        "addressed call without a continuation".into(),
                    )),
                }
            }
            Expr::Sample(s) => {
                let mut params = Vec::with_capacity(s.params.len());
                for p in &s.params {
                    params.push(self.eval_trivial(p, &env)?);
                }
                let addr = self.eval_addr(&s.addr, &env)?;
                let kont = self.eval_kont(&s.kont, &env)?;
                let value = self.hooks.sample(&addr, s.erp, &params, &kont)?;
                Ok(Transfer::Step(Step::Invoke { kont, value }))
            }
            Expr::Observe(o) => {
                let mut params = Vec::with_capacity(o.params.len());
                for p in &o.params {
                    params.push(self.eval_trivial(p, &env)?);
                }
                let observed = self.eval_trivial(&o.observed, &env)?;
                let addr = self.eval_addr(&o.addr, &env)?;
                let kont = self.eval_kont(&o.kont, &env)?;
                self.hooks.observe(&addr, o.erp, &params, &observed)?;
                // An observation evaluates to the observed value.
                Ok(Transfer::Step(Step::Invoke {
                    kont,
                    value: observed,
                }))
            }
            Expr::QueryAdd(q) => {
                let key = self.eval_trivial(&q.key, &env)?;
                let value = self.eval_trivial(&q.value, &env)?;
                let addr = self.eval_addr(&q.addr, &env)?;
                let kont = self.eval_kont(&q.kont, &env)?;
                self.hooks.query_add(&addr, &key, &value)?;
                Ok(Transfer::Step(Step::Invoke { kont, value }))
            }
            other => Err(RuntimeError::Internal(format!(
                "non-tail expression in tail position: {}",
                describe(other)
            ))),
        }
    }

    fn enter_call(
        &mut self,
        callsite: SourceId,
        cached: bool,
        c: Rc<ClosureData>,
        args: Vec<Value>,
        addr: Address,
        kont: Value,
    ) -> Result<Transfer, RuntimeError> {
        if cached {
            match self.hooks.call_enter(callsite, &addr, &c, &args, &kont)? {
                CallAction::Run(node) => {
                    self.stats.bodies_executed += 1;
                    let wrapped = Value::ExitK(Rc::new(ExitKData { node, k: kont }));
                    let env = bind_call_env(&c, args, Some(addr), Some(wrapped))?;
                    Ok(Transfer::Step(Step::Eval {
                        expr: c.lambda.body.clone(),
                        env,
                    }))
                }
                CallAction::Reuse(value) => Ok(Transfer::Step(Step::Invoke { kont, value })),
                CallAction::Bypass => {
                    self.stats.bodies_executed += 1;
                    let env = bind_call_env(&c, args, Some(addr), Some(kont))?;
                    Ok(Transfer::Step(Step::Eval {
                        expr: c.lambda.body.clone(),
                        env,
                    }))
                }
            }
        } else {
            self.stats.bodies_executed += 1;
            let env = bind_call_env(&c, args, Some(addr), Some(kont))?;
            Ok(Transfer::Step(Step::Eval {
                expr: c.lambda.body.clone(),
                env,
            }))
        }
    }

    fn eval_addr(&mut self, addr: &Option<Rc<Expr>>, env: &Env) -> Result<Address, RuntimeError> {
        match addr {
            None => Ok(Address::root()),
            Some(e) => match self.eval_trivial(e, env)? {
                Value::Addr(a) => Ok(a),
                other => Err(RuntimeError::Type {
                    expected: "address",
                    got: other.type_name().to_string(),
                    context: "call path",
                }),
            },
        }
    }

    fn eval_kont(&mut self, kont: &Option<Rc<Expr>>, env: &Env) -> Result<Value, RuntimeError> {
        match kont {
            Some(e) => self.eval_trivial(e, env),
            None => Err(RuntimeError::Internal(
                "effect without a continuation reached the machine".into(),
            )),
        }
    }

    /// Evaluates a trivial expression — one the CPS pass guarantees contains
    /// no calls or effects outside nested lambda bodies. Plain recursion is
    /// fine here: trivial expressions are small by construction.
    fn eval_trivial(&mut self, expr: &Rc<Expr>, env: &Env) -> Result<Value, RuntimeError> {
        match expr.as_ref() {
            Expr::Literal(lit) => Ok(Value::from_lit(lit)),
            Expr::Var(name) => {
                env_lookup(env, name).ok_or_else(|| RuntimeError::Unbound(name.to_string()))
            }
            Expr::Lambda(l) => make_closure(l, env, None),
            Expr::Prim(p) => {
                let mut args = Vec::with_capacity(p.args.len());
                for a in &p.args {
                    args.push(self.eval_trivial(a, env)?);
                }
                apply_prim(p.op, &args)
            }
            Expr::If(i) => {
                let cond = self.eval_trivial(&i.cond, env)?;
                if expect_bool(&cond, "if condition")? {
                    self.eval_trivial(&i.then_branch, env)
                } else {
                    self.eval_trivial(&i.else_branch, env)
                }
            }
            Expr::Let(l) => {
                let bound = if l.recursive {
                    match l.bound.as_ref() {
                        Expr::Lambda(lambda) => make_closure(lambda, env, Some(l.name.clone()))?,
                        _ => {
                            return Err(RuntimeError::Internal(
                                "recursive binding is not a lambda".into(),
                            ))
                        }
                    }
                } else {
                    self.eval_trivial(&l.bound, env)?
                };
                self.eval_trivial(&l.body, &env_bind(env, l.name.clone(), bound))
            }
            other => Err(RuntimeError::Internal(format!(
                "serious expression in trivial position: {}",
                describe(other)
            ))),
        }
    }
}

enum Transfer {
    Step(Step),
    Done(Outcome),
}

fn describe(e: &Expr) -> &'static str {
    match e {
        Expr::Literal(_) => "literal",
        Expr::Var(_) => "variable",
        Expr::Lambda(_) => "lambda",
        Expr::Apply(_) => "application",
        Expr::If(_) => "if",
        Expr::Let(_) => "let",
        Expr::Prim(_) => "primitive",
        Expr::Sample(_) => "sample",
        Expr::Observe(_) => "observe",
        Expr::QueryAdd(_) => "query-add",
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::eval::{initial_env, DirectHooks, EnterAction, Evaluator};
    use crate::lang::parse::parse_program;
    use crate::transform::{transform_for, Engine};

    fn run_cps(src: &str) -> (Value, u64) {
        let prog = parse_program(src).unwrap();
        let prog = transform_for(&prog, Engine::Cps);
        let mut hooks = NoMachineHooks;
        let mut m = Machine::new(&mut hooks);
        match m.run(&prog.body, &initial_env()).unwrap() {
            Outcome::Finished(v) => (v, m.stats.bodies_executed),
            Outcome::EarlyExit => panic!("early exit without a cache"),
        }
    }

    #[test]
    fn factorial_runs_to_completion() {
        let (v, bodies) = run_cps(
            "(define fact (lambda (n) (if (= n 0) 1 (* n (fact (- n 1))))))
             (fact 5)",
        );
        assert!(matches!(v, Value::Int(120)), "{v}");
        // fact is entered for 5, 4, 3, 2, 1, 0.
        assert_eq!(bodies, 6);
    }

    #[test]
    fn deep_recursion_runs_in_constant_stack() {
        let (v, bodies) = run_cps(
            "(define count (lambda (n acc) (if (= n 0) acc (count (- n 1) (+ acc 1)))))
             (count 100000 0)",
        );
        assert!(matches!(v, Value::Int(100000)), "{v}");
        assert_eq!(bodies, 100001);
    }

    #[test]
    fn matches_the_direct_evaluator_on_deterministic_programs() {
        let srcs = [
            "(define fib (lambda (n) (if (< n 2) n (+ (fib (- n 1)) (fib (- n 2))))))
             (fib 12)",
            "(define rev (lambda (xs acc)
               (if (= (len xs) 0) acc (rev (nth xs (- (len xs) 1)) acc))))
             (let (xs (list 1 2 3)) (nth xs 1))",
            "(define apply-twice (lambda (f x) (f (f x))))
             (apply-twice (lambda (n) (* n 3)) 7)",
            "(and (or false true) (> 3 2))",
        ];
        for src in srcs {
            let prog = parse_program(src).unwrap();
            let mut hooks = crate::lang::eval::NoHooks;
            let mut ev = Evaluator::new(&mut hooks);
            let direct = ev.eval(&prog.body, &initial_env()).unwrap();
            let (cps, _) = run_cps(src);
            assert_eq!(direct.to_string(), cps.to_string(), "{src}");
        }
    }

    struct ScriptedSamples {
        feed: Vec<Value>,
        seen: Vec<(String, Value)>,
        konts: Vec<Value>,
    }

    impl MachineHooks for ScriptedSamples {
        fn sample(
            &mut self,
            addr: &Address,
            _erp: ErpKind,
            _params: &[Value],
            kont: &Value,
        ) -> Result<Value, RuntimeError> {
            let v = self.feed.remove(0);
            self.seen.push((addr.to_string(), v.clone()));
            self.konts.push(kont.clone());
            Ok(v)
        }

        fn observe(
            &mut self,
            addr: &Address,
            _erp: ErpKind,
            _params: &[Value],
            observed: &Value,
        ) -> Result<(), RuntimeError> {
            self.seen.push((addr.to_string(), observed.clone()));
            Ok(())
        }

        fn query_add(
            &mut self,
            _addr: &Address,
            _key: &Value,
            _value: &Value,
        ) -> Result<(), RuntimeError> {
            Ok(())
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

        fn call_exit(&mut self, _node: NodeId, retval: &Value) -> Result<ExitAction, RuntimeError> {
            Ok(ExitAction::Continue(retval.clone(), None))
        }
    }

    #[test]
    fn resuming_a_stored_continuation_replays_only_downstream_code() {
        let src = "
            (define flip (lambda () (sample bernoulli 0.5)))
            (let (x (flip))
              (let (y (flip))
                (if x (+ 10 y) (+ 20 y))))";
        let prog = parse_program(src).unwrap();
        let prog = transform_for(&prog, Engine::Cps);
        let mut hooks = ScriptedSamples {
            feed: vec![Value::Bool(true), Value::Int(1)],
            seen: vec![],
            konts: vec![],
        };
        let mut m = Machine::new(&mut hooks);
        let out = m.run(&prog.body, &initial_env()).unwrap();
        match out {
            Outcome::Finished(v) => assert!(matches!(v, Value::Int(11)), "{v}"),
            Outcome::EarlyExit => panic!("no cache in play"),
        }
        // Resume the *first* choice's continuation with false: downstream
        // code re-runs (drawing y again), upstream does not.
        let k0 = m.hooks.konts[0].clone();
        m.hooks.feed = vec![Value::Int(2)];
        let out = m.resume(k0, Value::Bool(false)).unwrap();
        match out {
            Outcome::Finished(v) => assert!(matches!(v, Value::Int(22)), "{v}"),
            Outcome::EarlyExit => panic!("no cache in play"),
        }
        // The replay drew exactly one fresh value (y), not two.
        assert!(m.hooks.feed.is_empty());
    }

    #[test]
    fn observe_evaluates_to_the_observed_value() {
        let src = "
            (define go (lambda () (observe gaussian 0 1 0.5)))
            (+ (go) 1)";
        let prog = parse_program(src).unwrap();
        let prog = transform_for(&prog, Engine::Cps);
        let mut hooks = ScriptedSamples {
            feed: vec![],
            seen: vec![],
            konts: vec![],
        };
        let mut m = Machine::new(&mut hooks);
        match m.run(&prog.body, &initial_env()).unwrap() {
            Outcome::Finished(v) => assert_eq!(v.to_string(), "1.5"),
            Outcome::EarlyExit => panic!("no cache in play"),
        }
        assert_eq!(m.hooks.seen.len(), 1);
        assert_eq!(m.hooks.seen[0].1.to_string(), "0.5");
    }

    /// A cache stub: every cached call runs with an exit wrapper; exits
    /// record themselves; one designated callsite short-circuits instead.
    struct ToyCache {
        next_node: u32,
        enters: Vec<(SourceId, String)>,
        exits: Vec<(NodeId, Value)>,
        reuse: Option<Value>,
        short_circuit_on: Option<NodeId>,
    }

    impl MachineHooks for ToyCache {
        fn sample(
            &mut self,
            _addr: &Address,
            _erp: ErpKind,
            _params: &[Value],
            _kont: &Value,
        ) -> Result<Value, RuntimeError> {
            Ok(Value::Bool(true))
        }

        fn observe(
            &mut self,
            _addr: &Address,
            _erp: ErpKind,
            _params: &[Value],
            _observed: &Value,
        ) -> Result<(), RuntimeError> {
            Ok(())
        }

        fn query_add(
            &mut self,
            _addr: &Address,
            _key: &Value,
            _value: &Value,
        ) -> Result<(), RuntimeError> {
            Ok(())
        }

        fn call_enter(
            &mut self,
            callsite: SourceId,
            addr: &Address,
            _callee: &Rc<ClosureData>,
            _args: &[Value],
            _kont: &Value,
        ) -> Result<CallAction, RuntimeError> {
            self.enters.push((callsite, addr.to_string()));
            if let Some(v) = self.reuse.take() {
                return Ok(CallAction::Reuse(v));
            }
            let node = NodeId(self.next_node);
            self.next_node += 1;
            Ok(CallAction::Run(node))
        }

        fn call_exit(&mut self, node: NodeId, retval: &Value) -> Result<ExitAction, RuntimeError> {
            self.exits.push((node, retval.clone()));
            if self.short_circuit_on == Some(node) {
                return Ok(ExitAction::ShortCircuit);
            }
            Ok(ExitAction::Continue(retval.clone(), None))
        }
    }

    const NESTED: &str = "
        (define inner (lambda (x) (+ x 1)))
        (define outer (lambda (x) (* (inner x) 2)))
        (outer 5)";

    #[test]
    fn cached_calls_pair_enters_with_exits() {
        let prog = parse_program(NESTED).unwrap();
        let prog = transform_for(&prog, Engine::C3);
        let mut hooks = ToyCache {
            next_node: 0,
            enters: vec![],
            exits: vec![],
            reuse: None,
            short_circuit_on: None,
        };
        let mut m = Machine::new(&mut hooks);
        match m.run(&prog.body, &initial_env()).unwrap() {
            Outcome::Finished(v) => assert!(matches!(v, Value::Int(12)), "{v}"),
            Outcome::EarlyExit => panic!("nothing short-circuits"),
        }
        assert_eq!(m.stats.bodies_executed, 2);
        assert_eq!(m.hooks.enters.len(), 2);
        // Exits run innermost-first: inner (node 1) finishes before outer
        // (node 0).
        let exits: Vec<(u32, String)> = m
            .hooks
            .exits
            .iter()
            .map(|(n, v)| (n.0, v.to_string()))
            .collect();
        assert_eq!(exits, vec![(1, "6".to_string()), (0, "12".to_string())]);
    }

    #[test]
    fn reused_calls_skip_the_body() {
        let prog = parse_program(NESTED).unwrap();
        let prog = transform_for(&prog, Engine::C3);
        let mut hooks = ToyCache {
            next_node: 0,
            enters: vec![],
            exits: vec![],
            reuse: Some(Value::Int(99)),
            short_circuit_on: None,
        };
        let mut m = Machine::new(&mut hooks);
        match m.run(&prog.body, &initial_env()).unwrap() {
            // outer is reused outright, so the whole program returns 99.
            Outcome::Finished(v) => assert!(matches!(v, Value::Int(99)), "{v}"),
            Outcome::EarlyExit => panic!("nothing short-circuits"),
        }
        assert_eq!(m.stats.bodies_executed, 0);
        assert!(m.hooks.exits.is_empty());
    }

    #[test]
    fn a_short_circuiting_exit_stops_the_run() {
        let prog = parse_program(NESTED).unwrap();
        let prog = transform_for(&prog, Engine::C3);
        let mut hooks = ToyCache {
            next_node: 0,
            enters: vec![],
            exits: vec![],
            reuse: None,
            // Node 1 is the inner call; its exit claims nothing downstream
            // changed.
            short_circuit_on: Some(NodeId(1)),
        };
        let mut m = Machine::new(&mut hooks);
        match m.run(&prog.body, &initial_env()).unwrap() {
            Outcome::Finished(v) => panic!("run should stop early, got {v}"),
            Outcome::EarlyExit => {}
        }
        // inner's exit fired; outer's never did.
        assert_eq!(m.hooks.exits.len(), 1);
    }

    #[test]
    fn continuation_invocations_do_not_count_as_executed_bodies() {
        // Three lets in a row force three continuation lambdas, but only the
        // two user calls count.
        let (v, bodies) = run_cps(
            "(define id (lambda (x) x))
             (let (a (id 1)) (let (b (id 2)) (+ a b)))",
        );
        assert!(matches!(v, Value::Int(3)), "{v}");
        assert_eq!(bodies, 2);
    }

    #[test]
    fn direct_hooks_and_machine_hooks_count_bodies_identically() {
        struct CountingDirect;
        impl DirectHooks for CountingDirect {
            fn sample(
                &mut self,
                _addr: &Address,
                _erp: ErpKind,
                _params: &[Value],
            ) -> Result<Value, RuntimeError> {
                Ok(Value::Bool(true))
            }
            fn observe(
                &mut self,
                _addr: &Address,
                _erp: ErpKind,
                _params: &[Value],
                _observed: &Value,
            ) -> Result<(), RuntimeError> {
                Ok(())
            }
            fn query_add(
                &mut self,
                _addr: &Address,
                _key: &Value,
                _value: &Value,
            ) -> Result<(), RuntimeError> {
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
                Ok(())
            }
        }

        let src = "
            (define leaf (lambda () (sample bernoulli 0.5)))
            (define pair (lambda () (if (leaf) 1 2)))
            (define go (lambda (n) (if (= n 0) 0 (+ (pair) (go (- n 1))))))
            (go 4)";
        let prog = parse_program(src).unwrap();

        let light = transform_for(&prog, Engine::Lightweight);
        let mut dh = CountingDirect;
        let mut ev = Evaluator::new(&mut dh);
        let direct_val = ev.eval(&light.body, &initial_env()).unwrap();

        let cps = transform_for(&prog, Engine::Cps);
        let mut mh = ToyCache {
            next_node: 0,
            enters: vec![],
            exits: vec![],
            reuse: None,
            short_circuit_on: None,
        };
        let mut m = Machine::new(&mut mh);
        let machine_val = match m.run(&cps.body, &initial_env()).unwrap() {
            Outcome::Finished(v) => v,
            Outcome::EarlyExit => panic!("no cache in play"),
        };

        assert_eq!(direct_val.to_string(), machine_val.to_string());
        assert_eq!(ev.stats.bodies_executed, m.stats.bodies_executed);
    }
}
