//! Direct (non-CPS) evaluation.
//!
//! This is the evaluator behind the lightweight and caching-only execution
//! strategies, the reference evaluator used for cross-checking, and the one
//! that runs top-level defines. Probabilistic effects and call-cache
//! decisions are delegated to a [`DirectHooks`] implementation so the same
//! walker serves every client.
//!
//! Calls in tail position — including the body of an `if` branch or a `let`
//! — are executed by looping rather than recursing, so deep tail recursion
//! runs in constant Rust stack. Cached calls in tail position accumulate
//! their pending cache-exit callbacks, which all fire with the final value of
//! the tail chain (a tail call's result *is* its caller's result).

use std::rc::Rc;

use thiserror::Error;

use super::addr::Address;
use super::ast::{ErpKind, Expr, LambdaExpr, PrimOp, SourceId};
use super::value::{
    env_bind, env_lookup, structural_eq, ClosureData, Env, Value,
};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("expected a function, got {0}")]
    NotAFunction(String),
    #[error("arity mismatch: expected {expected} argument(s), got {got}")]
    Arity { expected: usize, got: usize },
    #[error("type error in {context}: expected {expected}, got {got}")]
    Type {
        expected: &'static str,
        got: String,
        context: &'static str,
    },
    #[error("index {index} out of bounds for list of length {len}")]
    IndexOutOfBounds { index: i64, len: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow in arithmetic")]
    IntOverflow,
    #[error("bad distribution parameters: {0}")]
    ErpParams(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

fn internal<T>(msg: impl Into<String>) -> Result<T, RuntimeError> {
    Err(RuntimeError::Internal(msg.into()))
}

// ═══════════════════════════════════════════════════════════════════════
// Hooks
// ═══════════════════════════════════════════════════════════════════════

/// What a cached call should do, decided at entry.
#[derive(Debug, Clone)]
pub enum EnterAction {
    /// Execute the body; [`DirectHooks::call_exit`] will be invoked with the
    /// return value.
    Run,
    /// Skip the body entirely and use this previously cached value. No exit
    /// callback follows.
    Reuse(Value),
    /// Execute the body outside the cache (the callsite has been demoted by
    /// adaptive caching). No exit callback follows.
    Bypass,
}

pub trait DirectHooks {
    fn sample(
        &mut self,
        addr: &Address,
        erp: ErpKind,
        params: &[Value],
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

    /// Entry of a call marked `cached`. `callsite` is the application's id,
    /// `addr` the callee's call path.
    fn call_enter(
        &mut self,
        callsite: SourceId,
        addr: &Address,
        callee: &Rc<ClosureData>,
        args: &[Value],
    ) -> Result<EnterAction, RuntimeError>;

    /// Exit of a cached call whose entry returned [`EnterAction::Run`].
    /// Entries and exits pair up LIFO.
    fn call_exit(&mut self, retval: &Value) -> Result<(), RuntimeError>;
}

/// Hooks for code with no probabilistic effects (top-level defines, pure
/// programs). Cached calls run as plain calls; effects are errors.
pub struct NoHooks;

impl DirectHooks for NoHooks {
    fn sample(&mut self, _: &Address, _: ErpKind, _: &[Value]) -> Result<Value, RuntimeError> {
        internal("sample outside an inference context")
    }
    fn observe(
        &mut self,
        _: &Address,
        _: ErpKind,
        _: &[Value],
        _: &Value,
    ) -> Result<(), RuntimeError> {
        internal("observe outside an inference context")
    }
    fn query_add(&mut self, _: &Address, _: &Value, _: &Value) -> Result<(), RuntimeError> {
        internal("query-add outside an inference context")
    }
    fn call_enter(
        &mut self,
        _: SourceId,
        _: &Address,
        _: &Rc<ClosureData>,
        _: &[Value],
    ) -> Result<EnterAction, RuntimeError> {
        Ok(EnterAction::Bypass)
    }
    fn call_exit(&mut self, _: &Value) -> Result<(), RuntimeError> {
        internal("call_exit without a matching call_enter")
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Shared helpers (used by the trampolined CPS machine too)
// ═══════════════════════════════════════════════════════════════════════

pub fn expect_bool(v: &Value, context: &'static str) -> Result<bool, RuntimeError> {
    match v {
        Value::Bool(b) => Ok(*b),
        other => Err(RuntimeError::Type {
            expected: "bool",
            got: other.type_name().to_string(),
            context,
        }),
    }
}

fn expect_num(v: &Value, context: &'static str) -> Result<f64, RuntimeError> {
    v.as_f64().ok_or_else(|| RuntimeError::Type {
        expected: "number",
        got: v.type_name().to_string(),
        context,
    })
}

/// Builds a closure over `lambda` in `env`. When the lambda is tagged, the
/// values of its free variables are snapshotted for structural function
/// equality; a recursive binding's self-reference is excluded (it is bound at
/// application time, not closure creation).
pub fn make_closure(
    lambda: &Rc<LambdaExpr>,
    env: &Env,
    self_name: Option<Rc<str>>,
) -> Result<Value, RuntimeError> {
    let snapshot = if lambda.tagged {
        let mut snap = Vec::with_capacity(lambda.free_vars.len());
        for v in &lambda.free_vars {
            if let Some(sn) = &self_name {
                if sn.as_ref() == v.as_ref() {
                    continue;
                }
            }
            match env_lookup(env, v) {
                Some(val) => snap.push(val),
                None => {
                    return internal(format!("free variable `{v}` missing at closure creation"))
                }
            }
        }
        Some(snap)
    } else {
        None
    };
    Ok(Value::Closure(Rc::new(ClosureData {
        lambda: lambda.clone(),
        env: env.clone(),
        self_name,
        snapshot,
    })))
}

/// Environment for executing a closure's body: captured env, then the
/// self-binding for recursive closures, then parameters, then the address
/// and continuation parameters when the lambda carries them.
pub fn bind_call_env(
    c: &Rc<ClosureData>,
    args: Vec<Value>,
    addr: Option<Address>,
    kont: Option<Value>,
) -> Result<Env, RuntimeError> {
    let lambda = &c.lambda;
    if args.len() != lambda.params.len() {
        return Err(RuntimeError::Arity {
            expected: lambda.params.len(),
            got: args.len(),
        });
    }
    let mut env = c.env.clone();
    if let Some(sn) = &c.self_name {
        env = env_bind(&env, sn.clone(), Value::Closure(c.clone()));
    }
    for (p, v) in lambda.params.iter().zip(args) {
        env = env_bind(&env, p.clone(), v);
    }
    match (&lambda.addr_param, addr) {
        (Some(p), Some(a)) => env = env_bind(&env, p.clone(), Value::Addr(a)),
        (None, None) => {}
        (Some(_), None) => return internal("addressed lambda called without a call path"),
        (None, Some(_)) if lambda.is_kont => {}
        (None, Some(_)) => return internal("call path passed to an unaddressed lambda"),
    }
    match (&lambda.k_param, kont) {
        (Some(p), Some(k)) => env = env_bind(&env, p.clone(), k),
        (None, None) => {}
        (Some(_), None) => return internal("CPS lambda called without a continuation"),
        (None, Some(_)) if lambda.is_kont => {}
        (None, Some(_)) => return internal("continuation passed to a non-CPS lambda"),
    }
    Ok(env)
}

pub fn apply_prim(op: PrimOp, args: &[Value]) -> Result<Value, RuntimeError> {
    if let Some(expected) = op.arity() {
        if args.len() != expected {
            return Err(RuntimeError::Arity {
                expected,
                got: args.len(),
            });
        }
    }
    match op {
        PrimOp::Add | PrimOp::Sub | PrimOp::Mul => {
            match (&args[0], &args[1]) {
                (Value::Int(a), Value::Int(b)) => {
                    let r = match op {
                        PrimOp::Add => a.checked_add(*b),
                        PrimOp::Sub => a.checked_sub(*b),
                        _ => a.checked_mul(*b),
                    };
                    r.map(Value::Int).ok_or(RuntimeError::IntOverflow)
                }
                _ => {
                    let a = expect_num(&args[0], "arithmetic")?;
                    let b = expect_num(&args[1], "arithmetic")?;
                    Ok(Value::Num(match op {
                        PrimOp::Add => a + b,
                        PrimOp::Sub => a - b,
                        _ => a * b,
                    }))
                }
            }
        }
        PrimOp::Div => {
            let a = expect_num(&args[0], "division")?;
            let b = expect_num(&args[1], "division")?;
            if b == 0.0 {
                return Err(RuntimeError::DivisionByZero);
            }
            Ok(Value::Num(a / b))
        }
        PrimOp::Eq => Ok(Value::Bool(structural_eq(&args[0], &args[1]))),
        PrimOp::Lt => {
            let a = expect_num(&args[0], "comparison")?;
            let b = expect_num(&args[1], "comparison")?;
            Ok(Value::Bool(a < b))
        }
        PrimOp::Gt => {
            let a = expect_num(&args[0], "comparison")?;
            let b = expect_num(&args[1], "comparison")?;
            Ok(Value::Bool(a > b))
        }
        PrimOp::Not => Ok(Value::Bool(!expect_bool(&args[0], "not")?)),
        PrimOp::List => Ok(Value::List(Rc::new(args.to_vec()))),
        PrimOp::Cons => match &args[1] {
            Value::List(items) => {
                let mut out = Vec::with_capacity(items.len() + 1);
                out.push(args[0].clone());
                out.extend(items.iter().cloned());
                Ok(Value::List(Rc::new(out)))
            }
            other => Err(RuntimeError::Type {
                expected: "list",
                got: other.type_name().to_string(),
                context: "cons",
            }),
        },
        PrimOp::Nth => match (&args[0], &args[1]) {
            (Value::List(items), idx) => {
                let i = idx.as_index().ok_or_else(|| RuntimeError::Type {
                    expected: "int",
                    got: idx.type_name().to_string(),
                    context: "nth index",
                })?;
                if i < 0 || i as usize >= items.len() {
                    return Err(RuntimeError::IndexOutOfBounds {
                        index: i,
                        len: items.len(),
                    });
                }
                Ok(items[i as usize].clone())
            }
            (other, _) => Err(RuntimeError::Type {
                expected: "list",
                got: other.type_name().to_string(),
                context: "nth",
            }),
        },
        PrimOp::Len => match &args[0] {
            Value::List(items) => Ok(Value::Int(items.len() as i64)),
            other => Err(RuntimeError::Type {
                expected: "list",
                got: other.type_name().to_string(),
                context: "len",
            }),
        },
        PrimOp::AddrExtend => match (&args[0], &args[1]) {
            (Value::Addr(a), Value::Int(c)) if *c >= 0 && *c <= u32::MAX as i64 => {
                Ok(Value::Addr(a.extend(*c as u32)))
            }
            (a, b) => Err(RuntimeError::Type {
                expected: "address and component id",
                got: format!("{} and {}", a.type_name(), b.type_name()),
                context: "addr-extend",
            }),
        },
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Evaluator
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Default, Clone, Copy)]
pub struct EvalStats {
    /// User-function bodies executed, however the call was dispatched
    /// (plain, cached, or cache-bypassed). Cache hits that reuse a stored
    /// value do not count — no body ran.
    pub bodies_executed: u64,
}

impl EvalStats {
    pub fn reset(&mut self) {
        *self = EvalStats::default();
    }
}

pub struct Evaluator<'h, H: DirectHooks> {
    pub hooks: &'h mut H,
    pub stats: EvalStats,
}

impl<'h, H: DirectHooks> Evaluator<'h, H> {
    pub fn new(hooks: &'h mut H) -> Self {
        Evaluator {
            hooks,
            stats: EvalStats::default(),
        }
    }

    /// Evaluates the address annotation of a call or effect site; absent
    /// annotations (untransformed code) evaluate to the root path.
    fn eval_addr(&mut self, addr: &Option<Rc<Expr>>, env: &Env) -> Result<Address, RuntimeError> {
        match addr {
            None => Ok(Address::root()),
            Some(e) => match self.eval(e, env)? {
                Value::Addr(a) => Ok(a),
                other => Err(RuntimeError::Type {
                    expected: "address",
                    got: other.type_name().to_string(),
                    context: "call path annotation",
                }),
            },
        }
    }

    pub fn eval(&mut self, expr: &Rc<Expr>, env: &Env) -> Result<Value, RuntimeError> {
        let mut expr = expr.clone();
        let mut env = env.clone();
        // Cache exits owed by cached calls in tail position; they all fire
        // with the final value of the tail chain.
        let mut pending_exits: usize = 0;
        let value = loop {
            match expr.clone().as_ref() {
                Expr::Literal(lit) => break Value::from_lit(lit),
                Expr::Var(name) => match env_lookup(&env, name) {
                    Some(v) => break v,
                    None => return Err(RuntimeError::Unbound(name.to_string())),
                },
                Expr::Lambda(l) => break make_closure(l, &env, None)?,
                Expr::If(i) => {
                    let c = self.eval(&i.cond, &env)?;
                    expr = if expect_bool(&c, "if condition")? {
                        i.then_branch.clone()
                    } else {
                        i.else_branch.clone()
                    };
                }
                Expr::Let(l) => {
                    let bound = if l.recursive {
                        match l.bound.as_ref() {
                            Expr::Lambda(lam) => make_closure(lam, &env, Some(l.name.clone()))?,
                            _ => return internal("recursive let binding is not a lambda"),
                        }
                    } else {
                        self.eval(&l.bound, &env)?
                    };
                    env = env_bind(&env, l.name.clone(), bound);
                    expr = l.body.clone();
                }
                Expr::Prim(p) => {
                    let mut args = Vec::with_capacity(p.args.len());
                    for a in &p.args {
                        args.push(self.eval(a, &env)?);
                    }
                    break apply_prim(p.op, &args)?;
                }
                Expr::Sample(s) => {
                    if s.kont.is_some() {
                        return internal("CPS sample reached the direct evaluator");
                    }
                    let mut params = Vec::with_capacity(s.params.len());
                    for p in &s.params {
                        params.push(self.eval(p, &env)?);
                    }
                    let addr = self.eval_addr(&s.addr, &env)?;
                    break self.hooks.sample(&addr, s.erp, &params)?;
                }
                Expr::Observe(o) => {
                    if o.kont.is_some() {
                        return internal("CPS observe reached the direct evaluator");
                    }
                    let mut params = Vec::with_capacity(o.params.len());
                    for p in &o.params {
                        params.push(self.eval(p, &env)?);
                    }
                    let observed = self.eval(&o.observed, &env)?;
                    let addr = self.eval_addr(&o.addr, &env)?;
                    self.hooks.observe(&addr, o.erp, &params, &observed)?;
                    break observed;
                }
                Expr::QueryAdd(q) => {
                    if q.kont.is_some() {
                        return internal("CPS query-add reached the direct evaluator");
                    }
                    let key = self.eval(&q.key, &env)?;
                    let value = self.eval(&q.value, &env)?;
                    let addr = self.eval_addr(&q.addr, &env)?;
                    self.hooks.query_add(&addr, &key, &value)?;
                    break value;
                }
                Expr::Apply(a) => {
                    if a.kont.is_some() {
                        return internal("CPS call reached the direct evaluator");
                    }
                    let f = self.eval(&a.callee, &env)?;
                    let mut args = Vec::with_capacity(a.args.len());
                    for arg in &a.args {
                        args.push(self.eval(arg, &env)?);
                    }
                    let addr = self.eval_addr(&a.addr, &env)?;
                    let c = match f {
                        Value::Closure(c) => c,
                        other => return Err(RuntimeError::NotAFunction(other.to_string())),
                    };
                    if a.cached {
                        match self.hooks.call_enter(a.callsite, &addr, &c, &args)? {
                            EnterAction::Reuse(v) => break v,
                            EnterAction::Run => pending_exits += 1,
                            EnterAction::Bypass => {}
                        }
                    }
                    self.stats.bodies_executed += 1;
                    let passed_addr = if c.lambda.addr_param.is_some() {
                        Some(addr)
                    } else {
                        None
                    };
                    env = bind_call_env(&c, args, passed_addr, None)?;
                    expr = c.lambda.body.clone();
                }
            }
        };
        for _ in 0..pending_exits {
            self.hooks.call_exit(&value)?;
        }
        Ok(value)
    }
}

/// Initial environment for running transformed programs: binds the call-path
/// variable to the root path.
pub fn initial_env() -> Env {
    let env = env_bind(
        &super::value::env_empty(),
        super::ast::ADDR_VAR.into(),
        Value::Addr(Address::root()),
    );
    // The continuation of the whole program. Only continuation-passing
    // engines ever look `_k` up; everyone else just carries the binding.
    env_bind(&env, super::ast::KONT_VAR.into(), Value::HaltK)
}

/// Evaluates a program's leading define chain once, returning the
/// environment holding the defined values and the remaining main expression.
/// The parser guarantees define bodies perform no calls or probabilistic
/// effects outside lambda bodies, so `hooks` is never consulted for effects.
pub fn eval_preamble<H: DirectHooks>(
    ev: &mut Evaluator<'_, H>,
    body: &Rc<Expr>,
    env: &Env,
) -> Result<(Env, Rc<Expr>), RuntimeError> {
    let mut env = env.clone();
    let mut cur = body.clone();
    loop {
        let l = match cur.as_ref() {
            Expr::Let(l) if l.from_define => l.clone(),
            _ => return Ok((env, cur)),
        };
        let v = if l.recursive {
            match l.bound.as_ref() {
                Expr::Lambda(lam) => make_closure(lam, &env, Some(l.name.clone()))?,
                _ => return internal("recursive define binding is not a lambda"),
            }
        } else {
            ev.eval(&l.bound, &env)?
        };
        env = env_bind(&env, l.name.clone(), v);
        cur = l.body.clone();
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse::parse_program;
    use crate::lang::value::env_empty;

    fn run_pure(src: &str) -> Value {
        let prog = parse_program(src).expect("parse");
        let mut hooks = NoHooks;
        let mut ev = Evaluator::new(&mut hooks);
        let (env, main) = eval_preamble(&mut ev, &prog.body, &env_empty()).expect("preamble");
        ev.eval(&main, &env).expect("eval")
    }

    #[test]
    fn factorial() {
        let v = run_pure(
            "(define fact (lambda (n) (if (= n 0) 1 (* n (fact (- n 1))))))
             (fact 5)",
        );
        assert!(matches!(v, Value::Int(120)));
    }

    #[test]
    fn closures_capture_their_creation_environment() {
        let v = run_pure(
            "(let (mk (lambda (x) (lambda () x)))
               (let (f (mk 1))
                 (let (g (mk 2))
                   (+ (f) (g)))))",
        );
        assert!(matches!(v, Value::Int(3)));
    }

    #[test]
    fn lexical_shadowing() {
        let v = run_pure("(let (x 1) (let (f (lambda () x)) (let (x 2) (f))))");
        assert!(matches!(v, Value::Int(1)), "{v:?}");
    }

    #[test]
    fn deep_tail_recursion_runs_in_constant_stack() {
        let v = run_pure(
            "(define count (lambda (n) (if (= n 0) 0 (count (- n 1)))))
             (count 100000)",
        );
        assert!(matches!(v, Value::Int(0)));
    }

    #[test]
    fn list_primitives() {
        let v = run_pure("(nth (cons 9 (list 1 2)) 0)");
        assert!(matches!(v, Value::Int(9)));
        let v = run_pure("(len (list 1 2 3))");
        assert!(matches!(v, Value::Int(3)));
        let v = run_pure("(= (list 1 2) (list 1 2))");
        assert!(matches!(v, Value::Bool(true)));
    }

    #[test]
    fn arithmetic_mixes_ints_and_numbers() {
        assert!(matches!(run_pure("(+ 1 2)"), Value::Int(3)));
        let v = run_pure("(+ 1 2.5)");
        match v {
            Value::Num(x) => assert_eq!(x, 3.5),
            other => panic!("expected number, got {other:?}"),
        }
        let v = run_pure("(/ 1 2)");
        match v {
            Value::Num(x) => assert_eq!(x, 0.5),
            other => panic!("expected number, got {other:?}"),
        }
        assert!(matches!(run_pure("(= 1 1.0)"), Value::Bool(true)));
    }

    #[test]
    fn calling_a_non_function_errors() {
        let prog = parse_program("(let (x 1) (x))").expect("parse");
        let mut hooks = NoHooks;
        let mut ev = Evaluator::new(&mut hooks);
        let e = ev.eval(&prog.body, &env_empty()).unwrap_err();
        assert!(matches!(e, RuntimeError::NotAFunction(_)), "{e}");
    }

    #[test]
    fn out_of_bounds_index_errors() {
        let prog = parse_program("(nth (list 1) 3)").expect("parse");
        let mut hooks = NoHooks;
        let mut ev = Evaluator::new(&mut hooks);
        let e = ev.eval(&prog.body, &env_empty()).unwrap_err();
        assert!(matches!(e, RuntimeError::IndexOutOfBounds { .. }), "{e}");
    }

    #[test]
    fn body_execution_counting() {
        let prog = parse_program(
            "(define add1 (lambda (x) (+ x 1)))
             (add1 (add1 (add1 0)))",
        )
        .expect("parse");
        let mut hooks = NoHooks;
        let mut ev = Evaluator::new(&mut hooks);
        let (env, main) = eval_preamble(&mut ev, &prog.body, &env_empty()).expect("preamble");
        let v = ev.eval(&main, &env).expect("eval");
        assert!(matches!(v, Value::Int(3)));
        assert_eq!(ev.stats.bodies_executed, 3);
    }

    /// Scripted hooks: feed predetermined values to `sample` and record what
    /// was asked for.
    struct Scripted {
        values: Vec<Value>,
        seen: Vec<(ErpKind, Vec<Value>)>,
        observed: Vec<(ErpKind, Value)>,
    }

    impl DirectHooks for Scripted {
        fn sample(
            &mut self,
            _addr: &Address,
            erp: ErpKind,
            params: &[Value],
        ) -> Result<Value, RuntimeError> {
            self.seen.push((erp, params.to_vec()));
            Ok(self.values.remove(0))
        }
        fn observe(
            &mut self,
            _addr: &Address,
            erp: ErpKind,
            _params: &[Value],
            observed: &Value,
        ) -> Result<(), RuntimeError> {
            self.observed.push((erp, observed.clone()));
            Ok(())
        }
        fn query_add(&mut self, _: &Address, _: &Value, _: &Value) -> Result<(), RuntimeError> {
            Ok(())
        }
        fn call_enter(
            &mut self,
            _: SourceId,
            _: &Address,
            _: &Rc<ClosureData>,
            _: &[Value],
        ) -> Result<EnterAction, RuntimeError> {
            Ok(EnterAction::Bypass)
        }
        fn call_exit(&mut self, _: &Value) -> Result<(), RuntimeError> {
            Ok(())
        }
    }

    #[test]
    fn effects_are_routed_through_hooks_in_order() {
        let prog = parse_program(
            "(let (x (sample bernoulli 0.5))
               (let (y (sample gaussian 0 1))
                 (let (_ (observe gaussian y 1 2.5))
                   (if x y 0))))",
        )
        .expect("parse");
        let mut hooks = Scripted {
            values: vec![Value::Bool(true), Value::Num(7.0)],
            seen: vec![],
            observed: vec![],
        };
        let mut ev = Evaluator::new(&mut hooks);
        let v = ev.eval(&prog.body, &env_empty()).expect("eval");
        match v {
            Value::Num(x) => assert_eq!(x, 7.0),
            other => panic!("expected 7.0, got {other:?}"),
        }
        assert_eq!(hooks.seen.len(), 2);
        assert_eq!(hooks.seen[0].0, ErpKind::Bernoulli);
        assert_eq!(hooks.seen[1].0, ErpKind::Gaussian);
        assert_eq!(hooks.observed.len(), 1);
        match &hooks.observed[0].1 {
            Value::Num(x) => assert_eq!(*x, 2.5),
            other => panic!("expected observed 2.5, got {other:?}"),
        }
    }
}
