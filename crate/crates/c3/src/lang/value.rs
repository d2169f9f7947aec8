//! Runtime values and environments.
//!
//! Values are cheap to clone: compound data lives behind `Rc`. Environments
//! are persistent cons lists, so capturing one in a closure is O(1) and
//! shadowing is just consing a new binding on front.
//!
//! Two distinct notions of equality live here:
//!
//! * [`structural_eq`] — the language's `=` operator and the comparison used
//!   when checking chain outcomes against each other. Numbers compare by
//!   value across `Int`/`Num`, lists compare elementwise.
//! * [`shallow_eq`] — the cheap conservative check used at call-cache
//!   boundaries. Scalars compare by value (floats bitwise), lists by pointer,
//!   and closures by [`fn_equiv`]. It may report `false` for semantically
//!   equal values; it must never report `true` for distinguishable ones.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::addr::Address;
use super::ast::{LambdaExpr, LitVal};

/// Index of a node in the call-tree arena. Defined here because exit
/// continuations (`Value::ExitK`) carry one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Environments
// ═══════════════════════════════════════════════════════════════════════

pub type Env = Rc<EnvNode>;

#[derive(Debug)]
pub enum EnvNode {
    Empty,
    Bind {
        name: Rc<str>,
        value: Value,
        rest: Env,
    },
}

thread_local! {
    /// Shared tail for every environment chain. Also used as the cheap
    /// replacement value when `Drop` unlinks a chain — no allocation per
    /// dropped binding.
    static EMPTY_ENV: Env = Rc::new(EnvNode::Empty);
}

pub fn env_empty() -> Env {
    EMPTY_ENV.with(Rc::clone)
}

pub fn env_bind(env: &Env, name: Rc<str>, value: Value) -> Env {
    Rc::new(EnvNode::Bind {
        name,
        value,
        rest: env.clone(),
    })
}

impl Drop for EnvNode {
    /// Environments form long chains under recursion; unlink iteratively so
    /// dropping the head of a chain can't recurse once per binding.
    fn drop(&mut self) {
        if let EnvNode::Bind { rest, .. } = self {
            let mut cur = std::mem::replace(rest, env_empty());
            loop {
                match Rc::try_unwrap(cur) {
                    Ok(mut node) => match &mut node {
                        EnvNode::Bind { rest, .. } => {
                            cur = std::mem::replace(rest, env_empty());
                        }
                        EnvNode::Empty => break,
                    },
                    Err(_) => break,
                }
            }
        }
    }
}

pub fn env_lookup(env: &Env, name: &str) -> Option<Value> {
    let mut cur = env;
    loop {
        match cur.as_ref() {
            EnvNode::Empty => return None,
            EnvNode::Bind {
                name: n,
                value,
                rest,
            } => {
                if n.as_ref() == name {
                    return Some(value.clone());
                }
                cur = rest;
            }
        }
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Values
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(Rc<str>),
    List(Rc<Vec<Value>>),
    Closure(Rc<ClosureData>),
    Addr(Address),
    /// Exit continuation installed around a cached call by the CPS cache
    /// driver; applying it runs the cache-exit bookkeeping for `node` and
    /// then continues with the call's freshest stored continuation (`k` is
    /// the fallback when the cache doesn't hold one).
    ExitK(Rc<ExitKData>),
    /// Terminal continuation: applying it ends the program with its argument.
    HaltK,
}

#[derive(Debug)]
pub struct ClosureData {
    pub lambda: Rc<LambdaExpr>,
    pub env: Env,
    /// For closures created by a `letrec`: the name under which the closure
    /// refers to itself. The binding is added at application time, which ties
    /// the recursive knot without interior mutability.
    pub self_name: Option<Rc<str>>,
    /// Values of the lambda's free variables at closure creation, aligned
    /// with `lambda.free_vars` minus `self_name`. Present iff the lambda is
    /// tagged; enables structural function equivalence.
    pub snapshot: Option<Vec<Value>>,
}

#[derive(Debug)]
pub struct ExitKData {
    pub node: NodeId,
    pub k: Value,
}

impl Drop for ExitKData {
    /// Exit continuations stack once per live cached call, which under deep
    /// recursion means chains as long as the call depth; unlink iteratively.
    fn drop(&mut self) {
        let mut k = std::mem::replace(&mut self.k, Value::HaltK);
        loop {
            match k {
                Value::ExitK(rc) => match Rc::try_unwrap(rc) {
                    Ok(mut data) => k = std::mem::replace(&mut data.k, Value::HaltK),
                    Err(_) => break,
                },
                _ => break,
            }
        }
    }
}

impl Value {
    pub fn from_lit(lit: &LitVal) -> Value {
        match lit {
            LitVal::Bool(b) => Value::Bool(*b),
            LitVal::Int(i) => Value::Int(*i),
            LitVal::Num(x) => Value::Num(*x),
            LitVal::Str(s) => Value::Str(s.clone()),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Num(_) => "number",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Closure(_) => "function",
            Value::Addr(_) => "address",
            Value::ExitK(_) | Value::HaltK => "continuation",
        }
    }

    /// Numeric view, accepting both `Int` and `Num`.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Num(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_index(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }
}

/// The language's `=`: structural, with numeric comparison across
/// `Int`/`Num`. Functions and continuations compare by identity.
pub fn structural_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Bool(x), Value::Bool(y)) => x == y,
        (Value::Str(x), Value::Str(y)) => x == y,
        (Value::Addr(x), Value::Addr(y)) => x == y,
        (Value::List(x), Value::List(y)) => {
            x.len() == y.len() && x.iter().zip(y.iter()).all(|(a, b)| structural_eq(a, b))
        }
        (Value::Closure(x), Value::Closure(y)) => Rc::ptr_eq(x, y),
        (Value::HaltK, Value::HaltK) => true,
        (Value::ExitK(x), Value::ExitK(y)) => Rc::ptr_eq(x, y),
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Shallow equality and function equivalence
// ═══════════════════════════════════════════════════════════════════════

/// Memo table for [`fn_equiv`], keyed by closure pointer pairs. Valid only
/// while the closures it mentions are alive; callers clear it whenever
/// closures from a finished proposal may have been dropped.
#[derive(Default)]
pub struct FnEquivMemo {
    memo: HashMap<(usize, usize), bool>,
}

impl FnEquivMemo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.memo.clear();
    }
}

fn ptr_key(c: &Rc<ClosureData>) -> usize {
    Rc::as_ptr(c) as usize
}

/// Structural function equivalence: two closures are equivalent when they
/// close over the same lambda and their free-variable snapshots are pairwise
/// shallow-equal. Untagged closures (no snapshot) only compare by pointer.
///
/// Recursive closures reference themselves through their snapshot-free
/// `self_name` binding, but closures can still form reference cycles through
/// lists or other closures; the `visited` set treats an in-progress pair as
/// equal, giving the coinductive reading.
pub fn fn_equiv(memo: &mut FnEquivMemo, a: &Rc<ClosureData>, b: &Rc<ClosureData>) -> bool {
    if Rc::ptr_eq(a, b) {
        return true;
    }
    let key = (ptr_key(a), ptr_key(b));
    if let Some(&r) = memo.memo.get(&key) {
        return r;
    }
    let mut visited = HashSet::new();
    let r = fn_equiv_rec(a, b, &mut visited);
    memo.memo.insert(key, r);
    memo.memo.insert((key.1, key.0), r);
    r
}

fn fn_equiv_rec(
    a: &Rc<ClosureData>,
    b: &Rc<ClosureData>,
    visited: &mut HashSet<(usize, usize)>,
) -> bool {
    if Rc::ptr_eq(a, b) {
        return true;
    }
    if a.lambda.id != b.lambda.id {
        return false;
    }
    let (sa, sb) = match (&a.snapshot, &b.snapshot) {
        (Some(sa), Some(sb)) => (sa, sb),
        // Untagged closures carry no snapshot; distinct pointers over the
        // same lambda cannot be proven equivalent.
        _ => return false,
    };
    if !visited.insert((ptr_key(a), ptr_key(b))) {
        return true;
    }
    debug_assert_eq!(sa.len(), sb.len());
    let eq = sa
        .iter()
        .zip(sb.iter())
        .all(|(x, y)| shallow_eq_rec(x, y, visited));
    eq
}

/// Cache-boundary equality: cheap and conservative. See module docs.
pub fn shallow_eq(memo: &mut FnEquivMemo, a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Closure(x), Value::Closure(y)) => fn_equiv(memo, x, y),
        _ => shallow_eq_scalar_or_ptr(a, b),
    }
}

fn shallow_eq_rec(a: &Value, b: &Value, visited: &mut HashSet<(usize, usize)>) -> bool {
    match (a, b) {
        (Value::Closure(x), Value::Closure(y)) => fn_equiv_rec(x, y, visited),
        _ => shallow_eq_scalar_or_ptr(a, b),
    }
}

fn shallow_eq_scalar_or_ptr(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Bool(x), Value::Bool(y)) => x == y,
        (Value::Int(x), Value::Int(y)) => x == y,
        // Bitwise: deterministic, and treats NaN as equal to itself, which
        // is what "the argument did not change" needs to mean.
        (Value::Num(x), Value::Num(y)) => x.to_bits() == y.to_bits(),
        (Value::Str(x), Value::Str(y)) => x == y,
        (Value::Addr(x), Value::Addr(y)) => x == y,
        (Value::List(x), Value::List(y)) => Rc::ptr_eq(x, y),
        (Value::HaltK, Value::HaltK) => true,
        (Value::ExitK(x), Value::ExitK(y)) => Rc::ptr_eq(x, y),
        _ => false,
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Canonical display
// ═══════════════════════════════════════════════════════════════════════

/// Canonical printing: used for query snapshots and outcome comparison, so
/// it must be deterministic and injective enough to distinguish states.
/// `Num` uses the shortest round-tripping decimal form, which always carries
/// a decimal point or exponent and therefore never collides with `Int`.
impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Num(x) => write!(f, "{x:?}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::List(items) => {
                write!(f, "(")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, ")")
            }
            Value::Closure(c) => write!(f, "#<fn:{}>", c.lambda.id),
            Value::Addr(a) => write!(f, "#<addr:{a}>"),
            Value::ExitK(_) => write!(f, "#<exit-k>"),
            Value::HaltK => write!(f, "#<halt-k>"),
        }
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::ast::{Expr, LambdaExpr};

    fn test_lambda(id: u32, tagged: bool) -> Rc<LambdaExpr> {
        Rc::new(LambdaExpr::new(
            id,
            vec![],
            None,
            None,
            Rc::new(Expr::Var("x".into())),
            tagged,
            false,
        ))
    }

    fn closure(lambda: &Rc<LambdaExpr>, snapshot: Option<Vec<Value>>) -> Rc<ClosureData> {
        Rc::new(ClosureData {
            lambda: lambda.clone(),
            env: env_empty(),
            self_name: None,
            snapshot,
        })
    }

    #[test]
    fn shallow_eq_scalars() {
        let mut m = FnEquivMemo::new();
        assert!(shallow_eq(&mut m, &Value::Int(3), &Value::Int(3)));
        assert!(!shallow_eq(&mut m, &Value::Int(3), &Value::Int(4)));
        // Strict across numeric kinds: conservative misses are fine.
        assert!(!shallow_eq(&mut m, &Value::Int(1), &Value::Num(1.0)));
        assert!(shallow_eq(&mut m, &Value::Num(f64::NAN), &Value::Num(f64::NAN)));
        assert!(!shallow_eq(&mut m, &Value::Num(0.0), &Value::Num(-0.0)));
    }

    #[test]
    fn shallow_eq_lists_by_pointer() {
        let mut m = FnEquivMemo::new();
        let a = Value::List(Rc::new(vec![Value::Int(1)]));
        let b = a.clone();
        let c = Value::List(Rc::new(vec![Value::Int(1)]));
        assert!(shallow_eq(&mut m, &a, &b));
        assert!(!shallow_eq(&mut m, &a, &c));
        assert!(structural_eq(&a, &c));
    }

    #[test]
    fn fn_equiv_same_lambda_same_snapshot() {
        let lam = test_lambda(1, true);
        let mut m = FnEquivMemo::new();
        let shared = Rc::new(vec![Value::Int(5)]);
        let a = closure(&lam, Some(vec![Value::Int(1), Value::List(shared.clone())]));
        let b = closure(&lam, Some(vec![Value::Int(1), Value::List(shared)]));
        assert!(fn_equiv(&mut m, &a, &b));
    }

    #[test]
    fn fn_equiv_differs_on_snapshot_values() {
        let lam = test_lambda(1, true);
        let mut m = FnEquivMemo::new();
        let a = closure(&lam, Some(vec![Value::Int(1)]));
        let b = closure(&lam, Some(vec![Value::Int(2)]));
        assert!(!fn_equiv(&mut m, &a, &b));
    }

    #[test]
    fn fn_equiv_differs_on_lambda_identity() {
        let mut m = FnEquivMemo::new();
        let a = closure(&test_lambda(1, true), Some(vec![]));
        let b = closure(&test_lambda(2, true), Some(vec![]));
        assert!(!fn_equiv(&mut m, &a, &b));
    }

    #[test]
    fn fn_equiv_untagged_closures_compare_by_pointer_only() {
        let lam = test_lambda(1, false);
        let mut m = FnEquivMemo::new();
        let a = closure(&lam, None);
        let b = closure(&lam, None);
        assert!(fn_equiv(&mut m, &a, &a.clone()));
        assert!(!fn_equiv(&mut m, &a, &b));
    }

    #[test]
    fn fn_equiv_recurses_into_captured_closures() {
        let inner = test_lambda(1, true);
        let outer = test_lambda(2, true);
        let mut m = FnEquivMemo::new();
        let ia = closure(&inner, Some(vec![Value::Int(7)]));
        let ib = closure(&inner, Some(vec![Value::Int(7)]));
        let ic = closure(&inner, Some(vec![Value::Int(8)]));
        let a = closure(&outer, Some(vec![Value::Closure(ia)]));
        let b = closure(&outer, Some(vec![Value::Closure(ib)]));
        let c = closure(&outer, Some(vec![Value::Closure(ic)]));
        assert!(fn_equiv(&mut m, &a, &b));
        assert!(!fn_equiv(&mut m, &a, &c));
    }

    #[test]
    fn canonical_display() {
        assert_eq!(Value::Int(3).to_string(), "3");
        assert_eq!(Value::Num(3.0).to_string(), "3.0");
        assert_eq!(Value::Num(0.1).to_string(), "0.1");
        assert_eq!(Value::Bool(true).to_string(), "true");
        let l = Value::List(Rc::new(vec![Value::Int(1), Value::Num(2.5)]));
        assert_eq!(l.to_string(), "(1 2.5)");
        assert_eq!(Value::Str("hi".into()).to_string(), "\"hi\"");
    }

    #[test]
    fn env_shadowing_and_lookup() {
        let e = env_bind(&env_empty(), "x".into(), Value::Int(1));
        let e2 = env_bind(&e, "x".into(), Value::Int(2));
        assert!(matches!(env_lookup(&e2, "x"), Some(Value::Int(2))));
        assert!(matches!(env_lookup(&e, "x"), Some(Value::Int(1))));
        assert!(env_lookup(&e, "y").is_none());
    }
}
