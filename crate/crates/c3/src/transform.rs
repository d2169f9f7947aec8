//! Source-to-source transform pipeline.
//!
//! Four passes, always applied in this order:
//!
//! 1. **caching** — marks every application `cached`, routing it through the
//!    call cache at runtime.
//! 2. **tagging** — marks every lambda `tagged`, so closures snapshot their
//!    free variables for structural function-equivalence checks.
//! 3. **addressing** — threads a call-path argument through the program:
//!    every lambda gets an `_addr` parameter and every application, sample,
//!    observation, and query write extends the current path with its own id.
//! 4. **cps** — continuation-passing style. Every user lambda gets a `_k`
//!    parameter, every call or probabilistic effect in tail position receives
//!    a continuation, and intermediate results are sequenced through
//!    continuation lambdas.
//!
//! The order is load-bearing: continuation lambdas and continuation
//! applications are introduced *after* the first three passes have run, so
//! they are never cached, never tagged, and never addressed. Running the
//! passes in any other order would wrap the CPS plumbing in cache nodes and
//! corrupt both the counters and the cache tree.
//!
//! Each execution strategy uses a fixed subset of the passes (see
//! [`Engine::pipeline`]); the subset always respects the order above.

use std::fmt;
use std::rc::Rc;

use crate::lang::ast::{
    ApplyExpr, Expr, IfExpr, LambdaExpr, LetExpr, LitVal, ObserveExpr, PrimExpr, PrimOp,
    QueryAddExpr, SampleExpr, SourceId, ADDR_VAR, KONT_VAR,
};
use crate::lang::parse::Program;

// ═══════════════════════════════════════════════════════════════════════
// Engines and pipelines
// ═══════════════════════════════════════════════════════════════════════

/// The four execution strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Engine {
    /// Re-run the whole program each proposal; addresses only.
    Lightweight,
    /// Call caching on top of full re-runs.
    Caching,
    /// Resume proposals from stored continuations; no caching.
    Cps,
    /// Continuations plus call caching.
    C3,
}

impl Engine {
    pub const ALL: [Engine; 4] = [Engine::Lightweight, Engine::Caching, Engine::Cps, Engine::C3];

    pub fn name(self) -> &'static str {
        match self {
            Engine::Lightweight => "lightweight",
            Engine::Caching => "caching",
            Engine::Cps => "cps",
            Engine::C3 => "c3",
        }
    }

    pub fn pipeline(self) -> Pipeline {
        match self {
            Engine::Lightweight => Pipeline {
                caching: false,
                tagging: false,
                addressing: true,
                cps: false,
            },
            Engine::Caching => Pipeline {
                caching: true,
                tagging: true,
                addressing: true,
                cps: false,
            },
            Engine::Cps => Pipeline {
                caching: false,
                tagging: false,
                addressing: true,
                cps: true,
            },
            Engine::C3 => Pipeline {
                caching: true,
                tagging: true,
                addressing: true,
                cps: true,
            },
        }
    }

    pub fn uses_cps(self) -> bool {
        self.pipeline().cps
    }

    pub fn uses_cache(self) -> bool {
        self.pipeline().caching
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Engine {
    type Err = String;
    fn from_str(s: &str) -> Result<Engine, String> {
        match s {
            "lightweight" => Ok(Engine::Lightweight),
            "caching" => Ok(Engine::Caching),
            "cps" => Ok(Engine::Cps),
            "c3" => Ok(Engine::C3),
            other => Err(format!(
                "unknown engine `{other}` (expected lightweight, caching, cps, or c3)"
            )),
        }
    }
}

/// Which passes to run. Construct via [`Engine::pipeline`] or field-by-field
/// for experiments; passes always execute in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pipeline {
    pub caching: bool,
    pub tagging: bool,
    pub addressing: bool,
    pub cps: bool,
}

pub fn transform_for(prog: &Program, engine: Engine) -> Program {
    transform(prog, engine.pipeline())
}

pub fn transform(prog: &Program, p: Pipeline) -> Program {
    let mut gen = IdGen {
        next: prog.next_id,
    };
    let mut body = prog.body.clone();
    // A program that has been through the CPS pass is final: the first three
    // passes cannot distinguish continuation plumbing from user code, so
    // re-running them would cache/tag/address it. Freeze instead.
    let frozen = already_cps(&body);
    if p.caching && !frozen {
        body = caching_pass(&body);
    }
    if p.tagging && !frozen {
        body = tagging_pass(&body);
    }
    if p.addressing && !frozen {
        body = addressing_pass(&body);
    }
    if p.cps {
        body = cps_pass(&body, &mut gen);
    }
    Program {
        body,
        next_id: gen.next,
    }
}

struct IdGen {
    next: SourceId,
}

impl IdGen {
    fn fresh(&mut self) -> SourceId {
        let id = self.next;
        self.next += 1;
        id
    }

    /// Names for CPS-introduced binders. The leading underscore puts them in
    /// the parser-reserved namespace, so they can never capture user names.
    fn fresh_name(&mut self, prefix: &str) -> Rc<str> {
        format!("_{prefix}{}", self.fresh()).into()
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Pass 1: caching
// ═══════════════════════════════════════════════════════════════════════

fn caching_pass(e: &Rc<Expr>) -> Rc<Expr> {
    match e.as_ref() {
        Expr::Literal(_) | Expr::Var(_) => e.clone(),
        Expr::Lambda(l) => rebuild_lambda(l, caching_pass(&l.body)),
        Expr::Apply(a) => Rc::new(Expr::Apply(Rc::new(ApplyExpr {
            callsite: a.callsite,
            callee: caching_pass(&a.callee),
            args: a.args.iter().map(caching_pass).collect(),
            cached: true,
            addr: a.addr.as_ref().map(caching_pass),
            kont: a.kont.as_ref().map(caching_pass),
        }))),
        Expr::If(i) => Rc::new(Expr::If(Rc::new(IfExpr {
            cond: caching_pass(&i.cond),
            then_branch: caching_pass(&i.then_branch),
            else_branch: caching_pass(&i.else_branch),
        }))),
        Expr::Let(l) => Rc::new(Expr::Let(Rc::new(LetExpr {
            name: l.name.clone(),
            bound: caching_pass(&l.bound),
            body: caching_pass(&l.body),
            recursive: l.recursive,
            from_define: l.from_define,
        }))),
        Expr::Prim(p) => Rc::new(Expr::Prim(Rc::new(PrimExpr {
            op: p.op,
            args: p.args.iter().map(caching_pass).collect(),
        }))),
        Expr::Sample(s) => Rc::new(Expr::Sample(Rc::new(SampleExpr {
            site: s.site,
            erp: s.erp,
            params: s.params.iter().map(caching_pass).collect(),
            addr: s.addr.as_ref().map(caching_pass),
            kont: s.kont.as_ref().map(caching_pass),
        }))),
        Expr::Observe(o) => Rc::new(Expr::Observe(Rc::new(ObserveExpr {
            site: o.site,
            erp: o.erp,
            params: o.params.iter().map(caching_pass).collect(),
            observed: caching_pass(&o.observed),
            addr: o.addr.as_ref().map(caching_pass),
            kont: o.kont.as_ref().map(caching_pass),
        }))),
        Expr::QueryAdd(q) => Rc::new(Expr::QueryAdd(Rc::new(QueryAddExpr {
            site: q.site,
            key: caching_pass(&q.key),
            value: caching_pass(&q.value),
            addr: q.addr.as_ref().map(caching_pass),
            kont: q.kont.as_ref().map(caching_pass),
        }))),
    }
}

fn rebuild_lambda(l: &Rc<LambdaExpr>, body: Rc<Expr>) -> Rc<Expr> {
    Rc::new(Expr::Lambda(Rc::new(LambdaExpr::new(
        l.id,
        l.params.clone(),
        l.addr_param.clone(),
        l.k_param.clone(),
        body,
        l.tagged,
        l.is_kont,
    ))))
}

// ═══════════════════════════════════════════════════════════════════════
// Pass 2: tagging
// ═══════════════════════════════════════════════════════════════════════

fn tagging_pass(e: &Rc<Expr>) -> Rc<Expr> {
    match e.as_ref() {
        Expr::Literal(_) | Expr::Var(_) => e.clone(),
        Expr::Lambda(l) => Rc::new(Expr::Lambda(Rc::new(LambdaExpr::new(
            l.id,
            l.params.clone(),
            l.addr_param.clone(),
            l.k_param.clone(),
            tagging_pass(&l.body),
            true,
            l.is_kont,
        )))),
        Expr::Apply(a) => Rc::new(Expr::Apply(Rc::new(ApplyExpr {
            callsite: a.callsite,
            callee: tagging_pass(&a.callee),
            args: a.args.iter().map(tagging_pass).collect(),
            cached: a.cached,
            addr: a.addr.as_ref().map(tagging_pass),
            kont: a.kont.as_ref().map(tagging_pass),
        }))),
        Expr::If(i) => Rc::new(Expr::If(Rc::new(IfExpr {
            cond: tagging_pass(&i.cond),
            then_branch: tagging_pass(&i.then_branch),
            else_branch: tagging_pass(&i.else_branch),
        }))),
        Expr::Let(l) => Rc::new(Expr::Let(Rc::new(LetExpr {
            name: l.name.clone(),
            bound: tagging_pass(&l.bound),
            body: tagging_pass(&l.body),
            recursive: l.recursive,
            from_define: l.from_define,
        }))),
        Expr::Prim(p) => Rc::new(Expr::Prim(Rc::new(PrimExpr {
            op: p.op,
            args: p.args.iter().map(tagging_pass).collect(),
        }))),
        Expr::Sample(s) => Rc::new(Expr::Sample(Rc::new(SampleExpr {
            site: s.site,
            erp: s.erp,
            params: s.params.iter().map(tagging_pass).collect(),
            addr: s.addr.as_ref().map(tagging_pass),
            kont: s.kont.as_ref().map(tagging_pass),
        }))),
        Expr::Observe(o) => Rc::new(Expr::Observe(Rc::new(ObserveExpr {
            site: o.site,
            erp: o.erp,
            params: o.params.iter().map(tagging_pass).collect(),
            observed: tagging_pass(&o.observed),
            addr: o.addr.as_ref().map(tagging_pass),
            kont: o.kont.as_ref().map(tagging_pass),
        }))),
        Expr::QueryAdd(q) => Rc::new(Expr::QueryAdd(Rc::new(QueryAddExpr {
            site: q.site,
            key: tagging_pass(&q.key),
            value: tagging_pass(&q.value),
            addr: q.addr.as_ref().map(tagging_pass),
            kont: q.kont.as_ref().map(tagging_pass),
        }))),
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Pass 3: addressing
// ═══════════════════════════════════════════════════════════════════════

/// `(addr-extend _addr <id>)` — the path the enclosing scope holds, extended
/// with this node's own id. At the top level `_addr` is bound to the root
/// path by the initial environment.
fn addr_extend_expr(id: SourceId) -> Rc<Expr> {
    Rc::new(Expr::Prim(Rc::new(PrimExpr {
        op: PrimOp::AddrExtend,
        args: vec![
            Rc::new(Expr::Var(ADDR_VAR.into())),
            Rc::new(Expr::Literal(LitVal::Int(id as i64))),
        ],
    })))
}

fn addressing_pass(e: &Rc<Expr>) -> Rc<Expr> {
    match e.as_ref() {
        Expr::Literal(_) | Expr::Var(_) => e.clone(),
        Expr::Lambda(l) => {
            let addr_param = l.addr_param.clone().or_else(|| Some(ADDR_VAR.into()));
            Rc::new(Expr::Lambda(Rc::new(LambdaExpr::new(
                l.id,
                l.params.clone(),
                addr_param,
                l.k_param.clone(),
                addressing_pass(&l.body),
                l.tagged,
                l.is_kont,
            ))))
        }
        Expr::Apply(a) => Rc::new(Expr::Apply(Rc::new(ApplyExpr {
            callsite: a.callsite,
            callee: addressing_pass(&a.callee),
            args: a.args.iter().map(addressing_pass).collect(),
            cached: a.cached,
            addr: Some(
                a.addr
                    .clone()
                    .unwrap_or_else(|| addr_extend_expr(a.callsite)),
            ),
            kont: a.kont.as_ref().map(addressing_pass),
        }))),
        Expr::If(i) => Rc::new(Expr::If(Rc::new(IfExpr {
            cond: addressing_pass(&i.cond),
            then_branch: addressing_pass(&i.then_branch),
            else_branch: addressing_pass(&i.else_branch),
        }))),
        Expr::Let(l) => Rc::new(Expr::Let(Rc::new(LetExpr {
            name: l.name.clone(),
            bound: addressing_pass(&l.bound),
            body: addressing_pass(&l.body),
            recursive: l.recursive,
            from_define: l.from_define,
        }))),
        Expr::Prim(p) => Rc::new(Expr::Prim(Rc::new(PrimExpr {
            op: p.op,
            args: p.args.iter().map(addressing_pass).collect(),
        }))),
        Expr::Sample(s) => Rc::new(Expr::Sample(Rc::new(SampleExpr {
            site: s.site,
            erp: s.erp,
            params: s.params.iter().map(addressing_pass).collect(),
            addr: Some(s.addr.clone().unwrap_or_else(|| addr_extend_expr(s.site))),
            kont: s.kont.as_ref().map(addressing_pass),
        }))),
        Expr::Observe(o) => Rc::new(Expr::Observe(Rc::new(ObserveExpr {
            site: o.site,
            erp: o.erp,
            params: o.params.iter().map(addressing_pass).collect(),
            observed: addressing_pass(&o.observed),
            addr: Some(o.addr.clone().unwrap_or_else(|| addr_extend_expr(o.site))),
            kont: o.kont.as_ref().map(addressing_pass),
        }))),
        Expr::QueryAdd(q) => Rc::new(Expr::QueryAdd(Rc::new(QueryAddExpr {
            site: q.site,
            key: addressing_pass(&q.key),
            value: addressing_pass(&q.value),
            addr: Some(q.addr.clone().unwrap_or_else(|| addr_extend_expr(q.site))),
            kont: q.kont.as_ref().map(addressing_pass),
        }))),
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Pass 4: continuation-passing style
// ═══════════════════════════════════════════════════════════════════════
//
// Normal form produced (and verified by `check_cps_normal_form`):
//
//   * every user lambda has a `_k` parameter; its body is a *tail*
//     expression;
//   * tail expressions are: a call or probabilistic effect carrying a
//     continuation; an `if` with a trivial condition and tail branches; a
//     `let` with a trivial bound and a tail body; or an application of a
//     continuation to a trivial value;
//   * trivial expressions contain no calls or effects outside nested lambda
//     bodies.
//
// Continuation lambdas (`is_kont`) take exactly one parameter and are never
// cached, tagged, or addressed — the pipeline order guarantees the first
// three passes never see them.

fn cps_pass(body: &Rc<Expr>, gen: &mut IdGen) -> Rc<Expr> {
    if already_cps(body) {
        return body.clone();
    }
    // Defines evaluate once, outside any proposal; their bound expressions
    // are trivial (parser-checked), so only lambdas inside them change.
    match body.as_ref() {
        Expr::Let(l) if l.from_define => {
            let bound = cps_trivial(&l.bound, gen);
            let rest = cps_pass(&l.body, gen);
            Rc::new(Expr::Let(Rc::new(LetExpr {
                name: l.name.clone(),
                bound,
                body: rest,
                recursive: l.recursive,
                from_define: true,
            })))
        }
        _ => {
            // The main expression's continuation is `_k`, bound to the halt
            // continuation in the initial environment.
            let k = Rc::new(Expr::Var(KONT_VAR.into()));
            cps_tail(body, &k, gen)
        }
    }
}

/// True when the tree already carries CPS plumbing (applying the pass twice
/// is a no-op rather than a corruption).
fn already_cps(e: &Rc<Expr>) -> bool {
    match e.as_ref() {
        Expr::Lambda(l) => l.k_param.is_some() || l.is_kont,
        Expr::Apply(a) => {
            a.kont.is_some()
                || already_cps(&a.callee)
                || a.args.iter().any(already_cps)
        }
        Expr::Let(l) => already_cps(&l.bound) || already_cps(&l.body),
        Expr::If(i) => {
            already_cps(&i.cond) || already_cps(&i.then_branch) || already_cps(&i.else_branch)
        }
        Expr::Prim(p) => p.args.iter().any(already_cps),
        Expr::Sample(s) => s.kont.is_some() || s.params.iter().any(already_cps),
        Expr::Observe(o) => {
            o.kont.is_some() || o.params.iter().any(already_cps) || already_cps(&o.observed)
        }
        Expr::QueryAdd(q) => {
            q.kont.is_some() || already_cps(&q.key) || already_cps(&q.value)
        }
        Expr::Literal(_) | Expr::Var(_) => false,
    }
}

/// No calls or probabilistic effects outside nested lambda bodies.
pub fn is_trivial(e: &Expr) -> bool {
    match e {
        Expr::Literal(_) | Expr::Var(_) | Expr::Lambda(_) => true,
        Expr::Apply(_) | Expr::Sample(_) | Expr::Observe(_) | Expr::QueryAdd(_) => false,
        Expr::If(i) => {
            is_trivial(&i.cond) && is_trivial(&i.then_branch) && is_trivial(&i.else_branch)
        }
        Expr::Let(l) => is_trivial(&l.bound) && is_trivial(&l.body),
        Expr::Prim(p) => p.args.iter().all(|a| is_trivial(a)),
    }
}

fn make_klambda(gen: &mut IdGen, param: Rc<str>, body: Rc<Expr>) -> Rc<Expr> {
    Rc::new(Expr::Lambda(Rc::new(LambdaExpr::new(
        gen.fresh(),
        vec![param],
        None,
        None,
        body,
        false,
        true,
    ))))
}

/// `(k v)` — continuation application: uncached, unaddressed, no further
/// continuation.
fn apply_kont(k: &Rc<Expr>, v: Rc<Expr>, gen: &mut IdGen) -> Rc<Expr> {
    Rc::new(Expr::Apply(Rc::new(ApplyExpr {
        callsite: gen.fresh(),
        callee: k.clone(),
        args: vec![v],
        cached: false,
        addr: None,
        kont: None,
    })))
}

/// Rewrites a trivial expression: the only change is CPS-converting the
/// bodies of lambdas nested inside it.
fn cps_trivial(e: &Rc<Expr>, gen: &mut IdGen) -> Rc<Expr> {
    match e.as_ref() {
        Expr::Literal(_) | Expr::Var(_) => e.clone(),
        Expr::Lambda(l) => cps_lambda(l, gen),
        Expr::Prim(p) => Rc::new(Expr::Prim(Rc::new(PrimExpr {
            op: p.op,
            args: p.args.iter().map(|a| cps_trivial(a, gen)).collect(),
        }))),
        Expr::If(i) => Rc::new(Expr::If(Rc::new(IfExpr {
            cond: cps_trivial(&i.cond, gen),
            then_branch: cps_trivial(&i.then_branch, gen),
            else_branch: cps_trivial(&i.else_branch, gen),
        }))),
        Expr::Let(l) => Rc::new(Expr::Let(Rc::new(LetExpr {
            name: l.name.clone(),
            bound: cps_trivial(&l.bound, gen),
            body: cps_trivial(&l.body, gen),
            recursive: l.recursive,
            from_define: l.from_define,
        }))),
        Expr::Apply(_) | Expr::Sample(_) | Expr::Observe(_) | Expr::QueryAdd(_) => {
            unreachable!("cps_trivial called on a serious expression")
        }
    }
}

fn cps_lambda(l: &Rc<LambdaExpr>, gen: &mut IdGen) -> Rc<Expr> {
    if l.k_param.is_some() || l.is_kont {
        return Rc::new(Expr::Lambda(l.clone()));
    }
    let k = Rc::new(Expr::Var(KONT_VAR.into()));
    Rc::new(Expr::Lambda(Rc::new(LambdaExpr::new(
        l.id,
        l.params.clone(),
        l.addr_param.clone(),
        Some(KONT_VAR.into()),
        cps_tail(&l.body, &k, gen),
        l.tagged,
        false,
    ))))
}

/// Converts `e` in tail position with continuation expression `k` (always a
/// variable or a continuation lambda).
fn cps_tail(e: &Rc<Expr>, k: &Rc<Expr>, gen: &mut IdGen) -> Rc<Expr> {
    if is_trivial(e) {
        return apply_kont(k, cps_trivial(e, gen), gen);
    }
    match e.as_ref() {
        Expr::Let(l) => {
            if is_trivial(&l.bound) {
                Rc::new(Expr::Let(Rc::new(LetExpr {
                    name: l.name.clone(),
                    bound: cps_trivial(&l.bound, gen),
                    body: cps_tail(&l.body, k, gen),
                    recursive: l.recursive,
                    from_define: l.from_define,
                })))
            } else {
                // (let (x M) B) where M is serious: run M with a continuation
                // that binds x and continues with B.
                let body = cps_tail(&l.body, k, gen);
                let kont = make_klambda(gen, l.name.clone(), body);
                cps_tail(&l.bound, &kont, gen)
            }
        }
        Expr::If(i) => {
            if is_trivial(&i.cond) {
                // Both branches need the continuation; bind it to a variable
                // first unless it already is one, so the code (and the
                // continuation lambda) isn't duplicated per branch.
                let (k_use, join) = match k.as_ref() {
                    Expr::Var(_) => (k.clone(), None),
                    _ => {
                        let name = gen.fresh_name("k");
                        (Rc::new(Expr::Var(name.clone())) as Rc<Expr>, Some(name))
                    }
                };
                let body = Rc::new(Expr::If(Rc::new(IfExpr {
                    cond: cps_trivial(&i.cond, gen),
                    then_branch: cps_tail(&i.then_branch, &k_use, gen),
                    else_branch: cps_tail(&i.else_branch, &k_use, gen),
                })));
                match join {
                    None => body,
                    Some(name) => Rc::new(Expr::Let(Rc::new(LetExpr {
                        name,
                        bound: k.clone(),
                        body,
                        recursive: false,
                        from_define: false,
                    }))),
                }
            } else {
                // Hoist the serious condition.
                let c = gen.fresh_name("c");
                let inner = Rc::new(Expr::If(Rc::new(IfExpr {
                    cond: Rc::new(Expr::Var(c.clone())),
                    then_branch: i.then_branch.clone(),
                    else_branch: i.else_branch.clone(),
                })));
                let body = cps_tail(&inner, k, gen);
                let kont = make_klambda(gen, c, body);
                cps_tail(&i.cond, &kont, gen)
            }
        }
        Expr::Apply(a) => {
            let mut children = vec![a.callee.clone()];
            children.extend(a.args.iter().cloned());
            let a2 = a.clone();
            match hoist_first_serious(e, &children, k, gen, move |ch| {
                let mut it = ch.into_iter();
                let callee = it.next().expect("callee present");
                Rc::new(Expr::Apply(Rc::new(ApplyExpr {
                    callsite: a2.callsite,
                    callee,
                    args: it.collect(),
                    cached: a2.cached,
                    addr: a2.addr.clone(),
                    kont: None,
                })))
            }) {
                Some(hoisted) => hoisted,
                None => Rc::new(Expr::Apply(Rc::new(ApplyExpr {
                    callsite: a.callsite,
                    callee: cps_trivial(&a.callee, gen),
                    args: a.args.iter().map(|x| cps_trivial(x, gen)).collect(),
                    cached: a.cached,
                    addr: a.addr.clone(),
                    kont: Some(k.clone()),
                }))),
            }
        }
        Expr::Sample(s) => {
            let children: Vec<Rc<Expr>> = s.params.clone();
            let s2 = s.clone();
            match hoist_first_serious(e, &children, k, gen, move |ch| {
                Rc::new(Expr::Sample(Rc::new(SampleExpr {
                    site: s2.site,
                    erp: s2.erp,
                    params: ch,
                    addr: s2.addr.clone(),
                    kont: None,
                })))
            }) {
                Some(hoisted) => hoisted,
                None => Rc::new(Expr::Sample(Rc::new(SampleExpr {
                    site: s.site,
                    erp: s.erp,
                    params: s.params.iter().map(|x| cps_trivial(x, gen)).collect(),
                    addr: s.addr.clone(),
                    kont: Some(k.clone()),
                }))),
            }
        }
        Expr::Observe(o) => {
            let mut children = o.params.clone();
            children.push(o.observed.clone());
            let o2 = o.clone();
            match hoist_first_serious(e, &children, k, gen, move |mut ch| {
                let observed = ch.pop().expect("observed present");
                Rc::new(Expr::Observe(Rc::new(ObserveExpr {
                    site: o2.site,
                    erp: o2.erp,
                    params: ch,
                    observed,
                    addr: o2.addr.clone(),
                    kont: None,
                })))
            }) {
                Some(hoisted) => hoisted,
                None => Rc::new(Expr::Observe(Rc::new(ObserveExpr {
                    site: o.site,
                    erp: o.erp,
                    params: o.params.iter().map(|x| cps_trivial(x, gen)).collect(),
                    observed: cps_trivial(&o.observed, gen),
                    addr: o.addr.clone(),
                    kont: Some(k.clone()),
                }))),
            }
        }
        Expr::QueryAdd(q) => {
            let children = vec![q.key.clone(), q.value.clone()];
            let q2 = q.clone();
            match hoist_first_serious(e, &children, k, gen, move |ch| {
                let mut it = ch.into_iter();
                Rc::new(Expr::QueryAdd(Rc::new(QueryAddExpr {
                    site: q2.site,
                    key: it.next().expect("key present"),
                    value: it.next().expect("value present"),
                    addr: q2.addr.clone(),
                    kont: None,
                })))
            }) {
                Some(hoisted) => hoisted,
                None => Rc::new(Expr::QueryAdd(Rc::new(QueryAddExpr {
                    site: q.site,
                    key: cps_trivial(&q.key, gen),
                    value: cps_trivial(&q.value, gen),
                    addr: q.addr.clone(),
                    kont: Some(k.clone()),
                }))),
            }
        }
        Expr::Prim(p) => {
            // Some argument is serious (a fully trivial prim was handled at
            // the top). Hoist it; the rebuilt prim re-enters cps_tail and
            // eventually lands in the trivial case.
            let children = p.args.clone();
            let op = p.op;
            hoist_first_serious(e, &children, k, gen, move |ch| {
                Rc::new(Expr::Prim(Rc::new(PrimExpr { op, args: ch })))
            })
            .expect("prim with no serious argument is trivial")
        }
        Expr::Literal(_) | Expr::Var(_) | Expr::Lambda(_) => {
            unreachable!("trivial expressions are handled before the match")
        }
    }
}

/// Finds the first serious child, binds its value to a fresh variable via a
/// continuation lambda, and re-enters `cps_tail` on the node rebuilt with
/// the variable in the child's place. Returns `None` when every child is
/// trivial. Children are hoisted left to right, preserving the program's
/// evaluation (and random-draw) order.
fn hoist_first_serious(
    _original: &Rc<Expr>,
    children: &[Rc<Expr>],
    k: &Rc<Expr>,
    gen: &mut IdGen,
    rebuild: impl FnOnce(Vec<Rc<Expr>>) -> Rc<Expr>,
) -> Option<Rc<Expr>> {
    let idx = children.iter().position(|c| !is_trivial(c))?;
    let name = gen.fresh_name("t");
    let mut new_children = children.to_vec();
    new_children[idx] = Rc::new(Expr::Var(name.clone()));
    let rebuilt = rebuild(new_children);
    let body = cps_tail(&rebuilt, k, gen);
    let kont = make_klambda(gen, name, body);
    Some(cps_tail(&children[idx], &kont, gen))
}

// ═══════════════════════════════════════════════════════════════════════
// Normal-form checker
// ═══════════════════════════════════════════════════════════════════════

/// Verifies the invariants of fully transformed (addressed + CPS) code.
/// Returns a description of the first violation.
pub fn check_cps_normal_form(body: &Rc<Expr>) -> Result<(), String> {
    // Walk the define chain, then require the main expression to be a tail.
    let mut cur = body.clone();
    loop {
        match cur.clone().as_ref() {
            Expr::Let(l) if l.from_define => {
                check_trivial(&l.bound)?;
                cur = l.body.clone();
            }
            _ => return check_tail(&cur),
        }
    }
}

fn check_tail(e: &Rc<Expr>) -> Result<(), String> {
    match e.as_ref() {
        Expr::Apply(a) => {
            check_trivial(&a.callee)?;
            for arg in &a.args {
                check_trivial(arg)?;
            }
            match (&a.kont, &a.addr) {
                (Some(k), _) => {
                    check_kont_expr(k)?;
                    if let Some(addr) = &a.addr {
                        check_trivial(addr)?;
                    }
                    Ok(())
                }
                (None, None) => {
                    // Continuation application.
                    if a.cached {
                        return Err(format!("cached continuation application at call<{}>", a.callsite));
                    }
                    if a.args.len() != 1 {
                        return Err(format!(
                            "continuation application with {} arguments at call<{}>",
                            a.args.len(),
                            a.callsite
                        ));
                    }
                    Ok(())
                }
                (None, Some(_)) => Err(format!(
                    "addressed call without a continuation at call<{}>",
                    a.callsite
                )),
            }
        }
        Expr::Sample(s) => {
            for p in &s.params {
                check_trivial(p)?;
            }
            match &s.kont {
                Some(k) => check_kont_expr(k),
                None => Err(format!("sample<{}> without a continuation", s.site)),
            }
        }
        Expr::Observe(o) => {
            for p in &o.params {
                check_trivial(p)?;
            }
            check_trivial(&o.observed)?;
            match &o.kont {
                Some(k) => check_kont_expr(k),
                None => Err(format!("observe<{}> without a continuation", o.site)),
            }
        }
        Expr::QueryAdd(q) => {
            check_trivial(&q.key)?;
            check_trivial(&q.value)?;
            match &q.kont {
                Some(k) => check_kont_expr(k),
                None => Err(format!("query-add<{}> without a continuation", q.site)),
            }
        }
        Expr::If(i) => {
            check_trivial(&i.cond)?;
            check_tail(&i.then_branch)?;
            check_tail(&i.else_branch)
        }
        Expr::Let(l) => {
            check_trivial(&l.bound)?;
            check_tail(&l.body)
        }
        other => Err(format!(
            "tail position does not end in an application: {:?}",
            variant_name(other)
        )),
    }
}

fn check_kont_expr(k: &Rc<Expr>) -> Result<(), String> {
    match k.as_ref() {
        Expr::Var(_) => Ok(()),
        Expr::Lambda(l) if l.is_kont => check_klambda(l),
        other => Err(format!(
            "continuation argument is neither a variable nor a continuation lambda: {}",
            variant_name(other)
        )),
    }
}

fn check_klambda(l: &LambdaExpr) -> Result<(), String> {
    if l.tagged || l.addr_param.is_some() || l.k_param.is_some() {
        return Err(format!(
            "continuation lambda<{}> carries user-lambda transform state",
            l.id
        ));
    }
    if l.params.len() != 1 {
        return Err(format!(
            "continuation lambda<{}> takes {} parameters",
            l.id,
            l.params.len()
        ));
    }
    check_tail(&l.body)
}

fn check_trivial(e: &Rc<Expr>) -> Result<(), String> {
    match e.as_ref() {
        Expr::Literal(_) | Expr::Var(_) => Ok(()),
        Expr::Lambda(l) => {
            if l.is_kont {
                check_klambda(l)
            } else if l.k_param.is_none() {
                Err(format!("user lambda<{}> was not CPS-converted", l.id))
            } else {
                check_tail(&l.body)
            }
        }
        Expr::Prim(p) => {
            for a in &p.args {
                check_trivial(a)?;
            }
            Ok(())
        }
        Expr::If(i) => {
            check_trivial(&i.cond)?;
            check_trivial(&i.then_branch)?;
            check_trivial(&i.else_branch)
        }
        Expr::Let(l) => {
            check_trivial(&l.bound)?;
            check_trivial(&l.body)
        }
        other => Err(format!(
            "serious expression in trivial position: {}",
            variant_name(other)
        )),
    }
}

fn variant_name(e: &Expr) -> &'static str {
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
    use crate::lang::parse::parse_program;

    const FACT: &str = "
        (define fact (lambda (n) (if (= n 0) 1 (* n (fact (- n 1))))))
        (fact 5)";

    const MODEL: &str = "
        (define weights (list 0.5 0.5))
        (define pick (lambda () (sample categorical weights)))
        (define run (lambda (n)
          (if (= n 0)
              (query-add 0 (pick))
              (let (x (pick))
                (let (_ (observe gaussian x 1 0.5))
                  (run (- n 1)))))))
        (run 3)";

    fn walk(e: &Rc<Expr>, f: &mut impl FnMut(&Expr)) {
        f(e);
        match e.as_ref() {
            Expr::Literal(_) | Expr::Var(_) => {}
            Expr::Lambda(l) => walk(&l.body, f),
            Expr::Apply(a) => {
                walk(&a.callee, f);
                for x in &a.args {
                    walk(x, f);
                }
                if let Some(x) = &a.addr {
                    walk(x, f);
                }
                if let Some(x) = &a.kont {
                    walk(x, f);
                }
            }
            Expr::If(i) => {
                walk(&i.cond, f);
                walk(&i.then_branch, f);
                walk(&i.else_branch, f);
            }
            Expr::Let(l) => {
                walk(&l.bound, f);
                walk(&l.body, f);
            }
            Expr::Prim(p) => {
                for x in &p.args {
                    walk(x, f);
                }
            }
            Expr::Sample(s) => {
                for x in &s.params {
                    walk(x, f);
                }
                if let Some(x) = &s.addr {
                    walk(x, f);
                }
                if let Some(x) = &s.kont {
                    walk(x, f);
                }
            }
            Expr::Observe(o) => {
                for x in &o.params {
                    walk(x, f);
                }
                walk(&o.observed, f);
                if let Some(x) = &o.addr {
                    walk(x, f);
                }
                if let Some(x) = &o.kont {
                    walk(x, f);
                }
            }
            Expr::QueryAdd(q) => {
                walk(&q.key, f);
                walk(&q.value, f);
                if let Some(x) = &q.addr {
                    walk(x, f);
                }
                if let Some(x) = &q.kont {
                    walk(x, f);
                }
            }
        }
    }

    #[test]
    fn caching_marks_every_application() {
        let prog = parse_program(FACT).unwrap();
        let out = transform(
            &prog,
            Pipeline {
                caching: true,
                tagging: false,
                addressing: false,
                cps: false,
            },
        );
        let mut total = 0;
        let mut cached = 0;
        walk(&out.body, &mut |e| {
            if let Expr::Apply(a) = e {
                total += 1;
                if a.cached {
                    cached += 1;
                }
            }
        });
        assert!(total > 0);
        assert_eq!(total, cached);
    }

    #[test]
    fn tagging_marks_every_lambda() {
        let prog = parse_program(MODEL).unwrap();
        let out = transform(
            &prog,
            Pipeline {
                caching: false,
                tagging: true,
                addressing: false,
                cps: false,
            },
        );
        let mut total = 0;
        let mut tagged = 0;
        walk(&out.body, &mut |e| {
            if let Expr::Lambda(l) = e {
                total += 1;
                if l.tagged {
                    tagged += 1;
                }
            }
        });
        assert!(total > 0);
        assert_eq!(total, tagged);
    }

    #[test]
    fn addressing_threads_the_call_path() {
        let prog = parse_program(MODEL).unwrap();
        let out = transform_for(&prog, Engine::Lightweight);
        walk(&out.body, &mut |e| match e {
            Expr::Lambda(l) => assert!(l.addr_param.is_some(), "lambda<{}> unaddressed", l.id),
            Expr::Apply(a) => assert!(a.addr.is_some(), "call<{}> unaddressed", a.callsite),
            Expr::Sample(s) => assert!(s.addr.is_some(), "sample<{}> unaddressed", s.site),
            Expr::Observe(o) => assert!(o.addr.is_some(), "observe<{}> unaddressed", o.site),
            Expr::QueryAdd(q) => assert!(q.addr.is_some(), "query-add<{}> unaddressed", q.site),
            _ => {}
        });
        let shown = out.to_string();
        assert!(shown.contains("&a (addr-extend _addr "), "{shown}");
    }

    #[test]
    fn lightweight_pipeline_adds_no_cache_state() {
        let prog = parse_program(MODEL).unwrap();
        let out = transform_for(&prog, Engine::Lightweight);
        walk(&out.body, &mut |e| match e {
            Expr::Apply(a) => assert!(!a.cached),
            Expr::Lambda(l) => assert!(!l.tagged && !l.is_kont && l.k_param.is_none()),
            _ => {}
        });
    }

    #[test]
    fn cps_output_is_in_normal_form() {
        for engine in [Engine::Cps, Engine::C3] {
            for src in [FACT, MODEL] {
                let prog = parse_program(src).unwrap();
                let out = transform_for(&prog, engine);
                check_cps_normal_form(&out.body)
                    .unwrap_or_else(|e| panic!("{engine}: {e}\n{out}"));
            }
        }
    }

    #[test]
    fn cps_plumbing_is_never_cached_tagged_or_addressed() {
        let prog = parse_program(MODEL).unwrap();
        let out = transform_for(&prog, Engine::C3);
        walk(&out.body, &mut |e| match e {
            Expr::Lambda(l) if l.is_kont => {
                assert!(!l.tagged, "kont lambda<{}> tagged", l.id);
                assert!(l.addr_param.is_none(), "kont lambda<{}> addressed", l.id);
                assert!(l.k_param.is_none(), "kont lambda<{}> has a k param", l.id);
            }
            Expr::Apply(a) if a.kont.is_none() && a.addr.is_none() => {
                assert!(!a.cached, "kont application call<{}> cached", a.callsite);
            }
            _ => {}
        });
    }

    #[test]
    fn user_calls_keep_cache_and_address_state_under_cps() {
        let prog = parse_program(MODEL).unwrap();
        let out = transform_for(&prog, Engine::C3);
        let mut user_calls = 0;
        walk(&out.body, &mut |e| {
            if let Expr::Apply(a) = e {
                if a.kont.is_some() {
                    user_calls += 1;
                    assert!(a.cached, "user call<{}> lost its cache mark", a.callsite);
                    assert!(a.addr.is_some(), "user call<{}> lost its address", a.callsite);
                }
            }
        });
        assert!(user_calls > 0);
    }

    #[test]
    fn first_three_passes_are_idempotent() {
        let prog = parse_program(MODEL).unwrap();
        for p in [
            Pipeline {
                caching: true,
                tagging: false,
                addressing: false,
                cps: false,
            },
            Pipeline {
                caching: false,
                tagging: true,
                addressing: false,
                cps: false,
            },
            Pipeline {
                caching: false,
                tagging: false,
                addressing: true,
                cps: false,
            },
        ] {
            let once = transform(&prog, p);
            let twice = transform(&once, p);
            assert_eq!(once.to_string(), twice.to_string(), "pipeline {p:?}");
        }
    }

    #[test]
    fn cps_pass_is_a_noop_on_already_converted_code() {
        let prog = parse_program(MODEL).unwrap();
        let once = transform_for(&prog, Engine::C3);
        let twice = transform_for(&once, Engine::C3);
        assert_eq!(once.to_string(), twice.to_string());
    }

    #[test]
    fn fresh_ids_stay_unique() {
        let prog = parse_program(MODEL).unwrap();
        let out = transform_for(&prog, Engine::C3);
        assert!(out.next_id >= prog.next_id);
        let mut seen = std::collections::HashSet::new();
        walk(&out.body, &mut |e| {
            let id = match e {
                Expr::Lambda(l) => Some(l.id),
                Expr::Apply(a) => Some(a.callsite),
                Expr::Sample(s) => Some(s.site),
                Expr::Observe(o) => Some(o.site),
                Expr::QueryAdd(q) => Some(q.site),
                _ => None,
            };
            if let Some(id) = id {
                assert!(seen.insert(id), "duplicate id {id}");
                assert!(id < out.next_id, "id {id} beyond next_id {}", out.next_id);
            }
        });
    }

    #[test]
    fn evaluation_order_is_preserved_for_serious_arguments() {
        // (f (g 1) (h 2)) must evaluate g before h after CPS; the hoisting
        // is left to right, which shows up as g's call enclosing h's.
        let src = "
            (define g (lambda (x) x))
            (define h (lambda (x) x))
            (define f (lambda (a b) a))
            (f (g 1) (h 2))";
        let prog = parse_program(src).unwrap();
        let out = transform_for(&prog, Engine::Cps);
        let shown = out.to_string();
        let g_pos = shown.rfind(" g ").expect("g applied");
        let h_pos = shown.rfind(" h ").expect("h applied");
        assert!(g_pos < h_pos, "g must be called before h:\n{shown}");
        check_cps_normal_form(&out.body).unwrap();
    }

    #[test]
    fn serious_if_conditions_are_hoisted() {
        let src = "
            (define coin (lambda () (sample bernoulli 0.5)))
            (if (coin) 1 2)";
        let prog = parse_program(src).unwrap();
        let out = transform_for(&prog, Engine::Cps);
        check_cps_normal_form(&out.body).unwrap();
    }
}
