//! Syntax tree.
//!
//! Programs parse into `Expr` trees. Nodes that the runtime needs to identify
//! — lambdas, applications, and the three probabilistic intrinsics — carry a
//! stable `SourceId` assigned in pre-order during parsing; transform passes
//! preserve the ids of surviving nodes and draw fresh ones for nodes they
//! introduce, so ids remain unique within a program.
//!
//! The transform pipeline communicates through optional fields rather than
//! new node kinds: the caching pass flips `ApplyExpr::cached`, the tagging
//! pass flips `LambdaExpr::tagged`, the addressing pass fills `addr_param` /
//! `addr`, and the CPS pass fills `k_param` / `kont` and introduces
//! continuation lambdas marked `is_kont`.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;

pub type SourceId = u32;

/// Name bound to the current call path inside every addressed lambda, and
/// bound to the root path in the initial environment.
pub const ADDR_VAR: &str = "_addr";
/// Name bound to the current continuation inside every CPS-converted lambda.
pub const KONT_VAR: &str = "_k";

// ═══════════════════════════════════════════════════════════════════════
// Operators and distributions
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    Lt,
    Gt,
    Not,
    List,
    Cons,
    Nth,
    Len,
    /// Internal: extends a call-path address by one component. Introduced by
    /// the addressing pass; not part of the surface syntax.
    AddrExtend,
}

impl PrimOp {
    pub fn name(self) -> &'static str {
        match self {
            PrimOp::Add => "+",
            PrimOp::Sub => "-",
            PrimOp::Mul => "*",
            PrimOp::Div => "/",
            PrimOp::Eq => "=",
            PrimOp::Lt => "<",
            PrimOp::Gt => ">",
            PrimOp::Not => "not",
            PrimOp::List => "list",
            PrimOp::Cons => "cons",
            PrimOp::Nth => "nth",
            PrimOp::Len => "len",
            PrimOp::AddrExtend => "addr-extend",
        }
    }

    pub fn from_name(name: &str) -> Option<PrimOp> {
        Some(match name {
            "+" => PrimOp::Add,
            "-" => PrimOp::Sub,
            "*" => PrimOp::Mul,
            "/" => PrimOp::Div,
            "=" => PrimOp::Eq,
            "<" => PrimOp::Lt,
            ">" => PrimOp::Gt,
            "not" => PrimOp::Not,
            "list" => PrimOp::List,
            "cons" => PrimOp::Cons,
            "nth" => PrimOp::Nth,
            "len" => PrimOp::Len,
            _ => return None,
        })
    }

    /// Required argument count; `None` means variadic.
    pub fn arity(self) -> Option<usize> {
        match self {
            PrimOp::Not | PrimOp::Len => Some(1),
            PrimOp::List => None,
            _ => Some(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErpKind {
    Bernoulli,
    Categorical,
    Uniform,
    Gaussian,
    Gamma,
    Dirichlet,
}

impl ErpKind {
    pub fn name(self) -> &'static str {
        match self {
            ErpKind::Bernoulli => "bernoulli",
            ErpKind::Categorical => "categorical",
            ErpKind::Uniform => "uniform-continuous",
            ErpKind::Gaussian => "gaussian",
            ErpKind::Gamma => "gamma",
            ErpKind::Dirichlet => "dirichlet",
        }
    }

    pub fn from_name(name: &str) -> Option<ErpKind> {
        Some(match name {
            "bernoulli" => ErpKind::Bernoulli,
            "categorical" => ErpKind::Categorical,
            "uniform-continuous" | "uniform" => ErpKind::Uniform,
            "gaussian" => ErpKind::Gaussian,
            "gamma" => ErpKind::Gamma,
            "dirichlet" => ErpKind::Dirichlet,
            _ => return None,
        })
    }

    /// Number of distribution parameters (the observed value in an `observe`
    /// form is extra).
    pub fn param_count(self) -> usize {
        match self {
            ErpKind::Bernoulli | ErpKind::Categorical | ErpKind::Dirichlet => 1,
            ErpKind::Uniform | ErpKind::Gaussian | ErpKind::Gamma => 2,
        }
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Expressions
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, PartialEq)]
pub enum LitVal {
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(Rc<str>),
}

impl fmt::Display for LitVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LitVal::Bool(b) => write!(f, "{b}"),
            LitVal::Int(i) => write!(f, "{i}"),
            LitVal::Num(x) => write!(f, "{x:?}"),
            LitVal::Str(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Expr {
    Literal(LitVal),
    Var(Rc<str>),
    Lambda(Rc<LambdaExpr>),
    Apply(Rc<ApplyExpr>),
    If(Rc<IfExpr>),
    Let(Rc<LetExpr>),
    Prim(Rc<PrimExpr>),
    Sample(Rc<SampleExpr>),
    Observe(Rc<ObserveExpr>),
    QueryAdd(Rc<QueryAddExpr>),
}

#[derive(Debug, Clone)]
pub struct LambdaExpr {
    pub id: SourceId,
    pub params: Vec<Rc<str>>,
    /// Extra parameter receiving the caller's extended call path. Filled by
    /// the addressing pass; never set on continuation lambdas.
    pub addr_param: Option<Rc<str>>,
    /// Extra parameter receiving the continuation. Filled by the CPS pass;
    /// never set on continuation lambdas (they are the continuations).
    pub k_param: Option<Rc<str>>,
    pub body: Rc<Expr>,
    /// Free variables of the body (sorted, deduplicated), computed at
    /// construction. Closures over tagged lambdas snapshot these values.
    pub free_vars: Vec<Rc<str>>,
    /// Set by the tagging pass: closures over this lambda record a snapshot
    /// of their free variables for structural function-equivalence checks.
    pub tagged: bool,
    /// True for continuation lambdas introduced by the CPS pass. These are
    /// never cached, tagged, or addressed.
    pub is_kont: bool,
}

impl LambdaExpr {
    /// Builds a lambda, computing its free-variable list from the body and
    /// the full set of binders (params plus the address/continuation
    /// parameters when present).
    pub fn new(
        id: SourceId,
        params: Vec<Rc<str>>,
        addr_param: Option<Rc<str>>,
        k_param: Option<Rc<str>>,
        body: Rc<Expr>,
        tagged: bool,
        is_kont: bool,
    ) -> LambdaExpr {
        let mut bound: Vec<Rc<str>> = params.clone();
        if let Some(a) = &addr_param {
            bound.push(a.clone());
        }
        if let Some(k) = &k_param {
            bound.push(k.clone());
        }
        let mut free = BTreeSet::new();
        collect_free(&body, &mut bound, &mut free);
        LambdaExpr {
            id,
            params,
            addr_param,
            k_param,
            body,
            free_vars: free.into_iter().collect(),
            tagged,
            is_kont,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ApplyExpr {
    pub callsite: SourceId,
    pub callee: Rc<Expr>,
    pub args: Vec<Rc<Expr>>,
    /// Set by the caching pass: route this call through the call cache.
    pub cached: bool,
    /// Call path to pass to the callee. Filled by the addressing pass.
    pub addr: Option<Rc<Expr>>,
    /// Continuation to pass to the callee. Filled by the CPS pass. `None`
    /// on applications of continuation lambdas, which take plain arguments.
    pub kont: Option<Rc<Expr>>,
}

#[derive(Debug, Clone)]
pub struct IfExpr {
    pub cond: Rc<Expr>,
    pub then_branch: Rc<Expr>,
    pub else_branch: Rc<Expr>,
}

#[derive(Debug, Clone)]
pub struct LetExpr {
    pub name: Rc<str>,
    pub bound: Rc<Expr>,
    pub body: Rc<Expr>,
    /// True when the bound expression may refer to `name` (a `define`d
    /// lambda). The closure ties the knot at application time.
    pub recursive: bool,
    /// True when this let was desugared from a top-level `define`. Engines
    /// evaluate the chain of leading defines once per run.
    pub from_define: bool,
}

#[derive(Debug, Clone)]
pub struct PrimExpr {
    pub op: PrimOp,
    pub args: Vec<Rc<Expr>>,
}

#[derive(Debug, Clone)]
pub struct SampleExpr {
    pub site: SourceId,
    pub erp: ErpKind,
    pub params: Vec<Rc<Expr>>,
    pub addr: Option<Rc<Expr>>,
    pub kont: Option<Rc<Expr>>,
}

#[derive(Debug, Clone)]
pub struct ObserveExpr {
    pub site: SourceId,
    pub erp: ErpKind,
    pub params: Vec<Rc<Expr>>,
    pub observed: Rc<Expr>,
    pub addr: Option<Rc<Expr>>,
    pub kont: Option<Rc<Expr>>,
}

#[derive(Debug, Clone)]
pub struct QueryAddExpr {
    pub site: SourceId,
    pub key: Rc<Expr>,
    pub value: Rc<Expr>,
    pub addr: Option<Rc<Expr>>,
    pub kont: Option<Rc<Expr>>,
}

// ═══════════════════════════════════════════════════════════════════════
// Free variables
// ═══════════════════════════════════════════════════════════════════════

/// Walks `expr` adding every variable not bound in `bound` to `out`. `bound`
/// is used as a scope stack: entries pushed while walking a binder's scope
/// are popped before returning.
pub fn collect_free(expr: &Expr, bound: &mut Vec<Rc<str>>, out: &mut BTreeSet<Rc<str>>) {
    match expr {
        Expr::Literal(_) => {}
        Expr::Var(name) => {
            if !bound.iter().any(|b| b.as_ref() == name.as_ref()) {
                out.insert(name.clone());
            }
        }
        Expr::Lambda(l) => {
            // The lambda's own free vars were computed at construction; any
            // of them not bound here are free in the enclosing expression.
            for v in &l.free_vars {
                if !bound.iter().any(|b| b.as_ref() == v.as_ref()) {
                    out.insert(v.clone());
                }
            }
        }
        Expr::Apply(a) => {
            collect_free(&a.callee, bound, out);
            for arg in &a.args {
                collect_free(arg, bound, out);
            }
            if let Some(e) = &a.addr {
                collect_free(e, bound, out);
            }
            if let Some(e) = &a.kont {
                collect_free(e, bound, out);
            }
        }
        Expr::If(i) => {
            collect_free(&i.cond, bound, out);
            collect_free(&i.then_branch, bound, out);
            collect_free(&i.else_branch, bound, out);
        }
        Expr::Let(l) => {
            if l.recursive {
                bound.push(l.name.clone());
                collect_free(&l.bound, bound, out);
                collect_free(&l.body, bound, out);
                bound.pop();
            } else {
                collect_free(&l.bound, bound, out);
                bound.push(l.name.clone());
                collect_free(&l.body, bound, out);
                bound.pop();
            }
        }
        Expr::Prim(p) => {
            for arg in &p.args {
                collect_free(arg, bound, out);
            }
        }
        Expr::Sample(s) => {
            for p in &s.params {
                collect_free(p, bound, out);
            }
            if let Some(e) = &s.addr {
                collect_free(e, bound, out);
            }
            if let Some(e) = &s.kont {
                collect_free(e, bound, out);
            }
        }
        Expr::Observe(o) => {
            for p in &o.params {
                collect_free(p, bound, out);
            }
            collect_free(&o.observed, bound, out);
            if let Some(e) = &o.addr {
                collect_free(e, bound, out);
            }
            if let Some(e) = &o.kont {
                collect_free(e, bound, out);
            }
        }
        Expr::QueryAdd(q) => {
            collect_free(&q.key, bound, out);
            collect_free(&q.value, bound, out);
            if let Some(e) = &q.addr {
                collect_free(e, bound, out);
            }
            if let Some(e) = &q.kont {
                collect_free(e, bound, out);
            }
        }
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Pretty printer
// ═══════════════════════════════════════════════════════════════════════
//
// Used by the `transform-dump` command and by tests that assert on the shape
// of transformed code. Transform effects are visible as markers:
//
//   (lambda<7> (x y) …)            plain lambda, id 7
//   (lambda<7>! …)                 tagged
//   (lambda<7> (x &a _addr &k _k)  addressing / CPS parameters
//   (klambda<21> (v) …)            continuation lambda
//   (call<9> f x)                  application, callsite 9
//   (call<9>* f x)                 cached
//   … &a <expr>                    call path argument
//   … &k <expr>                    continuation argument
//   (observe<4> gaussian m 1 => y) observation of y
//   (letrec (f …) …)               self-recursive binding

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Printer { f, indent: 0 }.expr(self)
    }
}

struct Printer<'a, 'b> {
    f: &'a mut fmt::Formatter<'b>,
    indent: usize,
}

impl<'a, 'b> Printer<'a, 'b> {
    fn newline(&mut self) -> fmt::Result {
        writeln!(self.f)?;
        for _ in 0..self.indent {
            write!(self.f, "  ")?;
        }
        Ok(())
    }

    fn expr(&mut self, e: &Expr) -> fmt::Result {
        match e {
            Expr::Literal(v) => write!(self.f, "{v}"),
            Expr::Var(n) => write!(self.f, "{n}"),
            Expr::Lambda(l) => self.lambda(l),
            Expr::Apply(a) => self.apply(a),
            Expr::If(i) => self.if_(i),
            Expr::Let(l) => self.let_(l),
            Expr::Prim(p) => self.prim(p),
            Expr::Sample(s) => self.sample(s),
            Expr::Observe(o) => self.observe(o),
            Expr::QueryAdd(q) => self.query_add(q),
        }
    }

    fn lambda(&mut self, l: &LambdaExpr) -> fmt::Result {
        let head = if l.is_kont { "klambda" } else { "lambda" };
        let tag = if l.tagged { "!" } else { "" };
        write!(self.f, "({head}<{}>{tag} (", l.id)?;
        let mut first = true;
        for p in &l.params {
            if !first {
                write!(self.f, " ")?;
            }
            write!(self.f, "{p}")?;
            first = false;
        }
        if let Some(a) = &l.addr_param {
            if !first {
                write!(self.f, " ")?;
            }
            write!(self.f, "&a {a}")?;
            first = false;
        }
        if let Some(k) = &l.k_param {
            if !first {
                write!(self.f, " ")?;
            }
            write!(self.f, "&k {k}")?;
        }
        write!(self.f, ")")?;
        self.indent += 1;
        self.newline()?;
        self.expr(&l.body)?;
        self.indent -= 1;
        write!(self.f, ")")
    }

    fn apply(&mut self, a: &ApplyExpr) -> fmt::Result {
        let star = if a.cached { "*" } else { "" };
        write!(self.f, "(call<{}>{star} ", a.callsite)?;
        self.expr(&a.callee)?;
        for arg in &a.args {
            write!(self.f, " ")?;
            self.expr(arg)?;
        }
        if let Some(e) = &a.addr {
            write!(self.f, " &a ")?;
            self.expr(e)?;
        }
        if let Some(e) = &a.kont {
            self.kont_arg(e)?;
        }
        write!(self.f, ")")
    }

    /// Continuation arguments are usually lambdas; give them their own line.
    fn kont_arg(&mut self, e: &Expr) -> fmt::Result {
        match e {
            Expr::Lambda(_) => {
                self.indent += 1;
                self.newline()?;
                write!(self.f, "&k ")?;
                self.expr(e)?;
                self.indent -= 1;
                Ok(())
            }
            _ => {
                write!(self.f, " &k ")?;
                self.expr(e)
            }
        }
    }

    fn if_(&mut self, i: &IfExpr) -> fmt::Result {
        write!(self.f, "(if ")?;
        self.expr(&i.cond)?;
        self.indent += 1;
        self.newline()?;
        self.expr(&i.then_branch)?;
        self.newline()?;
        self.expr(&i.else_branch)?;
        self.indent -= 1;
        write!(self.f, ")")
    }

    fn let_(&mut self, l: &LetExpr) -> fmt::Result {
        let head = if l.recursive { "letrec" } else { "let" };
        write!(self.f, "({head} ({} ", l.name)?;
        self.expr(&l.bound)?;
        write!(self.f, ")")?;
        self.indent += 1;
        self.newline()?;
        self.expr(&l.body)?;
        self.indent -= 1;
        write!(self.f, ")")
    }

    fn prim(&mut self, p: &PrimExpr) -> fmt::Result {
        write!(self.f, "({}", p.op.name())?;
        for arg in &p.args {
            write!(self.f, " ")?;
            self.expr(arg)?;
        }
        write!(self.f, ")")
    }

    fn sample(&mut self, s: &SampleExpr) -> fmt::Result {
        write!(self.f, "(sample<{}> {}", s.site, s.erp.name())?;
        for p in &s.params {
            write!(self.f, " ")?;
            self.expr(p)?;
        }
        if let Some(e) = &s.addr {
            write!(self.f, " &a ")?;
            self.expr(e)?;
        }
        if let Some(e) = &s.kont {
            self.kont_arg(e)?;
        }
        write!(self.f, ")")
    }

    fn observe(&mut self, o: &ObserveExpr) -> fmt::Result {
        write!(self.f, "(observe<{}> {}", o.site, o.erp.name())?;
        for p in &o.params {
            write!(self.f, " ")?;
            self.expr(p)?;
        }
        write!(self.f, " => ")?;
        self.expr(&o.observed)?;
        if let Some(e) = &o.addr {
            write!(self.f, " &a ")?;
            self.expr(e)?;
        }
        if let Some(e) = &o.kont {
            self.kont_arg(e)?;
        }
        write!(self.f, ")")
    }

    fn query_add(&mut self, q: &QueryAddExpr) -> fmt::Result {
        write!(self.f, "(query-add<{}> ", q.site)?;
        self.expr(&q.key)?;
        write!(self.f, " ")?;
        self.expr(&q.value)?;
        if let Some(e) = &q.addr {
            write!(self.f, " &a ")?;
            self.expr(e)?;
        }
        if let Some(e) = &q.kont {
            self.kont_arg(e)?;
        }
        write!(self.f, ")")
    }
}
