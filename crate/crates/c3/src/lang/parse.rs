//! S-expression parser.
//!
//! Surface syntax:
//!
//! ```text
//! program   := (define NAME expr)* expr
//! expr      := INT | NUM | STRING | true | false | NAME
//!            | (lambda (NAME*) expr)
//!            | (let (NAME expr) expr)
//!            | (if expr expr expr)
//!            | (and expr expr) | (or expr expr)        — sugar for if
//!            | (sample DIST expr*)
//!            | (observe DIST expr* expr)               — last arg observed
//!            | (query-add expr expr)
//!            | (PRIM expr*)
//!            | (expr expr*)                            — application
//! ```
//!
//! Defines are only allowed at the top, before the single final expression;
//! they desugar into a chain of `let`s marked `from_define`. A define whose
//! bound expression is a lambda may refer to itself (marked `recursive`).
//! Because engines evaluate the define chain once per run, define bodies must
//! not contain calls or probabilistic effects outside lambda bodies; the
//! parser rejects programs that violate this.
//!
//! Variables are scope-checked at parse time, so evaluation can never see an
//! unbound name. `SourceId`s are assigned in pre-order as forms are parsed.

use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use super::ast::{
    ApplyExpr, ErpKind, Expr, IfExpr, LambdaExpr, LetExpr, LitVal, ObserveExpr, PrimExpr, PrimOp,
    QueryAddExpr, SampleExpr, SourceId,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at {line}:{col}: {msg}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

fn err<T>(line: u32, col: u32, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        col,
        msg: msg.into(),
    })
}

// ═══════════════════════════════════════════════════════════════════════
// Lexer
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    LParen,
    RParen,
    Sym(Rc<str>),
    Int(i64),
    Num(f64),
    Str(Rc<str>),
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    line: u32,
    col: u32,
}

fn is_symbol_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '+' | '-' | '*' | '/' | '=' | '<' | '>' | '!' | '?' | '_' | '.')
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut toks = Vec::new();
    let mut chars = src.chars().peekable();
    let mut line: u32 = 1;
    let mut col: u32 = 1;

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        match c {
            c if c.is_whitespace() => {
                bump!();
            }
            ';' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '(' => {
                bump!();
                toks.push(Token {
                    kind: TokKind::LParen,
                    line: tline,
                    col: tcol,
                });
            }
            ')' => {
                bump!();
                toks.push(Token {
                    kind: TokKind::RParen,
                    line: tline,
                    col: tcol,
                });
            }
            '"' => {
                bump!();
                let mut s = String::new();
                loop {
                    match bump!() {
                        None => return err(tline, tcol, "unterminated string"),
                        Some('"') => break,
                        Some('\\') => match bump!() {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some('\\') => s.push('\\'),
                            Some('"') => s.push('"'),
                            other => {
                                return err(
                                    line,
                                    col,
                                    format!("bad string escape {:?}", other.unwrap_or(' ')),
                                )
                            }
                        },
                        Some(c) => s.push(c),
                    }
                }
                toks.push(Token {
                    kind: TokKind::Str(s.into()),
                    line: tline,
                    col: tcol,
                });
            }
            c if is_symbol_char(c) => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if !is_symbol_char(c) {
                        break;
                    }
                    word.push(c);
                    bump!();
                }
                toks.push(Token {
                    kind: classify_word(&word, tline, tcol)?,
                    line: tline,
                    col: tcol,
                });
            }
            c => return err(tline, tcol, format!("unexpected character {c:?}")),
        }
    }
    Ok(toks)
}

fn classify_word(word: &str, line: u32, col: u32) -> Result<TokKind, ParseError> {
    let mut cs = word.chars();
    let first = cs.next().expect("lexer never produces empty words");
    let second = cs.next();
    let numeric = first.is_ascii_digit()
        || (matches!(first, '+' | '-' | '.')
            && matches!(second, Some(c) if c.is_ascii_digit() || c == '.'));
    if !numeric {
        return Ok(TokKind::Sym(word.into()));
    }
    if let Ok(i) = word.parse::<i64>() {
        return Ok(TokKind::Int(i));
    }
    if let Ok(x) = word.parse::<f64>() {
        return Ok(TokKind::Num(x));
    }
    err(line, col, format!("malformed number `{word}`"))
}

// ═══════════════════════════════════════════════════════════════════════
// Parser
// ═══════════════════════════════════════════════════════════════════════

fn is_reserved(name: &str) -> bool {
    matches!(
        name,
        "lambda" | "let" | "if" | "define" | "and" | "or" | "true" | "false" | "sample"
            | "observe" | "query-add" | "addr-extend"
    ) || PrimOp::from_name(name).is_some()
        || ErpKind::from_name(name).is_some()
        // The `_`-prefixed namespace belongs to the transform passes
        // (`_addr`, `_k`, and generated binders); a bare `_` is fine.
        || (name.len() > 1 && name.starts_with('_'))
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    next_id: SourceId,
    scope: Vec<Rc<str>>,
    last_line: u32,
    last_col: u32,
}

struct Define {
    name: Rc<str>,
    bound: Rc<Expr>,
    recursive: bool,
    line: u32,
    col: u32,
}

impl Parser {
    fn new(toks: Vec<Token>) -> Parser {
        let (last_line, last_col) = toks.last().map_or((1, 1), |t| (t.line, t.col + 1));
        Parser {
            toks,
            pos: 0,
            next_id: 0,
            scope: Vec::new(),
            last_line,
            last_col,
        }
    }

    fn fresh_id(&mut self) -> SourceId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn peek_kind(&self, ahead: usize) -> Option<&TokKind> {
        self.toks.get(self.pos + ahead).map(|t| &t.kind)
    }

    fn next(&mut self) -> Result<Token, ParseError> {
        match self.toks.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(t.clone())
            }
            None => err(self.last_line, self.last_col, "unexpected end of input"),
        }
    }

    fn here(&self) -> (u32, u32) {
        self.peek()
            .map_or((self.last_line, self.last_col), |t| (t.line, t.col))
    }

    fn expect_lparen(&mut self, what: &str) -> Result<(), ParseError> {
        let t = self.next()?;
        match t.kind {
            TokKind::LParen => Ok(()),
            _ => err(t.line, t.col, format!("expected `(` {what}")),
        }
    }

    fn expect_rparen(&mut self, what: &str) -> Result<(), ParseError> {
        let t = self.next()?;
        match t.kind {
            TokKind::RParen => Ok(()),
            _ => err(t.line, t.col, format!("expected `)` {what}")),
        }
    }

    fn expect_name(&mut self, what: &str) -> Result<(Rc<str>, u32, u32), ParseError> {
        let t = self.next()?;
        match t.kind {
            TokKind::Sym(s) => {
                if is_reserved(&s) {
                    err(
                        t.line,
                        t.col,
                        format!("reserved word `{s}` cannot be used as {what}"),
                    )
                } else {
                    Ok((s, t.line, t.col))
                }
            }
            _ => err(t.line, t.col, format!("expected a name for {what}")),
        }
    }

    fn in_scope(&self, name: &str) -> bool {
        self.scope.iter().any(|s| s.as_ref() == name)
    }

    fn parse_expr(&mut self) -> Result<Rc<Expr>, ParseError> {
        let t = self.next()?;
        match t.kind {
            TokKind::Int(i) => Ok(Rc::new(Expr::Literal(LitVal::Int(i)))),
            TokKind::Num(x) => Ok(Rc::new(Expr::Literal(LitVal::Num(x)))),
            TokKind::Str(s) => Ok(Rc::new(Expr::Literal(LitVal::Str(s)))),
            TokKind::Sym(s) => match s.as_ref() {
                "true" => Ok(Rc::new(Expr::Literal(LitVal::Bool(true)))),
                "false" => Ok(Rc::new(Expr::Literal(LitVal::Bool(false)))),
                name if is_reserved(name) => err(
                    t.line,
                    t.col,
                    format!("reserved word `{name}` cannot be used as a variable"),
                ),
                name => {
                    if self.in_scope(name) {
                        Ok(Rc::new(Expr::Var(s.clone())))
                    } else {
                        err(t.line, t.col, format!("unbound variable `{name}`"))
                    }
                }
            },
            TokKind::LParen => self.parse_form(t.line, t.col),
            TokKind::RParen => err(t.line, t.col, "unexpected `)`"),
        }
    }

    /// Parses a parenthesized form; the `(` is already consumed.
    fn parse_form(&mut self, line: u32, col: u32) -> Result<Rc<Expr>, ParseError> {
        let head = match self.peek() {
            Some(t) => t.clone(),
            None => return err(self.last_line, self.last_col, "unexpected end of input"),
        };
        if let TokKind::Sym(name) = &head.kind {
            match name.as_ref() {
                "lambda" => return self.parse_lambda(),
                "let" => return self.parse_let(),
                "if" => return self.parse_if(),
                "and" | "or" => return self.parse_and_or(name.clone().as_ref() == "and"),
                "sample" => return self.parse_sample(),
                "observe" => return self.parse_observe(),
                "query-add" => return self.parse_query_add(),
                "define" => {
                    return err(head.line, head.col, "`define` is only allowed at the top level")
                }
                name if PrimOp::from_name(name).is_some() => return self.parse_prim(),
                name if ErpKind::from_name(name).is_some() => {
                    return err(
                        head.line,
                        head.col,
                        format!("distribution `{name}` can only appear in sample/observe"),
                    )
                }
                _ => {}
            }
        }
        // General application.
        let callsite = self.fresh_id();
        let callee = self.parse_expr()?;
        let mut args = Vec::new();
        while !matches!(self.peek_kind(0), Some(TokKind::RParen)) {
            if self.at_end() {
                return err(line, col, "unclosed `(`");
            }
            args.push(self.parse_expr()?);
        }
        self.expect_rparen("to close application")?;
        Ok(Rc::new(Expr::Apply(Rc::new(ApplyExpr {
            callsite,
            callee,
            args,
            cached: false,
            addr: None,
            kont: None,
        }))))
    }

    fn parse_lambda(&mut self) -> Result<Rc<Expr>, ParseError> {
        self.next()?; // `lambda`
        let id = self.fresh_id();
        self.expect_lparen("before the parameter list")?;
        let mut params: Vec<Rc<str>> = Vec::new();
        while !matches!(self.peek_kind(0), Some(TokKind::RParen)) {
            let (name, pline, pcol) = self.expect_name("a parameter")?;
            if params.iter().any(|p| p.as_ref() == name.as_ref()) {
                return err(pline, pcol, format!("duplicate parameter `{name}`"));
            }
            params.push(name);
        }
        self.expect_rparen("after the parameter list")?;
        let depth = self.scope.len();
        self.scope.extend(params.iter().cloned());
        let body = self.parse_expr();
        self.scope.truncate(depth);
        let body = body?;
        self.expect_rparen("to close lambda")?;
        Ok(Rc::new(Expr::Lambda(Rc::new(LambdaExpr::new(
            id, params, None, None, body, false, false,
        )))))
    }

    fn parse_let(&mut self) -> Result<Rc<Expr>, ParseError> {
        self.next()?; // `let`
        self.expect_lparen("before the let binding")?;
        let (name, _, _) = self.expect_name("the let binding")?;
        let bound = self.parse_expr()?;
        self.expect_rparen("after the let binding")?;
        self.scope.push(name.clone());
        let body = self.parse_expr();
        self.scope.pop();
        let body = body?;
        self.expect_rparen("to close let")?;
        Ok(Rc::new(Expr::Let(Rc::new(LetExpr {
            name,
            bound,
            body,
            recursive: false,
            from_define: false,
        }))))
    }

    fn parse_if(&mut self) -> Result<Rc<Expr>, ParseError> {
        self.next()?; // `if`
        let cond = self.parse_expr()?;
        let then_branch = self.parse_expr()?;
        let else_branch = self.parse_expr()?;
        self.expect_rparen("to close if")?;
        Ok(Rc::new(Expr::If(Rc::new(IfExpr {
            cond,
            then_branch,
            else_branch,
        }))))
    }

    fn parse_and_or(&mut self, is_and: bool) -> Result<Rc<Expr>, ParseError> {
        self.next()?; // `and` / `or`
        let a = self.parse_expr()?;
        let b = self.parse_expr()?;
        self.expect_rparen(if is_and { "to close and" } else { "to close or" })?;
        // Short-circuiting sugar: (and a b) = (if a b false), (or a b) = (if a true b).
        let (then_branch, else_branch) = if is_and {
            (b, Rc::new(Expr::Literal(LitVal::Bool(false))))
        } else {
            (Rc::new(Expr::Literal(LitVal::Bool(true))), b)
        };
        Ok(Rc::new(Expr::If(Rc::new(IfExpr {
            cond: a,
            then_branch,
            else_branch,
        }))))
    }

    fn parse_erp_name(&mut self, context: &str) -> Result<ErpKind, ParseError> {
        let t = self.next()?;
        match &t.kind {
            TokKind::Sym(s) => match ErpKind::from_name(s) {
                Some(erp) => Ok(erp),
                None => err(t.line, t.col, format!("unknown distribution `{s}` in {context}")),
            },
            _ => err(t.line, t.col, format!("expected a distribution name in {context}")),
        }
    }

    fn parse_args_until_rparen(&mut self) -> Result<Vec<Rc<Expr>>, ParseError> {
        let mut args = Vec::new();
        while !matches!(self.peek_kind(0), Some(TokKind::RParen)) {
            if self.at_end() {
                return err(self.last_line, self.last_col, "unexpected end of input");
            }
            args.push(self.parse_expr()?);
        }
        self.next()?; // `)`
        Ok(args)
    }

    fn parse_sample(&mut self) -> Result<Rc<Expr>, ParseError> {
        let t = self.next()?; // `sample`
        let site = self.fresh_id();
        let erp = self.parse_erp_name("sample")?;
        let params = self.parse_args_until_rparen()?;
        if params.len() != erp.param_count() {
            return err(
                t.line,
                t.col,
                format!(
                    "`{}` expects {} parameter(s), got {}",
                    erp.name(),
                    erp.param_count(),
                    params.len()
                ),
            );
        }
        Ok(Rc::new(Expr::Sample(Rc::new(SampleExpr {
            site,
            erp,
            params,
            addr: None,
            kont: None,
        }))))
    }

    fn parse_observe(&mut self) -> Result<Rc<Expr>, ParseError> {
        let t = self.next()?; // `observe`
        let site = self.fresh_id();
        let erp = self.parse_erp_name("observe")?;
        let mut args = self.parse_args_until_rparen()?;
        if args.len() != erp.param_count() + 1 {
            return err(
                t.line,
                t.col,
                format!(
                    "observe `{}` expects {} parameter(s) plus the observed value, got {} argument(s)",
                    erp.name(),
                    erp.param_count(),
                    args.len()
                ),
            );
        }
        let observed = args.pop().expect("length checked above");
        Ok(Rc::new(Expr::Observe(Rc::new(ObserveExpr {
            site,
            erp,
            params: args,
            observed,
            addr: None,
            kont: None,
        }))))
    }

    fn parse_query_add(&mut self) -> Result<Rc<Expr>, ParseError> {
        let t = self.next()?; // `query-add`
        let site = self.fresh_id();
        let args = self.parse_args_until_rparen()?;
        if args.len() != 2 {
            return err(
                t.line,
                t.col,
                format!("query-add expects a key and a value, got {} argument(s)", args.len()),
            );
        }
        let mut it = args.into_iter();
        let key = it.next().expect("length checked");
        let value = it.next().expect("length checked");
        Ok(Rc::new(Expr::QueryAdd(Rc::new(QueryAddExpr {
            site,
            key,
            value,
            addr: None,
            kont: None,
        }))))
    }

    fn parse_prim(&mut self) -> Result<Rc<Expr>, ParseError> {
        let t = self.next()?;
        let name = match &t.kind {
            TokKind::Sym(s) => s.clone(),
            _ => unreachable!("caller checked the head is a primitive"),
        };
        let op = PrimOp::from_name(&name).expect("caller checked the head is a primitive");
        let args = self.parse_args_until_rparen()?;
        if let Some(expected) = op.arity() {
            if args.len() != expected {
                return err(
                    t.line,
                    t.col,
                    format!("`{name}` expects {expected} argument(s), got {}", args.len()),
                );
            }
        }
        Ok(Rc::new(Expr::Prim(Rc::new(PrimExpr { op, args }))))
    }

    fn peek_is_define(&self) -> bool {
        matches!(self.peek_kind(0), Some(TokKind::LParen))
            && matches!(self.peek_kind(1), Some(TokKind::Sym(s)) if s.as_ref() == "define")
    }

    fn parse_define(&mut self) -> Result<Define, ParseError> {
        self.next()?; // `(`
        let t = self.next()?; // `define`
        let (name, line, col) = self.expect_name("the defined name")?;
        if self.in_scope(&name) {
            return err(line, col, format!("`{name}` is defined twice"));
        }
        // A define whose bound expression is a lambda may refer to itself.
        let recursive = matches!(self.peek_kind(0), Some(TokKind::LParen))
            && matches!(self.peek_kind(1), Some(TokKind::Sym(s)) if s.as_ref() == "lambda");
        if recursive {
            self.scope.push(name.clone());
        }
        let bound = self.parse_expr()?;
        if recursive {
            self.scope.pop();
        }
        self.expect_rparen("to close define")?;
        self.scope.push(name.clone());
        let _ = t;
        Ok(Define {
            name,
            bound,
            recursive,
            line,
            col,
        })
    }
}

/// Rejects calls and probabilistic effects outside lambda bodies in a
/// define's bound expression. Engines evaluate defines once per run, outside
/// any proposal, so those constructs would escape the inference machinery.
fn check_define_bound(expr: &Expr, line: u32, col: u32) -> Result<(), ParseError> {
    match expr {
        Expr::Literal(_) | Expr::Var(_) | Expr::Lambda(_) => Ok(()),
        Expr::Apply(_) => err(
            line,
            col,
            "top-level define must not call functions outside a lambda body",
        ),
        Expr::Sample(_) | Expr::Observe(_) | Expr::QueryAdd(_) => err(
            line,
            col,
            "top-level define must not contain probabilistic effects outside a lambda body",
        ),
        Expr::If(i) => {
            check_define_bound(&i.cond, line, col)?;
            check_define_bound(&i.then_branch, line, col)?;
            check_define_bound(&i.else_branch, line, col)
        }
        Expr::Let(l) => {
            check_define_bound(&l.bound, line, col)?;
            check_define_bound(&l.body, line, col)
        }
        Expr::Prim(p) => {
            for a in &p.args {
                check_define_bound(a, line, col)?;
            }
            Ok(())
        }
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Programs
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone)]
pub struct Program {
    pub body: Rc<Expr>,
    /// First id not used by any node; transforms allocate fresh ids from here.
    pub next_id: SourceId,
}

impl Program {
    /// Splits the body into the leading define chain and the main expression.
    pub fn preamble_and_main(&self) -> (Vec<Rc<LetExpr>>, Rc<Expr>) {
        let mut defines = Vec::new();
        let mut cur = self.body.clone();
        loop {
            match cur.as_ref() {
                Expr::Let(l) if l.from_define => {
                    defines.push(l.clone());
                    cur = l.body.clone();
                }
                _ => return (defines, cur),
            }
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (defines, main) = self.preamble_and_main();
        for d in &defines {
            let head = if d.recursive { "define*" } else { "define" };
            writeln!(f, "({head} {} {})", d.name, d.bound)?;
        }
        writeln!(f, "{main}")
    }
}

pub fn parse_program(src: &str) -> Result<Program, ParseError> {
    let toks = lex(src)?;
    if toks.is_empty() {
        return err(1, 1, "empty program");
    }
    let mut p = Parser::new(toks);
    let mut defines = Vec::new();
    while p.peek_is_define() {
        defines.push(p.parse_define()?);
    }
    let main = p.parse_expr()?;
    if !p.at_end() {
        let (line, col) = p.here();
        return err(
            line,
            col,
            "expected a single expression after the defines; found more input",
        );
    }
    for d in &defines {
        check_define_bound(&d.bound, d.line, d.col)?;
    }
    let mut body = main;
    for d in defines.into_iter().rev() {
        body = Rc::new(Expr::Let(Rc::new(LetExpr {
            name: d.name,
            bound: d.bound,
            body,
            recursive: d.recursive,
            from_define: true,
        })));
    }
    Ok(Program {
        body,
        next_id: p.next_id,
    })
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;

    fn find_define<'a>(prog: &'a Program, name: &str) -> Rc<LetExpr> {
        let (defines, _) = prog.preamble_and_main();
        defines
            .into_iter()
            .find(|d| d.name.as_ref() == name)
            .unwrap_or_else(|| panic!("no define named {name}"))
    }

    #[test]
    fn parses_factorial() {
        let src = "
            (define fact (lambda (n) (if (= n 0) 1 (* n (fact (- n 1))))))
            (fact 5)";
        let prog = parse_program(src).expect("parse");
        let d = find_define(&prog, "fact");
        assert!(d.recursive);
        assert!(d.from_define);
        let (_, main) = prog.preamble_and_main();
        assert!(matches!(main.as_ref(), Expr::Apply(_)));
    }

    #[test]
    fn parsing_is_deterministic() {
        let src = "
            (define f (lambda (x) (+ x 1)))
            (f (f 2))";
        let a = parse_program(src).expect("parse");
        let b = parse_program(src).expect("parse");
        assert_eq!(a.to_string(), b.to_string());
        assert_eq!(a.next_id, b.next_id);
    }

    #[test]
    fn free_variables_of_a_recursive_model() {
        let src = "
            (define data (list 1 0 1))
            (define trans (list (list 0.7 0.3) (list 0.4 0.6)))
            (define emit (list (list 0.8 0.2) (list 0.1 0.9)))
            (define transition (lambda (prev) (sample categorical (nth trans prev))))
            (define observation (lambda (state n)
              (observe categorical (nth emit state) (nth data (- n 1)))))
            (define hmm (lambda (n)
              (if (= n 0)
                  (list 0)
                  (let (rest (hmm (- n 1)))
                    (let (state (transition (nth rest 0)))
                      (let (_ (observation state n))
                        (cons state rest)))))))
            (hmm 3)";
        let prog = parse_program(src).expect("parse");
        let d = find_define(&prog, "hmm");
        let lam = match d.bound.as_ref() {
            Expr::Lambda(l) => l.clone(),
            other => panic!("expected lambda, got {other:?}"),
        };
        let free: Vec<&str> = lam.free_vars.iter().map(|v| v.as_ref()).collect();
        assert_eq!(free, vec!["hmm", "observation", "transition"]);
    }

    #[test]
    fn and_or_desugar_to_if() {
        let prog = parse_program("(let (x true) (and x (or x false)))").expect("parse");
        let shown = prog.to_string();
        assert!(shown.contains("(if x"), "desugared: {shown}");
        assert!(!shown.contains("(and"), "desugared: {shown}");
    }

    #[test]
    fn rejects_unbound_variables() {
        let e = parse_program("(+ x 1)").unwrap_err();
        assert!(e.msg.contains("unbound variable `x`"), "{e}");
    }

    #[test]
    fn rejects_reserved_words_as_names() {
        let e = parse_program("(lambda (list) list)").unwrap_err();
        assert!(e.msg.contains("reserved word `list`"), "{e}");
        let e = parse_program("(let (_k 1) _k)").unwrap_err();
        assert!(e.msg.contains("reserved word `_k`"), "{e}");
    }

    #[test]
    fn rejects_duplicate_parameters() {
        let e = parse_program("(lambda (x x) x)").unwrap_err();
        assert!(e.msg.contains("duplicate parameter `x`"), "{e}");
    }

    #[test]
    fn rejects_define_outside_top_level() {
        let e = parse_program("(let (x (define y 1)) x)").unwrap_err();
        assert!(e.msg.contains("only allowed at the top level"), "{e}");
    }

    #[test]
    fn rejects_calls_in_define_bodies() {
        let src = "
            (define f (lambda (x) x))
            (define y (f 1))
            y";
        let e = parse_program(src).unwrap_err();
        assert!(e.msg.contains("must not call functions"), "{e}");
    }

    #[test]
    fn rejects_sampling_in_define_bodies() {
        let e = parse_program("(define y (sample bernoulli 0.5)) y").unwrap_err();
        assert!(e.msg.contains("probabilistic effects"), "{e}");
    }

    #[test]
    fn rejects_trailing_forms() {
        let e = parse_program("(+ 1 2) (+ 3 4)").unwrap_err();
        assert!(e.msg.contains("single expression"), "{e}");
    }

    #[test]
    fn checks_erp_arity() {
        let e = parse_program("(sample gaussian 0)").unwrap_err();
        assert!(e.msg.contains("expects 2 parameter(s)"), "{e}");
        let e = parse_program("(observe bernoulli 0.5)").unwrap_err();
        assert!(e.msg.contains("plus the observed value"), "{e}");
        assert!(parse_program("(sample uniform 0 1)").is_ok());
        assert!(parse_program("(sample uniform-continuous 0 1)").is_ok());
    }

    #[test]
    fn negative_numbers_and_symbols() {
        let prog = parse_program("(+ -3 (- 0 .5))").expect("parse");
        let shown = prog.to_string();
        assert!(shown.contains("-3"), "{shown}");
        assert!(shown.contains("0.5"), "{shown}");
    }

    #[test]
    fn string_literals() {
        let prog = parse_program(r#"(query-add "mu" 1)"#).expect("parse");
        assert!(prog.to_string().contains(r#""mu""#));
    }
}
