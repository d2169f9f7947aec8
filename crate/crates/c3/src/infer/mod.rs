//! Inference: single-site Metropolis–Hastings over four execution
//! strategies.
//!
//! The strategy survey:
//!
//! | strategy      | trace        | proposal execution                  |
//! |---------------|--------------|-------------------------------------|
//! | `lightweight` | address map  | re-run everything                   |
//! | `caching`     | call tree    | re-run, reuse equal-input calls     |
//! | `cps`         | address map  | resume at the changed choice        |
//! | `c3`          | call tree    | resume, stop at an unchanged exit   |
//!
//! All four stage score changes as deltas and fold them in one canonical
//! order ([`crate::cachert::fold_deltas`]), so a proposal's acceptance
//! probability is bit-identical across strategies — the strategies differ
//! in how much work they do, never in what they compute.

pub mod cache_engines;
pub mod compare;
pub mod db;
pub mod enumerate;
pub mod mh;

pub use cache_engines::{C3Engine, CachingEngine};
pub use db::{CpsOnlyEngine, LightweightEngine};
pub use mh::{
    assemble_query, deterministic_from_env, mh_step, run_chain, trace_summary, unit_f64,
    ChainOptions, ChainResult, Engine, EngineCounters, StepRecord, TraceSummary,
};

use std::rc::Rc;

use crate::lang::ast::{Expr, LetExpr};
use crate::lang::eval::{initial_env, make_closure, Evaluator, NoHooks, RuntimeError};
use crate::lang::value::{env_bind, Env};
use crate::lang::Program;
use crate::transform;

/// Builds the engine for one strategy from an untransformed program.
/// `adaptive` enables runtime uncaching of unproductive callsites (only
/// meaningful for the cache-backed strategies).
pub fn build_engine(
    strategy: transform::Engine,
    prog: &Program,
    adaptive: bool,
) -> Result<Box<dyn Engine>, RuntimeError> {
    Ok(match strategy {
        transform::Engine::Lightweight => Box::new(LightweightEngine::new(prog)?),
        transform::Engine::Caching => Box::new(CachingEngine::new(prog, adaptive)?),
        transform::Engine::Cps => Box::new(CpsOnlyEngine::new(prog)?),
        transform::Engine::C3 => Box::new(C3Engine::new(prog, adaptive)?),
    })
}

/// Evaluates the program's leading `define` chain once, deterministically,
/// and returns the resulting environment together with the main expression.
///
/// Define bounds are parser-checked to be trivial (no applications, no
/// effects), so they evaluate the same under every strategy and need no
/// hooks. Recursive defines must bind a literal lambda; the closure ties the
/// recursive knot.
pub(crate) fn eval_preamble(prog: &Program) -> Result<(Env, Rc<Expr>), RuntimeError> {
    let (defines, main) = prog.preamble_and_main();
    let mut env = initial_env();
    for d in defines {
        let value = eval_define(&d, &env)?;
        env = env_bind(&env, d.name.clone(), value);
    }
    Ok((env, main))
}

fn eval_define(d: &Rc<LetExpr>, env: &Env) -> Result<crate::lang::Value, RuntimeError> {
    if d.recursive {
        let Expr::Lambda(lambda) = d.bound.as_ref() else {
            return Err(RuntimeError::Internal(format!(
                "recursive define `{}` must bind a function literal",
                d.name
            )));
        };
        return make_closure(lambda, env, Some(d.name.clone()));
    }
    let mut hooks = NoHooks;
    Evaluator::new(&mut hooks).eval(&d.bound, env)
}

/// Shared error for hook methods a strategy can never legally reach.
pub(crate) fn unsupported_exit<T>() -> Result<T, RuntimeError> {
    Err(RuntimeError::Internal(
        "cache exit callback reached a strategy without a call cache".into(),
    ))
}
