//! Cross-strategy harnesses.
//!
//! The four strategies are supposed to walk the *same* Markov chain when
//! target picking is deterministic — identical proposal targets, identical
//! acceptance bits, identical traces, step after step. These helpers run a
//! program under one or all strategies and check that agreement, which is
//! the single strongest correctness signal the system has: a caching bug
//! that changes any score by one ulp shows up as a divergence here.
//!
//! Programs are parsed and executed inside a dedicated thread with a large
//! stack: deeply recursive models build long value chains, and the direct
//! evaluator recurses with them. Runtime values are reference-counted and
//! cannot cross the thread boundary, so results come back as text — exact,
//! since numbers render shortest-roundtrip and trace digests carry raw
//! score bits.

use std::time::Duration;

use crate::lang::eval::RuntimeError;
use crate::lang::parse_program;
use crate::transform::Engine as Strategy;

use super::mh::{
    run_chain, trace_summary, ChainOptions, EngineCounters, TraceSummary,
};

/// Stack size for chain threads. Recursive models chew through stack in the
/// direct evaluator and build long linked values; the default 8 MiB thread
/// stack is not enough for the scaling benchmarks.
pub const CHAIN_STACK: usize = 256 * 1024 * 1024;

pub const ALL_STRATEGIES: [Strategy; 4] = [
    Strategy::Lightweight,
    Strategy::Caching,
    Strategy::Cps,
    Strategy::C3,
];

/// Runs `f` on a thread with [`CHAIN_STACK`] bytes of stack and returns its
/// result. The closure may borrow locals (scoped thread).
pub fn on_big_stack<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    std::thread::scope(|scope| {
        std::thread::Builder::new()
            .name("chain".into())
            .stack_size(CHAIN_STACK)
            .spawn_scoped(scope, f)
            .expect("failed to spawn chain thread")
            .join()
            .expect("chain thread panicked")
    })
}

/// [`super::mh::StepRecord`] with the target rendered as text.
#[derive(Debug, Clone)]
pub struct PortableStep {
    pub index: u64,
    pub target: String,
    pub accepted: bool,
    pub log_alpha: f64,
    pub rescored: u64,
    pub cost: EngineCounters,
}

/// A finished chain, fully detached from runtime values.
pub struct StrategyRun {
    pub strategy: Strategy,
    pub engine: &'static str,
    pub steps_attempted: u64,
    pub steps_accepted: u64,
    pub initial_score: f64,
    pub final_score: f64,
    pub final_value: Option<String>,
    pub query: Vec<(String, String)>,
    /// Per-step query snapshots (only with `collect_queries`).
    pub query_trace: Vec<Vec<(String, String)>>,
    /// Per-step records (only with `collect_steps`).
    pub steps: Vec<PortableStep>,
    pub counters: EngineCounters,
    pub elapsed: Duration,
    /// Digest of the final trace.
    pub summary: TraceSummary,
}

/// Parses `src` and runs one full chain under `strategy`, on a big stack.
pub fn run_strategy(
    src: &str,
    strategy: Strategy,
    adaptive: bool,
    opts: &ChainOptions,
) -> Result<StrategyRun, RuntimeError> {
    on_big_stack(move || {
        let prog = parse_program(src)
            .map_err(|e| RuntimeError::Internal(format!("parse error: {e}")))?;
        let mut engine = super::build_engine(strategy, &prog, adaptive)?;
        let result = run_chain(engine.as_mut(), opts)?;
        engine.check_integrity().map_err(RuntimeError::Internal)?;
        let summary = trace_summary(engine.as_ref());
        let render = |q: Vec<(String, crate::lang::Value)>| {
            q.into_iter()
                .map(|(k, v)| (k, v.to_string()))
                .collect::<Vec<_>>()
        };
        Ok(StrategyRun {
            strategy,
            engine: result.engine,
            steps_attempted: result.steps_attempted,
            steps_accepted: result.steps_accepted,
            initial_score: result.initial_score,
            final_score: result.final_score,
            final_value: result.final_value.map(|v| v.to_string()),
            query: render(result.query),
            query_trace: result.query_trace.into_iter().map(render).collect(),
            steps: result
                .steps
                .into_iter()
                .map(|s| PortableStep {
                    index: s.index,
                    target: s.target.to_string(),
                    accepted: s.accepted,
                    log_alpha: s.log_alpha,
                    rescored: s.rescored,
                    cost: s.cost,
                })
                .collect(),
            counters: result.counters,
            elapsed: result.elapsed,
            summary,
        })
    })
}

/// Runs the same chain under every strategy.
pub fn run_all(
    src: &str,
    adaptive: bool,
    opts: &ChainOptions,
) -> Result<Vec<StrategyRun>, RuntimeError> {
    ALL_STRATEGIES
        .iter()
        .map(|&s| run_strategy(src, s, adaptive, opts))
        .collect()
}

/// Verifies that deterministic-mode runs walked the same chain: same final
/// trace digest and — when step records were collected — the same proposal
/// target, acceptance bit, and acceptance-ratio bits at every step. Returns
/// a description of the first divergence.
pub fn check_agreement(runs: &[StrategyRun]) -> Result<(), String> {
    let Some(first) = runs.first() else {
        return Ok(());
    };
    for run in &runs[1..] {
        if run.summary != first.summary {
            return Err(format!(
                "final traces diverge: {} vs {}\n{:?}\nvs\n{:?}",
                first.engine, run.engine, first.summary, run.summary
            ));
        }
        if first.steps_accepted != run.steps_accepted {
            return Err(format!(
                "acceptance counts diverge: {} accepted {}, {} accepted {}",
                first.engine, first.steps_accepted, run.engine, run.steps_accepted
            ));
        }
        if first.steps.len() != run.steps.len() {
            return Err(format!(
                "step counts diverge: {} took {}, {} took {}",
                first.engine,
                first.steps.len(),
                run.engine,
                run.steps.len()
            ));
        }
        for (x, y) in first.steps.iter().zip(&run.steps) {
            if x.target != y.target {
                return Err(format!(
                    "step {}: targets diverge ({} proposes {}, {} proposes {})",
                    x.index, first.engine, x.target, run.engine, y.target
                ));
            }
            if x.log_alpha.to_bits() != y.log_alpha.to_bits() {
                return Err(format!(
                    "step {} at {}: acceptance ratios diverge ({} got {:?}, {} got {:?})",
                    x.index, x.target, first.engine, x.log_alpha, run.engine, y.log_alpha
                ));
            }
            if x.accepted != y.accepted {
                return Err(format!(
                    "step {} at {}: decisions diverge ({} {}, {} {})",
                    x.index,
                    x.target,
                    first.engine,
                    if x.accepted { "accepts" } else { "rejects" },
                    run.engine,
                    if y.accepted { "accepts" } else { "rejects" },
                ));
            }
            if x.rescored != y.rescored {
                return Err(format!(
                    "step {} at {}: staged choice sets diverge ({} rescored {}, {} rescored {})",
                    x.index, x.target, first.engine, x.rescored, run.engine, y.rescored
                ));
            }
        }
    }
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
