//! Single-site Metropolis–Hastings over an abstract execution strategy.
//!
//! The sampler below never looks inside a trace. Everything it needs — how
//! many choices exist, the state of one choice, how to re-run the program
//! after staging a new value, the score deltas that run produced — comes
//! through the [`Engine`] trait, so the same loop drives all four execution
//! strategies and their chains can be compared step for step.
//!
//! # Random-number discipline
//!
//! Each proposal consumes chain randomness in a fixed order: one word for
//! the target pick, one word seeding the proposal draw, one word per *fresh*
//! choice encountered during the re-run (in execution order), and one word
//! for the accept test. In deterministic mode (`C3_DETERMINISTIC=1`) the
//! target pick indexes the lexicographically sorted choice addresses, which
//! makes entire chains reproducible across strategies; otherwise each
//! strategy picks from its own table order and chains are only
//! statistically equivalent.
//!
//! # Acceptance
//!
//! For a proposal at choice `x` with `n` live choices before and `n'` after,
//! prior score `l` and `l'`, kernel densities `fwd`/`rev` for the proposed
//! and previous values, and `F`/`R` the total score of freshly created and
//! removed choices:
//!
//! ```text
//! log alpha = (l' - l) + ln n - ln n' + (rev - fwd) + (R - F)
//! ```
//!
//! and the proposal is accepted iff `ln(u) < log alpha`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};

use crate::cachert::{fold_deltas, ScoreDelta, ScoreKind};
use crate::erp::{self, ChainRng, ErpParams};
use crate::lang::addr::Address;
use crate::lang::eval::RuntimeError;
use crate::lang::value::Value;

// ═══════════════════════════════════════════════════════════════════════
// The engine abstraction

/// Instrumentation totals, cumulative over a chain. `bodies_executed`
/// counts user-function bodies actually evaluated; the remaining fields are
/// call-cache events and stay zero for strategies without a cache.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EngineCounters {
    pub bodies_executed: u64,
    pub entry_shortcircuits: u64,
    pub exit_shortcircuits: u64,
    pub cached_runs: u64,
    pub bypassed_calls: u64,
    /// Cumulative cache nodes allocated (always 0 for database strategies).
    pub nodes_created: u64,
    /// Callsites currently bypassed by adaptive uncaching (a level, not a
    /// total).
    pub uncached_sites: u64,
}

impl EngineCounters {
    /// Event counts in `self` since `earlier` (levels are carried over).
    pub fn since(&self, earlier: &EngineCounters) -> EngineCounters {
        EngineCounters {
            bodies_executed: self.bodies_executed - earlier.bodies_executed,
            entry_shortcircuits: self.entry_shortcircuits - earlier.entry_shortcircuits,
            exit_shortcircuits: self.exit_shortcircuits - earlier.exit_shortcircuits,
            cached_runs: self.cached_runs - earlier.cached_runs,
            bypassed_calls: self.bypassed_calls - earlier.bypassed_calls,
            nodes_created: self.nodes_created - earlier.nodes_created,
            uncached_sites: self.uncached_sites,
        }
    }
}

/// One execution strategy: program state plus the operations the sampler
/// needs. A proposal is the sequence `propose` → (`commit` | `rollback`);
/// between proposals the trace must satisfy `check_integrity`.
pub trait Engine {
    fn name(&self) -> &'static str;

    /// Runs the program once from scratch, staging every score as a fresh
    /// delta. The caller folds the deltas and commits.
    fn initial_run(&mut self, rng: &mut ChainRng) -> Result<(), RuntimeError>;

    /// Number of live random choices.
    fn num_choices(&self) -> usize;

    /// Live choice addresses, lexicographically sorted.
    fn choice_addrs(&self) -> Vec<Address>;

    /// Maps a uniform draw to a proposal target. `deterministic` selects
    /// sorted-address indexing.
    fn pick_target(&self, u: f64, deterministic: bool) -> Option<Address>;

    /// Parameters and current value of a live choice.
    fn choice_state(&self, addr: &Address) -> Option<(ErpParams, Value)>;

    /// Committed total log-score.
    fn total_score(&self) -> f64;

    /// Stages `value` at `target` and re-runs whatever part of the program
    /// the strategy requires. On error the caller rolls back.
    fn propose(&mut self, target: &Address, value: Value, rng: &mut ChainRng)
        -> Result<(), RuntimeError>;

    /// Score deltas staged by the proposal (or initial run) still pending.
    fn staged_deltas(&self) -> Vec<ScoreDelta>;

    /// Accepts the pending proposal; `new_total` is the folded score.
    fn commit(&mut self, new_total: f64);

    /// Rejects the pending proposal, restoring the pre-proposal trace.
    fn rollback(&mut self);

    /// The program's most recent return value.
    fn final_value(&self) -> Option<Value>;

    /// Live query writes as `(address, key, value)`, sorted by address.
    fn query_writes(&self) -> Vec<(Address, Value, Value)>;

    fn counters(&self) -> EngineCounters;

    /// Deep structural validation; used by tests and `--paranoid` runs.
    fn check_integrity(&self) -> Result<(), String>;
}

// ═══════════════════════════════════════════════════════════════════════
// Steps

/// What one proposal did.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub index: u64,
    pub target: Address,
    pub accepted: bool,
    pub log_alpha: f64,
    /// Choice sites whose score was staged by this proposal (the target
    /// itself, parameter-rescored reuses, and fresh/removed choices). The
    /// staged set is strategy-independent, so this count is too.
    pub rescored: u64,
    /// Instrumentation events consumed by this proposal alone.
    pub cost: EngineCounters,
}

const TWO_NEG_53: f64 = 1.0 / 9007199254740992.0;

/// Uniform in `[0, 1)` from the top 53 bits of one generator word.
pub fn unit_f64(rng: &mut ChainRng) -> f64 {
    (rng.next_u64() >> 11) as f64 * TWO_NEG_53
}

/// Reads the `C3_DETERMINISTIC` switch (value `1` enables sorted-address
/// target picking for cross-strategy reproducibility).
pub fn deterministic_from_env() -> bool {
    std::env::var("C3_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

/// Runs one Metropolis–Hastings proposal. Returns `None` when the trace has
/// no random choices (nothing to propose; the chain is a point mass).
pub fn mh_step<E: Engine + ?Sized>(
    engine: &mut E,
    index: u64,
    rng: &mut ChainRng,
    deterministic: bool,
) -> Result<Option<StepRecord>, RuntimeError> {
    let n = engine.num_choices();
    if n == 0 {
        return Ok(None);
    }
    let before = engine.counters();
    let total = engine.total_score();

    let u_pick = unit_f64(rng);
    let target = engine
        .pick_target(u_pick, deterministic)
        .expect("num_choices > 0");
    let (params, old_value) = engine
        .choice_state(&target)
        .ok_or_else(|| RuntimeError::Internal(format!("picked dead choice {target}")))?;

    let proposed = erp::draw(&params, rng);
    let fwd = erp::score(&params, &proposed)?;
    let rev = erp::score(&params, &old_value)?;

    if let Err(e) = engine.propose(&target, proposed, rng) {
        engine.rollback();
        return Err(e);
    }

    let deltas = engine.staged_deltas();
    let rescored = deltas
        .iter()
        .filter(|d| {
            d.old.map_or(false, |e| e.kind == ScoreKind::Choice)
                || d.new.map_or(false, |e| e.kind == ScoreKind::Choice)
        })
        .count() as u64;
    let summary = fold_deltas(total, deltas);
    let n_after = engine.num_choices();
    let log_alpha = (summary.new_total - total)
        + (n as f64).ln()
        - (n_after as f64).ln()
        + (rev - fwd)
        + (summary.removed_logp - summary.fresh_logp);

    let u_accept = unit_f64(rng);
    let accepted = u_accept.ln() < log_alpha;
    if accepted {
        engine.commit(summary.new_total);
    } else {
        engine.rollback();
    }

    Ok(Some(StepRecord {
        index,
        target,
        accepted,
        log_alpha,
        rescored,
        cost: engine.counters().since(&before),
    }))
}

// ═══════════════════════════════════════════════════════════════════════
// Chains

#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub steps: u64,
    pub seed: u64,
    /// Sorted-address target picking (see [`deterministic_from_env`]).
    pub deterministic: bool,
    /// Keep every [`StepRecord`] (memory grows with `steps`).
    pub collect_steps: bool,
    /// Snapshot the assembled query after every step.
    pub collect_queries: bool,
    /// Run [`Engine::check_integrity`] after every `n`th step.
    pub integrity_every: Option<u64>,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            steps: 1000,
            seed: 0,
            deterministic: false,
            collect_steps: false,
            collect_queries: false,
            integrity_every: None,
        }
    }
}

pub struct ChainResult {
    pub engine: &'static str,
    pub steps_attempted: u64,
    pub steps_accepted: u64,
    pub initial_score: f64,
    pub final_score: f64,
    pub final_value: Option<Value>,
    /// Assembled query table at the end of the chain.
    pub query: Vec<(String, Value)>,
    /// Per-step query snapshots (only with `collect_queries`).
    pub query_trace: Vec<Vec<(String, Value)>>,
    /// Per-step records (only with `collect_steps`).
    pub steps: Vec<StepRecord>,
    pub counters: EngineCounters,
    pub elapsed: Duration,
}

/// Reduces query writes to the final table: writes are visited in address
/// order and later addresses win per key, so re-written keys keep the value
/// from the latest write site; the result is sorted by key text.
pub fn assemble_query(writes: &[(Address, Value, Value)]) -> Vec<(String, Value)> {
    let mut table: BTreeMap<String, Value> = BTreeMap::new();
    for (_, key, value) in writes {
        table.insert(key.to_string(), value.clone());
    }
    table.into_iter().collect()
}

/// Runs a full chain: initial run, uniform initial commit, then `steps`
/// proposals.
pub fn run_chain<E: Engine + ?Sized>(
    engine: &mut E,
    opts: &ChainOptions,
) -> Result<ChainResult, RuntimeError> {
    let started = Instant::now();
    let mut rng = ChainRng::seed_from_u64(opts.seed);

    engine.initial_run(&mut rng)?;
    let initial = fold_deltas(0.0, engine.staged_deltas());
    engine.commit(initial.new_total);

    let mut steps = Vec::new();
    let mut query_trace = Vec::new();
    let mut accepted = 0u64;
    let mut attempted = 0u64;
    for index in 0..opts.steps {
        match mh_step(engine, index, &mut rng, opts.deterministic)? {
            None => break,
            Some(record) => {
                attempted += 1;
                if record.accepted {
                    accepted += 1;
                }
                if opts.collect_queries {
                    query_trace.push(assemble_query(&engine.query_writes()));
                }
                if opts.collect_steps {
                    steps.push(record);
                }
            }
        }
        if let Some(every) = opts.integrity_every {
            if every > 0 && (index + 1) % every == 0 {
                engine
                    .check_integrity()
                    .map_err(|e| RuntimeError::Internal(format!("integrity: {e}")))?;
            }
        }
    }

    Ok(ChainResult {
        engine: engine.name(),
        steps_attempted: attempted,
        steps_accepted: accepted,
        initial_score: initial.new_total,
        final_score: engine.total_score(),
        final_value: engine.final_value(),
        query: assemble_query(&engine.query_writes()),
        query_trace,
        steps,
        counters: engine.counters(),
        elapsed: started.elapsed(),
    })
}

// ═══════════════════════════════════════════════════════════════════════
// Trace snapshots for cross-strategy comparison

/// A strategy-independent digest of the trace: every live choice with its
/// exact value and score bits, the total, the final value, and the query.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub choices: Vec<(String, String, u64)>,
    pub total_bits: u64,
    pub final_value: Option<String>,
    pub query: Vec<(String, String)>,
}

pub fn trace_summary<E: Engine + ?Sized>(engine: &E) -> TraceSummary {
    let choices = engine
        .choice_addrs()
        .into_iter()
        .map(|addr| {
            let (_, value) = engine
                .choice_state(&addr)
                .expect("choice_addrs returned a dead address");
            let score = erp_score_bits(engine, &addr);
            (addr.to_string(), value.to_string(), score)
        })
        .collect();
    TraceSummary {
        choices,
        total_bits: engine.total_score().to_bits(),
        final_value: engine.final_value().map(|v| v.to_string()),
        query: assemble_query(&engine.query_writes())
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect(),
    }
}

fn erp_score_bits<E: Engine + ?Sized>(engine: &E, addr: &Address) -> u64 {
    let (params, value) = engine.choice_state(addr).expect("live choice");
    erp::score(&params, &value).map(|s| s.to_bits()).unwrap_or(0)
}

// ═══════════════════════════════════════════════════════════════════════
