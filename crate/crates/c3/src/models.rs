//! Model corpus: generative programs over synthetic data.
//!
//! Each builder returns complete surface-language source with its data set
//! spliced in as literals, so a model is a self-contained program: the same
//! `(name, size, data_seed)` triple always produces byte-identical text.
//!
//! The larger models follow a shared shape — a tail-recursive loop that
//! threads the latent state forward — because that shape exposes the full
//! range of incremental behavior: database strategies re-execute the whole
//! loop, continuation strategies re-enter only the suffix after the changed
//! choice, and caching strategies stop as soon as arguments or return
//! values settle. Inference targets are exposed through `query-add` rather
//! than return lists, except where a model deliberately demonstrates the
//! cost of rebuilding a returned list.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::erp::ChainRng;
use crate::infer::unit_f64;

// ═══════════════════════════════════════════════════════════════════════
// Specs
// ═══════════════════════════════════════════════════════════════════════

/// A ready-to-parse model program.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: &'static str,
    pub size: u32,
    pub program: String,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model `{0}` (expected one of: hmm, hmm-list, lda, gmm, hlr, rectree, branching, single-flip, tiny-hmm, adaptive)")]
    Unknown(String),
    #[error("model `{name}` needs a size in [{lo}, {hi}], got {got}")]
    SizeOutOfRange {
        name: &'static str,
        lo: u32,
        hi: u32,
        got: u32,
    },
}

/// Every model the corpus can build, with its size parameter's meaning.
pub const MODEL_NAMES: &[(&str, &str)] = &[
    ("hmm", "observation sequence length (1-1000)"),
    ("hmm-list", "observation sequence length (1-1000); returns the latent list"),
    ("lda", "document count (1-200)"),
    ("gmm", "observation count (1-2000)"),
    ("hlr", "group count (1-500)"),
    ("rectree", "maximum tree depth (0-8)"),
    ("branching", "unused"),
    ("single-flip", "unused"),
    ("tiny-hmm", "observation sequence length (1-10)"),
    ("adaptive", "inner calls per pass (1-50)"),
];

/// Maps the 1-10 normalized size used by the benchmark sweep to each
/// model's natural scale parameter.
pub fn normalized_size(name: &str, k: u32) -> Option<u32> {
    match name {
        "hmm" | "hmm-list" => Some(10 * k),
        "lda" => Some(5 * k),
        "gmm" => Some(20 * k),
        "hlr" => Some(5 * k),
        _ => None,
    }
}

/// Number of proposable choices the model's initial trace contains, when
/// that count is independent of the random draws.
pub fn expected_choices(name: &str, size: u32) -> Option<u64> {
    let n = size as u64;
    match name {
        "hmm" | "hmm-list" | "tiny-hmm" => Some(n),
        "lda" => Some(LDA_TOPICS + n * (1 + LDA_WORDS_PER_DOC)),
        "gmm" => Some(1 + GMM_COMPONENTS + n),
        "hlr" => Some(2 + 2 * n),
        "branching" => Some(2),
        "single-flip" => Some(1),
        "adaptive" => Some(2),
        _ => None,
    }
}

/// Builds the named model at the given size, generating its data set from
/// `data_seed`.
pub fn build_model(name: &str, size: u32, data_seed: u64) -> Result<ModelSpec, ModelError> {
    let spec = |program: String| ModelSpec {
        name: MODEL_NAMES
            .iter()
            .map(|(n, _)| *n)
            .find(|n| *n == name)
            .expect("checked below"),
        size,
        program,
    };
    match name {
        "hmm" => {
            check_range("hmm", size, 1, 1000)?;
            Ok(spec(hmm_program(10, 10, size, data_seed, false)))
        }
        "hmm-list" => {
            check_range("hmm-list", size, 1, 1000)?;
            Ok(spec(hmm_program(10, 10, size, data_seed, true)))
        }
        "tiny-hmm" => {
            check_range("tiny-hmm", size, 1, 10)?;
            Ok(spec(hmm_program(2, 2, size, data_seed, false)))
        }
        "lda" => {
            check_range("lda", size, 1, 200)?;
            Ok(spec(lda_program(size, data_seed)))
        }
        "gmm" => {
            check_range("gmm", size, 1, 2000)?;
            Ok(spec(gmm_program(size, data_seed)))
        }
        "hlr" => {
            check_range("hlr", size, 1, 500)?;
            Ok(spec(hlr_program(size, data_seed)))
        }
        "rectree" => {
            check_range("rectree", size, 0, 8)?;
            Ok(spec(rectree_program(size)))
        }
        "branching" => Ok(spec(BRANCHING.to_string())),
        "single-flip" => Ok(spec(SINGLE_FLIP.to_string())),
        "adaptive" => {
            check_range("adaptive", size, 1, 50)?;
            Ok(spec(adaptive_program(size)))
        }
        other => Err(ModelError::Unknown(other.to_string())),
    }
}

fn check_range(name: &'static str, got: u32, lo: u32, hi: u32) -> Result<(), ModelError> {
    if got < lo || got > hi {
        return Err(ModelError::SizeOutOfRange { name, lo, hi, got });
    }
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
// Literal formatting
// ═══════════════════════════════════════════════════════════════════════

/// Formats a float so the parser reads it back as a number, not an int.
fn lit(x: f64) -> String {
    let mut s = format!("{x}");
    if !s.contains('.') && !s.contains('e') {
        s.push_str(".0");
    }
    s
}

fn num_list(xs: &[f64]) -> String {
    let body: Vec<String> = xs.iter().map(|&x| lit(x)).collect();
    format!("(list {})", body.join(" "))
}

fn int_list(xs: &[i64]) -> String {
    let body: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("(list {})", body.join(" "))
}

fn matrix(rows: &[Vec<f64>]) -> String {
    let body: Vec<String> = rows.iter().map(|r| num_list(r)).collect();
    format!("(list\n    {})", body.join("\n    "))
}

fn ones(k: usize) -> String {
    num_list(&vec![1.0; k])
}

// ═══════════════════════════════════════════════════════════════════════
// Synthetic data
// ═══════════════════════════════════════════════════════════════════════

fn data_rng(seed: u64) -> ChainRng {
    ChainRng::seed_from_u64(seed)
}

/// One row of a symmetric Dirichlet(1): normalized unit exponentials.
fn dirichlet_row(rng: &mut ChainRng, k: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..k).map(|_| -(1.0 - unit_f64(rng)).ln()).collect();
    let sum: f64 = row.iter().sum();
    for w in &mut row {
        *w /= sum;
    }
    row
}

fn pick(rng: &mut ChainRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = unit_f64(rng) * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn gaussian(rng: &mut ChainRng, mu: f64, sigma: f64) -> f64 {
    Normal::new(mu, sigma).expect("sigma > 0").sample(rng)
}

// ═══════════════════════════════════════════════════════════════════════
// Hidden Markov model
// ═══════════════════════════════════════════════════════════════════════

/// Forward-recursive HMM over `k` latent and `v` observable states,
/// conditioned on a length-`n` synthetic observation sequence.
///
/// The loop threads the latent state through the tail call, so a changed
/// state invalidates exactly one downstream call's arguments; the call
/// after that sees unchanged arguments and the unwind after it sees an
/// unchanged return value. The latent sequence is exposed with `query-add`
/// so the return value stays small and stable. With `as_list`, the model
/// instead conses the states into a returned list — rebuilding the list on
/// every unwind, which defeats short-circuiting on exit.
fn hmm_program(k: usize, v: usize, n: u32, data_seed: u64, as_list: bool) -> String {
    let mut rng = data_rng(data_seed);
    let tmat: Vec<Vec<f64>> = (0..k).map(|_| dirichlet_row(&mut rng, k)).collect();
    let omat: Vec<Vec<f64>> = (0..k).map(|_| dirichlet_row(&mut rng, v)).collect();
    let mut state = 0usize;
    let mut data: Vec<i64> = Vec::with_capacity(n as usize);
    for _ in 0..n {
        state = pick(&mut rng, &tmat[state]);
        data.push(pick(&mut rng, &omat[state]) as i64);
    }

    let body = if as_list {
        "\
(define step (lambda (i n prev)
  (if (> i n)
      (list)
      (let (state (transition prev))
        (let (o (observe categorical (nth omat state) (nth data (- i 1))))
          (cons state (step (+ i 1) n state)))))))"
    } else {
        "\
(define step (lambda (i n prev)
  (if (> i n)
      prev
      (let (state (transition prev))
        (let (q (query-add i state))
          (let (o (observe categorical (nth omat state) (nth data (- i 1))))
            (step (+ i 1) n state)))))))"
    };

    format!(
        "; Hidden Markov model: {k} latent states, {v} observable states, length {n}.
(define tmat
  {tmat})
(define omat
  {omat})
(define data
  {data})
(define transition (lambda (prev) (sample categorical (nth tmat prev))))
{body}
(step 1 {n} 0)
",
        tmat = matrix(&tmat),
        omat = matrix(&omat),
        data = int_list(&data),
    )
}

// ═══════════════════════════════════════════════════════════════════════
// Latent Dirichlet allocation
// ═══════════════════════════════════════════════════════════════════════

pub const LDA_TOPICS: u64 = 10;
pub const LDA_VOCAB: u64 = 100;
pub const LDA_WORDS_PER_DOC: u64 = 20;

/// LDA over a fixed vocabulary: per-topic word distributions and per-document
/// topic mixtures are latent, each word is an observed draw from its
/// assigned topic. The nested loop structure is the interesting part: a
/// word-level proposal invalidates only one inner loop, so strategies that
/// can skip unchanged sibling calls skip almost the whole corpus.
fn lda_program(docs: u32, data_seed: u64) -> String {
    let k = LDA_TOPICS as usize;
    let v = LDA_VOCAB as usize;
    let w = LDA_WORDS_PER_DOC as usize;
    let mut rng = data_rng(data_seed);
    let topics: Vec<Vec<f64>> = (0..k).map(|_| dirichlet_row(&mut rng, v)).collect();
    let mut corpus: Vec<String> = Vec::with_capacity(docs as usize);
    for _ in 0..docs {
        let mix = dirichlet_row(&mut rng, k);
        let words: Vec<i64> = (0..w)
            .map(|_| {
                let z = pick(&mut rng, &mix);
                pick(&mut rng, &topics[z]) as i64
            })
            .collect();
        corpus.push(int_list(&words));
    }

    format!(
        "; Latent Dirichlet allocation: {k} topics, vocabulary {v}, {docs} documents
; of {w} words. Queries the per-topic word distributions.
(define alpha-topic
  {alpha_topic})
(define alpha-doc
  {alpha_doc})
(define docs
  (list
    {corpus}))
(define mk-topics (lambda (t)
  (if (> t {km1})
      (list)
      (cons (sample dirichlet alpha-topic) (mk-topics (+ t 1))))))
(define q-topics (lambda (t ts)
  (if (> t {km1})
      true
      (let (q (query-add t (nth ts t)))
        (q-topics (+ t 1) ts)))))
(define word-loop (lambda (i doc zdist topics)
  (if (> i {wm1})
      true
      (let (z (sample categorical zdist))
        (let (o (observe categorical (nth topics z) (nth doc i)))
          (word-loop (+ i 1) doc zdist topics))))))
(define doc-loop (lambda (d n topics)
  (if (> d n)
      true
      (let (zdist (sample dirichlet alpha-doc))
        (let (wl (word-loop 0 (nth docs d) zdist topics))
          (doc-loop (+ d 1) n topics))))))
(let (topics (mk-topics 0))
  (let (q (q-topics 0 topics))
    (let (dl (doc-loop 0 {dm1} topics))
      true)))
",
        alpha_topic = ones(v),
        alpha_doc = ones(k),
        corpus = corpus.join("\n    "),
        km1 = k - 1,
        wm1 = w - 1,
        dm1 = docs - 1,
    )
}

// ═══════════════════════════════════════════════════════════════════════
// Gaussian mixture
// ═══════════════════════════════════════════════════════════════════════

pub const GMM_COMPONENTS: u64 = 4;

/// One-dimensional finite Gaussian mixture: latent mixture weights,
/// component means, and per-observation assignments. Priors: means are
/// gaussian(0, 5), weights are symmetric Dirichlet(1), and the component
/// noise is fixed at 1. Data comes from well-separated true components.
fn gmm_program(obs: u32, data_seed: u64) -> String {
    let k = GMM_COMPONENTS as usize;
    let mut rng = data_rng(data_seed);
    let true_mus = [-6.0, -2.0, 2.0, 6.0];
    let uniform = vec![1.0; k];
    let data: Vec<f64> = (0..obs)
        .map(|_| {
            let z = pick(&mut rng, &uniform);
            gaussian(&mut rng, true_mus[z], 1.0)
        })
        .collect();

    format!(
        "; Finite Gaussian mixture: {k} one-dimensional components, {obs} observations.
(define alpha {alpha})
(define data
  {data})
(define mk-mus (lambda (j)
  (if (> j {km1})
      (list)
      (cons (sample gaussian 0.0 5.0) (mk-mus (+ j 1))))))
(define obs-loop (lambda (i n w mus)
  (if (> i n)
      true
      (let (z (sample categorical w))
        (let (o (observe gaussian (nth mus z) 1.0 (nth data i)))
          (obs-loop (+ i 1) n w mus))))))
(let (w (sample dirichlet alpha))
  (let (mus (mk-mus 0))
    (let (q (query-add 0 mus))
      (let (r (obs-loop 0 {nm1} w mus))
        mus))))
",
        alpha = ones(k),
        data = num_list(&data),
        km1 = k - 1,
        nm1 = obs - 1,
    )
}

// ═══════════════════════════════════════════════════════════════════════
// Hierarchical linear regression
// ═══════════════════════════════════════════════════════════════════════

pub const HLR_POINTS_PER_GROUP: u64 = 5;

/// Hierarchical linear regression: global slope/intercept means, per-group
/// slopes and intercepts, five points per group at shared inputs 0..4.
/// Priors: globals are gaussian(0, 3), group parameters are gaussian
/// around the globals with unit spread, observation noise is 0.5.
fn hlr_program(groups: u32, data_seed: u64) -> String {
    let p = HLR_POINTS_PER_GROUP as usize;
    let mut rng = data_rng(data_seed);
    let ys: Vec<String> = (0..groups)
        .map(|_| {
            let a = gaussian(&mut rng, 1.0, 0.5);
            let b = gaussian(&mut rng, 0.0, 1.0);
            let row: Vec<f64> = (0..p)
                .map(|j| a * j as f64 + b + gaussian(&mut rng, 0.0, 0.3))
                .collect();
            num_list(&row)
        })
        .collect();

    format!(
        "; Hierarchical linear regression: {groups} groups, {p} points per group.
(define xs (list 0.0 1.0 2.0 3.0 4.0))
(define ys
  (list
    {ys}))
(define point-loop (lambda (j y-list a b)
  (if (> j {pm1})
      true
      (let (o (observe gaussian (+ (* a (nth xs j)) b) 0.5 (nth y-list j)))
        (point-loop (+ j 1) y-list a b)))))
(define group-loop (lambda (g n ma mb)
  (if (> g n)
      true
      (let (a (sample gaussian ma 1.0))
        (let (b (sample gaussian mb 1.0))
          (let (q (query-add g (list a b)))
            (let (pl (point-loop 0 (nth ys g) a b))
              (group-loop (+ g 1) n ma mb))))))))
(let (ma (sample gaussian 0.0 3.0))
  (let (mb (sample gaussian 0.0 3.0))
    (let (gl (group-loop 0 {gm1} ma mb))
      (list ma mb))))
",
        ys = ys.join("\n    "),
        pm1 = p - 1,
        gm1 = groups - 1,
    )
}

// ═══════════════════════════════════════════════════════════════════════
// Fixtures
// ═══════════════════════════════════════════════════════════════════════

/// Recursive stochastic tree growth with data-independent branching: each
/// node flips whether to branch into two subtrees or stop at a leaf, and
/// the total node count is softly conditioned toward 6. Proposals on the
/// branch flips create and delete whole subtrees of choices.
fn rectree_program(depth: u32) -> String {
    format!(
        "; Stochastic tree growth to depth {depth}; soft-conditioned on size.
(define grow (lambda (d cap)
  (if (> d cap)
      1
      (if (sample bernoulli 0.45)
          (+ 1 (+ (grow (+ d 1) cap) (grow (+ d 1) cap)))
          (let (leaf (sample gaussian 0.0 1.0))
            1)))))
(let (size (grow 0 {depth}))
  (let (q (query-add 0 size))
    (let (o (observe gaussian 6.0 2.0 size))
      size)))
"
    )
}

/// Two control-flow paths with different choice sets, reweighted by an
/// observation; every choice has finite support, so the posterior is
/// exactly enumerable.
const BRANCHING: &str = "\
; Structure-changing two-path fixture with an exact posterior.
(let (c (sample bernoulli 0.3))
  (let (o (observe bernoulli 0.7 c))
    (if c
        (let (m (sample categorical (list 1.0 1.0 2.0)))
          (let (q (query-add 0 (+ m 1)))
            (+ m 1)))
        (let (f (sample bernoulli 0.6))
          (let (q (query-add 0 (if f 1 0)))
            (if f 1 0))))))
";

/// One unconditioned flip: every proposal is accepted and the posterior is
/// the prior.
const SINGLE_FLIP: &str = "\
; A single fair-game flip; posterior equals the prior.
(let (x (sample bernoulli 0.3))
  (let (q (query-add 0 x))
    x))
";

/// Adaptive-caching fixture: `burn`'s argument depends on both gaussians,
/// so every proposal changes it and the callsite never short-circuits.
/// `spin` drives `burn` `k` times per pass, so with demotion thresholds of
/// 10 proposals and 50 fruitless visits the callsite is un-cached at
/// exactly proposal max(10, ceil(50 / k)).
fn adaptive_program(k: u32) -> String {
    format!(
        "; Fixture whose inner callsite's arguments change every proposal.
(define burn (lambda (s) (+ (* s 0.5) 1.0)))
(define spin (lambda (j k s)
  (if (> j k)
      s
      (spin (+ j 1) k (burn s)))))
(let (a (sample gaussian 0.0 1.0))
  (let (b (sample gaussian a 1.0))
    (let (y (spin 1 {k} (+ a b)))
      (let (o (observe gaussian 0.0 3.0 y))
        y))))
"
    )
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::enumerate::{enumerate, posterior};
    use crate::infer::{build_engine, ChainOptions};
    use crate::lang::parse_program;
    use crate::transform::Engine as Strategy;
    use rand::SeedableRng;

    fn init_choices(src: &str) -> (u64, u64, u64) {
        let prog = parse_program(src).unwrap();
        let mut engine = build_engine(Strategy::Lightweight, &prog, false).unwrap();
        let mut rng = ChainRng::seed_from_u64(1);
        engine.initial_run(&mut rng).unwrap();
        let deltas = engine.staged_deltas();
        let choices = deltas
            .iter()
            .filter(|d| d.new.map_or(false, |e| e.kind == crate::cachert::ScoreKind::Choice))
            .count() as u64;
        let observes = deltas.len() as u64 - choices;
        (engine.num_choices() as u64, choices, observes)
    }

    #[test]
    fn every_model_parses_at_representative_sizes() {
        let sizes: &[(&str, &[u32])] = &[
            ("hmm", &[1, 10, 100]),
            ("hmm-list", &[10]),
            ("lda", &[1, 5]),
            ("gmm", &[1, 20]),
            ("hlr", &[1, 5]),
            ("rectree", &[0, 4]),
            ("branching", &[0]),
            ("single-flip", &[0]),
            ("tiny-hmm", &[2]),
            ("adaptive", &[1, 5]),
        ];
        for (name, ns) in sizes {
            for &n in *ns {
                let spec = build_model(name, n, 7).unwrap();
                parse_program(&spec.program)
                    .unwrap_or_else(|e| panic!("{name} size {n} failed to parse: {e}"));
            }
        }
    }

    #[test]
    fn data_generation_is_seed_deterministic() {
        let a = build_model("hmm", 20, 7).unwrap();
        let b = build_model("hmm", 20, 7).unwrap();
        let c = build_model("hmm", 20, 8).unwrap();
        assert_eq!(a.program, b.program);
        assert_ne!(a.program, c.program);
    }

    #[test]
    fn trace_sizes_match_the_documented_counts() {
        for (name, size) in [
            ("hmm", 10),
            ("hmm-list", 10),
            ("tiny-hmm", 2),
            ("lda", 5),
            ("gmm", 15),
            ("hlr", 4),
            ("single-flip", 0),
            ("branching", 0),
            ("adaptive", 3),
        ] {
            let spec = build_model(name, size, 7).unwrap();
            let (live, staged, _) = init_choices(&spec.program);
            let want = expected_choices(name, size).unwrap();
            assert_eq!(live, want, "{name} live choices");
            assert_eq!(staged, want, "{name} staged choices");
        }
    }

    #[test]
    fn the_hmm_observes_every_data_point_and_the_lda_every_token() {
        let hmm = build_model("hmm", 10, 7).unwrap();
        assert_eq!(init_choices(&hmm.program).2, 10);
        // 5 documents x 20 words = 100 observed tokens.
        let lda = build_model("lda", 5, 7).unwrap();
        assert_eq!(init_choices(&lda.program).2, 100);
    }

    #[test]
    fn tiny_hmm_enumerates_one_path_per_latent_assignment() {
        let spec = build_model("tiny-hmm", 2, 7).unwrap();
        let prog = parse_program(&spec.program).unwrap();
        let outcomes = enumerate(&prog, 1 << 12).unwrap();
        assert_eq!(outcomes.len(), 4);
        let total: f64 = {
            let max = outcomes
                .iter()
                .map(|o| o.log_weight)
                .fold(f64::NEG_INFINITY, f64::max);
            outcomes.iter().map(|o| (o.log_weight - max).exp()).sum()
        };
        assert!(total.is_finite() && total > 0.0);
    }

    #[test]
    fn single_flip_matches_its_analytic_distribution() {
        let spec = build_model("single-flip", 0, 7).unwrap();
        let prog = parse_program(&spec.program).unwrap();
        let outcomes = enumerate(&prog, 16).unwrap();
        let post = posterior(&outcomes, |o| o.final_value.to_string());
        let p_true = post.iter().find(|(k, _)| k == "true").unwrap().1;
        assert!((p_true - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rectree_proposals_change_the_trace_structure() {
        let spec = build_model("rectree", 4, 7).unwrap();
        let prog = parse_program(&spec.program).unwrap();
        let mut engine = build_engine(Strategy::C3, &prog, false).unwrap();
        let opts = ChainOptions {
            steps: 200,
            seed: 3,
            collect_steps: true,
            integrity_every: Some(25),
            ..ChainOptions::default()
        };
        let result = crate::infer::run_chain(engine.as_mut(), &opts).unwrap();
        // Some accepted flip grew a subtree: fresh cache nodes appeared
        // after the initial pass.
        let grown: u64 = result.steps.iter().map(|s| s.cost.nodes_created).sum();
        assert!(grown > 0, "no proposal ever grew the tree");
        engine.check_integrity().unwrap();
    }

    #[test]
    fn the_adaptive_fixture_demotes_at_the_documented_proposal() {
        // k visits per pass: demotion at proposal max(10, ceil(50/k)).
        for (k, expect) in [(1u32, 50u64), (5, 10), (2, 25)] {
            let spec = build_model("adaptive", k, 7).unwrap();
            let prog = parse_program(&spec.program).unwrap();
            let mut engine = build_engine(Strategy::Caching, &prog, true).unwrap();
            let opts = ChainOptions {
                steps: 80,
                seed: 9,
                collect_steps: true,
                ..ChainOptions::default()
            };
            let result = crate::infer::run_chain(engine.as_mut(), &opts).unwrap();
            let first = result
                .steps
                .iter()
                .find(|s| s.cost.uncached_sites >= 1)
                .map(|s| s.index + 1)
                .expect("no callsite was ever demoted");
            assert_eq!(first, expect, "k = {k}");
        }
    }

    #[test]
    fn unknown_models_and_bad_sizes_are_rejected() {
        assert!(matches!(
            build_model("hmm2", 10, 7),
            Err(ModelError::Unknown(_))
        ));
        assert!(matches!(
            build_model("hmm", 0, 7),
            Err(ModelError::SizeOutOfRange { .. })
        ));
        assert!(matches!(
            build_model("rectree", 9, 7),
            Err(ModelError::SizeOutOfRange { .. })
        ));
        assert!(matches!(
            build_model("tiny-hmm", 11, 7),
            Err(ModelError::SizeOutOfRange { .. })
        ));
    }

    #[test]
    fn normalized_sizes_follow_the_documented_mapping() {
        assert_eq!(normalized_size("hmm", 10), Some(100));
        assert_eq!(normalized_size("lda", 10), Some(50));
        assert_eq!(normalized_size("gmm", 3), Some(60));
        assert_eq!(normalized_size("hlr", 2), Some(10));
        assert_eq!(normalized_size("branching", 1), None);
    }
}
