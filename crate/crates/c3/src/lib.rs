//! A small functional probabilistic programming language with a single-site
//! Metropolis–Hastings kernel that can run under four interchangeable
//! execution strategies.
//!
//! The strategies differ in how much work a proposal re-executes:
//!
//! * **lightweight** — re-run the whole program from the top, looking prior
//!   choices up in a database keyed by structural addresses.
//! * **caching** — additionally memoize function calls in a tree-shaped call
//!   cache so unchanged subcomputations are skipped on the way down.
//! * **cps** — transform the program into continuation-passing style and
//!   resume each proposal from the continuation stored at the changed choice,
//!   skipping everything before it.
//! * **c3** — combine both: resume from the choice's continuation *and*
//!   short-circuit through the call cache, so a proposal touches only the
//!   part of the execution that actually depends on the changed value.
//!
//! All four run the same programs, draw the same random numbers in the same
//! order, and produce bit-identical chains; they differ only in the amount of
//! work counted per proposal.

pub mod cachert;
pub mod infer;
pub mod erp;
pub mod lang;
pub mod models;
pub mod transform;
