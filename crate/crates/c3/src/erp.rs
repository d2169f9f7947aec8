//! Elementary random primitives: the distributions `sample` and `observe`
//! can name, with log-density scoring and deterministic sampling.
//!
//! # RNG discipline
//!
//! Every draw consumes **exactly one** `u64` from the parent generator and
//! seeds a fresh child generator for the actual sampling algorithm. Rejection
//! samplers (gamma, and dirichlet via gamma) consume a variable number of
//! child values, but the parent stream always advances by one step per draw.
//! All execution strategies therefore stay in lockstep on the parent stream
//! no matter which distributions they draw or how the internal algorithms
//! loop, which is what makes their chains bit-identical.
//!
//! # Scoring
//!
//! `score` returns the log density (or log mass) of a value, `-inf` when the
//! value is outside the distribution's support, and an error only when the
//! value's *type* cannot have come from the distribution — that indicates a
//! bug, not a rejectable proposal.

use std::rc::Rc;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, Gamma as GammaDist, Normal};

use crate::lang::ast::ErpKind;
use crate::lang::eval::RuntimeError;
use crate::lang::value::Value;

/// The generator used everywhere: small state, fast, seedable from a u64.
pub type ChainRng = rand_chacha::ChaCha12Rng;

const LN_2PI: f64 = 1.8378770664093454835606594728112353;

// ═══════════════════════════════════════════════════════════════════════
// Parameter parsing
// ═══════════════════════════════════════════════════════════════════════

/// Validated distribution parameters, parsed once per visit to a choice and
/// stored in its record for rescoring.
#[derive(Debug, Clone)]
pub enum ErpParams {
    Bernoulli { p: f64 },
    /// Nonnegative weights, not necessarily normalized; `sum` is cached.
    Categorical { weights: Vec<f64>, sum: f64 },
    Uniform { lo: f64, hi: f64 },
    Gaussian { mu: f64, sigma: f64 },
    Gamma { shape: f64, scale: f64 },
    Dirichlet { alpha: Vec<f64> },
}

impl ErpParams {
    pub fn kind(&self) -> ErpKind {
        match self {
            ErpParams::Bernoulli { .. } => ErpKind::Bernoulli,
            ErpParams::Categorical { .. } => ErpKind::Categorical,
            ErpParams::Uniform { .. } => ErpKind::Uniform,
            ErpParams::Gaussian { .. } => ErpKind::Gaussian,
            ErpParams::Gamma { .. } => ErpKind::Gamma,
            ErpParams::Dirichlet { .. } => ErpKind::Dirichlet,
        }
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T, RuntimeError> {
    Err(RuntimeError::ErpParams(msg.into()))
}

fn num_param(v: &Value, what: &str) -> Result<f64, RuntimeError> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => bad(format!("{what} must be a finite number, got {v}")),
    }
}

fn list_param(v: &Value, what: &str) -> Result<Vec<f64>, RuntimeError> {
    match v {
        Value::List(items) => items
            .iter()
            .map(|x| num_param(x, what))
            .collect::<Result<Vec<f64>, _>>(),
        other => bad(format!("{what} must be a list of numbers, got {other}")),
    }
}

pub fn parse_params(erp: ErpKind, params: &[Value]) -> Result<ErpParams, RuntimeError> {
    match erp {
        ErpKind::Bernoulli => {
            let p = num_param(&params[0], "bernoulli probability")?;
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("bernoulli probability must be in [0, 1], got {p}"));
            }
            Ok(ErpParams::Bernoulli { p })
        }
        ErpKind::Categorical => {
            let weights = list_param(&params[0], "categorical weight")?;
            if weights.is_empty() {
                return bad("categorical needs at least one weight");
            }
            if weights.iter().any(|&w| w < 0.0) {
                return bad("categorical weights must be nonnegative");
            }
            let sum: f64 = weights.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return bad(format!("categorical weights must sum to a positive number, got {sum}"));
            }
            Ok(ErpParams::Categorical { weights, sum })
        }
        ErpKind::Uniform => {
            let lo = num_param(&params[0], "uniform lower bound")?;
            let hi = num_param(&params[1], "uniform upper bound")?;
            if !(lo < hi) {
                return bad(format!("uniform needs lo < hi, got [{lo}, {hi}]"));
            }
            Ok(ErpParams::Uniform { lo, hi })
        }
        ErpKind::Gaussian => {
            let mu = num_param(&params[0], "gaussian mean")?;
            let sigma = num_param(&params[1], "gaussian stddev")?;
            if !(sigma > 0.0) {
                return bad(format!("gaussian stddev must be positive, got {sigma}"));
            }
            Ok(ErpParams::Gaussian { mu, sigma })
        }
        ErpKind::Gamma => {
            let shape = num_param(&params[0], "gamma shape")?;
            let scale = num_param(&params[1], "gamma scale")?;
            if !(shape > 0.0) || !(scale > 0.0) {
                return bad(format!("gamma shape and scale must be positive, got {shape}, {scale}"));
            }
            Ok(ErpParams::Gamma { shape, scale })
        }
        ErpKind::Dirichlet => {
            let alpha = list_param(&params[0], "dirichlet concentration")?;
            if alpha.len() < 2 {
                return bad("dirichlet needs at least two concentration parameters");
            }
            if alpha.iter().any(|&a| !(a > 0.0)) {
                return bad("dirichlet concentrations must be positive");
            }
            Ok(ErpParams::Dirichlet { alpha })
        }
    }
}

/// Bitwise parameter equality: deterministic, NaN-safe, and exactly the
/// "did anything change" question a revisited choice needs answered.
pub fn params_eq(a: &ErpParams, b: &ErpParams) -> bool {
    fn beq(x: f64, y: f64) -> bool {
        x.to_bits() == y.to_bits()
    }
    fn veq(x: &[f64], y: &[f64]) -> bool {
        x.len() == y.len() && x.iter().zip(y).all(|(a, b)| beq(*a, *b))
    }
    match (a, b) {
        (ErpParams::Bernoulli { p: x }, ErpParams::Bernoulli { p: y }) => beq(*x, *y),
        (
            ErpParams::Categorical { weights: x, .. },
            ErpParams::Categorical { weights: y, .. },
        ) => veq(x, y),
        (ErpParams::Uniform { lo: a1, hi: b1 }, ErpParams::Uniform { lo: a2, hi: b2 }) => {
            beq(*a1, *a2) && beq(*b1, *b2)
        }
        (
            ErpParams::Gaussian { mu: m1, sigma: s1 },
            ErpParams::Gaussian { mu: m2, sigma: s2 },
        ) => beq(*m1, *m2) && beq(*s1, *s2),
        (
            ErpParams::Gamma { shape: k1, scale: t1 },
            ErpParams::Gamma { shape: k2, scale: t2 },
        ) => beq(*k1, *k2) && beq(*t1, *t2),
        (ErpParams::Dirichlet { alpha: x }, ErpParams::Dirichlet { alpha: y }) => veq(x, y),
        _ => false,
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Sampling
// ═══════════════════════════════════════════════════════════════════════

/// Draws a value, consuming exactly one `u64` from `parent` (see module
/// docs). Parameters are assumed validated by [`parse_params`].
pub fn draw(params: &ErpParams, parent: &mut ChainRng) -> Value {
    let mut rng = ChainRng::seed_from_u64(parent.next_u64());
    match params {
        ErpParams::Bernoulli { p } => Value::Bool(rng.gen::<f64>() < *p),
        ErpParams::Categorical { weights, sum } => {
            let u = rng.gen::<f64>() * sum;
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    return Value::Int(i as i64);
                }
            }
            // Floating-point slack: u landed at or beyond the final cumsum.
            Value::Int((weights.len() - 1) as i64)
        }
        ErpParams::Uniform { lo, hi } => Value::Num(lo + (hi - lo) * rng.gen::<f64>()),
        ErpParams::Gaussian { mu, sigma } => {
            let d = Normal::new(*mu, *sigma).expect("params validated");
            Value::Num(d.sample(&mut rng))
        }
        ErpParams::Gamma { shape, scale } => {
            let d = GammaDist::new(*shape, *scale).expect("params validated");
            Value::Num(d.sample(&mut rng))
        }
        ErpParams::Dirichlet { alpha } => {
            let draws: Vec<f64> = alpha
                .iter()
                .map(|&a| {
                    GammaDist::new(a, 1.0)
                        .expect("params validated")
                        .sample(&mut rng)
                })
                .collect();
            let total: f64 = draws.iter().sum();
            Value::List(Rc::new(
                draws.into_iter().map(|x| Value::Num(x / total)).collect(),
            ))
        }
    }
}

/// Finite support of a discrete distribution, in a canonical order; `None`
/// for continuous distributions. Used by the exact enumerator.
pub fn support(params: &ErpParams) -> Option<Vec<Value>> {
    match params {
        ErpParams::Bernoulli { .. } => Some(vec![Value::Bool(false), Value::Bool(true)]),
        ErpParams::Categorical { weights, .. } => {
            Some((0..weights.len()).map(|i| Value::Int(i as i64)).collect())
        }
        _ => None,
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Scoring
// ═══════════════════════════════════════════════════════════════════════

fn type_err<T>(params: &ErpParams, value: &Value) -> Result<T, RuntimeError> {
    Err(RuntimeError::Internal(format!(
        "cannot score a {} against {}",
        value.type_name(),
        params.kind().name()
    )))
}

/// Log density / log mass of `value` under `params`; `-inf` outside the
/// support, `Err` only on type mismatch (a bug, not a rejection).
pub fn score(params: &ErpParams, value: &Value) -> Result<f64, RuntimeError> {
    match params {
        ErpParams::Bernoulli { p } => match value {
            Value::Bool(true) => Ok(p.ln()),
            Value::Bool(false) => Ok((1.0 - p).ln()),
            _ => type_err(params, value),
        },
        ErpParams::Categorical { weights, sum } => match value {
            Value::Int(i) => {
                if *i < 0 || *i as usize >= weights.len() {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(weights[*i as usize].ln() - sum.ln())
            }
            _ => type_err(params, value),
        },
        ErpParams::Uniform { lo, hi } => match value {
            Value::Num(x) => {
                if x < lo || x > hi {
                    Ok(f64::NEG_INFINITY)
                } else {
                    Ok(-(hi - lo).ln())
                }
            }
            _ => type_err(params, value),
        },
        ErpParams::Gaussian { mu, sigma } => match value.as_f64() {
            Some(x) => {
                let z = (x - mu) / sigma;
                Ok(-0.5 * LN_2PI - sigma.ln() - 0.5 * z * z)
            }
            None => type_err(params, value),
        },
        ErpParams::Gamma { shape, scale } => match value.as_f64() {
            Some(x) => {
                if x <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok((shape - 1.0) * x.ln() - x / scale
                    - shape * scale.ln()
                    - libm::lgamma(*shape))
            }
            None => type_err(params, value),
        },
        ErpParams::Dirichlet { alpha } => match value {
            Value::List(items) => {
                if items.len() != alpha.len() {
                    return Ok(f64::NEG_INFINITY);
                }
                let mut lp = libm::lgamma(alpha.iter().sum());
                for (a, v) in alpha.iter().zip(items.iter()) {
                    let x = match v.as_f64() {
                        Some(x) => x,
                        None => return type_err(params, value),
                    };
                    if x <= 0.0 {
                        return Ok(f64::NEG_INFINITY);
                    }
                    lp += (a - 1.0) * x.ln() - libm::lgamma(*a);
                }
                Ok(lp)
            }
            _ => type_err(params, value),
        },
    }
}

// ═══════════════════════════════════════════════════════════════════════

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::ast::ErpKind;

    fn p(erp: ErpKind, params: &[Value]) -> ErpParams {
        parse_params(erp, params).expect("valid params")
    }

    fn lst(xs: &[f64]) -> Value {
        Value::List(Rc::new(xs.iter().map(|&x| Value::Num(x)).collect()))
    }

    const TOL: f64 = 1e-12;

    // Expected values below are analytic log densities, computed by hand and
    // frozen; they guard against silent changes to the scoring code.

    #[test]
    fn bernoulli_scores() {
        let params = p(ErpKind::Bernoulli, &[Value::Num(0.5)]);
        let got = score(&params, &Value::Bool(true)).unwrap();
        assert!((got - (-0.693_147_180_559_945_3)).abs() < TOL, "{got}");
        let params = p(ErpKind::Bernoulli, &[Value::Num(1.0)]);
        assert_eq!(score(&params, &Value::Bool(false)).unwrap(), f64::NEG_INFINITY);
        assert_eq!(score(&params, &Value::Bool(true)).unwrap(), 0.0);
    }

    #[test]
    fn categorical_scores() {
        let params = p(ErpKind::Categorical, &[lst(&[0.2, 0.3, 0.5])]);
        let got = score(&params, &Value::Int(2)).unwrap();
        assert!((got - (-0.693_147_180_559_945_3)).abs() < TOL, "{got}");
        assert_eq!(score(&params, &Value::Int(5)).unwrap(), f64::NEG_INFINITY);
        assert_eq!(score(&params, &Value::Int(-1)).unwrap(), f64::NEG_INFINITY);
        // Unnormalized weights score identically to their normalization.
        let params2 = p(ErpKind::Categorical, &[lst(&[2.0, 3.0, 5.0])]);
        let got2 = score(&params2, &Value::Int(2)).unwrap();
        assert!((got - got2).abs() < TOL);
    }

    #[test]
    fn uniform_scores() {
        let params = p(ErpKind::Uniform, &[Value::Num(2.0), Value::Num(5.0)]);
        let got = score(&params, &Value::Num(3.0)).unwrap();
        assert!((got - (-1.098_612_288_668_109_8)).abs() < TOL, "{got}");
        assert_eq!(score(&params, &Value::Num(6.0)).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn gaussian_scores() {
        let params = p(ErpKind::Gaussian, &[Value::Num(0.0), Value::Num(1.0)]);
        let got = score(&params, &Value::Num(0.0)).unwrap();
        assert!((got - (-0.918_938_533_204_672_7)).abs() < TOL, "{got}");
        let got = score(&params, &Value::Num(1.3)).unwrap();
        assert!((got - (-1.763_938_533_204_672_8)).abs() < TOL, "{got}");
    }

    #[test]
    fn gamma_scores() {
        let params = p(ErpKind::Gamma, &[Value::Num(2.0), Value::Num(2.0)]);
        let got = score(&params, &Value::Num(3.0)).unwrap();
        assert!((got - (-1.787_682_072_451_780_8)).abs() < TOL, "{got}");
        assert_eq!(score(&params, &Value::Num(-1.0)).unwrap(), f64::NEG_INFINITY);
        assert_eq!(score(&params, &Value::Num(0.0)).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn dirichlet_scores() {
        let params = p(ErpKind::Dirichlet, &[lst(&[1.0, 1.0, 1.0])]);
        let got = score(&params, &lst(&[0.2, 0.3, 0.5])).unwrap();
        assert!((got - 0.693_147_180_559_945_3).abs() < TOL, "{got}");
        let params = p(ErpKind::Dirichlet, &[lst(&[2.0, 1.0])]);
        let got = score(&params, &lst(&[0.7, 0.3])).unwrap();
        assert!((got - 0.336_472_236_621_212_9).abs() < TOL, "{got}");
        // Length mismatch is out of support, not a crash.
        assert_eq!(score(&params, &lst(&[0.2, 0.3, 0.5])).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn type_mismatch_is_an_error() {
        let params = p(ErpKind::Gaussian, &[Value::Num(0.0), Value::Num(1.0)]);
        assert!(score(&params, &Value::Bool(true)).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(parse_params(ErpKind::Bernoulli, &[Value::Num(1.5)]).is_err());
        assert!(parse_params(ErpKind::Gaussian, &[Value::Num(0.0), Value::Num(0.0)]).is_err());
        assert!(parse_params(ErpKind::Uniform, &[Value::Num(2.0), Value::Num(2.0)]).is_err());
        assert!(parse_params(ErpKind::Categorical, &[lst(&[])]).is_err());
        assert!(parse_params(ErpKind::Categorical, &[lst(&[-1.0, 2.0])]).is_err());
        assert!(parse_params(ErpKind::Dirichlet, &[lst(&[1.0])]).is_err());
        assert!(parse_params(ErpKind::Gamma, &[Value::Num(0.0), Value::Num(1.0)]).is_err());
        // Ints are accepted wherever numbers are expected.
        assert!(parse_params(ErpKind::Gaussian, &[Value::Int(0), Value::Int(1)]).is_ok());
    }

    #[test]
    fn params_eq_is_bitwise() {
        let a = p(ErpKind::Gaussian, &[Value::Num(0.0), Value::Num(1.0)]);
        let b = p(ErpKind::Gaussian, &[Value::Num(0.0), Value::Num(1.0)]);
        let c = p(ErpKind::Gaussian, &[Value::Num(0.1), Value::Num(1.0)]);
        assert!(params_eq(&a, &b));
        assert!(!params_eq(&a, &c));
        let d = p(ErpKind::Gaussian, &[Value::Num(-0.0), Value::Num(1.0)]);
        assert!(!params_eq(&a, &d), "signed zeros are distinct bit patterns");
    }

    #[test]
    fn draws_are_deterministic_given_the_parent_seed() {
        let params = p(ErpKind::Gaussian, &[Value::Num(0.0), Value::Num(1.0)]);
        let mut r1 = ChainRng::seed_from_u64(42);
        let mut r2 = ChainRng::seed_from_u64(42);
        let a = draw(&params, &mut r1);
        let b = draw(&params, &mut r2);
        match (a, b) {
            (Value::Num(x), Value::Num(y)) => assert_eq!(x.to_bits(), y.to_bits()),
            other => panic!("expected numbers, got {other:?}"),
        }
    }

    #[test]
    fn parent_consumption_is_uniform_across_distributions() {
        // Whatever the distribution (and however many values its rejection
        // loop needs), the parent stream advances by exactly one u64.
        let gamma = p(ErpKind::Gamma, &[Value::Num(0.2), Value::Num(1.0)]);
        let bern = p(ErpKind::Bernoulli, &[Value::Num(0.5)]);
        let mut r1 = ChainRng::seed_from_u64(7);
        let mut r2 = ChainRng::seed_from_u64(7);
        let _ = draw(&gamma, &mut r1);
        let _ = draw(&bern, &mut r2);
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn sampler_sanity() {
        let mut rng = ChainRng::seed_from_u64(1234);
        let gauss = p(ErpKind::Gaussian, &[Value::Num(3.0), Value::Num(0.5)]);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = match draw(&gauss, &mut rng) {
                Value::Num(x) => x,
                other => panic!("{other:?}"),
            };
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 3.0).abs() < 0.02, "mean {mean}");
        assert!((var - 0.25).abs() < 0.02, "var {var}");

        let cat = p(ErpKind::Categorical, &[lst(&[0.2, 0.3, 0.5])]);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match draw(&cat, &mut rng) {
                Value::Int(i) => counts[i as usize] += 1,
                other => panic!("{other:?}"),
            }
        }
        let freq2 = counts[2] as f64 / n as f64;
        assert!((freq2 - 0.5).abs() < 0.02, "freq {freq2}");

        let dir = p(ErpKind::Dirichlet, &[lst(&[2.0, 3.0, 5.0])]);
        match draw(&dir, &mut rng) {
            Value::List(items) => {
                let total: f64 = items.iter().map(|v| v.as_f64().unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }

        let gamma = p(ErpKind::Gamma, &[Value::Num(2.0), Value::Num(2.0)]);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += match draw(&gamma, &mut rng) {
                Value::Num(x) => x,
                other => panic!("{other:?}"),
            };
        }
        let mean = sum / n as f64; // E[gamma(2, 2)] = 4
        assert!((mean - 4.0).abs() < 0.1, "mean {mean}");
    }
}
