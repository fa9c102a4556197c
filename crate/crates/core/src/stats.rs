//! Monte Carlo bias, variance and EMSE of representation, product and average.
//!
//! A sweep draws `pairs` operand pairs `(x, y)` uniformly from `[0, 1]²`. Each pair
//! is reused for every scheme and every `N`, so the schemes are compared on
//! identical data. Each pair then runs `trials` independent encodings. Fully
//! deterministic schemes run one trial.
//!
//! With `e` the signed error of a single trial:
//!
//! - `bias` is the grand mean of `e`;
//! - `emse` is the grand mean of `e²`, i.e. `E_X[L_x]`;
//! - `variance` is the mean over pairs of the within-pair unbiased variance of `e`;
//! - `sem = sqrt(variance / (pairs · trials))`.
//!
//! `emse_se` is the standard error of `emse` across pairs. It is the relevant noise
//! scale when comparing an EMSE to a closed form, and it is nonzero for
//! deterministic schemes too.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::arithmetic::{make_control, multiply, scaled_add, ControlScheme};
use crate::bitstream::{encode, value_of, EncodingSpec, Scheme};
use crate::error::{Error, Result};
use crate::seed::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operation {
    Represent,
    Multiply,
    Average,
}

impl Operation {
    pub const ALL: [Operation; 3] = [Operation::Represent, Operation::Multiply, Operation::Average];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Represent => "represent",
            Operation::Multiply => "multiply",
            Operation::Average => "average",
        }
    }

    /// Exact value the operation estimates.
    pub fn target(self, x: f64, y: f64) -> f64 {
        match self {
            Operation::Represent => x,
            Operation::Multiply => x * y,
            Operation::Average => 0.5 * (x + y),
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "represent" | "repr" => Ok(Operation::Represent),
            "multiply" | "mult" => Ok(Operation::Multiply),
            "average" | "add" => Ok(Operation::Average),
            other => Err(Error::Contract(format!("unknown operation {other:?}"))),
        }
    }
}

fn scheme_id(scheme: Scheme) -> u64 {
    Scheme::ALL.iter().position(|&s| s == scheme).unwrap() as u64
}

/// Control sequence family matching an encoding scheme.
pub fn control_for(scheme: Scheme) -> ControlScheme {
    match scheme {
        Scheme::Stochastic => ControlScheme::Stochastic,
        Scheme::DetUnary | Scheme::DetSpread => ControlScheme::Deterministic,
        Scheme::DitherF1 | Scheme::DitherF2 => ControlScheme::Dither,
    }
}

/// Decoded output of one trial of `op` under `scheme`.
///
/// The scheme names a family. Products use unary × clock-divided operands (F1 × F2 for
/// dither) and averages use unary operands, whichever member of the family is named. The
/// spread offset `T` is drawn from `offsets`, independently of the pulse draws.
pub fn trial_value(
    op: Operation,
    scheme: Scheme,
    x: f64,
    y: f64,
    len: usize,
    bits: &mut ChaCha8Rng,
    offsets: &mut ChaCha8Rng,
) -> Result<f64> {
    let spec = |s: Scheme, offsets: &mut ChaCha8Rng| -> Result<EncodingSpec> {
        let spec = EncodingSpec::new(s, len)?;
        if s == Scheme::DitherF2 {
            spec.with_spread_offset(offsets.gen::<f64>())
        } else {
            Ok(spec)
        }
    };
    let out = match op {
        Operation::Represent => encode(x, &spec(scheme, offsets)?, bits)?,
        Operation::Multiply => {
            let (left, right) = match scheme {
                Scheme::Stochastic => (Scheme::Stochastic, Scheme::Stochastic),
                Scheme::DetUnary | Scheme::DetSpread => (Scheme::DetUnary, Scheme::DetSpread),
                Scheme::DitherF1 | Scheme::DitherF2 => (Scheme::DitherF1, Scheme::DitherF2),
            };
            let a = encode(x, &spec(left, offsets)?, bits)?;
            let b = encode(y, &spec(right, offsets)?, bits)?;
            multiply(&a, &b)?
        }
        Operation::Average => {
            let unary = match scheme {
                Scheme::Stochastic => Scheme::Stochastic,
                Scheme::DetUnary | Scheme::DetSpread => Scheme::DetUnary,
                Scheme::DitherF1 | Scheme::DitherF2 => Scheme::DitherF1,
            };
            let a = encode(x, &spec(unary, offsets)?, bits)?;
            let b = encode(y, &spec(unary, offsets)?, bits)?;
            let w = make_control(control_for(scheme), len, bits)?;
            scaled_add(&a, &b, &w)?
        }
    };
    Ok(value_of(&out))
}

/// Error moments for one operand pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSummary {
    pub x: f64,
    pub y: f64,
    pub mean_error: f64,
    /// Unbiased within-pair variance (0 for a single trial).
    pub variance: f64,
    pub mse: f64,
}

/// Runs `trials` trials of `op` on a single operand pair.
pub fn run_pair(
    op: Operation,
    scheme: Scheme,
    x: f64,
    y: f64,
    len: usize,
    trials: usize,
    bits: &mut ChaCha8Rng,
    offsets: &mut ChaCha8Rng,
) -> Result<PairSummary> {
    let target = op.target(x, y);
    let (mut mean, mut m2, mut sq) = (0.0, 0.0, 0.0);
    for t in 0..trials {
        let e = trial_value(op, scheme, x, y, len, bits, offsets)? - target;
        let d = e - mean;
        mean += d / (t + 1) as f64;
        m2 += d * (e - mean);
        sq += e * e;
    }
    Ok(PairSummary {
        x,
        y,
        mean_error: mean,
        variance: if trials > 1 { m2 / (trials - 1) as f64 } else { 0.0 },
        mse: sq / trials as f64,
    })
}

/// The operand pair at index `pair` for a master seed.
pub fn operand_pair(seed: u64, pair: usize) -> (f64, f64) {
    let mut rng = substream(seed, &[Stream::Pairs as u64, pair as u64]);
    (rng.gen::<f64>(), rng.gen::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRecord {
    pub scheme: Scheme,
    pub operation: Operation,
    pub n: usize,
    pub pairs: usize,
    pub trials: usize,
    pub sample_bias: f64,
    pub sample_variance: f64,
    pub sample_emse: f64,
    pub sem: f64,
    /// Standard error of `sample_emse` across pairs.
    pub emse_se: f64,
    pub seed: u64,
}

impl StatsRecord {
    pub fn abs_bias(&self) -> f64 {
        self.sample_bias.abs()
    }

    /// Mean over pairs of `bias_x² + variance_x · (T − 1)/T`, which equals
    /// `sample_emse` up to rounding.
    pub fn emse_decomposition(pairs: &[PairSummary], trials: usize) -> f64 {
        let shrink = (trials as f64 - 1.0) / trials as f64;
        pairs
            .iter()
            .map(|p| p.mean_error * p.mean_error + p.variance * shrink)
            .sum::<f64>()
            / pairs.len() as f64
    }

    fn from_pairs(
        scheme: Scheme,
        operation: Operation,
        n: usize,
        trials: usize,
        seed: u64,
        pairs: &[PairSummary],
    ) -> Self {
        let count = pairs.len() as f64;
        let mean = |f: &dyn Fn(&PairSummary) -> f64| pairs.iter().map(f).sum::<f64>() / count;
        let sample_bias = mean(&|p| p.mean_error);
        let sample_variance = mean(&|p| p.variance);
        let sample_emse = mean(&|p| p.mse);
        let emse_se = if pairs.len() > 1 {
            let ss: f64 = pairs.iter().map(|p| (p.mse - sample_emse).powi(2)).sum();
            (ss / (count - 1.0) / count).sqrt()
        } else {
            0.0
        };
        Self {
            scheme,
            operation,
            n,
            pairs: pairs.len(),
            trials,
            sample_bias,
            sample_variance,
            sample_emse,
            sem: (sample_variance / (count * trials as f64)).sqrt(),
            emse_se,
            seed,
        }
    }
}

/// Per-pair summaries for one `(op, scheme, N)` cell.
pub fn sweep_pairs(
    op: Operation,
    scheme: Scheme,
    len: usize,
    pairs: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<PairSummary>> {
    if pairs == 0 || trials == 0 {
        return Err(Error::Contract("pairs and trials must be at least 1".into()));
    }
    let trials = effective_trials(scheme, trials);
    (0..pairs)
        .into_par_iter()
        .map(|pair| {
            let (x, y) = operand_pair(seed, pair);
            let path = [
                Stream::Trials as u64,
                op.id(),
                scheme_id(scheme),
                len as u64,
                pair as u64,
            ];
            let mut bits = substream(seed, &[&path[..], &[0]].concat());
            let mut offsets = substream(seed, &[&path[..], &[1]].concat());
            run_pair(op, scheme, x, y, len, trials, &mut bits, &mut offsets)
        })
        .collect()
}

/// Deterministic schemes run a single trial regardless of the request.
pub fn effective_trials(scheme: Scheme, trials: usize) -> usize {
    if scheme.is_deterministic() {
        1
    } else {
        trials
    }
}

/// One record per `N` in `n_list`.
pub fn sweep(
    op: Operation,
    scheme: Scheme,
    n_list: &[usize],
    pairs: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<StatsRecord>> {
    if n_list.is_empty() {
        return Err(Error::Contract("empty N list".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let summaries = sweep_pairs(op, scheme, n, pairs, trials, seed)?;
            Ok(StatsRecord::from_pairs(
                scheme,
                op,
                n,
                effective_trials(scheme, trials),
                seed,
                &summaries,
            ))
        })
        .collect()
}

/// Closed-form EMSE under uniform operands, where one is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Theoretical {
    Exact(f64),
    UpperBound(f64),
    /// Only the order is known: EMSE = Θ(N^order).
    AsymptoticOnly { order: i32 },
}

impl Theoretical {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Theoretical::Exact(v) | Theoretical::UpperBound(v) => Some(v),
            Theoretical::AsymptoticOnly { .. } => None,
        }
    }
}

/// Reference EMSE for `(scheme, op)` at length `n` with `x, y ~ U[0, 1]`.
///
/// Stochastic streams have iid Bernoulli pulses of the target value `v`, so
/// `L = E[v(1 − v)]/N`. That gives `1/(6N)`, `(1/4 − 1/9)/N = 5/(36N)` and
/// `(1/2 − 7/24)/N = 5/(24N)` for representation, product and average.
/// Unary representation has error uniform on `±1/(2N)`. Dither representation
/// has variance at most `2/N²` and no bias.
pub fn theoretical_emse(scheme: Scheme, op: Operation, n: usize) -> Result<Theoretical> {
    if n == 0 {
        return Err(Error::EmptySequence(n));
    }
    let big_n = n as f64;
    Ok(match (scheme, op) {
        (Scheme::Stochastic, Operation::Represent) => Theoretical::Exact(1.0 / (6.0 * big_n)),
        (Scheme::Stochastic, Operation::Multiply) => Theoretical::Exact(5.0 / (36.0 * big_n)),
        (Scheme::Stochastic, Operation::Average) => Theoretical::Exact(5.0 / (24.0 * big_n)),
        (Scheme::DetUnary, Operation::Represent) => Theoretical::Exact(emse_lower_bound(n)),
        (Scheme::DitherF1 | Scheme::DitherF2, Operation::Represent) => {
            Theoretical::UpperBound(2.0 / (big_n * big_n))
        }
        (_, _) => Theoretical::AsymptoticOnly { order: -2 },
    })
}

/// `1/(12N²)`: no encoding with denominator `N` can beat this for uniform `x`.
pub fn emse_lower_bound(n: usize) -> f64 {
    1.0 / (12.0 * (n as f64).powi(2))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub const CSV_HEADER: [&str; 11] = [
    "scheme", "operation", "N", "pairs", "trials", "bias", "abs_bias", "variance", "emse", "sem",
    "seed",
];

#[derive(Serialize)]
struct CsvRow<'a> {
    scheme: &'a str,
    operation: &'a str,
    #[serde(rename = "N")]
    n: usize,
    pairs: usize,
    trials: usize,
    bias: f64,
    abs_bias: f64,
    variance: f64,
    emse: f64,
    sem: f64,
    seed: u64,
}

pub fn write_csv<W: Write>(records: &[StatsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in records {
        w.serialize(CsvRow {
            scheme: r.scheme.name(),
            operation: r.operation.name(),
            n: r.n,
            pairs: r.pairs,
            trials: r.trials,
            bias: r.sample_bias,
            abs_bias: r.abs_bias(),
            variance: r.sample_variance,
            emse: r.sample_emse,
            sem: r.sem,
            seed: r.seed,
        })?;
    }
    w.flush()?;
    Ok(())
}
