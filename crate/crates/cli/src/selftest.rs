//! Cheap invariant suites that exercise the library end to end.

use dither_core::arithmetic::{deterministic_multiply, make_control, multiply, scaled_add, ControlScheme};
use dither_core::bitstream::{
    encode, encode_det_spread, encode_det_unary, value_of, BitSequence, EncodingSpec, Permutation, Scheme,
};
use dither_core::rounding::{quantize_det, Quantizer};
use dither_core::seed::{substream, Stream};
use dither_core::Result;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
}

fn check(suite: &'static str, name: impl Into<String>, passed: bool) -> Check {
    Check {
        suite,
        name: name.into(),
        passed,
    }
}

const LENGTHS: [usize; 7] = [1, 2, 3, 10, 16, 100, 1024];

pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut checks = exact_fraction(seed)?;
    checks.extend(and_algebra(seed)?);
    checks.extend(quantizer_clamp(seed)?);
    Ok(checks)
}

/// Values on the grid `j/N` are represented with exactly `j` pulses by every scheme
/// that has no residual randomness there.
pub fn exact_fraction(seed: u64) -> Result<Vec<Check>> {
    let mut rng = substream(seed, &[Stream::Grid as u64, 0]);
    let mut out = Vec::new();
    for &n in &LENGTHS {
        let mut ok = [true; 4];
        for j in 0..=n {
            let x = j as f64 / n as f64;
            let unary = encode_det_unary(x, n)?;
            ok[0] &= unary.count_ones() == j && value_of(&unary) == x;
            ok[1] &= encode_det_spread(x, n)?.count_ones() == j;
            for (slot, scheme) in [(2, Scheme::DitherF1), (3, Scheme::DitherF2)] {
                let seq = encode(x, &EncodingSpec::new(scheme, n)?, &mut rng)?;
                ok[slot] &= seq.count_ones() == j;
            }
        }
        for (name, passed) in ["det-unary", "det-spread", "dither-f1", "dither-f2"].iter().zip(ok) {
            out.push(check("exact-fraction", format!("{name} N={n}"), passed));
        }
        let mut stoch = |x| encode(x, &EncodingSpec::new(Scheme::Stochastic, n)?, &mut rng);
        let ends = stoch(0.0)?.count_ones() == 0 && stoch(1.0)?.count_ones() == n;
        out.push(check("exact-fraction", format!("stochastic endpoints N={n}"), ends));
    }
    Ok(out)
}

fn random_seq<R: Rng>(len: usize, rng: &mut R) -> Result<BitSequence> {
    let p: f64 = rng.gen();
    BitSequence::from_fn(len, |_| rng.gen_bool(p))
}

/// AND is commutative, associative and idempotent with ones as identity and
/// zeros as annihilator; the multiplexer is idempotent.
pub fn and_algebra(seed: u64) -> Result<Vec<Check>> {
    let mut rng = substream(seed, &[Stream::Grid as u64, 1]);
    let mut ok = [true; 7];
    for &n in &LENGTHS {
        for _ in 0..20 {
            let a = random_seq(n, &mut rng)?;
            let b = random_seq(n, &mut rng)?;
            let c = random_seq(n, &mut rng)?;
            let ab = multiply(&a, &b)?;
            ok[0] &= ab == multiply(&b, &a)?;
            ok[1] &= multiply(&ab, &c)? == multiply(&a, &multiply(&b, &c)?)?;
            ok[2] &= multiply(&a, &a)? == a;
            ok[3] &= multiply(&a, &BitSequence::ones(n)?)? == a;
            ok[4] &= multiply(&a, &BitSequence::zeros(n)?)? == BitSequence::zeros(n)?;
            for scheme in [ControlScheme::Stochastic, ControlScheme::Deterministic, ControlScheme::Dither] {
                let w = make_control(scheme, n, &mut rng)?;
                ok[5] &= scaled_add(&a, &a, &w)? == a;
            }
        }
        let y = (n / 3) as f64 / n as f64;
        ok[6] &= deterministic_multiply(1.0, y, n)? == encode_det_spread(y, n)?;
    }
    let names = [
        "commutative",
        "associative",
        "idempotent",
        "ones identity",
        "zeros annihilator",
        "scaled_add idempotent",
        "unary one times spread",
    ];
    Ok(names
        .iter()
        .zip(ok)
        .map(|(name, passed)| check("and-algebra", *name, passed))
        .collect())
}

/// Every rounding mode maps any input, including out-of-range and NaN, into `0..=L`.
pub fn quantizer_clamp(seed: u64) -> Result<Vec<Check>> {
    let mut rng = substream(seed, &[Stream::Grid as u64, 2]);
    let mut out = Vec::new();
    for k in 1..=8 {
        let q = Quantizer::new(k)?;
        let l = q.max_level();
        let lf = l as f64;
        let sigma = Permutation::identity(16);
        let mut in_range = true;
        for _ in 0..1000 {
            let x = rng.gen_range(-2.0..lf + 2.0);
            let i = rng.gen_range(0..16);
            in_range &= q.deterministic(x) <= l && q.stochastic(x, &mut rng) <= l;
            in_range &= q.dither(x, i, 16, &sigma, &mut rng)? <= l;
        }
        let edges = q.deterministic(-3.0) == 0
            && q.deterministic(lf + 10.0) == l
            && q.deterministic(f64::NAN) == 0
            && q.clamp(f64::INFINITY) == lf
            && q.clamp(f64::NEG_INFINITY) == 0.0;
        let integers = (0..=l.min(255)).all(|v| quantize_det(v as f64, k) == v);
        out.push(check("quantizer-clamp", format!("range k={k}"), in_range));
        out.push(check("quantizer-clamp", format!("edges k={k}"), edges));
        out.push(check("quantizer-clamp", format!("integers fixed k={k}"), integers));
    }
    Ok(out)
}
