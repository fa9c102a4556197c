//! k-bit rounding onto the integer grid `{0, …, 2^k − 1}`.
//!
//! Three modes:
//!
//! - deterministic: `⌊x + 1/2⌋`;
//! - stochastic: `⌊x⌋ + Bernoulli(frac x)`;
//! - dither: `d(α, i) = ⌊α⌋ + X_{σ(i)}`, where `X` is the dither encoding of `frac α`
//!   over a cycle of `N` uses. Across one cycle the deterministic block
//!   contributes `n` certain increments. Only the residual positions are random.
//!
//! Fractional parts are floor-based (`α − ⌊α⌋ ∈ [0, 1)`), so negative inputs stay
//! unbiased before clamping.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::bitstream::{spread_contains, DitherParams, Permutation};
use crate::error::{Error, Result};
use crate::seed::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoundingMode {
    Deterministic,
    Stochastic,
    Dither,
}

impl RoundingMode {
    pub const ALL: [RoundingMode; 3] = [
        RoundingMode::Deterministic,
        RoundingMode::Stochastic,
        RoundingMode::Dither,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoundingMode::Deterministic => "deterministic",
            RoundingMode::Stochastic => "stochastic",
            RoundingMode::Dither => "dither",
        }
    }
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deterministic" | "det" => Ok(RoundingMode::Deterministic),
            "stochastic" | "sto" => Ok(RoundingMode::Stochastic),
            "dither" => Ok(RoundingMode::Dither),
            other => Err(Error::Contract(format!("unknown rounding mode {other:?}"))),
        }
    }
}

/// Where the deterministic block of a dither cycle sits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// Positions `0..n` (Format 1).
    Block,
    /// Evenly spread positions at the given offset (Format 2).
    Spread(f64),
}

/// Probability that position `pos` of the dither encoding of `frac` over `len` pulses is one.
pub fn dither_bit_probability(frac: f64, pos: usize, len: usize, placement: Placement) -> f64 {
    let params = DitherParams::new_unchecked(frac, len);
    let in_block = match placement {
        Placement::Block => pos < params.n,
        Placement::Spread(t) => spread_contains(pos, params.n, len, t),
    };
    params.fire_probability(in_block)
}

pub(crate) fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.gen::<f64>() < p
    }
}

fn split(alpha: f64) -> (f64, f64) {
    let fl = alpha.floor();
    (fl, (alpha - fl).clamp(0.0, 1.0))
}

/// `⌊x + 0.5⌋` clamped to `[0, 2^k − 1]`.
pub fn quantize_det(x: f64, k: u32) -> u32 {
    Quantizer::new(k).expect("bit width").deterministic(x)
}

/// `⌊x⌋ + Bernoulli(frac x)` after clamping to `[0, 2^k − 1]`.
pub fn round_stochastic<R: Rng + ?Sized>(x: f64, k: u32, rng: &mut R) -> u32 {
    Quantizer::new(k).expect("bit width").stochastic(x, rng)
}

/// `⌊α⌋` plus pulse `σ(i)` of the Format 1 dither encoding of `frac α` over `N` pulses.
pub fn dither_round<R: Rng + ?Sized>(
    alpha: f64,
    i: usize,
    len: usize,
    sigma: &Permutation,
    rng: &mut R,
) -> Result<i64> {
    if i >= len {
        return Err(Error::Contract(format!("dither index {i} outside 0..{len}")));
    }
    if sigma.len() != len {
        return Err(Error::LengthMismatch {
            left: len,
            right: sigma.len(),
        });
    }
    Ok(dither_round_at(alpha, sigma.apply(i), len, Placement::Block, rng))
}

fn dither_round_at<R: Rng + ?Sized>(
    alpha: f64,
    pos: usize,
    len: usize,
    placement: Placement,
    rng: &mut R,
) -> i64 {
    let (fl, frac) = split(alpha);
    let p = dither_bit_probability(frac, pos, len, placement);
    fl as i64 + bernoulli(p, rng) as i64
}

/// The `2^k` output levels and the clamping that keeps results inside them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantizer {
    k: u32,
}

impl Quantizer {
    pub fn new(k: u32) -> Result<Self> {
        if !(1..=31).contains(&k) {
            return Err(Error::Contract(format!("bit width {k} outside 1..=31")));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// `L = 2^k − 1`.
    pub fn max_level(&self) -> u32 {
        (1u32 << self.k) - 1
    }

    pub fn clamp(&self, x: f64) -> f64 {
        if x.is_nan() {
            0.0
        } else {
            x.clamp(0.0, self.max_level() as f64)
        }
    }

    pub fn deterministic(&self, x: f64) -> u32 {
        (self.clamp(x) + 0.5).floor().min(self.max_level() as f64) as u32
    }

    pub fn stochastic<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> u32 {
        let (fl, frac) = split(self.clamp(x));
        fl as u32 + bernoulli(frac, rng) as u32
    }

    /// Dither rounding of the clamped value at pulse `σ(i)` of a cycle of `N`.
    pub fn dither<R: Rng + ?Sized>(
        &self,
        x: f64,
        i: usize,
        len: usize,
        sigma: &Permutation,
        rng: &mut R,
    ) -> Result<u32> {
        dither_round(self.clamp(x), i, len, sigma, rng).map(|v| v as u32)
    }
}

/// Which matrix operand a rounder serves. The right operand spreads its
/// deterministic block so that products of left and right pulses stay unbiased.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperandSide {
    Left,
    Right { spread_offset: f64 },
}

impl OperandSide {
    fn placement(self) -> Placement {
        match self {
            OperandSide::Left => Placement::Block,
            OperandSide::Right { spread_offset } => Placement::Spread(spread_offset),
        }
    }
}

/// Stateful dither rounder: call `s` uses pulse `σ(s mod N)`.
///
/// Single owner; parallel code derives indices from loop coordinates instead of
/// sharing a counter (see [`crate::linalg`]).
#[derive(Debug, Clone)]
pub struct DitherRounder {
    len: usize,
    sigma: Permutation,
    counter: u64,
    side: OperandSide,
}

impl DitherRounder {
    pub fn new(len: usize, sigma: Permutation, side: OperandSide) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptySequence(len));
        }
        if sigma.len() != len {
            return Err(Error::LengthMismatch {
                left: len,
                right: sigma.len(),
            });
        }
        if let OperandSide::Right { spread_offset } = side {
            if !(0.0..1.0).contains(&spread_offset) {
                return Err(Error::Contract(format!(
                    "spread offset {spread_offset} outside [0, 1)"
                )));
            }
        }
        Ok(Self {
            len,
            sigma,
            counter: 0,
            side,
        })
    }

    /// Rounder whose σ is a random rotation drawn from the seed. Left and right
    /// rounders use separate substreams; the right one also draws its spread offset.
    pub fn seeded(len: usize, right: bool, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, &[Stream::Rounder as u64, right as u64]);
        let sigma = Permutation::rotation(len, rng.gen_range(0..len.max(1)));
        let side = if right {
            OperandSide::Right {
                spread_offset: rng.gen::<f64>(),
            }
        } else {
            OperandSide::Left
        };
        Self::new(len, sigma, side)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn sigma(&self) -> &Permutation {
        &self.sigma
    }

    pub fn side(&self) -> OperandSide {
        self.side
    }

    /// Rounds `alpha` and advances the counter.
    pub fn next<R: Rng + ?Sized>(&mut self, alpha: f64, rng: &mut R) -> i64 {
        let pos = self.sigma.apply((self.counter % self.len as u64) as usize);
        self.counter += 1;
        dither_round_at(alpha, pos, self.len, self.side.placement(), rng)
    }
}
