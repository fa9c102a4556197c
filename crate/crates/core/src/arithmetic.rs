//! Pulse-stream multiplication and scaled addition.
//!
//! A product is a bitwise AND. Multiplying two deterministic or dither operands
//! needs one operand in Format 1 (a contiguous block) and the other in Format 2
//! (ones spread evenly). Two blocks would overlap almost completely and give
//! `min(x, y)` instead of `xy`. The helpers below name their arguments `format1`
//! and `format2` for that reason.
//!
//! Scaled addition `(x + y)/2` multiplexes the two streams with a control sequence `W`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::bitstream::{
    encode_det_spread, encode_det_unary, encode_dither, encode_stochastic, for_each_bernoulli,
    BitSequence, EncodingSpec, Scheme,
};
use crate::error::{Error, Result};

/// Bits at 0-based odd positions, i.e. 1-based even pulses.
const EVEN_PULSES: u64 = 0xAAAA_AAAA_AAAA_AAAA;
/// Bits at 0-based even positions, i.e. 1-based odd pulses.
const ODD_PULSES: u64 = 0x5555_5555_5555_5555;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlScheme {
    /// iid Bernoulli(1/2).
    Stochastic,
    /// `W_i = 1` iff `i` is even (1-based).
    Deterministic,
    /// The alternating sequence `s_i = 1` for odd `i`, or its complement, picked by a fair coin.
    Dither,
}

impl ControlScheme {
    pub fn name(self) -> &'static str {
        match self {
            ControlScheme::Stochastic => "stochastic",
            ControlScheme::Deterministic => "deterministic",
            ControlScheme::Dither => "dither",
        }
    }
}

impl fmt::Display for ControlScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stochastic" => Ok(ControlScheme::Stochastic),
            "deterministic" | "det" => Ok(ControlScheme::Deterministic),
            "dither" => Ok(ControlScheme::Dither),
            other => Err(Error::Contract(format!("unknown control scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlSequence {
    bits: BitSequence,
    scheme: ControlScheme,
}

impl ControlSequence {
    pub fn bits(&self) -> &BitSequence {
        &self.bits
    }

    pub fn scheme(&self) -> ControlScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn make_control<R: Rng + ?Sized>(
    scheme: ControlScheme,
    len: usize,
    rng: &mut R,
) -> Result<ControlSequence> {
    let bits = match scheme {
        ControlScheme::Stochastic => {
            let mut bits = BitSequence::zeros(len)?;
            for_each_bernoulli(len, 0.5, rng, |p| bits.set(p));
            bits
        }
        ControlScheme::Deterministic => BitSequence::from_word_pattern(len, EVEN_PULSES)?,
        ControlScheme::Dither => {
            let pattern = if rng.gen::<bool>() { ODD_PULSES } else { EVEN_PULSES };
            BitSequence::from_word_pattern(len, pattern)?
        }
    };
    Ok(ControlSequence { bits, scheme })
}

/// Bitwise AND.
pub fn multiply(a: &BitSequence, b: &BitSequence) -> Result<BitSequence> {
    a.zip_words(b, |x, y| x & y)
}

/// `U_i = W_i X_i + (1 − W_i) Y_i`.
pub fn scaled_add(x: &BitSequence, y: &BitSequence, w: &ControlSequence) -> Result<BitSequence> {
    let selected = x.zip_words(w.bits(), |a, wb| a & wb)?;
    let rest = y.zip_words(w.bits(), |b, wb| b & !wb)?;
    selected.zip_words(&rest, |a, b| a | b)
}

/// Unary encoding of `format1` AND clock-divided encoding of `format2`.
pub fn deterministic_multiply(format1: f64, format2: f64, len: usize) -> Result<BitSequence> {
    multiply(&encode_det_unary(format1, len)?, &encode_det_spread(format2, len)?)
}

/// Product of two independent iid Bernoulli streams.
pub fn stochastic_multiply<R: Rng + ?Sized>(
    x: f64,
    y: f64,
    len: usize,
    rng: &mut R,
) -> Result<BitSequence> {
    multiply(&encode_stochastic(x, len, rng)?, &encode_stochastic(y, len, rng)?)
}

/// Dither F1 encoding of `format1` AND dither F2 encoding of `format2` at spread offset `t`.
pub fn dither_multiply<R: Rng + ?Sized>(
    format1: f64,
    format2: f64,
    len: usize,
    t: f64,
    rng: &mut R,
) -> Result<BitSequence> {
    let f1 = EncodingSpec::new(Scheme::DitherF1, len)?;
    let f2 = EncodingSpec::new(Scheme::DitherF2, len)?.with_spread_offset(t)?;
    multiply(&encode_dither(format1, &f1, rng)?, &encode_dither(format2, &f2, rng)?)
}
