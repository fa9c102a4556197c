//! Pulse sequences and the encodings that map values in `[0, 1]` onto them.
//!
//! Positions are 0-based in this API. Where the classical formulation counts pulses
//! from 1 (e.g. the clock-divided indicator `⌊iy⌋ ≠ ⌊(i+1)y⌋`), position `p`
//! corresponds to pulse `i = p + 1`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_unit, Error, Result};

const WORD: usize = 64;

/// An immutable run of `N ≥ 1` binary pulses, packed 64 to a word.
///
/// Bits past `len` in the last word are always zero, so word-wise AND/OR and
/// popcounts never see stray pulses.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitSequence {
    words: Vec<u64>,
    len: usize,
}

impl BitSequence {
    pub fn zeros(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptySequence(len));
        }
        Ok(Self {
            words: vec![0; len.div_ceil(WORD)],
            len,
        })
    }

    pub fn ones(len: usize) -> Result<Self> {
        let mut seq = Self::zeros(len)?;
        seq.words.iter_mut().for_each(|w| *w = u64::MAX);
        seq.mask_tail();
        Ok(seq)
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Result<Self> {
        let mut seq = Self::zeros(len)?;
        for pos in 0..len {
            if f(pos) {
                seq.set(pos);
            }
        }
        Ok(seq)
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        Self::from_fn(bits.len(), |p| bits[p])
    }

    /// Builds a sequence whose bit `p` is bit `p % 64` of `pattern`, repeated.
    pub(crate) fn from_word_pattern(len: usize, pattern: u64) -> Result<Self> {
        let mut seq = Self::zeros(len)?;
        seq.words.iter_mut().for_each(|w| *w = pattern);
        seq.mask_tail();
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, pos: usize) -> bool {
        assert!(pos < self.len, "position {pos} out of range for length {}", self.len);
        self.words[pos / WORD] >> (pos % WORD) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |p| self.get(p))
    }

    /// Positions holding a 1, ascending.
    pub fn ones_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD + tz)
            })
        })
    }

    pub(crate) fn set(&mut self, pos: usize) {
        self.words[pos / WORD] |= 1 << (pos % WORD);
    }

    pub(crate) fn clear(&mut self, pos: usize) {
        self.words[pos / WORD] &= !(1 << (pos % WORD));
    }

    /// Combines two equal-length sequences word by word.
    pub(crate) fn zip_words(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Result<Self> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        let mut out = Self {
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            len: self.len,
        };
        out.mask_tail();
        Ok(out)
    }

    fn mask_tail(&mut self) {
        let rem = self.len % WORD;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

impl fmt::Debug for BitSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitSequence({self})")
    }
}

impl fmt::Display for BitSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .filter(|c| !matches!(c, ',' | ' ' | '_'))
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Contract(format!("invalid pulse character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(&bits)
    }
}

/// `(Σ bits) / N`.
pub fn value_of(seq: &BitSequence) -> f64 {
    seq.count_ones() as f64 / seq.len() as f64
}

/// A bijection on `{0, …, N−1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    images: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Self {
            images: (0..len).collect(),
        }
    }

    /// `σ(i) = (i + offset) mod N`.
    pub fn rotation(len: usize, offset: usize) -> Self {
        Self {
            images: (0..len).map(|i| (i + offset) % len.max(1)).collect(),
        }
    }

    /// Uniformly random permutation (Fisher–Yates).
    pub fn shuffled<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut images: Vec<usize> = (0..len).collect();
        images.shuffle(rng);
        Self { images }
    }

    pub fn from_images(images: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; images.len()];
        for &img in &images {
            if img >= images.len() || std::mem::replace(&mut seen[img], true) {
                return Err(Error::InvalidPermutation(format!(
                    "{images:?} is not a bijection on 0..{}",
                    images.len()
                )));
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.images[i]
    }

    pub fn images(&self) -> &[usize] {
        &self.images
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.images.len()];
        for (i, &img) in self.images.iter().enumerate() {
            inv[img] = i;
        }
        Self { images: inv }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Stochastic,
    /// Format 1 deterministic: the first `round(Nx)` pulses are ones.
    DetUnary,
    /// Format 2 deterministic: clock-divided, ones maximally spread.
    DetSpread,
    /// Dither encoding with the deterministic block placed by a permutation (identity by default).
    DitherF1,
    /// Dither encoding with the deterministic block spread evenly at a random offset.
    DitherF2,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Stochastic,
        Scheme::DetUnary,
        Scheme::DetSpread,
        Scheme::DitherF1,
        Scheme::DitherF2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Stochastic => "stochastic",
            Scheme::DetUnary => "det-unary",
            Scheme::DetSpread => "det-spread",
            Scheme::DitherF1 => "dither-f1",
            Scheme::DitherF2 => "dither-f2",
        }
    }

    pub fn is_deterministic(self) -> bool {
        matches!(self, Scheme::DetUnary | Scheme::DetSpread)
    }

    pub fn is_dither(self) -> bool {
        matches!(self, Scheme::DitherF1 | Scheme::DitherF2)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stochastic" | "sc" => Ok(Scheme::Stochastic),
            "det-unary" | "deterministic" | "det" | "unary" => Ok(Scheme::DetUnary),
            "det-spread" | "spread" => Ok(Scheme::DetSpread),
            "dither-f1" | "dither" => Ok(Scheme::DitherF1),
            "dither-f2" => Ok(Scheme::DitherF2),
            other => Err(Error::Contract(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Scheme selector plus the parameters an encoder needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSpec {
    scheme: Scheme,
    len: usize,
    permutation: Option<Permutation>,
    spread_offset: f64,
}

impl EncodingSpec {
    pub fn new(scheme: Scheme, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptySequence(len));
        }
        Ok(Self {
            scheme,
            len,
            permutation: None,
            spread_offset: 0.0,
        })
    }

    /// Placement permutation for the dither deterministic block (DitherF1 only).
    pub fn with_permutation(mut self, permutation: Permutation) -> Result<Self> {
        if permutation.len() != self.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: permutation.len(),
            });
        }
        self.permutation = Some(permutation);
        Ok(self)
    }

    pub fn with_spread_offset(mut self, offset: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&offset) {
            return Err(Error::Contract(format!("spread offset {offset} outside [0, 1)")));
        }
        self.spread_offset = offset;
        Ok(self)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spread_offset(&self) -> f64 {
        self.spread_offset
    }

    pub fn permutation(&self) -> Permutation {
        self.permutation
            .clone()
            .unwrap_or_else(|| Permutation::identity(self.len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `x ≤ 1/2`: `n = ⌊Nx⌋` certain ones, residual positions fire with probability `δ`.
    LowHalf,
    /// `x > 1/2`: `n = ⌈Nx⌉` block positions fire with probability `1 − δ`, the rest are zero.
    HighHalf,
}

/// The deterministic/stochastic split of a dither encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitherParams {
    /// Size of the deterministic block.
    pub n: usize,
    /// `|x − n/N|`, at most `1/N`.
    pub residual: f64,
    pub delta: f64,
    pub branch: Branch,
}

impl DitherParams {
    pub fn new(x: f64, len: usize) -> Result<Self> {
        check_unit("x", x)?;
        if len == 0 {
            return Err(Error::EmptySequence(len));
        }
        Ok(Self::new_unchecked(x, len))
    }

    pub(crate) fn new_unchecked(x: f64, len: usize) -> Self {
        let big_n = len as f64;
        let scaled = snap_to_integer(big_n * x);
        if x <= 0.5 {
            let n = scaled.floor() as usize;
            debug_assert!(n < len);
            let excess = scaled - n as f64;
            Self {
                n,
                residual: (excess / big_n).max(0.0),
                delta: (excess / (len - n) as f64).clamp(0.0, 1.0),
                branch: Branch::LowHalf,
            }
        } else {
            let n = (scaled.ceil() as usize).min(len);
            debug_assert!(n >= 1);
            let shortfall = n as f64 - scaled;
            Self {
                n,
                residual: (shortfall / big_n).max(0.0),
                delta: (shortfall / n as f64).clamp(0.0, 1.0),
                branch: Branch::HighHalf,
            }
        }
    }

    /// Probability that a position inside (`in_block`) or outside the block holds a 1.
    pub fn fire_probability(&self, in_block: bool) -> f64 {
        match (self.branch, in_block) {
            (Branch::LowHalf, true) => 1.0,
            (Branch::LowHalf, false) => self.delta,
            (Branch::HighHalf, true) => 1.0 - self.delta,
            (Branch::HighHalf, false) => 0.0,
        }
    }

    /// Exact variance of the decoded value: `(N−n)δ(1−δ)/N²` or `nδ(1−δ)/N²`.
    pub fn variance(&self, len: usize) -> f64 {
        let random = match self.branch {
            Branch::LowHalf => len - self.n,
            Branch::HighHalf => self.n,
        };
        random as f64 * self.delta * (1.0 - self.delta) / (len as f64 * len as f64)
    }
}

/// Absorbs binary rounding so that exact fractions `m/N` land on integers.
fn snap_to_integer(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        v
    }
}

/// Calls `hit(k)` for every `k < m` whose independent Bernoulli(`p`) trial succeeds.
///
/// Sparse and dense probabilities use geometric gap sampling on successes or
/// failures respectively, so the cost is proportional to the minority outcome.
pub(crate) fn for_each_bernoulli<R: Rng + ?Sized>(
    m: usize,
    p: f64,
    rng: &mut R,
    mut hit: impl FnMut(usize),
) {
    if m == 0 || p <= 0.0 {
        return;
    }
    if p >= 1.0 {
        (0..m).for_each(hit);
        return;
    }
    if p <= 0.25 {
        geometric_positions(m, p, rng, hit);
    } else if p >= 0.75 {
        let mut next_miss = Vec::new();
        geometric_positions(m, 1.0 - p, rng, |k| next_miss.push(k));
        let mut misses = next_miss.into_iter().peekable();
        for k in 0..m {
            if misses.peek() == Some(&k) {
                misses.next();
            } else {
                hit(k);
            }
        }
    } else {
        for k in 0..m {
            if rng.gen::<f64>() < p {
                hit(k);
            }
        }
    }
}

fn geometric_positions<R: Rng + ?Sized>(m: usize, p: f64, rng: &mut R, mut hit: impl FnMut(usize)) {
    let log_q = (-p).ln_1p();
    let mut k = 0usize;
    loop {
        let u = 1.0 - rng.gen::<f64>(); // (0, 1]
        let gap = (u.ln() / log_q).floor();
        if !gap.is_finite() || gap >= (m - k) as f64 {
            return;
        }
        k += gap as usize;
        hit(k);
        k += 1;
        if k >= m {
            return;
        }
    }
}

/// iid Bernoulli(`x`) pulses.
pub fn encode_stochastic<R: Rng + ?Sized>(x: f64, len: usize, rng: &mut R) -> Result<BitSequence> {
    check_unit("x", x)?;
    let mut seq = BitSequence::zeros(len)?;
    for_each_bernoulli(len, x, rng, |p| seq.set(p));
    Ok(seq)
}

/// Unary (Format 1) deterministic encoding: the first `round(Nx)` pulses are ones.
pub fn encode_det_unary(x: f64, len: usize) -> Result<BitSequence> {
    check_unit("x", x)?;
    let ones = round_half_up(snap_to_integer(len as f64 * x)) as usize;
    BitSequence::from_fn(len, |p| p < ones.min(len))
}

/// Clock-divided (Format 2) deterministic encoding: pulse `i` (1-based) is one iff
/// `⌊iy⌋ ≠ ⌊(i+1)y⌋`.
pub fn encode_det_spread(y: f64, len: usize) -> Result<BitSequence> {
    check_unit("y", y)?;
    BitSequence::from_fn(len, |p| {
        let i = (p + 1) as f64;
        (i * y).floor() != ((i + 1.0) * y).floor()
    })
}

/// Dither encoding under `spec` (which must select `DitherF1` or `DitherF2`).
///
/// `DitherF1` places the deterministic block at `σ(0..n)` for the spec's permutation.
/// `DitherF2` places it at `spread_permutation(n, N, T)` with `T = spec.spread_offset()`.
pub fn encode_dither<R: Rng + ?Sized>(x: f64, spec: &EncodingSpec, rng: &mut R) -> Result<BitSequence> {
    let len = spec.len();
    let params = DitherParams::new(x, len)?;
    let placement = match spec.scheme() {
        Scheme::DitherF1 => spec.permutation(),
        Scheme::DitherF2 => spread_permutation(params.n, len, spec.spread_offset())?,
        other => {
            return Err(Error::Contract(format!(
                "encode_dither needs a dither scheme, got {other}"
            )))
        }
    };
    let images = placement.images();
    let (block, rest) = images.split_at(params.n);
    let mut seq = BitSequence::zeros(len)?;
    match params.branch {
        Branch::LowHalf => {
            block.iter().for_each(|&p| seq.set(p));
            for_each_bernoulli(rest.len(), params.delta, rng, |k| seq.set(rest[k]));
        }
        Branch::HighHalf => {
            block.iter().for_each(|&p| seq.set(p));
            for_each_bernoulli(block.len(), params.delta, rng, |k| seq.clear(block[k]));
        }
    }
    Ok(seq)
}

/// Dispatches to the encoder selected by `spec`.
pub fn encode<R: Rng + ?Sized>(x: f64, spec: &EncodingSpec, rng: &mut R) -> Result<BitSequence> {
    match spec.scheme() {
        Scheme::Stochastic => encode_stochastic(x, spec.len(), rng),
        Scheme::DetUnary => encode_det_unary(x, spec.len()),
        Scheme::DetSpread => encode_det_spread(x, spec.len()),
        Scheme::DitherF1 | Scheme::DitherF2 => encode_dither(x, spec, rng),
    }
}

/// The `ones` evenly spaced slots `⌊(j + T)·N/s⌋`, `j = 0..s`.
///
/// The offset is a fraction of the stride `N/s`, so for `T ~ U[0,1)` every position is
/// a slot with probability exactly `s/N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Spread {
    ones: usize,
    stride: f64,
    inv_stride: f64,
    offset: f64,
}

impl Spread {
    pub(crate) fn new(ones: usize, len: usize, offset: f64) -> Self {
        let (stride, inv_stride) = if ones == 0 {
            (0.0, 0.0)
        } else {
            (len as f64 / ones as f64, ones as f64 / len as f64)
        };
        Self {
            ones,
            stride,
            inv_stride,
            offset,
        }
    }

    pub(crate) fn slot(&self, j: usize) -> usize {
        ((j as f64 + self.offset) * self.stride).floor() as usize
    }

    pub(crate) fn contains(&self, pos: usize) -> bool {
        if self.ones == 0 {
            return false;
        }
        let guess = (pos as f64 * self.inv_stride - self.offset).ceil().max(0.0) as usize;
        let c = guess.min(self.ones - 1);
        let at = self.slot(c);
        match at.cmp(&pos) {
            std::cmp::Ordering::Equal => true,
            std::cmp::Ordering::Greater => c > 0 && self.slot(c - 1) == pos,
            std::cmp::Ordering::Less => c + 1 < self.ones && self.slot(c + 1) == pos,
        }
    }
}

/// Whether position `pos` is one of the `ones` spread slots at `offset`.
pub(crate) fn spread_contains(pos: usize, ones: usize, len: usize, offset: f64) -> bool {
    Spread::new(ones, len, offset).contains(pos)
}

/// Permutation whose first `ones` images are evenly spaced with stride `N/ones`,
/// shifted by `offset` strides; the remaining images are the unused positions in
/// ascending order. `ones == 0` gives the identity.
pub fn spread_permutation(ones: usize, len: usize, offset: f64) -> Result<Permutation> {
    if ones > len {
        return Err(Error::Contract(format!("{ones} ones do not fit in {len} positions")));
    }
    if !(0.0..1.0).contains(&offset) {
        return Err(Error::Contract(format!("spread offset {offset} outside [0, 1)")));
    }
    if ones == 0 {
        return Ok(Permutation::identity(len));
    }
    let spread = Spread::new(ones, len, offset);
    let mut used = vec![false; len];
    let mut images = Vec::with_capacity(len);
    for j in 0..ones {
        let slot = spread.slot(j);
        used[slot] = true;
        images.push(slot);
    }
    images.extend((0..len).filter(|&p| !used[p]));
    Permutation::from_images(images)
}

pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}
