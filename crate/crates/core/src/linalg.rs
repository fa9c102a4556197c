//! Quantized matrix multiplication `C = AB` with per-operand rounding.
//!
//! Entries of `A` (p×q) and `B` (q×r) are mapped affinely from the declared scale
//! `[lo, hi]` onto `[0, L]`, `L = 2^k − 1`, rounded to integers, multiplied and
//! accumulated exactly in `i64`, then mapped back:
//!
//! ```text
//! C̃_ik = q·lo² + lo·s·(Σ_j a'_ij + Σ_j b'_jk) + s²·Σ_j a'_ij b'_jk,   s = (hi − lo)/L
//! ```
//!
//! Three placements of the rounding step:
//!
//! | variant      | rounds                                   | count      |
//! |--------------|------------------------------------------|------------|
//! | `PerPartial` | both operands of every partial product   | `2pqr`     |
//! | `InputOnce`  | `A_ij` once, `B_jk` per partial          | `pq(r+1)`  |
//! | `Separate`   | `A` and `B` elementwise, then exact GEMM | `(p+r)q`   |
//!
//! Dither mode uses cycle lengths `N_A = r` and `N_B = p`. `A` entries are dithered
//! with their deterministic block first (Format 1). `B` entries spread their block
//! evenly at an offset `T` drawn once per product (Format 2). Cycle positions come
//! from loop coordinates rather than a shared counter. Each reuse of an entry
//! visits a distinct position, and so does each partial-product diagonal:
//!
//! | variant      | index of `A_ij`        | index of `B_jk`        |
//! |--------------|------------------------|------------------------|
//! | `PerPartial` | `(j + k) mod N_A`      | `(i + j) mod N_B`      |
//! | `InputOnce`  | `(i + j) mod N_A`      | `(i + j) mod N_B`      |
//! | `Separate`   | `(i + j) mod N_A`      | `(j + k) mod N_B`      |
//!
//! A random rotation `σ(m) = (m + o) mod N` is applied on top: one for `B`, and one per
//! output row for `A`. Because the schedules are Latin squares, the partial products
//! of one output entry sample each operand's cycle evenly. The rounding errors of
//! `Σ_j` then cancel at the `1/N` rate instead of the `1/√N` rate of independent
//! draws. Drawing `A`'s rotation per row keeps rows that share an input pattern
//! (e.g. blank image background) from sharing a rounding pattern.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bitstream::{Branch, DitherParams, Spread};
use crate::error::{Error, Result};
use crate::rounding::{Quantizer, RoundingMode};
use crate::seed::{derive, substream, Stream};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "{} entries do not form a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// `value · J`.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries iid uniform on `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| lo + (hi - lo) * rng.gen::<f64>())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn check_inner(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

pub fn matmul_exact(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner(a, b, "matmul")?;
    let mut c = Matrix::zeros(a.rows, b.cols);
    c.data
        .par_chunks_mut(b.cols)
        .enumerate()
        .for_each(|(i, out)| {
            for (j, &aij) in a.row(i).iter().enumerate() {
                for (o, &bjk) in out.iter_mut().zip(b.row(j)) {
                    *o += aij * bjk;
                }
            }
        });
    Ok(c)
}

/// `‖C − C̃‖_F`.
pub fn frobenius_error(c: &Matrix, c_tilde: &Matrix) -> Result<f64> {
    if c.shape() != c_tilde.shape() {
        return Err(Error::DimensionMismatch {
            op: "frobenius_error",
            left: c.shape(),
            right: c_tilde.shape(),
        });
    }
    Ok(c.data
        .iter()
        .zip(&c_tilde.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    PerPartial,
    InputOnce,
    Separate,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::PerPartial, Variant::InputOnce, Variant::Separate];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PerPartial => "per-partial",
            Variant::InputOnce => "input-once",
            Variant::Separate => "separate",
        }
    }

    /// Number of scalar roundings for a p×q by q×r product.
    pub fn rounding_count(self, p: usize, q: usize, r: usize) -> u64 {
        let (p, q, r) = (p as u64, q as u64, r as u64);
        match self {
            Variant::PerPartial => 2 * p * q * r,
            Variant::InputOnce => p * q * (r + 1),
            Variant::Separate => (p + r) * q,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "per-partial" | "perpartial" | "partial" => Ok(Variant::PerPartial),
            "input-once" | "inputonce" | "once" => Ok(Variant::InputOnce),
            "separate" => Ok(Variant::Separate),
            other => Err(Error::Contract(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantMatmulConfig {
    pub k: u32,
    pub mode: RoundingMode,
    pub variant: Variant,
    pub seed: u64,
    /// Input range mapped onto `[0, 2^k − 1]`.
    pub scale: (f64, f64),
}

impl QuantMatmulConfig {
    pub fn new(k: u32, mode: RoundingMode, variant: Variant, seed: u64) -> Self {
        Self {
            k,
            mode,
            variant,
            seed,
            scale: (0.0, 1.0),
        }
    }

    pub fn with_scale(mut self, lo: f64, hi: f64) -> Self {
        self.scale = (lo, hi);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedProduct {
    pub product: Matrix,
    /// Scalar roundings actually performed.
    pub rounding_ops: u64,
}

const SCALE: f64 = 4_294_967_296.0; // 2^32

/// One entry prepared for repeated rounding.
///
/// Deterministic entries carry their rounded value in `base` and never fire.
/// Stochastic entries fire with probability `frac`. Dither entries in the low
/// branch fire surely inside the block and with `thr` outside it. In the high
/// branch they fire with `thr` inside the block and never outside.
#[derive(Debug, Clone, Copy)]
struct Entry {
    base: i64,
    thr: u64,
    block: u32,
    low: bool,
}

impl Entry {
    fn new(x: f64, quant: &Quantizer, mode: RoundingMode, len: usize) -> Self {
        let fl = x.floor();
        let frac = x - fl;
        match mode {
            RoundingMode::Deterministic => Entry {
                base: quant.deterministic(x) as i64,
                thr: 0,
                block: 0,
                low: true,
            },
            RoundingMode::Stochastic => Entry {
                base: fl as i64,
                thr: threshold(frac),
                block: 0,
                low: true,
            },
            RoundingMode::Dither => {
                let d = DitherParams::new_unchecked(frac, len);
                let low = d.branch == Branch::LowHalf;
                Entry {
                    base: fl as i64,
                    thr: threshold(d.fire_probability(!low)),
                    block: d.n as u32,
                    low,
                }
            }
        }
    }

    #[inline]
    fn fire(&self, rng: &mut ChaCha8Rng) -> bool {
        self.thr != 0 && (self.thr >= 1 << 32 || u64::from(rng.next_u32()) < self.thr)
    }

    /// Rounded value given whether the visited cycle position is in the block.
    #[inline]
    fn value(&self, in_block: bool, rng: &mut ChaCha8Rng) -> i64 {
        // Low branch: block is certain, the rest fires at `thr`. High branch: the
        // block fires at `thr`, the rest is certain zero.
        let bit = if self.low != in_block { self.fire(rng) } else { self.low };
        self.base + bit as i64
    }
}

fn threshold(p: f64) -> u64 {
    (p.clamp(0.0, 1.0) * SCALE).round() as u64
}

/// Maps `v` from the scale range onto `[0, L]`.
fn to_grid(v: f64, cfg: &QuantMatmulConfig, quant: &Quantizer) -> Result<f64> {
    let (lo, hi) = cfg.scale;
    if !(lo..=hi).contains(&v) {
        return Err(Error::ScaleRange { value: v, lo, hi });
    }
    Ok(quant.clamp((v - lo) / (hi - lo) * quant.max_level() as f64))
}

/// Left operand rounder for one output row: Format 1 block, rotation `offset`.
struct LeftRow {
    entries: Vec<Entry>,
    len: usize,
    offset: usize,
    dither: bool,
}

impl LeftRow {
    /// Rotated cycle position of loop index `idx`.
    #[inline]
    fn pos(&self, idx: usize) -> usize {
        (idx + self.offset) % self.len
    }

    #[inline]
    fn round(&self, j: usize, pos: usize, rng: &mut ChaCha8Rng) -> i64 {
        let e = &self.entries[j];
        e.value(self.dither && pos < e.block as usize, rng)
    }
}

/// Spread-block membership of every right-operand entry at every cycle position.
///
/// Small products use a bitset laid out position-major, so one partial-product row
/// reads adjacent bits. Larger ones test slots arithmetically.
enum Membership {
    None,
    Table { bits: Vec<u64>, entries: usize },
    Slots(Vec<Spread>),
}

const TABLE_BITS_LIMIT: usize = 1 << 31;

impl Membership {
    fn build(entries: &[Entry], len: usize, t: f64) -> Self {
        let spreads: Vec<Spread> = entries.iter().map(|e| Spread::new(e.block as usize, len, t)).collect();
        let total = entries.len() * len;
        if total > TABLE_BITS_LIMIT {
            return Membership::Slots(spreads);
        }
        let mut bits = vec![0u64; total.div_ceil(64)];
        for (at, (sp, e)) in spreads.iter().zip(entries).enumerate() {
            for j in 0..e.block as usize {
                let b = sp.slot(j) * entries.len() + at;
                bits[b / 64] |= 1 << (b % 64);
            }
        }
        Membership::Table {
            bits,
            entries: entries.len(),
        }
    }

    #[inline]
    fn contains(&self, at: usize, pos: usize) -> bool {
        match self {
            Membership::None => false,
            Membership::Table { bits, entries } => {
                let b = pos * entries + at;
                bits[b / 64] >> (b % 64) & 1 == 1
            }
            Membership::Slots(spreads) => spreads[at].contains(pos),
        }
    }
}

/// Right operand rounder: Format 2 spread block, one rotation and one offset `T`.
struct Right {
    entries: Vec<Entry>,
    membership: Membership,
    cols: usize,
    len: usize,
    offset: usize,
}

impl Right {
    #[inline]
    fn pos(&self, idx: usize) -> usize {
        (idx + self.offset) % self.len
    }

    #[inline]
    fn round(&self, j: usize, k: usize, pos: usize, rng: &mut ChaCha8Rng) -> i64 {
        let at = j * self.cols + k;
        self.entries[at].value(self.membership.contains(at, pos), rng)
    }
}

#[derive(Default, Clone, Copy)]
struct Sums {
    ab: i64,
    a: i64,
    b: i64,
}

impl Sums {
    #[inline]
    fn add(&mut self, a: i64, b: i64) {
        self.ab += a * b;
        self.a += a;
        self.b += b;
    }
}

/// Quantized product under `cfg`. Entries must lie inside `cfg.scale`.
///
/// Randomness: a setup substream draws the right operand's rotation and spread
/// offset and one left rotation per output row; row `i` draws its pulses from its
/// own substream, so results do not depend on scheduling.
pub fn matmul_quantized(a: &Matrix, b: &Matrix, cfg: &QuantMatmulConfig) -> Result<QuantizedProduct> {
    check_inner(a, b, "matmul_quantized")?;
    let (lo, hi) = cfg.scale;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Contract(format!("invalid scale range [{lo}, {hi}]")));
    }
    let quant = Quantizer::new(cfg.k)?;
    let (p, q, r) = (a.rows, a.cols, b.cols);
    let dither = cfg.mode == RoundingMode::Dither;
    if let Some(&v) = a.data.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::ScaleRange { value: v, lo, hi });
    }

    let mut setup = substream(cfg.seed, &[Stream::MatmulRounding as u64, 0]);
    let offset_b = setup.gen_range(0..p);
    let spread_t = setup.gen::<f64>();
    let row_offsets: Vec<usize> = (0..p).map(|_| setup.gen_range(0..r)).collect();

    let b_entries = b
        .data
        .iter()
        .map(|&v| Ok(Entry::new(to_grid(v, cfg, &quant)?, &quant, cfg.mode, p)))
        .collect::<Result<Vec<_>>>()?;
    let membership = if dither {
        Membership::build(&b_entries, p, spread_t)
    } else {
        Membership::None
    };
    let right = Right {
        entries: b_entries,
        membership,
        cols: r,
        len: p,
        offset: offset_b,
    };

    // Separate rounds B once up front; its rows are independent of the output rows.
    let b_once: Vec<i64> = if cfg.variant == Variant::Separate {
        (0..q)
            .into_par_iter()
            .flat_map_iter(|j| {
                let mut rng = substream(cfg.seed, &[Stream::MatmulRounding as u64, 2, j as u64]);
                (0..r).map(|k| right.round(j, k, right.pos(j + k), &mut rng)).collect::<Vec<_>>()
            })
            .collect()
    } else {
        Vec::new()
    };

    let rows: Vec<(Vec<Sums>, u64)> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, &[Stream::MatmulRounding as u64, 1, i as u64]);
            let left = LeftRow {
                entries: a
                    .row(i)
                    .iter()
                    .map(|&v| {
                        let x = quant.clamp((v - lo) / (hi - lo) * quant.max_level() as f64);
                        Entry::new(x, &quant, cfg.mode, r)
                    })
                    .collect(),
                len: r,
                offset: row_offsets[i],
                dither,
            };
            let mut sums = vec![Sums::default(); r];
            let mut ops = 0u64;
            for j in 0..q {
                let pos_b = right.pos(i + j);
                match cfg.variant {
                    Variant::PerPartial => {
                        let mut pos_a = left.pos(j);
                        for (k, s) in sums.iter_mut().enumerate() {
                            let av = left.round(j, pos_a, &mut rng);
                            let bv = right.round(j, k, pos_b, &mut rng);
                            s.add(av, bv);
                            pos_a += 1;
                            if pos_a == r {
                                pos_a = 0;
                            }
                        }
                        ops += 2 * r as u64;
                    }
                    Variant::InputOnce => {
                        let av = left.round(j, left.pos(i + j), &mut rng);
                        for (k, s) in sums.iter_mut().enumerate() {
                            s.add(av, right.round(j, k, pos_b, &mut rng));
                        }
                        ops += 1 + r as u64;
                    }
                    Variant::Separate => {
                        let av = left.round(j, left.pos(i + j), &mut rng);
                        for (s, &bv) in sums.iter_mut().zip(&b_once[j * r..(j + 1) * r]) {
                            s.add(av, bv);
                        }
                        ops += 1;
                    }
                }
            }
            (sums, ops)
        })
        .collect();

    let top = quant.max_level() as f64;
    let span = hi - lo;
    let mut ops = b_once.len() as u64;
    let mut data = Vec::with_capacity(p * r);
    for (sums, row_ops) in rows {
        ops += row_ops;
        for s in sums {
            let mut v = s.ab as f64 * (span * span) / (top * top);
            if lo != 0.0 {
                v += q as f64 * lo * lo + lo * span / top * (s.a + s.b) as f64;
            }
            data.push(v);
        }
    }
    Ok(QuantizedProduct {
        product: Matrix { rows: p, cols: r, data },
        rounding_ops: ops,
    })
}

/// Parameters of a random-matrix Frobenius-error benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct MatmulExperiment {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    /// Entries are drawn uniformly from `[range.0, range.1)`.
    pub range: (f64, f64),
    pub scale: (f64, f64),
    pub pairs: usize,
    pub k_list: Vec<u32>,
    pub modes: Vec<RoundingMode>,
    pub variant: Variant,
    pub seed: u64,
}

impl MatmulExperiment {
    /// 100×100 by 100×100, entries in `[0, 0.5)`, quantizer scaled for `[0, 1]`.
    pub fn square(size: usize, pairs: usize, seed: u64) -> Self {
        Self {
            p: size,
            q: size,
            r: size,
            range: (0.0, 0.5),
            scale: (0.0, 1.0),
            pairs,
            k_list: (1..=8).collect(),
            modes: RoundingMode::ALL.to_vec(),
            variant: Variant::PerPartial,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatmulRow {
    pub k: u32,
    pub mode: String,
    pub variant: String,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub pairs: usize,
    pub mean_ef: f64,
    pub std_ef: f64,
    pub rounding_ops: u64,
    pub seed: u64,
}

/// Operand pair `pair` of an experiment.
pub fn experiment_operands(exp: &MatmulExperiment, pair: usize) -> (Matrix, Matrix) {
    let mut rng = substream(exp.seed, &[Stream::MatmulData as u64, pair as u64]);
    let (lo, hi) = exp.range;
    let a = Matrix::random_uniform(exp.p, exp.q, lo, hi, &mut rng);
    let b = Matrix::random_uniform(exp.q, exp.r, lo, hi, &mut rng);
    (a, b)
}

/// Mean and sample standard deviation of `e_f` per `(k, mode)`, rows ordered by k then mode.
pub fn run_matmul_experiment(exp: &MatmulExperiment) -> Result<Vec<MatmulRow>> {
    if exp.pairs == 0 {
        return Err(Error::Contract("pairs must be at least 1".into()));
    }
    let cells: Vec<(u32, RoundingMode)> = exp
        .k_list
        .iter()
        .flat_map(|&k| exp.modes.iter().map(move |&m| (k, m)))
        .collect();
    let mut errors = vec![Vec::with_capacity(exp.pairs); cells.len()];
    let mut ops = vec![0u64; cells.len()];
    for pair in 0..exp.pairs {
        let (a, b) = experiment_operands(exp, pair);
        let c = matmul_exact(&a, &b)?;
        for (cell, &(k, mode)) in cells.iter().enumerate() {
            let seed = derive(
                exp.seed,
                &[Stream::MatmulRounding as u64, pair as u64, k as u64, mode as u64],
            );
            let cfg = QuantMatmulConfig::new(k, mode, exp.variant, seed).with_scale(exp.scale.0, exp.scale.1);
            let out = matmul_quantized(&a, &b, &cfg)?;
            errors[cell].push(frobenius_error(&c, &out.product)?);
            ops[cell] = out.rounding_ops;
        }
    }
    Ok(cells
        .iter()
        .zip(errors)
        .zip(ops)
        .map(|((&(k, mode), errs), rounding_ops)| {
            let (mean, sd) = mean_sd(&errs);
            MatmulRow {
                k,
                mode: mode.name().to_string(),
                variant: exp.variant.name().to_string(),
                p: exp.p,
                q: exp.q,
                r: exp.r,
                pairs: exp.pairs,
                mean_ef: mean,
                std_ef: sd,
                rounding_ops,
                seed: exp.seed,
            }
        })
        .collect())
}

pub(crate) fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub const CSV_HEADER: [&str; 11] = [
    "k", "mode", "variant", "p", "q", "r", "pairs", "mean_ef", "std_ef", "rounding_ops", "seed",
];

pub fn write_csv<W: Write>(rows: &[MatmulRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
