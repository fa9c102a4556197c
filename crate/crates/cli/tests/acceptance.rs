//! Acceptance criteria, one `[PASS]`/`[FAIL]` line each. Exits nonzero if any fails.
//!
//! Everything runs from master seed 7. MNIST criteria read `data/mnist` at the
//! workspace root.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dither_core::arithmetic::deterministic_multiply;
use dither_core::bitstream::{value_of, Permutation, Scheme};
use dither_core::linalg::{
    frobenius_error, matmul_exact, matmul_quantized, run_matmul_experiment, MatmulExperiment, Matrix,
    QuantMatmulConfig, Variant,
};
use dither_core::nn::{self, Split, TrainConfig};
use dither_core::rounding::{dither_round, quantize_det, round_stochastic, RoundingMode};
use dither_core::seed::{derive, substream, Stream};
use dither_core::stats::{self, emse_lower_bound, loglog_slope, trial_value, Operation, StatsRecord};
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEED: u64 = 7;
const CI_N: [usize; 4] = [16, 64, 256, 1024];
const CI_PAIRS: usize = 200;
const CI_TRIALS: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Outcome, String>;

struct Suite {
    failures: usize,
    cache: HashMap<(Operation, Scheme), Vec<StatsRecord>>,
}

impl Suite {
    fn criterion(&mut self, id: u32, title: &str, budget: Duration, f: impl FnOnce(&mut Self) -> Check) {
        let start = Instant::now();
        let result = f(self);
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = elapsed <= budget;
        let pass = pass && in_time;
        if !pass {
            self.failures += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        let over = if in_time { "" } else { " over budget" };
        println!(
            "[{tag}] AC-{id} {title}: {detail} ({:.1} s of {} s{over})",
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }

    /// CI-preset sweep records for one operation and scheme, computed once.
    fn ci(&mut self, op: Operation, scheme: Scheme) -> Result<&[StatsRecord], String> {
        if !self.cache.contains_key(&(op, scheme)) {
            let recs = stats::sweep(op, scheme, &CI_N, CI_PAIRS, CI_TRIALS, SEED).map_err(|e| e.to_string())?;
            self.cache.insert((op, scheme), recs);
        }
        Ok(&self.cache[&(op, scheme)])
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ac1(s: &mut Suite) -> Check {
    let recs = s.ci(Operation::Represent, Scheme::Stochastic)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for r in recs {
        let ratio = r.sample_emse / (1.0 / (6.0 * r.n as f64));
        pass &= (ratio - 1.0).abs() <= 0.10;
        parts.push(format!("N={} ratio {ratio:.3}", r.n));
    }
    Ok(outcome(pass, parts.join(", ")))
}

fn ac2(_: &mut Suite) -> Check {
    let recs = stats::sweep(Operation::Represent, Scheme::DetUnary, &CI_N, 40_000, 1, SEED).map_err(|e| e.to_string())?;
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &recs {
        let ratio = r.sample_emse / (1.0 / (12.0 * (r.n * r.n) as f64));
        pass &= (ratio - 1.0).abs() <= 0.10;
        parts.push(format!("N={} ratio {ratio:.3}", r.n));
    }
    Ok(outcome(pass, format!("40000 pairs; {}", parts.join(", "))))
}

struct CellMoments {
    bias: f64,
    sem: f64,
    var: f64,
    var_se: f64,
}

fn cell_moments(x: f64, n: usize, trials: usize, cell: u64) -> Result<CellMoments, String> {
    let mut bits = substream(SEED, &[Stream::Grid as u64, 3, cell, 0]);
    let mut offsets = substream(SEED, &[Stream::Grid as u64, 3, cell, 1]);
    let errs = (0..trials)
        .map(|_| trial_value(Operation::Represent, Scheme::DitherF1, x, 0.0, n, &mut bits, &mut offsets).map(|v| v - x))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let t = trials as f64;
    let bias = errs.iter().sum::<f64>() / t;
    let m2 = errs.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / t;
    let m4 = errs.iter().map(|e| (e - bias).powi(4)).sum::<f64>() / t;
    let var = m2 * t / (t - 1.0);
    Ok(CellMoments {
        bias,
        sem: (var / t).sqrt(),
        var,
        var_se: ((m4 - m2 * m2 * (t - 3.0) / (t - 1.0)) / t).max(0.0).sqrt(),
    })
}

fn ac3(_: &mut Suite) -> Check {
    let trials = 10_000;
    let cells: Vec<(usize, usize)> = CI_N.iter().flat_map(|&n| (0..=100).map(move |i| (i, n))).collect();
    let moments = cells
        .par_iter()
        .enumerate()
        .map(|(c, &(i, n))| cell_moments(i as f64 / 100.0, n, trials, c as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut bias_fail = Vec::new();
    let mut var_fail = 0;
    let mut worst_z: f64 = 0.0;
    for (&(i, n), m) in cells.iter().zip(&moments) {
        let z = if m.sem > 0.0 { m.bias.abs() / m.sem } else if m.bias == 0.0 { 0.0 } else { f64::INFINITY };
        worst_z = worst_z.max(z);
        if m.bias.abs() > 3.0 * m.sem {
            bias_fail.push(format!("x={:.2} N={n} z={z:.2}", i as f64 / 100.0));
        }
        if m.var > 2.0 / (n * n) as f64 + 5.0 * m.var_se {
            var_fail += 1;
        }
    }
    let random_cells = moments.iter().filter(|m| m.sem > 0.0).count();
    let detail = format!(
        "{} cells x {trials} trials, {random_cells} with nonzero variance; max |bias|/SEM {worst_z:.2}; \
         bias failures [{}]; variance failures {var_fail}",
        cells.len(),
        bias_fail.join("; ")
    );
    Ok(outcome(bias_fail.is_empty() && var_fail == 0, detail))
}

fn ac4(s: &mut Suite) -> Check {
    let mut worst = f64::INFINITY;
    let mut worst_at = String::new();
    let mut count = 0;
    for op in Operation::ALL {
        for scheme in Scheme::ALL {
            for r in s.ci(op, scheme)? {
                let margin = (r.sample_emse - (emse_lower_bound(r.n) - 3.0 * r.emse_se)) / emse_lower_bound(r.n);
                count += 1;
                if margin < worst {
                    worst = margin;
                    worst_at = format!("{scheme} {op} N={}", r.n);
                }
            }
        }
    }
    Ok(outcome(
        worst >= 0.0,
        format!("{count} records; tightest (emse - floor + 3 se)/floor = {worst:.3} at {worst_at}"),
    ))
}

fn ac5(s: &mut Suite) -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for op in Operation::ALL {
        for scheme in Scheme::ALL {
            let recs = s.ci(op, scheme)?;
            let xs: Vec<f64> = recs.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = recs.iter().map(|r| r.sample_emse).collect();
            let slope = loglog_slope(&xs, &ys);
            let target = if scheme == Scheme::Stochastic { -1.0 } else { -2.0 };
            let ok = (slope - target).abs() <= 0.15;
            pass &= ok;
            parts.push(format!("{op}/{scheme} {slope:.2}{}", if ok { "" } else { "!" }));
        }
    }
    Ok(outcome(pass, parts.join(", ")))
}

fn ac6(_: &mut Suite) -> Check {
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for n in [10usize, 100] {
        for i in 0..=50 {
            for j in 0..=50 {
                let (x, y) = (i as f64 / 50.0, j as f64 / 50.0);
                let z = value_of(&deterministic_multiply(x, y, n).map_err(|e| e.to_string())?);
                let scaled = (z - x * y).abs() * n as f64;
                worst = worst.max(scaled);
                pass &= scaled <= 2.0 + 1e-9;
            }
        }
    }
    Ok(outcome(pass, format!("max N|Z - xy| = {worst:.4} (bound 2)")))
}

fn ac7(s: &mut Suite) -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for op in Operation::ALL {
        let dither = s.ci(op, Scheme::DitherF1)?.to_vec();
        let stoch = s.ci(op, Scheme::Stochastic)?.to_vec();
        for (d, st) in dither.iter().zip(&stoch).filter(|(d, _)| d.n >= 256) {
            let ok = d.abs_bias() < st.abs_bias();
            pass &= ok;
            parts.push(format!(
                "{op} N={} {:.1e} vs {:.1e}{}",
                d.n,
                d.abs_bias(),
                st.abs_bias(),
                if ok { "" } else { "!" }
            ));
        }
    }
    Ok(outcome(pass, format!("dither vs stochastic |bias|: {}", parts.join(", "))))
}

/// Composite Simpson rule on `[0, 1]`.
fn simpson(f: impl Fn(f64) -> f64, intervals: usize) -> f64 {
    let h = 1.0 / intervals as f64;
    let inner: f64 = (1..intervals)
        .map(|i| f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(0.0) + inner + f(1.0)) * h / 3.0
}

fn ac8(_: &mut Suite) -> Check {
    let samples = 100_000;
    let mut rng = substream(SEED, &[Stream::Grid as u64, 8]);
    let (mut det, mut sto) = (0.0, 0.0);
    for _ in 0..samples {
        let x: f64 = rng.gen();
        det += (quantize_det(x, 1) as f64 - x).powi(2);
        sto += (round_stochastic(x, 1, &mut rng) as f64 - x).powi(2);
    }
    det /= samples as f64;
    sto /= samples as f64;
    let det_oracle = simpson(|x: f64| x.min(1.0 - x).powi(2), 1000);
    let sto_oracle = simpson(|x| x * (1.0 - 2.0 * x) + x * x, 1000);
    let ok_det = (det / det_oracle - 1.0).abs() <= 0.05 && (det_oracle - 1.0 / 12.0).abs() < 1e-6;
    let ok_sto = (sto / sto_oracle - 1.0).abs() <= 0.05 && (sto_oracle - 1.0 / 6.0).abs() < 1e-6;
    Ok(outcome(
        ok_det && ok_sto,
        format!("deterministic {det:.5} vs {det_oracle:.5}, stochastic {sto:.5} vs {sto_oracle:.5}"),
    ))
}

fn ac9(_: &mut Suite) -> Check {
    let (alpha, beta) = (0.37, 0.61);
    let n = 16;
    let a = Matrix::filled(n, n, alpha);
    let b = Matrix::filled(n, n, beta);

    let mut exact = true;
    for k in 1..=8u32 {
        let top = ((1u64 << k) - 1) as f64;
        let gamma = (top * alpha).round() * (top * beta).round() / (top * top);
        let cfg = QuantMatmulConfig::new(k, RoundingMode::Deterministic, Variant::PerPartial, SEED);
        let out = matmul_quantized(&a, &b, &cfg).map_err(|e| e.to_string())?;
        exact &= out.product.data().iter().all(|&v| (v - gamma * n as f64).abs() <= 1e-12);
    }

    let reps = 500;
    let k = 3;
    let mut unbiased = true;
    let mut parts = Vec::new();
    for mode in [RoundingMode::Dither, RoundingMode::Stochastic] {
        let means = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let seed = derive(SEED, &[Stream::MatmulRounding as u64, 9, mode as u64, rep]);
                let cfg = QuantMatmulConfig::new(k, mode, Variant::PerPartial, seed);
                let out = matmul_quantized(&a, &b, &cfg)?;
                Ok(out.product.data().iter().sum::<f64>() / (n * n * n) as f64)
            })
            .collect::<dither_core::Result<Vec<f64>>>()
            .map_err(|e| e.to_string())?;
        let mean = means.iter().sum::<f64>() / reps as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let sem = (var / reps as f64).sqrt();
        let z = (mean - alpha * beta) / sem;
        unbiased &= z.abs() <= 3.0;
        parts.push(format!("{mode} mean/16 {mean:.5} z={z:.2}"));
    }

    let mut slopes_ok = true;
    for (mode, target) in [(RoundingMode::Dither, -1.0), (RoundingMode::Stochastic, -0.5)] {
        let sizes = [16usize, 64, 256];
        let mut rel = Vec::new();
        for &size in &sizes {
            let a = Matrix::filled(size, size, alpha);
            let b = Matrix::filled(size, size, beta);
            let c = matmul_exact(&a, &b).map_err(|e| e.to_string())?;
            let total = (0..20u64)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive(SEED, &[Stream::MatmulRounding as u64, 10, mode as u64, size as u64, rep]);
                    let out = matmul_quantized(&a, &b, &QuantMatmulConfig::new(k, mode, Variant::PerPartial, seed))?;
                    frobenius_error(&c, &out.product)
                })
                .collect::<dither_core::Result<Vec<f64>>>()
                .map_err(|e| e.to_string())?
                .iter()
                .sum::<f64>();
            rel.push(total / 20.0 / c.frobenius_norm());
        }
        let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
        let slope = loglog_slope(&xs, &rel);
        slopes_ok &= (slope - target).abs() <= 0.2;
        parts.push(format!("{mode} relative e_f slope {slope:.3}"));
    }
    Ok(outcome(
        exact && unbiased && slopes_ok,
        format!("deterministic exact for k=1..8: {exact}; {}", parts.join(", ")),
    ))
}

fn ac10(_: &mut Suite) -> Check {
    let exp = MatmulExperiment::square(100, 100, SEED);
    let rows = run_matmul_experiment(&exp).map_err(|e| e.to_string())?;
    let ef = |k: u32, mode: RoundingMode| {
        rows.iter()
            .find(|r| r.k == k && r.mode == mode.name())
            .map(|r| r.mean_ef)
            .expect("row present")
    };
    let mut pass = true;
    let mut parts = Vec::new();
    let mut crossover = None;
    for k in 1..=8 {
        let (d, s, t) = (
            ef(k, RoundingMode::Dither),
            ef(k, RoundingMode::Stochastic),
            ef(k, RoundingMode::Deterministic),
        );
        if k <= 6 {
            pass &= d < s;
        }
        if k <= 3 {
            pass &= d < t && s < t;
        }
        if crossover.is_none() && t < d && t < s {
            crossover = Some(k);
        }
        parts.push(format!("k={k} {d:.2}/{s:.2}/{t:.2}"));
    }
    pass &= crossover.is_some();
    Ok(outcome(
        pass,
        format!("dither/stochastic/deterministic e_f: {}; crossover k={crossover:?}", parts.join(", ")),
    ))
}

fn ac11(_: &mut Suite) -> Check {
    let a = Matrix::filled(7, 5, 0.2);
    let b = Matrix::filled(5, 3, 0.7);
    let expected = [(Variant::PerPartial, 210), (Variant::InputOnce, 140), (Variant::Separate, 50)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (variant, want) in expected {
        for mode in RoundingMode::ALL {
            let got = matmul_quantized(&a, &b, &QuantMatmulConfig::new(3, mode, variant, SEED))
                .map_err(|e| e.to_string())?
                .rounding_ops;
            pass &= got == want;
        }
        parts.push(format!("{variant} {want}"));
    }
    Ok(outcome(pass, format!("counters match {}", parts.join(", "))))
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn ac12(_: &mut Suite) -> Check {
    let dir = mnist_dir();
    let train = nn::load_dir(&dir, Split::Train).map_err(|e| e.to_string())?;
    let test = nn::load_dir(&dir, Split::Test).map_err(|e| e.to_string())?;
    let model = nn::train_softmax(&train, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let baseline = nn::accuracy(&nn::predict(&model, &test).map_err(|e| e.to_string())?, test.labels());
    let trials = 30;
    let stats = |k, mode| {
        nn::infer_quantized(&model, &test, k, mode, Variant::PerPartial, trials, SEED).map_err(|e| e.to_string())
    };
    let det1 = stats(1, RoundingMode::Deterministic)?.mean;
    let mut pass = baseline >= 0.92 && det1 < 0.5;
    let mut parts = vec![format!("baseline {baseline:.4}"), format!("deterministic k=1 {det1:.4}")];
    for k in [2, 3, 4] {
        let d = stats(k, RoundingMode::Dither)?;
        let s = stats(k, RoundingMode::Stochastic)?;
        if k == 4 {
            pass &= (d.mean - baseline).abs() <= 0.02 && (s.mean - baseline).abs() <= 0.02;
        }
        let ok = d.variance <= s.variance;
        pass &= ok;
        parts.push(format!(
            "k={k} mean {:.4}/{:.4} var {:.2e}/{:.2e}{}",
            d.mean,
            s.mean,
            d.variance,
            s.variance,
            if ok { "" } else { "!" }
        ));
    }
    Ok(outcome(pass, format!("{} (dither/stochastic)", parts.join(", "))))
}

fn ac13(_: &mut Suite) -> Check {
    let draws = 100_000;
    let alpha = 2.7;
    let mut rng = substream(SEED, &[Stream::Grid as u64, 13]);
    let sigma = Permutation::identity(1);
    let mut table = [[0u64; 2]; 2];
    for _ in 0..draws {
        let d = dither_round(alpha, 0, 1, &sigma, &mut rng).map_err(|e| e.to_string())?;
        let s = round_stochastic(alpha, 2, &mut rng) as i64;
        for (row, v) in [(0, d), (1, s)] {
            match v {
                2 => table[row][0] += 1,
                3 => table[row][1] += 1,
                other => return Err(format!("rounded {alpha} to {other}")),
            }
        }
    }
    let total = (2 * draws) as f64;
    let mut chi2 = 0.0;
    for row in &table {
        for col in 0..2 {
            let expected = row.iter().sum::<u64>() as f64 * (table[0][col] + table[1][col]) as f64 / total;
            chi2 += (row[col] as f64 - expected).powi(2) / expected;
        }
    }
    let p = 1.0 - ChiSquared::new(1.0).map_err(|e| e.to_string())?.cdf(chi2);
    Ok(outcome(
        p > 0.01,
        format!(
            "P(3) dither {:.4} stochastic {:.4}, chi2 {chi2:.3}, p = {p:.3}",
            table[0][1] as f64 / draws as f64,
            table[1][1] as f64 / draws as f64
        ),
    ))
}

fn ac14(_: &mut Suite) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mnist = mnist_dir();
    let mnist = mnist.to_str().ok_or("non-UTF-8 path")?;
    let model = dir.join("model.dcwt");
    let model = model.to_str().ok_or("non-UTF-8 path")?;
    let seed = SEED.to_string();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("repr-sweep", vec!["--preset", "ci"]),
        ("mult-sweep", vec!["--preset", "ci"]),
        ("add-sweep", vec!["--preset", "ci"]),
        ("matmul-bench", vec!["--size", "24", "--pairs", "3", "--variant", "per-partial,separate"]),
        ("mnist-train", vec!["--mnist-dir", mnist, "--model", model, "--epochs", "1"]),
        (
            "mnist-eval",
            vec!["--mnist-dir", mnist, "--model", model, "--k", "2", "--trials", "3", "--limit", "300"],
        ),
        ("selftest", vec![]),
    ];
    let mut mismatched = Vec::new();
    for (cmd, extra) in &commands {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.join(format!("{cmd}-{run}.csv"));
            let mut argv = vec!["dithercomp", cmd, "--seed", &seed, "--out", out.to_str().ok_or("non-UTF-8 path")?];
            argv.extend(extra.iter().copied());
            let code = dithercomp::run(argv);
            if code != 0 {
                return Err(format!("{cmd} exited with {code}"));
            }
            outputs.push(fs::read(&out).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            mismatched.push(*cmd);
        }
    }
    Ok(outcome(
        mismatched.is_empty(),
        format!("{} subcommands run twice, differing: {mismatched:?}", commands.len()),
    ))
}

fn main() -> ExitCode {
    let mut s = Suite {
        failures: 0,
        cache: HashMap::new(),
    };
    s.criterion(1, "stochastic representation EMSE = 1/(6N) within 10%", secs(60), ac1);
    s.criterion(2, "deterministic representation EMSE = 1/(12N^2) within 10%", secs(10), ac2);
    s.criterion(3, "dither representation bias and variance bounds", secs(120), ac3);
    s.criterion(4, "no EMSE below 1/(12N^2) - 3 se", secs(600), ac4);
    s.criterion(5, "log-log EMSE slopes", secs(600), ac5);
    s.criterion(6, "deterministic product error at most 2/N", secs(60), ac6);
    s.criterion(7, "dither |bias| below stochastic |bias| at N >= 256", secs(900), ac7);
    s.criterion(8, "1-bit rounding EMSE", secs(60), ac8);
    s.criterion(9, "alpha J times beta J products", secs(600), ac9);
    s.criterion(10, "100x100 Frobenius error orderings", secs(600), ac10);
    s.criterion(11, "rounding operation counts", secs(10), ac11);
    s.criterion(12, "MNIST accuracy under rounding", secs(1200), ac12);
    s.criterion(13, "dither rounding at N=1 matches stochastic rounding", secs(60), ac13);
    s.criterion(14, "subcommands are deterministic", secs(600), ac14);
    if s.failures == 0 {
        println!("acceptance: all 14 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} of 14 criteria failed", s.failures);
        ExitCode::FAILURE
    }
}
