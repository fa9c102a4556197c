//! MNIST ingestion, softmax-regression training and quantized inference.
//!
//! Inference rounds only the multiplication operands. Weights are divided by
//! `max|W|` so they fit `[−1, 1]`. Activations are divided by `max(1, max|v|)`, so
//! raw pixels in `[0, 1]` are used as they are. Both are quantized on a grid
//! scaled for `[−1, 1]`. Pixels therefore use only the upper half of the levels.
//! Accumulation, the inverse scaling and the bias addition are full precision.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, IngestError, Result};
use crate::linalg::{matmul_exact, matmul_quantized, Matrix, QuantMatmulConfig, Variant};
use crate::rounding::RoundingMode;
use crate::seed::{derive, substream, Stream};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const CLASSES: usize = 10;

/// Images as rows of pixels in `[0, 1]`, with labels in `0..=9`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u8>,
    features: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, features: usize) -> Result<Self> {
        if features == 0 || images.len() != labels.len() * features {
            return Err(Error::Contract(format!(
                "{} pixels do not match {} labels of {features} features",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::Contract(format!("label {l} out of range")));
        }
        Ok(Self {
            images,
            labels,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.features..(i + 1) * self.features]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.features].to_vec(),
            labels: self.labels[..n].to_vec(),
            features: self.features,
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.len(),
            self.features,
            self.images.iter().map(|&v| v as f64).collect(),
        )
        .expect("dataset shape")
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, IngestError> {
    let open = |source| IngestError::Open {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(open)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(open)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn parse_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>, IngestError> {
    let header = 4 + 4 * dims;
    let truncated = |expected| IngestError::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    let found = be_u32(bytes, 0).ok_or_else(|| truncated(header))?;
    if found != magic {
        return Err(IngestError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let shape: Vec<usize> = (0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| truncated(header))?;
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    Ok(shape)
}

/// Reads an IDX image/label pair. Gzip-compressed files are detected by content.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let shape = parse_header(&img, images_path, IMAGE_MAGIC, 3)?;
    let lab = read_maybe_gz(labels_path)?;
    let count = parse_header(&lab, labels_path, LABEL_MAGIC, 1)?[0];
    if shape[0] != count {
        return Err(IngestError::CountMismatch {
            images: shape[0],
            labels: count,
        }
        .into());
    }
    let features = shape[1] * shape[2];
    let labels = lab[8..8 + count].to_vec();
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(IngestError::BadLabel {
            path: labels_path.to_path_buf(),
            label,
        }
        .into());
    }
    let images = img[16..16 + count * features]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(Dataset {
        images,
        labels,
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Paths of the image and label files of `split` under `dir`, preferring
/// uncompressed files and accepting both `-idx3-ubyte` and `.idx3-ubyte` spellings.
pub fn idx_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let find = |kind: &str, dims: u8| {
        let names = [
            format!("{}-{kind}-idx{dims}-ubyte", split.stem()),
            format!("{}-{kind}.idx{dims}-ubyte", split.stem()),
        ];
        names
            .iter()
            .flat_map(|n| [dir.join(n), dir.join(format!("{n}.gz"))])
            .find(|p| p.exists())
            .unwrap_or_else(|| dir.join(format!("{}.gz", names[0])))
    };
    (find("images", 3), find("labels", 1))
}

pub fn load_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = idx_paths(dir, split);
    load_idx(&images, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// A single affine layer followed by softmax.
    Softmax,
    /// ReLU between consecutive layers, softmax after the last.
    ReluThenNext,
}

/// An affine layer `y = xW + b` with `W` of shape inputs×outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.5,
            batch: 100,
            seed: crate::seed::DEFAULT_SEED,
        }
    }
}

fn softmax_in_place(z: &mut [f32]) {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Softmax regression by mini-batch SGD with a per-epoch shuffle and a
/// `1/√epoch` learning-rate decay.
pub fn train_softmax(train: &Dataset, cfg: &TrainConfig) -> Result<ModelWeights> {
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if cfg.batch == 0 || cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(Error::Contract("batch must be positive and lr finite and positive".into()));
    }
    let d = train.features;
    let mut w = vec![0f32; d * CLASSES]; // row-major d×10
    let mut b = [0f32; CLASSES];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = substream(cfg.seed, &[Stream::Training as u64]);
    let mut grad_w = vec![0f32; d * CLASSES];
    let mut z = [0f32; CLASSES];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = (cfg.lr / ((epoch + 1) as f64).sqrt()) as f32;
        let mut loss = 0.0f64;
        for batch in order.chunks(cfg.batch) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = [0f32; CLASSES];
            for &i in batch {
                let x = train.image(i);
                z.copy_from_slice(&b);
                for (&xi, row) in x.iter().zip(w.chunks_exact(CLASSES)) {
                    if xi != 0.0 {
                        for (zc, &wc) in z.iter_mut().zip(row) {
                            *zc += xi * wc;
                        }
                    }
                }
                softmax_in_place(&mut z);
                let y = train.labels[i] as usize;
                loss -= (z[y].max(1e-30) as f64).ln();
                z[y] -= 1.0;
                for (gb, &dz) in grad_b.iter_mut().zip(&z) {
                    *gb += dz;
                }
                for (&xi, grow) in x.iter().zip(grad_w.chunks_exact_mut(CLASSES)) {
                    if xi != 0.0 {
                        for (g, &dz) in grow.iter_mut().zip(&z) {
                            *g += xi * dz;
                        }
                    }
                }
            }
            let step = lr / batch.len() as f32;
            for (wv, g) in w.iter_mut().zip(&grad_w) {
                *wv -= step * g;
            }
            for (bv, g) in b.iter_mut().zip(&grad_b) {
                *bv -= step * g;
            }
        }
        let mean_loss = loss / train.len() as f64;
        if !mean_loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
    }
    Ok(ModelWeights {
        layers: vec![Layer {
            weights: Matrix::new(d, CLASSES, w.iter().map(|&v| v as f64).collect())?,
            bias: b.iter().map(|&v| v as f64).collect(),
        }],
        activation: Activation::Softmax,
    })
}

impl ModelWeights {
    pub fn inputs(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().weights.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::WeightsFormat("model has no layers".into()));
        }
        if self.activation == Activation::Softmax && self.layers.len() != 1 {
            return Err(Error::WeightsFormat("softmax model must have exactly one layer".into()));
        }
        for (idx, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weights.cols() {
                return Err(Error::WeightsFormat(format!("layer {idx}: bias length mismatch")));
            }
            if idx > 0 && self.layers[idx - 1].weights.cols() != l.weights.rows() {
                return Err(Error::WeightsFormat(format!("layer {idx}: input width mismatch")));
            }
        }
        Ok(())
    }

    fn check_input(&self, data: &Dataset) -> Result<()> {
        if data.features() != self.inputs() {
            return Err(Error::DimensionMismatch {
                op: "inference",
                left: (data.len(), data.features()),
                right: self.layers[0].weights.shape(),
            });
        }
        Ok(())
    }
}

const BINARY_MAGIC: &[u8; 4] = b"DCWT";
const FORMAT_VERSION: u32 = 1;

fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::Softmax => 0,
        Activation::ReluThenNext => 1,
    }
}

fn activation_from(code: u32) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Softmax),
        1 => Ok(Activation::ReluThenNext),
        other => Err(Error::WeightsFormat(format!("unknown activation code {other}"))),
    }
}

/// Binary layout, all little-endian:
/// `"DCWT"`, version `u32`, activation `u32`, layer count `u32`, then per layer
/// rows `u32`, cols `u32`, `rows·cols` row-major `f64` weights and `cols` `f64` biases.
pub fn write_weights<W: Write>(model: &ModelWeights, mut out: W) -> Result<()> {
    model.validate()?;
    out.write_all(BINARY_MAGIC)?;
    for v in [FORMAT_VERSION, activation_code(model.activation), model.layers.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for l in &model.layers {
        out.write_all(&(l.weights.rows() as u32).to_le_bytes())?;
        out.write_all(&(l.weights.cols() as u32).to_le_bytes())?;
        for v in l.weights.data().iter().chain(&l.bias) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::WeightsFormat(format!("unexpected end of file at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_weights<R: Read>(mut input: R) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    if cur.take(4)? != BINARY_MAGIC {
        return Err(Error::WeightsFormat("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::WeightsFormat(format!("unsupported version {version}")));
    }
    let activation = activation_from(cur.u32()?)?;
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let weights = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let bias = (0..cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weights: Matrix::new(rows, cols, weights).map_err(|e| Error::WeightsFormat(e.to_string()))?,
            bias,
        });
    }
    let model = ModelWeights { layers, activation };
    model.validate()?;
    Ok(model)
}

/// Plain-text interchange format:
///
/// ```text
/// dcwt 1
/// activation softmax
/// layers 1
/// layer 784 10
/// <784 lines of 10 weights>
/// bias
/// <1 line of 10 biases>
/// ```
pub fn write_weights_text<W: Write>(model: &ModelWeights, mut out: W) -> Result<()> {
    model.validate()?;
    let act = match model.activation {
        Activation::Softmax => "softmax",
        Activation::ReluThenNext => "relu",
    };
    writeln!(out, "dcwt {FORMAT_VERSION}\nactivation {act}\nlayers {}", model.layers.len())?;
    let join = |vals: &[f64]| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
    for l in &model.layers {
        writeln!(out, "layer {} {}", l.weights.rows(), l.weights.cols())?;
        for i in 0..l.weights.rows() {
            writeln!(out, "{}", join(l.weights.row(i)))?;
        }
        writeln!(out, "bias\n{}", join(&l.bias))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_weights_text<R: Read>(mut input: R) -> Result<ModelWeights> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut next = || lines.next().ok_or_else(|| bad("unexpected end of file"));

    if field(next()?, "dcwt")? != [FORMAT_VERSION.to_string()] {
        return Err(bad("unsupported version"));
    }
    let activation = match field(next()?, "activation")?.first().map(String::as_str) {
        Some("softmax") => Activation::Softmax,
        Some("relu") => Activation::ReluThenNext,
        _ => return Err(bad("unknown activation")),
    };
    let count = parse_usize(field(next()?, "layers")?.first())?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let dims = field(next()?, "layer")?;
        let (rows, cols) = (parse_usize(dims.first())?, parse_usize(dims.get(1))?);
        let mut weights = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = parse_floats(next()?)?;
            if row.len() != cols {
                return Err(bad("weight row has the wrong width"));
            }
            weights.extend(row);
        }
        field(next()?, "bias")?;
        let bias = parse_floats(next()?)?;
        layers.push(Layer {
            weights: Matrix::new(rows, cols, weights).map_err(|e| Error::WeightsFormat(e.to_string()))?,
            bias,
        });
    }
    let model = ModelWeights { layers, activation };
    model.validate()?;
    Ok(model)
}

fn bad(msg: &str) -> Error {
    Error::WeightsFormat(msg.to_string())
}

fn field(line: &str, name: &str) -> Result<Vec<String>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(name) {
        return Err(bad(&format!("expected {name:?}, found {line:?}")));
    }
    Ok(parts.map(String::from).collect())
}

fn parse_usize(s: Option<&String>) -> Result<usize> {
    s.and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad integer"))
}

fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|v| v.parse().map_err(|_| bad("bad number")))
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn add_bias_and_activate(z: &mut Matrix, bias: &[f64], relu: bool) {
    for i in 0..z.rows() {
        for (c, &b) in bias.iter().enumerate() {
            let v = z.get(i, c) + b;
            z.set(i, c, if relu { v.max(0.0) } else { v });
        }
    }
}

fn predict_with(
    model: &ModelWeights,
    data: &Dataset,
    mut product: impl FnMut(usize, &Matrix, &Matrix) -> Result<Matrix>,
) -> Result<Vec<usize>> {
    model.validate()?;
    model.check_input(data)?;
    let mut act = data.to_matrix();
    let last = model.layers.len() - 1;
    for (idx, layer) in model.layers.iter().enumerate() {
        let mut z = product(idx, &act, &layer.weights)?;
        add_bias_and_activate(&mut z, &layer.bias, idx != last);
        act = z;
    }
    Ok((0..act.rows()).map(|i| argmax(act.row(i))).collect())
}

/// Full-precision predicted classes.
pub fn predict(model: &ModelWeights, data: &Dataset) -> Result<Vec<usize>> {
    predict_with(model, data, |_, a, w| matmul_exact(a, w))
}

/// Predicted classes with the layer products computed by [`matmul_quantized`].
pub fn predict_quantized(
    model: &ModelWeights,
    data: &Dataset,
    k: u32,
    mode: RoundingMode,
    variant: Variant,
    seed: u64,
) -> Result<Vec<usize>> {
    predict_with(model, data, |idx, a, w| {
        let w_scale = w.max_abs().max(f64::MIN_POSITIVE);
        let a_scale = a.max_abs().max(1.0);
        let cfg = QuantMatmulConfig::new(k, mode, variant, derive(seed, &[idx as u64])).with_scale(-1.0, 1.0);
        let out = matmul_quantized(&a.map(|v| v / a_scale), &w.map(|v| v / w_scale), &cfg)?;
        Ok(out.product.map(|v| v * a_scale * w_scale))
    })
}

pub fn accuracy(predicted: &[usize], labels: &[u8]) -> f64 {
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyStats {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Unbiased sample variance across trials; 0 for a single trial.
    pub variance: f64,
}

impl AccuracyStats {
    fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let variance = if accuracies.len() > 1 {
            accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            accuracies,
            mean,
            variance,
        }
    }

    pub fn trials(&self) -> usize {
        self.accuracies.len()
    }
}

/// Accuracy over `trials` independent rounding draws. Deterministic mode runs once.
pub fn infer_quantized(
    model: &ModelWeights,
    test: &Dataset,
    k: u32,
    mode: RoundingMode,
    variant: Variant,
    trials: usize,
    seed: u64,
) -> Result<AccuracyStats> {
    if trials == 0 {
        return Err(Error::Contract("trials must be at least 1".into()));
    }
    let trials = if mode == RoundingMode::Deterministic { 1 } else { trials };
    let accs = (0..trials)
        .map(|t| {
            let s = derive(
                seed,
                &[Stream::Inference as u64, k as u64, mode as u64, variant as u64, t as u64],
            );
            Ok(accuracy(&predict_quantized(model, test, k, mode, variant, s)?, test.labels()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyStats::from_accuracies(accs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub k: u32,
    pub mode: String,
    pub variant: String,
    pub trials: usize,
    pub mean_acc: f64,
    pub var_acc: f64,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 7] = ["k", "mode", "variant", "trials", "mean_acc", "var_acc", "seed"];

/// One full-precision row (`k = 0`, mode `full-precision`, variant `none`) followed by
/// one row per `(k, mode, variant)`.
pub fn run_mnist_experiment(
    model: &ModelWeights,
    test: &Dataset,
    k_list: &[u32],
    modes: &[RoundingMode],
    variants: &[Variant],
    trials: usize,
    seed: u64,
) -> Result<Vec<AccuracyRow>> {
    let baseline = accuracy(&predict(model, test)?, test.labels());
    let mut rows = vec![AccuracyRow {
        k: 0,
        mode: "full-precision".into(),
        variant: "none".into(),
        trials: 1,
        mean_acc: baseline,
        var_acc: 0.0,
        seed,
    }];
    for &k in k_list {
        for &mode in modes {
            for &variant in variants {
                let s = infer_quantized(model, test, k, mode, variant, trials, seed)?;
                rows.push(AccuracyRow {
                    k,
                    mode: mode.name().into(),
                    variant: variant.name().into(),
                    trials: s.trials(),
                    mean_acc: s.mean,
                    var_acc: s.variance,
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[AccuracyRow], out: W) -> Result<()> {
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
