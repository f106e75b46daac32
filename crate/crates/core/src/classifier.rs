//! Base classifiers: the trait consumed by smoothing, a built-in pooled linear
//! softmax model, and an adapter for external scoring programs.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PwsError, Result};
use crate::formats::encode_image;
use crate::rasterizer::Image;
use crate::smoothing::NoiseStreams;

pub const DEFAULT_DOWNSAMPLE: usize = 4;
const MODEL_FORMAT: &str = "pws-linear-softmax";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    scores: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(PwsError::InvalidInput("label scores must be finite and non-negative".into()));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PwsError::InvalidInput(format!("label scores sum to {sum}, not 1")));
        }
        Ok(LabelDistribution { scores })
    }

    /// Normalizes non-negative scores.
    pub fn from_unnormalized(mut scores: Vec<f64>) -> Result<Self> {
        let sum: f64 = scores.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || scores.iter().any(|s| !(*s >= 0.0)) {
            return Err(PwsError::InvalidInput("label scores must be non-negative with a positive sum".into()));
        }
        scores.iter_mut().for_each(|s| *s /= sum);
        Ok(LabelDistribution { scores })
    }

    pub fn one_hot(labels: usize, label: usize) -> Self {
        let mut scores = vec![0.0; labels];
        scores[label] = 1.0;
        LabelDistribution { scores }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Index of the largest score; the smallest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax_f64(&self.scores)
    }
}

fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub trait BaseClassifier: Send + Sync {
    fn label_count(&self) -> usize;

    /// `(channels, height, width)` accepted by [`BaseClassifier::predict`].
    fn input_shape(&self) -> (usize, usize, usize);

    fn predict(&self, x: &Image) -> Result<LabelDistribution>;

    /// JSON description recorded in certification reports.
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "custom", "labels": self.label_count() })
    }

    /// Tally of `argmax predict(x + ε)` over `n` draws of `ε ~ N(0, σ²I)`.
    /// Noised images are not clamped.
    fn noisy_label_counts(&self, x: &Image, sigma: f64, n: u64, seed: u64) -> Result<Vec<u64>> {
        check_shape(self.input_shape(), x)?;
        let labels = self.label_count();
        let streams = NoiseStreams::new(seed);
        let blocks: Vec<_> = NoiseStreams::blocks(n).collect();
        let partial: Vec<Vec<u64>> = blocks
            .par_iter()
            .map(|&(stream, _, count)| {
                let mut rng = streams.stream(stream);
                let mut counts = vec![0u64; labels];
                let mut noisy = x.clone();
                for _ in 0..count {
                    for (dst, &src) in noisy.data_mut().iter_mut().zip(x.data()) {
                        let e: f64 = rng.sample(StandardNormal);
                        *dst = (src as f64 + sigma * e) as f32;
                    }
                    counts[self.predict(&noisy)?.argmax()] += 1;
                }
                Ok(counts)
            })
            .collect::<Result<_>>()?;
        Ok(sum_counts(partial, labels))
    }
}

fn sum_counts(partial: Vec<Vec<u64>>, labels: usize) -> Vec<u64> {
    let mut total = vec![0u64; labels];
    for p in partial {
        for (t, c) in total.iter_mut().zip(p) {
            *t += c;
        }
    }
    total
}

fn check_shape(expected: (usize, usize, usize), x: &Image) -> Result<()> {
    if x.shape() != expected {
        return Err(PwsError::shape(format!("{expected:?}"), format!("{:?}", x.shape())));
    }
    Ok(())
}

pub fn predict(c: &dyn BaseClassifier, x: &Image) -> Result<LabelDistribution> {
    c.predict(x)
}

/// Multinomial logistic regression on average-pooled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    channels: usize,
    height: usize,
    width: usize,
    downsample: usize,
    labels: usize,
    /// `labels × features`, row-major.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    channels: usize,
    height: usize,
    width: usize,
    downsample: usize,
    labels: usize,
    features: usize,
}

impl LinearSoftmax {
    pub fn new(
        shape: (usize, usize, usize),
        downsample: usize,
        labels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let (channels, height, width) = shape;
        if downsample == 0 || channels == 0 || height == 0 || width == 0 || labels < 2 {
            return Err(PwsError::InvalidInput("model needs a positive shape, downsample and at least 2 labels".into()));
        }
        let model = LinearSoftmax { channels, height, width, downsample, labels, weights: Vec::new(), bias: Vec::new() };
        let features = model.feature_count();
        if weights.len() != labels * features || bias.len() != labels {
            return Err(PwsError::shape(
                format!("{} weights and {labels} biases", labels * features),
                format!("{} weights and {} biases", weights.len(), bias.len()),
            ));
        }
        Ok(LinearSoftmax { weights, bias, ..model })
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    fn pooled_dims(&self) -> (usize, usize) {
        (self.height.div_ceil(self.downsample), self.width.div_ceil(self.downsample))
    }

    pub fn feature_count(&self) -> usize {
        let (ph, pw) = self.pooled_dims();
        self.channels * ph * pw
    }

    /// Number of pixels averaged into each feature.
    fn window_sizes(&self) -> Vec<usize> {
        let (ph, pw) = self.pooled_dims();
        let f = self.downsample;
        let mut out = Vec::with_capacity(self.feature_count());
        for _ in 0..self.channels {
            for pr in 0..ph {
                for pc in 0..pw {
                    let rows = (self.height - pr * f).min(f);
                    let cols = (self.width - pc * f).min(f);
                    out.push(rows * cols);
                }
            }
        }
        out
    }

    pub fn features(&self, x: &Image) -> Result<Vec<f64>> {
        check_shape(self.input_shape(), x)?;
        Ok(pool(x, self.downsample))
    }

    fn logits(&self, features: &[f64]) -> Vec<f64> {
        let nf = features.len();
        (0..self.labels)
            .map(|l| {
                let row = &self.weights[l * nf..(l + 1) * nf];
                self.bias[l] as f64 + row.iter().zip(features).map(|(&w, &x)| w as f64 * x).sum::<f64>()
            })
            .collect()
    }

    /// Lower-triangular `C` with `C·Cᵀ = σ²·W·diag(1/window)·Wᵀ`, the covariance
    /// of the logits when pixel noise is pooled and passed through the weights.
    fn logit_noise_factor(&self, sigma: f64) -> Vec<f64> {
        let nf = self.feature_count();
        let inv: Vec<f64> = self.window_sizes().iter().map(|&n| 1.0 / n as f64).collect();
        let l = self.labels;
        let mut cov = vec![0.0; l * l];
        for a in 0..l {
            for b in 0..=a {
                let wa = &self.weights[a * nf..(a + 1) * nf];
                let wb = &self.weights[b * nf..(b + 1) * nf];
                let s: f64 = (0..nf).map(|j| wa[j] as f64 * wb[j] as f64 * inv[j]).sum();
                cov[a * l + b] = sigma * sigma * s;
                cov[b * l + a] = sigma * sigma * s;
            }
        }
        semidefinite_cholesky(&cov, l)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: 1,
            channels: self.channels,
            height: self.height,
            width: self.width,
            downsample: self.downsample,
            labels: self.labels,
            features: self.feature_count(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: ModelHeader = serde_json::from_str(line.trim_end())?;
        if header.format != MODEL_FORMAT || header.version != 1 {
            return Err(PwsError::Format { format: "model", message: format!("unsupported model '{}' v{}", header.format, header.version) });
        }
        let mut body = Vec::new();
        reader.read_to_end(&mut body)?;
        let expected = 4 * header.labels * (header.features + 1);
        if body.len() != expected {
            return Err(PwsError::Format { format: "model", message: format!("expected {expected} weight bytes, found {}", body.len()) });
        }
        let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let split = header.labels * header.features;
        LinearSoftmax::new(
            (header.channels, header.height, header.width),
            header.downsample,
            header.labels,
            values[..split].to_vec(),
            values[split..].to_vec(),
        )
    }
}

/// Average pooling over `factor × factor` windows (partial windows at the edges).
fn pool(x: &Image, factor: usize) -> Vec<f64> {
    let (k, h, w) = x.shape();
    let (ph, pw) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut sums = vec![0.0f64; k * ph * pw];
    let mut counts = vec![0usize; k * ph * pw];
    let data = x.data();
    for c in 0..k {
        for r in 0..h {
            for col in 0..w {
                let j = (c * ph + r / factor) * pw + col / factor;
                sums[j] += data[(c * h + r) * w + col] as f64;
                counts[j] += 1;
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cholesky factor of a symmetric positive semidefinite matrix; directions with
/// no variance get a zero column instead of failing.
fn semidefinite_cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let d = a[j * n + j] - (0..j).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
        if d <= tol {
            continue;
        }
        let root = d.sqrt();
        l[j * n + j] = root;
        for i in j + 1..n {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = s / root;
        }
    }
    l
}

impl BaseClassifier for LinearSoftmax {
    fn label_count(&self) -> usize {
        self.labels
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn predict(&self, x: &Image) -> Result<LabelDistribution> {
        let f = self.features(x)?;
        LabelDistribution::from_unnormalized(softmax(&self.logits(&f)))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": MODEL_FORMAT,
            "labels": self.labels,
            "downsample": self.downsample,
            "input_shape": [self.channels, self.height, self.width],
        })
    }

    /// Pooling and the linear layer map pixel noise to Gaussian logit noise with
    /// covariance `σ²·W·diag(1/window)·Wᵀ`, so draws are made in logit space.
    fn noisy_label_counts(&self, x: &Image, sigma: f64, n: u64, seed: u64) -> Result<Vec<u64>> {
        let mean = self.logits(&self.features(x)?);
        let factor = self.logit_noise_factor(sigma);
        let l = self.labels;
        let streams = NoiseStreams::new(seed);
        let blocks: Vec<_> = NoiseStreams::blocks(n).collect();
        let partial: Vec<Vec<u64>> = blocks
            .par_iter()
            .map(|&(stream, _, count)| {
                let mut rng = streams.stream(stream);
                let mut counts = vec![0u64; l];
                let mut z = vec![0.0f64; l];
                let mut logits = vec![0.0f64; l];
                for _ in 0..count {
                    z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                    for i in 0..l {
                        let row = &factor[i * l..i * l + i + 1];
                        logits[i] = mean[i] + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                    }
                    counts[argmax_f64(&logits)] += 1;
                }
                counts
            })
            .collect();
        Ok(sum_counts(partial, l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub noise_sigma: f64,
    pub augment_count: usize,
    pub seed: u64,
    pub downsample: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            noise_sigma: 0.5,
            augment_count: 8,
            seed: 0,
            downsample: DEFAULT_DOWNSAMPLE,
            epochs: 400,
            learning_rate: 2.0,
            l2: 1e-4,
        }
    }
}

fn image_digest(x: &Image) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in x.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Starting point for the descent in standardized coordinates: the posterior of
/// Gaussian classes centred on the clean class means, sharing the isotropic pixel
/// noise the smoothing adds. `xs` are already standardized; only the clean
/// examples enter the class means.
fn class_mean_start(
    xs: &[Vec<f64>],
    ys: &[usize],
    is_clean: &[bool],
    labels: usize,
    windows: &[usize],
    sigma: f64,
    mean: &[f64],
    scale: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let nf = windows.len();
    let mut centres = vec![0.0f64; labels * nf];
    let mut counts = vec![0usize; labels];
    for ((x, &y), _) in xs.iter().zip(ys).zip(is_clean).filter(|(_, &c)| c) {
        counts[y] += 1;
        for ((c, v), (mu, s)) in centres[y * nf..(y + 1) * nf].iter_mut().zip(x).zip(mean.iter().zip(scale)) {
            *c += v * s + mu;
        }
    }
    // Without noise the temperature only sets the starting slope.
    let var = if sigma > 0.0 { sigma * sigma } else { 1.0 };
    let mut w = vec![0.0f64; labels * nf];
    let mut b = vec![0.0f64; labels];
    for l in 0..labels {
        let centre = &mut centres[l * nf..(l + 1) * nf];
        centre.iter_mut().for_each(|c| *c /= counts[l] as f64);
        for f in 0..nf {
            let raw = centre[f] * windows[f] as f64 / var;
            b[l] += raw * (mean[f] - 0.5 * centre[f]);
            w[l * nf + f] = raw * scale[f];
        }
    }
    (w, b)
}

/// Full-batch gradient descent on the cross-entropy with L2 weight decay.
/// Examples are put in a canonical order first, so the model depends on the
/// dataset contents and the seed but not on the input order.
pub fn builtin_train(dataset: &[(Image, usize)], cfg: &TrainConfig) -> Result<LinearSoftmax> {
    let Some((first, _)) = dataset.first() else {
        return Err(PwsError::DegenerateDataset("empty dataset".into()));
    };
    let shape = first.shape();
    if let Some((x, _)) = dataset.iter().find(|(x, _)| x.shape() != shape) {
        return Err(PwsError::shape(format!("{shape:?}"), format!("{:?}", x.shape())));
    }
    if cfg.downsample == 0 || !(cfg.noise_sigma >= 0.0) {
        return Err(PwsError::InvalidInput("downsample must be positive and noise sigma non-negative".into()));
    }
    let labels = dataset.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
    if labels < 2 {
        return Err(PwsError::DegenerateDataset("need at least two labels".into()));
    }
    if let Some(missing) = (0..labels).find(|l| !dataset.iter().any(|(_, y)| y == l)) {
        return Err(PwsError::DegenerateDataset(format!("label {missing} has no examples")));
    }

    let mut order: Vec<(usize, [u8; 32], usize)> =
        dataset.iter().enumerate().map(|(i, (x, y))| (*y, image_digest(x), i)).collect();
    order.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let probe = LinearSoftmax {
        channels: shape.0,
        height: shape.1,
        width: shape.2,
        downsample: cfg.downsample,
        labels,
        weights: Vec::new(),
        bias: Vec::new(),
    };
    let windows = probe.window_sizes();
    let nf = windows.len();

    // Augmented copies: pooled pixel noise is Gaussian with variance σ²/window.
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<usize> = Vec::new();
    let mut is_clean: Vec<bool> = Vec::new();
    let streams = NoiseStreams::new(cfg.seed);
    for (pos, &(y, _, i)) in order.iter().enumerate() {
        let clean = pool(&dataset[i].0, cfg.downsample);
        let mut rng = streams.stream(pos as u64);
        is_clean.push(true);
        is_clean.extend(std::iter::repeat_n(false, cfg.augment_count));
        xs.push(clean.clone());
        ys.push(y);
        for _ in 0..cfg.augment_count {
            let noisy = clean
                .iter()
                .zip(&windows)
                .map(|(&v, &n)| v + cfg.noise_sigma / (n as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            xs.push(noisy);
            ys.push(y);
        }
    }

    // Features are standardized for the descent and the scaling folded back into
    // the weights afterwards; the step is normalized by the mean squared feature norm.
    let m = xs.len() as f64;
    let mut mean = vec![0.0f64; nf];
    for x in &xs {
        for (a, v) in mean.iter_mut().zip(x) {
            *a += v / m;
        }
    }
    let mut scale = vec![0.0f64; nf];
    for x in &xs {
        for ((s, v), mu) in scale.iter_mut().zip(x).zip(&mean) {
            *s += (v - mu) * (v - mu) / m;
        }
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    for x in xs.iter_mut() {
        for ((v, mu), s) in x.iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - mu) / s;
        }
    }
    let norm2 = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / m;
    let step = cfg.learning_rate / norm2.max(1.0);

    let (mut w, mut b) = class_mean_start(&xs, &ys, &is_clean, labels, &windows, cfg.noise_sigma, &mean, &scale);
    let mut gw = vec![0.0f64; labels * nf];
    let mut gb = vec![0.0f64; labels];
    for _ in 0..cfg.epochs {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        for (x, &y) in xs.iter().zip(&ys) {
            let logits: Vec<f64> = (0..labels)
                .map(|l| b[l] + w[l * nf..(l + 1) * nf].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            let p = softmax(&logits);
            for l in 0..labels {
                let err = p[l] - if l == y { 1.0 } else { 0.0 };
                gb[l] += err;
                for (g, &xv) in gw[l * nf..(l + 1) * nf].iter_mut().zip(x) {
                    *g += err * xv;
                }
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * (g / m + cfg.l2 * *wv);
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= step * g / m;
        }
    }
    for l in 0..labels {
        let row = &mut w[l * nf..(l + 1) * nf];
        for ((wv, mu), s) in row.iter_mut().zip(&mean).zip(&scale) {
            *wv /= s;
            b[l] -= *wv * mu;
        }
    }
    LinearSoftmax::new(
        shape,
        cfg.downsample,
        labels,
        w.into_iter().map(|v| v as f32).collect(),
        b.into_iter().map(|v| v as f32).collect(),
    )
}

/// Classifier backed by an external program. Each prediction writes the image as
/// a `PWSI1` file, runs the program with the file path appended to its
/// arguments, and reads one non-negative score per label from its stdout.
#[derive(Debug, Clone)]
pub struct SubprocessClassifier {
    program: PathBuf,
    args: Vec<String>,
    labels: usize,
    shape: (usize, usize, usize),
}

impl SubprocessClassifier {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, labels: usize, shape: (usize, usize, usize)) -> Result<Self> {
        if labels < 2 {
            return Err(PwsError::InvalidInput("external classifier needs at least 2 labels".into()));
        }
        Ok(SubprocessClassifier { program: program.into(), args, labels, shape })
    }
}

impl BaseClassifier for SubprocessClassifier {
    fn label_count(&self) -> usize {
        self.labels
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn predict(&self, x: &Image) -> Result<LabelDistribution> {
        check_shape(self.shape, x)?;
        let mut file = tempfile::Builder::new().prefix("pws-").suffix(".pwsi").tempfile()?;
        file.write_all(&encode_image(x))?;
        file.flush()?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .output()
            .map_err(|e| PwsError::Subprocess(format!("{}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(PwsError::Subprocess(format!("{} exited with {}", self.program.display(), output.status)));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let scores = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().map_err(|_| PwsError::Subprocess(format!("unparsable score '{l}'"))))
            .collect::<Result<Vec<_>>>()?;
        if scores.len() != self.labels {
            return Err(PwsError::Subprocess(format!("expected {} scores, got {}", self.labels, scores.len())));
        }
        LabelDistribution::from_unnormalized(scores).map_err(|e| PwsError::Subprocess(e.to_string()))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "subprocess",
            "program": self.program.display().to_string(),
            "labels": self.labels,
        })
    }
}
