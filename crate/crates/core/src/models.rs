//! Small differentiable predictors with closed-form gradients.
//!
//! Three families are provided: multinomial/binary logistic regression, a
//! one-hidden-layer tanh network, and `pixel_seg`, a per-cell logistic
//! segmenter that shares four parameters across every cell of a g×g grid:
//! weights on the cell intensity, the 3×3 neighbourhood mean and the
//! intensity relative to the image mean, plus a bias.
//! Classification trains on cross-entropy, segmentation on soft Dice.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metrics::dice_coefficient;

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;
/// Probability threshold used to binarize predictions for evaluation.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Mask(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

const PARAM_MAGIC: &[u8; 4] = b"FCPV";
const PARAM_VERSION: u32 = 1;

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &[f64]) -> Result<()> {
        check_dim(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Checkpoint record: magic `FCPV`, u32 version, u64 dimension, then the
    /// values as little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.0 {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != PARAM_MAGIC {
            return Err(Error::Format("bad parameter-file magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != PARAM_VERSION {
            return Err(Error::Format(format!("unsupported parameter-file version {version}")));
        }
        let d = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut values = Vec::with_capacity(d);
        let mut buf = [0u8; 8];
        for _ in 0..d {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after parameter record".into()));
        }
        Self::new(values)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn default_classes() -> usize {
    2
}

fn default_grid() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Logistic {
        input_dim: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Mlp1 {
        input_dim: usize,
        hidden: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    PixelSeg {
        #[serde(default = "default_grid")]
        grid: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Class probabilities, summing to 1.
    Class(Vec<f64>),
    /// Per-cell foreground probabilities, row-major.
    Mask(Vec<f64>),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Logistic { input_dim, classes } => {
                if input_dim == 0 || classes < 2 {
                    return Err(Error::invalid("logistic needs input_dim >= 1 and classes >= 2"));
                }
            }
            ModelSpec::Mlp1 { input_dim, hidden, classes } => {
                if input_dim == 0 || hidden == 0 || classes < 2 {
                    return Err(Error::invalid("mlp1 needs input_dim >= 1, hidden >= 1 and classes >= 2"));
                }
            }
            ModelSpec::PixelSeg { grid } => {
                if grid == 0 {
                    return Err(Error::invalid("pixel_seg needs grid >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Length of each sample's feature vector.
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::Logistic { input_dim, .. } | ModelSpec::Mlp1 { input_dim, .. } => input_dim,
            ModelSpec::PixelSeg { grid } => grid * grid,
        }
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, ModelSpec::PixelSeg { .. })
    }

    /// Number of output logits: 1 for binary problems (sigmoid), C otherwise.
    fn outputs(classes: usize) -> usize {
        if classes == 2 {
            1
        } else {
            classes
        }
    }

    /// Parameter dimension d.
    pub fn dim(&self) -> usize {
        match *self {
            ModelSpec::Logistic { input_dim, classes } => (input_dim + 1) * Self::outputs(classes),
            ModelSpec::Mlp1 { input_dim, hidden, classes } => {
                let o = Self::outputs(classes);
                input_dim * hidden + hidden + hidden * o + o
            }
            ModelSpec::PixelSeg { .. } => 4,
        }
    }

    /// Deterministic initialization, entries uniform in ±1/√fan_in (at most 1).
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |fan_in: usize, n: usize, out: &mut Vec<f64>| {
            let bound = (1.0 / (fan_in as f64).sqrt()).min(1.0);
            out.extend((0..n).map(|_| rng.gen_range(-bound..=bound)));
        };
        let mut w = Vec::with_capacity(self.dim());
        match *self {
            ModelSpec::Logistic { input_dim, classes } => {
                let o = Self::outputs(classes);
                draw(input_dim, input_dim * o, &mut w);
                w.extend(std::iter::repeat_n(0.0, o));
            }
            ModelSpec::Mlp1 { input_dim, hidden, classes } => {
                let o = Self::outputs(classes);
                draw(input_dim, input_dim * hidden, &mut w);
                w.extend(std::iter::repeat_n(0.0, hidden));
                draw(hidden, hidden * o, &mut w);
                w.extend(std::iter::repeat_n(0.0, o));
            }
            ModelSpec::PixelSeg { .. } => {
                draw(3, 3, &mut w);
                w.push(0.0);
            }
        }
        ParamVector(w)
    }

    fn check_inputs(&self, w: &ParamVector, x: &[f64]) -> Result<()> {
        check_dim(self.dim(), w.len())?;
        check_dim(self.input_dim(), x.len())
    }

    pub fn predict(&self, w: &ParamVector, x: &[f64]) -> Result<Prediction> {
        self.check_inputs(w, x)?;
        let w = w.as_slice();
        Ok(match *self {
            ModelSpec::Logistic { input_dim, classes } => {
                Prediction::Class(probs_from_logits(&linear(w, x, input_dim, Self::outputs(classes))))
            }
            ModelSpec::Mlp1 { input_dim, hidden, classes } => {
                let (_, logits) = mlp_forward(w, x, input_dim, hidden, Self::outputs(classes));
                Prediction::Class(probs_from_logits(&logits))
            }
            ModelSpec::PixelSeg { grid } => Prediction::Mask(cell_features(x, grid).iter().map(|f| sigmoid(cell_logit(w, f))).collect()),
        })
    }

    fn check_label(&self, s: &Sample) -> Result<()> {
        match (&s.label, self) {
            (Label::Mask(m), ModelSpec::PixelSeg { grid }) => check_dim(grid * grid, m.len()),
            (Label::Class(c), ModelSpec::Logistic { classes, .. } | ModelSpec::Mlp1 { classes, .. }) => {
                if c >= classes {
                    Err(Error::invalid(format!("class label {c} out of range")))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::invalid("label kind does not match the model task")),
        }
    }

    /// Per-sample loss and its gradient; the gradient is accumulated into `grad`.
    fn sample_loss_grad(&self, w: &[f64], s: &Sample, grad: Option<&mut [f64]>) -> f64 {
        match (*self, &s.label) {
            (ModelSpec::Logistic { input_dim, classes }, Label::Class(y)) => {
                let o = Self::outputs(classes);
                let logits = linear(w, &s.features, input_dim, o);
                let (loss, dz) = cross_entropy(&logits, *y);
                if let Some(g) = grad {
                    for (k, dzk) in dz.iter().enumerate() {
                        let row = &mut g[k * input_dim..(k + 1) * input_dim];
                        for (gj, xj) in row.iter_mut().zip(&s.features) {
                            *gj += dzk * xj;
                        }
                        g[o * input_dim + k] += dzk;
                    }
                }
                loss
            }
            (ModelSpec::Mlp1 { input_dim, hidden, classes }, Label::Class(y)) => {
                let o = Self::outputs(classes);
                let (act, logits) = mlp_forward(w, &s.features, input_dim, hidden, o);
                let (loss, dz) = cross_entropy(&logits, *y);
                if let Some(g) = grad {
                    let w2_off = input_dim * hidden + hidden;
                    let b2_off = w2_off + hidden * o;
                    let mut d_act = vec![0.0; hidden];
                    for (k, dzk) in dz.iter().enumerate() {
                        for j in 0..hidden {
                            g[w2_off + k * hidden + j] += dzk * act[j];
                            d_act[j] += dzk * w[w2_off + k * hidden + j];
                        }
                        g[b2_off + k] += dzk;
                    }
                    for j in 0..hidden {
                        let dh = d_act[j] * (1.0 - act[j] * act[j]);
                        for (gi, xi) in g[j * input_dim..(j + 1) * input_dim].iter_mut().zip(&s.features) {
                            *gi += dh * xi;
                        }
                        g[input_dim * hidden + j] += dh;
                    }
                }
                loss
            }
            (ModelSpec::PixelSeg { grid }, Label::Mask(mask)) => {
                let feats = cell_features(&s.features, grid);
                let probs: Vec<f64> = feats.iter().map(|f| sigmoid(cell_logit(w, f))).collect();
                let mut inter = 0.0;
                let mut total = 0.0;
                for (p, &m) in probs.iter().zip(mask) {
                    let gt = m as u8 as f64;
                    inter += p * gt;
                    total += p + gt;
                }
                let num = 2.0 * inter + DICE_EPS;
                let den = total + DICE_EPS;
                if let Some(g) = grad {
                    for ((p, &m), f) in probs.iter().zip(mask).zip(&feats) {
                        let gt = m as u8 as f64;
                        // d/dp of 1 - num/den
                        let dl_dp = -(2.0 * gt * den - num) / (den * den);
                        let dz = dl_dp * p * (1.0 - p);
                        for (gj, fj) in g.iter_mut().zip(f) {
                            *gj += dz * fj;
                        }
                        g[3] += dz;
                    }
                }
                1.0 - num / den
            }
            _ => unreachable!("labels are checked before evaluation"),
        }
    }

    /// Mean training loss over a batch: soft Dice for segmentation,
    /// cross-entropy for classification.
    pub fn loss(&self, w: &ParamVector, batch: &[Sample]) -> Result<f64> {
        self.check_batch(w, batch)?;
        let total: f64 = batch.iter().map(|s| self.sample_loss_grad(w.as_slice(), s, None)).sum();
        Ok(total / batch.len() as f64)
    }

    /// Analytic gradient of [`ModelSpec::loss`].
    pub fn gradient(&self, w: &ParamVector, batch: &[Sample]) -> Result<ParamVector> {
        self.check_batch(w, batch)?;
        let mut g = vec![0.0; w.len()];
        for s in batch {
            self.sample_loss_grad(w.as_slice(), s, Some(&mut g));
        }
        let n = batch.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        ParamVector::new(g)
    }

    fn check_batch(&self, w: &ParamVector, batch: &[Sample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        check_dim(self.dim(), w.len())?;
        for s in batch {
            check_dim(self.input_dim(), s.features.len())?;
            self.check_label(s)?;
        }
        Ok(())
    }

    /// Per-sample error in [0, 1]: 1 - Dice at threshold 0.5 for masks,
    /// 0/1 misclassification otherwise.
    pub fn sample_error(&self, w: &ParamVector, s: &Sample) -> Result<f64> {
        self.check_label(s)?;
        match (self.predict(w, &s.features)?, &s.label) {
            (Prediction::Mask(p), Label::Mask(m)) => {
                let hard: Vec<bool> = p.iter().map(|&v| v >= THRESHOLD).collect();
                Ok(1.0 - dice_coefficient(&hard, m)?)
            }
            (Prediction::Class(p), Label::Class(y)) => Ok((argmax(&p) != *y) as u8 as f64),
            _ => unreachable!("labels are checked before evaluation"),
        }
    }

    /// 1 - mean Dice (segmentation) or 1 - accuracy (classification).
    pub fn evaluate_error(&self, w: &ParamVector, dataset: &[Sample]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Empty("evaluation dataset"));
        }
        let mut total = 0.0;
        for s in dataset {
            total += self.sample_error(w, s)?;
        }
        Ok(total / dataset.len() as f64)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn argmax(p: &[f64]) -> usize {
    if p.len() == 2 {
        return (p[1] >= THRESHOLD) as usize;
    }
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Row-major `W x + b` with W of shape (outputs × input_dim), b appended after W.
fn linear(w: &[f64], x: &[f64], input_dim: usize, outputs: usize) -> Vec<f64> {
    (0..outputs)
        .map(|k| {
            let row = &w[k * input_dim..(k + 1) * input_dim];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[outputs * input_dim + k]
        })
        .collect()
}

fn mlp_forward(w: &[f64], x: &[f64], input_dim: usize, hidden: usize, outputs: usize) -> (Vec<f64>, Vec<f64>) {
    let act: Vec<f64> = linear(&w[..input_dim * hidden + hidden], x, input_dim, hidden).into_iter().map(f64::tanh).collect();
    let logits = linear(&w[input_dim * hidden + hidden..], &act, hidden, outputs);
    (act, logits)
}

fn probs_from_logits(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        let p = sigmoid(logits[0]);
        return vec![1.0 - p, p];
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy and its derivative w.r.t. the logits.
fn cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    if logits.len() == 1 {
        let z = logits[0];
        let t = y as f64;
        // -[t ln σ(z) + (1-t) ln(1-σ(z))]
        let loss = softplus(z) - t * z;
        return (loss, vec![sigmoid(z) - t]);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let dz = logits.iter().enumerate().map(|(k, z)| (z - lse).exp() - (k == y) as u8 as f64).collect();
    (lse - logits[y], dz)
}

fn cell_logit(w: &[f64], f: &[f64; 3]) -> f64 {
    w[0] * f[0] + w[1] * f[1] + w[2] * f[2] + w[3]
}

/// (intensity, 3×3 neighbourhood mean, intensity minus image mean) for every
/// cell of a g×g image.
pub(crate) fn cell_features(x: &[f64], grid: usize) -> Vec<[f64; 3]> {
    let image_mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for rr in r.saturating_sub(1)..=(r + 1).min(grid - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(grid - 1) {
                    sum += x[rr * grid + cc];
                    cnt += 1.0;
                }
            }
            out.push([x[r * grid + c], sum / cnt, x[r * grid + c] - image_mean]);
        }
    }
    out
}
