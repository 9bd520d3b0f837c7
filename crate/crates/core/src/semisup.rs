//! Teacher/student patch classifier.
//!
//! A [`FeatureExtractor`] embeds each sample into a fixed-length vector; a
//! linear softmax [`ClassifierHead`] sits on top. Training minimizes the
//! confidence-weighted cross-entropy
//!
//! ```text
//! L = Σ_i ω_i · (−log p_i[y_i])
//! ```
//!
//! where ω_i is 1 for labeled samples and the teacher's max softmax
//! probability for pseudo-labeled ones.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::PatchPrediction;
use crate::pyramid::PatchGrid;
use crate::raster::box_resize;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Model input edge length; extracted patches are box-resized to this.
pub const MODEL_INPUT_SIZE: u32 = 224;
/// Class index reported as the tumor probability.
pub const TUMOR_CLASS: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SemisupError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least {needed} classes, have {classes}")]
    TooFewClasses { needed: usize, classes: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("patch at ({x}, {y}) does not fit in the {width}x{height} slide")]
    PatchOutOfBounds { x: u32, y: u32, width: u32, height: u32 },
}

/// Deterministic embedding of one sample into a fixed-length vector.
pub trait FeatureExtractor: Sync {
    type Input: Sync;

    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, input: &Self::Input) -> Vec<f64>;
}

/// Uses pre-computed feature vectors as they are.
#[derive(Debug, Clone, Copy)]
pub struct IdentityFeatures {
    pub dim: usize,
}

impl FeatureExtractor for IdentityFeatures {
    type Input = Vec<f64>;

    fn id(&self) -> &str {
        "identity"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, input: &Vec<f64>) -> Vec<f64> {
        input.clone()
    }
}

/// Per-channel mean, standard deviation and an 8-bin histogram, computed on
/// the patch after box-resizing to the model input size. 30 values in [0, 1].
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorStatsFeatures;

pub const COLOR_STATS_DIM: usize = 30;

impl FeatureExtractor for ColorStatsFeatures {
    type Input = RgbImage;

    fn id(&self) -> &str {
        "color-stats-v1"
    }

    fn dim(&self) -> usize {
        COLOR_STATS_DIM
    }

    fn extract(&self, patch: &RgbImage) -> Vec<f64> {
        let resized;
        let img = if patch.dimensions() == (MODEL_INPUT_SIZE, MODEL_INPUT_SIZE)
            || patch.width() < MODEL_INPUT_SIZE
            || patch.height() < MODEL_INPUT_SIZE
        {
            patch
        } else {
            resized = box_resize(patch, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE);
            &resized
        };
        let n = (img.width() as f64 * img.height() as f64).max(1.0);
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut hist = [[0f64; 8]; 3];
        for p in img.pixels() {
            for c in 0..3 {
                let v = p.0[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
                hist[c][(p.0[c] >> 5) as usize] += 1.0;
            }
        }
        let mut out = Vec::with_capacity(COLOR_STATS_DIM);
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            out.push(mean / 255.0);
            out.push(var.sqrt() / 255.0);
        }
        for h in &hist {
            out.extend(h.iter().map(|v| v / n));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSet<T> {
    pub samples: Vec<(T, usize)>,
    pub class_count: usize,
}

#[derive(Debug, Clone)]
pub struct UnlabeledSet<T> {
    pub samples: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample<T> {
    pub sample: T,
    pub label: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Hyper {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 100,
            batch_size: 32,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SemisupError> {
        if !(self.learning_rate > 0.0) {
            return Err(SemisupError::Hyper("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(SemisupError::Hyper("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear softmax layer: `logits = xᵀ W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub feature_dim: usize,
    pub class_count: usize,
    /// Row-major `feature_dim × class_count`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(feature_dim: usize, class_count: usize) -> Self {
        Self {
            feature_dim,
            class_count,
            weights: vec![0.0; feature_dim * class_count],
            bias: vec![0.0; class_count],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (f, &xf) in x.iter().enumerate() {
            let row = &self.weights[f * self.class_count..(f + 1) * self.class_count];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += xf * w;
            }
        }
        z
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), SemisupError> {
        if x.len() != self.feature_dim {
            return Err(SemisupError::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Pseudo-label and confidence weight from one softmax vector.
pub fn confidence(probs: &[f64]) -> (usize, f64) {
    let label = argmax(probs);
    (label, probs[label])
}

/// Loss value only, from per-sample probability vectors.
pub fn weighted_cross_entropy_loss(probs: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, &y), &w)| if w == 0.0 { 0.0 } else { -w * p[y].max(PROB_FLOOR).ln() })
        .sum()
}

/// Gradient of the weighted loss with respect to the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Loss and analytic gradient over a set of feature vectors.
///
/// `dL/dz_i = ω_i (p_i − e_{y_i})`, back-propagated through the linear layer.
/// Samples are summed in index order.
pub fn weighted_cross_entropy(
    head: &ClassifierHead,
    features: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, HeadGradient), SemisupError> {
    if features.len() != labels.len() || features.len() != weights.len() {
        return Err(SemisupError::LengthMismatch(format!(
            "{} features, {} labels, {} weights",
            features.len(),
            labels.len(),
            weights.len()
        )));
    }
    let c = head.class_count;
    let mut grad = HeadGradient {
        weights: vec![0.0; head.weights.len()],
        bias: vec![0.0; c],
    };
    let mut loss = 0.0;
    for ((x, &y), &w) in features.iter().zip(labels).zip(weights) {
        head.check_dim(x)?;
        if y >= c {
            return Err(SemisupError::LabelOutOfRange { label: y, classes: c });
        }
        if w == 0.0 {
            continue;
        }
        let p = head.predict_proba(x);
        loss += -w * p[y].max(PROB_FLOOR).ln();
        for k in 0..c {
            let dz = w * (p[k] - if k == y { 1.0 } else { 0.0 });
            grad.bias[k] += dz;
            for (f, xf) in x.iter().enumerate() {
                grad.weights[f * c + k] += xf * dz;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean weighted loss per sample for each epoch, evaluated during the pass.
    pub epoch_losses: Vec<f64>,
    /// Set when every labeled sample belongs to one class.
    pub single_class: bool,
}

/// Mini-batch gradient descent from a zero-initialized head.
///
/// Samples with zero weight are dropped before shuffling, so they change
/// neither the loss nor the batch composition.
pub fn fit_head(
    features: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
    class_count: usize,
    hyper: &Hyper,
) -> Result<(ClassifierHead, TrainReport), SemisupError> {
    hyper.validate()?;
    if features.is_empty() {
        return Err(SemisupError::EmptyTrainingSet);
    }
    if class_count == 0 {
        return Err(SemisupError::TooFewClasses { needed: 1, classes: 0 });
    }
    let dim = features[0].len();
    let mut head = ClassifierHead::zeros(dim, class_count);
    for (x, &y) in features.iter().zip(labels) {
        head.check_dim(x)?;
        if y >= class_count {
            return Err(SemisupError::LabelOutOfRange { label: y, classes: class_count });
        }
    }
    let active: Vec<usize> = (0..features.len()).filter(|&i| weights[i] != 0.0).collect();
    let single_class = labels.windows(2).all(|w| w[0] == w[1]);
    if single_class {
        log::warn!("all training labels belong to class {}", labels[0]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order = active.clone();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut xb = Vec::with_capacity(hyper.batch_size);
    let mut yb = Vec::with_capacity(hyper.batch_size);
    let mut wb = Vec::with_capacity(hyper.batch_size);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            xb.clear();
            yb.clear();
            wb.clear();
            for &i in chunk {
                xb.push(features[i].clone());
                yb.push(labels[i]);
                wb.push(weights[i]);
            }
            let (loss, grad) = weighted_cross_entropy(&head, &xb, &yb, &wb)?;
            epoch_loss += loss;
            let step = hyper.learning_rate / chunk.len() as f64;
            for (w, g) in head.weights.iter_mut().zip(&grad.weights) {
                *w -= step * g;
            }
            for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
                *b -= step * g;
            }
        }
        epoch_losses.push(if order.is_empty() { 0.0 } else { epoch_loss / order.len() as f64 });
    }
    Ok((
        head,
        TrainReport {
            epoch_losses,
            single_class,
        },
    ))
}

fn embed_all<F: FeatureExtractor>(f: &F, inputs: &[&F::Input]) -> Result<Vec<Vec<f64>>, SemisupError> {
    let feats: Vec<Vec<f64>> = inputs.par_iter().map(|x| f.extract(x)).collect();
    if let Some(bad) = feats.iter().find(|v| v.len() != f.dim()) {
        return Err(SemisupError::DimensionMismatch {
            expected: f.dim(),
            got: bad.len(),
        });
    }
    Ok(feats)
}

/// Teacher: every labeled sample carries weight 1.
pub fn train_teacher<F: FeatureExtractor>(
    labeled: &LabeledSet<F::Input>,
    f: &F,
    hyper: &Hyper,
) -> Result<(ClassifierHead, TrainReport), SemisupError> {
    if labeled.samples.is_empty() {
        return Err(SemisupError::EmptyTrainingSet);
    }
    let inputs: Vec<&F::Input> = labeled.samples.iter().map(|(x, _)| x).collect();
    let features = embed_all(f, &inputs)?;
    let labels: Vec<usize> = labeled.samples.iter().map(|(_, y)| *y).collect();
    let weights = vec![1.0; labels.len()];
    fit_head(&features, &labels, &weights, labeled.class_count, hyper)
}

/// Argmax label and max-softmax weight for each unlabeled sample.
pub fn pseudo_label<F: FeatureExtractor>(
    teacher: &ClassifierHead,
    f: &F,
    unlabeled: &UnlabeledSet<F::Input>,
) -> Result<Vec<PseudoSample<F::Input>>, SemisupError>
where
    F::Input: Clone,
{
    let inputs: Vec<&F::Input> = unlabeled.samples.iter().collect();
    let features = embed_all(f, &inputs)?;
    features
        .iter()
        .zip(&unlabeled.samples)
        .map(|(x, sample)| {
            teacher.check_dim(x)?;
            let (label, weight) = confidence(&teacher.predict_proba(x));
            Ok(PseudoSample {
                sample: sample.clone(),
                label,
                weight,
            })
        })
        .collect()
}

/// Student: labeled samples (weight 1) followed by pseudo samples (weight ω).
pub fn train_student<F: FeatureExtractor>(
    labeled: &LabeledSet<F::Input>,
    pseudo: &[PseudoSample<F::Input>],
    f: &F,
    hyper: &Hyper,
) -> Result<(ClassifierHead, TrainReport), SemisupError> {
    if labeled.samples.is_empty() {
        return Err(SemisupError::EmptyTrainingSet);
    }
    let inputs: Vec<&F::Input> = labeled
        .samples
        .iter()
        .map(|(x, _)| x)
        .chain(pseudo.iter().map(|p| &p.sample))
        .collect();
    let features = embed_all(f, &inputs)?;
    let labels: Vec<usize> = labeled
        .samples
        .iter()
        .map(|(_, y)| *y)
        .chain(pseudo.iter().map(|p| p.label))
        .collect();
    let weights: Vec<f64> = std::iter::repeat_n(1.0, labeled.samples.len())
        .chain(pseudo.iter().map(|p| p.weight))
        .collect();
    fit_head(&features, &labels, &weights, labeled.class_count, hyper)
}

pub fn accuracy<F: FeatureExtractor>(head: &ClassifierHead, f: &F, set: &LabeledSet<F::Input>) -> f64 {
    if set.samples.is_empty() {
        return 0.0;
    }
    let correct = set
        .samples
        .iter()
        .filter(|(x, y)| head.predict(&f.extract(x)) == *y)
        .count();
    correct as f64 / set.samples.len() as f64
}

/// Tumor-class probability for every kept patch of a slide, in grid order.
pub fn predict_patches<F: FeatureExtractor<Input = RgbImage>>(
    head: &ClassifierHead,
    f: &F,
    grid: &PatchGrid,
    slide: &RgbImage,
    slide_name: &str,
) -> Result<Vec<PatchPrediction>, SemisupError> {
    if head.class_count <= TUMOR_CLASS {
        return Err(SemisupError::TooFewClasses {
            needed: TUMOR_CLASS + 1,
            classes: head.class_count,
        });
    }
    if head.feature_dim != f.dim() {
        return Err(SemisupError::DimensionMismatch {
            expected: head.feature_dim,
            got: f.dim(),
        });
    }
    grid.kept_positions()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(x, y)| {
            if x + grid.patch_size > slide.width() || y + grid.patch_size > slide.height() {
                return Err(SemisupError::PatchOutOfBounds {
                    x,
                    y,
                    width: slide.width(),
                    height: slide.height(),
                });
            }
            let patch = image::imageops::crop_imm(slide, x, y, grid.patch_size, grid.patch_size).to_image();
            let probs = head.predict_proba(&f.extract(&patch));
            Ok(PatchPrediction {
                slide_name: slide_name.to_string(),
                x,
                y,
                prob: probs[TUMOR_CLASS],
            })
        })
        .collect()
}

/// Serialized model: head parameters plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub feature_extractor: String,
    pub feature_dim: usize,
    pub class_count: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub seed: u64,
    pub hyper: Hyper,
}

impl ModelFile {
    pub fn new(head: &ClassifierHead, extractor_id: &str, hyper: &Hyper) -> Self {
        Self {
            feature_extractor: extractor_id.to_string(),
            feature_dim: head.feature_dim,
            class_count: head.class_count,
            weights: head.weights.clone(),
            bias: head.bias.clone(),
            seed: hyper.seed,
            hyper: *hyper,
        }
    }

    pub fn head(&self) -> Result<ClassifierHead, SemisupError> {
        if self.weights.len() != self.feature_dim * self.class_count || self.bias.len() != self.class_count {
            return Err(SemisupError::LengthMismatch(format!(
                "{}x{} head with {} weights and {} biases",
                self.feature_dim,
                self.class_count,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(ClassifierHead {
            feature_dim: self.feature_dim,
            class_count: self.class_count,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
        })
    }
}

/// Two Gaussian clusters in 2-D with unit variance, means at `±separation/2`
/// on both axes. Class 1 is the positive-mean cluster. Balanced, then shuffled.
pub fn two_gaussian_clusters(n: usize, separation: f64, seed: u64) -> Vec<(Vec<f64>, usize)> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let half = separation / 2.0;
    let mut out: Vec<(Vec<f64>, usize)> = (0..n)
        .map(|i| {
            let label = i % 2;
            let center = if label == 1 { half } else { -half };
            (
                vec![center + noise.sample(&mut rng), center + noise.sample(&mut rng)],
                label,
            )
        })
        .collect();
    out.shuffle(&mut rng);
    out
}
