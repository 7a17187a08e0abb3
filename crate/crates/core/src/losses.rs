//! Class-imbalance weights and segmentation losses.

use serde::{Deserialize, Serialize};

use crate::data::class_name;
use crate::error::{Error, Result};
use crate::tensor::{softmax_channels, Scalar, Tensor};

/// Smoothing term of the Dice coefficient.
pub const DICE_EPS: f64 = 1e-7;
/// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// `α_i = median(f) / f_i`.
    #[serde(rename = "median")]
    MedianFrequency,
    /// `α_i = max(M) / M_i`.
    #[serde(rename = "invmax")]
    InverseMax,
    /// All weights 1.
    #[serde(rename = "uniform")]
    Uniform,
}

impl std::str::FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "median" => Ok(Self::MedianFrequency),
            "invmax" => Ok(Self::InverseMax),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown weight scheme `{other}` (median|invmax|uniform)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    pub pixel_counts: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub scheme: WeightScheme,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-class weights from pixel statistics.
///
/// `presence_totals[i]` is the total pixel count of the images that contain
/// class `i`; the class frequency is `pixel_counts[i] / presence_totals[i]`.
/// Callers without per-image data may pass the global pixel total for every
/// class.
pub fn class_weights(
    pixel_counts: &[f64],
    presence_totals: &[f64],
    scheme: WeightScheme,
) -> Result<ClassWeights> {
    if pixel_counts.is_empty() || pixel_counts.len() != presence_totals.len() {
        return Err(Error::Config(format!(
            "{} pixel counts but {} presence totals",
            pixel_counts.len(),
            presence_totals.len()
        )));
    }
    if pixel_counts
        .iter()
        .chain(presence_totals)
        .any(|&v| !v.is_finite() || v < 0.0)
    {
        return Err(Error::Config("pixel counts must be finite and nonnegative".into()));
    }
    let absent: Vec<String> = pixel_counts
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 0.0)
        .map(|(i, _)| class_name(i))
        .collect();
    if !absent.is_empty() {
        return Err(Error::Config(format!(
            "class weights undefined: no pixels of class {}",
            absent.join(", ")
        )));
    }
    if let Some(i) = (0..pixel_counts.len()).find(|&i| presence_totals[i] < pixel_counts[i]) {
        return Err(Error::Config(format!(
            "presence total of class {} is smaller than its pixel count",
            class_name(i)
        )));
    }
    let frequencies: Vec<f64> = pixel_counts
        .iter()
        .zip(presence_totals)
        .map(|(&m, &t)| m / t)
        .collect();
    let alpha = match scheme {
        WeightScheme::MedianFrequency => {
            let med = median(&frequencies);
            frequencies.iter().map(|&f| med / f).collect()
        }
        WeightScheme::InverseMax => {
            let max = pixel_counts.iter().copied().fold(0.0, f64::max);
            pixel_counts.iter().map(|&m| max / m).collect()
        }
        WeightScheme::Uniform => vec![1.0; pixel_counts.len()],
    };
    Ok(ClassWeights {
        alpha,
        pixel_counts: pixel_counts.to_vec(),
        frequencies,
        scheme,
    })
}

impl ClassWeights {
    /// Weights computed directly from already-known class frequencies.
    pub fn from_frequencies(frequencies: &[f64], scheme: WeightScheme) -> Result<Self> {
        class_weights(frequencies, &vec![1.0; frequencies.len()], scheme)
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            alpha: vec![1.0; num_classes],
            pixel_counts: vec![0.0; num_classes],
            frequencies: vec![0.0; num_classes],
            scheme: WeightScheme::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub per_pixel: Option<Vec<f64>>,
}

fn one_hot_class<T: Scalar>(px: &[T]) -> Option<usize> {
    let mut hot = None;
    for (k, &v) in px.iter().enumerate() {
        if v == T::one() {
            if hot.is_some() {
                return None;
            }
            hot = Some(k);
        } else if v != T::zero() {
            return None;
        }
    }
    hot
}

/// Weighted cross-entropy averaged over every pixel (and batch item), with
/// its gradient with respect to the logits.
///
/// Per pixel of class `c`: `loss = −α_c · log softmax(z)_c` and
/// `∂loss/∂z = α_c · (softmax(z) − y)`. With `α_c = 1` the gradient is the
/// familiar `softmax(z) − y`.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    alpha: &[f64],
) -> Result<(LossValue, Tensor<T>)> {
    if logits.shape() != labels.shape() {
        return Err(Error::invalid(format!(
            "logits {:?} and labels {:?} differ in shape",
            logits.shape(),
            labels.shape()
        )));
    }
    let k = logits.channels();
    if alpha.len() != k {
        return Err(Error::invalid(format!("{} weights for {k} classes", alpha.len())));
    }
    logits.ensure_finite("logits")?;
    let npix = logits.len() / k.max(1);
    let scale = 1.0 / npix as f64;
    let mut per_pixel = Vec::with_capacity(npix);
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (z, y)) in logits
        .data()
        .chunks_exact(k)
        .zip(labels.data().chunks_exact(k))
        .enumerate()
    {
        let c = one_hot_class(y)
            .ok_or_else(|| Error::invalid(format!("label at pixel {i} is not one-hot")))?;
        let m = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let log_pc = z[c].as_f64() - m - sum.ln();
        per_pixel.push(-alpha[c] * log_pc);
        let g = &mut grad[i * k..(i + 1) * k];
        for j in 0..k {
            let yj = if j == c { 1.0 } else { 0.0 };
            g[j] = T::of(alpha[c] * (exps[j] / sum - yj) * scale);
        }
    }
    let loss = per_pixel.iter().sum::<f64>() * scale;
    Ok((
        LossValue {
            loss,
            per_pixel: Some(per_pixel),
        },
        Tensor::new(logits.shape(), grad)?,
    ))
}

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "truth has {} values, prediction {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    Ok(())
}

/// Binary cross-entropy `−(1/N) Σ [T log P + (1−T) log(1−P)]`.
pub fn bce_loss(truth: &[f64], pred: &[f64]) -> Result<LossValue> {
    check_pair(truth, pred)?;
    let per: Vec<f64> = truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .collect();
    Ok(LossValue {
        loss: per.iter().sum::<f64>() / per.len() as f64,
        per_pixel: Some(per),
    })
}

/// Smoothed Dice coefficient `(2 Σ T·P + ε)/(Σ T + Σ P + ε)`.
pub fn dice(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let inter: f64 = truth.iter().zip(pred).map(|(t, p)| t * p).sum();
    let total: f64 = truth.iter().sum::<f64>() + pred.iter().sum::<f64>();
    Ok((2.0 * inter + DICE_EPS) / (total + DICE_EPS))
}

pub fn dice_loss(truth: &[f64], pred: &[f64]) -> Result<LossValue> {
    Ok(LossValue {
        loss: 1.0 - dice(truth, pred)?,
        per_pixel: None,
    })
}

fn soft_dice_single<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, scale: f64) -> Result<(f64, Vec<T>)> {
    let k = logits.channels();
    let probs = softmax_channels(logits);
    let p = probs.data();
    let y = labels.data();
    let mut inter = vec![0.0; k];
    let mut total = vec![DICE_EPS; k];
    for (pp, yy) in p.chunks_exact(k).zip(y.chunks_exact(k)) {
        for c in 0..k {
            inter[c] += pp[c].as_f64() * yy[c].as_f64();
            total[c] += pp[c].as_f64() + yy[c].as_f64();
        }
    }
    let dcs: Vec<f64> = (0..k).map(|c| (2.0 * inter[c] + DICE_EPS) / total[c]).collect();
    let loss = 1.0 - dcs.iter().sum::<f64>() / k as f64;
    let mut grad = vec![T::zero(); p.len()];
    for ((pp, yy), g) in p
        .chunks_exact(k)
        .zip(y.chunks_exact(k))
        .zip(grad.chunks_exact_mut(k))
    {
        // ∂loss/∂p_c, then through the softmax Jacobian.
        let gp: Vec<f64> = (0..k)
            .map(|c| {
                let dd = (2.0 * yy[c].as_f64() * total[c] - (2.0 * inter[c] + DICE_EPS)) / (total[c] * total[c]);
                -dd / k as f64
            })
            .collect();
        let dot: f64 = (0..k).map(|c| pp[c].as_f64() * gp[c]).sum();
        for c in 0..k {
            g[c] = T::of(pp[c].as_f64() * (gp[c] - dot) * scale);
        }
    }
    Ok((loss, grad))
}

/// Soft multi-class Dice loss on softmax probabilities,
/// `1 − mean_c DC_c`, computed per image and averaged over a batch.
pub fn multiclass_dice_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(LossValue, Tensor<T>)> {
    if logits.shape() != labels.shape() {
        return Err(Error::invalid(format!(
            "logits {:?} and labels {:?} differ in shape",
            logits.shape(),
            labels.shape()
        )));
    }
    logits.ensure_finite("logits")?;
    let k = logits.channels();
    for (i, y) in labels.data().chunks_exact(k).enumerate() {
        if one_hot_class(y).is_none() {
            return Err(Error::invalid(format!("label at pixel {i} is not one-hot")));
        }
    }
    if logits.rank() == 4 {
        let n = logits.shape()[0];
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(logits.len());
        for i in 0..n {
            let (l, g) = soft_dice_single(&logits.item(i)?, &labels.item(i)?, 1.0 / n as f64)?;
            loss += l / n as f64;
            grad.extend(g);
        }
        Ok((LossValue { loss, per_pixel: None }, Tensor::new(logits.shape(), grad)?))
    } else {
        let (loss, grad) = soft_dice_single(logits, labels, 1.0)?;
        Ok((LossValue { loss, per_pixel: None }, Tensor::new(logits.shape(), grad)?))
    }
}
