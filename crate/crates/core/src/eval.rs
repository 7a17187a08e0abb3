//! Argmax classification, the neighbourhood crack-probability map, ROC/AUC
//! and per-image/corpus evaluation reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{class_name, LabelMask, CRACK};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel argmax over the class axis; ties go to the lowest index.
pub fn classify<T: Scalar>(scores: &Tensor<T>) -> Result<LabelMask> {
    let (h, w, k) = scores.hwc()?;
    if k == 0 || k > u8::MAX as usize + 1 {
        return Err(Error::invalid(format!("cannot classify over {k} classes")));
    }
    let classes = scores
        .data()
        .chunks_exact(k)
        .map(|px| {
            let mut best = 0;
            for (i, v) in px.iter().enumerate().skip(1) {
                if *v > px[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(w, h, classes)
}

/// Binary map for the probability map: crack pixels 0, everything else 1.
pub fn crack_indicator(mask: &LabelMask) -> Vec<u8> {
    mask.classes.iter().map(|&c| u8::from(c != CRACK)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrackProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub radius: usize,
    pub values: Vec<f64>,
    /// Set when every window sum is zero; `values` is then all ones.
    pub degenerate: bool,
}

impl CrackProbabilityMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Window sums `S(i,j)` over the `(2n+1)²` neighbourhood, out-of-frame cells
/// counting as background (1), and `P = 1 − S / max S`.
pub fn crack_probability_map(
    c: &[u8],
    width: usize,
    height: usize,
    n: usize,
) -> Result<CrackProbabilityMap> {
    if n == 0 {
        return Err(Error::invalid("window radius must be at least 1"));
    }
    if c.len() != width * height {
        return Err(Error::invalid(format!(
            "binary map has {} cells, expected {width}×{height}",
            c.len()
        )));
    }
    if let Some(i) = c.iter().position(|&v| v > 1) {
        return Err(Error::invalid(format!("binary map value {} at index {i}", c[i])));
    }
    // integral image of crack cells (C = 0)
    let stride = width + 1;
    let mut integral = vec![0u64; (height + 1) * stride];
    for r in 0..height {
        let mut row = 0u64;
        for q in 0..width {
            row += u64::from(c[r * width + q] == 0);
            integral[(r + 1) * stride + q + 1] = integral[r * stride + q + 1] + row;
        }
    }
    let full = ((2 * n + 1) * (2 * n + 1)) as u64;
    let mut sums = vec![0u64; width * height];
    for r in 0..height {
        let (r0, r1) = (r.saturating_sub(n), (r + n + 1).min(height));
        for q in 0..width {
            let (q0, q1) = (q.saturating_sub(n), (q + n + 1).min(width));
            let cracks = integral[r1 * stride + q1] + integral[r0 * stride + q0]
                - integral[r0 * stride + q1]
                - integral[r1 * stride + q0];
            sums[r * width + q] = full - cracks;
        }
    }
    let max = sums.iter().copied().max().unwrap_or(0);
    let degenerate = max == 0;
    if degenerate {
        log::warn!("crack probability map: every window is fully cracked, P set to 1");
    }
    let values = sums
        .iter()
        .map(|&s| if degenerate { 1.0 } else { 1.0 - s as f64 / max as f64 })
        .collect();
    Ok(CrackProbabilityMap {
        width,
        height,
        radius: n,
        values,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `+∞` first, then each distinct score in descending order.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = || -> std::io::Result<()> {
            writeln!(w, "threshold,fpr,tpr")?;
            for i in 0..self.fpr.len() {
                writeln!(w, "{},{},{}", self.thresholds[i], self.fpr[i], self.tpr[i])?;
            }
            w.flush()
        };
        body().map_err(|e| Error::io(path, e))
    }
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid_area(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[1] + ys[0]) / 2.0)
        .sum()
}

pub fn roc_and_auc(scores: &[f64], truth: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.len() != truth.len() {
        return Err(Error::Evaluation(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite score at index {i}")));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation(
            "AUC undefined: truth contains a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(s);
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
    }
    let auc = trapezoid_area(&curve.fpr, &curve.tpr);
    Ok((curve, auc))
}

/// Binary confusion counts with Crack as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Predicted classes for one image, with an optional per-pixel crack score
/// for ROC (otherwise the crack indicator of `classes` is used).
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    pub classes: LabelMask,
    pub crack_score: Option<Vec<f64>>,
}

impl Prediction {
    pub fn from_classes(id: impl Into<String>, classes: LabelMask) -> Self {
        Self {
            id: id.into(),
            classes,
            crack_score: None,
        }
    }

    fn scores(&self) -> Vec<f64> {
        match &self.crack_score {
            Some(s) => s.clone(),
            None => self
                .classes
                .classes
                .iter()
                .map(|&c| f64::from(u8::from(c == CRACK)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    /// `None` when the truth holds only one of crack / not-crack.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub dice: BTreeMap<String, f64>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    /// AUC over the pooled pixels of every image.
    pub auc: Option<f64>,
    pub mean_auc: Option<f64>,
    pub median_auc: Option<f64>,
    pub accuracy: f64,
    pub dice: BTreeMap<String, f64>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    pub aggregate: Aggregate,
    /// Pooled ROC curve; written separately as CSV.
    #[serde(skip)]
    pub roc: Option<RocCurve>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Dice per class; a class absent from both maps scores 1.
fn dice_per_class(pred: &[u8], truth: &[u8], num_classes: usize) -> BTreeMap<String, f64> {
    let mut inter = vec![0u64; num_classes];
    let mut p = vec![0u64; num_classes];
    let mut t = vec![0u64; num_classes];
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a as usize, b as usize);
        if a < num_classes {
            p[a] += 1;
        }
        if b < num_classes {
            t[b] += 1;
        }
        if a == b && a < num_classes {
            inter[a] += 1;
        }
    }
    (0..num_classes)
        .map(|c| {
            let d = if p[c] + t[c] == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / (p[c] + t[c]) as f64
            };
            (class_name(c), d)
        })
        .collect()
}

fn confusion(pred: &[u8], truth: &[u8]) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == CRACK, t == CRACK) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

fn accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    })
}

fn check_pair(pred: &Prediction, truth: &LabelMask) -> Result<()> {
    if (pred.classes.width, pred.classes.height) != (truth.width, truth.height) {
        return Err(Error::Evaluation(format!(
            "`{}`: prediction is {}×{}, truth is {}×{}",
            pred.id, pred.classes.width, pred.classes.height, truth.width, truth.height
        )));
    }
    if let Some(s) = &pred.crack_score {
        if s.len() != truth.classes.len() {
            return Err(Error::Evaluation(format!(
                "`{}`: crack score has {} pixels, truth has {}",
                pred.id,
                s.len(),
                truth.classes.len()
            )));
        }
    }
    Ok(())
}

pub fn evaluate_image(pred: &Prediction, truth: &LabelMask, num_classes: usize) -> Result<ImageEval> {
    check_pair(pred, truth)?;
    let labels: Vec<bool> = truth.classes.iter().map(|&c| c == CRACK).collect();
    let auc = match roc_and_auc(&pred.scores(), &labels) {
        Ok((_, a)) => Some(a),
        Err(Error::Evaluation(m)) if m.starts_with("AUC undefined") => None,
        Err(e) => return Err(e),
    };
    Ok(ImageEval {
        id: pred.id.clone(),
        auc,
        accuracy: accuracy(&pred.classes.classes, &truth.classes),
        dice: dice_per_class(&pred.classes.classes, &truth.classes, num_classes),
        confusion: confusion(&pred.classes.classes, &truth.classes),
    })
}

/// Evaluate aligned prediction/truth pairs; per-image results keep input
/// order.
pub fn evaluate_corpus(
    predictions: &[Prediction],
    truths: &[LabelMask],
    num_classes: usize,
) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} truth masks",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    let per_image = predictions
        .par_iter()
        .zip(truths.par_iter())
        .map(|(p, t)| evaluate_image(p, t, num_classes))
        .collect::<Result<Vec<_>>>()?;

    let mut all_pred = Vec::new();
    let mut all_truth = Vec::new();
    let mut all_scores = Vec::new();
    for (p, t) in predictions.iter().zip(truths) {
        all_pred.extend_from_slice(&p.classes.classes);
        all_truth.extend_from_slice(&t.classes);
        all_scores.extend(p.scores());
    }
    let labels: Vec<bool> = all_truth.iter().map(|&c| c == CRACK).collect();
    let (roc, auc) = match roc_and_auc(&all_scores, &labels) {
        Ok((r, a)) => (Some(r), Some(a)),
        Err(Error::Evaluation(m)) if m.starts_with("AUC undefined") => (None, None),
        Err(e) => return Err(e),
    };
    let mut aucs: Vec<f64> = per_image.iter().filter_map(|e| e.auc).collect();
    let mean_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    let median_auc = median(&mut aucs);
    let mut pooled = Confusion::default();
    per_image.iter().for_each(|e| pooled.add(&e.confusion));

    Ok(EvalReport {
        aggregate: Aggregate {
            images: per_image.len(),
            auc,
            mean_auc,
            median_auc,
            accuracy: accuracy(&all_pred, &all_truth),
            dice: dice_per_class(&all_pred, &all_truth, num_classes),
            confusion: pooled,
        },
        per_image,
        roc,
    })
}

/// Write a little-endian PFM (`Pf`, single channel, rows bottom to top).
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::invalid("pfm buffer does not match its dimensions"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        write!(w, "Pf\n{width} {height}\n-1.0\n")?;
        for r in (0..height).rev() {
            for v in &values[r * width..(r + 1) * width] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

/// Read a single-channel PFM into top-to-bottom row order.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::Ingestion(format!("{}: {m}", path.display()));
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    while header.len() < 3 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        let t = line.trim();
        if !t.is_empty() {
            header.push(t.to_string());
        }
    }
    if header[0] != "Pf" {
        return Err(bad("not a single-channel PFM"));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("bad dimensions")))
        .collect::<Result<_>>()?;
    let [width, height] = dims[..] else {
        return Err(bad("bad dimensions"));
    };
    let scale: f64 = header[2].parse().map_err(|_| bad("bad scale"))?;
    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
    let rows: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let mut values = Vec::with_capacity(rows.len());
    for row in rows.chunks_exact(width.max(1)).rev() {
        values.extend_from_slice(row);
    }
    Ok((width, height, values))
}
