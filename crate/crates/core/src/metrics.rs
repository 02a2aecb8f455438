//! Slice classification from label maps, segmentation metrics, confusion
//! matrices, histograms and the confidence-threshold sweep.
//!
//! A slice is classified by the share of predicted tumor pixels carrying each
//! tumor label: the largest share wins provided it exceeds the confidence
//! threshold τ, otherwise the slice is nonclassified.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Raster, SliceRecord};
use crate::error::{io_err, Error, Result};
use crate::net::Network;
use crate::segment::{segment_slice, LabelMap, SegmentOptions};

pub const DEFAULT_TAU: f64 = 0.75;
pub const TUMOR_CLASSES: usize = 3;

/// Predicted-pixel counts per tumor label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    /// Pixels predicted as label 1, 2, 3.
    pub counts: [usize; TUMOR_CLASSES],
}

impl ClassScores {
    pub fn tumor_pixels(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `r_l = |{P = l}| / |{P > 0}|`, all zero when nothing is predicted.
    pub fn ratios(&self) -> [f64; TUMOR_CLASSES] {
        let total = self.tumor_pixels();
        if total == 0 {
            return [0.0; TUMOR_CLASSES];
        }
        self.counts.map(|c| c as f64 / total as f64)
    }
}

pub fn class_scores(labels: &[u8]) -> ClassScores {
    let mut counts = [0; TUMOR_CLASSES];
    for &l in labels {
        if (1..=3).contains(&l) {
            counts[usize::from(l - 1)] += 1;
        }
    }
    ClassScores { counts }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("threshold {tau} outside [0, 1]")))
    }
}

/// The label with the largest ratio among those strictly above `tau`
/// (ties to the lowest label), or `None` when no ratio survives.
pub fn predict_label(scores: &ClassScores, tau: f64) -> Result<Option<u8>> {
    check_tau(tau)?;
    let ratios = scores.ratios();
    let mut best: Option<usize> = None;
    for l in 0..TUMOR_CLASSES {
        if ratios[l] > tau && best.map_or(true, |b| scores.counts[l] > scores.counts[b]) {
            best = Some(l);
        }
    }
    Ok(best.map(|l| l as u8 + 1))
}

/// Which predicted pixels count as positives for Dice and sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveSet {
    /// Pixels predicted as the slice's true tumor label.
    #[default]
    LabelMatched,
    /// Pixels predicted as any tumor label.
    AnyTumor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Overlap {
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        let truth = self.tp + self.fn_;
        if truth == 0 {
            0.0
        } else {
            self.tp as f64 / truth as f64
        }
    }
}

pub fn overlap(labels: &[u8], mask: &[u8], label: u8, set: PositiveSet) -> Result<Overlap> {
    if labels.len() != mask.len() {
        return Err(Error::Shape(format!(
            "label map has {} pixels, mask {}",
            labels.len(),
            mask.len()
        )));
    }
    let positive = |p: u8| match set {
        PositiveSet::LabelMatched => p == label,
        PositiveSet::AnyTumor => p > 0,
    };
    let (mut tp, mut predicted, mut truth) = (0, 0, 0);
    for (&p, &t) in labels.iter().zip(mask) {
        let (p, t) = (positive(p), t == 1);
        tp += usize::from(p && t);
        predicted += usize::from(p);
        truth += usize::from(t);
    }
    Ok(Overlap {
        tp,
        fp: predicted - tp,
        fn_: truth - tp,
    })
}

pub fn dice(labels: &[u8], mask: &[u8], label: u8) -> Result<f64> {
    Ok(overlap(labels, mask, label, PositiveSet::LabelMatched)?.dice())
}

pub fn sensitivity(labels: &[u8], mask: &[u8], label: u8) -> Result<f64> {
    Ok(overlap(labels, mask, label, PositiveSet::LabelMatched)?.sensitivity())
}

/// Share of predicted tumor pixels carrying the true label; 0 when no tumor
/// pixel is predicted.
pub fn pttas(labels: &[u8], label: u8) -> f64 {
    let scores = class_scores(labels);
    if scores.tumor_pixels() == 0 || !(1..=3).contains(&label) {
        return 0.0;
    }
    scores.counts[usize::from(label - 1)] as f64 / scores.tumor_pixels() as f64
}

mod nonclassified {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u8>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(v.map_or(-1, |l| l as i8))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u8>, D::Error> {
        let v = i8::deserialize(d)?;
        match v {
            -1 => Ok(None),
            1..=3 => Ok(Some(v as u8)),
            _ => Err(serde::de::Error::custom(format!("predicted label {v} not in {{-1, 1, 2, 3}}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEval {
    pub slice_id: String,
    /// Ground-truth tumor label.
    pub label: u8,
    /// Predicted label, −1 in JSON when nonclassified.
    #[serde(with = "nonclassified")]
    pub predicted: Option<u8>,
    pub dice: f64,
    pub sensitivity: f64,
    pub pttas: f64,
    pub scores: ClassScores,
}

impl SliceEval {
    pub fn correct(&self) -> bool {
        self.predicted == Some(self.label)
    }
}

pub fn evaluate_labels(
    slice_id: &str,
    labels: &[u8],
    mask: &Raster<u8>,
    label: u8,
    tau: f64,
    set: PositiveSet,
) -> Result<SliceEval> {
    let ov = overlap(labels, &mask.data, label, set)?;
    let scores = class_scores(labels);
    Ok(SliceEval {
        slice_id: slice_id.to_owned(),
        label,
        predicted: predict_label(&scores, tau)?,
        dice: ov.dice(),
        sensitivity: ov.sensitivity(),
        pttas: pttas(labels, label),
        scores,
    })
}

pub fn evaluate_slice(map: &LabelMap, record: &SliceRecord, tau: f64, set: PositiveSet) -> Result<SliceEval> {
    if map.width() != record.mask.width || map.height() != record.mask.height {
        return Err(Error::Shape(format!(
            "label map {}x{} vs slice {} {}x{}",
            map.width(),
            map.height(),
            record.id,
            record.mask.width,
            record.mask.height
        )));
    }
    evaluate_labels(&record.id, &map.labels, &record.mask, record.label, tau, set)
}

/// Segments every slice at `stride` and scores it.
pub fn evaluate_network(
    net: &Network<f32>,
    records: &[SliceRecord],
    stride: usize,
    batch: usize,
    tau: f64,
    set: PositiveSet,
) -> Result<EvalReport> {
    let opts = SegmentOptions {
        stride,
        batch,
        checkpoint: String::new(),
    };
    let slices = records
        .iter()
        .map(|r| evaluate_slice(&segment_slice(net, r, &opts)?, r, tau, set))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(slices, tau, set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// `matrix[true − 1][predicted − 1]`
    pub matrix: [[usize; TUMOR_CLASSES]; TUMOR_CLASSES],
    pub nonclassified: [usize; TUMOR_CLASSES],
    /// Correct / row total, nonclassified slices included in the row.
    pub sensitivity: [f64; TUMOR_CLASSES],
    /// Diagonal sum / all slices.
    pub accuracy: f64,
    pub total: usize,
}

pub fn confusion(evals: &[SliceEval]) -> Result<ConfusionReport> {
    if evals.is_empty() {
        return Err(Error::Parameter("confusion matrix of zero slices".into()));
    }
    let mut matrix = [[0; TUMOR_CLASSES]; TUMOR_CLASSES];
    let mut nonclassified = [0; TUMOR_CLASSES];
    for e in evals {
        if !(1..=3).contains(&e.label) {
            return Err(Error::Label(format!("slice {} has label {}", e.slice_id, e.label)));
        }
        let row = usize::from(e.label - 1);
        match e.predicted {
            Some(p) => matrix[row][usize::from(p - 1)] += 1,
            None => nonclassified[row] += 1,
        }
    }
    let sensitivity = std::array::from_fn(|r| {
        let total: usize = matrix[r].iter().sum::<usize>() + nonclassified[r];
        if total == 0 {
            0.0
        } else {
            matrix[r][r] as f64 / total as f64
        }
    });
    let diag: usize = (0..TUMOR_CLASSES).map(|i| matrix[i][i]).sum();
    Ok(ConfusionReport {
        matrix,
        nonclassified,
        sensitivity,
        accuracy: diag as f64 / evals.len() as f64,
        total: evals.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    /// Correctly classified / all slices.
    pub precision: f64,
    /// Slices not left nonclassified.
    pub classified: usize,
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn tau_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn threshold_sweep(pairs: &[(ClassScores, u8)], taus: &[f64]) -> Result<Vec<SweepRow>> {
    taus.iter()
        .map(|&tau| {
            let mut correct = 0;
            let mut classified = 0;
            for (scores, truth) in pairs {
                if let Some(p) = predict_label(scores, tau)? {
                    classified += 1;
                    correct += usize::from(p == *truth);
                }
            }
            Ok(SweepRow {
                tau,
                precision: if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 },
                classified,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,precision,classified\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.tau, r.precision, r.classified).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histograms {
    pub bins: usize,
    pub dice: Vec<usize>,
    pub sensitivity: Vec<usize>,
    pub pttas: Vec<usize>,
}

fn bin_of(value: f64, bins: usize) -> usize {
    ((value.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

/// Equal-width histograms over `[0, 1]`; 1.0 falls in the last bin.
pub fn metric_histograms(evals: &[SliceEval], bins: usize) -> Result<Histograms> {
    if bins == 0 {
        return Err(Error::Parameter("histograms need at least one bin".into()));
    }
    let count = |f: fn(&SliceEval) -> f64| {
        let mut h = vec![0; bins];
        for e in evals {
            h[bin_of(f(e), bins)] += 1;
        }
        h
    };
    Ok(Histograms {
        bins,
        dice: count(|e| e.dice),
        sensitivity: count(|e| e.sensitivity),
        pttas: count(|e| e.pttas),
    })
}

impl Histograms {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,dice,sensitivity,pttas\n");
        for i in 0..self.bins {
            let (lo, hi) = (i as f64 / self.bins as f64, (i + 1) as f64 / self.bins as f64);
            writeln!(out, "{lo},{hi},{},{},{}", self.dice[i], self.sensitivity[i], self.pttas[i]).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub slices: usize,
    pub mean_dice: f64,
    pub mean_sensitivity: f64,
    pub mean_pttas: f64,
    pub accuracy: f64,
    pub nonclassified: usize,
}

impl Aggregate {
    pub fn of(evals: &[SliceEval]) -> Self {
        let n = evals.len().max(1) as f64;
        let mean = |f: fn(&SliceEval) -> f64| evals.iter().map(f).sum::<f64>() / n;
        Self {
            slices: evals.len(),
            mean_dice: mean(|e| e.dice),
            mean_sensitivity: mean(|e| e.sensitivity),
            mean_pttas: mean(|e| e.pttas),
            accuracy: evals.iter().filter(|e| e.correct()).count() as f64 / n,
            nonclassified: evals.iter().filter(|e| e.predicted.is_none()).count(),
        }
    }
}

/// Per-slice results with their aggregate and confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub positive_set: PositiveSet,
    pub aggregate: Aggregate,
    pub confusion: ConfusionReport,
    pub slices: Vec<SliceEval>,
}

impl EvalReport {
    pub fn new(slices: Vec<SliceEval>, tau: f64, positive_set: PositiveSet) -> Result<Self> {
        Ok(Self {
            tau,
            positive_set,
            aggregate: Aggregate::of(&slices),
            confusion: confusion(&slices)?,
            slices,
        })
    }

    pub fn sweep_pairs(&self) -> Vec<(ClassScores, u8)> {
        self.slices.iter().map(|s| (s.scores, s.label)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "evaluation report".into(),
            source,
        })?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }
}
