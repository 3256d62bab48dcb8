//! Pixel-level detection metrics and dataset evaluation.
//!
//! Thresholds run from 1 down to `1/n` in steps of `1/n`; a pixel is
//! predicted defective when `pred >= t`. Precision is 1 when nothing is
//! predicted, recall is 1 when the ground truth is empty.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnet::{self, NetParams};
use crate::error::{Error, Result};
use crate::image::{self, DefectMap, ImageBuf, Plane};
use crate::simgen::{self, LoadedPair};
use crate::spectral;

pub const DEFAULT_THRESHOLDS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// Descending.
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }
}

pub fn thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| (n - i) as f64 / n as f64).collect()
}

fn check_binary(gt: &Plane) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("ground truth must be binary".into()));
    }
    Ok(())
}

pub fn pr_curve(pred: &DefectMap, gt: &DefectMap, n_thresholds: usize) -> Result<PrCurve> {
    pr_curve_in(pred, gt, None, n_thresholds)
}

/// [`pr_curve`] counting only pixels where `valid` is nonzero.
pub fn pr_curve_in(
    pred: &DefectMap,
    gt: &DefectMap,
    valid: Option<&Plane>,
    n_thresholds: usize,
) -> Result<PrCurve> {
    pred.ensure_same_shape(gt, "pr_curve")?;
    if let Some(v) = valid {
        pred.ensure_same_shape(v, "pr_curve valid region")?;
    }
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 thresholds, got {n_thresholds}"
        )));
    }
    check_binary(gt)?;
    if !pred.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    let mut pixels: Vec<(f64, bool)> = (0..pred.len())
        .filter(|&i| valid.is_none_or(|v| v.data()[i] != 0.0))
        .map(|i| (pred.data()[i], gt.data()[i] == 1.0))
        .collect();
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = pixels.iter().filter(|p| p.1).count();

    let ts = thresholds(n_thresholds);
    let mut precision = Vec::with_capacity(ts.len());
    let mut recall = Vec::with_capacity(ts.len());
    let (mut next, mut tp, mut fp) = (0usize, 0usize, 0usize);
    for &t in &ts {
        while next < pixels.len() && pixels[next].0 >= t {
            if pixels[next].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            next += 1;
        }
        precision.push(ratio_or_one(tp, tp + fp));
        recall.push(ratio_or_one(tp, positives));
    }
    Ok(PrCurve {
        thresholds: ts,
        precision,
        recall,
    })
}

/// Exhaustive sweep: one point per distinct prediction value, descending.
/// Depends only on the ordering of `pred`, so AP and MaxF1 read off it are
/// unchanged by any strictly increasing remap of the scores.
pub fn pr_curve_sweep(pred: &DefectMap, gt: &DefectMap) -> Result<PrCurve> {
    pred.ensure_same_shape(gt, "pr_curve_sweep")?;
    check_binary(gt)?;
    if !pred.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    let mut pixels: Vec<(f64, bool)> = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p, g == 1.0)).collect();
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = pixels.iter().filter(|p| p.1).count();
    let mut curve = PrCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(v, pos)) in pixels.iter().enumerate() {
        if pos {
            tp += 1;
        } else {
            fp += 1;
        }
        if pixels.get(i + 1).is_none_or(|next| next.0 != v) {
            curve.thresholds.push(v);
            curve.precision.push(ratio_or_one(tp, tp + fp));
            curve.recall.push(ratio_or_one(tp, positives));
        }
    }
    Ok(curve)
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Step sum `Σ (R_i − R_{i−1}) · P_i` with `R_{−1} = 0`.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (&p, &r) in curve.precision.iter().zip(&curve.recall) {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Best F1 over the sweep and the threshold that reaches it (the highest
/// such threshold on ties).
pub fn max_f1(curve: &PrCurve) -> (f64, f64) {
    let mut best = (0.0, curve.thresholds.first().copied().unwrap_or(1.0));
    for ((&p, &r), &t) in curve.precision.iter().zip(&curve.recall).zip(&curve.thresholds) {
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f > best.0 {
            best = (f, t);
        }
    }
    best
}

/// Which map is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// The masking head's output `O`.
    #[default]
    Masked,
    /// Masking head removed: pixelwise maximum of `O_t` and `O_s`.
    Unmasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    pub ap: f64,
    pub max_f1: f64,
    pub best_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub max_f1: f64,
    pub pairs: Vec<PairScore>,
    /// Pairs that could not be read or lack a ground-truth mask.
    pub skipped: usize,
    pub n_thresholds: usize,
    pub readout: Readout,
    pub dataset: String,
}

impl EvalReport {
    fn from_scores(pairs: Vec<PairScore>, skipped: usize, n_thresholds: usize, readout: Readout, dataset: String) -> Self {
        let n = pairs.len().max(1) as f64;
        Self {
            ap: pairs.iter().map(|p| p.ap).sum::<f64>() / n,
            max_f1: pairs.iter().map(|p| p.max_f1).sum::<f64>() / n,
            pairs,
            skipped,
            n_thresholds,
            readout,
            dataset,
        }
    }

    /// One whitespace-separated row per pair, then the aggregate.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# dataset {} readout {:?} thresholds {} skipped {}", self.dataset, self.readout, self.n_thresholds, self.skipped);
        let _ = writeln!(out, "id ap max_f1 best_threshold");
        for p in &self.pairs {
            let _ = writeln!(out, "{} {:.6} {:.6} {:.6}", p.id, p.ap, p.max_f1, p.best_threshold);
        }
        let _ = writeln!(out, "mean {:.6} {:.6} -", self.ap, self.max_f1);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::corrupt(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn score_pair(id: &str, pred: &DefectMap, gt: &DefectMap, n_thresholds: usize) -> Result<PairScore> {
    let curve = pr_curve(pred, gt, n_thresholds)?;
    let (f1, t) = max_f1(&curve);
    Ok(PairScore {
        id: id.to_string(),
        ap: average_precision(&curve),
        max_f1: f1,
        best_threshold: t,
    })
}

/// Scores `predict` over already loaded pairs. Pairs without a mask are
/// skipped. Runs in parallel; rows keep the input order.
pub fn evaluate_pairs<F>(pairs: &[LoadedPair], n_thresholds: usize, predict: F) -> Result<(Vec<PairScore>, usize)>
where
    F: Fn(&LoadedPair) -> Result<DefectMap> + Sync,
{
    let results: Vec<Option<PairScore>> = pairs
        .par_iter()
        .map(|pair| match &pair.gt_mask {
            Some(gt) => score_pair(&pair.id, &predict(pair)?, gt, n_thresholds).map(Some),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    Ok((results.into_iter().flatten().collect(), skipped))
}

/// Runs the model on every pair of `dataset_dir`.
pub fn evaluate_dataset(params: &NetParams, dataset_dir: &Path, n_thresholds: usize) -> Result<EvalReport> {
    evaluate_dataset_with(dataset_dir, n_thresholds, Readout::Masked, |pair| {
        predict(params, &pair.template, &pair.source, Readout::Masked)
    })
}

/// Evaluation with an arbitrary predictor, e.g. one that returns the
/// ground truth. Pairs that fail to load are skipped and counted.
pub fn evaluate_dataset_with<F>(dataset_dir: &Path, n_thresholds: usize, readout: Readout, predict: F) -> Result<EvalReport>
where
    F: Fn(&LoadedPair) -> Result<DefectMap> + Sync,
{
    let (manifest, ids) = simgen::dataset_index(dataset_dir)?;
    let need_meta = manifest.is_some();
    let mut pairs = Vec::with_capacity(ids.len());
    let mut unreadable = 0;
    for id in &ids {
        match simgen::load_pair(dataset_dir, id, need_meta) {
            Ok(p) => pairs.push(p),
            Err(_) => unreadable += 1,
        }
    }
    let (scores, no_mask) = evaluate_pairs(&pairs, n_thresholds, predict)?;
    Ok(EvalReport::from_scores(
        scores,
        unreadable + no_mask,
        n_thresholds,
        readout,
        dataset_dir.display().to_string(),
    ))
}

pub fn predict(params: &NetParams, template: &ImageBuf, source: &ImageBuf, readout: Readout) -> Result<DefectMap> {
    let out = diffnet::full_forward(params, template, source)?;
    Ok(match readout {
        Readout::Masked => out.o,
        Readout::Unmasked => unmasked(&out.o_t, &out.o_s),
    })
}

pub fn unmasked(o_t: &DefectMap, o_s: &DefectMap) -> DefectMap {
    Plane::from_fn(o_t.height(), o_t.width(), |r, c| o_t.get(r, c).max(o_s.get(r, c)))
}

/// Source in gray with the prediction blended into the red channel.
pub fn overlay(source: &ImageBuf, pred: &DefectMap) -> Result<ImageBuf> {
    let gray = spectral::to_grayscale(source)?;
    gray.ensure_same_shape(pred, "overlay")?;
    let mut data = Vec::with_capacity(gray.len() * 3);
    for (&g, &p) in gray.data().iter().zip(pred.data()) {
        let p = p.clamp(0.0, 1.0);
        data.extend_from_slice(&[g * (1.0 - p) + p, g * (1.0 - p), g * (1.0 - p)]);
    }
    ImageBuf::new(gray.height(), gray.width(), 3, data)
}

pub fn write_overlay(path: &Path, source: &ImageBuf, pred: &DefectMap) -> Result<()> {
    image::write_png_rgb(path, &overlay(source, pred)?)
}
