//! Classification metrics, ROC curves, fold aggregation and CAM renderings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::D;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{PairSource, PairedSample};
use crate::error::{contract, Error, Result};
use crate::imaging::{colorize, hstack, overlay, resize_image, save_png, upsample_nearest, vstack};
use crate::model::{compute_cam, stack_images, ClassifierHandle};
use crate::srg::{SemanticMaps, Trinary};

pub const DECISION_THRESHOLD: f64 = 0.5;

/// The six scalar metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    /// `None` when the evaluated labels contain a single class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub values: MetricValues,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`; empty when AUC is undefined.
    pub roc_points: Vec<(f64, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricsReport {
    pub fn auc(&self) -> Result<f64> {
        self.values.auc.ok_or(Error::AucUndefined)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of positive-class probabilities `scores` against binary `labels`.
///
/// Threshold metrics count `score >= threshold` as positive. The ROC sweeps
/// every distinct score; tied positives and negatives produce a diagonal
/// segment, so the trapezoidal area equals the Mann–Whitney statistic.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(contract(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(contract("no samples to evaluate"));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(contract(format!("score {s} outside [0, 1]")));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(contract(format!("label {y} outside {{0, 1}}")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n_pos = tp + fn_;
    let n_neg = tn + fp;
    let pre = ratio(tp, tp + fp);
    let sen = ratio(tp, n_pos);
    let f1 = if pre + sen > 0.0 { 2.0 * pre * sen / (pre + sen) } else { 0.0 };
    let roc_points = if n_pos > 0 && n_neg > 0 { roc_curve(scores, labels) } else { Vec::new() };
    let auc = (!roc_points.is_empty()).then(|| trapezoid_auc(&roc_points));
    Ok(MetricsReport {
        values: MetricValues {
            acc: ratio(tp + tn, scores.len()),
            pre,
            sen,
            spe: ratio(tn, n_neg),
            f1,
            auc,
        },
        roc_points,
        n_pos,
        n_neg,
    })
}

fn roc_curve(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let p = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    points
}

/// Trapezoidal area under a piecewise-linear curve of `(x, y)` points.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::AucUndefined);
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Per-fold rows and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: Vec<MetricValues>,
    pub mean: MetricValues,
}

impl FoldSummary {
    /// `{"fold_0": {...}, ..., "mean": {...}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (i, f) in self.folds.iter().enumerate() {
            map.insert(format!("fold_{i}"), serde_json::to_value(f).expect("plain struct"));
        }
        map.insert("mean".into(), serde_json::to_value(self.mean).expect("plain struct"));
        serde_json::Value::Object(map)
    }
}

/// Mean of each metric over folds. AUC is averaged over the folds where it is defined.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    if reports.is_empty() {
        return Err(contract("no fold reports to aggregate"));
    }
    let k = reports.len() as f64;
    let mean_of = |f: fn(&MetricValues) -> f64| reports.iter().map(|r| f(&r.values)).sum::<f64>() / k;
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.values.auc).collect();
    Ok(FoldSummary {
        folds: reports.iter().map(|r| r.values).collect(),
        mean: MetricValues {
            acc: mean_of(|v| v.acc),
            pre: mean_of(|v| v.pre),
            sen: mean_of(|v| v.sen),
            spe: mean_of(|v| v.spe),
            f1: mean_of(|v| v.f1),
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        },
    })
}

/// Which image of each pair a classifier is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// White-light (student) images.
    Wli,
    /// Narrow-band (teacher) images.
    Nbi,
}

/// Positive-class softmax probability for every sample of `source`.
pub fn predict_scores<S: PairSource + ?Sized>(
    model: &ClassifierHandle,
    source: &S,
    modality: Modality,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let size = model.input_size();
    let mut out = Vec::with_capacity(source.len());
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| {
                let s = source.load(i)?;
                let img = match modality {
                    Modality::Wli => s.image_w,
                    Modality::Nbi => s.image_n,
                };
                Ok(resize_image(img.view(), size, size))
            })
            .collect::<Result<Vec<Array3<f32>>>>()?;
        let t = stack_images(images.iter().map(|a| a.view()))?;
        let logits = model.forward(&t)?.logits.detach();
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        for row in probs.to_vec2::<f32>()? {
            out.push(f64::from(row[1]).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Scores and evaluates `model` on every sample of `source`.
pub fn evaluate<S: PairSource + ?Sized>(
    model: &ClassifierHandle,
    source: &S,
    modality: Modality,
    batch_size: usize,
) -> Result<MetricsReport> {
    let scores = predict_scores(model, source, modality, batch_size)?;
    let labels: Vec<u8> = (0..source.len()).map(|i| source.label(i)).collect();
    compute_metrics(&scores, &labels, DECISION_THRESHOLD)
}

const PLOT_SIZE: usize = 256;
const PLOT_MARGIN: usize = 16;

fn draw_line(canvas: &mut Array3<f32>, from: (f64, f64), to: (f64, f64), colour: [f32; 3]) {
    let span = (PLOT_SIZE - 2 * PLOT_MARGIN - 1) as f64;
    let px = |p: (f64, f64)| {
        (
            PLOT_MARGIN as f64 + p.0 * span,
            (PLOT_SIZE - PLOT_MARGIN - 1) as f64 - p.1 * span,
        )
    };
    let (a, b) = (px(from), px(to));
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round() as usize;
        let y = (a.1 + t * (b.1 - a.1)).round() as usize;
        for c in 0..3 {
            canvas[[c, y.min(PLOT_SIZE - 1), x.min(PLOT_SIZE - 1)]] = colour[c];
        }
    }
}

/// Renders ROC curves (one colour per curve) with axes and the chance diagonal.
pub fn render_roc(curves: &[&[(f64, f64)]]) -> Array3<f32> {
    let mut canvas = Array3::from_elem((3, PLOT_SIZE, PLOT_SIZE), 1.0f32);
    let grey = [0.7, 0.7, 0.7];
    let black = [0.0, 0.0, 0.0];
    draw_line(&mut canvas, (0.0, 0.0), (1.0, 1.0), grey);
    draw_line(&mut canvas, (0.0, 0.0), (1.0, 0.0), black);
    draw_line(&mut canvas, (0.0, 0.0), (0.0, 1.0), black);
    let palette = [[0.85, 0.1, 0.1], [0.1, 0.35, 0.85], [0.1, 0.6, 0.2], [0.8, 0.5, 0.0], [0.5, 0.1, 0.6]];
    for (i, curve) in curves.iter().enumerate() {
        for w in curve.windows(2) {
            draw_line(&mut canvas, w[0], w[1], palette[i % palette.len()]);
        }
    }
    canvas
}

/// Writes the ROC points as `fpr,tpr` CSV at `path` and a plot next to it (`.png`).
pub fn export_roc(report: &MetricsReport, path: &Path) -> Result<PathBuf> {
    let mut text = String::from("fpr,tpr\n");
    for (f, t) in &report.roc_points {
        text.push_str(&format!("{f},{t}\n"));
    }
    std::fs::write(path, text)?;
    let png = path.with_extension("png");
    save_png(render_roc(&[&report.roc_points]).view(), &png)?;
    Ok(png)
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (f, t) = l
                .split_once(',')
                .ok_or_else(|| contract(format!("malformed ROC line '{l}'")))?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| contract(format!("bad ROC value '{s}': {e}")));
            Ok((parse(f)?, parse(t)?))
        })
        .collect()
}

const OVERLAY_ALPHA: f32 = 0.45;

/// One grid row per sample: student image | student CAM overlay | teacher CAM overlay.
///
/// CAMs are taken for each sample's label. Returns the grid image.
pub fn cam_overlay_grid(samples: &[PairedSample], student: &ClassifierHandle, teacher: &ClassifierHandle) -> Result<Array3<f32>> {
    if samples.is_empty() {
        return Err(contract("no samples to render"));
    }
    let size = student.input_size();
    let head_w = student.head_weights()?;
    let head_n = teacher.head_weights()?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let image_w = resize_image(s.image_w.view(), size, size);
        let image_n = resize_image(s.image_n.view(), size, size);
        let cam_w = compute_cam(&student.extract(image_w.view())?, head_w.view(), s.label as usize, 0)?;
        let cam_n = compute_cam(&teacher.extract(image_n.view())?, head_n.view(), s.label as usize, 0)?;
        rows.push(hstack(&[
            image_w.clone(),
            overlay(image_w.view(), cam_w.map.view(), OVERLAY_ALPHA),
            overlay(image_n.view(), cam_n.map.view(), OVERLAY_ALPHA),
        ]));
    }
    Ok(vstack(&rows))
}

pub fn export_cam_overlays(
    samples: &[PairedSample],
    student: &ClassifierHandle,
    teacher: &ClassifierHandle,
    path: &Path,
) -> Result<()> {
    save_png(cam_overlay_grid(samples, student, teacher)?.view(), path)
}

/// Background black, unsure grey, polyp yellow.
pub fn render_mask(mask: &Array2<Trinary>, out_h: usize, out_w: usize) -> Array3<f32> {
    let up = upsample_nearest(mask.view(), out_h, out_w);
    let mut out = Array3::zeros((3, out_h, out_w));
    for ((y, x), t) in up.indexed_iter() {
        let rgb = match t {
            Trinary::Background => [0.0, 0.0, 0.0],
            Trinary::Unsure => [0.5, 0.5, 0.5],
            Trinary::Polyp => [1.0, 0.85, 0.0],
        };
        for c in 0..3 {
            out[[c, y, x]] = rgb[c];
        }
    }
    out
}

/// Two rows (student, teacher): image | raw CAM | refined CAM | mask at `stage`, plus the paired image.
pub fn semantic_panel(image_w: &Array3<f32>, image_n: &Array3<f32>, maps: &SemanticMaps, stage: usize) -> Result<Array3<f32>> {
    let scale = maps
        .scales
        .get(&stage)
        .ok_or_else(|| contract(format!("no masks for stage {stage}")))?;
    let (_, h, w) = image_w.dim();
    let heat = |m: &Array2<f32>| colorize(crate::imaging::resize_bilinear(m.view(), h, w).view());
    let row_w = hstack(&[
        image_w.clone(),
        heat(&maps.cam_raw_w.map),
        heat(&maps.cam_refined_w),
        render_mask(&scale.mask_w, h, w),
        image_n.clone(),
    ]);
    let row_n = hstack(&[
        image_n.clone(),
        heat(&maps.cam_raw_n.map),
        heat(&maps.cam_refined_n),
        render_mask(&scale.mask_n, h, w),
        image_w.clone(),
    ]);
    Ok(vstack(&[row_w, row_n]))
}

/// Metrics of several named runs, keyed by name.
pub type RunMetrics = BTreeMap<String, FoldSummary>;
