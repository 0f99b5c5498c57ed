//! Saliency evaluation: MAE, F-measure curves, S-measure and E-measure.
//!
//! Predictions are real maps in `[0, 1]`; ground truth is binary. Threshold
//! `t ∈ 0..256` binarizes a prediction at `(t + 0.5) / 256`, counting
//! `p ≥ τ` as foreground.

pub mod dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{evaluate_dataset, write_curves_csv, ImageRecord, MetricReport};

pub const NUM_THRESHOLDS: usize = 256;
/// β² weighting precision over recall.
pub const BETA2: f64 = 0.3;
/// Balance between the object- and region-aware structure terms.
pub const S_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Structure(format!(
                "saliency map {height}x{width} with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Structure(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// From 8-bit grey levels, scaled by 1/255.
    pub fn from_u8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        Self::new(height, width, data.iter().map(|&v| v as f64 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            data: flip_rows(&self.data, self.width),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl GroundTruth {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Structure(format!("mask {height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Grey levels `≥ 128` are foreground.
    pub fn from_u8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        Self::new(height, width, data.iter().map(|&v| v >= 128).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|g| **g).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            data: flip_rows(&self.data, self.width),
            ..*self
        }
    }

    /// The mask as a `{0, 1}` saliency map.
    pub fn to_saliency(&self) -> SaliencyMap {
        SaliencyMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&g| g as u8 as f64).collect(),
        }
    }
}

fn flip_rows<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width).flat_map(|r| r.iter().rev().copied()).collect()
}

fn check(p: &SaliencyMap, g: &GroundTruth) -> Result<()> {
    if (p.height, p.width) != (g.height, g.width) {
        return Err(Error::Structure(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            p.height, p.width, g.height, g.width
        )));
    }
    Ok(())
}

/// Binarization level for threshold index `t`.
pub fn threshold_value(t: usize) -> f64 {
    (t as f64 + 0.5) / NUM_THRESHOLDS as f64
}

pub fn mae(p: &SaliencyMap, g: &GroundTruth) -> Result<f64> {
    check(p, g)?;
    let sum: f64 = p.data.iter().zip(&g.data).map(|(&p, &g)| (p - g as u8 as f64).abs()).sum();
    Ok(sum / p.data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

fn score_counts(tp: usize, predicted: usize, positives: usize) -> PrecisionRecall {
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, positives);
    PrecisionRecall {
        precision,
        recall,
        f: f_beta(precision, recall),
    }
}

/// Precision, recall and Fβ with the prediction binarized at `p ≥ level`.
pub fn f_measure_at(p: &SaliencyMap, g: &GroundTruth, level: f64) -> Result<PrecisionRecall> {
    check(p, g)?;
    let (mut tp, mut predicted) = (0, 0);
    for (&p, &g) in p.data.iter().zip(&g.data) {
        if p >= level {
            predicted += 1;
            tp += g as usize;
        }
    }
    Ok(score_counts(tp, predicted, g.foreground()))
}

pub fn f_measure(p: &SaliencyMap, g: &GroundTruth, threshold: usize) -> Result<PrecisionRecall> {
    if threshold >= NUM_THRESHOLDS {
        return Err(Error::Config(format!(
            "threshold {threshold} outside 0..{NUM_THRESHOLDS}"
        )));
    }
    f_measure_at(p, g, threshold_value(threshold))
}

/// Index of the highest threshold a value passes, or `None` below the first.
fn bin_of(p: f64) -> Option<usize> {
    let mut k = ((p * NUM_THRESHOLDS as f64 - 0.5).floor().max(-1.0) as isize).min(NUM_THRESHOLDS as isize - 1);
    while k + 1 < NUM_THRESHOLDS as isize && p >= threshold_value((k + 1) as usize) {
        k += 1;
    }
    while k >= 0 && p < threshold_value(k as usize) {
        k -= 1;
    }
    (k >= 0).then_some(k as usize)
}

/// Per-threshold counts of predicted-foreground pixels, split by ground truth.
struct ThresholdCounts {
    on_fg: [usize; NUM_THRESHOLDS],
    on_bg: [usize; NUM_THRESHOLDS],
}

impl ThresholdCounts {
    fn new(p: &SaliencyMap, g: &GroundTruth) -> Self {
        let mut hist_fg = [0usize; NUM_THRESHOLDS];
        let mut hist_bg = [0usize; NUM_THRESHOLDS];
        for (&p, &g) in p.data.iter().zip(&g.data) {
            if let Some(k) = bin_of(p) {
                if g {
                    hist_fg[k] += 1;
                } else {
                    hist_bg[k] += 1;
                }
            }
        }
        let (mut on_fg, mut on_bg) = ([0; NUM_THRESHOLDS], [0; NUM_THRESHOLDS]);
        let (mut a, mut b) = (0, 0);
        for t in (0..NUM_THRESHOLDS).rev() {
            a += hist_fg[t];
            b += hist_bg[t];
            on_fg[t] = a;
            on_bg[t] = b;
        }
        Self { on_fg, on_bg }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    pub avg_f: f64,
    pub adaptive_f: f64,
}

impl Curves {
    pub fn max_f(&self) -> f64 {
        self.f.iter().copied().fold(0.0, f64::max)
    }
}

/// Adaptive binarization level: twice the mean saliency, capped at 1.
pub fn adaptive_threshold(p: &SaliencyMap) -> f64 {
    let mean = p.data.iter().sum::<f64>() / p.data.len() as f64;
    (2.0 * mean).min(1.0)
}

pub fn curves_and_avg_f(p: &SaliencyMap, g: &GroundTruth) -> Result<Curves> {
    check(p, g)?;
    let counts = ThresholdCounts::new(p, g);
    let positives = g.foreground();
    let mut curves = Curves {
        precision: Vec::with_capacity(NUM_THRESHOLDS),
        recall: Vec::with_capacity(NUM_THRESHOLDS),
        f: Vec::with_capacity(NUM_THRESHOLDS),
        avg_f: 0.0,
        adaptive_f: f_measure_at(p, g, adaptive_threshold(p))?.f,
    };
    for t in 0..NUM_THRESHOLDS {
        let s = score_counts(counts.on_fg[t], counts.on_fg[t] + counts.on_bg[t], positives);
        curves.precision.push(s.precision);
        curves.recall.push(s.recall);
        curves.f.push(s.f);
    }
    curves.avg_f = curves.f.iter().sum::<f64>() / NUM_THRESHOLDS as f64;
    Ok(curves)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt(), n)
}

/// Similarity of the values inside one ground-truth region to a flat 1.
fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mean, std, n) = mean_std(values);
    if n == 0 {
        return 0.0;
    }
    2.0 * mean / (mean * mean + 1.0 + std)
}

fn object_score(p: &SaliencyMap, g: &GroundTruth) -> f64 {
    let u = g.foreground() as f64 / g.data.len() as f64;
    let pairs = p.data.iter().zip(&g.data);
    let fg = object_similarity(pairs.clone().filter(|(_, g)| **g).map(|(p, _)| *p));
    let bg = object_similarity(pairs.filter(|(_, g)| !**g).map(|(p, _)| 1.0 - *p));
    u * fg + (1.0 - u) * bg
}

/// Split point (exclusive column, exclusive row) at the rounded foreground centroid plus one.
fn centroid(g: &GroundTruth) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &v) in g.data.iter().enumerate() {
        if v {
            sx += (i % g.width) as f64;
            sy += (i / g.width) as f64;
            n += 1;
        }
    }
    let (x, y) = if n == 0 {
        ((g.width as f64 / 2.0).round_ties_even(), (g.height as f64 / 2.0).round_ties_even())
    } else {
        ((sx / n as f64).round_ties_even(), (sy / n as f64).round_ties_even())
    };
    (x as usize + 1, y as usize + 1)
}

/// Structural similarity of one block.
fn block_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let x = p.iter().sum::<f64>() / n as f64;
    let y = g.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (&a, &b) in p.iter().zip(g) {
            sxx += (a - x) * (a - x);
            syy += (b - y) * (b - y);
            sxy += (a - x) * (b - y);
        }
        let d = (n - 1) as f64;
        sxx /= d;
        syy /= d;
        sxy /= d;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(p: &SaliencyMap, g: &GroundTruth) -> f64 {
    let (w, h) = (g.width, g.height);
    let (cx, cy) = centroid(g);
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (w * h) as f64;
    let quadrants = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut score = 0.0;
    let mut weight_sum = 0.0;
    for (i, &(r0, r1, c0, c1)) in quadrants.iter().enumerate() {
        let weight = if i < 3 {
            ((r1 - r0) * (c1 - c0)) as f64 / area
        } else {
            1.0 - weight_sum
        };
        weight_sum += weight;
        let mut pb = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut gb = Vec::with_capacity(pb.capacity());
        for r in r0..r1 {
            pb.extend_from_slice(&p.data[r * w + c0..r * w + c1]);
            gb.extend(g.data[r * w + c0..r * w + c1].iter().map(|&v| v as u8 as f64));
        }
        if !pb.is_empty() {
            score += weight * block_ssim(&pb, &gb);
        }
    }
    score
}

/// Structure measure combining object- and region-aware similarity.
pub fn s_measure(p: &SaliencyMap, g: &GroundTruth) -> Result<f64> {
    check(p, g)?;
    let n = g.data.len();
    let fg = g.foreground();
    let mean_p = p.data.iter().sum::<f64>() / n as f64;
    if fg == 0 {
        return Ok(1.0 - mean_p);
    }
    if fg == n {
        return Ok(mean_p);
    }
    let s = S_ALPHA * object_score(p, g) + (1.0 - S_ALPHA) * region_score(p, g);
    Ok(s.max(0.0))
}

/// Enhanced-alignment value for a pixel whose demeaned prediction and mask are `a` and `b`.
fn enhanced_alignment(a: f64, b: f64) -> f64 {
    let den = a * a + b * b;
    let align = if den == 0.0 { 0.0 } else { 2.0 * a * b / den };
    (align + 1.0).powi(2) / 4.0
}

/// Enhanced-alignment score of a binarized prediction, from its confusion counts.
fn e_measure_counts(fg_fg: usize, fg_bg: usize, positives: usize, total: usize) -> f64 {
    let predicted = fg_fg + fg_bg;
    if positives == 0 {
        return (total - predicted) as f64 / total as f64;
    }
    if positives == total {
        return predicted as f64 / total as f64;
    }
    let bg_fg = positives - fg_fg;
    let bg_bg = total - predicted - bg_fg;
    let mp = predicted as f64 / total as f64;
    let mg = positives as f64 / total as f64;
    let parts = [
        (fg_fg, 1.0 - mp, 1.0 - mg),
        (fg_bg, 1.0 - mp, -mg),
        (bg_fg, -mp, 1.0 - mg),
        (bg_bg, -mp, -mg),
    ];
    let sum: f64 = parts
        .iter()
        .map(|&(count, a, b)| count as f64 * enhanced_alignment(a, b))
        .sum();
    sum / total as f64
}

/// E-measure curve over all thresholds.
pub fn e_measure_curve(p: &SaliencyMap, g: &GroundTruth) -> Result<Vec<f64>> {
    check(p, g)?;
    let counts = ThresholdCounts::new(p, g);
    let positives = g.foreground();
    let total = g.data.len();
    Ok((0..NUM_THRESHOLDS)
        .map(|t| e_measure_counts(counts.on_fg[t], counts.on_bg[t], positives, total))
        .collect())
}

/// Mean enhanced-alignment measure over the 256 binarization thresholds.
pub fn e_measure(p: &SaliencyMap, g: &GroundTruth) -> Result<f64> {
    let curve = e_measure_curve(p, g)?;
    Ok(curve.iter().sum::<f64>() / NUM_THRESHOLDS as f64)
}
