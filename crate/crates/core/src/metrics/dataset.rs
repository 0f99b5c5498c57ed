//! Directory-level evaluation and report serialization.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lc3net_tensor::par;
use serde::{Deserialize, Serialize};

use super::{curves_and_avg_f, e_measure, mae, s_measure, GroundTruth, SaliencyMap, NUM_THRESHOLDS};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub stem: String,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub avg_f: f64,
    pub adaptive_f: f64,
    #[serde(skip)]
    curves: Option<ImageCurves>,
}

#[derive(Clone, Debug, PartialEq)]
struct ImageCurves {
    precision: Vec<f64>,
    recall: Vec<f64>,
    f: Vec<f64>,
}

impl ImageRecord {
    pub fn compute(stem: impl Into<String>, p: &SaliencyMap, g: &GroundTruth) -> Result<Self> {
        let curves = curves_and_avg_f(p, g)?;
        Ok(Self {
            stem: stem.into(),
            mae: mae(p, g)?,
            s_measure: s_measure(p, g)?,
            e_measure: e_measure(p, g)?,
            avg_f: curves.avg_f,
            adaptive_f: curves.adaptive_f,
            curves: Some(ImageCurves {
                precision: curves.precision,
                recall: curves.recall,
                f: curves.f,
            }),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_images: usize,
    pub s_measure: f64,
    pub avg_f: f64,
    pub max_f: f64,
    pub adaptive_f: f64,
    pub e_measure: f64,
    pub mae: f64,
    /// `(precision, recall)` per threshold.
    pub pr_curve: Vec<(f64, f64)>,
    pub f_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageRecord>>,
}

impl MetricReport {
    /// Means of per-image scores; curves are averaged threshold by threshold.
    pub fn aggregate(records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dataset("no images to evaluate".into()));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&ImageRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let mut precision = vec![0.0; NUM_THRESHOLDS];
        let mut recall = vec![0.0; NUM_THRESHOLDS];
        let mut f_curve = vec![0.0; NUM_THRESHOLDS];
        for r in &records {
            let c = r
                .curves
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("record {} has no curves", r.stem)))?;
            for t in 0..NUM_THRESHOLDS {
                precision[t] += c.precision[t];
                recall[t] += c.recall[t];
                f_curve[t] += c.f[t];
            }
        }
        for t in 0..NUM_THRESHOLDS {
            precision[t] /= n;
            recall[t] /= n;
            f_curve[t] /= n;
        }
        Ok(Self {
            num_images: records.len(),
            s_measure: mean(|r| r.s_measure),
            avg_f: pairwise_sum(&f_curve) / NUM_THRESHOLDS as f64,
            max_f: f_curve.iter().copied().fold(0.0, f64::max),
            adaptive_f: mean(|r| r.adaptive_f),
            e_measure: mean(|r| r.e_measure),
            mae: mean(|r| r.mae),
            pr_curve: precision.into_iter().zip(recall).collect(),
            f_curve,
            per_image: Some(records),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Dataset(format!("serializing report: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Writes `threshold,precision,recall,f` with one row per threshold.
pub fn write_curves_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut out = String::from("threshold,precision,recall,f\n");
    for (t, ((p, r), f)) in report.pr_curve.iter().zip(&report.f_curve).enumerate() {
        out.push_str(&format!("{t},{p},{r},{f}\n"));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Image files in `dir` keyed by stem.
pub(crate) fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if !path.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::Dataset(format!(
                    "two files share stem {stem}: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

pub(crate) fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok((h as usize, w as usize, gray.into_raw()))
}

fn evaluate_pair(stem: &str, pred: &Path, gt: &Path) -> Result<ImageRecord> {
    let (ph, pw, pdata) = read_gray(pred)?;
    let (gh, gw, gdata) = read_gray(gt)?;
    if (ph, pw) != (gh, gw) {
        return Err(Error::Dataset(format!(
            "{stem}: prediction is {ph}x{pw} but ground truth is {gh}x{gw}"
        )));
    }
    let p = SaliencyMap::from_u8(ph, pw, &pdata)?;
    let g = GroundTruth::from_u8(gh, gw, &gdata)?;
    ImageRecord::compute(stem, &p, &g)
}

/// Scores every prediction in `pred_dir` against the same-stem mask in `gt_dir`.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = images_by_stem(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Dataset(format!("no predictions in {}", pred_dir.display())));
    }
    let gts = images_by_stem(gt_dir)?;
    let mut pairs = Vec::with_capacity(preds.len());
    for (stem, pred) in preds {
        let gt = gts
            .get(&stem)
            .ok_or_else(|| Error::Dataset(format!("no ground truth for {stem}")))?
            .clone();
        pairs.push((stem, pred, gt));
    }
    let records = par::map_slice(&pairs, |(stem, pred, gt)| evaluate_pair(stem, pred, gt))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    MetricReport::aggregate(records)
}

fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}
