//! Independent brute-force reference implementations shared by the test targets.

#![allow(dead_code)]

use rand::Rng;

pub const THRESHOLDS: usize = 256;

/// Row-major map with a plain `Vec<Vec<_>>` layout, independent of the library types.
pub struct Pair {
    pub pred: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

impl Pair {
    pub fn height(&self) -> usize {
        self.mask.len()
    }

    pub fn width(&self) -> usize {
        self.mask[0].len()
    }

    pub fn flat_pred(&self) -> Vec<f64> {
        self.pred.concat()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.mask.concat()
    }
}

/// Random prediction/mask pair mixing blob masks, empty masks, full masks and quantized predictions.
pub fn random_pair(rng: &mut impl Rng, h: usize, w: usize) -> Pair {
    let kind = rng.random_range(0..10);
    let mask: Vec<Vec<bool>> = match kind {
        0 => vec![vec![false; w]; h],
        1 => vec![vec![true; w]; h],
        2 => (0..h).map(|_| (0..w).map(|_| rng.random_bool(0.5)).collect()).collect(),
        _ => {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let r = rng.random_range(1.0..w as f64 / 2.0);
            (0..h)
                .map(|y| (0..w).map(|x| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < r * r).collect())
                .collect()
        }
    };
    let quantize = rng.random_bool(0.3);
    let agree = rng.random_range(0.0..1.0);
    let pred = mask
        .iter()
        .map(|row| {
            row.iter()
                .map(|&m| {
                    let v: f64 = if rng.random_bool(agree) {
                        if m { rng.random_range(0.5..=1.0) } else { rng.random_range(0.0..0.5) }
                    } else {
                        rng.random_range(0.0..=1.0)
                    };
                    if quantize { (v * 255.0).round() / 255.0 } else { v }
                })
                .collect()
        })
        .collect();
    Pair { pred, mask }
}

pub fn ref_threshold(t: usize) -> f64 {
    (t as f64 + 0.5) / THRESHOLDS as f64
}

pub fn ref_mae(pair: &Pair) -> f64 {
    let mut sum = 0.0;
    for y in 0..pair.height() {
        for x in 0..pair.width() {
            let g = if pair.mask[y][x] { 1.0 } else { 0.0 };
            sum += (pair.pred[y][x] - g).abs();
        }
    }
    sum / (pair.height() * pair.width()) as f64
}

/// Precision, recall and Fβ² (β² = 0.3) at binarization level `level`.
pub fn ref_prf(pair: &Pair, level: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for y in 0..pair.height() {
        for x in 0..pair.width() {
            let on = pair.pred[y][x] >= level;
            match (on, pair.mask[y][x]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if precision == 0.0 && recall == 0.0 {
        0.0
    } else {
        1.3 * precision * recall / (0.3 * precision + recall)
    };
    (precision, recall, f)
}

pub fn ref_avg_f(pair: &Pair) -> f64 {
    (0..THRESHOLDS).map(|t| ref_prf(pair, ref_threshold(t)).2).sum::<f64>() / THRESHOLDS as f64
}

pub fn ref_adaptive_f(pair: &Pair) -> f64 {
    let mean = pair.flat_pred().iter().sum::<f64>() / (pair.height() * pair.width()) as f64;
    ref_prf(pair, (2.0 * mean).min(1.0)).2
}

fn sample_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    let (mx, vx) = sample_stats(p);
    let (my, vy) = sample_stats(g);
    let n = p.len() as f64;
    let cov = if p.len() > 1 {
        p.iter().zip(g).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let num = 4.0 * mx * my * cov;
    let den = (mx * mx + my * my) * (vx + vy);
    if num != 0.0 {
        num / den
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn object_term(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (mean, var) = sample_stats(values);
    2.0 * mean / (mean * mean + 1.0 + var.sqrt())
}

/// Structure measure with α = 0.5.
pub fn ref_s_measure(pair: &Pair) -> f64 {
    let (h, w) = (pair.height(), pair.width());
    let n = (h * w) as f64;
    let fg: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).filter(move |&x| pair.mask[y][x]).map(move |x| pair.pred[y][x]))
        .collect();
    let bg: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).filter(move |&x| !pair.mask[y][x]).map(move |x| 1.0 - pair.pred[y][x]))
        .collect();
    let mean_pred = pair.flat_pred().iter().sum::<f64>() / n;
    if fg.is_empty() {
        return 1.0 - mean_pred;
    }
    if bg.is_empty() {
        return mean_pred;
    }
    let u = fg.len() as f64 / n;
    let object = u * object_term(&fg) + (1.0 - u) * object_term(&bg);

    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if pair.mask[y][x] {
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let cx = ((sx / fg.len() as f64).round_ties_even() as usize + 1).min(w);
    let cy = ((sy / fg.len() as f64).round_ties_even() as usize + 1).min(h);
    let mut region = 0.0;
    let blocks = [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)];
    for (rows, cols) in blocks {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in rows.clone() {
            for x in cols.clone() {
                p.push(pair.pred[y][x]);
                g.push(if pair.mask[y][x] { 1.0 } else { 0.0 });
            }
        }
        if !p.is_empty() {
            region += p.len() as f64 / n * ssim_block(&p, &g);
        }
    }
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Enhanced-alignment score of the prediction binarized at `level`.
pub fn ref_e_at(pair: &Pair, level: f64) -> f64 {
    let (h, w) = (pair.height(), pair.width());
    let n = (h * w) as f64;
    let bin: Vec<Vec<f64>> = pair
        .pred
        .iter()
        .map(|r| r.iter().map(|&v| if v >= level { 1.0 } else { 0.0 }).collect())
        .collect();
    let gt: Vec<Vec<f64>> = pair
        .mask
        .iter()
        .map(|r| r.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
        .collect();
    let gt_sum: f64 = gt.iter().flatten().sum();
    let bin_sum: f64 = bin.iter().flatten().sum();
    let matrix: Vec<f64> = if gt_sum == 0.0 {
        bin.iter().flatten().map(|b| 1.0 - b).collect()
    } else if gt_sum == n {
        bin.iter().flatten().copied().collect()
    } else {
        let mp = bin_sum / n;
        let mg = gt_sum / n;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let a = bin[y][x] - mp;
                let b = gt[y][x] - mg;
                let align = if a * a + b * b == 0.0 { 0.0 } else { 2.0 * a * b / (a * a + b * b) };
                out.push((1.0 + align) * (1.0 + align) / 4.0);
            }
        }
        out
    };
    matrix.iter().sum::<f64>() / n
}

pub fn ref_e_measure(pair: &Pair) -> f64 {
    (0..THRESHOLDS).map(|t| ref_e_at(pair, ref_threshold(t))).sum::<f64>() / THRESHOLDS as f64
}

/// Learned-scalar count of one conv–BN–ReLU block.
pub fn gamma_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + 2 * c_out
}

pub fn fcb_params() -> usize {
    let branches: usize = [1, 3, 5, 7, 9]
        .iter()
        .map(|&k| gamma_params(64, 64, k) + gamma_params(64, 64, 3))
        .sum();
    branches + gamma_params(5 * 64, 64, 3)
}

/// One directional pass over `levels` consecutive levels.
pub fn dcm_pass_params(levels: usize) -> usize {
    let fuse = 3 * gamma_params(64, 64, 3) + gamma_params(128, 64, 3);
    let updated = levels - 1;
    let source_blocks = levels * (levels - 1) / 2;
    updated * fuse + source_blocks * gamma_params(64, 64, 3)
}

pub fn toy_backbone_params() -> usize {
    let mut total = gamma_params(3, 16, 3);
    let mut c_in = 16;
    for c in [16, 32, 64, 128] {
        total += gamma_params(c_in, c, 3) + gamma_params(c, c, 3);
        c_in = c;
    }
    total
}

/// Trainable scalars of a ResNet-50 trunk without its classifier.
pub const RESNET50_TRUNK_PARAMS: usize = 25_557_032 - 2048 * 1000 - 1000;

pub fn model_params(backbone: usize, channels: [usize; 4], fcb: bool, up: bool, down: bool, stages: usize) -> usize {
    let mut total = backbone + channels.iter().map(|&c| gamma_params(c, 64, 3)).sum::<usize>();
    if fcb {
        total += 4 * fcb_params();
    }
    for s in 1..=stages {
        let levels = 5 - s;
        total += (up as usize + down as usize) * dcm_pass_params(levels);
        total += 2 * (64 * 9 + 1);
    }
    total
}

pub fn toy_model_params(fcb: bool, up: bool, down: bool, stages: usize) -> usize {
    model_params(toy_backbone_params(), [16, 32, 64, 128], fcb, up, down, stages)
}

/// Largest relative error between `analytic` and central differences of `f` around `x` with step `h`.
pub fn max_fd_rel_err(analytic: &[f64], f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
