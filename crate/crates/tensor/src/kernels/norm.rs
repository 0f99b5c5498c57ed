//! Per-channel batch normalization over NCHW data.

use crate::par;

/// Batch statistics of one channel.
#[derive(Clone, Copy, Debug)]
pub struct ChannelStats {
    pub mean: f32,
    /// Biased (population) variance, used for normalization.
    pub var: f32,
}

fn channel_sum(x: &[f32], n: usize, c: usize, plane: usize, ch: usize, f: impl Fn(f32) -> f64) -> f64 {
    let mut acc = 0.0f64;
    for b in 0..n {
        let base = (b * c + ch) * plane;
        acc += x[base..base + plane].iter().map(|&v| f(v)).sum::<f64>();
    }
    acc
}

pub fn batch_stats(x: &[f32], dims: (usize, usize, usize, usize)) -> Vec<ChannelStats> {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = (n * plane) as f64;
    par::map_range(c, |ch| {
        let mean = channel_sum(x, n, c, plane, ch, |v| v as f64) / count;
        let var = channel_sum(x, n, c, plane, ch, |v| {
            let d = v as f64 - mean;
            d * d
        }) / count;
        ChannelStats {
            mean: mean as f32,
            var: var as f32,
        }
    })
}

/// `y = scale·(x − mean)·invstd + shift`, per channel.
pub fn normalize(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    mean: &[f32],
    invstd: &[f32],
    scale: &[f32],
    shift: &[f32],
) -> Vec<f32> {
    let (_, c, h, w) = dims;
    let plane = h * w;
    let mut y = vec![0.0f32; x.len()];
    par::for_each_chunk_mut(&mut y, plane, |q, dst| {
        let ch = q % c;
        let (m, is, g, bt) = (mean[ch], invstd[ch], scale[ch], shift[ch]);
        for (d, &v) in dst.iter_mut().zip(&x[q * plane..(q + 1) * plane]) {
            *d = (v - m) * is * g + bt;
        }
    });
    y
}

pub struct NormGrads {
    pub input: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

/// Backward pass. With `batch_stats = true` the mean/variance are treated as
/// functions of the input (training mode); otherwise they are constants.
pub fn normalize_backward(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    mean: &[f32],
    invstd: &[f32],
    scale: &[f32],
    dy: &[f32],
    batch_stats: bool,
) -> NormGrads {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = (n * plane) as f64;
    let sums: Vec<(f64, f64)> = par::map_range(c, |ch| {
        let (m, is) = (mean[ch] as f64, invstd[ch] as f64);
        let mut dshift = 0.0f64;
        let mut dscale = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for (&g, &v) in dy[base..base + plane].iter().zip(&x[base..base + plane]) {
                dshift += g as f64;
                dscale += g as f64 * (v as f64 - m) * is;
            }
        }
        (dscale, dshift)
    });
    let mut dx = vec![0.0f32; x.len()];
    let sums_ref = &sums;
    par::for_each_chunk_mut(&mut dx, plane, |q, dst| {
        let ch = q % c;
        let (m, is, g) = (mean[ch] as f64, invstd[ch] as f64, scale[ch] as f64);
        let (dscale, dshift) = sums_ref[ch];
        let src = q * plane..(q + 1) * plane;
        for ((d, &gy), &v) in dst.iter_mut().zip(&dy[src.clone()]).zip(&x[src]) {
            *d = if batch_stats {
                let xhat = (v as f64 - m) * is;
                (g * is / count * (count * gy as f64 - dshift - xhat * dscale)) as f32
            } else {
                (gy as f64 * g * is) as f32
            };
        }
    });
    NormGrads {
        input: dx,
        scale: sums.iter().map(|s| s.0 as f32).collect(),
        shift: sums.iter().map(|s| s.1 as f32).collect(),
    }
}
