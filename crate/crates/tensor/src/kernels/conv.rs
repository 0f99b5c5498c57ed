//! 2-D convolution via blocked im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::par;

/// Upper bound on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 22;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    /// Stride-1 geometry whose padding keeps the spatial size unchanged.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel.saturating_sub(1)) / 2,
            dilation,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("degenerate geometry {self:?}"),
            });
        }
        let span = self.dilation * (self.kernel - 1) + 1;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < span || pw < span {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{w} smaller than kernel span {span} with padding {}", self.padding),
            });
        }
        Ok(((ph - span) / self.stride + 1, (pw - span) / self.stride + 1))
    }
}

/// Static description of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub geom: ConvGeometry,
}

impl ConvShape {
    pub fn new(
        input: (usize, usize, usize, usize),
        out_channels: usize,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let (batch, in_channels, height, width) = input;
        let (out_height, out_width) = geom.output_size(height, width)?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            out_height,
            out_width,
            geom,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.geom.kernel * self.geom.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn columns(&self) -> usize {
        self.batch * self.out_pixels()
    }

    fn block_cols(&self) -> usize {
        (COLS_BUDGET / self.patch_len().max(1))
            .max(64)
            .min(self.columns().max(1))
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.columns()
    }
}

/// A run of consecutive unfolded columns that share one output row.
struct Segment {
    /// Offset of the first column within the block.
    col: usize,
    sample: usize,
    out_row: usize,
    out_col: usize,
    len: usize,
}

fn segments(s: &ConvShape, j0: usize, nb: usize) -> Vec<Segment> {
    let p = s.out_pixels();
    let mut out = Vec::new();
    let mut j = j0;
    while j < j0 + nb {
        let (b, q) = (j / p, j % p);
        let (oh, ow) = (q / s.out_width, q % s.out_width);
        let len = (s.out_width - ow).min(j0 + nb - j);
        out.push(Segment {
            col: j - j0,
            sample: b,
            out_row: oh,
            out_col: ow,
            len,
        });
        j += len;
    }
    out
}

/// Input row of kernel tap row `ki` for output row `oh`, if inside the image.
fn input_row(s: &ConvShape, oh: usize, ki: usize) -> Option<usize> {
    let g = s.geom;
    let ih = (oh * g.stride + ki * g.dilation) as isize - g.padding as isize;
    (ih >= 0 && (ih as usize) < s.height).then_some(ih as usize)
}

/// Range `lo..hi` of segment offsets whose input column for tap `kj` lies inside
/// the image, together with the input column at offset `lo`.
fn valid_columns(s: &ConvShape, seg: &Segment, kj: usize) -> (usize, usize, usize) {
    let g = s.geom;
    let offset = (kj * g.dilation) as isize - g.padding as isize;
    let stride = g.stride as isize;
    let first = seg.out_col as isize;
    // smallest output column with a non-negative input column
    let min_ow = if offset >= 0 { 0 } else { (-offset + stride - 1) / stride };
    let max_ow = (s.width as isize - 1 - offset).div_euclid(stride);
    let lo = (min_ow - first).clamp(0, seg.len as isize) as usize;
    let hi = (max_ow - first + 1).clamp(lo as isize, seg.len as isize) as usize;
    let iw0 = ((first + lo as isize) * stride + offset).max(0) as usize;
    (lo, hi, iw0)
}

fn im2col(s: &ConvShape, x: &[f32], segs: &[Segment], nb: usize, cols: &mut [f32]) {
    let k = s.geom.kernel;
    let stride = s.geom.stride;
    let plane = s.height * s.width;
    par::for_each_chunk_mut(&mut cols[..s.patch_len() * nb], nb, |r, row| {
        let ci = r / (k * k);
        let (ki, kj) = ((r / k) % k, r % k);
        for seg in segs {
            let dst = &mut row[seg.col..seg.col + seg.len];
            let Some(ih) = input_row(s, seg.out_row, ki) else {
                dst.fill(0.0);
                continue;
            };
            let (lo, hi, iw0) = valid_columns(s, seg, kj);
            if lo == hi {
                dst.fill(0.0);
                continue;
            }
            let src = &x[(seg.sample * s.in_channels + ci) * plane + ih * s.width..][..s.width];
            dst[..lo].fill(0.0);
            if stride == 1 {
                dst[lo..hi].copy_from_slice(&src[iw0..iw0 + hi - lo]);
            } else {
                for (t, d) in dst[lo..hi].iter_mut().enumerate() {
                    *d = src[iw0 + t * stride];
                }
            }
            dst[hi..].fill(0.0);
        }
    });
}

/// Forward convolution. `weight` is `[out, in, k, k]`; returns `[batch, out, oh, ow]`.
pub fn conv2d_forward(s: &ConvShape, x: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let kdim = s.patch_len();
    let p = s.out_pixels();
    let n = s.columns();
    let oc = s.out_channels;
    let block = s.block_cols();
    let mut out = vec![0.0f32; s.output_len()];
    let mut cols = vec![0.0f32; kdim * block];
    let mut tmp = vec![0.0f32; oc * block];
    let mut j0 = 0;
    while j0 < n {
        let nb = block.min(n - j0);
        let segs = segments(s, j0, nb);
        im2col(s, x, &segs, nb, &mut cols);
        gemm(
            oc,
            kdim,
            nb,
            MatRef::row_major(weight, kdim),
            MatRef::row_major(&cols[..kdim * nb], nb),
            &mut tmp[..oc * nb],
            0.0,
        );
        let tmp_ref = &tmp;
        par::for_each_chunk_mut(&mut out, p, |plane, dst| {
            let (b, o) = (plane / oc, plane % oc);
            let start = (b * p).max(j0);
            let end = ((b + 1) * p).min(j0 + nb);
            if start >= end {
                return;
            }
            let bias = bias.map_or(0.0, |bv| bv[o]);
            let src = &tmp_ref[o * nb + (start - j0)..o * nb + (end - j0)];
            for (d, v) in dst[start - b * p..end - b * p].iter_mut().zip(src) {
                *d = *v + bias;
            }
        });
        j0 += nb;
    }
    out
}

/// Gradients of a convolution.
pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Backward convolution given the output gradient `dout` (`[batch, out, oh, ow]`).
pub fn conv2d_backward(
    s: &ConvShape,
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    need_input: bool,
    need_bias: bool,
) -> ConvGrads {
    let kdim = s.patch_len();
    let p = s.out_pixels();
    let n = s.columns();
    let oc = s.out_channels;
    let k = s.geom.kernel;
    let block = s.block_cols();
    let plane = s.height * s.width;

    let mut dw = vec![0.0f32; oc * kdim];
    // per input channel: [batch, h, w]
    let mut dx_channels: Vec<Vec<f32>> = if need_input {
        (0..s.in_channels).map(|_| vec![0.0f32; s.batch * plane]).collect()
    } else {
        Vec::new()
    };
    let mut cols = vec![0.0f32; kdim * block];
    let mut dcols = vec![0.0f32; if need_input { kdim * block } else { 0 }];
    let mut dblock = vec![0.0f32; oc * block];

    let mut j0 = 0;
    while j0 < n {
        let nb = block.min(n - j0);
        let segs = segments(s, j0, nb);
        im2col(s, x, &segs, nb, &mut cols);
        // gather dout columns into [oc, nb]
        par::for_each_chunk_mut(&mut dblock[..oc * nb], nb, |o, row| {
            for (jj, v) in row.iter_mut().enumerate() {
                let j = j0 + jj;
                let (b, q) = (j / p, j % p);
                *v = dout[(b * oc + o) * p + q];
            }
        });
        // dW += dO · cols^T
        gemm(
            oc,
            nb,
            kdim,
            MatRef::row_major(&dblock[..oc * nb], nb),
            MatRef::transposed(&cols[..kdim * nb], nb),
            &mut dw,
            1.0,
        );
        if need_input {
            // dcols = W^T · dO
            gemm(
                kdim,
                oc,
                nb,
                MatRef::transposed(weight, kdim),
                MatRef::row_major(&dblock[..oc * nb], nb),
                &mut dcols[..kdim * nb],
                0.0,
            );
            let dcols_ref = &dcols;
            let segs_ref = &segs;
            let stride = s.geom.stride;
            par::for_each_mut(&mut dx_channels, |ci, dst| {
                for kk in 0..k * k {
                    let (ki, kj) = (kk / k, kk % k);
                    let r = ci * k * k + kk;
                    let row = &dcols_ref[r * nb..(r + 1) * nb];
                    for seg in segs_ref {
                        let Some(ih) = input_row(s, seg.out_row, ki) else { continue };
                        let (lo, hi, iw0) = valid_columns(s, seg, kj);
                        if lo == hi {
                            continue;
                        }
                        let base = seg.sample * plane + ih * s.width + iw0;
                        let src = &row[seg.col + lo..seg.col + hi];
                        for (t, g) in src.iter().enumerate() {
                            dst[base + t * stride] += *g;
                        }
                    }
                }
            });
        }
        j0 += nb;
    }

    let input = need_input.then(|| {
        let mut dx = vec![0.0f32; s.batch * s.in_channels * plane];
        let chans = &dx_channels;
        par::for_each_chunk_mut(&mut dx, plane, |q, dst| {
            let (b, c) = (q / s.in_channels, q % s.in_channels);
            dst.copy_from_slice(&chans[c][b * plane..(b + 1) * plane]);
        });
        dx
    });
    let bias = need_bias.then(|| {
        par::map_range(oc, |o| {
            let mut acc = 0.0f64;
            for b in 0..s.batch {
                acc += dout[(b * oc + o) * p..(b * oc + o + 1) * p]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            acc as f32
        })
    });
    ConvGrads {
        input,
        weight: dw,
        bias,
    }
}
