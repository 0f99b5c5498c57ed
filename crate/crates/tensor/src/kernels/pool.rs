//! Max pooling with recorded argmax for the backward pass.

use crate::par;

pub struct PoolOutput {
    pub values: Vec<f32>,
    /// Flat in-plane index of the selected input for each output element.
    pub argmax: Vec<u32>,
}

pub fn max_pool_forward(
    x: &[f32],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> PoolOutput {
    let per_plane: Vec<(Vec<f32>, Vec<u32>)> = par::map_range(planes, |q| {
        let src = &x[q * h * w..(q + 1) * h * w];
        let mut vals = vec![f32::NEG_INFINITY; oh * ow];
        let mut idx = vec![0u32; oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let (mut best, mut at) = (f32::NEG_INFINITY, 0usize);
                for ki in 0..kernel {
                    let ih = (y * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let iw = (xo * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let i = ih as usize * w + iw as usize;
                        if src[i] > best || best == f32::NEG_INFINITY {
                            best = src[i];
                            at = i;
                        }
                    }
                }
                vals[y * ow + xo] = best;
                idx[y * ow + xo] = at as u32;
            }
        }
        (vals, idx)
    });
    let mut values = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for (v, i) in per_plane {
        values.extend(v);
        argmax.extend(i);
    }
    PoolOutput { values, argmax }
}

pub fn max_pool_backward(dy: &[f32], argmax: &[u32], planes: usize, plane_in: usize, plane_out: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; planes * plane_in];
    par::for_each_chunk_mut(&mut dx, plane_in, |q, dst| {
        let g = &dy[q * plane_out..(q + 1) * plane_out];
        let a = &argmax[q * plane_out..(q + 1) * plane_out];
        for (v, &i) in g.iter().zip(a) {
            dst[i as usize] += *v;
        }
    });
    dx
}
