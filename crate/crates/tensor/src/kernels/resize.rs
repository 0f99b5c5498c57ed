//! Bilinear resampling with half-pixel centers (corner alignment disabled).

use crate::par;

/// Source taps for one output coordinate: `(i0, i1, w0, w1)`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f32,
    w1: f32,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f32 / output as f32;
    (0..output)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src as usize).min(input - 1);
            let i1 = if i0 < input - 1 { i0 + 1 } else { i0 };
            let w1 = src - i0 as f32;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Resizes every `h×w` plane of `x` (there are `planes` of them) to `oh×ow`.
pub fn bilinear_forward(x: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0f32; planes * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |q, dst| {
        let src = &x[q * h * w..(q + 1) * h * w];
        for (y, t) in ty.iter().enumerate() {
            let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
            for (xo, s) in tx.iter().enumerate() {
                let top = s.w0 * r0[s.i0] + s.w1 * r0[s.i1];
                let bot = s.w0 * r1[s.i0] + s.w1 * r1[s.i1];
                dst[y * ow + xo] = t.w0 * top + t.w1 * bot;
            }
        }
    });
    out
}

/// Adjoint of [`bilinear_forward`].
pub fn bilinear_backward(dy: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![0.0f32; planes * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |q, dst| {
        let g = &dy[q * oh * ow..(q + 1) * oh * ow];
        for (y, t) in ty.iter().enumerate() {
            for (xo, s) in tx.iter().enumerate() {
                let v = g[y * ow + xo];
                dst[t.i0 * w + s.i0] += t.w0 * s.w0 * v;
                dst[t.i0 * w + s.i1] += t.w0 * s.w1 * v;
                dst[t.i1 * w + s.i0] += t.w1 * s.w0 * v;
                dst[t.i1 * w + s.i1] += t.w1 * s.w1 * v;
            }
        }
    });
    dx
}
