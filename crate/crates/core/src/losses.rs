//! Joint BCE + soft-IoU supervision over dominant and auxiliary streams.
//!
//! Maps are `N × …` batches held in `f64`; every per-image quantity is reduced
//! over all non-batch elements and then averaged over the batch.

use std::collections::BTreeMap;

use lc3net_tensor::Tensor;

use crate::error::{Error, Result};
use crate::feature::Level;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

pub const MAX_DOMINANT_STREAMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the IoU term relative to BCE.
    pub lambda: f64,
    /// Weight of the auxiliary streams relative to the dominant ones.
    pub mu: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub eta5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 1.0,
            eta3: 0.5,
            eta4: 0.25,
            eta5: 0.125,
        }
    }
}

impl LossWeights {
    pub fn eta(&self, level: Level) -> Result<f64> {
        match level.index() {
            3 => Ok(self.eta3),
            4 => Ok(self.eta4),
            5 => Ok(self.eta5),
            i => Err(Error::Structure(format!("no auxiliary weight for level {i}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("eta3", self.eta3),
            ("eta4", self.eta4),
            ("eta5", self.eta5),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Batch of equally sized probability (or mask) maps held in `f64`.
///
/// The leading dimension is the batch; every other dimension belongs to one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MapBatch {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl MapBatch {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected == 0 || expected != data.len() {
            return Err(Error::Structure(format!(
                "map batch of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn per_image(&self) -> usize {
        self.data.len() / self.batch()
    }
}

fn check_pair(op: &str, p: &MapBatch, g: &MapBatch) -> Result<()> {
    if p.shape != g.shape {
        return Err(Error::Structure(format!(
            "{op}: prediction shape {:?} does not match mask shape {:?}",
            p.shape, g.shape
        )));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn bce_term(p: f64, g: f64) -> f64 {
    let p = clamp(p);
    -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
}

/// Pixel-mean binary cross-entropy, averaged over the batch.
pub fn bce_loss(p: &MapBatch, g: &MapBatch) -> Result<f64> {
    check_pair("bce_loss", p, g)?;
    let sum: f64 = p.data.iter().zip(&g.data).map(|(&p, &g)| bce_term(p, g)).sum();
    Ok(sum / p.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to `p` (zero where the clamp is active).
pub fn bce_loss_grad(p: &MapBatch, g: &MapBatch) -> Result<Vec<f64>> {
    check_pair("bce_loss", p, g)?;
    let n = p.len() as f64;
    Ok(p.data
        .iter()
        .zip(&g.data)
        .map(|(&p, &g)| {
            if !(EPS..=1.0 - EPS).contains(&p) {
                0.0
            } else {
                (-g / p + (1.0 - g) / (1.0 - p)) / n
            }
        })
        .collect())
}

fn iou_parts(p: &[f64], g: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &g) in p.iter().zip(g) {
        inter += p * g;
        union += p + g - p * g;
    }
    (inter, union)
}

/// One minus soft intersection-over-union per image, averaged over the batch.
/// An empty prediction over an empty mask scores 0.
pub fn iou_loss(p: &MapBatch, g: &MapBatch) -> Result<f64> {
    check_pair("iou_loss", p, g)?;
    let per = p.per_image();
    let total: f64 = p
        .data
        .chunks(per)
        .zip(g.data.chunks(per))
        .map(|(p, g)| {
            let (i, u) = iou_parts(p, g);
            if u == 0.0 {
                0.0
            } else {
                1.0 - i / u
            }
        })
        .sum();
    Ok(total / p.batch() as f64)
}

/// Gradient of [`iou_loss`] with respect to `p`.
pub fn iou_loss_grad(p: &MapBatch, g: &MapBatch) -> Result<Vec<f64>> {
    check_pair("iou_loss", p, g)?;
    let per = p.per_image();
    let n = p.batch() as f64;
    let mut out = Vec::with_capacity(p.len());
    for (p, g) in p.data.chunks(per).zip(g.data.chunks(per)) {
        let (i, u) = iou_parts(p, g);
        if u == 0.0 {
            out.extend(std::iter::repeat_n(0.0, per));
            continue;
        }
        let u2 = u * u * n;
        out.extend(g.iter().map(|&g| -(g * u - i * (1.0 - g)) / u2));
    }
    Ok(out)
}

/// `bce + λ·iou` for one stream.
pub fn stream_loss(p: &MapBatch, g: &MapBatch, weights: &LossWeights) -> Result<f64> {
    Ok(bce_loss(p, g)? + weights.lambda * iou_loss(p, g)?)
}

fn stream_loss_grad(p: &MapBatch, g: &MapBatch, weights: &LossWeights) -> Result<Vec<f64>> {
    let mut grad = bce_loss_grad(p, g)?;
    for (d, i) in grad.iter_mut().zip(iou_loss_grad(p, g)?) {
        *d += weights.lambda * i;
    }
    Ok(grad)
}

fn check_dominant_count(count: usize) -> Result<()> {
    if !(1..=MAX_DOMINANT_STREAMS).contains(&count) {
        return Err(Error::Structure(format!(
            "expected 1..={MAX_DOMINANT_STREAMS} dominant streams, got {count}"
        )));
    }
    Ok(())
}

/// Mean of the per-stream losses over the dominant streams.
pub fn dominant_loss(dominant: &[MapBatch], g: &MapBatch, weights: &LossWeights) -> Result<f64> {
    check_dominant_count(dominant.len())?;
    let sum = dominant.iter().map(|p| stream_loss(p, g, weights)).sum::<Result<f64>>()?;
    Ok(combine_dominant(sum, dominant.len()))
}

fn combine_dominant(sum: f64, count: usize) -> f64 {
    sum / count as f64
}

pub fn auxiliary_loss(p: &MapBatch, g: &MapBatch, weights: &LossWeights) -> Result<f64> {
    stream_loss(p, g, weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub dominant: f64,
    pub auxiliary: BTreeMap<Level, f64>,
}

impl LossBreakdown {
    /// Auxiliary loss at `level`, or NaN when that stream is absent.
    pub fn aux(&self, level: Level) -> f64 {
        self.auxiliary.get(&level).copied().unwrap_or(f64::NAN)
    }
}

/// Auxiliary levels expected alongside `count` dominant streams.
fn expected_aux(count: usize) -> Vec<Level> {
    (0..count).map(|s| Level::new(5 - s as u8).expect("valid level")).collect()
}

fn check_streams(dominant_count: usize, have: Vec<Level>) -> Result<()> {
    check_dominant_count(dominant_count)?;
    let mut want = expected_aux(dominant_count);
    want.sort();
    if have != want {
        return Err(Error::Structure(format!(
            "auxiliary streams at levels {:?} do not match {dominant_count} dominant streams (expected {:?})",
            have.iter().map(|l| l.index()).collect::<Vec<_>>(),
            want.iter().map(|l| l.index()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Combines already computed per-stream losses into the weighted total.
pub fn combine_stream_losses(
    dominant: &[f64],
    auxiliary: &BTreeMap<Level, f64>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_streams(dominant.len(), auxiliary.keys().copied().collect())?;
    let dom = combine_dominant(dominant.iter().sum(), dominant.len());
    let mut total = dom;
    for (level, l) in auxiliary {
        total += weights.mu * weights.eta(*level)? * l;
    }
    Ok(LossBreakdown {
        total,
        dominant: dom,
        auxiliary: auxiliary.clone(),
    })
}

/// Dominant loss plus `μ·Σ ηₖ·L_aux(k)` over the present auxiliary streams.
pub fn total_loss(
    dominant: &[MapBatch],
    auxiliary: &BTreeMap<Level, MapBatch>,
    g: &MapBatch,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_streams(dominant.len(), auxiliary.keys().copied().collect())?;
    let dom = dominant.iter().map(|p| stream_loss(p, g, weights)).collect::<Result<Vec<_>>>()?;
    let aux = auxiliary
        .iter()
        .map(|(level, p)| Ok((*level, auxiliary_loss(p, g, weights)?)))
        .collect::<Result<_>>()?;
    combine_stream_losses(&dom, &aux, weights)
}

/// Gradients of [`total_loss`] with respect to every probability map.
#[derive(Clone, Debug)]
pub struct StreamGrads {
    pub dominant: Vec<Vec<f64>>,
    pub auxiliary: BTreeMap<Level, Vec<f64>>,
}

pub fn total_loss_grad(
    dominant: &[MapBatch],
    auxiliary: &BTreeMap<Level, MapBatch>,
    g: &MapBatch,
    weights: &LossWeights,
) -> Result<StreamGrads> {
    check_streams(dominant.len(), auxiliary.keys().copied().collect())?;
    let scale = 1.0 / dominant.len() as f64;
    let dom = dominant
        .iter()
        .map(|p| Ok(stream_loss_grad(p, g, weights)?.into_iter().map(|v| v * scale).collect()))
        .collect::<Result<_>>()?;
    let mut aux = BTreeMap::new();
    for (level, p) in auxiliary {
        let w = weights.mu * weights.eta(*level)?;
        aux.insert(*level, stream_loss_grad(p, g, weights)?.into_iter().map(|v| v * w).collect());
    }
    Ok(StreamGrads {
        dominant: dom,
        auxiliary: aux,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stream loss and its gradient with respect to the logits `z`, where `p = σ(z)`.
///
/// The BCE part uses the closed form `(σ(z) − g)/n`, which stays finite where
/// the probability saturates.
pub fn stream_loss_with_logit_grad(z: &Tensor, g: &MapBatch, weights: &LossWeights) -> Result<(f64, Vec<f64>)> {
    let p = MapBatch::new(z.shape().to_vec(), z.data().iter().map(|&v| sigmoid(v as f64)).collect())?;
    let loss = stream_loss(&p, g, weights)?;
    let iou = iou_loss_grad(&p, g)?;
    let n = p.len() as f64;
    let grad = p
        .data
        .iter()
        .zip(&g.data)
        .zip(iou)
        .map(|((&p, &g), di)| (p - g) / n + weights.lambda * di * p * (1.0 - p))
        .collect();
    Ok((loss, grad))
}

fn scaled_tensor(shape: &[usize], grad: Vec<f64>, scale: f64) -> Result<Tensor> {
    Ok(Tensor::new(shape.to_vec(), grad.into_iter().map(|v| (v * scale) as f32).collect())?)
}

/// Total loss and per-logit-map gradients, ready to seed backpropagation.
pub fn total_loss_with_logit_grads(
    dominant: &[&Tensor],
    auxiliary: &BTreeMap<Level, &Tensor>,
    g: &Tensor,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>, BTreeMap<Level, Tensor>)> {
    check_streams(dominant.len(), auxiliary.keys().copied().collect())?;
    let g = MapBatch::from_tensor(g)?;
    let scale = 1.0 / dominant.len() as f64;
    let mut dom_losses = Vec::with_capacity(dominant.len());
    let mut dom_grads = Vec::with_capacity(dominant.len());
    for z in dominant {
        let (l, grad) = stream_loss_with_logit_grad(z, &g, weights)?;
        dom_losses.push(l);
        dom_grads.push(scaled_tensor(z.shape(), grad, scale)?);
    }
    let mut aux_losses = BTreeMap::new();
    let mut aux_grads = BTreeMap::new();
    for (level, z) in auxiliary {
        let (l, grad) = stream_loss_with_logit_grad(z, &g, weights)?;
        aux_losses.insert(*level, l);
        aux_grads.insert(*level, scaled_tensor(z.shape(), grad, weights.mu * weights.eta(*level)?)?);
    }
    let breakdown = combine_stream_losses(&dom_losses, &aux_losses, weights)?;
    Ok((breakdown, dom_grads, aux_grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> MapBatch {
        let n = v.len();
        MapBatch::new(vec![1, 1, 1, n], v).unwrap()
    }

    #[test]
    fn bce_anchors() {
        let g = t(vec![0.0, 1.0, 1.0, 0.0]);
        assert!(bce_loss(&g, &g).unwrap() < 1e-6);
        let half = t(vec![0.5; 4]);
        assert!((bce_loss(&half, &g).unwrap() - 2f64.ln()).abs() < 1e-12);
        let tiny = t(vec![1e-7; 4]);
        let ones = t(vec![1.0; 4]);
        assert!((bce_loss(&tiny, &ones).unwrap() - 16.118).abs() < 1e-2);
    }

    #[test]
    fn iou_anchors() {
        let g = t(vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(iou_loss(&g, &g).unwrap(), 0.0);
        let zeros = t(vec![0.0; 4]);
        let ones = t(vec![1.0; 4]);
        assert_eq!(iou_loss(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(iou_loss(&t(vec![0.5; 4]), &ones).unwrap(), 0.5);
        assert_eq!(iou_loss(&zeros, &zeros).unwrap(), 0.0);
    }

    #[test]
    fn dominant_and_aux_arithmetic() {
        let g = t(vec![1.0; 4]);
        let half = t(vec![0.5; 4]);
        let w = LossWeights::default();
        let expected = 2f64.ln() + 0.5;
        assert!((auxiliary_loss(&half, &g, &w).unwrap() - expected).abs() < 1e-12);
        let bce_only = LossWeights { lambda: 0.0, ..w };
        assert!((auxiliary_loss(&half, &g, &bce_only).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((dominant_loss(&[half.clone(), half.clone(), half.clone()], &g, &w).unwrap() - expected).abs() < 1e-12);
        assert!(dominant_loss(&[], &g, &w).is_err());
        assert!(dominant_loss(&vec![half; 4], &g, &w).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let a = MapBatch::new(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let b = MapBatch::new(vec![1, 1, 1, 4], vec![0.0; 4]).unwrap();
        assert!(matches!(bce_loss(&a, &b), Err(Error::Structure(_))));
        assert!(matches!(iou_loss(&a, &b), Err(Error::Structure(_))));
        assert!(MapBatch::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(MapBatch::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn total_checks_stream_set() {
        let g = t(vec![1.0; 4]);
        let p = t(vec![0.5; 4]);
        let w = LossWeights::default();
        let mut aux = BTreeMap::new();
        aux.insert(Level::L5, p.clone());
        assert!(total_loss(&[p.clone()], &aux, &g, &w).is_ok());
        aux.insert(Level::L3, p.clone());
        assert!(total_loss(&[p.clone()], &aux, &g, &w).is_err());
        assert!(total_loss(&[p.clone(), p.clone()], &aux, &g, &w).is_err());
    }

    #[test]
    fn logit_grad_matches_chain_rule() {
        let z = Tensor::new(vec![2, 1, 2, 2], vec![-2.0, -0.5, 0.1, 1.5, 0.3, -1.0, 2.0, 0.0]).unwrap();
        let g = MapBatch::new(vec![2, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let w = LossWeights::default();
        let (_, grad) = stream_loss_with_logit_grad(&z, &g, &w).unwrap();
        let p = MapBatch::new(z.shape().to_vec(), z.data().iter().map(|&v| sigmoid(v as f64)).collect()).unwrap();
        let dp = stream_loss_grad(&p, &g, &w).unwrap();
        for ((gz, dp), p) in grad.iter().zip(dp).zip(p.data()) {
            let chain = dp * p * (1.0 - p);
            assert!((gz - chain).abs() < 1e-12, "{gz} vs {chain}");
        }
    }
}
