//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] lives for one forward/backward pass. Ops append nodes to the
//! tape only when recording is enabled and at least one input is itself on the
//! tape; otherwise the result is a detached constant and intermediate values
//! are freed as soon as their [`Var`] is dropped.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvShape};
use crate::kernels::{norm, pool, resize};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch normalization uses batch statistics and reports running-stat updates.
    Train,
    /// Batch normalization uses stored running statistics.
    Eval,
}

/// A value produced inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.value.dims4()
    }

    /// Whether gradients can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// True if both handles refer to the same underlying array.
    pub fn same_value(&self, other: &Var) -> bool {
        Arc::ptr_eq(&self.value, &other.value)
    }
}

/// Running-statistic update emitted by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f32>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f32>,
    pub momentum: f32,
}

impl NormUpdate {
    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .value_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .value_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone)]
struct Input {
    node: Option<usize>,
    value: Arc<Tensor>,
}

impl From<&Var> for Input {
    fn from(v: &Var) -> Self {
        Input {
            node: v.node,
            value: v.value.clone(),
        }
    }
}

enum Op {
    Leaf(Option<ParamId>),
    Conv {
        x: Input,
        w: Input,
        b: Option<Input>,
        shape: ConvShape,
    },
    Norm {
        x: Input,
        scale: Input,
        shift: Input,
        mean: Vec<f32>,
        invstd: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Input),
    Add(Input, Input),
    Mul(Input, Input),
    Concat(Vec<Input>),
    Resize(Input),
    MaxPool {
        x: Input,
        argmax: Vec<u32>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

pub struct Graph {
    mode: Mode,
    record: bool,
    nodes: RefCell<Vec<Node>>,
    norm_updates: RefCell<Vec<NormUpdate>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }

    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.leaves.get(&n))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    /// A graph that records operations for a later [`Graph::backward`].
    pub fn new(mode: Mode) -> Self {
        Self::with_recording(mode, true)
    }

    /// A graph that never records; forward only.
    pub fn inference() -> Self {
        Self::with_recording(Mode::Eval, false)
    }

    pub fn with_recording(mode: Mode, record: bool) -> Self {
        Self {
            mode,
            record,
            nodes: RefCell::new(Vec::new()),
            norm_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let value = Arc::new(value);
        if !(self.record && tracked) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            op,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Untracked constant (no gradient).
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    /// Tracked leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None), true)
    }

    /// Leaf view of a stored parameter; shares the storage, no copy.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let tracked = store.entry(id).kind.is_trainable();
        if !(self.record && tracked) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf(Some(id)),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    pub fn take_norm_updates(&self) -> Vec<NormUpdate> {
        std::mem::take(&mut *self.norm_updates.borrow_mut())
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeometry) -> Result<Var> {
        let dims = x.dims4()?;
        let (oc, ic, kh, kw) = w.dims4()?;
        if ic != dims.1 || kh != geom.kernel || kw != geom.kernel {
            return Err(shape_err("conv2d", x.value(), w.value()));
        }
        if let Some(b) = b {
            if b.shape() != [oc] {
                return Err(shape_err("conv2d bias", w.value(), b.value()));
            }
        }
        let shape = ConvShape::new(dims, oc, geom)?;
        let out = conv2d_forward(&shape, x.value().data(), w.value().data(), b.map(|b| b.value().data()));
        let out = Tensor::new(vec![dims.0, oc, shape.out_height, shape.out_width], out)?;
        let tracked = x.is_tracked() || w.is_tracked() || b.is_some_and(Var::is_tracked);
        Ok(self.push(
            out,
            Op::Conv {
                x: x.into(),
                w: w.into(),
                b: b.map(Input::from),
                shape,
            },
            tracked,
        ))
    }

    /// Per-channel batch normalization. In [`Mode::Train`] the batch statistics
    /// are used and a [`NormUpdate`] is queued; in [`Mode::Eval`] the running
    /// statistics stored under `running_mean`/`running_var` are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: &Var,
        scale: &Var,
        shift: &Var,
        store: &ParamStore,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f32,
        momentum: f32,
    ) -> Result<Var> {
        let dims = x.dims4()?;
        let c = dims.1;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(shape_err("batch_norm", x.value(), scale.value()));
        }
        let (mean, var, batch_stats) = match self.mode {
            Mode::Train => {
                let stats = norm::batch_stats(x.value().data(), dims);
                let count = (dims.0 * dims.2 * dims.3) as f32;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mean: Vec<f32> = stats.iter().map(|s| s.mean).collect();
                let var: Vec<f32> = stats.iter().map(|s| s.var).collect();
                self.norm_updates.borrow_mut().push(NormUpdate {
                    running_mean,
                    running_var,
                    batch_mean: mean.clone(),
                    batch_var: var.iter().map(|v| v * unbiased).collect(),
                    momentum,
                });
                (mean, var, true)
            }
            Mode::Eval => (
                store.value(running_mean).data().to_vec(),
                store.value(running_var).data().to_vec(),
                false,
            ),
        };
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = norm::normalize(
            x.value().data(),
            dims,
            &mean,
            &invstd,
            scale.value().data(),
            shift.value().data(),
        );
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = x.is_tracked() || scale.is_tracked() || shift.is_tracked();
        Ok(self.push(
            out,
            Op::Norm {
                x: x.into(),
                scale: scale.into(),
                shift: shift.into(),
                mean,
                invstd,
                batch_stats,
            },
            tracked,
        ))
    }

    pub fn relu(&self, x: &Var) -> Var {
        let out = x.value().map(|v| v.max(0.0));
        self.push(out, Op::Relu(x.into()), x.is_tracked())
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", a.value(), b.value()));
        }
        let data = a.value().data().iter().zip(b.value().data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a.into(), b.into()), a.is_tracked() || b.is_tracked()))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(shape_err("mul", a.value(), b.value()));
        }
        let data = a.value().data().iter().zip(b.value().data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a.into(), b.into()), a.is_tracked() || b.is_tracked()))
    }

    /// Concatenates rank-4 values along the channel axis.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let (n, _, h, w) = first.dims4()?;
        let mut channels = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err("concat", first.value(), p.value()));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for p in parts {
                let pc = p.shape()[1];
                data.extend_from_slice(&p.value().data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let out = Tensor::new(vec![n, channels, h, w], data)?;
        let tracked = parts.iter().any(|p| p.is_tracked());
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| Input::from(*p)).collect()), tracked))
    }

    /// Bilinear resize (half-pixel centers). Same size returns `x` itself.
    pub fn resize(&self, x: &Var, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = x.dims4()?;
        if height == 0 || width == 0 {
            return Err(TensorError::Invalid {
                op: "resize",
                msg: format!("target size {height}x{width} must be positive"),
            });
        }
        if (height, width) == (h, w) {
            return Ok(x.clone());
        }
        let out = resize::bilinear_forward(x.value().data(), n * c, h, w, height, width);
        let out = Tensor::new(vec![n, c, height, width], out)?;
        Ok(self.push(out, Op::Resize(x.into()), x.is_tracked()))
    }

    pub fn max_pool(&self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = x.dims4()?;
        let geom = ConvGeometry {
            kernel,
            stride,
            padding,
            dilation: 1,
        };
        let (oh, ow) = geom.output_size(h, w)?;
        let out = pool::max_pool_forward(x.value().data(), n * c, (h, w), (oh, ow), kernel, stride, padding);
        let t = Tensor::new(vec![n, c, oh, ow], out.values)?;
        Ok(self.push(
            t,
            Op::MaxPool {
                x: x.into(),
                argmax: out.argmax,
            },
            x.is_tracked(),
        ))
    }

    /// Backpropagates from `seeds` (each a value and its upstream gradient).
    pub fn backward(&self, seeds: &[(&Var, Tensor)]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for (var, g) in seeds {
            if g.shape() != var.shape() {
                return Err(shape_err("backward seed", var.value(), g));
            }
            if let Some(n) = var.node {
                accumulate(&mut grads[n], g.clone());
            }
        }
        let mut out = Gradients::default();
        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let send = |input: &Input, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if let Some(n) = input.node {
                    accumulate(&mut grads[n], t);
                }
            };
            match &node.op {
                Op::Leaf(Some(id)) => {
                    match out.params.get_mut(id) {
                        Some(t) => t.add_assign(&g)?,
                        None => {
                            out.params.insert(*id, g);
                        }
                    }
                }
                Op::Leaf(None) => {
                    out.leaves.insert(i, g);
                }
                Op::Conv { x, w, b, shape } => {
                    let r = conv2d_backward(
                        shape,
                        x.value.data(),
                        w.value.data(),
                        g.data(),
                        x.node.is_some(),
                        b.as_ref().is_some_and(|b| b.node.is_some()),
                    );
                    if let Some(dx) = r.input {
                        send(x, Tensor::new(x.value.shape().to_vec(), dx)?, &mut grads);
                    }
                    if w.node.is_some() {
                        send(w, Tensor::new(w.value.shape().to_vec(), r.weight)?, &mut grads);
                    }
                    if let (Some(b), Some(db)) = (b, r.bias) {
                        send(b, Tensor::new(b.value.shape().to_vec(), db)?, &mut grads);
                    }
                }
                Op::Norm {
                    x,
                    scale,
                    shift,
                    mean,
                    invstd,
                    batch_stats,
                } => {
                    let dims = x.value.dims4()?;
                    let r = norm::normalize_backward(
                        x.value.data(),
                        dims,
                        mean,
                        invstd,
                        scale.value.data(),
                        g.data(),
                        *batch_stats,
                    );
                    let c = dims.1;
                    send(x, Tensor::new(x.value.shape().to_vec(), r.input)?, &mut grads);
                    send(scale, Tensor::new(vec![c], r.scale)?, &mut grads);
                    send(shift, Tensor::new(vec![c], r.shift)?, &mut grads);
                }
                Op::Relu(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                        .collect();
                    send(x, Tensor::new(g.shape().to_vec(), data)?, &mut grads);
                }
                Op::Add(a, b) => {
                    if b.node.is_some() {
                        send(b, g.clone(), &mut grads);
                    }
                    send(a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if a.node.is_some() {
                        let d = g.data().iter().zip(b.value.data()).map(|(x, y)| x * y).collect();
                        send(a, Tensor::new(g.shape().to_vec(), d)?, &mut grads);
                    }
                    if b.node.is_some() {
                        let d = g.data().iter().zip(a.value.data()).map(|(x, y)| x * y).collect();
                        send(b, Tensor::new(g.shape().to_vec(), d)?, &mut grads);
                    }
                }
                Op::Concat(parts) => {
                    let (n, channels, h, w) = g.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let pc = p.value.shape()[1];
                        if p.node.is_some() {
                            let mut d = Vec::with_capacity(n * pc * plane);
                            for b in 0..n {
                                let start = (b * channels + offset) * plane;
                                d.extend_from_slice(&g.data()[start..start + pc * plane]);
                            }
                            send(p, Tensor::new(p.value.shape().to_vec(), d)?, &mut grads);
                        }
                        offset += pc;
                    }
                }
                Op::Resize(x) => {
                    let (n, c, h, w) = x.value.dims4()?;
                    let (_, _, oh, ow) = g.dims4()?;
                    let d = resize::bilinear_backward(g.data(), n * c, h, w, oh, ow);
                    send(x, Tensor::new(vec![n, c, h, w], d)?, &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let (n, c, h, w) = x.value.dims4()?;
                    let (_, _, oh, ow) = g.dims4()?;
                    let d = pool::max_pool_backward(g.data(), argmax, n * c, h * w, oh * ow);
                    send(x, Tensor::new(vec![n, c, h, w], d)?, &mut grads);
                }
            }
        }
        Ok(out)
    }
}
