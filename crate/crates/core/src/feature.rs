//! Feature maps, pyramids and the conv–BN–ReLU building block.

use std::collections::BTreeMap;
use std::fmt;

use lc3net_tensor::{ConvGeometry, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Strides a [`FeatureMap`] may carry.
pub const VALID_STRIDES: [usize; 5] = [1, 4, 8, 16, 32];

/// Channel count of every pyramid level after squeezing.
pub const PYRAMID_CHANNELS: usize = 64;

/// Batch-norm defaults.
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Pyramid level index `i`; level `i` sits at stride `2^i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Level(u8);

impl Level {
    pub const L2: Level = Level(2);
    pub const L3: Level = Level(3);
    pub const L4: Level = Level(4);
    pub const L5: Level = Level(5);
    pub const ALL: [Level; 4] = [Level::L2, Level::L3, Level::L4, Level::L5];

    pub fn new(index: u8) -> Result<Self> {
        if (2..=5).contains(&index) {
            Ok(Level(index))
        } else {
            Err(Error::Structure(format!("pyramid level {index} outside 2..=5")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn stride(self) -> usize {
        1 << self.0
    }

    /// Levels `from..=to` in ascending order.
    pub fn range(from: Level, to: Level) -> impl DoubleEndedIterator<Item = Level> {
        (from.0..=to.0).map(Level)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

/// Per-forward context: the tape plus read access to the parameters.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub graph: &'a Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self { graph, store }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

/// A batch × channels × height × width activation with its stride relative to the input image.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    var: Var,
    stride: usize,
}

impl FeatureMap {
    pub fn new(var: Var, stride: usize) -> Result<Self> {
        let (n, c, h, w) = var.dims4()?;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Structure(format!("empty feature map {:?}", var.shape())));
        }
        if !VALID_STRIDES.contains(&stride) {
            return Err(Error::Structure(format!("stride {stride} not one of {VALID_STRIDES:?}")));
        }
        Ok(Self { var, stride })
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn into_var(self) -> Var {
        self.var
    }

    pub fn value(&self) -> &Tensor {
        self.var.value()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.var.dims4().expect("feature maps are rank 4")
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    pub fn height(&self) -> usize {
        self.dims().2
    }

    pub fn width(&self) -> usize {
        self.dims().3
    }

    /// Same array, different graph value (used when an op returns a new var).
    fn with_var(&self, var: Var) -> Result<Self> {
        FeatureMap::new(var, self.stride)
    }
}

/// Ordered, contiguous levels of feature maps.
#[derive(Clone, Debug, Default)]
pub struct FeaturePyramid {
    levels: BTreeMap<Level, FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: BTreeMap<Level, FeatureMap>) -> Result<Self> {
        let p = Self { levels };
        p.validate()?;
        Ok(p)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    fn validate(&self) -> Result<()> {
        let mut batch = None;
        let mut prev: Option<Level> = None;
        for (&level, map) in &self.levels {
            if map.stride() != level.stride() {
                return Err(Error::Structure(format!(
                    "level {} has stride {}, expected {}",
                    level.index(),
                    map.stride(),
                    level.stride()
                )));
            }
            if let Some(p) = prev {
                if level.index() != p.index() + 1 {
                    return Err(Error::Structure(format!(
                        "pyramid levels not contiguous: {} follows {}",
                        level.index(),
                        p.index()
                    )));
                }
            }
            match batch {
                None => batch = Some(map.batch()),
                Some(b) if b != map.batch() => {
                    return Err(Error::Structure("pyramid levels disagree on batch size".into()))
                }
                _ => {}
            }
            prev = Some(level);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn get(&self, level: Level) -> Result<&FeatureMap> {
        self.levels
            .get(&level)
            .ok_or_else(|| Error::Structure(format!("pyramid is missing level {}", level.index())))
    }

    pub fn contains(&self, level: Level) -> bool {
        self.levels.contains_key(&level)
    }

    pub fn levels(&self) -> impl DoubleEndedIterator<Item = Level> + '_ {
        self.levels.keys().copied()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = (&Level, &FeatureMap)> {
        self.levels.iter()
    }

    pub fn lowest(&self) -> Option<Level> {
        self.levels.keys().next().copied()
    }

    pub fn highest(&self) -> Option<Level> {
        self.levels.keys().next_back().copied()
    }

    /// Replaces an existing level, keeping stride and shape consistent.
    pub fn replace(&mut self, level: Level, map: FeatureMap) -> Result<()> {
        let old = self.get(level)?;
        if old.dims() != map.dims() || old.stride() != map.stride() {
            return Err(Error::Structure(format!(
                "replacement for level {} changes shape {:?} -> {:?}",
                level.index(),
                old.dims(),
                map.dims()
            )));
        }
        self.levels.insert(level, map);
        Ok(())
    }

    pub fn into_map(self) -> BTreeMap<Level, FeatureMap> {
        self.levels
    }

    /// Levels `from..=to` as a new pyramid.
    pub fn slice(&self, from: Level, to: Level) -> Result<FeaturePyramid> {
        let mut out = BTreeMap::new();
        for l in Level::range(from, to) {
            out.insert(l, self.get(l)?.clone());
        }
        FeaturePyramid::new(out)
    }
}

/// Geometry of one conv–BN–ReLU block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GammaSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl GammaSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.dilation == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate block spec {self:?}")));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding(),
            dilation: self.dilation,
        }
    }

    /// Learned scalars: conv kernel plus BN scale and shift.
    pub fn num_params(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + 2 * self.out_channels
    }
}

/// Convolution weights drawn from `N(0, 2/fan_in)`.
pub(crate) fn init_conv_weight(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

/// Plain 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    in_channels: usize,
    out_channels: usize,
    geom: ConvGeometry,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (in_channels, out_channels): (usize, usize),
        geom: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = geom.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            init_conv_weight([out_channels, in_channels, k, k], rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::ConvBias, Tensor::zeros(vec![out_channels]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geom,
        })
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: &Var) -> Result<Var> {
        let c = x.dims4()?.1;
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(ctx.graph.conv2d(x, &w, b.as_ref(), self.geom)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    scale: ParamId,
    shift: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}.weight"), ParamKind::NormScale, Tensor::full(vec![channels], 1.0))?,
            shift: store.add(format!("{name}.bias"), ParamKind::NormShift, Tensor::zeros(vec![channels]))?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(vec![channels]),
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::full(vec![channels], 1.0),
            )?,
        })
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: &Var) -> Result<Var> {
        let scale = ctx.param(self.scale);
        let shift = ctx.param(self.shift);
        Ok(ctx.graph.batch_norm(
            x,
            &scale,
            &shift,
            ctx.store,
            self.running_mean,
            self.running_var,
            BN_EPS,
            BN_MOMENTUM,
        )?)
    }
}

/// Convolution (no bias) → batch normalization → ReLU.
#[derive(Clone, Debug)]
pub struct Gamma {
    spec: GammaSpec,
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Gamma {
    pub fn new(store: &mut ParamStore, name: &str, spec: GammaSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            (spec.in_channels, spec.out_channels),
            spec.geometry(),
            false,
            rng,
        )?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_channels)?;
        Ok(Self { spec, conv, bn })
    }

    pub fn spec(&self) -> &GammaSpec {
        &self.spec
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: &Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, &y)?;
        Ok(ctx.graph.relu(&y))
    }

    /// Stride-1 blocks keep the map's stride; strided blocks scale it.
    pub fn forward_map(&self, ctx: Ctx<'_>, x: &FeatureMap) -> Result<FeatureMap> {
        let y = self.forward(ctx, x.var())?;
        FeatureMap::new(y, x.stride() * self.spec.stride)
    }
}

/// Standalone Γ application: validates the block configuration, then runs it.
pub fn gamma_block(ctx: Ctx<'_>, x: &FeatureMap, block: &Gamma) -> Result<FeatureMap> {
    block.spec().validate()?;
    if x.channels() != block.spec().in_channels {
        return Err(Error::Config(format!(
            "block expects {} channels, input has {}",
            block.spec().in_channels,
            x.channels()
        )));
    }
    block.forward_map(ctx, x)
}

/// Per-level Γ blocks that bring raw backbone features down to 64 channels.
#[derive(Clone, Debug)]
pub struct ChannelSqueeze {
    blocks: BTreeMap<Level, Gamma>,
}

impl ChannelSqueeze {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: [usize; 4], rng: &mut impl Rng) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for (level, &c) in Level::ALL.iter().zip(&in_channels) {
            let spec = GammaSpec::new(c, PYRAMID_CHANNELS, 3, 1);
            blocks.insert(*level, Gamma::new(store, &format!("{name}.{level}"), spec, rng)?);
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, ctx: Ctx<'_>, raw: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut out = BTreeMap::new();
        for (&level, block) in &self.blocks {
            let map = raw.get(level)?;
            out.insert(level, gamma_block(ctx, map, block)?);
        }
        FeaturePyramid::new(out)
    }
}

/// Bilinearly resizes `x` to `height × width`, updating the stride.
pub fn resize_like(ctx: Ctx<'_>, x: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || width == 0 {
        return Err(Error::Structure(format!("resize target {height}x{width} must be positive")));
    }
    if (height, width) == (x.height(), x.width()) {
        return Ok(x.clone());
    }
    let scaled = x.stride() * x.height();
    if scaled % height != 0 || x.stride() * x.width() != width * (scaled / height) {
        return Err(Error::Structure(format!(
            "resizing {}x{} at stride {} to {height}x{width} gives a non-integral stride",
            x.height(),
            x.width(),
            x.stride()
        )));
    }
    let y = ctx.graph.resize(x.var(), height, width)?;
    FeatureMap::new(y, scaled / height)
}

/// Resizes `x` onto the grid of `target`.
pub fn resize_to(ctx: Ctx<'_>, x: &FeatureMap, target: &FeatureMap) -> Result<FeatureMap> {
    let y = ctx.graph.resize(x.var(), target.height(), target.width())?;
    FeatureMap::new(y, target.stride())
}

pub(crate) fn elementwise(
    ctx: Ctx<'_>,
    a: &FeatureMap,
    b: &FeatureMap,
    op: fn(&Graph, &Var, &Var) -> lc3net_tensor::Result<Var>,
) -> Result<FeatureMap> {
    if a.dims() != b.dims() {
        return Err(Error::Structure(format!("shape mismatch {:?} vs {:?}", a.dims(), b.dims())));
    }
    a.with_var(op(ctx.graph, a.var(), b.var())?)
}
