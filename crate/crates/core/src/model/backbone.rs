//! Encoders producing the raw level 2..5 pyramid.

use std::collections::BTreeMap;

use lc3net_tensor::{ConvGeometry, ParamStore, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::feature::{BatchNorm2d, Conv2d, Ctx, FeatureMap, FeaturePyramid, Gamma, GammaSpec, Level};

/// Both spatial input dimensions must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    let pad = |d: usize| (INPUT_MULTIPLE - d % INPUT_MULTIPLE) % INPUT_MULTIPLE;
    if height == 0 || width == 0 || pad(height) != 0 || pad(width) != 0 {
        return Err(Error::Structure(format!(
            "input {height}x{width} is not divisible by {INPUT_MULTIPLE}; pad by {}x{} to {}x{}",
            pad(height),
            pad(width),
            height + pad(height),
            width + pad(width)
        )));
    }
    Ok(())
}

fn pyramid_from(outputs: Vec<Var>) -> Result<FeaturePyramid> {
    let mut map = BTreeMap::new();
    for (level, var) in Level::ALL.into_iter().zip(outputs) {
        map.insert(level, FeatureMap::new(var, level.stride())?);
    }
    FeaturePyramid::new(map)
}

/// Small conv–BN–ReLU encoder: a stride-2 stem and four stride-2 stages.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    stem: Gamma,
    stages: Vec<[Gamma; 2]>,
}

impl ToyBackbone {
    pub const CHANNELS: [usize; 4] = [16, 32, 64, 128];
    pub const STEM_CHANNELS: usize = 16;

    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let stem = Gamma::new(
            store,
            &format!("{name}.stem"),
            GammaSpec::new(3, Self::STEM_CHANNELS, 3, 1).with_stride(2),
            rng,
        )?;
        let mut stages = Vec::new();
        let mut c_in = Self::STEM_CHANNELS;
        for (i, &c) in Self::CHANNELS.iter().enumerate() {
            let prefix = format!("{name}.stage{}", i + 1);
            let down = Gamma::new(store, &format!("{prefix}.0"), GammaSpec::new(c_in, c, 3, 1).with_stride(2), rng)?;
            let keep = Gamma::new(store, &format!("{prefix}.1"), GammaSpec::new(c, c, 3, 1), rng)?;
            stages.push([down, keep]);
            c_in = c;
        }
        Ok(Self { stem, stages })
    }

    pub fn encode(&self, ctx: Ctx<'_>, image: &Var) -> Result<FeaturePyramid> {
        let mut x = self.stem.forward(ctx, image)?;
        let mut outputs = Vec::with_capacity(4);
        for [down, keep] in &self.stages {
            x = down.forward(ctx, &x)?;
            x = keep.forward(ctx, &x)?;
            outputs.push(x.clone());
        }
        pyramid_from(outputs)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    const EXPANSION: usize = 4;

    fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        width: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out = width * Self::EXPANSION;
        let g1 = ConvGeometry::same(1, 1);
        let g3 = ConvGeometry { stride, ..ConvGeometry::same(3, 1) };
        let downsample = if stride != 1 || in_channels != out {
            let geom = ConvGeometry { stride, ..g1 };
            Some((
                Conv2d::new(store, &format!("{name}.downsample.0"), (in_channels, out), geom, false, rng)?,
                BatchNorm2d::new(store, &format!("{name}.downsample.1"), out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), (in_channels, width), g1, false, rng)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), (width, width), g3, false, rng)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(store, &format!("{name}.conv3"), (width, out), g1, false, rng)?,
            bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), out)?,
            downsample,
        })
    }

    fn forward(&self, ctx: Ctx<'_>, x: &Var) -> Result<Var> {
        let g = ctx.graph;
        let y = g.relu(&self.bn1.forward(ctx, &self.conv1.forward(ctx, x)?)?);
        let y = g.relu(&self.bn2.forward(ctx, &self.conv2.forward(ctx, &y)?)?);
        let y = self.bn3.forward(ctx, &self.conv3.forward(ctx, &y)?)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)?)?,
            None => x.clone(),
        };
        Ok(g.relu(&g.add(&y, &identity)?))
    }
}

/// ResNet-50 with torchvision parameter names, truncated after `layer4`.
#[derive(Clone, Debug)]
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub const CHANNELS: [usize; 4] = [256, 512, 1024, 2048];
    const BLOCKS: [usize; 4] = [3, 4, 6, 3];
    const WIDTHS: [usize; 4] = [64, 128, 256, 512];

    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let stem = ConvGeometry { stride: 2, ..ConvGeometry::same(7, 1) };
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), (3, 64), stem, false, rng)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), 64)?;
        let mut layers = Vec::new();
        let mut c_in = 64;
        for (i, (&blocks, &width)) in Self::BLOCKS.iter().zip(&Self::WIDTHS).enumerate() {
            let mut layer = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                let block_name = format!("{name}.layer{}.{b}", i + 1);
                layer.push(Bottleneck::new(store, &block_name, c_in, width, stride, rng)?);
                c_in = width * Bottleneck::EXPANSION;
            }
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    pub fn encode(&self, ctx: Ctx<'_>, image: &Var) -> Result<FeaturePyramid> {
        let g = ctx.graph;
        let x = g.relu(&self.bn1.forward(ctx, &self.conv1.forward(ctx, image)?)?);
        let mut x = g.max_pool(&x, 3, 2, 1)?;
        let mut outputs = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(ctx, &x)?;
            }
            outputs.push(x.clone());
        }
        pyramid_from(outputs)
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Toy(ToyBackbone),
    ResNet50(ResNet50),
}

impl Backbone {
    pub fn channels(&self) -> [usize; 4] {
        match self {
            Backbone::Toy(_) => ToyBackbone::CHANNELS,
            Backbone::ResNet50(_) => ResNet50::CHANNELS,
        }
    }

    pub fn encode(&self, ctx: Ctx<'_>, image: &Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Structure(format!("expected a 3-channel image batch, got {c} channels")));
        }
        check_input_size(h, w)?;
        match self {
            Backbone::Toy(b) => b.encode(ctx, image),
            Backbone::ResNet50(b) => b.encode(ctx, image),
        }
    }
}
