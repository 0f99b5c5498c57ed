//! Network assembly: backbone → channel squeeze → FCB → BCD → heads.

pub mod backbone;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use lc3net_tensor::{ConvGeometry, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bcd::{Bcd, BcdConfig, StreamBundle};
use crate::error::{Error, Result};
use crate::fcb::{Fcb, FcbConfig};
use crate::feature::{ChannelSqueeze, Conv2d, Ctx, FeatureMap, FeaturePyramid, Level, PYRAMID_CHANNELS};

pub use backbone::{check_input_size, Backbone, ResNet50, ToyBackbone, INPUT_MULTIPLE};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackboneKind {
    #[default]
    Toy,
    ResNet50,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackboneKind::Toy),
            "resnet50" => Ok(BackboneKind::ResNet50),
            other => Err(Error::Config(format!("unknown backbone {other:?} (expected toy or resnet50)"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Toy => "toy",
            BackboneKind::ResNet50 => "resnet50",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub use_fcb: bool,
    pub use_dcm_u: bool,
    pub use_dcm_d: bool,
    pub bcd_stages: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Toy,
            use_fcb: true,
            use_dcm_u: true,
            use_dcm_d: true,
            bcd_stages: 3,
            seed: 0,
        }
    }
}

/// Rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// FPN-like decoder: no FCB, identity DCM passes, one stage.
    Baseline,
    WithFcb,
    WithFcbDcm,
    Full,
}

impl ModelConfig {
    pub fn ablation(row: Ablation) -> Self {
        let (use_fcb, use_dcm, bcd_stages) = match row {
            Ablation::Baseline => (false, false, 1),
            Ablation::WithFcb => (true, false, 1),
            Ablation::WithFcbDcm => (true, true, 1),
            Ablation::Full => (true, true, 3),
        };
        Self {
            use_fcb,
            use_dcm_u: use_dcm,
            use_dcm_d: use_dcm,
            bcd_stages,
            ..Self::default()
        }
    }

    pub fn bcd(&self) -> BcdConfig {
        BcdConfig {
            stages: self.bcd_stages,
            use_up: self.use_dcm_u,
            use_down: self.use_dcm_d,
        }
    }

    /// Per-channel input normalization applied before the backbone.
    pub fn normalization(&self) -> Option<([f32; 3], [f32; 3])> {
        match self.backbone {
            BackboneKind::Toy => None,
            BackboneKind::ResNet50 => Some((IMAGENET_MEAN, IMAGENET_STD)),
        }
    }
}

/// Logits upsampled to the input resolution.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub dominant: Vec<Var>,
    pub auxiliary: BTreeMap<Level, Var>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.dominant.len() + self.auxiliary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Final inference stream (deepest dominant output).
    pub fn last_dominant(&self) -> &Var {
        self.dominant.last().expect("at least one decoder stage")
    }
}

#[derive(Clone, Debug)]
struct Heads {
    dominant: Vec<Conv2d>,
    auxiliary: BTreeMap<Level, Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Lc3Net {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    squeeze: ChannelSqueeze,
    fcb: BTreeMap<Level, Fcb>,
    bcd: Bcd,
    heads: Heads,
}

impl Lc3Net {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.bcd().validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = match config.backbone {
            BackboneKind::Toy => Backbone::Toy(ToyBackbone::new(&mut store, "backbone", &mut rng)?),
            BackboneKind::ResNet50 => Backbone::ResNet50(ResNet50::new(&mut store, "backbone", &mut rng)?),
        };
        let squeeze = ChannelSqueeze::new(&mut store, "squeeze", backbone.channels(), &mut rng)?;
        let mut fcb = BTreeMap::new();
        if config.use_fcb {
            for level in Level::ALL {
                fcb.insert(level, Fcb::new(&mut store, &format!("fcb.{level}"), &FcbConfig::default(), &mut rng)?);
            }
        }
        let bcd = Bcd::new(&mut store, "bcd", config.bcd(), &mut rng)?;
        let head = |store: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| {
            Conv2d::new(store, &name, (PYRAMID_CHANNELS, 1), ConvGeometry::same(3, 1), true, rng)
        };
        let mut dominant = Vec::new();
        let mut auxiliary = BTreeMap::new();
        for stage in bcd.stages() {
            dominant.push(head(&mut store, format!("head.dominant{}", stage.index()), &mut rng)?);
            auxiliary.insert(stage.top(), head(&mut store, format!("head.aux_{}", stage.top()), &mut rng)?);
        }
        Ok(Self {
            config,
            store,
            backbone,
            squeeze,
            fcb,
            bcd,
            heads: Heads { dominant, auxiliary },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn fcb(&self, level: Level) -> Option<&Fcb> {
        self.fcb.get(&level)
    }

    pub fn bcd(&self) -> &Bcd {
        &self.bcd
    }

    fn input(&self, graph: &Graph, image: &Tensor) -> Result<Var> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Structure(format!("expected a 3-channel image batch, got {c} channels")));
        }
        check_input_size(h, w)?;
        Ok(match self.config.normalization() {
            None => graph.constant(image.clone()),
            Some((mean, std)) => {
                let plane = h * w;
                let mut t = image.clone();
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    let ch = (i / plane) % 3;
                    *v = (*v - mean[ch]) / std[ch];
                }
                graph.constant(t)
            }
        })
    }

    /// Raw backbone pyramid for an `N×3×H×W` image batch.
    pub fn encode(&self, graph: &Graph, image: &Tensor) -> Result<FeaturePyramid> {
        let x = self.input(graph, image)?;
        self.backbone.encode(Ctx::new(graph, &self.store), &x)
    }

    /// Decoder streams before the heads.
    pub fn streams(&self, graph: &Graph, image: &Tensor) -> Result<StreamBundle> {
        let ctx = Ctx::new(graph, &self.store);
        let raw = self.encode(graph, image)?;
        let mut pyramid = self.squeeze.forward(ctx, &raw)?;
        for (level, block) in &self.fcb {
            let refined = block.forward(ctx, pyramid.get(*level)?)?;
            pyramid.replace(*level, refined)?;
        }
        self.bcd.forward(ctx, &pyramid)
    }

    pub fn forward(&self, graph: &Graph, image: &Tensor) -> Result<Predictions> {
        let ctx = Ctx::new(graph, &self.store);
        let (_, _, h, w) = image.dims4()?;
        let streams = self.streams(graph, image)?;
        let logits = |head: &Conv2d, map: &FeatureMap| -> Result<Var> {
            let y = head.forward(ctx, map.var())?;
            Ok(graph.resize(&y, h, w)?)
        };
        let dominant = self
            .heads
            .dominant
            .iter()
            .zip(&streams.dominant)
            .map(|(head, map)| logits(head, map))
            .collect::<Result<_>>()?;
        let mut auxiliary = BTreeMap::new();
        for (level, head) in &self.heads.auxiliary {
            let map = streams
                .auxiliary
                .get(level)
                .ok_or_else(|| Error::Structure(format!("missing auxiliary stream for level {}", level.index())))?;
            auxiliary.insert(*level, logits(head, map)?);
        }
        Ok(Predictions { dominant, auxiliary })
    }

    /// Saliency in `[0, 1]` from the final dominant stream, evaluated in inference mode.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let graph = Graph::inference();
        let preds = self.forward(&graph, image)?;
        Ok(preds.last_dominant().value().map(sigmoid))
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
