//! Bi-directional cascade decoder.
//!
//! Stage `s` (1-based) works on levels `2..=6-s`. It runs a top-down DCM pass
//! followed by a bottom-up pass. The finest level after the top-down pass is
//! the stage's dominant output; the coarsest level after the bottom-up pass is
//! its auxiliary output; the levels in between seed the next stage.

use std::collections::BTreeMap;

use lc3net_tensor::ParamStore;
use rand::Rng;

use crate::dcm::{DcmDirection, DcmPass};
use crate::error::{Error, Result};
use crate::feature::{Ctx, FeatureMap, FeaturePyramid, Level};

pub const MAX_STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BcdConfig {
    pub stages: usize,
    pub use_up: bool,
    pub use_down: bool,
}

impl Default for BcdConfig {
    fn default() -> Self {
        Self {
            stages: MAX_STAGES,
            use_up: true,
            use_down: true,
        }
    }
}

impl BcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STAGES).contains(&self.stages) {
            return Err(Error::Config(format!(
                "number of decoder stages must be in 1..={MAX_STAGES}, got {}",
                self.stages
            )));
        }
        Ok(())
    }
}

/// Highest level processed by stage `stage` (1-based).
pub fn stage_top(stage: usize) -> Result<Level> {
    if !(1..=MAX_STAGES).contains(&stage) {
        return Err(Error::Config(format!("stage {stage} out of range 1..={MAX_STAGES}")));
    }
    Level::new((6 - stage) as u8)
}

#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub level2_out: FeatureMap,
    pub intermediates: BTreeMap<Level, FeatureMap>,
    pub top_out: FeatureMap,
}

impl StageOutputs {
    /// Input pyramid for the following stage.
    pub fn next_input(&self) -> Result<FeaturePyramid> {
        let mut map = self.intermediates.clone();
        map.insert(Level::L2, self.level2_out.clone());
        FeaturePyramid::new(map)
    }
}

#[derive(Clone, Debug)]
pub struct BcdStage {
    index: usize,
    top: Level,
    up: DcmPass,
    down: DcmPass,
}

impl BcdStage {
    pub fn new(store: &mut ParamStore, name: &str, index: usize, config: &BcdConfig, rng: &mut impl Rng) -> Result<Self> {
        let top = stage_top(index)?;
        let range = (Level::L2, top);
        let up = DcmPass::new(store, &format!("{name}.up"), DcmDirection::Up, range, config.use_up, rng)?;
        let down = DcmPass::new(store, &format!("{name}.down"), DcmDirection::Down, range, config.use_down, rng)?;
        Ok(Self { index, top, up, down })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn top(&self) -> Level {
        self.top
    }

    pub fn up(&self) -> &DcmPass {
        &self.up
    }

    pub fn down(&self) -> &DcmPass {
        &self.down
    }

    pub fn forward(&self, ctx: Ctx<'_>, input: &FeaturePyramid) -> Result<StageOutputs> {
        let levels: Vec<Level> = input.levels().collect();
        let expected: Vec<Level> = Level::range(Level::L2, self.top).collect();
        if levels != expected {
            return Err(Error::Structure(format!(
                "stage {} expects levels {:?}, got {:?}",
                self.index,
                expected.iter().map(|l| l.index()).collect::<Vec<_>>(),
                levels.iter().map(|l| l.index()).collect::<Vec<_>>()
            )));
        }
        let after_up = self.up.forward(ctx, input)?;
        let level2_out = after_up.get(Level::L2)?.clone();
        let after_down = self.down.forward(ctx, &after_up)?;
        let top_out = after_down.get(self.top)?.clone();
        let intermediates = after_down
            .iter()
            .filter(|(l, _)| **l > Level::L2 && **l < self.top)
            .map(|(l, m)| (*l, m.clone()))
            .collect();
        Ok(StageOutputs {
            level2_out,
            intermediates,
            top_out,
        })
    }
}

/// Dominant (finest-level) and auxiliary (coarsest-level) outputs of every stage.
#[derive(Clone, Debug)]
pub struct StreamBundle {
    pub dominant: Vec<FeatureMap>,
    pub auxiliary: BTreeMap<Level, FeatureMap>,
}

#[derive(Clone, Debug)]
pub struct Bcd {
    config: BcdConfig,
    stages: Vec<BcdStage>,
}

impl Bcd {
    pub fn new(store: &mut ParamStore, name: &str, config: BcdConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stages = (1..=config.stages)
            .map(|s| BcdStage::new(store, &format!("{name}.stage{s}"), s, &config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &BcdConfig {
        &self.config
    }

    pub fn stages(&self) -> &[BcdStage] {
        &self.stages
    }

    pub fn forward(&self, ctx: Ctx<'_>, pyramid: &FeaturePyramid) -> Result<StreamBundle> {
        let mut input = pyramid.slice(Level::L2, Level::L5)?;
        let mut dominant = Vec::with_capacity(self.stages.len());
        let mut auxiliary = BTreeMap::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let out = stage.forward(ctx, &input)?;
            if i + 1 < self.stages.len() {
                input = out.next_input()?;
            }
            dominant.push(out.level2_out);
            auxiliary.insert(stage.top(), out.top_out);
        }
        Ok(StreamBundle { dominant, auxiliary })
    }
}
