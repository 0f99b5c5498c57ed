//! Dense cross module.
//!
//! For each updated level `i`, every source level (all higher levels for the
//! top-down mode, all lower levels for the bottom-up mode) is resized onto
//! level `i`'s grid and passed through its own Γ block; the results are merged
//! into one context map `ĉ`. The level is then rewritten as
//!
//! ```text
//! f'ᵢ = Γ(Concat(Γ(Γ(Γ(fᵢ) ⊗ ĉ) ⊕ fᵢ), ĉ))
//! ```
//!
//! Levels are updated one at a time and later updates see earlier results.

use lc3net_tensor::{Graph, ParamStore};
use rand::Rng;

use crate::error::{Error, Result};
use crate::feature::{elementwise, resize_to, Ctx, FeatureMap, FeaturePyramid, Gamma, GammaSpec, Level, PYRAMID_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DcmDirection {
    /// Top-down: higher levels flow into lower ones.
    Up,
    /// Bottom-up: lower levels flow into higher ones.
    Down,
}

impl DcmDirection {
    pub fn name(self) -> &'static str {
        match self {
            DcmDirection::Up => "up",
            DcmDirection::Down => "down",
        }
    }

    /// Levels updated by a pass over `low..=high`, in update order.
    pub fn update_order(self, low: Level, high: Level) -> Vec<Level> {
        match self {
            DcmDirection::Up => Level::range(low, high).rev().skip(1).collect(),
            DcmDirection::Down => Level::range(low, high).skip(1).collect(),
        }
    }

    /// Source levels feeding level `i` within `low..=high`.
    pub fn sources(self, i: Level, low: Level, high: Level) -> Vec<Level> {
        match self {
            DcmDirection::Up => Level::range(low, high).filter(|l| *l > i).collect(),
            DcmDirection::Down => Level::range(low, high).filter(|l| *l < i).collect(),
        }
    }
}

/// How several resized source maps collapse into one context map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    Product,
    Sum,
}

impl Aggregation {
    fn op(self) -> fn(&Graph, &lc3net_tensor::Var, &lc3net_tensor::Var) -> lc3net_tensor::Result<lc3net_tensor::Var> {
        match self {
            Aggregation::Product => Graph::mul,
            Aggregation::Sum => Graph::add,
        }
    }
}

/// The four Γ blocks of the multiply–add–concatenate fusion.
#[derive(Clone, Debug)]
pub struct DcmFuse {
    pre: Gamma,
    after_mul: Gamma,
    after_add: Gamma,
    out: Gamma,
}

impl DcmFuse {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let c = PYRAMID_CHANNELS;
        let spec = GammaSpec::new(c, c, 3, 1);
        Ok(Self {
            pre: Gamma::new(store, &format!("{name}.pre"), spec, rng)?,
            after_mul: Gamma::new(store, &format!("{name}.mul"), spec, rng)?,
            after_add: Gamma::new(store, &format!("{name}.add"), spec, rng)?,
            out: Gamma::new(store, &format!("{name}.out"), GammaSpec::new(2 * c, c, 3, 1), rng)?,
        })
    }

    /// Channel count entering the final Γ.
    pub fn concat_channels(&self) -> usize {
        self.out.spec().in_channels
    }

    pub fn forward(&self, ctx: Ctx<'_>, f: &FeatureMap, context: &FeatureMap) -> Result<FeatureMap> {
        if f.dims() != context.dims() {
            return Err(Error::Structure(format!(
                "DCM fusion needs aligned inputs, got {:?} and {:?}",
                f.dims(),
                context.dims()
            )));
        }
        let pre = self.pre.forward_map(ctx, f)?;
        let prod = elementwise(ctx, &pre, context, Graph::mul)?;
        let m = self.after_mul.forward_map(ctx, &prod)?;
        let sum = elementwise(ctx, &m, f, Graph::add)?;
        let a = self.after_add.forward_map(ctx, &sum)?;
        let cat = FeatureMap::new(ctx.graph.concat(&[a.var(), context.var()])?, f.stride())?;
        self.out.forward_map(ctx, &cat)
    }
}

/// Standalone fusion of a level with its context map.
pub fn dcm_fuse(ctx: Ctx<'_>, fuse: &DcmFuse, f: &FeatureMap, context: &FeatureMap) -> Result<FeatureMap> {
    fuse.forward(ctx, f, context)
}

/// Parameters used to update one level.
#[derive(Clone, Debug)]
pub struct DcmPosition {
    level: Level,
    sources: Vec<(Level, Gamma)>,
    fuse: DcmFuse,
}

impl DcmPosition {
    pub fn level(&self) -> Level {
        self.level
    }

    pub fn source_levels(&self) -> Vec<Level> {
        self.sources.iter().map(|(l, _)| *l).collect()
    }

    pub fn fuse(&self) -> &DcmFuse {
        &self.fuse
    }
}

/// One directional pass over a contiguous level range.
#[derive(Clone, Debug)]
pub struct DcmPass {
    direction: DcmDirection,
    low: Level,
    high: Level,
    aggregation: Aggregation,
    /// Empty when the pass is disabled (identity).
    positions: Vec<DcmPosition>,
    enabled: bool,
}

impl DcmPass {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        direction: DcmDirection,
        (low, high): (Level, Level),
        enabled: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if high <= low {
            return Err(Error::Structure(format!(
                "a DCM pass needs at least two levels, got {}..={}",
                low.index(),
                high.index()
            )));
        }
        let mut positions = Vec::new();
        if enabled {
            for level in direction.update_order(low, high) {
                let prefix = format!("{name}.{level}");
                let mut sources = Vec::new();
                for src in direction.sources(level, low, high) {
                    let spec = GammaSpec::new(PYRAMID_CHANNELS, PYRAMID_CHANNELS, 3, 1);
                    sources.push((src, Gamma::new(store, &format!("{prefix}.src_{src}"), spec, rng)?));
                }
                let fuse = DcmFuse::new(store, &format!("{prefix}.fuse"), rng)?;
                positions.push(DcmPosition { level, sources, fuse });
            }
        }
        Ok(Self {
            direction,
            low,
            high,
            aggregation: Aggregation::default(),
            positions,
            enabled,
        })
    }

    pub fn direction(&self) -> DcmDirection {
        self.direction
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn positions(&self) -> &[DcmPosition] {
        &self.positions
    }

    pub fn set_aggregation(&mut self, aggregation: Aggregation) {
        self.aggregation = aggregation;
    }

    /// The level left untouched by this pass.
    pub fn boundary(&self) -> Level {
        match self.direction {
            DcmDirection::Up => self.high,
            DcmDirection::Down => self.low,
        }
    }

    fn position(&self, level: Level) -> Result<&DcmPosition> {
        self.positions
            .iter()
            .find(|p| p.level == level)
            .ok_or_else(|| Error::Structure(format!("level {} has no {} sources", level.index(), self.direction.name())))
    }

    /// Context map for `level` built from the pyramid's current values.
    pub fn build_fused_context(&self, ctx: Ctx<'_>, pyramid: &FeaturePyramid, level: Level) -> Result<FeatureMap> {
        let pos = self.position(level)?;
        let target = pyramid.get(level)?;
        let mut acc: Option<FeatureMap> = None;
        for (src, block) in &pos.sources {
            let resized = resize_to(ctx, pyramid.get(*src)?, target)?;
            let term = block.forward_map(ctx, &resized)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => elementwise(ctx, &prev, &term, self.aggregation.op())?,
            });
        }
        acc.ok_or_else(|| Error::Structure(format!("level {} has no source levels", level.index())))
    }

    pub fn forward(&self, ctx: Ctx<'_>, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        if pyramid.len() < 2 {
            return Err(Error::Structure("a DCM pass needs at least two pyramid levels".into()));
        }
        if pyramid.lowest() != Some(self.low) || pyramid.highest() != Some(self.high) {
            return Err(Error::Structure(format!(
                "pass built for levels {}..={} applied to {:?}..={:?}",
                self.low.index(),
                self.high.index(),
                pyramid.lowest().map(Level::index),
                pyramid.highest().map(Level::index)
            )));
        }
        let mut out = pyramid.clone();
        for pos in &self.positions {
            let context = self.build_fused_context(ctx, &out, pos.level)?;
            let updated = pos.fuse.forward(ctx, out.get(pos.level)?, &context)?;
            out.replace(pos.level, updated)?;
        }
        Ok(out)
    }
}

/// Applies `pass` to `pyramid`.
pub fn dcm_pass(ctx: Ctx<'_>, pass: &DcmPass, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
    pass.forward(ctx, pyramid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lc3net_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn pyramid(g: &Graph, levels: &[Level], base: usize) -> FeaturePyramid {
        let mut map = BTreeMap::new();
        for &l in levels {
            let s = base * 4 / l.stride();
            let t = Tensor::from_fn(vec![1, 64, s, s], |i| ((i * 13 + l.index() as usize) % 29) as f32 / 29.0);
            map.insert(l, FeatureMap::new(g.constant(t), l.stride()).unwrap());
        }
        FeaturePyramid::new(map).unwrap()
    }

    #[test]
    fn update_orders_and_sources() {
        assert_eq!(DcmDirection::Up.update_order(Level::L2, Level::L5), vec![Level::L4, Level::L3, Level::L2]);
        assert_eq!(DcmDirection::Down.update_order(Level::L2, Level::L5), vec![Level::L3, Level::L4, Level::L5]);
        assert_eq!(DcmDirection::Up.update_order(Level::L2, Level::L3), vec![Level::L2]);
        assert_eq!(DcmDirection::Up.sources(Level::L4, Level::L2, Level::L5), vec![Level::L5]);
        assert_eq!(
            DcmDirection::Up.sources(Level::L2, Level::L2, Level::L5),
            vec![Level::L3, Level::L4, Level::L5]
        );
        assert_eq!(
            DcmDirection::Down.sources(Level::L5, Level::L2, Level::L5),
            vec![Level::L2, Level::L3, Level::L4]
        );
    }

    #[test]
    fn pass_preserves_shapes_and_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let up = DcmPass::new(&mut store, "up", DcmDirection::Up, (Level::L2, Level::L5), true, &mut rng).unwrap();
        let down = DcmPass::new(&mut store, "down", DcmDirection::Down, (Level::L2, Level::L5), true, &mut rng).unwrap();
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let p = pyramid(&g, &Level::ALL, 16);
        for pass in [&up, &down] {
            let out = dcm_pass(ctx, pass, &p).unwrap();
            assert_eq!(out.len(), 4);
            for (l, m) in out.iter() {
                let orig = p.get(*l).unwrap();
                assert_eq!((m.dims(), m.stride()), (orig.dims(), orig.stride()));
                if *l == pass.boundary() {
                    assert_eq!(m.value().data(), orig.value().data());
                } else {
                    assert!(m.value().min() >= 0.0);
                }
            }
        }
    }

    #[test]
    fn context_members_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let up = DcmPass::new(&mut store, "up", DcmDirection::Up, (Level::L2, Level::L5), true, &mut rng).unwrap();
        let down = DcmPass::new(&mut store, "down", DcmDirection::Down, (Level::L2, Level::L5), true, &mut rng).unwrap();
        let members: Vec<_> = up.positions().iter().map(|p| (p.level(), p.source_levels().len())).collect();
        assert_eq!(members, vec![(Level::L4, 1), (Level::L3, 2), (Level::L2, 3)]);
        let last = down.positions().last().unwrap();
        assert_eq!(last.source_levels(), vec![Level::L2, Level::L3, Level::L4]);
        assert_eq!(last.fuse().concat_channels(), 128);

        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let p = pyramid(&g, &Level::ALL, 88);
        let c2 = up.build_fused_context(ctx, &p, Level::L2).unwrap();
        assert_eq!(c2.dims(), (1, 64, 88, 88));
        let c5 = down.build_fused_context(ctx, &p, Level::L5).unwrap();
        assert_eq!(c5.dims(), (1, 64, 11, 11));
        // the boundary level has no sources
        assert!(up.build_fused_context(ctx, &p, Level::L5).is_err());
    }

    #[test]
    fn zero_context_zeroes_the_product_term() {
        let g = Graph::inference();
        let a = g.constant(Tensor::full(vec![1, 64, 4, 4], 0.7));
        let z = g.constant(Tensor::zeros(vec![1, 64, 4, 4]));
        let prod = g.mul(&a, &z).unwrap();
        assert!(prod.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fusion_rejects_misaligned_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let fuse = DcmFuse::new(&mut store, "f", &mut rng).unwrap();
        let g = Graph::inference();
        let p = pyramid(&g, &[Level::L3, Level::L4], 16);
        let ctx = Ctx::new(&g, &store);
        let r = dcm_fuse(ctx, &fuse, p.get(Level::L3).unwrap(), p.get(Level::L4).unwrap());
        assert!(matches!(r, Err(Error::Structure(_))));
        let ok = dcm_fuse(ctx, &fuse, p.get(Level::L4).unwrap(), p.get(Level::L4).unwrap()).unwrap();
        assert_eq!(ok.dims(), (1, 64, 4, 4));
    }

    #[test]
    fn minimal_and_disabled_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let up = DcmPass::new(&mut store, "up", DcmDirection::Up, (Level::L2, Level::L3), true, &mut rng).unwrap();
        assert_eq!(up.positions().len(), 1);
        let before = store.num_trainable();
        let off = DcmPass::new(&mut store, "off", DcmDirection::Up, (Level::L2, Level::L5), false, &mut rng).unwrap();
        assert_eq!(store.num_trainable(), before);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let p = pyramid(&g, &[Level::L2, Level::L3], 16);
        let out = up.forward(ctx, &p).unwrap();
        assert_eq!(out.get(Level::L3).unwrap().value(), p.get(Level::L3).unwrap().value());
        assert_ne!(out.get(Level::L2).unwrap().value(), p.get(Level::L2).unwrap().value());
        let full = pyramid(&g, &Level::ALL, 16);
        let same = off.forward(ctx, &full).unwrap();
        for (l, m) in same.iter() {
            assert!(m.var().same_value(full.get(*l).unwrap().var()));
        }
        assert!(DcmPass::new(&mut store, "bad", DcmDirection::Up, (Level::L3, Level::L3), true, &mut rng).is_err());
    }
}
