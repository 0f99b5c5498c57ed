//! Filterable convolution block: five parallel two-step dilated branches whose
//! outputs are concatenated and fused back to 64 channels.

use lc3net_tensor::ParamStore;
use rand::Rng;

use crate::error::{Error, Result};
use crate::feature::{Ctx, FeatureMap, Gamma, GammaSpec, PYRAMID_CHANNELS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcbConfig {
    /// Step-one kernel sizes (dilation 1), ascending.
    pub branch_kernels: [usize; 5],
    /// Step-two dilation rates (kernel 3).
    pub branch_dilations: [usize; 5],
    pub channels: usize,
}

impl Default for FcbConfig {
    fn default() -> Self {
        Self {
            branch_kernels: [1, 3, 5, 7, 9],
            branch_dilations: [1, 3, 5, 7, 9],
            channels: PYRAMID_CHANNELS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FcbBranch {
    kernel: usize,
    dilation: usize,
    step1: Gamma,
    step2: Gamma,
}

impl FcbBranch {
    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Receptive field of the two stacked convolutions: `k + 2·d`.
    pub fn receptive_field(&self) -> usize {
        let first = self.step1.spec();
        let second = self.step2.spec();
        1 + (first.kernel - 1) * first.dilation + (second.kernel - 1) * second.dilation
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: &FeatureMap) -> Result<FeatureMap> {
        let y = self.step1.forward_map(ctx, x)?;
        self.step2.forward_map(ctx, &y)
    }
}

#[derive(Clone, Debug)]
pub struct Fcb {
    channels: usize,
    branches: Vec<FcbBranch>,
    fuse: Gamma,
}

impl Fcb {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FcbConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let mut branches = Vec::with_capacity(5);
        for (&k, &d) in cfg.branch_kernels.iter().zip(&cfg.branch_dilations) {
            let prefix = format!("{name}.branch_k{k}");
            branches.push(FcbBranch {
                kernel: k,
                dilation: d,
                step1: Gamma::new(store, &format!("{prefix}.step1"), GammaSpec::new(c, c, k, 1), rng)?,
                step2: Gamma::new(store, &format!("{prefix}.step2"), GammaSpec::new(c, c, 3, d), rng)?,
            });
        }
        branches.sort_by_key(|b| b.kernel);
        let fuse = Gamma::new(
            store,
            &format!("{name}.fuse"),
            GammaSpec::new(c * branches.len(), c, 3, 1),
            rng,
        )?;
        Ok(Self {
            channels: c,
            branches,
            fuse,
        })
    }

    pub fn branches(&self) -> &[FcbBranch] {
        &self.branches
    }

    pub fn branch(&self, kernel: usize) -> Result<&FcbBranch> {
        self.branches
            .iter()
            .find(|b| b.kernel == kernel)
            .ok_or_else(|| Error::Config(format!("no FCB branch with kernel {kernel}")))
    }

    fn check(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::Config(format!(
                "FCB expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Runs the single branch whose step-one kernel is `kernel`.
    pub fn forward_branch(&self, ctx: Ctx<'_>, x: &FeatureMap, kernel: usize) -> Result<FeatureMap> {
        self.check(x)?;
        self.branch(kernel)?.forward(ctx, x)
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: &FeatureMap) -> Result<FeatureMap> {
        self.check(x)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(ctx, x))
            .collect::<Result<Vec<_>>>()?;
        let vars: Vec<_> = outs.iter().map(FeatureMap::var).collect();
        let cat = FeatureMap::new(ctx.graph.concat(&vars)?, x.stride())?;
        self.fuse.forward_map(ctx, &cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lc3net_tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block() -> (ParamStore, Fcb) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let fcb = Fcb::new(&mut store, "fcb", &FcbConfig::default(), &mut rng).unwrap();
        (store, fcb)
    }

    fn input(g: &Graph, shape: [usize; 4], stride: usize) -> FeatureMap {
        let t = Tensor::from_fn(shape.to_vec(), |i| ((i * 31 % 97) as f32 / 97.0) - 0.5);
        FeatureMap::new(g.constant(t), stride).unwrap()
    }

    #[test]
    fn receptive_fields() {
        let (_, fcb) = block();
        let rf: Vec<usize> = fcb.branches().iter().map(FcbBranch::receptive_field).collect();
        assert_eq!(rf, vec![3, 9, 15, 21, 27]);
        assert_eq!(fcb.branch(1).unwrap().receptive_field(), 3);
        assert_eq!(fcb.branch(9).unwrap().receptive_field(), 27);
        assert!(matches!(fcb.branch(4), Err(Error::Config(_))));
    }

    #[test]
    fn branches_and_block_preserve_shape() {
        let (store, fcb) = block();
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let x = input(&g, [1, 64, 20, 20], 4);
        for k in [1, 3, 5, 7, 9] {
            assert_eq!(fcb.forward_branch(ctx, &x, k).unwrap().dims(), (1, 64, 20, 20));
        }
        let y = fcb.forward(ctx, &input(&g, [2, 64, 11, 11], 32)).unwrap();
        assert_eq!((y.dims(), y.stride()), ((2, 64, 11, 11), 32));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let (store, fcb) = block();
        let g = Graph::inference();
        let x = input(&g, [1, 32, 9, 9], 4);
        assert!(matches!(fcb.forward(Ctx::new(&g, &store), &x), Err(Error::Config(_))));
    }
}
