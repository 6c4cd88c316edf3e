//! Layers built on the autodiff graph: linear maps, layer norm, pre-norm
//! transformer blocks and block stacks.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::augment::drop_path_factors;
use crate::autodiff::{Graph, SeqLayout, Var};
use crate::params::{cast, ParamId, ParamStore, Scalar};

/// Per-evaluation switches: training mode, stochastic depth and frozen weights.
pub struct ForwardCtx {
    pub training: bool,
    /// Maximum stochastic-depth rate, reached at the deepest layer.
    pub drop_path: f64,
    /// Read every parameter as a constant.
    pub frozen: bool,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            drop_path: 0.0,
            frozen: false,
            rng: rand::SeedableRng::seed_from_u64(0),
        }
    }

    pub fn train(drop_path: f64, rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            drop_path,
            frozen: false,
            rng,
        }
    }

    pub fn load<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, id: ParamId) -> Var {
        if self.frozen {
            g.frozen_param(store, id)
        } else {
            g.param(store, id)
        }
    }
}

pub fn xavier_uniform<F: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid bounds");
    Array2::from_shape_fn((fan_in, fan_out), |_| cast(dist.sample(rng)))
}

pub fn normal_init<F: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| cast(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { weight, bias }
    }

    pub fn zeros<F: Scalar>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Array2::zeros((fan_in, fan_out)));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, ctx: &ForwardCtx, x: Var) -> Var {
        let w = ctx.load(g, store, self.weight);
        let b = ctx.load(g, store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, ctx: &ForwardCtx, x: Var) -> Var {
        let gamma = ctx.load(g, store, self.gamma);
        let beta = ctx.load(g, store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub hidden: usize,
    pub heads: usize,
    pub mlp: usize,
}

/// Pre-norm transformer block with a GELU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dims: BlockDims, rng: &mut impl Rng) -> Self {
        let d = dims.hidden;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, dims.mlp, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), dims.mlp, d, rng),
            heads: dims.heads,
        }
    }

    /// `drop_rate` is this block's stochastic-depth probability; it only
    /// applies when `ctx.training`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        x: Var,
        layout: SeqLayout,
        drop_rate: f64,
    ) -> Var {
        let h = self.norm1.forward(g, store, ctx, x);
        let qkv = self.qkv.forward(g, store, ctx, h);
        let a = g.attention(qkv, layout, self.heads);
        let a = self.proj.forward(g, store, ctx, a);
        let a = self.drop_path(g, ctx, a, layout, drop_rate);
        let x = g.add(x, a);

        let h = self.norm2.forward(g, store, ctx, x);
        let h = self.fc1.forward(g, store, ctx, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, ctx, h);
        let h = self.drop_path(g, ctx, h, layout, drop_rate);
        g.add(x, h)
    }

    fn drop_path<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ctx: &mut ForwardCtx,
        branch: Var,
        layout: SeqLayout,
        rate: f64,
    ) -> Var {
        if !ctx.training || rate <= 0.0 {
            return branch;
        }
        let factors = drop_path_factors(rate, layout.batch, &mut ctx.rng)
            .into_iter()
            .map(cast)
            .collect();
        g.segment_scale(branch, layout, factors)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::with_capacity(12);
        v.extend(self.norm1.params());
        v.extend(self.qkv.params());
        v.extend(self.proj.params());
        v.extend(self.norm2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }
}

/// Consecutive blocks. `depth_offset` is the absolute index of the first
/// block within the full network and drives the stochastic-depth ramp.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub depth_offset: usize,
    pub total_depth: usize,
}

impl Stack {
    /// Registers blocks named `{prefix}.layer{i}` for absolute indices
    /// `first..first + count`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dims: BlockDims,
        first: usize,
        count: usize,
        total_depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (first..first + count)
            .map(|i| Block::new(store, &format!("{prefix}.layer{i}"), dims, rng))
            .collect();
        Self {
            blocks,
            depth_offset: first,
            total_depth,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        mut x: Var,
        layout: SeqLayout,
    ) -> Var {
        for (i, block) in self.blocks.iter().enumerate() {
            let rate = layer_drop_rate(ctx.drop_path, self.depth_offset + i, self.total_depth);
            x = block.forward(g, store, ctx, x, layout, rate);
        }
        x
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}

/// Linear stochastic-depth ramp: 0 at the first layer, `max_rate` at the last.
pub fn layer_drop_rate(max_rate: f64, layer: usize, depth: usize) -> f64 {
    if depth <= 1 {
        max_rate
    } else {
        max_rate * layer as f64 / (depth - 1) as f64
    }
}
