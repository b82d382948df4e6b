//! Small residual CNN: a stem plus four stages of two basic blocks.

use rand::Rng;

use crate::nn::act::ReluCache;
use crate::nn::conv::Conv2dCache;
use crate::nn::linear::LinearCache;
use crate::nn::norm::GroupNormCache;
use crate::nn::pool::GlobalAvgPoolCache;
use crate::nn::{Conv2d, GlobalAvgPool, GroupNorm, Linear, ParamStore, Relu};
use crate::tensor::Tensor;

use super::{ArmSpec, TapFlags};

const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];

struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

struct BlockCache {
    conv1: Conv2dCache,
    norm1: GroupNormCache,
    relu1: ReluCache,
    conv2: Conv2dCache,
    norm2: GroupNormCache,
    shortcut: Option<(Conv2dCache, GroupNormCache)>,
    relu_out: ReluCache,
}

impl BasicBlock {
    fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1);
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), cout, 8);
        let conv2 = Conv2d::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1);
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), cout, 8);
        let shortcut = if cin != cout || stride != 1 {
            let c = Conv2d::new(ps, rng, &format!("{name}.down"), cin, cout, 1, stride, 0);
            let n = GroupNorm::new(ps, &format!("{name}.down_norm"), cout, 8);
            Some((c, n))
        } else {
            None
        };
        BasicBlock { conv1, norm1, conv2, norm2, shortcut }
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, BlockCache) {
        let (c1, c1_cache) = self.conv1.forward(ps, x);
        let (n1, n1_cache) = self.norm1.forward(ps, &c1);
        let (r1, r1_cache) = Relu.forward(&n1);
        let (c2, c2_cache) = self.conv2.forward(ps, &r1);
        let (mut main, n2_cache) = self.norm2.forward(ps, &c2);

        let sc_cache = match &self.shortcut {
            Some((conv, norm)) => {
                let (s, s_conv) = conv.forward(ps, x);
                let (s, s_norm) = norm.forward(ps, &s);
                for (m, &sv) in main.data_mut().iter_mut().zip(s.data()) {
                    *m += sv;
                }
                Some((s_conv, s_norm))
            }
            None => {
                for (m, &sv) in main.data_mut().iter_mut().zip(x.data()) {
                    *m += sv;
                }
                None
            }
        };
        let (out, relu_out) = Relu.forward(&main);
        (
            out,
            BlockCache {
                conv1: c1_cache,
                norm1: n1_cache,
                relu1: r1_cache,
                conv2: c2_cache,
                norm2: n2_cache,
                shortcut: sc_cache,
                relu_out,
            },
        )
    }

    fn backward(&self, ps: &mut ParamStore, cache: &BlockCache, grad_out: &Tensor) -> Tensor {
        let g_sum = Relu.backward(&cache.relu_out, grad_out);
        let g_n2 = self.norm2.backward(ps, &cache.norm2, &g_sum);
        let g_c2 = self.conv2.backward(ps, &cache.conv2, &g_n2);
        let g_r1 = Relu.backward(&cache.relu1, &g_c2);
        let g_n1 = self.norm1.backward(ps, &cache.norm1, &g_r1);
        let mut g_in = self.conv1.backward(ps, &cache.conv1, &g_n1);

        match (&self.shortcut, &cache.shortcut) {
            (Some((conv, norm)), Some((c_cache, n_cache))) => {
                let g_sn = norm.backward(ps, n_cache, &g_sum);
                let g_sc = conv.backward(ps, c_cache, &g_sn);
                for (a, &b) in g_in.data_mut().iter_mut().zip(g_sc.data()) {
                    *a += b;
                }
            }
            (None, None) => {
                for (a, &b) in g_in.data_mut().iter_mut().zip(g_sum.data()) {
                    *a += b;
                }
            }
            _ => unreachable!("shortcut cache mirrors shortcut structure"),
        }
        g_in
    }
}

pub struct ResNetLike {
    pub store: ParamStore,
    stem_conv: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
}

pub struct ResNetLikeCache {
    stem_conv: Conv2dCache,
    stem_norm: GroupNormCache,
    stem_relu: ReluCache,
    blocks: Vec<BlockCache>,
    pool: GlobalAvgPoolCache,
    head: LinearCache,
}

impl ResNetLike {
    pub fn new<R: Rng>(rng: &mut R, spec: &ArmSpec) -> Self {
        let mut store = ParamStore::new();
        let stem_conv = Conv2d::new(&mut store, rng, "stem.conv", 3, STAGE_CHANNELS[0], 3, 1, 1);
        let stem_norm = GroupNorm::new(&mut store, "stem.norm", STAGE_CHANNELS[0], 8);
        let mut stages = Vec::new();
        let mut cin = STAGE_CHANNELS[0];
        for (s, &cout) in STAGE_CHANNELS.iter().enumerate() {
            let mut blocks = Vec::new();
            let stride = if s == 0 { 1 } else { 2 };
            blocks.push(BasicBlock::new(
                &mut store,
                rng,
                &format!("stage{}.block1", s + 1),
                cin,
                cout,
                stride,
            ));
            blocks.push(BasicBlock::new(
                &mut store,
                rng,
                &format!("stage{}.block2", s + 1),
                cout,
                cout,
                1,
            ));
            stages.push(blocks);
            cin = cout;
        }
        let head = Linear::new(&mut store, rng, "head", cin, spec.head_dim);
        ResNetLike { store, stem_conv, stem_norm, stages, head }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        taps: TapFlags,
    ) -> (Tensor, ResNetLikeCache, Vec<(String, Tensor)>) {
        let (c, stem_conv) = self.stem_conv.forward(&self.store, x);
        let (n, stem_norm) = self.stem_norm.forward(&self.store, &c);
        let (mut cur, stem_relu) = Relu.forward(&n);

        let mut blocks = Vec::new();
        let mut maps = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                let (out, cache) = block.forward(&self.store, &cur);
                blocks.push(cache);
                cur = out;
            }
            if taps.feature_maps {
                maps.push((format!("stage{}", s + 1), cur.clone()));
            }
        }
        let (pooled, pool) = GlobalAvgPool.forward(&cur);
        let (logits, head) = self.head.forward(&self.store, &pooled);
        (
            logits,
            ResNetLikeCache {
                stem_conv,
                stem_norm,
                stem_relu,
                blocks,
                pool,
                head,
            },
            maps,
        )
    }

    pub fn backward(&mut self, cache: &ResNetLikeCache, grad_logits: &Tensor) {
        let g_pooled = self.head.backward(&mut self.store, &cache.head, grad_logits);
        let mut g = GlobalAvgPool.backward(&cache.pool, &g_pooled);
        let mut idx = cache.blocks.len();
        for stage in self.stages.iter().rev() {
            for block in stage.iter().rev() {
                idx -= 1;
                g = block.backward(&mut self.store, &cache.blocks[idx], &g);
            }
        }
        let g = Relu.backward(&cache.stem_relu, &g);
        let g = self.stem_norm.backward(&mut self.store, &cache.stem_norm, &g);
        self.stem_conv.backward(&mut self.store, &cache.stem_conv, &g);
    }
}
