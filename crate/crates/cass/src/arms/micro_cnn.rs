//! Four-stage strided CNN ending in a pooled linear head.

use rand::Rng;

use crate::nn::{Conv2d, GlobalAvgPool, GroupNorm, Linear, ParamStore, Relu};
use crate::nn::act::ReluCache;
use crate::nn::conv::Conv2dCache;
use crate::nn::linear::LinearCache;
use crate::nn::norm::GroupNormCache;
use crate::nn::pool::GlobalAvgPoolCache;
use crate::tensor::Tensor;

use super::{ArmSpec, TapFlags};

const CHANNELS: [usize; 4] = [16, 32, 64, 64];

struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
}

pub struct MicroCnn {
    pub store: ParamStore,
    stages: Vec<Stage>,
    head: Linear,
}

pub struct MicroCnnCache {
    convs: Vec<Conv2dCache>,
    norms: Vec<GroupNormCache>,
    relus: Vec<ReluCache>,
    pool: GlobalAvgPoolCache,
    head: LinearCache,
}

impl MicroCnn {
    pub fn new<R: Rng>(rng: &mut R, spec: &ArmSpec) -> Self {
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in CHANNELS.iter().enumerate() {
            let conv = Conv2d::new(&mut store, rng, &format!("stage{}.conv", i + 1), cin, cout, 3, 2, 1);
            let norm = GroupNorm::new(&mut store, &format!("stage{}.norm", i + 1), cout, 8);
            stages.push(Stage { conv, norm });
            cin = cout;
        }
        let head = Linear::new(&mut store, rng, "head", cin, spec.head_dim);
        MicroCnn { store, stages, head }
    }

    /// Returns `(logits, cache, feature_map_taps)`.
    pub fn forward(
        &self,
        x: &Tensor,
        taps: TapFlags,
    ) -> (Tensor, MicroCnnCache, Vec<(String, Tensor)>) {
        let mut convs = Vec::with_capacity(self.stages.len());
        let mut norms = Vec::with_capacity(self.stages.len());
        let mut relus = Vec::with_capacity(self.stages.len());
        let mut maps = Vec::new();
        let mut cur = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let (c_out, c_cache) = stage.conv.forward(&self.store, &cur);
            let (n_out, n_cache) = stage.norm.forward(&self.store, &c_out);
            let (r_out, r_cache) = Relu.forward(&n_out);
            convs.push(c_cache);
            norms.push(n_cache);
            relus.push(r_cache);
            if taps.feature_maps {
                maps.push((format!("stage{}", i + 1), r_out.clone()));
            }
            cur = r_out;
        }
        let (pooled, pool_cache) = GlobalAvgPool.forward(&cur);
        let (logits, head_cache) = self.head.forward(&self.store, &pooled);
        (
            logits,
            MicroCnnCache {
                convs,
                norms,
                relus,
                pool: pool_cache,
                head: head_cache,
            },
            maps,
        )
    }

    pub fn backward(&mut self, cache: &MicroCnnCache, grad_logits: &Tensor) {
        let g_pooled = self.head.backward(&mut self.store, &cache.head, grad_logits);
        let mut g = GlobalAvgPool.backward(&cache.pool, &g_pooled);
        for i in (0..self.stages.len()).rev() {
            let g_relu = Relu.backward(&cache.relus[i], &g);
            let g_norm = self.stages[i]
                .norm
                .backward(&mut self.store, &cache.norms[i], &g_relu);
            g = self.stages[i]
                .conv
                .backward(&mut self.store, &cache.convs[i], &g_norm);
        }
    }
}
