//! Small pre-norm ViT: patch 4, width 64, 4 blocks, 4 heads, class token.

use rand::Rng;

use crate::error::{CassError, Result};
use crate::nn::act::GeluCache;
use crate::nn::attention::MhaCache;
use crate::nn::linear::LinearCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::store::normal_tensor;
use crate::nn::{Gelu, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::Tensor;

use super::{ArmSpec, TapFlags};

const PATCH: usize = 4;
const WIDTH: usize = 64;
const DEPTH: usize = 4;
const HEADS: usize = 4;
const MLP_HIDDEN: usize = 128;

struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockCache {
    norm1: LayerNormCache,
    attn: MhaCache,
    norm2: LayerNormCache,
    fc1: LinearCache,
    gelu: GeluCache,
    fc2: LinearCache,
}

pub struct VitTiny {
    pub store: ParamStore,
    cls: crate::nn::ParamId,
    pos: crate::nn::ParamId,
    patch_embed: Linear,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
    tokens: usize,
    grid: (usize, usize),
}

pub struct VitTinyCache {
    patch_embed: LinearCache,
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
    head: LinearCache,
    batch: usize,
}

impl VitTiny {
    pub fn new<R: Rng>(rng: &mut R, spec: &ArmSpec) -> Result<Self> {
        let (h, w) = spec.input_hw;
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(CassError::Contract(format!(
                "input {h}x{w} not divisible by patch size {PATCH}"
            )));
        }
        let grid = (h / PATCH, w / PATCH);
        let tokens = grid.0 * grid.1 + 1;

        let mut store = ParamStore::new();
        let cls = store.add("cls_token", normal_tensor(rng, &[1, 1, WIDTH], 0.02));
        let pos = store.add("pos_embed", normal_tensor(rng, &[tokens, WIDTH], 0.02));
        let patch_dim = 3 * PATCH * PATCH;
        let patch_embed = Linear::new_with_std(&mut store, rng, "patch_embed", patch_dim, WIDTH, 0.02);
        let mut blocks = Vec::new();
        for l in 1..=DEPTH {
            blocks.push(Block {
                norm1: LayerNorm::new(&mut store, &format!("block{l}.norm1"), WIDTH),
                attn: MultiHeadAttention::new(&mut store, rng, &format!("block{l}.attn"), WIDTH, HEADS),
                norm2: LayerNorm::new(&mut store, &format!("block{l}.norm2"), WIDTH),
                fc1: Linear::new_with_std(&mut store, rng, &format!("block{l}.mlp.fc1"), WIDTH, MLP_HIDDEN, 0.02),
                fc2: Linear::new_with_std(&mut store, rng, &format!("block{l}.mlp.fc2"), MLP_HIDDEN, WIDTH, 0.02),
            });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", WIDTH);
        let head = Linear::new_with_std(&mut store, rng, "head", WIDTH, spec.head_dim, 0.02);
        Ok(VitTiny {
            store,
            cls,
            pos,
            patch_embed,
            blocks,
            final_norm,
            head,
            tokens,
            grid,
        })
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    fn patchify(&self, x: &Tensor) -> Tensor {
        let (b, _, h, w) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        );
        let (gh, gw) = self.grid;
        let patch_dim = 3 * PATCH * PATCH;
        let n = gh * gw;
        let mut out = Tensor::zeros(&[b * n, patch_dim]);
        for img in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    let row_idx = img * n + py * gw + px;
                    let row = &mut out.data_mut()[row_idx * patch_dim..(row_idx + 1) * patch_dim];
                    let mut f = 0;
                    for c in 0..3 {
                        for dy in 0..PATCH {
                            let iy = py * PATCH + dy;
                            for dx in 0..PATCH {
                                let ix = px * PATCH + dx;
                                row[f] = x.data()[((img * 3 + c) * h + iy) * w + ix];
                                f += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(logits, cache, attention_taps)`.
    pub fn forward(
        &self,
        x: &Tensor,
        taps: TapFlags,
    ) -> (Tensor, VitTinyCache, Vec<(String, Tensor)>) {
        let b = x.shape()[0];
        let n = self.tokens - 1;

        let patches = self.patchify(x);
        let (embedded, patch_cache) = self.patch_embed.forward(&self.store, &patches);

        // Assemble (B, tokens, WIDTH): class token first, then patches,
        // plus the learned position table.
        let mut seq = Tensor::zeros(&[b, self.tokens, WIDTH]);
        let cls = self.store.value(self.cls).data();
        let pos = self.store.value(self.pos).data();
        for img in 0..b {
            let base = img * self.tokens * WIDTH;
            for j in 0..WIDTH {
                seq.data_mut()[base + j] = cls[j] + pos[j];
            }
            for t in 0..n {
                let src = &embedded.data()[(img * n + t) * WIDTH..(img * n + t + 1) * WIDTH];
                let dst = &mut seq.data_mut()
                    [base + (t + 1) * WIDTH..base + (t + 2) * WIDTH];
                let pos_row = &pos[(t + 1) * WIDTH..(t + 2) * WIDTH];
                for j in 0..WIDTH {
                    dst[j] = src[j] + pos_row[j];
                }
            }
        }

        let mut block_caches = Vec::with_capacity(DEPTH);
        let mut attn_taps = Vec::new();
        let mut cur = seq;
        for (l, block) in self.blocks.iter().enumerate() {
            let (a, norm1) = block.norm1.forward(&self.store, &cur);
            let (attn_out, attn_cache) = block.attn.forward(&self.store, &a);
            let mut x1 = cur;
            for (o, &v) in x1.data_mut().iter_mut().zip(attn_out.data()) {
                *o += v;
            }
            let (m, norm2) = block.norm2.forward(&self.store, &x1);
            let m_flat = m.reshape(&[b * self.tokens, WIDTH]).expect("contiguous");
            let (h1, fc1) = block.fc1.forward(&self.store, &m_flat);
            let (h2, gelu) = Gelu.forward(&h1);
            let (h3, fc2) = block.fc2.forward(&self.store, &h2);
            let mut x2 = x1;
            for (o, &v) in x2.data_mut().iter_mut().zip(h3.data()) {
                *o += v;
            }
            if taps.attention {
                attn_taps.push((format!("block{}", l + 1), attn_cache.attention().clone()));
            }
            block_caches.push(BlockCache {
                norm1,
                attn: attn_cache,
                norm2,
                fc1,
                gelu,
                fc2,
            });
            cur = x2;
        }

        let (normed, final_norm) = self.final_norm.forward(&self.store, &cur);
        let mut cls_feats = Tensor::zeros(&[b, WIDTH]);
        for img in 0..b {
            let src = &normed.data()[img * self.tokens * WIDTH..img * self.tokens * WIDTH + WIDTH];
            cls_feats.data_mut()[img * WIDTH..(img + 1) * WIDTH].copy_from_slice(src);
        }
        let (logits, head_cache) = self.head.forward(&self.store, &cls_feats);
        (
            logits,
            VitTinyCache {
                patch_embed: patch_cache,
                blocks: block_caches,
                final_norm,
                head: head_cache,
                batch: b,
            },
            attn_taps,
        )
    }

    pub fn backward(&mut self, cache: &VitTinyCache, grad_logits: &Tensor) {
        let b = cache.batch;
        let n = self.tokens - 1;

        let g_cls_feats = self.head.backward(&mut self.store, &cache.head, grad_logits);
        let mut g_normed = Tensor::zeros(&[b, self.tokens, WIDTH]);
        for img in 0..b {
            let dst = &mut g_normed.data_mut()
                [img * self.tokens * WIDTH..img * self.tokens * WIDTH + WIDTH];
            dst.copy_from_slice(&g_cls_feats.data()[img * WIDTH..(img + 1) * WIDTH]);
        }
        let mut g = self
            .final_norm
            .backward(&mut self.store, &cache.final_norm, &g_normed);

        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            // MLP branch
            let g_flat = g
                .clone()
                .reshape(&[b * self.tokens, WIDTH])
                .expect("contiguous");
            let g_h3 = block.fc2.backward(&mut self.store, &bc.fc2, &g_flat);
            let g_h2 = Gelu.backward(&bc.gelu, &g_h3);
            let g_m = block.fc1.backward(&mut self.store, &bc.fc1, &g_h2);
            let g_m = g_m.reshape(&[b, self.tokens, WIDTH]).expect("contiguous");
            let g_x1_mlp = block.norm2.backward(&mut self.store, &bc.norm2, &g_m);
            let mut g_x1 = g;
            for (o, &v) in g_x1.data_mut().iter_mut().zip(g_x1_mlp.data()) {
                *o += v;
            }

            // Attention branch
            let g_a = block.attn.backward(&mut self.store, &bc.attn, &g_x1);
            let g_x_attn = block.norm1.backward(&mut self.store, &bc.norm1, &g_a);
            let mut g_x = g_x1;
            for (o, &v) in g_x.data_mut().iter_mut().zip(g_x_attn.data()) {
                *o += v;
            }
            g = g_x;
        }

        // Split the sequence gradient into class-token, position, and patch
        // contributions.
        let mut g_cls = vec![0.0; WIDTH];
        let mut g_pos = vec![0.0; self.tokens * WIDTH];
        let mut g_embedded = Tensor::zeros(&[b * n, WIDTH]);
        for img in 0..b {
            let base = img * self.tokens * WIDTH;
            for j in 0..WIDTH {
                let gv = g.data()[base + j];
                g_cls[j] += gv;
                g_pos[j] += gv;
            }
            for t in 0..n {
                for j in 0..WIDTH {
                    let gv = g.data()[base + (t + 1) * WIDTH + j];
                    g_pos[(t + 1) * WIDTH + j] += gv;
                    g_embedded.data_mut()[(img * n + t) * WIDTH + j] = gv;
                }
            }
        }
        for (acc, v) in self.store.grad_mut(self.cls).data_mut().iter_mut().zip(&g_cls) {
            *acc += v;
        }
        for (acc, v) in self.store.grad_mut(self.pos).data_mut().iter_mut().zip(&g_pos) {
            *acc += v;
        }
        self.patch_embed
            .backward(&mut self.store, &cache.patch_embed, &g_embedded);
    }
}
