//! Small vision transformer: 4x4 patch embedding, learned positional
//! embeddings, a classification token, three pre-norm attention blocks with
//! four heads, and a linear head on the final token embedding.

use super::ClassifierSpec;
use crate::nn::{
    gelu, Bound, Conv2d, Dropout, LayerNorm, Linear, Mode, MultiHeadAttention, ParamId,
    ParamStore,
};
use crate::tensor::{Tape, Value};
use rand_chacha::ChaCha8Rng;

struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct VitModel {
    patch: Conv2d,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    dropout: Dropout,
    embed_dim: usize,
    tokens: usize,
}

impl VitModel {
    pub fn build(spec: &ClassifierSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (c, h, w) = spec.input_shape;
        let p = spec.vit_patch;
        let d = spec.vit_embed_dim;
        let tokens = (h / p) * (w / p) + 1;
        let patch = Conv2d::new(store, rng, "vit.patch", c, d, p, p, 0);
        let cls_token = store.add("vit.cls", crate::nn::normal_init(&[1, 1, d], 0.02, rng), true);
        let pos_embed = store.add(
            "vit.pos",
            crate::nn::normal_init(&[1, tokens, d], 0.02, rng),
            true,
        );
        let hidden = d * spec.vit_mlp_ratio;
        let blocks = (0..spec.vit_depth)
            .map(|i| Block {
                ln1: LayerNorm::new(store, &format!("vit.b{i}.ln1"), d),
                attn: MultiHeadAttention::new(store, rng, &format!("vit.b{i}.attn"), d, spec.vit_heads),
                ln2: LayerNorm::new(store, &format!("vit.b{i}.ln2"), d),
                fc1: Linear::new(store, rng, &format!("vit.b{i}.fc1"), d, hidden),
                fc2: Linear::new(store, rng, &format!("vit.b{i}.fc2"), hidden, d),
            })
            .collect();
        let final_ln = LayerNorm::new(store, "vit.ln_f", d);
        let head = Linear::new(store, rng, "vit.head", d, spec.num_classes);
        Self {
            patch,
            cls_token,
            pos_embed,
            blocks,
            final_ln,
            head,
            dropout: Dropout::new(spec.dropout),
            embed_dim: d,
            tokens,
        }
    }

    /// Returns (logits, classification-token embedding).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        x: Value<'t>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Value<'t>, Value<'t>) {
        let b = x.shape()[0];
        let d = self.embed_dim;
        let t = self.tokens;

        // [B,C,H,W] -> [B,D,hp,wp] -> [B, hp*wp, D]
        let patches = self
            .patch
            .forward(bound, x)
            .reshape(&[b, d, t - 1])
            .permute(&[0, 2, 1]);
        let cls = bound.get(self.cls_token).broadcast_to(&[b, 1, d]);
        let mut seq = tape.concat(&[cls, patches], 1);
        seq = seq.add(bound.get(self.pos_embed));
        seq = self.dropout.forward(tape, seq, mode, rng.as_deref_mut());

        for blk in &self.blocks {
            let attended = blk.attn.forward(tape, bound, blk.ln1.forward(bound, seq));
            let attended = self.dropout.forward(tape, attended, mode, rng.as_deref_mut());
            seq = seq.add(attended);
            let normed = blk.ln2.forward(bound, seq).reshape(&[b * t, d]);
            let mlp = blk.fc2.forward(bound, gelu(blk.fc1.forward(bound, normed)));
            let mlp = self
                .dropout
                .forward(tape, mlp.reshape(&[b, t, d]), mode, rng.as_deref_mut());
            seq = seq.add(mlp);
        }

        let normed = self.final_ln.forward(bound, seq);
        let cls_embed = normed.slice_axis(1, 0, 1).reshape(&[b, d]);
        let logits = self.head.forward(bound, cls_embed);
        (logits, cls_embed)
    }

    pub fn feature_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }
}
