//! Patch-embedding transformer appearance encoder.
//!
//! A frame is cut into non-overlapping patches, linearly embedded, prefixed
//! with a learnable class token and summed with learnable positional
//! embeddings. Pre-norm transformer blocks (self-attention + GELU MLP, both
//! residual) refine the sequence; the class token after a final layer norm is
//! the appearance feature.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{trunc_normal, LayerNormLayer, LinearLayer, MultiHeadAttention};
use super::EncoderError;
use crate::tensor::ops::concat;
use crate::tensor::{ParamRegistry, Parameter, Scalar, Tape, TensorError, Var};

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
}

impl ViTConfig {
    /// The full-scale configuration: 224/16, 192-d, 12 blocks, 3 heads.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.image_size % self.patch_size != 0 {
            return Err(EncoderError::ConfigMismatch(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(EncoderError::ConfigMismatch(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

struct Block<T: Scalar> {
    ln1: LayerNormLayer<T>,
    attn: MultiHeadAttention<T>,
    ln2: LayerNormLayer<T>,
    fc1: LinearLayer<T>,
    fc2: LinearLayer<T>,
}

pub struct ViT<T: Scalar> {
    pub cfg: ViTConfig,
    patch_embed: LinearLayer<T>,
    cls_token: Parameter<T>,
    pos_embed: Parameter<T>,
    blocks: Vec<Block<T>>,
    final_norm: LayerNormLayer<T>,
}

impl<T: Scalar> ViT<T> {
    pub fn new(scope: &str, cfg: ViTConfig, rng: &mut ChaCha8Rng) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let patch_embed = LinearLayer::new(&format!("{scope}.patch_embed"), d, patch_dim, rng);
        let cls_token = Parameter::new(
            format!("{scope}.cls_token"),
            trunc_normal(&[1, 1, d], 0.02, rng),
        );
        let pos_embed = Parameter::new(
            format!("{scope}.pos_embed"),
            trunc_normal(&[1, cfg.num_patches() + 1, d], 0.02, rng),
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                let bs = format!("{scope}.blocks.{i}");
                Block {
                    ln1: LayerNormLayer::new(&format!("{bs}.ln1"), d),
                    attn: MultiHeadAttention::new(&format!("{bs}.attn"), d, cfg.heads, rng),
                    ln2: LayerNormLayer::new(&format!("{bs}.ln2"), d),
                    fc1: LinearLayer::new(&format!("{bs}.mlp.fc1"), cfg.mlp_hidden(), d, rng),
                    fc2: LinearLayer::new(&format!("{bs}.mlp.fc2"), d, cfg.mlp_hidden(), rng),
                }
            })
            .collect();
        let final_norm = LayerNormLayer::new(&format!("{scope}.norm"), d);
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            final_norm,
        })
    }

    /// x: [B, 3, S, S] -> class-token feature [B, embed_dim].
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, EncoderError> {
        let sh = x.shape();
        let s = self.cfg.image_size;
        if sh.len() != 4 || sh[1] != 3 || sh[2] != s || sh[3] != s {
            return Err(EncoderError::ConfigMismatch(format!(
                "input {sh:?}, expected [B, 3, {s}, {s}]"
            )));
        }
        let b = sh[0];
        let d = self.cfg.embed_dim;
        let p = self.cfg.num_patches();

        let patches = crate::tensor::ops::patchify(x, self.cfg.patch_size)?;
        let embedded = self.patch_embed.forward(tape, patches)?; // [B, P, D]

        let cls = tape
            .param(&self.cls_token)
            .broadcast_to(vec![b, 1, d])?;
        let mut seq = concat(&[cls, embedded], 1)?; // [B, P+1, D]

        let pos = tape
            .param(&self.pos_embed)
            .broadcast_to(vec![b, p + 1, d])?;
        seq = seq.add(pos)?;

        for block in &self.blocks {
            let normed = block.ln1.forward(tape, seq)?;
            let att = block.attn.forward(tape, normed, normed, normed)?;
            seq = seq.add(att)?;
            let normed2 = block.ln2.forward(tape, seq)?;
            let hidden = block.fc1.forward(tape, normed2)?.gelu();
            let mlp_out = block.fc2.forward(tape, hidden)?;
            seq = seq.add(mlp_out)?;
        }

        let seq = self.final_norm.forward(tape, seq)?;
        let cls_out = seq.narrow(1, 0, 1)?;
        Ok(cls_out.reshape(vec![b, d])?)
    }

    /// Single transformer block applied to a raw sequence, for verification.
    pub fn block_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        index: usize,
        seq: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let block = &self.blocks[index];
        let normed = block.ln1.forward(tape, seq)?;
        let att = block.attn.forward(tape, normed, normed, normed)?;
        let seq = seq.add(att)?;
        let normed2 = block.ln2.forward(tape, seq)?;
        let hidden = block.fc1.forward(tape, normed2)?.gelu();
        let mlp_out = block.fc2.forward(tape, hidden)?;
        seq.add(mlp_out)
    }

    pub fn zero_pos_embed(&self) {
        self.pos_embed
            .set_value(crate::tensor::Tensor::zeros(&self.pos_embed.shape()));
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        self.patch_embed.register(reg);
        reg.register(&self.cls_token);
        reg.register(&self.pos_embed);
        for block in &self.blocks {
            block.ln1.register(reg);
            block.attn.register(reg);
            block.ln2.register(reg);
            block.fc1.register(reg);
            block.fc2.register(reg);
        }
        self.final_norm.register(reg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn desk_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
        }
    }

    #[test]
    fn desk_config_patch_arithmetic() {
        let cfg = desk_cfg();
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.num_patches() + 1, 17);
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = crate::rng::stream(42, "vit-test", 0);
        let vit = ViT::<f64>::new("vit", desk_cfg(), &mut rng).unwrap();
        let x = Tensor::new(
            vec![2, 3, 32, 32],
            (0..2 * 3 * 32 * 32).map(|i| (i % 97) as f64 / 97.0).collect(),
        );
        let tape = Tape::new();
        let out = vit.forward(&tape, tape.constant(x.clone())).unwrap();
        assert_eq!(out.shape(), vec![2, 32]);

        let tape2 = Tape::new();
        let out2 = vit.forward(&tape2, tape2.constant(x)).unwrap();
        assert_eq!(out.value().data(), out2.value().data());
    }

    #[test]
    fn different_inputs_differ() {
        let mut rng = crate::rng::stream(42, "vit-test", 1);
        let vit = ViT::<f64>::new("vit", desk_cfg(), &mut rng).unwrap();
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.1));
        let b = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.7));
        let ya = vit.forward(&tape, a).unwrap().value();
        let yb = vit.forward(&tape, b).unwrap().value();
        assert_ne!(ya.data(), yb.data());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut rng = crate::rng::stream(42, "vit-test", 2);
        let vit = ViT::<f64>::new("vit", desk_cfg(), &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(matches!(
            vit.forward(&tape, x),
            Err(EncoderError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn patch_permutation_invariance_with_zero_pos() {
        // with positional embeddings zeroed, permuting patches must leave the
        // class token unchanged
        let mut rng = crate::rng::stream(7, "vit-test", 3);
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
        };
        let vit = ViT::<f64>::new("vit", cfg, &mut rng).unwrap();
        vit.zero_pos_embed();

        // an 8x8 image has 4 patches of 4x4; swap patch (0,0) with (1,1)
        let mut img = vec![0.0f64; 3 * 8 * 8];
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 101.0;
        }
        let mut swapped = img.clone();
        for c in 0..3 {
            for dy in 0..4 {
                for dx in 0..4 {
                    let a = (c * 8 + dy) * 8 + dx;
                    let b = (c * 8 + 4 + dy) * 8 + 4 + dx;
                    swapped.swap(a, b);
                }
            }
        }
        let tape = Tape::new();
        let ya = vit
            .forward(&tape, tape.constant(Tensor::new(vec![1, 3, 8, 8], img)))
            .unwrap()
            .value();
        let yb = vit
            .forward(&tape, tape.constant(Tensor::new(vec![1, 3, 8, 8], swapped)))
            .unwrap()
            .value();
        for (a, b) in ya.data().iter().zip(yb.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn paper_parameter_count_matches_arithmetic() {
        let mut rng = crate::rng::stream(0, "vit-count", 0);
        let cfg = ViTConfig::paper();
        let vit = ViT::<f32>::new("vit", cfg.clone(), &mut rng).unwrap();
        let mut reg = ParamRegistry::new();
        vit.register(&mut reg);

        // independent arithmetic from the config
        let d = cfg.embed_dim;
        let p = cfg.num_patches();
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let hidden = cfg.mlp_hidden();
        let per_block = (2 * d) * 2            // two layer norms
            + 4 * (d * d + d)                  // q, k, v, o projections
            + (d * hidden + hidden)            // fc1
            + (hidden * d + d); // fc2
        let expected = (patch_dim * d + d)     // patch embedding
            + d                                 // cls token
            + (p + 1) * d                       // positional embedding
            + cfg.depth * per_block
            + 2 * d; // final norm
        assert_eq!(reg.trainable_count(), expected);
        // ballpark of the published ViT-Tiny size
        assert!((5_000_000..6_000_000).contains(&expected), "{expected}");
    }
}
