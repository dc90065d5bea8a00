//! Small Vision Transformer with prefix key/value injection points.
//!
//! Pre-norm blocks: `x += attn(ln1(x), prompt)`, `x += mlp(ln2(x))`. The
//! class token after the final layer norm is the feature vector.
//! Prompts are prefixed to the projected keys and values of each head, so
//! the token count never changes.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{contract, dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Prompt length `L`; zero disables prompting.
    pub prompt_length: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            num_layers: 12,
            num_heads: 2,
            mlp_ratio: 2,
            prompt_length: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed dim {} must be divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return bad("at least one transformer layer is required".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return bad("channels and mlp ratio must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Key and value prompt for one layer, as plain tensors of shape `[L, D]`.
#[derive(Debug, Clone)]
pub struct LayerPrompt<T> {
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

impl<T: Scalar> LayerPrompt<T> {
    pub fn new(key: Tensor<T>, value: Tensor<T>) -> Result<Self> {
        if key.shape() != value.shape() || key.shape().len() != 2 {
            return Err(dim_err(format!(
                "key prompt {:?} and value prompt {:?} must both be [L, D]",
                key.shape(),
                value.shape()
            )));
        }
        Ok(Self { key, value })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.key.bit_eq(&other.key) && self.value.bit_eq(&other.value)
    }

    pub fn on_tape(&self, tape: &Tape<T>) -> PromptVars {
        PromptVars {
            key: tape.leaf(&self.key),
            value: tape.leaf(&self.value),
        }
    }
}

/// Prompt nodes on a tape: `[L, D]` (shared by the batch) or `[B, L, D]`.
#[derive(Debug, Clone, Copy)]
pub struct PromptVars {
    pub key: Var,
    pub value: Var,
}

/// Images cut into flattened patches, `[B, N, C * p * p]`.
#[derive(Debug, Clone)]
pub struct PatchBatch<T> {
    pub batch: usize,
    data: Vec<T>,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn from_images(cfg: &VitConfig, images: &[&Image]) -> Result<Self> {
        let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
        let side = s / p;
        let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
        for img in images {
            if img.channels != c || img.height != s || img.width != s {
                return Err(Error::Config(format!(
                    "image {}x{}x{} does not match configured {c}x{s}x{s}",
                    img.channels, img.height, img.width
                )));
            }
            for py in 0..side {
                for px in 0..side {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                let y = py * p + dy;
                                let x = px * p + dx;
                                data.push(T::lit(img.pixels[(ch * s + y) * s + x] as f64));
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            batch: images.len(),
            data,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// `[D, 3D]`, columns ordered query, key, value.
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn init(cfg: &VitConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        let lim = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Self {
            ln1_gain: Tensor::filled(&[d], T::one()),
            ln1_bias: Tensor::zeros(&[d]),
            qkv_weight: Tensor::uniform(&[d, 3 * d], lim(d), rng),
            qkv_bias: Tensor::zeros(&[3 * d]),
            proj_weight: Tensor::uniform(&[d, d], lim(d), rng),
            proj_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], T::one()),
            ln2_bias: Tensor::zeros(&[d]),
            fc1_weight: Tensor::uniform(&[d, h], lim(d), rng),
            fc1_bias: Tensor::zeros(&[h]),
            fc2_weight: Tensor::uniform(&[h, d], lim(h), rng),
            fc2_bias: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.qkv.weight", &mut self.qkv_weight),
            ("attn.qkv.bias", &mut self.qkv_bias),
            ("attn.proj.weight", &mut self.proj_weight),
            ("attn.proj.bias", &mut self.proj_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("mlp.fc1.weight", &mut self.fc1_weight),
            ("mlp.fc1.bias", &mut self.fc1_bias),
            ("mlp.fc2.weight", &mut self.fc2_weight),
            ("mlp.fc2.bias", &mut self.fc2_bias),
        ]
    }
}

/// The transformer feature extractor.
///
/// Frozen once pretraining ends; every tensor is then non-trainable and
/// forward passes leave it untouched.
#[derive(Debug)]
pub struct Backbone<T> {
    pub config: VitConfig,
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    /// Seeded random weights standing in for a pretrained network.
    pub surrogate: bool,
    passes: AtomicUsize,
}

impl<T: Scalar> Clone for Backbone<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            patch_weight: self.patch_weight.clone(),
            patch_bias: self.patch_bias.clone(),
            cls_token: self.cls_token.clone(),
            pos_embed: self.pos_embed.clone(),
            blocks: self.blocks.clone(),
            norm_gain: self.norm_gain.clone(),
            norm_bias: self.norm_bias.clone(),
            surrogate: self.surrogate,
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> Backbone<T> {
    /// Random initialisation. The result is trainable; call [`Parameters::set_trainable`]
    /// with `false` (or [`Backbone::freeze`]) before continual training.
    pub fn init(config: &VitConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut bb = Self {
            config: config.clone(),
            patch_weight: Tensor::uniform(
                &[config.patch_dim(), d],
                1.0 / (config.patch_dim() as f64).sqrt(),
                rng,
            ),
            patch_bias: Tensor::zeros(&[d]),
            cls_token: Tensor::randn(&[d], 0.02, rng),
            pos_embed: Tensor::randn(&[config.num_tokens(), d], 0.02, rng),
            blocks: (0..config.num_layers)
                .map(|_| Block::init(config, rng))
                .collect(),
            norm_gain: Tensor::filled(&[d], T::one()),
            norm_bias: Tensor::zeros(&[d]),
            surrogate: true,
            passes: AtomicUsize::new(0),
        };
        bb.set_trainable(true);
        Ok(bb)
    }

    /// Seeded random backbone flagged as a surrogate, already frozen.
    pub fn surrogate(config: &VitConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut bb = Self::init(config, rng)?;
        bb.freeze();
        Ok(bb)
    }

    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.visit(&mut |_, t| frozen &= !t.is_trainable());
        frozen
    }

    /// Per-sample forward passes run since construction or the last reset.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    pub fn patchify(&self, images: &[&Image]) -> Result<PatchBatch<T>> {
        PatchBatch::from_images(&self.config, images)
    }

    /// Patch projection, class token and position embedding: `[B, N + 1, D]`.
    pub fn embed(&self, tape: &Tape<T>, patches: &PatchBatch<T>) -> Result<Var> {
        let cfg = &self.config;
        let (b, n, d) = (patches.batch, cfg.num_patches(), cfg.embed_dim);
        let x = tape.constant(vec![b, n, cfg.patch_dim()], patches.data.clone())?;
        let w = tape.leaf(&self.patch_weight);
        let bias = tape.leaf(&self.patch_bias);
        let tokens = tape.linear(x, w, bias)?;
        let cls = tape.leaf(&self.cls_token);
        let cls = tape.reshape(cls, &[1, d])?;
        let cls = tape.expand(cls, b)?;
        let seq = tape.concat(&[cls, tokens], 1)?;
        let pos = tape.leaf(&self.pos_embed);
        tape.add(seq, pos)
    }

    fn split_heads(&self, tape: &Tape<T>, x: Var, b: usize, len: usize) -> Result<Var> {
        let h = self.config.num_heads;
        let dh = self.config.head_dim();
        let x = tape.reshape(x, &[b, len, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, len, dh])
    }

    fn prompt_batch(&self, tape: &Tape<T>, p: Var, b: usize) -> Result<Var> {
        let shape = tape.shape(p);
        let d = self.config.embed_dim;
        match *shape.as_slice() {
            [_, pd] if pd == d => tape.expand(p, b),
            [pb, _, pd] if pb == b && pd == d => Ok(p),
            _ => Err(dim_err(format!(
                "prompt of shape {shape:?} for batch {b} and embed dim {d}"
            ))),
        }
    }

    /// Multi-head attention of layer `layer` over `x: [B, T, D]` with optional prefix prompts.
    pub fn attention_with_prefix(
        &self,
        tape: &Tape<T>,
        layer: usize,
        x: Var,
        prompt: Option<PromptVars>,
    ) -> Result<Var> {
        let blk = self
            .blocks
            .get(layer)
            .ok_or_else(|| contract(format!("layer {layer} out of range")))?;
        let shape = tape.shape(x);
        let d = self.config.embed_dim;
        let (b, t) = match shape.as_slice() {
            &[b, t, xd] if xd == d => (b, t),
            _ => return Err(dim_err(format!("attention input {shape:?}, embed dim {d}"))),
        };
        let h = self.config.num_heads;
        let dh = self.config.head_dim();
        let w = tape.leaf(&blk.qkv_weight);
        let bias = tape.leaf(&blk.qkv_bias);
        let qkv = tape.linear(x, w, bias)?;
        let q = tape.slice(qkv, 2, 0, d)?;
        let k = tape.slice(qkv, 2, d, d)?;
        let v = tape.slice(qkv, 2, 2 * d, d)?;
        let q = self.split_heads(tape, q, b, t)?;
        let mut k = self.split_heads(tape, k, b, t)?;
        let mut v = self.split_heads(tape, v, b, t)?;
        if let Some(p) = prompt {
            let pk = self.prompt_batch(tape, p.key, b)?;
            let pv = self.prompt_batch(tape, p.value, b)?;
            let len = tape.shape(pk)[1];
            if tape.shape(pv)[1] != len {
                return Err(dim_err("key and value prompts differ in length"));
            }
            let pk = self.split_heads(tape, pk, b, len)?;
            let pv = self.split_heads(tape, pv, b, len)?;
            k = tape.concat(&[pk, k], 1)?;
            v = tape.concat(&[pv, v], 1)?;
        }
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::one() / T::lit(dh as f64).sqrt());
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let w = tape.leaf(&blk.proj_weight);
        let bias = tape.leaf(&blk.proj_bias);
        tape.linear(ctx, w, bias)
    }

    pub fn block(
        &self,
        tape: &Tape<T>,
        layer: usize,
        x: Var,
        prompt: Option<PromptVars>,
    ) -> Result<Var> {
        let blk = &self.blocks[layer];
        let eps = T::lit(LN_EPS);
        let g = tape.leaf(&blk.ln1_gain);
        let bias = tape.leaf(&blk.ln1_bias);
        let hn = tape.layer_norm(x, g, bias, eps)?;
        let a = self.attention_with_prefix(tape, layer, hn, prompt)?;
        let x = tape.add(x, a)?;
        let g = tape.leaf(&blk.ln2_gain);
        let bias = tape.leaf(&blk.ln2_bias);
        let hn = tape.layer_norm(x, g, bias, eps)?;
        let w1 = tape.leaf(&blk.fc1_weight);
        let b1 = tape.leaf(&blk.fc1_bias);
        let hid = tape.linear(hn, w1, b1)?;
        let hid = tape.gelu(hid);
        let w2 = tape.leaf(&blk.fc2_weight);
        let b2 = tape.leaf(&blk.fc2_bias);
        let m = tape.linear(hid, w2, b2)?;
        tape.add(x, m)
    }

    /// Class-token features `[B, D]` after the final layer norm.
    ///
    /// `prompts` is empty or has one entry per layer.
    pub fn forward_features(
        &self,
        tape: &Tape<T>,
        patches: &PatchBatch<T>,
        prompts: &[Option<PromptVars>],
    ) -> Result<Var> {
        let m = self.config.num_layers;
        if !prompts.is_empty() && prompts.len() != m {
            return Err(contract(format!(
                "{} layer prompts for a {m}-layer backbone",
                prompts.len()
            )));
        }
        let mut x = self.embed(tape, patches)?;
        for layer in 0..m {
            let p = prompts.get(layer).copied().flatten();
            x = self.block(tape, layer, x, p)?;
        }
        let b = patches.batch;
        let d = self.config.embed_dim;
        let cls = tape.slice(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[b, d])?;
        let g = tape.leaf(&self.norm_gain);
        let bias = tape.leaf(&self.norm_bias);
        let out = tape.layer_norm(cls, g, bias, T::lit(LN_EPS))?;
        self.passes.fetch_add(b, Ordering::Relaxed);
        Ok(out)
    }
}

impl<T: Scalar> Parameters<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("backbone.patch.weight", &self.patch_weight);
        f("backbone.patch.bias", &self.patch_bias);
        f("backbone.cls_token", &self.cls_token);
        f("backbone.pos_embed", &self.pos_embed);
        for (i, blk) in self.blocks.iter().enumerate() {
            for (name, t) in blk.named() {
                f(&format!("backbone.blocks.{i}.{name}"), t);
            }
        }
        f("backbone.norm.gain", &self.norm_gain);
        f("backbone.norm.bias", &self.norm_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("backbone.patch.weight", &mut self.patch_weight);
        f("backbone.patch.bias", &mut self.patch_bias);
        f("backbone.cls_token", &mut self.cls_token);
        f("backbone.pos_embed", &mut self.pos_embed);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            for (name, t) in blk.named_mut() {
                f(&format!("backbone.blocks.{i}.{name}"), t);
            }
        }
        f("backbone.norm.gain", &mut self.norm_gain);
        f("backbone.norm.bias", &mut self.norm_bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(cfg: &VitConfig, fill: impl Fn(usize) -> f32) -> Image {
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Image {
            channels: cfg.channels,
            height: cfg.image_size,
            width: cfg.image_size,
            pixels: (0..n).map(fill).collect(),
        }
    }

    fn small() -> VitConfig {
        VitConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            prompt_length: 2,
        }
    }

    #[test]
    fn token_counts() {
        let mut cfg = small();
        assert_eq!(cfg.num_tokens(), 5);
        cfg.image_size = 32;
        assert_eq!(cfg.num_tokens(), 17);
        let bb = Backbone::<f64>::surrogate(&small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = image(&small(), |i| i as f32 * 0.01);
        let tape = Tape::new();
        let x = bb.embed(&tape, &bb.patchify(&[&img]).unwrap()).unwrap();
        assert_eq!(tape.shape(x), vec![1, 5, 8]);
    }

    #[test]
    fn zero_image_and_projection_embed_to_class_and_position() {
        let cfg = small();
        let mut bb = Backbone::<f64>::surrogate(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        bb.patch_weight = Tensor::zeros(bb.patch_weight.shape());
        let img = image(&cfg, |_| 0.0);
        let tape = Tape::new();
        let x = bb.embed(&tape, &bb.patchify(&[&img]).unwrap()).unwrap();
        let out = tape.value(x);
        let d = cfg.embed_dim;
        for j in 0..d {
            assert_eq!(out[j], bb.cls_token.data()[j] + bb.pos_embed.data()[j]);
        }
        for tok in 1..cfg.num_tokens() {
            for j in 0..d {
                assert_eq!(out[tok * d + j], bb.pos_embed.data()[tok * d + j]);
            }
        }
    }

    #[test]
    fn image_size_mismatch_is_config_error() {
        let cfg = small();
        let bb = Backbone::<f64>::surrogate(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Image {
            channels: 3,
            height: 8,
            width: 8,
            pixels: vec![0.0; 192],
        };
        assert!(matches!(bb.patchify(&[&img]), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prompt_list_length_is_checked() {
        let cfg = small();
        let bb = Backbone::<f64>::surrogate(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = image(&cfg, |i| (i % 7) as f32 * 0.1);
        let tape = Tape::new();
        let patches = bb.patchify(&[&img]).unwrap();
        let r = bb.forward_features(&tape, &patches, &[None]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn empty_prompt_list_matches_absent_prompts() {
        let cfg = small();
        let bb = Backbone::<f64>::surrogate(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = image(&cfg, |i| ((i * 37) % 11) as f32 * 0.1 - 0.5);
        let patches = bb.patchify(&[&img]).unwrap();
        let t1 = Tape::new();
        let a = bb.forward_features(&t1, &patches, &[]).unwrap();
        let t2 = Tape::new();
        let b = bb.forward_features(&t2, &patches, &[None, None]).unwrap();
        let (a, b) = (t1.to_tensor(a), t2.to_tensor(b));
        assert!(a.bit_eq(&b));
        let t3 = Tape::new();
        let c = bb.forward_features(&t3, &patches, &[]).unwrap();
        assert!(a.bit_eq(&t3.to_tensor(c)));
    }

    #[test]
    fn frozen_backbone_produces_no_gradients() {
        let cfg = small();
        let bb = Backbone::<f64>::surrogate(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(bb.is_frozen());
        let img = image(&cfg, |i| (i % 5) as f32 * 0.2 - 0.4);
        let tape = Tape::new();
        let f = bb
            .forward_features(&tape, &bb.patchify(&[&img]).unwrap(), &[])
            .unwrap();
        let loss = tape.sum(f);
        let grads = tape.backward(loss).unwrap();
        let mut any = false;
        bb.visit(&mut |_, t| any |= grads.for_tensor(t.id()).is_some());
        assert!(!any);
        assert!(grads.visit_order().is_empty());
    }
}
