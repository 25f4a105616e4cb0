//! The vision transformer: patch tokenisation, two learnable task tokens,
//! a pre-norm encoder and three linear heads.
//!
//! Token layout through every block is
//! `[rotation token, contrastive token, patch_0, ..., patch_{T-1}]`; there is
//! no class token. Positional embeddings are added to patch tokens only.
//!
//! Patch layout: patches are enumerated row-major over the patch grid and the
//! pixels of one patch are flattened in `(channel, row, col)` order, so patch
//! `t = gy * grid + gx` holds `image[c, gy*P + r, gx*P + q]` at offset
//! `c*P*P + r*P + q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const ROTATION_CLASSES: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Leading task tokens ahead of the patch tokens.
pub const TASK_TOKENS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub contrastive_dim: usize,
    pub rotation_classes: usize,
    /// When set, the rotation and contrastive heads have been replaced by
    /// classifiers with this many outputs.
    pub classifier_classes: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny_cifar()
    }
}

impl ModelConfig {
    /// 32px inputs, 4px patches, width 64, 4 blocks of 4 heads.
    pub fn tiny_cifar() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            contrastive_dim: 32,
            rotation_classes: ROTATION_CLASSES,
            classifier_classes: None,
            seed: 0,
        }
    }

    /// STL-10 downscaled to 64px with 8px patches.
    pub fn tiny_stl() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            ..Self::tiny_cifar()
        }
    }

    /// ViT-B/16 at 224px with a 512-d contrastive head.
    pub fn vitb16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            contrastive_dim: 512,
            rotation_classes: ROTATION_CLASSES,
            classifier_classes: None,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny-cifar" => Ok(Self::tiny_cifar()),
            "tiny-stl" => Ok(Self::tiny_stl()),
            "vitb16" => Ok(Self::vitb16()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.rotation_classes != ROTATION_CLASSES {
            return fail(format!("rotation_classes must be 4, got {}", self.rotation_classes));
        }
        if self.contrastive_dim == 0 || self.channels == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return fail("contrastive_dim, channels, depth and mlp_ratio must be >= 1".into());
        }
        if self.classifier_classes == Some(0) {
            return fail("classifier_classes must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn seq_len(&self) -> usize {
        TASK_TOKENS + self.num_patches()
    }

    fn head_outputs(&self) -> (usize, usize) {
        match self.classifier_classes {
            Some(n) => (n, n),
            None => (self.rotation_classes, self.contrastive_dim),
        }
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let pd = self.patch_dim();
        let hidden = self.mlp_ratio * d;
        let linear = |i: usize, o: usize| i * o + o;
        let (rot, contr) = self.head_outputs();
        let block = 2 * (2 * d) + 4 * linear(d, d) + linear(d, hidden) + linear(hidden, d);
        linear(pd, d)
            + self.num_patches() * d
            + TASK_TOKENS * d
            + self.depth * block
            + 2 * d
            + linear(d, pd)
            + linear(d, rot)
            + linear(d, contr)
    }

    /// `key = value` lines, the same grammar as run config files.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "image_size = {}\npatch_size = {}\nchannels = {}\nembed_dim = {}\ndepth = {}\nnum_heads = {}\nmlp_ratio = {}\ncontrastive_dim = {}\nrotation_classes = {}\nseed = {}\n",
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.depth,
            self.num_heads,
            self.mlp_ratio,
            self.contrastive_dim,
            self.rotation_classes,
            self.seed
        );
        if let Some(n) = self.classifier_classes {
            s.push_str(&format!("classifier_classes = {n}\n"));
        }
        s
    }

    /// Apply one `key = value` setting. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{value}`")))
        };
        match key {
            "image_size" => self.image_size = num()?,
            "patch_size" => self.patch_size = num()?,
            "channels" => self.channels = num()?,
            "embed_dim" => self.embed_dim = num()?,
            "depth" => self.depth = num()?,
            "num_heads" => self.num_heads = num()?,
            "mlp_ratio" => self.mlp_ratio = num()?,
            "contrastive_dim" => self.contrastive_dim = num()?,
            "rotation_classes" => self.rotation_classes = num()?,
            "classifier_classes" => self.classifier_classes = Some(num()?),
            "seed" => self.seed = num()? as u64,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::tiny_cifar();
        for (key, value) in crate::config::parse_kv(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown model key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `[N, C, H, W]` images to `[N, T, P*P*C]` patch vectors.
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[n, c, h, w] = images.shape() else {
        return shape_err("patchify", format!("expected NCHW, got {:?}", images.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err("patchify", format!("{h}x{w} not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    images
        .clone()
        .reshape(&[n, c, gh, patch, gw, patch])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[n, gh * gw, c * patch * patch])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, gh, gw, p) = unpatch_dims(patches.shape(), channels, h, w)?;
    patches
        .clone()
        .reshape(&[n, gh, gw, channels, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[n, channels, h, w])
}

fn unpatch_dims(shape: &[usize], channels: usize, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
    let &[n, t, pd] = shape else {
        return shape_err("unpatchify", format!("expected [N, T, P*P*C], got {shape:?}"));
    };
    if channels == 0 || pd % channels != 0 {
        return shape_err("unpatchify", format!("patch dim {pd} vs {channels} channels"));
    }
    let p = ((pd / channels) as f64).sqrt().round() as usize;
    if p == 0 || p * p * channels != pd || h % p != 0 || w % p != 0 || (h / p) * (w / p) != t {
        return shape_err("unpatchify", format!("{t} patches of dim {pd} cannot tile {channels}x{h}x{w}"));
    }
    Ok((n, h / p, w / p, p))
}

fn unpatchify_var<T: Real>(tape: &mut Tape<T>, x: Var, channels: usize, h: usize, w: usize) -> Result<Var> {
    let (n, gh, gw, p) = unpatch_dims(tape.shape(x), channels, h, w)?;
    let x = tape.reshape(x, &[n, gh, gw, channels, p, p])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, &[n, channels, h, w])
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub wq: LinearIds,
    pub wk: LinearIds,
    pub wv: LinearIds,
    pub wo: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub norm1: NormIds,
    pub attn: AttentionIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Debug)]
struct ModelIds {
    patch_embed: LinearIds,
    pos_embed: ParamId,
    rot_token: ParamId,
    contr_token: ParamId,
    blocks: Vec<BlockIds>,
    norm: NormIds,
    recon_head: LinearIds,
    rot_head: LinearIds,
    contr_head: LinearIds,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Normal(0, std) truncated at two standard deviations.
    fn trunc_normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64_lossy(z * std);
                }
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape and data agree")
    }

    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    fn linear<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Result<LinearIds> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..bound)))
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::from_vec(&[d_in, d_out], data)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(LinearIds { weight, bias })
    }

    fn norm<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }
}

/// Output vars of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SiTOutput {
    /// `[N, C, H, W]`, unclamped.
    pub recon: Var,
    /// `[N, 4]` (or `[N, classes]` after head replacement).
    pub rot_logits: Var,
    /// `[N, contrastive_dim]` (or `[N, classes]`), not normalised.
    pub contr_embed: Var,
    /// Final (post-norm) rotation-token embedding `[N, D]`.
    pub rot_feature: Var,
    /// Final (post-norm) contrastive-token embedding `[N, D]`.
    pub contr_feature: Var,
}

#[derive(Clone, Debug)]
pub struct SiTModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Real> SiTModel<T> {
    /// Deterministic construction from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.embed_dim;
        let pd = config.patch_dim();
        let patch_embed = init.linear(&mut store, "patch_embed", pd, d)?;
        let pos_embed = store.add("pos_embed", init.trunc_normal(&[config.num_patches(), d], 0.02))?;
        let rot_token = store.add("rot_token", init.trunc_normal(&[d], 0.02))?;
        let contr_token = store.add("contr_token", init.trunc_normal(&[d], 0.02))?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            let norm1 = init.norm(&mut store, &format!("{p}.norm1"), d)?;
            let attn = AttentionIds {
                wq: init.linear(&mut store, &format!("{p}.attn.wq"), d, d)?,
                wk: init.linear(&mut store, &format!("{p}.attn.wk"), d, d)?,
                wv: init.linear(&mut store, &format!("{p}.attn.wv"), d, d)?,
                wo: init.linear(&mut store, &format!("{p}.attn.wo"), d, d)?,
            };
            let norm2 = init.norm(&mut store, &format!("{p}.norm2"), d)?;
            let hidden = config.mlp_ratio * d;
            let fc1 = init.linear(&mut store, &format!("{p}.mlp.fc1"), d, hidden)?;
            let fc2 = init.linear(&mut store, &format!("{p}.mlp.fc2"), hidden, d)?;
            blocks.push(BlockIds {
                norm1,
                attn,
                norm2,
                fc1,
                fc2,
            });
        }
        let norm = init.norm(&mut store, "norm", d)?;
        let recon_head = init.linear(&mut store, "recon_head", d, pd)?;
        let (rot_out, contr_out) = config.head_outputs();
        let rot_head = init.linear(&mut store, "rot_head", d, rot_out)?;
        let contr_head = init.linear(&mut store, "contr_head", d, contr_out)?;
        Ok(Self {
            config,
            store,
            ids: ModelIds {
                patch_embed,
                pos_embed,
                rot_token,
                contr_token,
                blocks,
                norm,
                recon_head,
                rot_head,
                contr_head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Names of the two task heads that [`Self::replace_task_heads`] resets.
    pub fn task_head_names() -> [&'static str; 4] {
        ["rot_head.weight", "rot_head.bias", "contr_head.weight", "contr_head.bias"]
    }

    /// Swap the rotation and contrastive heads for fresh `D -> classes`
    /// classifiers. Every other parameter is left untouched.
    pub fn replace_task_heads(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let d = self.config.embed_dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut scratch = ParamStore::<T>::new();
        let rot = init.linear(&mut scratch, "rot_head", d, classes)?;
        let contr = init.linear(&mut scratch, "contr_head", d, classes)?;
        for (dst, src) in [
            (self.ids.rot_head.weight, rot.weight),
            (self.ids.rot_head.bias, rot.bias),
            (self.ids.contr_head.weight, contr.weight),
            (self.ids.contr_head.bias, contr.bias),
        ] {
            self.store.replace(dst, scratch.get(src).value.clone());
        }
        self.config.classifier_classes = Some(classes);
        Ok(())
    }

    /// Copy of the model in another element type.
    pub fn cast<U: Real>(&self) -> SiTModel<U> {
        SiTModel {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    fn lin(&self, tape: &mut Tape<T>, x: Var, ids: LinearIds) -> Result<Var> {
        let w = tape.param(&self.store, ids.weight);
        let b = tape.param(&self.store, ids.bias);
        tape.linear(x, w, Some(b))
    }

    fn ln(&self, tape: &mut Tape<T>, x: Var, ids: NormIds) -> Result<Var> {
        let g = tape.param(&self.store, ids.gamma);
        let b = tape.param(&self.store, ids.beta);
        tape.layer_norm(x, g, b, T::from_f64_lossy(LAYER_NORM_EPS))
    }

    /// Global multi-head self-attention over `[N, L, D]`.
    pub fn attention(&self, tape: &mut Tape<T>, x: Var, ids: &AttentionIds) -> Result<Var> {
        let &[n, l, d] = tape.shape(x) else {
            return shape_err("attention", format!("expected [N, L, D], got {:?}", tape.shape(x)));
        };
        let h = self.config.num_heads;
        let dh = d / h;
        let heads = |ids: LinearIds, tape: &mut Tape<T>| -> Result<Var> {
            let y = self.lin(tape, x, ids)?;
            let y = tape.reshape(y, &[n, l, h, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(ids.wq, tape)?;
        let k = heads(ids.wk, tape)?;
        let v = heads(ids.wv, tape)?;
        let scores = tape.matmul_t(q, k, false, true)?;
        let scores = tape.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let weights = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, l, d])?;
        self.lin(tape, ctx, ids.wo)
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, ids: &BlockIds) -> Result<Var> {
        let h = self.ln(tape, x, ids.norm1)?;
        let a = self.attention(tape, h, &ids.attn)?;
        let x = tape.add(x, a)?;
        let h = self.ln(tape, x, ids.norm2)?;
        let h = self.lin(tape, h, ids.fc1)?;
        let h = tape.gelu(h);
        let h = self.lin(tape, h, ids.fc2)?;
        tape.add(x, h)
    }

    /// Encode images into the final normalised token sequence `[N, 2+T, D]`.
    pub fn encode(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return shape_err(
                "forward",
                format!(
                    "images {s:?} vs model input [N, {}, {}, {}]",
                    cfg.channels, cfg.image_size, cfg.image_size
                ),
            );
        }
        let n = s[0];
        let d = cfg.embed_dim;
        let patches = tape.input(patchify(images, cfg.patch_size)?);
        let x = self.lin(tape, patches, self.ids.patch_embed)?;
        let pos = tape.param(&self.store, self.ids.pos_embed);
        let x = tape.add(x, pos)?;
        let mut task = Vec::with_capacity(TASK_TOKENS);
        for id in [self.ids.rot_token, self.ids.contr_token] {
            let t = tape.param(&self.store, id);
            let t = tape.expand(t, n)?;
            task.push(tape.reshape(t, &[n, 1, d])?);
        }
        let mut x = tape.concat(&[task[0], task[1], x], 1)?;
        for b in &self.ids.blocks {
            x = self.block(tape, x, b)?;
        }
        self.ln(tape, x, self.ids.norm)
    }

    fn token(&self, tape: &mut Tape<T>, tokens: Var, i: usize) -> Result<Var> {
        let n = tape.shape(tokens)[0];
        let t = tape.narrow(tokens, 1, i, 1)?;
        tape.reshape(t, &[n, self.config.embed_dim])
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<SiTOutput> {
        let cfg = &self.config;
        let tokens = self.encode(tape, images)?;
        let rot_feature = self.token(tape, tokens, 0)?;
        let contr_feature = self.token(tape, tokens, 1)?;
        let rot_logits = self.lin(tape, rot_feature, self.ids.rot_head)?;
        let contr_embed = self.lin(tape, contr_feature, self.ids.contr_head)?;
        let patch_tokens = tape.narrow(tokens, 1, TASK_TOKENS, cfg.num_patches())?;
        let patches = self.lin(tape, patch_tokens, self.ids.recon_head)?;
        let recon = unpatchify_var(tape, patches, cfg.channels, cfg.image_size, cfg.image_size)?;
        Ok(SiTOutput {
            recon,
            rot_logits,
            contr_embed,
            rot_feature,
            contr_feature,
        })
    }

    /// Both task-token heads, skipping the reconstruction head. Used by the
    /// classification protocols.
    pub fn forward_heads(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<(Var, Var)> {
        let tokens = self.encode(tape, images)?;
        let rot = self.token(tape, tokens, 0)?;
        let contr = self.token(tape, tokens, 1)?;
        Ok((self.lin(tape, rot, self.ids.rot_head)?, self.lin(tape, contr, self.ids.contr_head)?))
    }

    /// Frozen features: concatenated final rotation- and contrastive-token
    /// embeddings, `[N, 2D]`, computed in chunks of `batch` images.
    pub fn features(&self, images: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let chunk = images.narrow(0, start, len)?;
            let mut tape = Tape::inference();
            let tokens = self.encode(&mut tape, &chunk)?;
            let rot = self.token(&mut tape, tokens, 0)?;
            let contr = self.token(&mut tape, tokens, 1)?;
            let f = tape.concat(&[rot, contr], 1)?;
            parts.push(tape.value(f).clone());
            start += len;
        }
        Tensor::stack_rows(&parts)
    }

    /// Reconstructions for a batch of images without recording gradients.
    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, images)?;
        Ok(tape.value(out.recon).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            contrastive_dim: 3,
            ..ModelConfig::tiny_cifar()
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn patchify_shape_and_naive_reference() {
        let img = ramp(&[1, 3, 8, 8]);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 4, 48]);
        // Patch 3 of the 2x2 grid is rows 4..8, cols 4..8.
        for c in 0..3 {
            for r in 0..4 {
                for q in 0..4 {
                    let want = img.data()[c * 64 + (4 + r) * 8 + (4 + q)];
                    assert_eq!(p.data()[3 * 48 + c * 16 + r * 4 + q], want);
                }
            }
        }
        assert_eq!(unpatchify(&p, 3, 8, 8).unwrap(), img);
    }

    #[test]
    fn unpatchify_places_single_patch() {
        assert!(unpatchify(&Tensor::<f64>::zeros(&[1, 5, 12]), 3, 4, 4).is_err());
        let mut p = Tensor::<f64>::zeros(&[1, 4, 12]);
        // patch 1 (top-right) of a 2x2 grid of 2px patches in a 4x4 image
        for v in &mut p.data_mut()[12..24] {
            *v = 1.0;
        }
        let img = unpatchify(&p, 3, 4, 4).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = if y < 2 && x >= 2 { 1.0 } else { 0.0 };
                    assert_eq!(img.data()[c * 16 + y * 4 + x], want);
                }
            }
        }
        assert!(unpatchify(&Tensor::<f64>::zeros(&[1, 4, 12]), 3, 4, 4)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(patchify(&Tensor::<f64>::zeros(&[1, 3, 6, 6]), 4).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.image_size = 10;
        assert!(SiTModel::<f32>::new(c).is_err());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.rotation_classes = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        for cfg in [tiny(), ModelConfig::tiny_cifar(), ModelConfig::tiny_stl()] {
            let m = SiTModel::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(m.params().num_scalars(), cfg.parameter_count());
        }
        // Hand enumeration for the tiny config: D=8, P=4, C=3 (pd=48), T=4, hidden=16.
        let d = 8;
        let pd = 48;
        let hand = (pd * d + d) + 4 * d + 2 * d
            + (4 * d + 4 * (d * d + d) + (d * 16 + 16) + (16 * d + d))
            + 2 * d
            + (d * pd + pd)
            + (d * 4 + 4)
            + (d * 3 + 3);
        assert_eq!(tiny().parameter_count(), hand);
    }

    #[test]
    fn vitb_preset_is_about_86m() {
        let n = ModelConfig::vitb16().parameter_count() as f64;
        assert!((n - 86e6).abs() / 86e6 <= 0.02, "{n}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SiTModel::<f32>::new(tiny()).unwrap();
        let b = SiTModel::<f32>::new(tiny()).unwrap();
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let mut c = tiny();
        c.seed = 1;
        let c = SiTModel::<f32>::new(c).unwrap();
        assert_ne!(a.params().by_name("pos_embed").unwrap().value, c.params().by_name("pos_embed").unwrap().value);
    }

    #[test]
    fn output_shapes_for_default_config() {
        let m = SiTModel::<f32>::new(ModelConfig::tiny_cifar()).unwrap();
        let x = Tensor::full(&[2, 3, 32, 32], 0.5f32);
        let mut tape = Tape::inference();
        let out = m.forward(&mut tape, &x).unwrap();
        assert_eq!(tape.shape(out.recon), &[2, 3, 32, 32]);
        assert_eq!(tape.shape(out.rot_logits), &[2, 4]);
        assert_eq!(tape.shape(out.contr_embed), &[2, 32]);
        assert_eq!(m.features(&x, 1).unwrap().shape(), &[2, 128]);
        assert!(m.forward(&mut tape, &Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn no_class_token_and_names() {
        let m = SiTModel::<f32>::new(tiny()).unwrap();
        assert!(m.params().iter().all(|p| !p.name.contains("cls")));
        assert!(m.params().by_name("blocks.0.attn.wq.weight").is_some());
        let decayed: Vec<_> = m.params().iter().filter(|p| p.decay).map(|p| p.name.as_str()).collect();
        assert!(decayed.iter().all(|n| n.ends_with(".weight")));
        assert!(!decayed.contains(&"pos_embed") && !decayed.contains(&"rot_token"));
    }

    #[test]
    fn head_replacement_touches_only_heads() {
        let before = SiTModel::<f32>::new(tiny()).unwrap();
        let mut after = before.clone();
        after.replace_task_heads(5, 9).unwrap();
        assert_eq!(after.config().classifier_classes, Some(5));
        let heads = SiTModel::<f32>::task_head_names();
        for p in after.params().iter() {
            let old = before.params().by_name(&p.name).unwrap();
            if heads.contains(&p.name.as_str()) {
                assert_ne!(p.value.shape(), old.value.shape());
            } else {
                assert_eq!(p.value, old.value, "{}", p.name);
            }
        }
        assert_eq!(after.params().num_scalars(), after.config().parameter_count());
    }
}
