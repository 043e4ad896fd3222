//! Patch-based transformer encoder producing a P×D token map per image.
//!
//! No class token: the full patch sequence is the output, and pooling is
//! left to the consumer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    meta_get, read_metadata, trunc_normal, write_metadata, LayerNorm, Linear, ParamId, ParamStore,
    INIT_STD,
};
use crate::tensor::{Real, Tape, Tensor, Var};

/// H×W×C image, channel-last, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
            return Err(Error::Validation(format!(
                "image must be H×W×C with C in {{1, 3}}, got {s:?}"
            )));
        }
        if let Some(v) = t.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full(&[height, width, channels], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.0.values()[(y * self.width() + x) * self.channels() + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return bad(format!(
                "{}×{} image is not divisible into {}-pixel patches",
                self.height, self.width, self.patch_size
            ));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 || !(self.mlp_ratio > 0.0) {
            return bad("depth and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.dim as f32) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn metadata(&self) -> Vec<(&'static str, String)> {
        vec![
            ("patch_size", self.patch_size.to_string()),
            ("dim", self.dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("seed", self.seed.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
        ]
    }

    pub fn from_metadata(meta: &std::collections::HashMap<String, String>, path: &Path) -> Result<Self> {
        Ok(Self {
            height: meta_get(meta, "height", path)?,
            width: meta_get(meta, "width", path)?,
            channels: meta_get(meta, "channels", path)?,
            patch_size: meta_get(meta, "patch_size", path)?,
            dim: meta_get(meta, "dim", path)?,
            depth: meta_get(meta, "depth", path)?,
            heads: meta_get(meta, "heads", path)?,
            mlp_ratio: meta_get(meta, "mlp_ratio", path)?,
            seed: meta_get(meta, "seed", path)?,
        })
    }
}

/// Subtracted from every pixel before the patch embedding. Without it the
/// all-positive pixels push every pooled feature along the same direction
/// at initialisation.
pub const PIXEL_MEAN: f32 = 0.5;

/// Splits an image into non-overlapping square patches, ordered row-major
/// over the patch grid; each row is one patch flattened row-major with
/// channels last.
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Validation(format!(
            "{h}×{w} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let row_len = patch_size * patch_size * c;
    let src = image.tensor().values();
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch_size {
                let start = ((py * patch_size + y) * w + px * patch_size) * c;
                out.extend_from_slice(&src[start..start + patch_size * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, row_len], out)
}

/// patches·W + positional embedding.
pub fn embed<T: Real>(tape: &mut Tape<T>, patches: Var, weight: Var, pos: Var) -> Result<Var> {
    let (p, _) = (tape.shape(patches)[0], tape.shape(patches)[1]);
    let projected = tape.matmul(patches, weight)?;
    if tape.shape(pos) != tape.shape(projected) {
        return Err(Error::dim("embed", &[p, tape.shape(projected)[1]], tape.shape(pos)));
    }
    tape.add(projected, pos)
}

/// softmax(q·kᵀ/√d)·v for one head. Returns (output, attention weights).
pub fn scaled_dot_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = tape.shape(q)[1];
    if tape.shape(k)[1] != d {
        return Err(Error::dim("attention", tape.shape(q), tape.shape(k)));
    }
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(Error::dim("attention", tape.shape(k), tape.shape(v)));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, T::one() / T::from_f64(d as f64).sqrt());
    let weights = tape.softmax(scaled, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.hidden_dim(), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.hidden_dim(), d, rng),
            heads: cfg.heads,
        }
    }

    /// Pre-norm block: x + MSA(LN(x)), then + MLP(LN(·)). Also returns the
    /// per-head attention weight matrices.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let d = tape.shape(x)[1];
        let hd = d / self.heads;
        let h = self.ln1.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, h)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.narrow(qkv, 1, head * hd, hd)?;
            let k = tape.narrow(qkv, 1, d + head * hd, hd)?;
            let v = tape.narrow(qkv, 1, 2 * d + head * hd, hd)?;
            let (o, w) = scaled_dot_attention(tape, q, k, v)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = tape.concat(&outs, 1)?;
        let attn = self.proj.forward(tape, store, cat)?;
        let x = tape.add(x, attn)?;

        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        Ok((tape.add(x, h)?, weights))
    }
}

/// Everything `encode_traced` produced, for inspection.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    pub tokens: Var,
    pub embedded: Var,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct VitEncoder {
    config: EncoderConfig,
    patch_weight: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
}

impl VitEncoder {
    /// Registers the encoder's parameters under `prefix` in `store`,
    /// initialised from `config.seed`.
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let patch_weight = store.add(
            format!("{prefix}patch_embed.weight"),
            trunc_normal(&mut rng, &[config.patch_len(), config.dim], INIT_STD),
        );
        let pos = store.add(
            format!("{prefix}pos_embed"),
            trunc_normal(&mut rng, &[config.num_patches(), config.dim], INIT_STD),
        );
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(store, &format!("{prefix}blocks.{i}"), &config, &mut rng))
            .collect();
        Ok(Self {
            config,
            patch_weight,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let c = &self.config;
        if (image.height(), image.width(), image.channels()) != (c.height, c.width, c.channels) {
            return Err(Error::Validation(format!(
                "encoder expects {}×{}×{} images, got {}×{}×{}",
                c.height,
                c.width,
                c.channels,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, image: &ImageTensor) -> Result<Var> {
        Ok(self.encode_traced(tape, store, image)?.tokens)
    }

    pub fn encode_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        image: &ImageTensor,
    ) -> Result<EncodeTrace> {
        self.check_image(image)?;
        let mut patches = patchify(image, self.config.patch_size)?;
        patches.values_mut().iter_mut().for_each(|v| *v -= PIXEL_MEAN);
        let patches = tape.constant(patches.cast());
        let w = store.bind(tape, self.patch_weight);
        let pos = store.bind(tape, self.pos);
        let embedded = embed(tape, patches, w, pos)?;
        let mut x = embedded;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(tape, store, x)?;
            x = y;
            attention.push(w);
        }
        Ok(EncodeTrace {
            tokens: x,
            embedded,
            attention,
        })
    }
}

/// A standalone encoder with its own parameters, as saved on disk.
#[derive(Clone, Debug)]
pub struct StandaloneEncoder {
    pub encoder: VitEncoder,
    pub store: ParamStore,
}

impl StandaloneEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = VitEncoder::new(&mut store, "", config)?;
        Ok(Self { encoder, store })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        write_metadata(&dir.join("metadata.txt"), &self.encoder.config.metadata())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("metadata.txt");
        let meta = read_metadata(&meta_path)?;
        let config = EncoderConfig::from_metadata(&meta, &meta_path)?;
        let mut out = Self::new(config)?;
        out.store.load(dir)?;
        Ok(out)
    }
}
