//! Shared contrastive encoder: NT-Xent pretraining over cross-modal pairs,
//! freezing, and condition embeddings for the supervised stage.
//!
//! The loss works on pooled, L2-normalised projections (one vector per
//! image); the condition embedding uses the un-pooled P×D patch maps.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{meta_get, read_metadata, write_metadata, Linear, ParamStore};
use crate::pipeline::{Adam, AdamConfig};
use crate::tensor::{Real, Reduction, Tape, Tensor, Var};
use crate::vit::{EncoderConfig, ImageTensor, VitEncoder};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug)]
pub struct ContrastiveEncoder {
    encoder: VitEncoder,
    head: Linear,
    store: ParamStore,
    proj_dim: usize,
}

/// Output of [`ContrastiveEncoder::project`].
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    /// P×D token map.
    pub patch_map: Var,
    /// 1×D_proj, unit L2 norm.
    pub pooled: Var,
}

impl ContrastiveEncoder {
    pub fn new(config: EncoderConfig, proj_dim: usize) -> Result<Self> {
        if proj_dim == 0 {
            return Err(Error::Validation("projection dim must be positive".into()));
        }
        let mut store = ParamStore::new();
        let encoder = VitEncoder::new(&mut store, "", config.clone())?;
        // head weights draw from a stream distinct from the encoder's
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let head = Linear::new(&mut store, "projection_head", config.dim, proj_dim, &mut rng);
        Ok(Self {
            encoder,
            head,
            store,
            proj_dim,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// Marks every weight as frozen. There is no way back.
    pub fn freeze(mut self) -> Self {
        self.store.set_frozen(true);
        self
    }

    /// patch_map = encode(image); pooled = normalize(linear(mean_pool(patch_map))).
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, image: &ImageTensor) -> Result<Projection> {
        let patch_map = self.encoder.encode(tape, &self.store, image)?;
        let pooled = tape.mean_rows(patch_map);
        let pooled = tape.reshape(pooled, &[1, self.config().dim])?;
        let pooled = self.head.forward(tape, &self.store, pooled)?;
        let pooled = tape.normalize_rows(pooled);
        Ok(Projection { patch_map, pooled })
    }

    /// Pooled unit vectors for a list of images, computed without gradients.
    pub fn embed_pooled(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f32>>> {
        images
            .iter()
            .map(|img| {
                let mut tape = Tape::<f32>::new();
                let p = self.project(&mut tape, img)?;
                Ok(tape.value(p.pooled).values().to_vec())
            })
            .collect()
    }

    /// Stacks per-frame patch maps, visual frames first then tactile, into
    /// a 2N×P×D tensor.
    pub fn condition_embedding<T: Real>(
        &self,
        tape: &mut Tape<T>,
        visual: &[ImageTensor],
        tactile: &[ImageTensor],
    ) -> Result<Var> {
        if visual.len() != tactile.len() || visual.is_empty() {
            return Err(Error::Validation(format!(
                "condition embedding needs N >= 1 frames per modality, got {} visual and {} tactile",
                visual.len(),
                tactile.len()
            )));
        }
        let maps = visual
            .iter()
            .chain(tactile)
            .map(|img| self.encoder.encode(tape, &self.store, img))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat(&maps, 0)?;
        let c = self.config();
        tape.reshape(stacked, &[maps.len(), c.num_patches(), c.dim])
    }

    /// Plain-value condition embedding for a frozen encoder.
    pub fn condition_tensor(&self, visual: &[ImageTensor], tactile: &[ImageTensor]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let e = self.condition_embedding(&mut tape, visual, tactile)?;
        Ok(tape.value(e).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        let mut meta = self.config().metadata();
        meta.push(("proj_dim", self.proj_dim.to_string()));
        meta.push(("frozen", self.is_frozen().to_string()));
        write_metadata(&dir.join("metadata.txt"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("metadata.txt");
        let meta = read_metadata(&path)?;
        let config = EncoderConfig::from_metadata(&meta, &path)?;
        let proj_dim: usize = meta_get(&meta, "proj_dim", &path)?;
        let frozen: bool = meta_get(&meta, "frozen", &path)?;
        let mut out = Self::new(config, proj_dim)?;
        out.store.load(dir)?;
        out.store.set_frozen(frozen);
        Ok(out)
    }
}

/// S[i,j] = eᵢ·eⱼ/τ with the diagonal set to −∞. Rows 0..B are visual,
/// B..2B the tactile views of the same samples.
pub fn similarity_matrix<T: Real>(tape: &mut Tape<T>, pooled: Var, tau: f64) -> Result<Var> {
    similarity_matrix_masked(tape, pooled, tau, T::neg_infinity())
}

/// As [`similarity_matrix`] with an arbitrary diagonal fill value.
pub fn similarity_matrix_masked<T: Real>(tape: &mut Tape<T>, pooled: Var, tau: f64, diagonal: T) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Validation(format!("temperature must be positive, got {tau}")));
    }
    let gram = tape.matmul_nt(pooled, pooled)?;
    let scaled = tape.scale(gram, T::from_f64(1.0 / tau));
    tape.fill_diagonal(scaled, diagonal)
}

/// Index of the positive partner of row `i` among `2b` rows, wrapping.
pub fn positive_index(i: usize, b: usize) -> usize {
    (i + b) % (2 * b)
}

/// −Σᵢ log( exp(S[i, pos(i)]) / Σ_{j≠i} exp(S[i,j]) ), summed over all 2B rows.
pub fn nt_xent_loss<T: Real>(tape: &mut Tape<T>, similarity: Var, b: usize) -> Result<Var> {
    if b < 1 {
        return Err(Error::Validation("NT-Xent needs at least one pair".into()));
    }
    if tape.shape(similarity) != [2 * b, 2 * b] {
        return Err(Error::dim("nt_xent_loss", tape.shape(similarity), &[2 * b, 2 * b]));
    }
    let positives: Vec<usize> = (0..2 * b).map(|i| positive_index(i, b)).collect();
    tape.cross_entropy(similarity, &positives, Reduction::Sum)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub tau: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 3e-4,
            tau: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// Minimises the NT-Xent loss over shuffled batches of (visual, tactile)
/// pairs. Returns the mean batch loss of every epoch.
pub fn pretrain(
    encoder: &mut ContrastiveEncoder,
    pairs: &[(&ImageTensor, &ImageTensor)],
    config: &PretrainConfig,
) -> Result<Vec<f32>> {
    if encoder.is_frozen() {
        return Err(Error::Contract("cannot pretrain a frozen contrastive encoder".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Validation("pretraining needs at least one pair".into()));
    }
    if config.batch_size < 2 {
        return Err(Error::Validation("pretraining batch size must be at least 2".into()));
    }
    let mut adam = Adam::new(
        &encoder.store,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::<f32>::new();
            let loss = batch_loss(encoder, &mut tape, chunk.iter().map(|&i| pairs[i]), config.tau)?;
            tape.backward(loss)?;
            total += tape.value(loss).values()[0] as f64;
            batches += 1;
            let grads = encoder.store.grads(&tape);
            adam.step(&mut encoder.store, &grads)?;
        }
        history.push((total / batches.max(1) as f64) as f32);
    }
    Ok(history)
}

fn batch_loss<'a, T: Real>(
    encoder: &ContrastiveEncoder,
    tape: &mut Tape<T>,
    batch: impl Iterator<Item = (&'a ImageTensor, &'a ImageTensor)>,
    tau: f64,
) -> Result<Var> {
    let mut visual = Vec::new();
    let mut tactile = Vec::new();
    for (v, t) in batch {
        visual.push(encoder.project(tape, v)?.pooled);
        tactile.push(encoder.project(tape, t)?.pooled);
    }
    let b = visual.len();
    visual.extend(tactile);
    let pooled = tape.concat(&visual, 0)?;
    let s = similarity_matrix(tape, pooled, tau)?;
    nt_xent_loss(tape, s, b)
}

/// Cross-modal nearest-neighbour retrieval from visual to tactile
/// embeddings by exhaustive dot-product scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalScore {
    /// Retrieved tactile sample has the query's class.
    pub class_top1: f64,
    /// Retrieved tactile sample is the query's own partner.
    pub instance_top1: f64,
}

pub fn retrieval_accuracy(visual: &[Vec<f32>], tactile: &[Vec<f32>], labels: &[usize]) -> RetrievalScore {
    assert_eq!(visual.len(), tactile.len());
    assert_eq!(visual.len(), labels.len());
    let mut class_hits = 0usize;
    let mut instance_hits = 0usize;
    for (i, q) in visual.iter().enumerate() {
        let best = tactile
            .iter()
            .enumerate()
            .map(|(j, t)| (j, q.iter().zip(t).map(|(a, b)| a * b).sum::<f32>()))
            .fold((0, f32::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        class_hits += usize::from(labels[best] == labels[i]);
        instance_hits += usize::from(best == i);
    }
    let n = visual.len().max(1) as f64;
    RetrievalScore {
        class_top1: class_hits as f64 / n,
        instance_top1: instance_hits as f64 / n,
    }
}
