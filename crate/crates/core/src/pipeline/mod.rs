//! The assembled model: two supervised encoders, modality projections and
//! fusion, condition-driven cross-modal attention over the fused map, and
//! a linear classification head. Also supervised training, evaluation and
//! checkpoints.

mod optim;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cec::{AlignOutput, CrossModalAttention};
use crate::contrastive::ContrastiveEncoder;
use crate::error::{Error, Result};
use crate::fusion::{FusionBlock, FusionKind, FusionOutput};
use crate::nn::{meta_get, read_metadata, write_metadata, Linear, ParamStore};
use crate::synth::Sample;
use crate::tensor::{Real, Reduction, Tape, Tensor, Var};
use crate::vit::{EncoderConfig, ImageTensor, VitEncoder};

pub use optim::{Adam, AdamConfig};

/// Which rows of the condition embedding act as attention queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditionMode {
    /// No conditioning: the fused map is pooled directly.
    None,
    Vision,
    Touch,
    Both,
}

impl ConditionMode {
    pub const ALL: [ConditionMode; 4] = [
        ConditionMode::None,
        ConditionMode::Vision,
        ConditionMode::Touch,
        ConditionMode::Both,
    ];
}

impl FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ConditionMode::None),
            "vision" => Ok(ConditionMode::Vision),
            "touch" => Ok(ConditionMode::Touch),
            "both" => Ok(ConditionMode::Both),
            other => Err(Error::Validation(format!(
                "unknown condition mode {other:?} (expected none, vision, touch or both)"
            ))),
        }
    }
}

impl fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionMode::None => "none",
            ConditionMode::Vision => "vision",
            ConditionMode::Touch => "touch",
            ConditionMode::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared by the visual and tactile encoders; `seed` drives every
    /// initialisation in the model.
    pub encoder: EncoderConfig,
    /// Frames per modality (N).
    pub frames: usize,
    pub num_classes: usize,
    pub fusion: FusionKind,
    pub condition: ConditionMode,
    pub cec_heads: usize,
    /// Adds the pooled fused map to the pooled aligned map before the head.
    pub cec_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            frames: 1,
            num_classes: 8,
            fusion: FusionKind::Concat,
            condition: ConditionMode::Both,
            cec_heads: 4,
            cec_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.frames == 0 {
            return Err(Error::Validation("frames must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.cec_heads == 0 || self.encoder.dim % self.cec_heads != 0 {
            return Err(Error::Validation(format!(
                "dim {} not divisible by {} attention heads",
                self.encoder.dim, self.cec_heads
            )));
        }
        Ok(())
    }

    fn metadata(&self) -> Vec<(&'static str, String)> {
        let mut meta = self.encoder.metadata();
        meta.extend([
            ("frames", self.frames.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("fusion", self.fusion.to_string()),
            ("condition", self.condition.to_string()),
            ("cec_heads", self.cec_heads.to_string()),
            ("cec_residual", self.cec_residual.to_string()),
        ]);
        meta
    }

    fn from_metadata(meta: &std::collections::HashMap<String, String>, path: &Path) -> Result<Self> {
        Ok(Self {
            encoder: EncoderConfig::from_metadata(meta, path)?,
            frames: meta_get(meta, "frames", path)?,
            num_classes: meta_get(meta, "num_classes", path)?,
            fusion: meta_get::<String>(meta, "fusion", path)?.parse()?,
            condition: meta_get::<String>(meta, "condition", path)?.parse()?,
            cec_heads: meta_get(meta, "cec_heads", path)?,
            cec_residual: meta_get(meta, "cec_residual", path)?,
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Final-block tokens of each visual frame.
    pub visual_tokens: Vec<Var>,
    pub tactile_tokens: Vec<Var>,
    pub fusion: FusionOutput,
    /// Query rows used for alignment; absent in mode `none`.
    pub queries: Option<Var>,
    pub aligned: Option<AlignOutput>,
    /// 1×K.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct ConViTacModel {
    config: ModelConfig,
    store: ParamStore,
    visual: VitEncoder,
    tactile: VitEncoder,
    fusion: FusionBlock,
    cec: CrossModalAttention,
    head: Linear,
    contrastive: Option<ContrastiveEncoder>,
}

impl ConViTacModel {
    /// Builds a freshly initialised model. The contrastive encoder is
    /// frozen on attachment and is required unless the mode is `none`.
    pub fn new(config: ModelConfig, contrastive: Option<ContrastiveEncoder>) -> Result<Self> {
        config.validate()?;
        if config.condition != ConditionMode::None && contrastive.is_none() {
            return Err(Error::Validation(format!(
                "condition mode {} needs a pretrained contrastive encoder",
                config.condition
            )));
        }
        if let Some(c) = &contrastive {
            let (a, b) = (c.config(), &config.encoder);
            if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
                return Err(Error::Validation(format!(
                    "contrastive encoder takes {}×{}×{} images but the model takes {}×{}×{}",
                    a.height, a.width, a.channels, b.height, b.width, b.channels
                )));
            }
        }
        let contrastive = contrastive.map(ContrastiveEncoder::freeze);

        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let visual = VitEncoder::new(&mut store, "visual/", enc.clone())?;
        let tactile_cfg = EncoderConfig {
            seed: enc.seed.wrapping_add(1),
            ..enc.clone()
        };
        let tactile = VitEncoder::new(&mut store, "tactile/", tactile_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(enc.seed.wrapping_add(2));
        let fusion = FusionBlock::new(&mut store, "fusion/", enc.dim, config.fusion, &mut rng);
        let cond_dim = contrastive.as_ref().map_or(enc.dim, |c| c.config().dim);
        let cec = CrossModalAttention::new(&mut store, "cec/", cond_dim, enc.dim, config.cec_heads, &mut rng)?;
        let head = Linear::new(&mut store, "head", enc.dim, config.num_classes, &mut rng);
        Ok(Self {
            config,
            store,
            visual,
            tactile,
            fusion,
            cec,
            head,
            contrastive,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable parameters.
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn contrastive(&self) -> Option<&ContrastiveEncoder> {
        self.contrastive.as_ref()
    }

    pub fn fusion_block(&self) -> &FusionBlock {
        &self.fusion
    }

    pub fn attention(&self) -> &CrossModalAttention {
        &self.cec
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Changes the condition mode on the same weights.
    pub fn set_condition(&mut self, mode: ConditionMode) -> Result<()> {
        if mode != ConditionMode::None && self.contrastive.is_none() {
            return Err(Error::Validation(format!("condition mode {mode} needs a contrastive encoder")));
        }
        self.config.condition = mode;
        Ok(())
    }

    /// 2N×P×Dc condition embedding of a sample, from the frozen encoder.
    pub fn condition_tensor(&self, sample: &Sample) -> Result<Option<Tensor<f32>>> {
        match (&self.contrastive, self.config.condition) {
            (_, ConditionMode::None) => Ok(None),
            (Some(c), _) => c.condition_tensor(&sample.visual, &sample.tactile).map(Some),
            (None, mode) => Err(Error::Validation(format!("condition mode {mode} needs a contrastive encoder"))),
        }
    }

    fn check_frames(&self, visual: &[ImageTensor], tactile: &[ImageTensor]) -> Result<()> {
        let n = self.config.frames;
        if visual.len() != n || tactile.len() != n {
            return Err(Error::Validation(format!(
                "model takes {n} frames per modality, got {} visual and {} tactile",
                visual.len(),
                tactile.len()
            )));
        }
        Ok(())
    }

    /// Full forward pass. `condition` is the 2N×P×Dc embedding from
    /// [`Self::condition_tensor`]; when absent and the mode needs one it is
    /// computed here.
    pub fn forward_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        visual: &[ImageTensor],
        tactile: &[ImageTensor],
        condition: Option<&Tensor<f32>>,
    ) -> Result<ForwardTrace> {
        self.check_frames(visual, tactile)?;
        let store = &self.store;
        let visual_tokens = visual
            .iter()
            .map(|img| self.visual.encode(tape, store, img))
            .collect::<Result<Vec<_>>>()?;
        let tactile_tokens = tactile
            .iter()
            .map(|img| self.tactile.encode(tape, store, img))
            .collect::<Result<Vec<_>>>()?;
        let fusion = self.fusion.forward(tape, store, &visual_tokens, &tactile_tokens)?;

        let (queries, aligned, pooled) = if self.config.condition == ConditionMode::None {
            (None, None, tape.mean_rows(fusion.fused))
        } else {
            let e = match condition {
                Some(t) => tape.constant(t.cast()),
                None => {
                    let c = self.contrastive.as_ref().expect("checked at construction");
                    c.condition_embedding(tape, visual, tactile)?
                }
            };
            let queries = self.query_rows(tape, e)?;
            let aligned = self.cec.align(tape, store, queries, fusion.fused)?;
            let mut pooled = tape.mean_rows(aligned.aligned);
            if self.config.cec_residual {
                let base = tape.mean_rows(fusion.fused);
                pooled = tape.add(pooled, base)?;
            }
            (Some(queries), Some(aligned), pooled)
        };
        let pooled = tape.reshape(pooled, &[1, self.config.encoder.dim])?;
        let logits = self.head.forward(tape, store, pooled)?;
        Ok(ForwardTrace {
            visual_tokens,
            tactile_tokens,
            fusion,
            queries,
            aligned,
            logits,
        })
    }

    /// Logits (1×K) for one sample.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        visual: &[ImageTensor],
        tactile: &[ImageTensor],
        condition: Option<&Tensor<f32>>,
    ) -> Result<Var> {
        Ok(self.forward_traced(tape, visual, tactile, condition)?.logits)
    }

    /// Flattens 2N×P×Dc to rows and keeps the block the mode asks for.
    fn query_rows<T: Real>(&self, tape: &mut Tape<T>, e: Var) -> Result<Var> {
        let shape = tape.shape(e).to_vec();
        let n = self.config.frames;
        if shape.len() != 3 || shape[0] != 2 * n {
            return Err(Error::dim("condition embedding", &shape, &[2 * n, 0, 0]));
        }
        let rows = tape.reshape(e, &[shape[0] * shape[1], shape[2]])?;
        let block = n * shape[1];
        match self.config.condition {
            ConditionMode::Both | ConditionMode::None => Ok(rows),
            ConditionMode::Vision => tape.narrow(rows, 0, 0, block),
            ConditionMode::Touch => tape.narrow(rows, 0, block, block),
        }
    }

    /// Predicted class of one sample.
    pub fn predict(&self, sample: &Sample, condition: Option<&Tensor<f32>>) -> Result<usize> {
        let mut tape = Tape::<f32>::new();
        let logits = self.forward(&mut tape, &sample.visual, &sample.tactile, condition)?;
        Ok(argmax(tape.value(logits).values()))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        if let Some(c) = &self.contrastive {
            c.save(&dir.join("contrastive"))?;
        }
        write_metadata(&dir.join("metadata.txt"), &self.config.metadata())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join("metadata.txt");
        let meta = read_metadata(&path)?;
        let config = ModelConfig::from_metadata(&meta, &path)?;
        let cdir = dir.join("contrastive");
        let contrastive = if cdir.join("metadata.txt").exists() {
            Some(ContrastiveEncoder::load(&cdir)?)
        } else {
            None
        };
        let mut model = Self::new(config, contrastive)?;
        model.store.load(dir)?;
        Ok(model)
    }
}

pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives batch order only; weights come from the model's own seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f64,
    pub eval_acc: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,eval_acc";

    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.epoch, self.train_loss, self.train_acc, self.eval_acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochMetrics>,
    pub best_eval_acc: f64,
    pub wall_clock_secs: f64,
}

impl TrainRecord {
    pub fn final_eval_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |m| m.eval_acc)
    }
}

/// Precomputed condition embeddings, one per sample (empty in mode `none`).
pub fn condition_cache(model: &ConViTacModel, samples: &[Sample]) -> Result<Vec<Option<Tensor<f32>>>> {
    samples.iter().map(|s| model.condition_tensor(s)).collect()
}

fn validate_labels(samples: &[Sample], classes: usize, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Validation(format!("{what} set is empty")));
    }
    if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.label >= classes) {
        return Err(Error::Validation(format!(
            "{what} sample {i} has label {} but the model has {classes} classes",
            s.label
        )));
    }
    Ok(())
}

/// Supervised cross-entropy training over shuffled mini-batches, with an
/// evaluation pass after every epoch. When `out` is given, `metrics.csv`
/// is written there and the weights of the best evaluation epoch are saved
/// to `<out>/checkpoint`. `on_epoch` sees every epoch's metrics as they are
/// produced.
pub fn train_supervised(
    model: &mut ConViTacModel,
    train: &[Sample],
    eval: &[Sample],
    config: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainRecord> {
    config.validate()?;
    let k = model.config.num_classes;
    validate_labels(train, k, "training")?;
    validate_labels(eval, k, "evaluation")?;
    let start = Instant::now();
    let train_cond = condition_cache(model, train)?;
    let eval_cond = condition_cache(model, eval)?;

    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", EpochMetrics::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut adam = Adam::new(&model.store, config.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut record = TrainRecord {
        epochs: Vec::with_capacity(config.epochs),
        best_eval_acc: f64::NEG_INFINITY,
        wall_clock_secs: 0.0,
    };
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::<f32>::new();
            let mut logits = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                logits.push(model.forward(&mut tape, &s.visual, &s.tactile, train_cond[i].as_ref())?);
                labels.push(s.label);
            }
            let stacked = tape.concat(&logits, 0)?;
            let loss = tape.cross_entropy(stacked, &labels, Reduction::Mean)?;
            let values = tape.value(stacked);
            for (r, &label) in labels.iter().enumerate() {
                correct += usize::from(argmax(values.row(r)) == label);
            }
            loss_sum += tape.value(loss).values()[0] as f64 * chunk.len() as f64;
            tape.backward(loss)?;
            let grads = model.store.grads(&tape);
            adam.step(&mut model.store, &grads)?;
        }
        let eval_acc = evaluate_cached(model, eval, &eval_cond)?;
        let m = EpochMetrics {
            epoch,
            train_loss: (loss_sum / train.len() as f64) as f32,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc,
        };
        if let Some((f, path)) = &mut metrics_file {
            writeln!(f, "{}", m.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if eval_acc > record.best_eval_acc {
            record.best_eval_acc = eval_acc;
            if let Some(dir) = out {
                model.save_checkpoint(&dir.join("checkpoint"))?;
            }
        }
        on_epoch(&m);
        record.epochs.push(m);
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(model: &ConViTacModel, samples: &[Sample]) -> Result<f64> {
    validate_labels(samples, model.config.num_classes, "evaluation")?;
    let cond = condition_cache(model, samples)?;
    evaluate_cached(model, samples, &cond)
}

fn evaluate_cached(model: &ConViTacModel, samples: &[Sample], cond: &[Option<Tensor<f32>>]) -> Result<f64> {
    let mut correct = 0usize;
    for (s, c) in samples.iter().zip(cond) {
        correct += usize::from(model.predict(s, c.as_ref())? == s.label);
    }
    Ok(correct as f64 / samples.len() as f64)
}
