use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use convitac::analysis::{
    ablation_run, export_features, grad_cam, gradcheck_suite, saliency_report, summarize, AblationGrid,
    GRADCHECK_TOL,
};
use convitac::contrastive::{pretrain, retrieval_accuracy, ContrastiveEncoder, PretrainConfig, DEFAULT_TEMPERATURE};
use convitac::fusion::FusionKind;
use convitac::pipeline::{
    condition_cache, evaluate, train_supervised, AdamConfig, ConViTacModel, ConditionMode, EpochMetrics, ModelConfig,
    TrainConfig,
};
use convitac::synth::{generate_dataset, load_manifest, Dataset, Sample, Split, SynthSpec};
use convitac::tensor::write_tensor;
use convitac::vit::{EncoderConfig, ImageTensor};
use convitac::{Error, Result};

#[derive(Parser)]
#[command(name = "convitac", version, about = "Contrastive visual-tactile representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining of the shared encoder on paired images.
    Pretrain(PretrainArgs),
    /// Supervised training of the full model with a frozen pretrained encoder.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Writes a synthetic paired dataset and its manifest.
    Synth(SynthArgs),
    /// Saliency maps and PCA feature coordinates for a checkpoint.
    Viz(VizArgs),
    /// Trains every condition × fusion × seed cell and tabulates accuracy.
    Ablate(AblateArgs),
    /// Runs the finite-difference gradient suite; fails if any case fails.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Token width D
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Encoder blocks
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Attention heads in the encoders and the cross-modal attention
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Patch side in pixels
    #[arg(long, default_value_t = 8)]
    patch: usize,
}

impl ModelArgs {
    fn encoder(&self, shape: [usize; 3], seed: u64) -> EncoderConfig {
        EncoderConfig {
            height: shape[0],
            width: shape[1],
            channels: shape[2],
            patch_size: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            seed,
            ..EncoderConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate. 0.1 is far too large for these models; 3e-4 is
    /// the tested default.
    #[arg(long, default_value_t = 3e-4)]
    lr: f32,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset manifest
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Width of the pooled projection used by the contrastive loss
    #[arg(long, default_value_t = 64)]
    proj_dim: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Clone)]
struct SupervisedArgs {
    #[arg(long, default_value = "concat")]
    fusion: FusionKind,
    #[arg(long, default_value = "both")]
    condition: ConditionMode,
    /// Adds the mean fused feature to the attention output
    #[arg(long)]
    cec_residual: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory written by `pretrain` (its `encoder` subdirectory or the
    /// run directory itself)
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    sup: SupervisedArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Probability that a pair's tactile texture matches its visual one
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Samples that get saliency files written
    #[arg(long, default_value_t = 16)]
    limit: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// `conditions=none,both;fusions=add,concat,sws`; either part may be
    /// omitted to keep its default
    #[arg(long, default_value = "conditions=none,both;fusions=add,concat,sws")]
    grid: String,
    /// Seeds 0..N
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Results CSV; the summary goes next to it with a `.summary.csv` suffix
    #[arg(long)]
    out: PathBuf,
    /// Pretrained encoder directory; pretrains one with --seed when absent
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    cec_residual: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Epochs for ablation cells when --epochs is not given.
const ABLATION_EPOCHS: usize = 30;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => run_pretrain(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Synth(a) => run_synth(&a),
        Command::Viz(a) => run_viz(&a),
        Command::Ablate(a) => run_ablate(&a),
        Command::Gradcheck(a) => run_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn open(data: &Path) -> Result<(Dataset, [usize; 3])> {
    let ds = load_manifest(data)?;
    if ds.is_empty() {
        return Err(Error::Validation(format!("{} lists no samples", data.display())));
    }
    let first = ds.get(0)?;
    let img = &first.visual[0];
    let shape = [img.height(), img.width(), img.channels()];
    Ok((ds, shape))
}

fn image_pairs(samples: &[Sample]) -> Vec<(&ImageTensor, &ImageTensor)> {
    samples
        .iter()
        .flat_map(|s| s.visual.iter().zip(&s.tactile))
        .collect()
}

fn run_pretrain(a: &PretrainArgs) -> Result<ExitCode> {
    let (ds, shape) = open(&a.data)?;
    let train = ds.load_split(Split::Train)?;
    let test = ds.load_split(Split::Test)?;
    let mut enc = ContrastiveEncoder::new(a.model.encoder(shape, a.optim.seed), a.proj_dim)?;
    let defaults = PretrainConfig::default();
    let cfg = PretrainConfig {
        epochs: a.optim.epochs.unwrap_or(defaults.epochs),
        batch_size: a.optim.batch_size.unwrap_or(defaults.batch_size),
        lr: a.optim.lr,
        tau: a.temperature,
        seed: a.optim.seed,
    };
    let losses = pretrain(&mut enc, &image_pairs(&train), &cfg)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("pretrain_metrics.csv");
    let mut text = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{:.6}\n", i + 1, l));
    }
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    enc.save(&a.out.join("encoder"))?;

    if !test.is_empty() {
        let v: Vec<&ImageTensor> = test.iter().map(|s| &s.visual[0]).collect();
        let t: Vec<&ImageTensor> = test.iter().map(|s| &s.tactile[0]).collect();
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        let score = retrieval_accuracy(&enc.embed_pooled(&v)?, &enc.embed_pooled(&t)?, &labels);
        println!(
            "held-out retrieval: class top-1 {:.4}, instance top-1 {:.4}",
            score.class_top1, score.instance_top1
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn load_encoder(dir: &Path) -> Result<ContrastiveEncoder> {
    let nested = dir.join("encoder");
    if nested.join("metadata.txt").exists() {
        ContrastiveEncoder::load(&nested)
    } else {
        ContrastiveEncoder::load(dir)
    }
}

fn train_config(optim: &OptimArgs, default_epochs: usize) -> TrainConfig {
    let defaults = TrainConfig::default();
    TrainConfig {
        epochs: optim.epochs.unwrap_or(default_epochs),
        batch_size: optim.batch_size.unwrap_or(defaults.batch_size),
        adam: AdamConfig {
            lr: optim.lr,
            ..AdamConfig::default()
        },
        seed: optim.seed,
    }
}

fn model_config(sup: &SupervisedArgs, shape: [usize; 3], seed: u64, classes: usize) -> ModelConfig {
    ModelConfig {
        encoder: sup.model.encoder(shape, seed),
        num_classes: classes,
        fusion: sup.fusion,
        condition: sup.condition,
        cec_heads: sup.model.heads,
        cec_residual: sup.cec_residual,
        ..ModelConfig::default()
    }
}

fn num_classes(ds: &Dataset) -> usize {
    ds.labels().into_iter().max().map_or(0, |m| m + 1)
}

fn run_train(a: &TrainArgs) -> Result<ExitCode> {
    let (ds, shape) = open(&a.data)?;
    let contrastive = a.pretrained.as_deref().map(load_encoder).transpose()?;
    let mut cfg = model_config(&a.sup, shape, a.optim.seed, num_classes(&ds));
    cfg.frames = ds.get(0)?.visual.len();
    let mut model = ConViTacModel::new(cfg, contrastive)?;
    let train = ds.load_split(Split::Train)?;
    let test = ds.load_split(Split::Test)?;
    let tc = train_config(&a.optim, TrainConfig::default().epochs);
    println!("{}", EpochMetrics::CSV_HEADER);
    let record = train_supervised(&mut model, &train, &test, &tc, Some(&a.out), |m| {
        println!("{}", m.csv_line());
        let _ = std::io::stdout().flush();
    })?;
    eprintln!(
        "best eval_acc {:.4}, {:.1}s; checkpoint in {}",
        record.best_eval_acc,
        record.wall_clock_secs,
        a.out.join("checkpoint").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_eval(a: &EvalArgs) -> Result<ExitCode> {
    let model = ConViTacModel::load_checkpoint(&a.ckpt)?;
    let ds = load_manifest(&a.data)?;
    let samples = ds.load_split(a.split)?;
    println!("eval_acc,{:.6}", evaluate(&model, &samples)?);
    Ok(ExitCode::SUCCESS)
}

fn run_synth(a: &SynthArgs) -> Result<ExitCode> {
    // contact radii are specified for 32-pixel images
    let defaults = SynthSpec::default();
    let scale = a.size as f32 / 32.0;
    let spec = SynthSpec {
        radius_range: (defaults.radius_range.0 * scale, defaults.radius_range.1 * scale),
        num_classes: a.classes,
        pairs_per_class: a.per_class,
        size: a.size,
        rho: a.rho,
        seed: a.seed,
        ..defaults
    };
    let manifest = generate_dataset(&spec, &a.out)?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn run_viz(a: &VizArgs) -> Result<ExitCode> {
    let model = ConViTacModel::load_checkpoint(&a.ckpt)?;
    let ds = load_manifest(&a.data)?;
    let samples = ds.load_split(a.split)?;
    let conds = condition_cache(&model, &samples)?;

    let sal_dir = a.out.join("saliency");
    for (i, (s, c)) in samples.iter().zip(&conds).take(a.limit).enumerate() {
        let map = grad_cam(&model, s, s.label, c.as_ref())?;
        for (f, m) in map.visual.iter().enumerate() {
            write_tensor(&sal_dir.join(format!("{i:05}_visual_{f}.cvt")), m)?;
        }
        for (f, m) in map.tactile.iter().enumerate() {
            write_tensor(&sal_dir.join(format!("{i:05}_tactile_{f}.cvt")), m)?;
        }
    }
    let report = saliency_report(&model, &samples, &conds)?;
    let export = export_features(&model, &samples, Some(&a.out))?;
    let summary = format!(
        "condition,{}\nfusion,{}\nsamples,{}\nsaliency_inside_mask,{:.6}\nsaliency_outside_mask,{:.6}\n\
         explained_variance,{:.6},{:.6}\ncentroid_distance,{:.6}\n",
        model.config().condition,
        model.config().fusion,
        samples.len(),
        report.inside,
        report.outside,
        export.projection.explained_variance_ratio[0],
        export.projection.explained_variance_ratio[1],
        export.centroid_distance,
    );
    let path = a.out.join("summary.csv");
    fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(|x| x.trim().parse()).collect()
}

fn parse_grid(spec: &str, seeds: u64) -> Result<AblationGrid> {
    let mut grid = AblationGrid {
        conditions: vec![ConditionMode::None, ConditionMode::Both],
        fusions: FusionKind::ALL.to_vec(),
        seeds: (0..seeds).collect(),
    };
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('=') {
            Some(("conditions", v)) => grid.conditions = parse_list(v)?,
            Some(("fusions", v)) => grid.fusions = parse_list(v)?,
            _ => return Err(Error::Validation(format!("bad grid part {part:?}"))),
        }
    }
    Ok(grid)
}

fn run_ablate(a: &AblateArgs) -> Result<ExitCode> {
    let grid = parse_grid(&a.grid, a.seeds)?;
    let (ds, shape) = open(&a.data)?;
    let train = ds.load_split(Split::Train)?;
    let test = ds.load_split(Split::Test)?;
    let contrastive = match &a.pretrained {
        Some(dir) => load_encoder(dir)?,
        None => {
            let mut enc = ContrastiveEncoder::new(a.model.encoder(shape, a.optim.seed), 64)?;
            let cfg = PretrainConfig {
                seed: a.optim.seed,
                ..PretrainConfig::default()
            };
            pretrain(&mut enc, &image_pairs(&train), &cfg)?;
            enc
        }
    };
    let sup = SupervisedArgs {
        fusion: FusionKind::Concat,
        condition: ConditionMode::Both,
        cec_residual: a.cec_residual,
        model: a.model.clone(),
    };
    let mut base = model_config(&sup, shape, 0, num_classes(&ds));
    base.frames = train[0].visual.len();
    let tc = train_config(&a.optim, ABLATION_EPOCHS);
    println!("condition,fusion,seed,eval_acc");
    let cells = ablation_run(&grid, &base, &tc, &contrastive, &train, &test, Some(&a.out), |c| {
        println!("{},{},{},{:.6}", c.condition, c.fusion, c.seed, c.eval_acc);
    })?;

    let mut text = String::from("condition,fusion,runs,mean,std\n");
    for s in summarize(&cells) {
        println!("{s}");
        text.push_str(&format!("{},{},{},{:.6},{:.6}\n", s.condition, s.fusion, s.runs, s.mean, s.std));
    }
    let mut name = a.out.file_stem().unwrap_or_default().to_os_string();
    name.push(".summary.csv");
    let path = a.out.with_file_name(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let cases = gradcheck_suite(a.seed)?;
    let mut failed = 0;
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:4} {:28} max rel err {:.3e} over {} elements",
            c.name, c.report.max_rel_error, c.report.elements
        );
        failed += usize::from(!c.passed());
    }
    println!("{} of {} cases below {GRADCHECK_TOL:e}", cases.len() - failed, cases.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
