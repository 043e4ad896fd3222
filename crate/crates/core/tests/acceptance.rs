//! End-to-end acceptance criteria. Every criterion runs in order inside one
//! test so that timings are not distorted by parallel tests, and each
//! prints one PASS/FAIL line whether or not the others succeed.

use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convitac::analysis::{ablation_run, pca_2d, seed_wins, summarize, AblationCell, AblationGrid};
use convitac::contrastive::{
    nt_xent_loss, pretrain, retrieval_accuracy, similarity_matrix, similarity_matrix_masked, ContrastiveEncoder,
    PretrainConfig,
};
use convitac::fusion::FusionKind;
use convitac::pipeline::{train_supervised, ConViTacModel, ConditionMode, ModelConfig, TrainConfig};
use convitac::synth::{generate_pairs, stratified_split, Sample, SynthSpec, TRAIN_FRACTION};
use convitac::tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor, Tape, Tensor};
use convitac::vit::{EncoderConfig, ImageTensor};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(id: usize, name: &str, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (verdict, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    // written past the test harness capture so the lines always show
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{verdict}] criterion {id:2} {name}: {detail} ({secs:.1}s)");
    let _ = out.flush();
    ok
}

// ---- shared data ------------------------------------------------------

struct Data {
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn synthetic_data() -> Data {
    let spec = SynthSpec {
        num_classes: 8,
        pairs_per_class: 64,
        size: 32,
        rho: 1.0,
        seed: 0,
        ..SynthSpec::default()
    };
    let pairs = generate_pairs(&spec).unwrap();
    let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    let (train_idx, test_idx) = stratified_split(&labels, TRAIN_FRACTION);
    let samples: Vec<Sample> = pairs.into_iter().map(Sample::from).collect();
    Data {
        train: train_idx.iter().map(|&i| samples[i].clone()).collect(),
        test: test_idx.iter().map(|&i| samples[i].clone()).collect(),
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn nt_xent_f32(rows: &[Vec<f64>], b: usize, tau: f64) -> f64 {
    let mut tape = Tape::<f32>::new();
    let p = tape.constant(rows_tensor(rows).cast());
    let s = similarity_matrix(&mut tape, p, tau).unwrap();
    let l = nt_xent_loss(&mut tape, s, b).unwrap();
    tape.value(l).values()[0] as f64
}

/// Direct enumeration in 64-bit: for each row, the positive against every
/// other row.
fn nt_xent_oracle(rows: &[Vec<f64>], b: usize, tau: f64) -> f64 {
    let n = 2 * b;
    let sim = |i: usize, j: usize| rows[i].iter().zip(&rows[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    (0..n)
        .map(|i| {
            let pos = (i + b) % n;
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
            -(sim(i, pos).exp() / denom).ln()
        })
        .sum()
}

// ---- criteria ---------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_convitac"))
        .arg("gradcheck")
        .output()
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cases: Vec<&str> = stdout.lines().filter(|l| l.contains("max rel err")).collect();
    let failed: Vec<&str> = cases
        .iter()
        .filter(|l| !l.starts_with("ok"))
        .filter_map(|l| l.split_whitespace().nth(1))
        .collect();
    let models = cases.iter().filter(|l| l.contains("full_model")).count();
    let worst = cases
        .iter()
        .filter_map(|l| l.split_whitespace().nth(5)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    check(
        out.status.success() && !cases.is_empty() && failed.is_empty() && models == 3 && secs < 60.0,
        format!(
            "{} cases incl. {models} full models, worst {worst:.2e}, failed {failed:?}, {}, {secs:.1}s",
            cases.len(),
            out.status
        ),
    )
}

fn nt_xent_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = random_unit_rows(&mut rng, 1, 8);
    let b1 = nt_xent_f32(&[one[0].clone(), one[0].clone()], 1, 0.07);
    if b1 != 0.0 {
        return Err(format!("B=1 loss {b1}"));
    }
    let e = random_unit_rows(&mut rng, 1, 8)[0].clone();
    let b2 = nt_xent_f32(&vec![e; 4], 2, 0.07);
    let want = 4.0 * 3f64.ln();
    if (b2 - want).abs() >= 1e-5 {
        return Err(format!("B=2 equal embeddings {b2} vs {want}"));
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(2..=8);
        let tau = [0.07, 0.1, 0.5, 1.0][rng.gen_range(0..4)];
        let rows = random_unit_rows(&mut rng, 2 * b, 16);
        worst = worst.max((nt_xent_f32(&rows, b, tau) - nt_xent_oracle(&rows, b, tau)).abs());
    }
    check(
        worst < 1e-5,
        format!("B=1 → {b1}, B=2 → {b2:.7} (4 ln 3 = {want:.7}), 100 random trials max |Δ| {worst:.2e}"),
    )
}

fn diagonal_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = rng.gen_range(2..=8);
        let rows = rows_tensor(&random_unit_rows(&mut rng, 2 * b, 16)).cast::<f32>();
        let loss = |diag: f32| {
            let mut tape = Tape::<f32>::new();
            let p = tape.constant(rows.clone());
            let s = similarity_matrix_masked(&mut tape, p, 0.07, diag).unwrap();
            let l = nt_xent_loss(&mut tape, s, b).unwrap();
            tape.value(l).values()[0] as f64
        };
        worst = worst.max((loss(f32::NEG_INFINITY) - loss(-1e9)).abs());
    }
    let rows = rows_tensor(&random_unit_rows(&mut rng, 12, 16)).cast::<f32>();
    let argmaxes = |tau: f64| -> Vec<usize> {
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(rows.clone());
        let s = similarity_matrix(&mut tape, p, tau).unwrap();
        let s = tape.value(s);
        (0..12)
            .map(|r| {
                let row = s.row(r);
                (0..12).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    };
    let reference = argmaxes(0.05);
    let invariant = [0.07, 0.5, 1.0].iter().all(|&t| argmaxes(t) == reference);
    let skips_diagonal = reference.iter().enumerate().all(|(i, &j)| i != j);
    check(
        worst < 1e-6 && invariant && skips_diagonal,
        format!("max |loss(−∞) − loss(−1e9)| {worst:.2e}, row argmax invariant over τ: {invariant}"),
    )
}

fn pretraining_retrieval(data: &Data) -> (Outcome, Option<ContrastiveEncoder>) {
    let start = Instant::now();
    let config = EncoderConfig::default();
    let mut enc = match ContrastiveEncoder::new(config, 64) {
        Ok(e) => e,
        Err(e) => return (Err(e.to_string()), None),
    };
    let pairs: Vec<(&ImageTensor, &ImageTensor)> = data.train.iter().map(|s| (&s.visual[0], &s.tactile[0])).collect();
    let cfg = PretrainConfig::default();
    let losses = match pretrain(&mut enc, &pairs, &cfg) {
        Ok(l) => l,
        Err(e) => return (Err(e.to_string()), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let v: Vec<&ImageTensor> = data.test.iter().map(|s| &s.visual[0]).collect();
    let t: Vec<&ImageTensor> = data.test.iter().map(|s| &s.tactile[0]).collect();
    let labels: Vec<usize> = data.test.iter().map(|s| s.label).collect();
    let score = retrieval_accuracy(&enc.embed_pooled(&v).unwrap(), &enc.embed_pooled(&t).unwrap(), &labels);
    let outcome = check(
        cfg.epochs <= 30 && score.class_top1 >= 0.8 && secs < 300.0,
        format!(
            "{} epochs, loss {:.3} → {:.3}, held-out class top-1 {:.3} (instance {:.3}) on {} pairs, {secs:.0}s",
            cfg.epochs,
            losses[0],
            losses[losses.len() - 1],
            score.class_top1,
            score.instance_top1,
            data.test.len()
        ),
    );
    (outcome, Some(enc))
}

/// Same budget as pretraining; at 10 epochs both arms are still climbing.
const ABLATION_EPOCHS: usize = 30;

fn run_ablation(data: &Data, enc: &ContrastiveEncoder) -> Result<Vec<AblationCell>, String> {
    let grid = AblationGrid {
        conditions: vec![ConditionMode::None, ConditionMode::Both],
        fusions: FusionKind::ALL.to_vec(),
        seeds: (0..5).collect(),
    };
    let base = ModelConfig::default();
    let tc = TrainConfig {
        epochs: ABLATION_EPOCHS,
        ..TrainConfig::default()
    };
    ablation_run(&grid, &base, &tc, enc, &data.train, &data.test, None, |_| {}).map_err(|e| e.to_string())
}

fn format_pairs(cells: &[AblationCell], fusion: FusionKind) -> String {
    let acc = |cond, seed| {
        cells
            .iter()
            .find(|c| c.fusion == fusion && c.condition == cond && c.seed == seed)
            .map_or(f64::NAN, |c| c.eval_acc)
    };
    (0..5)
        .map(|s| format!("{:.3}/{:.3}", acc(ConditionMode::None, s), acc(ConditionMode::Both, s)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn condition_ablation(cells: &[AblationCell]) -> Outcome {
    let (wins, total) = seed_wins(cells, FusionKind::Concat, ConditionMode::Both, ConditionMode::None, true);
    check(
        total == 5 && wins >= 4,
        format!(
            "concat both > none in {wins}/{total} seeds (none/both: {})",
            format_pairs(cells, FusionKind::Concat)
        ),
    )
}

fn fusion_ablation(cells: &[AblationCell]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for f in FusionKind::ALL {
        let (wins, total) = seed_wins(cells, f, ConditionMode::Both, ConditionMode::None, false);
        ok &= total == 5 && wins >= 4;
        parts.push(format!("{f} {wins}/{total} ({})", format_pairs(cells, f)));
    }
    let means: Vec<String> = summarize(cells).iter().map(|s| s.to_string()).collect();
    check(ok, format!("CEC ≥ plain: {}; {}", parts.join(", "), means.join("; ")))
}

fn frozen_contrastive(data: &Data, enc: &ContrastiveEncoder) -> Outcome {
    let cfg = ModelConfig::default();
    let mut model = ConViTacModel::new(cfg, Some(enc.clone())).map_err(|e| e.to_string())?;
    let before = model.contrastive().unwrap().store().to_bytes();
    let head_before = model.store().to_bytes();
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train_supervised(&mut model, &data.train[..64], &data.test[..32], &tc, None, |_| {}).map_err(|e| e.to_string())?;
    let after = model.contrastive().unwrap().store().to_bytes();
    let trained = model.store().to_bytes() != head_before;
    check(
        before == after && trained,
        format!(
            "{} contrastive bytes identical: {}, supervised weights changed: {trained}",
            before.len(),
            before == after
        ),
    )
}

fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        height: 16,
        width: 16,
        channels: 3,
        patch_size: 4,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        seed,
    }
}

fn random_image(rng: &mut ChaCha8Rng) -> ImageTensor {
    let v = (0..16 * 16 * 3).map(|_| rng.gen::<f32>()).collect();
    ImageTensor::new(Tensor::new(&[16, 16, 3], v).unwrap()).unwrap()
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_sum = 0.0f64;
    let mut worst_perm = 0.0f64;
    let mut shapes = Vec::new();
    for frames in [1usize, 2] {
        for fusion in FusionKind::ALL {
            let contrastive = ContrastiveEncoder::new(tiny_encoder(5), 8).unwrap();
            let cfg = ModelConfig {
                encoder: tiny_encoder(frames as u64),
                frames,
                num_classes: 4,
                fusion,
                condition: ConditionMode::Both,
                cec_heads: 2,
                ..ModelConfig::default()
            };
            let mut model = ConViTacModel::new(cfg, Some(contrastive)).unwrap();
            model.store_mut().randomize_uniform(&mut rng);
            let visual: Vec<ImageTensor> = (0..frames).map(|_| random_image(&mut rng)).collect();
            let tactile: Vec<ImageTensor> = (0..frames).map(|_| random_image(&mut rng)).collect();
            let p = model.config().encoder.num_patches();

            let mut tape = Tape::<f32>::new();
            let trace = model.forward_traced(&mut tape, &visual, &tactile, None).unwrap();
            let aligned = trace.aligned.as_ref().unwrap();
            let rows = tape.shape(aligned.aligned)[0];
            if rows != 2 * frames * p {
                return Err(format!("{fusion} N={frames}: aligned has {rows} rows, want {}", 2 * frames * p));
            }
            shapes.push(format!("{fusion}/N={frames}:{rows}"));
            for &w in &aligned.weights {
                let w = tape.value(w);
                for r in 0..w.rows_cols().0 {
                    let s: f64 = w.row(r).iter().map(|&x| x as f64).sum();
                    worst_sum = worst_sum.max((s - 1.0).abs());
                }
            }

            // permute keys and values together: both come from the fused rows.
            // f64, since with the spread weights f32 reordering noise alone is ~1e-5
            let fused: Tensor<f64> = tape.value(trace.fusion.fused).cast();
            let queries: Tensor<f64> = tape.value(trace.queries.unwrap()).cast();
            let (n, d) = fused.rows_cols();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permuted: Vec<f64> = perm.iter().flat_map(|&i| fused.row(i).to_vec()).collect();
            let run = |f: Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let q = tape.constant(queries.clone());
                let f = tape.constant(f);
                let out = model.attention().align(&mut tape, model.store(), q, f).unwrap();
                tape.value(out.aligned).clone()
            };
            let a = run(fused.clone());
            let b = run(Tensor::new(&[n, d], permuted).unwrap());
            for (x, y) in a.values().iter().zip(b.values()) {
                worst_perm = worst_perm.max((x - y).abs());
            }
        }
    }
    check(
        worst_sum < 1e-6 && worst_perm < 1e-6,
        format!(
            "rows = 2N·P for {}; max |row sum − 1| {worst_sum:.2e}; max permutation Δ {worst_perm:.2e}",
            shapes.join(" ")
        ),
    )
}

fn pca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_eig = 0.0f64;
    let mut worst_ortho = 0.0f64;
    for d in [2usize, 3, 8, 16, 32, 64] {
        for trial in 0..3 {
            let m = 50 + 40 * trial;
            let scales: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
            let mix: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..m)
                .flat_map(|_| {
                    let z: Vec<f64> = scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect();
                    (0..d).map(|j| (0..d).map(|k| z[k] * mix[k * d + j]).sum::<f64>()).collect::<Vec<_>>()
                })
                .collect();
            let x = Tensor::new(&[m, d], values.clone()).unwrap();
            let p = pca_2d(&x).map_err(|e| e.to_string())?;

            let mat = DMatrix::from_row_slice(m, d, &values);
            let mean = mat.row_mean();
            let centred = DMatrix::from_fn(m, d, |i, j| mat[(i, j)] - mean[j]);
            let cov = centred.transpose() * &centred / (m as f64 - 1.0);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            for k in 0..2.min(d) {
                worst_eig = worst_eig.max((p.eigenvalues[k] - eig[k]).abs());
            }
            let c = &p.components;
            let dot = |a: usize, b: usize| (0..d).map(|i| c.row(a)[i] * c.row(b)[i]).sum::<f64>();
            worst_ortho = worst_ortho
                .max((dot(0, 0) - 1.0).abs())
                .max((dot(1, 1) - 1.0).abs())
                .max(dot(0, 1).abs());
        }
    }
    check(
        worst_eig < 1e-6 && worst_ortho < 1e-6,
        format!("D ∈ {{2..64}}: max eigenvalue Δ vs dense solver {worst_eig:.2e}, max orthonormality Δ {worst_ortho:.2e}"),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_convitac"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let data = root.join("data");
    let d = data.to_str().unwrap();
    cli(&["synth", "--classes", "4", "--per-class", "12", "--size", "16", "--seed", "3", "--out", d])?;
    let manifest = data.join("manifest.csv");
    let m = manifest.to_str().unwrap();
    let small = ["--dim", "16", "--depth", "1", "--heads", "2", "--patch", "4"];
    for run in ["a", "b"] {
        let pre = root.join(run).join("pre");
        let p = pre.to_str().unwrap();
        let mut args = vec!["pretrain", "--data", m, "--out", p, "--seed", "5", "--epochs", "3"];
        args.extend(small);
        cli(&args)?;
        let sup = root.join(run).join("sup");
        let s = sup.to_str().unwrap();
        let mut args = vec!["train", "--data", m, "--out", s, "--pretrained", p, "--seed", "5", "--epochs", "3"];
        args.extend(small);
        cli(&args)?;
    }
    let a = dir_bytes(&root.join("a"));
    let b = dir_bytes(&root.join("b"));
    let has_ckpt = a.iter().any(|(n, _)| n.starts_with("sup/checkpoint/"));
    let has_metrics = a.iter().any(|(n, _)| n == "sup/metrics.csv");
    check(
        a == b && has_ckpt && has_metrics,
        format!("{} files (metrics.csv, checkpoints, encoder) byte-identical: {}", a.len(), a == b),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let contrastive = ContrastiveEncoder::new(tiny_encoder(2), 8).unwrap();
    let cfg = ModelConfig {
        encoder: tiny_encoder(4),
        num_classes: 5,
        fusion: FusionKind::Sws,
        cec_heads: 2,
        ..ModelConfig::default()
    };
    let mut model = ConViTacModel::new(cfg, Some(contrastive)).unwrap();
    model.store_mut().randomize_uniform(&mut rng);
    let dir = tmp.path().join("ckpt");
    model.save_checkpoint(&dir).map_err(|e| e.to_string())?;
    let loaded = ConViTacModel::load_checkpoint(&dir).map_err(|e| e.to_string())?;
    let visual = [random_image(&mut rng)];
    let tactile = [random_image(&mut rng)];
    let logits = |m: &ConViTacModel| {
        let mut tape = Tape::<f32>::new();
        let l = m.forward(&mut tape, &visual, &tactile, None).unwrap();
        tape.value(l).values().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    let forward_same = logits(&model) == logits(&loaded);

    let mut specials = vec![0.0f32, -0.0, f32::INFINITY, f32::NEG_INFINITY, f32::MIN_POSITIVE / 2.0, f32::NAN];
    specials.extend((0..18).map(|_| rng.gen_range(-1e6f32..1e6)));
    let t = Tensor::new(&[2, 3, 4], specials).unwrap();
    let path = tmp.path().join("t.cvt");
    write_tensor(&path, &t).map_err(|e| e.to_string())?;
    let back = read_tensor(&path).map_err(|e| e.to_string())?;
    let decoded = decode_tensor(&encode_tensor(&t), &path).map_err(|e| e.to_string())?;
    let bits = |x: &Tensor<f32>| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let cvt_same = back.shape() == t.shape() && bits(&back) == bits(&t) && bits(&decoded) == bits(&t);
    check(
        forward_same && cvt_same,
        format!("forward logits bit-identical: {forward_same}; tensor file round trip bit-exact: {cvt_same}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut ok = true;
    ok &= report(1, "gradient check suite", gradient_suite);
    ok &= report(2, "NT-Xent oracles", nt_xent_oracles);
    ok &= report(3, "diagonal masking and temperature", diagonal_masking);

    let data = synthetic_data();
    let mut encoder = None;
    ok &= report(4, "contrastive pretraining retrieval", || {
        let (outcome, enc) = pretraining_retrieval(&data);
        encoder = enc;
        outcome
    });

    let mut cells = None;
    ok &= report(5, "condition ablation (both > none)", || {
        let enc = encoder.as_ref().ok_or("needs the pretrained encoder")?;
        let c = run_ablation(&data, enc)?;
        let outcome = condition_ablation(&c);
        cells = Some(c);
        outcome
    });
    ok &= report(6, "fusion ablation (CEC ≥ plain)", || {
        fusion_ablation(cells.as_ref().ok_or("needs the ablation run of criterion 5")?)
    });
    ok &= report(7, "contrastive encoder stays frozen", || match &encoder {
        Some(enc) => frozen_contrastive(&data, enc),
        None => Err("needs the pretrained encoder".into()),
    });
    ok &= report(8, "cross-modal attention invariants", attention_invariants);
    ok &= report(9, "PCA against dense eigensolver", pca_oracle);
    ok &= report(10, "same-seed runs are byte-identical", determinism);
    ok &= report(11, "checkpoint and tensor file round trips", checkpoint_round_trip);
    assert!(ok, "at least one acceptance criterion failed");
}
