use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cec::CrossModalAttention;
use crate::contrastive::{nt_xent_loss, similarity_matrix, ContrastiveEncoder};
use crate::error::Result;
use crate::fusion::{FusionBlock, FusionKind};
use crate::nn::{grad_check_params, ParamStore};
use crate::pipeline::{ConViTacModel, ConditionMode, ModelConfig};
use crate::tensor::{grad_check, GradCheckReport, Reduction, Tape, Tensor, Var};
use crate::vit::{scaled_dot_attention, EncoderConfig, ImageTensor, VitEncoder};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-3;
/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches count")
}

fn image(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> ImageTensor {
    let v = (0..size * size * channels).map(|_| rng.gen::<f32>()).collect();
    ImageTensor::new(Tensor::new(&[size, size, channels], v).expect("shape matches count")).expect("valid image")
}

/// Σ x ⊙ w for a fixed random w, so every output element reaches the loss
/// with a distinct weight.
fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

/// Weights in [−0.5, 0.5] so the check is not taken at the small-init point
/// where most gradients are tiny.
fn spread(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    store.randomize_uniform(rng);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).values_mut().iter_mut().for_each(|x| *x *= 0.5);
    }
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Every differentiable primitive, each with its input shapes.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, v| t.matmul_nt(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], |t, v| t.mul_row(v[0], v[1])),
        ("scale_by", vec![vec![3, 4], vec![1]], |t, v| t.scale_by(v[0], v[1])),
        ("softmax_rows", vec![vec![3, 5]], |t, v| t.softmax(v[0], 1)),
        ("softmax_cols", vec![vec![3, 5]], |t, v| t.softmax(v[0], 0)),
        ("layer_norm", vec![vec![3, 6]], |t, v| Ok(t.layer_norm(v[0], 1e-5))),
        ("gelu", vec![vec![3, 4]], |t, v| Ok(t.gelu(v[0]))),
        ("concat", vec![vec![2, 3], vec![2, 4]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("narrow", vec![vec![4, 5]], |t, v| t.narrow(v[0], 1, 1, 3)),
        ("mean_rows", vec![vec![4, 5]], |t, v| Ok(t.mean_rows(v[0]))),
        ("sum", vec![vec![4, 5]], |t, v| Ok(t.sum(v[0]))),
        ("reshape", vec![vec![4, 6]], |t, v| t.reshape(v[0], &[2, 12])),
        ("normalize_rows", vec![vec![4, 5]], |t, v| Ok(t.normalize_rows(v[0]))),
        ("fill_diagonal", vec![vec![4, 4]], |t, v| t.fill_diagonal(v[0], -3.0)),
        ("cross_entropy_mean", vec![vec![4, 5]], |t, v| t.cross_entropy(v[0], &[0, 3, 1, 4], Reduction::Mean)),
        ("cross_entropy_sum", vec![vec![4, 5]], |t, v| t.cross_entropy(v[0], &[2, 2, 0, 1], Reduction::Sum)),
    ]
}

fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        height: 8,
        width: 8,
        channels: 1,
        patch_size: 4,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        seed,
    }
}

/// The full model at 8×8×1, D = 16, depth 1 with the given fusion, both
/// conditions, weights spread as in [`gradcheck_suite`].
pub fn gradcheck_model(fusion: FusionKind, seed: u64) -> Result<ConViTacModel> {
    let contrastive = ContrastiveEncoder::new(tiny_encoder(seed + 7), 8)?;
    let cfg = ModelConfig {
        encoder: tiny_encoder(seed),
        num_classes: 3,
        fusion,
        condition: ConditionMode::Both,
        cec_heads: 2,
        ..ModelConfig::default()
    };
    let mut model = ConViTacModel::new(cfg, Some(contrastive))?;
    spread(model.store_mut(), &mut ChaCha8Rng::seed_from_u64(seed + 11));
    Ok(model)
}

/// Gradient checks of every primitive, the composed blocks (attention,
/// encoder, NT-Xent, fusion, cross-modal attention) and the full model for
/// each fusion kind. Reports are returned in order; nothing is asserted.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |name: String, report: GradCheckReport| cases.push(GradCheckCase { name, report });

    for (i, (name, shapes, op)) in primitive_cases().into_iter().enumerate() {
        let inputs: Vec<_> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
        let probe_seed = seed ^ (i as u64 + 1);
        let report = grad_check(
            |t, v| {
                let out = op(t, v)?;
                probe(t, out, probe_seed)
            },
            &inputs,
            GRADCHECK_EPS,
        )?;
        push(name.to_string(), report);
    }

    let qkv: Vec<_> = [[3, 4], [5, 4], [5, 3]].iter().map(|s| uniform(&mut rng, s)).collect();
    let report = grad_check(
        |t, v| {
            let (out, _) = scaled_dot_attention(t, v[0], v[1], v[2])?;
            probe(t, out, seed ^ 101)
        },
        &qkv,
        GRADCHECK_EPS,
    )?;
    push("scaled_dot_attention".into(), report);

    let pooled = vec![uniform(&mut rng, &[6, 5])];
    let report = grad_check(
        |t, v| {
            let n = t.normalize_rows(v[0]);
            let s = similarity_matrix(t, n, 0.5)?;
            nt_xent_loss(t, s, 3)
        },
        &pooled,
        GRADCHECK_EPS,
    )?;
    push("nt_xent".into(), report);

    let mut store = ParamStore::new();
    let enc = VitEncoder::new(&mut store, "", tiny_encoder(seed + 3))?;
    spread(&mut store, &mut rng);
    let img = image(&mut rng, 8, 1);
    let report = grad_check_params(&store, GRADCHECK_EPS, |t| {
        let tokens = enc.encode(t, &store, &img)?;
        probe(t, tokens, seed ^ 102)
    })?;
    push("vit_encoder".into(), report);

    for kind in FusionKind::ALL {
        let mut store = ParamStore::new();
        let block = FusionBlock::new(&mut store, "", 4, kind, &mut rng);
        spread(&mut store, &mut rng);
        let frames: Vec<Tensor<f32>> = (0..4).map(|_| uniform(&mut rng, &[3, 4]).cast()).collect();
        let report = grad_check_params(&store, GRADCHECK_EPS, |t| {
            let vars: Vec<Var> = frames.iter().map(|f| t.constant(f.cast())).collect();
            let out = block.forward(t, &store, &vars[..2], &vars[2..])?;
            probe(t, out.fused, seed ^ 103)
        })?;
        push(format!("fusion_{kind}"), report);
    }

    let mut store = ParamStore::new();
    let cec = CrossModalAttention::new(&mut store, "", 6, 8, 2, &mut rng)?;
    spread(&mut store, &mut rng);
    let cond = uniform(&mut rng, &[4, 6]);
    let fused = uniform(&mut rng, &[5, 8]);
    let report = grad_check_params(&store, GRADCHECK_EPS, |t| {
        let c = t.constant(cond.clone());
        let f = t.constant(fused.clone());
        let out = cec.align(t, &store, c, f)?;
        probe(t, out.aligned, seed ^ 104)
    })?;
    push("cross_modal_attention".into(), report);

    for kind in FusionKind::ALL {
        let model = gradcheck_model(kind, seed)?;
        let visual = [image(&mut rng, 8, 1)];
        let tactile = [image(&mut rng, 8, 1)];
        let report = grad_check_params(model.store(), GRADCHECK_EPS, |t| {
            let logits = model.forward(t, &visual, &tactile, None)?;
            t.cross_entropy(logits, &[1], Reduction::Mean)
        })?;
        push(format!("full_model_{kind}"), report);
    }
    Ok(cases)
}
