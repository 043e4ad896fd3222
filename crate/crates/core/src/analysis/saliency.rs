use crate::error::{Error, Result};
use crate::pipeline::ConViTacModel;
use crate::synth::Sample;
use crate::tensor::{Tape, Tensor, Var};

/// Max-normalised H×W maps, one per frame of each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub visual: Vec<Tensor<f32>>,
    pub tactile: Vec<Tensor<f32>>,
}

/// Grad-CAM over the final encoder block: per-channel weights are the
/// patch-averaged gradients of the target logit, the map is the rectified
/// weighted sum of token activations, upsampled from the patch grid to
/// pixels by nearest neighbour.
pub fn grad_cam(
    model: &ConViTacModel,
    sample: &Sample,
    target_class: usize,
    condition: Option<&Tensor<f32>>,
) -> Result<SaliencyMap> {
    let k = model.config().num_classes;
    if target_class >= k {
        return Err(Error::Validation(format!("target class {target_class} out of range for {k} classes")));
    }
    let mut tape = Tape::<f32>::new();
    let trace = model.forward_traced(&mut tape, &sample.visual, &sample.tactile, condition)?;
    let logit = tape.narrow(trace.logits, 1, target_class, 1)?;
    let target = tape.sum(logit);
    if tape.requires_grad(target) {
        tape.backward(target)?;
    }
    let cfg = &model.config().encoder;
    let maps = |tokens: &[Var]| -> Vec<Tensor<f32>> {
        tokens
            .iter()
            .map(|&t| {
                let cam = patch_cam(tape.value(t), tape.grad(t));
                upsample(&cam, cfg.height, cfg.width, cfg.patch_size)
            })
            .collect()
    };
    Ok(SaliencyMap {
        visual: maps(&trace.visual_tokens),
        tactile: maps(&trace.tactile_tokens),
    })
}

/// relu(Σ_d α_d·A[p, d]) with α_d the mean of the gradient over patches.
fn patch_cam(activations: &Tensor<f32>, grad: Option<&[f32]>) -> Vec<f32> {
    let (p, d) = activations.rows_cols();
    let Some(grad) = grad else {
        return vec![0.0; p];
    };
    let mut alpha = vec![0.0f32; d];
    for row in grad.chunks(d) {
        alpha.iter_mut().zip(row).for_each(|(a, g)| *a += g / p as f32);
    }
    (0..p)
        .map(|i| {
            let s: f32 = activations.row(i).iter().zip(&alpha).map(|(x, a)| x * a).sum();
            s.max(0.0)
        })
        .collect()
}

fn upsample(cam: &[f32], height: usize, width: usize, patch: usize) -> Tensor<f32> {
    let gw = width / patch;
    let max = cam.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(cam[(y / patch) * gw + x / patch] * scale);
        }
    }
    Tensor::new(&[height, width], out).expect("positive image size")
}

/// Mean saliency inside and outside a binary mask.
pub fn mask_mass(map: &Tensor<f32>, mask: &Tensor<f32>) -> Result<(f64, f64)> {
    if map.shape() != mask.shape() {
        return Err(Error::dim("mask_mass", map.shape(), mask.shape()));
    }
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&s, &m) in map.values().iter().zip(mask.values()) {
        if m > 0.5 {
            inside += s as f64;
            n_in += 1;
        } else {
            outside += s as f64;
            n_out += 1;
        }
    }
    Ok((inside / n_in.max(1) as f64, outside / n_out.max(1) as f64))
}

/// Visual saliency inside vs outside the contact mask, averaged over
/// samples that carry a mask. Targets are the true labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencyReport {
    pub samples: usize,
    pub inside: f64,
    pub outside: f64,
}

pub fn saliency_report(
    model: &ConViTacModel,
    samples: &[Sample],
    conditions: &[Option<Tensor<f32>>],
) -> Result<SaliencyReport> {
    let mut report = SaliencyReport {
        samples: 0,
        inside: 0.0,
        outside: 0.0,
    };
    for (s, c) in samples.iter().zip(conditions) {
        let Some(mask) = &s.mask else { continue };
        let map = grad_cam(model, s, s.label, c.as_ref())?;
        let (i, o) = mask_mass(&map.visual[0], mask)?;
        report.inside += i;
        report.outside += o;
        report.samples += 1;
    }
    if report.samples > 0 {
        report.inside /= report.samples as f64;
        report.outside /= report.samples as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::gradcheck_model;
    use crate::fusion::FusionKind;
    use crate::vit::ImageTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || {
            let v = (0..64).map(|_| rng.gen::<f32>()).collect();
            ImageTensor::new(Tensor::new(&[8, 8, 1], v).unwrap()).unwrap()
        };
        Sample {
            visual: vec![img()],
            tactile: vec![img()],
            label: 1,
            mask: None,
        }
    }

    #[test]
    fn maps_are_image_sized_and_normalised() {
        let model = gradcheck_model(FusionKind::Concat, 0).unwrap();
        let map = grad_cam(&model, &sample(1), 2, None).unwrap();
        for m in map.visual.iter().chain(&map.tactile) {
            assert_eq!(m.shape(), &[8, 8]);
            assert!(m.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = m.values().iter().copied().fold(0.0f32, f32::max);
            assert!(max == 0.0 || max == 1.0);
        }
    }

    #[test]
    fn zero_head_gives_zero_saliency() {
        let mut model = gradcheck_model(FusionKind::Sws, 1).unwrap();
        let w = model.head().weight;
        model.store_mut().get_mut(w).values_mut().iter_mut().for_each(|x| *x = 0.0);
        let map = grad_cam(&model, &sample(2), 0, None).unwrap();
        for m in map.visual.iter().chain(&map.tactile) {
            assert!(m.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_out_of_range_class() {
        let model = gradcheck_model(FusionKind::Add, 2).unwrap();
        assert!(grad_cam(&model, &sample(3), 3, None).is_err());
    }

    #[test]
    fn mask_mass_splits_mean() {
        let map = Tensor::new(&[2, 2], vec![1.0, 0.5, 0.0, 0.25]).unwrap();
        let mask = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(mask_mass(&map, &mask).unwrap(), (0.75, 0.125));
    }
}
