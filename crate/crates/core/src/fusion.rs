//! Frame stacking, per-modality token projections and the fusion operator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Add,
    Concat,
    /// Softmax-weighted sum over the two modality maps with two learnable gates.
    Sws,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Add, FusionKind::Concat, FusionKind::Sws];

    /// Rows of the fused map for `rows_per_modality` = N·P.
    pub fn fused_rows(self, rows_per_modality: usize) -> usize {
        match self {
            FusionKind::Concat => 2 * rows_per_modality,
            FusionKind::Add | FusionKind::Sws => rows_per_modality,
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(FusionKind::Add),
            "concat" => Ok(FusionKind::Concat),
            "sws" => Ok(FusionKind::Sws),
            other => Err(Error::Validation(format!(
                "unknown fusion kind {other:?} (expected add, concat or sws)"
            ))),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::Sws => "sws",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Tactile,
}

/// Concatenates N per-frame P×D maps along rows, frame 0 first.
pub fn stack_frames<T: Real>(tape: &mut Tape<T>, frames: &[Var]) -> Result<Var> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Validation("stack_frames needs at least one frame".into()))?;
    let shape = tape.shape(*first).to_vec();
    if shape.len() != 2 {
        return Err(Error::Validation(format!("frame features must be P×D, got {shape:?}")));
    }
    for f in &frames[1..] {
        if tape.shape(*f) != shape.as_slice() {
            return Err(Error::dim("stack_frames", &shape, tape.shape(*f)));
        }
    }
    tape.concat(frames, 0)
}

/// Softmax of the two SWS gate logits.
pub fn sws_weights<T: Real>(tape: &mut Tape<T>, gates: Var) -> Result<Var> {
    tape.softmax(gates, 0)
}

/// The fusion operator on projected maps `pv`, `pt` (both N·P×D).
/// `gates` must be given for SWS and is ignored otherwise.
pub fn fuse<T: Real>(tape: &mut Tape<T>, pv: Var, pt: Var, kind: FusionKind, gates: Option<Var>) -> Result<Var> {
    if tape.shape(pv) != tape.shape(pt) {
        return Err(Error::dim("fuse", tape.shape(pv), tape.shape(pt)));
    }
    match kind {
        FusionKind::Add => tape.add(pv, pt),
        FusionKind::Concat => tape.concat(&[pv, pt], 0),
        FusionKind::Sws => {
            let gates = gates.ok_or_else(|| Error::Validation("SWS fusion needs gate parameters".into()))?;
            if tape.value(gates).len() != 2 {
                return Err(Error::dim("fuse", &[2], tape.shape(gates)));
            }
            let w = sws_weights(tape, gates)?;
            let wv = tape.narrow(w, 0, 0, 1)?;
            let wt = tape.narrow(w, 0, 1, 1)?;
            let a = tape.scale_by(pv, wv)?;
            let b = tape.scale_by(pt, wt)?;
            tape.add(a, b)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub kind: FusionKind,
    visual: Linear,
    tactile: Linear,
    gates: Option<ParamId>,
}

/// Intermediate values of [`FusionBlock::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub projected_visual: Var,
    pub projected_tactile: Var,
    pub fused: Var,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, kind: FusionKind, rng: &mut impl Rng) -> Self {
        let visual = Linear::new(store, &format!("{prefix}proj_visual"), dim, dim, rng);
        let tactile = Linear::new(store, &format!("{prefix}proj_tactile"), dim, dim, rng);
        let gates = (kind == FusionKind::Sws).then(|| store.add(format!("{prefix}sws_gates"), Tensor::zeros(&[2])));
        Self {
            kind,
            visual,
            tactile,
            gates,
        }
    }

    pub fn projection(&self, which: Modality) -> &Linear {
        match which {
            Modality::Visual => &self.visual,
            Modality::Tactile => &self.tactile,
        }
    }

    pub fn gates(&self) -> Option<ParamId> {
        self.gates
    }

    /// Row-wise D→D affine map for one modality.
    pub fn modality_project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        stacked: Var,
        which: Modality,
    ) -> Result<Var> {
        let lin = self.projection(which);
        if tape.shape(stacked).len() != 2 || tape.shape(stacked)[1] != lin.fan_in {
            return Err(Error::dim("modality_project", tape.shape(stacked), &[lin.fan_in, lin.fan_out]));
        }
        lin.forward(tape, store, stacked)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        visual_frames: &[Var],
        tactile_frames: &[Var],
    ) -> Result<FusionOutput> {
        let sv = stack_frames(tape, visual_frames)?;
        let st = stack_frames(tape, tactile_frames)?;
        let pv = self.modality_project(tape, store, sv, Modality::Visual)?;
        let pt = self.modality_project(tape, store, st, Modality::Tactile)?;
        let gates = self.gates.map(|g| store.bind(tape, g));
        let fused = fuse(tape, pv, pt, self.kind, gates)?;
        Ok(FusionOutput {
            projected_visual: pv,
            projected_tactile: pt,
            fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn stack_frames_orders_and_routes_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.var(rand_t(&[16, 64], 1));
        let single = stack_frames(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));

        let b = tape.var(rand_t(&[16, 64], 2));
        let s = stack_frames(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(s), &[32, 64]);
        assert_eq!(tape.value(s).row(0), tape.value(a).row(0));
        assert_eq!(tape.value(s).row(16), tape.value(b).row(0));

        let w = tape.constant(rand_t(&[32, 64], 3));
        let y = tape.mul(s, w).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &tape.value(w).values()[..16 * 64]);
        assert_eq!(tape.grad(b).unwrap(), &tape.value(w).values()[16 * 64..]);

        let c = tape.var(rand_t(&[8, 64], 4));
        assert!(matches!(stack_frames(&mut tape, &[a, c]), Err(Error::Dimension { .. })));
        assert!(stack_frames::<f64>(&mut tape, &[]).is_err());
    }

    #[test]
    fn modality_projection_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = FusionBlock::new(&mut store, "", 4, FusionKind::Add, &mut rng);
        let w = block.projection(Modality::Visual).weight;
        *store.get_mut(w) = Tensor::eye(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_t(&[3, 4], 5));
        let y = block.modality_project(&mut tape, &store, x, Modality::Visual).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let wt = block.projection(Modality::Tactile).weight;
        *store.get_mut(wt) = Tensor::zeros(&[4, 4]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_t(&[3, 4], 6));
        let y = block.modality_project(&mut tape, &store, x, Modality::Tactile).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));

        let bad = tape.constant(rand_t(&[3, 5], 6));
        assert!(block.modality_project(&mut tape, &store, bad, Modality::Visual).is_err());
    }

    #[test]
    fn modality_projection_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = FusionBlock::new(&mut store, "", 4, FusionKind::Sws, &mut rng);
        store.randomize_uniform(&mut rng);
        let xv = rand_t(&[6, 4], 7);
        let xt = rand_t(&[6, 4], 8);
        let rep = grad_check_params(&store, 1e-3, |t| {
            let v = t.constant(xv.clone());
            let u = t.constant(xt.clone());
            let out = block.forward(t, &store, &[v], &[u])?;
            let sq = t.mul(out.fused, out.fused)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn fuse_examples() {
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(rand_t(&[16, 64], 9));
        let zero = tape.constant(Tensor::zeros(&[16, 64]));
        let y = fuse(&mut tape, pv, zero, FusionKind::Add, None).unwrap();
        assert_eq!(tape.value(y), tape.value(pv));

        let pt = tape.constant(rand_t(&[16, 64], 10));
        let y = fuse(&mut tape, pv, pt, FusionKind::Concat, None).unwrap();
        assert_eq!(tape.shape(y), &[32, 64]);

        let g = tape.constant(Tensor::new(&[2], vec![0.3, 0.3]).unwrap());
        let y = fuse(&mut tape, pv, pt, FusionKind::Sws, Some(g)).unwrap();
        let (a, b) = (tape.value(pv).values(), tape.value(pt).values());
        for ((&o, &x), &z) in tape.value(y).values().iter().zip(a).zip(b) {
            assert!((o - 0.5 * (x + z)).abs() < 1e-12);
        }

        assert!(fuse(&mut tape, pv, pt, FusionKind::Sws, None).is_err());
        let short = tape.constant(rand_t(&[8, 64], 11));
        assert!(fuse(&mut tape, pv, short, FusionKind::Add, None).is_err());
        assert!("mean".parse::<FusionKind>().is_err());
        assert_eq!("SWS".parse::<FusionKind>().unwrap(), FusionKind::Sws);
    }

    proptest! {
        #[test]
        fn sws_weights_are_convex(g0 in -50.0f64..50.0, g1 in -50.0f64..50.0) {
            let mut tape = Tape::<f64>::new();
            let g = tape.constant(Tensor::new(&[2], vec![g0, g1]).unwrap());
            let w = sws_weights(&mut tape, g).unwrap();
            let v = tape.value(w).values();
            prop_assert!(v[0] >= 0.0 && v[1] >= 0.0);
            prop_assert!((v[0] + v[1] - 1.0).abs() < 1e-6);
        }

        #[test]
        fn concat_fusion_splits_back_exactly(rows in 1usize..6, seed in 0u64..1000) {
            let mut tape = Tape::<f32>::new();
            let a = rand_t(&[rows, 3], seed).cast::<f32>();
            let b = rand_t(&[rows, 3], seed + 1).cast::<f32>();
            let pv = tape.constant(a.clone());
            let pt = tape.constant(b.clone());
            let y = fuse(&mut tape, pv, pt, FusionKind::Concat, None).unwrap();
            let parts = tape.value(y).split(0, &[rows, rows]).unwrap();
            prop_assert_eq!(&parts[0], &a);
            prop_assert_eq!(&parts[1], &b);
        }

        #[test]
        fn fusion_is_row_permutation_equivariant(seed in 0u64..1000, kind_ix in 0usize..3) {
            let kind = FusionKind::ALL[kind_ix];
            let rows = 5;
            let a = rand_t(&[rows, 3], seed);
            let b = rand_t(&[rows, 3], seed + 7);
            let mut perm: Vec<usize> = (0..rows).collect();
            perm.rotate_left(seed as usize % rows);
            perm.swap(0, rows - 1);
            let permute = |t: &Tensor<f64>| {
                let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let run = |x: Tensor<f64>, y: Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let pv = tape.constant(x);
                let pt = tape.constant(y);
                let g = tape.constant(Tensor::new(&[2], vec![0.2, -0.4]).unwrap());
                let out = fuse(&mut tape, pv, pt, kind, Some(g)).unwrap();
                tape.value(out).clone()
            };
            let base = run(a.clone(), b.clone());
            let permuted = run(permute(&a), permute(&b));
            let expected = if kind == FusionKind::Concat {
                let halves = base.split(0, &[rows, rows]).unwrap();
                Tensor::concat(&[&permute(&halves[0]), &permute(&halves[1])], 0).unwrap()
            } else {
                permute(&base)
            };
            prop_assert_eq!(permuted, expected);
        }
    }
}
