//! Cross-modal multi-head attention: condition embeddings query the fused
//! feature map, and the concatenated head outputs are mixed by `w0`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{trunc_normal, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Real, Tape, Var};
use crate::vit::scaled_dot_attention;

#[derive(Clone, Debug)]
struct HeadWeights {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Clone, Debug)]
pub struct CrossModalAttention {
    heads: Vec<HeadWeights>,
    output: ParamId,
    condition_dim: usize,
    dim: usize,
    head_dim: usize,
}

/// Result of [`CrossModalAttention::align`].
#[derive(Clone, Debug)]
pub struct AlignOutput {
    /// Lq×D aligned feature.
    pub aligned: Var,
    /// Per-head Lq×Lk attention weights.
    pub weights: Vec<Var>,
}

impl CrossModalAttention {
    /// `condition_dim` is the width of the query source, `dim` the width of
    /// the fused feature and of the output. Weights live under `prefix`
    /// with the head index in each name.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        condition_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Validation(format!("dim {dim} not divisible by {heads} heads")));
        }
        let d = dim / heads;
        let heads_w = (0..heads)
            .map(|h| HeadWeights {
                query: store.add(format!("{prefix}head{h}.wq"), trunc_normal(rng, &[condition_dim, d], INIT_STD)),
                key: store.add(format!("{prefix}head{h}.wk"), trunc_normal(rng, &[dim, d], INIT_STD)),
                value: store.add(format!("{prefix}head{h}.wv"), trunc_normal(rng, &[dim, d], INIT_STD)),
            })
            .collect();
        let output = store.add(format!("{prefix}w0"), trunc_normal(rng, &[heads * d, dim], INIT_STD));
        Ok(Self {
            heads: heads_w,
            output,
            condition_dim,
            dim,
            head_dim: d,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn output_weight(&self) -> ParamId {
        self.output
    }

    /// Parameter ids of one head as (w_q, w_k, w_v).
    pub fn head_params(&self, head: usize) -> (ParamId, ParamId, ParamId) {
        let h = &self.heads[head];
        (h.query, h.key, h.value)
    }

    /// softmax((e·w_q)(f·w_k)ᵀ/√d)·(f·w_v) for one head.
    pub fn cross_modal_head<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        condition: Var,
        fused: Var,
        head: usize,
    ) -> Result<(Var, Var)> {
        let cs = tape.shape(condition);
        if cs.len() != 2 || cs[1] != self.condition_dim {
            return Err(Error::dim("cross_modal_head", cs, &[cs[0], self.condition_dim]));
        }
        let fs = tape.shape(fused);
        if fs.len() != 2 || fs[1] != self.dim {
            return Err(Error::dim("cross_modal_head", fs, &[fs[0], self.dim]));
        }
        let h = &self.heads[head];
        let wq = store.bind(tape, h.query);
        let wk = store.bind(tape, h.key);
        let wv = store.bind(tape, h.value);
        let q = tape.matmul(condition, wq)?;
        let k = tape.matmul(fused, wk)?;
        let v = tape.matmul(fused, wv)?;
        scaled_dot_attention(tape, q, k, v)
    }

    /// Concatenates every head's output along features and multiplies by
    /// `w0`. Output rows equal condition rows.
    pub fn align<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        condition: Var,
        fused: Var,
    ) -> Result<AlignOutput> {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for h in 0..self.heads.len() {
            let (o, w) = self.cross_modal_head(tape, store, condition, fused, h)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = tape.concat(&outs, 1)?;
        let w0 = store.bind(tape, self.output);
        let aligned = tape.matmul(cat, w0)?;
        Ok(AlignOutput { aligned, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attention(heads: usize, cdim: usize, dim: usize, seed: u64) -> (ParamStore, CrossModalAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = CrossModalAttention::new(&mut store, "cec/", cdim, dim, heads, &mut rng).unwrap();
        store.randomize_uniform(&mut rng);
        (store, a)
    }

    #[test]
    fn constant_keys_give_mean_of_values() {
        let (mut store, att) = attention(1, 4, 4, 0);
        // zero w_k makes every key identical
        let (_, wk, wv) = att.head_params(0);
        *store.get_mut(wk) = Tensor::zeros(&[4, 4]);
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(rand_t(&[3, 4], 1));
        let f = tape.constant(rand_t(&[5, 4], 2));
        let (out, _) = att.cross_modal_head(&mut tape, &store, e, f, 0).unwrap();
        let wvv = tape.constant(store.get(wv).cast());
        let v = tape.matmul(f, wvv).unwrap();
        let mean = tape.mean_rows(v);
        for r in 0..3 {
            for (a, b) in tape.value(out).row(r).iter().zip(tape.value(mean).values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_is_forced() {
        let (store, att) = attention(2, 6, 4, 1);
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(rand_t(&[7, 6], 3));
        let f = tape.constant(rand_t(&[1, 4], 4));
        let (out, _) = att.cross_modal_head(&mut tape, &store, e, f, 1).unwrap();
        let (_, _, wv) = att.head_params(1);
        let wvv = tape.constant(store.get(wv).cast());
        let v = tape.matmul(f, wvv).unwrap();
        for r in 0..7 {
            for (a, b) in tape.value(out).row(r).iter().zip(tape.value(v).values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn align_output_follows_query_length() {
        let (store, att) = attention(4, 64, 64, 2);
        for fused_rows in [32, 16] {
            let mut tape = Tape::<f32>::new();
            let e = tape.constant(rand_t(&[32, 64], 5).cast());
            let f = tape.constant(rand_t(&[fused_rows, 64], 6).cast());
            let out = att.align(&mut tape, &store, e, f).unwrap();
            assert_eq!(tape.shape(out.aligned), &[32, 64]);
            for w in &out.weights {
                for r in 0..32 {
                    let s: f32 = tape.value(*w).row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let (store, att) = attention(2, 6, 4, 3);
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(rand_t(&[3, 5], 1));
        let f = tape.constant(rand_t(&[3, 4], 1));
        assert!(att.align(&mut tape, &store, e, f).is_err());
        let mut store2 = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(CrossModalAttention::new(&mut store2, "", 4, 6, 4, &mut rng).is_err());
    }

    #[test]
    fn align_gradient_through_pooled_head() {
        let (mut store, att) = attention(2, 6, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = crate::nn::Linear::new(&mut store, "head", 4, 3, &mut rng);
        store.randomize_uniform(&mut rng);
        let e = rand_t(&[5, 6], 10);
        let f = rand_t(&[4, 4], 11);
        let rep = grad_check_params(&store, 1e-3, |t| {
            let ev = t.constant(e.clone());
            let fv = t.constant(f.clone());
            let out = att.align(t, &store, ev, fv)?;
            let pooled = t.mean_rows(out.aligned);
            let pooled = t.reshape(pooled, &[1, 4])?;
            let logits = head.forward(t, &store, pooled)?;
            t.cross_entropy(logits, &[1], crate::tensor::Reduction::Mean)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}
