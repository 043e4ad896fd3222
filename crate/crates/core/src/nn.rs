//! Named parameter storage and the small layers shared by every model part.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{grad_check, read_tensor, write_tensor, GradCheckReport, Real, Tape, Tensor, Var};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of `f32` parameters.
///
/// Parameters are bound onto a tape once per tape, so a parameter used in
/// several places accumulates its gradient across all uses. A frozen store
/// binds its parameters as constants.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Binds a parameter as a tape leaf, reusing the leaf if this tape
    /// already holds it.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        let key = (self.uid, id.0);
        if let Some(&v) = tape.bound.get(&key) {
            return v;
        }
        let v = tape.leaf(self.values[id.0].cast(), !self.frozen);
        tape.bound.insert(key, v);
        v
    }

    /// Per-parameter gradients from the tape, `None` where a parameter was
    /// never bound or is frozen.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Option<Vec<f32>>> {
        (0..self.values.len())
            .map(|i| {
                let v = tape.bound.get(&(self.uid, i))?;
                tape.grad(*v).map(|g| g.iter().map(|x| x.as_f32()).collect())
            })
            .collect()
    }

    /// Uses an existing leaf as this parameter's binding on `tape`.
    pub fn attach<T: Real>(&self, tape: &mut Tape<T>, id: ParamId, var: Var) {
        tape.bound.insert((self.uid, id.0), var);
    }

    /// Redraws every value uniformly from [-1, 1].
    pub fn randomize_uniform(&mut self, rng: &mut impl Rng) {
        for v in &mut self.values {
            v.values_mut().iter_mut().for_each(|e| *e = rng.gen_range(-1.0..=1.0));
        }
    }

    /// Leaf handle of a bound parameter on `tape`.
    pub fn bound_var<T: Real>(&self, tape: &Tape<T>, id: ParamId) -> Option<Var> {
        tape.bound.get(&(self.uid, id.0)).copied()
    }

    /// Concatenated little-endian bytes of every parameter, in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(Tensor::to_bytes_f32).collect()
    }

    /// Writes `<dir>/<name>.cvt` for every parameter; `/` in names becomes
    /// a subdirectory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, value) in self.names.iter().zip(&self.values) {
            write_tensor(&dir.join(format!("{name}.cvt")), value)?;
        }
        Ok(())
    }

    /// Replaces every parameter with the file saved under its name.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let path = dir.join(format!("{name}.cvt"));
            let loaded = read_tensor(&path)?;
            if loaded.shape() != value.shape() {
                return Err(Error::Validation(format!(
                    "{}: expected shape {:?}, found {:?}",
                    path.display(),
                    value.shape(),
                    loaded.shape()
                )));
            }
            *value = loaded;
        }
        Ok(())
    }
}

/// Finite-difference check of `loss` with respect to every parameter of
/// `store`, in 64-bit. `loss` must bind parameters through `store`.
pub fn grad_check_params<F>(store: &ParamStore, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let inputs: Vec<Tensor<f64>> = store.values.iter().map(Tensor::cast).collect();
    grad_check(
        |tape, vars| {
            for (i, &v) in vars.iter().enumerate() {
                store.attach(tape, ParamId(i), v);
            }
            loss(tape)
        },
        &inputs,
        eps,
    )
}

/// Standard normal scaled by `std`, redrawn outside ±2 std.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let z: f32 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, values).expect("shape matches count")
}

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Row-wise affine map x·W + b.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, T::from_f64(LN_EPS));
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Reads `key=value` lines, ignoring blanks and `#` comments.
pub fn read_metadata(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {} is not key=value", i + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn write_metadata(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn meta_get<V: std::str::FromStr>(
    meta: &HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<V> {
    let raw = meta.get(key).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: format!("missing key {key}"),
    })?;
    raw.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("cannot parse {key}={raw}"),
    })
}
