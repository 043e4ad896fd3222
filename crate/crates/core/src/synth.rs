//! Procedural paired visual/tactile data and the manifest format used to
//! store datasets on disk.
//!
//! Every class owns an oriented sinusoidal grating. The visual image shows
//! a background gradient, an object silhouette and the class grating inside
//! a circular contact region; the tactile image shows the same grating seen
//! through a fixed magnification around the contact centre, with radial
//! shading and multiplicative speckle.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::vit::ImageTensor;

pub const MANIFEST_HEADER: [&str; 4] = ["visual", "tactile", "label", "mask"];

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.7;

const CLASS_FREQUENCIES: [f32; 3] = [0.14, 0.2, 0.26];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub pairs_per_class: usize,
    pub size: usize,
    /// Uniform relative jitter applied to a class's grating frequency.
    pub frequency_jitter: f32,
    /// Uniform orientation jitter in radians.
    pub orientation_jitter: f32,
    pub radius_range: (f32, f32),
    /// Scale from visual to tactile coordinates around the contact centre.
    pub magnification: f32,
    /// Standard deviation of additive visual noise and of tactile speckle.
    pub noise_std: f32,
    /// Amplitude of a random low-frequency grating over the background.
    pub clutter: f32,
    /// Scales how far background and object colours stray from mid-grey.
    pub distractor_contrast: f32,
    /// Probability that the tactile texture follows the visual one.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            pairs_per_class: 64,
            size: 32,
            frequency_jitter: 0.05,
            orientation_jitter: 0.08,
            radius_range: (8.0, 11.0),
            magnification: 2.0,
            noise_std: 0.05,
            clutter: 0.0,
            distractor_contrast: 1.0,
            rho: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.pairs_per_class == 0 {
            return bad("pairs_per_class must be positive".into());
        }
        if self.size < 8 {
            return bad(format!("image size must be at least 8, got {}", self.size));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi < self.size as f32 / 2.0) {
            return bad(format!("radius range {lo}..{hi} does not fit a {}-pixel image", self.size));
        }
        if !(self.magnification >= 1.0) {
            return bad(format!("magnification must be at least 1, got {}", self.magnification));
        }
        if !(self.noise_std >= 0.0 && self.clutter >= 0.0 && self.distractor_contrast >= 0.0 && self.frequency_jitter >= 0.0 && self.orientation_jitter >= 0.0)
        {
            return bad("noise, clutter and jitter must be non-negative".into());
        }
        Ok(())
    }

    /// Nominal (frequency in cycles per pixel, orientation in radians) of a class.
    pub fn class_texture(&self, class: usize) -> (f32, f32) {
        let orientation = PI * class as f32 / self.num_classes as f32;
        (CLASS_FREQUENCIES[class % CLASS_FREQUENCIES.len()], orientation)
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.pairs_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample's grating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub class: usize,
    pub frequency: f32,
    pub orientation: f32,
    pub phase: f32,
}

impl Texture {
    fn draw(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Self {
        let (f, o) = spec.class_texture(class);
        let fj = spec.frequency_jitter;
        let oj = spec.orientation_jitter;
        Self {
            class,
            frequency: f * (1.0 + if fj > 0.0 { rng.gen_range(-fj..=fj) } else { 0.0 }),
            orientation: o + if oj > 0.0 { rng.gen_range(-oj..=oj) } else { 0.0 },
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Grating intensity in [0, 1] at offset (dy, dx) from the contact centre.
    pub fn intensity(&self, dy: f32, dx: f32) -> f32 {
        let along = dx * self.orientation.cos() + dy * self.orientation.sin();
        0.5 + 0.5 * (2.0 * PI * self.frequency * along + self.phase).sin()
    }
}

/// Pixel value of textured contact pixels before noise.
fn texture_value(g: f32) -> f32 {
    0.1 + 0.8 * g
}

/// Radial shading of the tactile image, 1 at the centre falling to 0.65 at
/// the edge midpoints.
pub fn tactile_shading(size: usize, y: usize, x: usize) -> f32 {
    let h = size as f32 / 2.0;
    let (dy, dx) = (y as f32 - h, x as f32 - h);
    1.0 - 0.35 * ((dy * dy + dx * dx) / (h * h)).min(1.0)
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub visual: ImageTensor,
    pub tactile: ImageTensor,
    pub label: usize,
    /// H×W, 1 inside the contact region.
    pub contact_mask: Tensor<f32>,
    pub visual_texture: Texture,
    pub tactile_texture: Texture,
    /// (y, x) of the contact centre in visual pixels.
    pub contact_center: (f32, f32),
    pub contact_radius: f32,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` under global seed `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Renders one pair. `class` must be below `spec.num_classes`.
pub fn generate_pair(class: usize, spec: &SynthSpec, sample_seed: u64) -> Result<SamplePair> {
    spec.validate()?;
    if class >= spec.num_classes {
        return Err(Error::Validation(format!(
            "class {class} out of range for {} classes",
            spec.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed) ^ sample_seed);
    let n = spec.size;
    let sz = n as f32;

    let visual_texture = Texture::draw(spec, class, &mut rng);
    let tactile_texture = if rng.gen_bool(spec.rho) {
        visual_texture
    } else {
        let other = rng.gen_range(0..spec.num_classes);
        Texture::draw(spec, other, &mut rng)
    };

    let (rlo, rhi) = spec.radius_range;
    let radius = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
    let cy = rng.gen_range(radius.ceil()..=(sz - 1.0 - radius).floor()).round();
    let cx = rng.gen_range(radius.ceil()..=(sz - 1.0 - radius).floor()).round();

    let bg_dir = rng.gen_range(0.0..2.0 * PI);
    let bg_lo: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.6));
    let bg_hi: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.4..1.0));
    let obj: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let obj_a = radius + rng.gen_range(2.0..6.0);
    let obj_b = radius + rng.gen_range(2.0..6.0);
    let obj_rot = rng.gen_range(0.0..PI);
    let clutter = Texture {
        class: usize::MAX,
        frequency: rng.gen_range(0.05..0.1),
        orientation: rng.gen_range(0.0..PI),
        phase: rng.gen_range(0.0..2.0 * PI),
    };

    let mut visual = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let inside = dy * dy + dx * dx <= radius * radius;
            mask.push(if inside { 1.0 } else { 0.0 });
            let (oy, ox) = (
                dx * obj_rot.cos() + dy * obj_rot.sin(),
                -dx * obj_rot.sin() + dy * obj_rot.cos(),
            );
            let in_object = (oy / obj_a).powi(2) + (ox / obj_b).powi(2) <= 1.0;
            let t = 0.5 + 0.5 * ((x as f32 / sz - 0.5) * bg_dir.cos() + (y as f32 / sz - 0.5) * bg_dir.sin());
            let cl = spec.clutter * (clutter.intensity(y as f32, x as f32) - 0.5);
            let dc = spec.distractor_contrast;
            for c in 0..3 {
                let v = if inside {
                    texture_value(visual_texture.intensity(dy, dx))
                } else if in_object {
                    0.5 + dc * (obj[c] - 0.5)
                } else {
                    0.5 + dc * (bg_lo[c] + (bg_hi[c] - bg_lo[c]) * t - 0.5) + cl
                };
                visual.push(v);
            }
        }
    }
    if spec.noise_std > 0.0 {
        for v in &mut visual {
            *v += spec.noise_std * rng.sample::<f32, _>(StandardNormal);
        }
    }
    visual.iter_mut().for_each(|v| *v = clamp01(*v));

    let half = sz / 2.0;
    let mut tactile = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let dy = (y as f32 - half) / spec.magnification;
            let dx = (x as f32 - half) / spec.magnification;
            let base = tactile_shading(n, y, x) * texture_value(tactile_texture.intensity(dy, dx));
            let speckle = if spec.noise_std > 0.0 {
                1.0 + spec.noise_std * rng.sample::<f32, _>(StandardNormal)
            } else {
                1.0
            };
            let v = clamp01(base * speckle);
            tactile.extend([v, v, v]);
        }
    }

    Ok(SamplePair {
        visual: ImageTensor::new(Tensor::new(&[n, n, 3], visual)?)?,
        tactile: ImageTensor::new(Tensor::new(&[n, n, 3], tactile)?)?,
        label: class,
        contact_mask: Tensor::new(&[n, n], mask)?,
        visual_texture,
        tactile_texture,
        contact_center: (cy, cx),
        contact_radius: radius,
    })
}

/// Class of the `index`-th generated sample: classes are interleaved so
/// any prefix is as balanced as possible.
pub fn class_of(spec: &SynthSpec, index: usize) -> usize {
    index % spec.num_classes
}

/// Generates the full dataset in memory, in canonical order.
pub fn generate_pairs(spec: &SynthSpec) -> Result<Vec<SamplePair>> {
    spec.validate()?;
    (0..spec.len())
        .map(|i| generate_pair(class_of(spec, i), spec, sample_seed(spec.seed, i as u64)))
        .collect()
}

/// Writes every image and mask as a tensor file under `out_dir` plus
/// `manifest.csv`, and returns the manifest path.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = out_dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(&manifest, e))?;
    for i in 0..spec.len() {
        let pair = generate_pair(class_of(spec, i), spec, sample_seed(spec.seed, i as u64))?;
        let names = [
            format!("visual/{i:05}.cvt"),
            format!("tactile/{i:05}.cvt"),
            format!("mask/{i:05}.cvt"),
        ];
        write_tensor(&out_dir.join(&names[0]), pair.visual.tensor())?;
        write_tensor(&out_dir.join(&names[1]), pair.tactile.tensor())?;
        write_tensor(&out_dir.join(&names[2]), &pair.contact_mask)?;
        w.write_record([names[0].as_str(), names[1].as_str(), &pair.label.to_string(), names[2].as_str()])
            .map_err(|e| csv_error(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// One training example with N frames per modality.
#[derive(Clone, Debug)]
pub struct Sample {
    pub visual: Vec<ImageTensor>,
    pub tactile: Vec<ImageTensor>,
    pub label: usize,
    pub mask: Option<Tensor<f32>>,
}

impl From<SamplePair> for Sample {
    fn from(p: SamplePair) -> Self {
        Sample {
            visual: vec![p.visual],
            tactile: vec![p.tactile],
            label: p.label,
            mask: Some(p.contact_mask),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// One path per frame.
    pub visual: Vec<PathBuf>,
    pub tactile: Vec<PathBuf>,
    pub label: usize,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Validation(format!("unknown split {other:?} (expected train, test or all)"))),
        }
    }
}

/// A manifest whose tensor files are read on access.
#[derive(Debug)]
pub struct Dataset {
    rows: Vec<ManifestRow>,
    shape: OnceLock<[usize; 3]>,
}

/// Parses a manifest; paths are resolved relative to its directory and
/// must exist. Frames of one modality may be listed separated by `;`.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected header {}, found {}", MANIFEST_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Load { row, msg: e.to_string() })?;
        let field = |k: usize| record.get(k).map(str::trim).unwrap_or("");
        let paths = |k: usize| -> Result<Vec<PathBuf>> {
            let list: Vec<PathBuf> = field(k).split(';').filter(|s| !s.is_empty()).map(|s| root.join(s)).collect();
            if list.is_empty() {
                return Err(Error::Load {
                    row,
                    msg: format!("empty {} column", MANIFEST_HEADER[k]),
                });
            }
            for p in &list {
                if !p.is_file() {
                    return Err(Error::Load {
                        row,
                        msg: format!("missing {} file {}", MANIFEST_HEADER[k], p.display()),
                    });
                }
            }
            Ok(list)
        };
        let visual = paths(0)?;
        let tactile = paths(1)?;
        if visual.len() != tactile.len() {
            return Err(Error::Load {
                row,
                msg: format!("{} visual frames but {} tactile frames", visual.len(), tactile.len()),
            });
        }
        let label = field(2).parse().map_err(|_| Error::Load {
            row,
            msg: format!("label {:?} is not a class index", field(2)),
        })?;
        let mask = match field(3) {
            "" => None,
            _ => Some(paths(3)?.remove(0)),
        };
        rows.push(ManifestRow { visual, tactile, label, mask });
    }
    Ok(Dataset {
        rows,
        shape: OnceLock::new(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Fixes the H×W×C every image must have. Without this the first image
    /// read sets it.
    pub fn expect_shape(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        let want = [height, width, channels];
        let got = *self.shape.get_or_init(|| want);
        if got != want {
            return Err(Error::Validation(format!("dataset shape already fixed at {got:?}")));
        }
        Ok(())
    }

    fn read_image(&self, path: &Path) -> Result<ImageTensor> {
        let t = read_tensor(path)?;
        let shape = t.shape().to_vec();
        let expected = *self
            .shape
            .get_or_init(|| if shape.len() == 3 { [shape[0], shape[1], shape[2]] } else { [0, 0, 0] });
        if shape != expected {
            return Err(Error::Validation(format!(
                "{}: expected a {}×{}×{} image, found shape {:?}",
                path.display(),
                expected[0],
                expected[1],
                expected[2],
                shape
            )));
        }
        ImageTensor::new(t)
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        let row = &self.rows[index];
        let visual = row.visual.iter().map(|p| self.read_image(p)).collect::<Result<Vec<_>>>()?;
        let tactile = row.tactile.iter().map(|p| self.read_image(p)).collect::<Result<Vec<_>>>()?;
        let mask = match &row.mask {
            Some(p) => {
                let m = read_tensor(p)?;
                let [h, w, _] = *self.shape.get().expect("set by image reads");
                if m.shape() != [h, w] {
                    return Err(Error::Validation(format!(
                        "{}: expected a {h}×{w} mask, found shape {:?}",
                        p.display(),
                        m.shape()
                    )));
                }
                Some(m)
            }
            None => None,
        };
        Ok(Sample {
            visual,
            tactile,
            label: row.label,
            mask,
        })
    }

    pub fn load(&self, indices: &[usize]) -> Result<Vec<Sample>> {
        indices.iter().map(|&i| self.get(i)).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let (train, test) = stratified_split(&self.labels(), TRAIN_FRACTION);
        match split {
            Split::Train => train,
            Split::Test => test,
            Split::All => (0..self.len()).collect(),
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.load(&self.split_indices(split))
    }
}

/// Per class, the first round(fraction·count) rows in manifest order go to
/// the training split and the rest to the test split.
pub fn stratified_split(labels: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut totals = vec![0usize; classes];
    labels.iter().for_each(|&l| totals[l] += 1);
    let mut seen = vec![0usize; classes];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let quota = (totals[l] as f64 * fraction).round() as usize;
        if seen[l] < quota {
            train.push(i);
        } else {
            test.push(i);
        }
        seen[l] += 1;
    }
    (train, test)
}
