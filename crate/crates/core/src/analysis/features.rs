use std::path::Path;

use super::pca::{pca_2d, PcaProjection};
use crate::error::{Error, Result};
use crate::pipeline::ConViTacModel;
use crate::synth::Sample;
use crate::tensor::{write_tensor, Tape, Tensor};

/// Mean-pooled modality features after the fusion block's per-modality
/// projections, one row per sample.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub visual: Tensor<f64>,
    pub tactile: Tensor<f64>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FeatureExport {
    pub features: FeatureSet,
    /// PCA of the 2M stacked rows, visual first.
    pub projection: PcaProjection,
    /// Distance between the visual and tactile centroids in PCA space.
    pub centroid_distance: f64,
}

pub fn extract_features(model: &ConViTacModel, samples: &[Sample]) -> Result<FeatureSet> {
    let d = model.config().encoder.dim;
    let mut visual = Vec::with_capacity(samples.len() * d);
    let mut tactile = Vec::with_capacity(samples.len() * d);
    for s in samples {
        let mut tape = Tape::<f32>::new();
        let cond = model.condition_tensor(s)?;
        let trace = model.forward_traced(&mut tape, &s.visual, &s.tactile, cond.as_ref())?;
        let pv = tape.mean_rows(trace.fusion.projected_visual);
        let pt = tape.mean_rows(trace.fusion.projected_tactile);
        visual.extend(tape.value(pv).values().iter().map(|&x| x as f64));
        tactile.extend(tape.value(pt).values().iter().map(|&x| x as f64));
    }
    let m = samples.len();
    Ok(FeatureSet {
        visual: Tensor::new(&[m, d], visual)?,
        tactile: Tensor::new(&[m, d], tactile)?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

/// Extracts features, projects both modalities jointly to 2-D and, when
/// `out` is given, writes `visual_features.cvt`, `tactile_features.cvt` and
/// `pca.csv` (`x,y,modality,label`) into it.
pub fn export_features(model: &ConViTacModel, samples: &[Sample], out: Option<&Path>) -> Result<FeatureExport> {
    let features = extract_features(model, samples)?;
    let stacked = Tensor::concat(&[&features.visual, &features.tactile], 0)?;
    let projection = pca_2d(&stacked)?;
    let m = samples.len();
    let centroid = |rows: &[[f64; 2]]| {
        let n = rows.len() as f64;
        rows.iter().fold([0.0; 2], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n])
    };
    let cv = centroid(&projection.coords[..m]);
    let ct = centroid(&projection.coords[m..]);
    let centroid_distance = ((cv[0] - ct[0]).powi(2) + (cv[1] - ct[1]).powi(2)).sqrt();

    if let Some(dir) = out {
        write_tensor(&dir.join("visual_features.cvt"), &features.visual.cast())?;
        write_tensor(&dir.join("tactile_features.cvt"), &features.tactile.cast())?;
        let path = dir.join("pca.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["x", "y", "modality", "label"]).map_err(|e| csv_error(&path, e))?;
        for (i, p) in projection.coords.iter().enumerate() {
            let (modality, label) = if i < m {
                ("visual", features.labels[i])
            } else {
                ("tactile", features.labels[i - m])
            };
            w.write_record([p[0].to_string(), p[1].to_string(), modality.to_string(), label.to_string()])
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(FeatureExport {
        features,
        projection,
        centroid_distance,
    })
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}
