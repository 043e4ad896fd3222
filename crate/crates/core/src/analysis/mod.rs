//! Gradient-check harness, Grad-CAM saliency, PCA feature export and the
//! ablation runner.

mod ablation;
mod features;
mod gradsuite;
mod pca;
mod saliency;

pub use ablation::{ablation_run, seed_wins, summarize, AblationCell, AblationGrid, AblationSummary, ABLATION_HEADER};
pub use features::{export_features, extract_features, FeatureExport, FeatureSet};
pub use gradsuite::{gradcheck_model, gradcheck_suite, GradCheckCase, GRADCHECK_EPS, GRADCHECK_TOL};
pub use pca::{covariance, pca_2d, PcaProjection};
pub use saliency::{grad_cam, mask_mass, saliency_report, SaliencyMap, SaliencyReport};
