//! Evaluation suite: identity cosine similarity in a toy feature space,
//! neutrality preservation score, and a generic Frechet feature distance
//! between Gaussian-fit statistics.

use crate::classifier::{EmotionClassifier, EMOTION_LABELS};
use crate::error::{Error, Result};
use crate::image_buf::{box_resize_gray, Image};
use crate::losses::emotion_loss;
use crate::rasterizer::render;
use crate::scene::{GaussianScene, TemplateMesh};
use nalgebra::{DMatrix, DVector};

pub const FEATURE_DIM: usize = 64;
const FEATURE_GRID: usize = 8;

/// 64-dim descriptor: 8x8 grid of per-cell mean intensity, centered and
/// contrast-normalized. Zero-variance images map to the zero vector.
pub fn feature_vector(image: &Image) -> [f64; FEATURE_DIM] {
    let cells = box_resize_gray(
        &image.to_gray(),
        image.width,
        image.height,
        FEATURE_GRID,
        FEATURE_GRID,
    );
    let mean: f64 = cells.iter().sum::<f64>() / FEATURE_DIM as f64;
    let var: f64 = cells.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / FEATURE_DIM as f64;
    let mut out = [0.0; FEATURE_DIM];
    if var > 1e-12 {
        let std = var.sqrt();
        for (o, c) in out.iter_mut().zip(&cells) {
            *o = (c - mean) / std;
        }
    }
    out
}

/// Cosine similarity of the two feature vectors; 0 when either is zero.
pub fn id_similarity(a: &Image, b: &Image) -> f64 {
    let fa = feature_vector(a);
    let fb = feature_vector(b);
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
    let na: f64 = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Neutrality preservation score: expression cross-entropy of the frontal
/// render against the neutral class.
pub fn nps(scene: &GaussianScene, classifier: &EmotionClassifier, mesh: &TemplateMesh) -> f64 {
    let neutral = EMOTION_LABELS.iter().position(|l| *l == "neutral").unwrap();
    let rendered = render(scene, &mesh.frontal_camera);
    emotion_loss(&classifier.predict(&rendered.pixels), neutral).0
}

#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Gaussian fit over a sample of feature vectors; covariance uses the
/// unbiased (n-1) estimator.
pub fn feature_stats(images: &[Image]) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 samples for feature statistics, got {}",
            images.len()
        )));
    }
    let features: Vec<[f64; FEATURE_DIM]> = images.iter().map(feature_vector).collect();
    let n = features.len();
    let mut mean = DVector::zeros(FEATURE_DIM);
    for f in &features {
        for (i, v) in f.iter().enumerate() {
            mean[i] += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    for f in &features {
        let d = DVector::from_iterator(FEATURE_DIM, f.iter().copied()) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(FeatureStats { mean, cov, n })
}

/// Frechet distance between Gaussian statistics:
/// ||mu_a - mu_b||^2 + Tr(C_a + C_b - 2 (C_a C_b)^{1/2}).
/// The matrix square root comes from the symmetric form
/// sqrt(C_a) C_b sqrt(C_a), with negative eigenvalues clipped to zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    for (name, s) in [("a", a), ("b", b)] {
        if s.mean.iter().any(|v| !v.is_finite()) || s.cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature stats {name} not finite")));
        }
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let sqrt_a = psd_sqrt(&a.cov);
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let sqrt_inner = psd_sqrt(&inner);
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * sqrt_inner.trace();
    Ok((mean_term + trace_term).max(0.0))
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from numeric noise are clipped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose()
}
