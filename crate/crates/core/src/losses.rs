//! Mesh-adherence regularizers, the expression cross-entropy, and the
//! weighted total that the trainer descends. Positional and Laplacian terms
//! are means over splats so the weights stay resolution-independent.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::rasterizer::SplatGradients;
use crate::scene::{GaussianScene, TemplateMesh};
use serde::{Deserialize, Serialize};

pub const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_lap: f64,
    pub lambda_emotion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pos: 0.1,
            lambda_lap: 0.1,
            lambda_emotion: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pos, self.lambda_lap, self.lambda_emotion];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Mean squared distance between each splat and its bound template vertex.
pub fn pos_loss(scene: &GaussianScene, mesh: &TemplateMesh) -> (f64, SplatGradients) {
    let n = scene.splats.len();
    let mut grads = SplatGradients::zeros(n);
    let mut value = 0.0;
    for (i, splat) in scene.splats.iter().enumerate() {
        let v = mesh.vertices[scene.binding[i]];
        let g = grads.splat_mut(i);
        for k in 0..3 {
            let d = splat.position[k] as f64 - v[k];
            value += d * d;
            g[k] = 2.0 * d / n as f64;
        }
    }
    (value / n as f64, grads)
}

#[derive(Debug, Clone)]
pub struct LaplacianResult {
    pub value: f64,
    pub gradients: SplatGradients,
    /// Splats bound to vertices without usable neighbors, excluded from the
    /// sum.
    pub skipped: usize,
}

/// Deviation of uniform-weight Laplacian coordinates from the template's.
/// For splat i, delta_i = position_i - mean position of splats bound to
/// neighbors of binding(i); delta_bar_i is the same expression with every
/// splat replaced by its bound vertex. Value is the mean of
/// ||delta_i - delta_bar_i||^2 over all splats.
pub fn laplacian_loss(scene: &GaussianScene, mesh: &TemplateMesh) -> LaplacianResult {
    let n = scene.splats.len();
    // splats bound to each vertex
    let mut bound: Vec<Vec<usize>> = vec![Vec::new(); mesh.vertices.len()];
    for (i, &b) in scene.binding.iter().enumerate() {
        bound[b].push(i);
    }
    let mut grads = SplatGradients::zeros(n);
    let mut value = 0.0;
    let mut skipped = 0;
    for (i, splat) in scene.splats.iter().enumerate() {
        let vi = scene.binding[i];
        let neighbor_splats: Vec<usize> = mesh.adjacency[vi]
            .iter()
            .flat_map(|&vj| bound[vj].iter().copied())
            .collect();
        if neighbor_splats.is_empty() {
            skipped += 1;
            continue;
        }
        let m = neighbor_splats.len() as f64;
        let mut diff = [0.0f64; 3];
        for k in 0..3 {
            let mut mean_pos = 0.0;
            let mut mean_vert = 0.0;
            for &j in &neighbor_splats {
                mean_pos += scene.splats[j].position[k] as f64;
                mean_vert += mesh.vertices[scene.binding[j]][k];
            }
            let delta = splat.position[k] as f64 - mean_pos / m;
            let delta_bar = mesh.vertices[vi][k] - mean_vert / m;
            diff[k] = delta - delta_bar;
            value += diff[k] * diff[k];
        }
        for k in 0..3 {
            grads.splat_mut(i)[k] += 2.0 * diff[k] / n as f64;
        }
        for &j in &neighbor_splats {
            let g = grads.splat_mut(j);
            for k in 0..3 {
                g[k] -= 2.0 * diff[k] / (n as f64 * m);
            }
        }
    }
    LaplacianResult {
        value: value / n as f64,
        gradients: grads,
        skipped,
    }
}

/// Cross-entropy against a one-hot target with the probability clamped at
/// 1e-8 so the value and gradient stay finite.
pub fn emotion_loss(probs: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < probs.len());
    let p = probs[target].max(PROB_CLAMP);
    let mut d_probs = vec![0.0; probs.len()];
    if probs[target] > PROB_CLAMP {
        d_probs[target] = -1.0 / p;
    }
    (-p.ln(), d_probs)
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub ism_residual_norm: f64,
    pub pos: f64,
    pub lap: f64,
    pub emotion: f64,
    pub total: f64,
    pub ism_grad_norm: f64,
    pub pos_grad_norm: f64,
    pub lap_grad_norm: f64,
    pub emotion_grad_norm: f64,
    pub lap_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub report: LossReport,
    pub gradients: SplatGradients,
}

/// Weighted aggregate. The ISM term contributes only a gradient, so the
/// scalar total logs its residual norm in place of a loss value.
pub fn total_loss(
    ism_grads: &SplatGradients,
    ism_residual_norm: f64,
    pos: (f64, &SplatGradients),
    lap: &LaplacianResult,
    emotion: Option<(f64, &SplatGradients)>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    for (name, v) in [
        ("ism", ism_residual_norm),
        ("pos", pos.0),
        ("lap", lap.value),
        ("emotion", emotion.map_or(0.0, |(v, _)| v)),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss term is not finite")));
        }
    }
    let emotion_value = emotion.map_or(0.0, |(v, _)| v);
    let total = ism_residual_norm
        + weights.lambda_pos * pos.0
        + weights.lambda_lap * lap.value
        + weights.lambda_emotion * emotion_value;

    let mut gradients = ism_grads.clone();
    gradients.add_scaled(pos.1, weights.lambda_pos);
    gradients.add_scaled(&lap.gradients, weights.lambda_lap);
    if let Some((_, g)) = emotion {
        gradients.add_scaled(g, weights.lambda_emotion);
    }
    if gradients.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("aggregated gradient is not finite".into()));
    }
    Ok(TotalLoss {
        report: LossReport {
            ism_residual_norm,
            pos: pos.0,
            lap: lap.value,
            emotion: emotion_value,
            total,
            ism_grad_norm: ism_grads.norm(),
            pos_grad_norm: pos.1.norm(),
            lap_grad_norm: lap.gradients.norm(),
            emotion_grad_norm: emotion.map_or(0.0, |(_, g)| g.norm()),
            lap_skipped: lap.skipped,
        },
        gradients,
    })
}
