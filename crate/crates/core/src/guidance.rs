//! Diffusion guidance: noise schedule, forward noising, deterministic DDIM
//! inversion, a pluggable denoiser contract, and the interval score matching
//! gradient that couples the denoiser to the rasterizer.
//!
//! Images live in [-1,1] inside this module; the rendered [0,1] range is
//! converted exactly once at the module boundary.
#![allow(clippy::needless_range_loop)]

use crate::embedding::ConditioningEmbedding;
use crate::error::{Error, Result};
use crate::image_buf::Image;
use crate::rasterizer::{render, render_backward, SplatGradients};
use crate::scene::{Camera, GaussianScene};
use rand::Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    /// Cumulative products of (1 - beta), strictly decreasing in (0,1).
    pub alpha_bar: Vec<f64>,
    /// Loss weights w(t); defaults to 1 - alpha_bar.
    pub weight_w: Vec<f64>,
}

/// Linear beta ramp with alpha_bar products and w(t) = 1 - alpha_bar.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 10 {
        return Err(Error::InvalidSchedule(format!("t_max {t_max} < 10")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (t_max - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    let weight_w = alpha_bar.iter().map(|&a| 1.0 - a).collect();
    Ok(NoiseSchedule {
        steps: t_max,
        beta,
        alpha_bar,
        weight_w,
    })
}

/// One standard normal draw (Box-Muller; cosine branch only, so each draw
/// consumes two uniforms and stays reproducible under any call pattern).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Forward noising: x_t = sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps, with x0 given
/// in [0,1] and rescaled to [-1,1] internally. Returns (x_t, eps), both in
/// diffusion range.
pub fn add_noise(
    x0: &Image,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut impl Rng,
) -> (Image, Image) {
    assert!(t < schedule.steps);
    let x = x0.to_diffusion_range();
    let eps = Image::from_data(
        x0.width,
        x0.height,
        (0..x.data.len()).map(|_| standard_normal(rng)).collect(),
    );
    let sa = schedule.alpha_bar[t].sqrt();
    let sb = (1.0 - schedule.alpha_bar[t]).sqrt();
    let x_t = x.zip(&eps, |a, e| sa * a + sb * e);
    (x_t, eps)
}

#[derive(Debug)]
pub struct DenoiserQuery<'a> {
    /// Noisy image in diffusion range [-1,1].
    pub image: &'a Image,
    pub timestep: usize,
    /// None encodes the unconditional branch.
    pub conditioning: Option<&'a ConditioningEmbedding>,
}

/// Epsilon-prediction contract. Implementations must be deterministic for a
/// fixed query and safe to evaluate concurrently.
pub trait Denoiser: Sync {
    fn eval(&self, query: &DenoiserQuery, schedule: &NoiseSchedule) -> Result<Image>;
}

/// Deterministic DDIM inversion: maps a clean image (diffusion range) to
/// progressively noisier iterates without fresh randomness. Returns the
/// trajectory [(0, x0), (stride, x_stride), ..., (target_step, x_target)];
/// the final step is shortened if target_step is not a stride multiple.
pub fn ddim_invert(
    x0: &Image,
    target_step: usize,
    stride: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    conditioning: Option<&ConditioningEmbedding>,
) -> Result<Vec<(usize, Image)>> {
    assert!(target_step < schedule.steps);
    assert!(stride >= 1);
    let mut trajectory = vec![(0usize, x0.clone())];
    let mut tau = 0usize;
    while tau < target_step {
        let next = (tau + stride).min(target_step);
        let (_, x_tau) = trajectory.last().unwrap();
        let eps = denoiser.eval(
            &DenoiserQuery {
                image: x_tau,
                timestep: tau,
                conditioning,
            },
            schedule,
        )?;
        let x_next = ddim_step(x_tau, &eps, schedule.alpha_bar[tau], schedule.alpha_bar[next]);
        trajectory.push((next, x_next));
        tau = next;
    }
    Ok(trajectory)
}

/// Shared DDIM update: reconstruct x0-hat at alpha_from, re-noise to
/// alpha_to. Works in both directions.
pub fn ddim_step(x: &Image, eps: &Image, alpha_from: f64, alpha_to: f64) -> Image {
    let sa_from = alpha_from.sqrt();
    let sb_from = (1.0 - alpha_from).sqrt();
    let sa_to = alpha_to.sqrt();
    let sb_to = (1.0 - alpha_to).sqrt();
    x.zip(eps, |xv, ev| {
        let x0_hat = (xv - sb_from * ev) / sa_from;
        sa_to * x0_hat + sb_to * ev
    })
}

// ---------------------------------------------------------------------------
// Analytic mixture denoiser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    /// Component mean in render range [0,1].
    pub mean: Image,
    /// Isotropic std in diffusion units, > 0.
    pub std: f64,
    /// Conditioning key; a component is selected when its key appears in the
    /// conditioning tag.
    pub prompt: String,
}

/// Exact epsilon-oracle for an isotropic Gaussian mixture over clean images:
/// eps*(x_t, t) = (x_t - sqrt(a_bar) E[x0|x_t]) / sqrt(1 - a_bar), with the
/// posterior mean computed in closed form under the forward kernel.
/// Conditioning selects the single matching component; the unconditional
/// branch uses all components with a uniform prior.
#[derive(Debug, Clone)]
pub struct MixtureDenoiser {
    pub components: Vec<MixtureComponent>,
}

impl MixtureDenoiser {
    pub fn new(components: Vec<MixtureComponent>) -> Self {
        assert!(!components.is_empty());
        assert!(components.iter().all(|c| c.std > 0.0));
        MixtureDenoiser { components }
    }

    /// Components for PNG means with `{stem}.json` sidecars carrying
    /// {"prompt": ..., "gamma": ...}, in sorted filename order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Sidecar {
            prompt: String,
            gamma: f64,
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no PNG components in {}",
                dir.display()
            )));
        }
        let mut components = Vec::new();
        for p in paths {
            let mean = Image::load_png(&p)?;
            let sidecar = p.with_extension("json");
            let meta: Sidecar = serde_json::from_reader(std::fs::File::open(&sidecar)?)?;
            components.push(MixtureComponent {
                mean,
                std: meta.gamma,
                prompt: meta.prompt,
            });
        }
        Ok(MixtureDenoiser::new(components))
    }

    fn select(&self, conditioning: Option<&ConditioningEmbedding>) -> Result<Vec<usize>> {
        match conditioning {
            None => Ok((0..self.components.len()).collect()),
            Some(c) => {
                // longest matching prompt wins, ties by component order
                let best = self
                    .components
                    .iter()
                    .enumerate()
                    .filter(|(_, comp)| c.tag.contains(&comp.prompt))
                    .max_by_key(|(i, comp)| (comp.prompt.len(), usize::MAX - i));
                match best {
                    Some((i, _)) => Ok(vec![i]),
                    None => Err(Error::NoMatchingComponent(c.tag.clone())),
                }
            }
        }
    }
}

impl Denoiser for MixtureDenoiser {
    fn eval(&self, query: &DenoiserQuery, schedule: &NoiseSchedule) -> Result<Image> {
        let t = query.timestep;
        assert!(t < schedule.steps);
        let a_bar = schedule.alpha_bar[t];
        let sa = a_bar.sqrt();
        let sb = (1.0 - a_bar).sqrt();
        let x = query.image;
        let active = self.select(query.conditioning)?;

        // log responsibilities with log-sum-exp stabilization
        let mut log_like = Vec::with_capacity(active.len());
        for &ci in &active {
            let comp = &self.components[ci];
            if !comp.mean.same_shape(x) {
                return Err(Error::ShapeMismatch(format!(
                    "component {:?} is {}x{}, query is {}x{}",
                    comp.prompt, comp.mean.width, comp.mean.height, x.width, x.height
                )));
            }
            let mu = comp.mean.to_diffusion_range();
            // x_t | c ~ N(sqrt(a_bar) mu, a_bar gamma^2 + 1 - a_bar)
            let var = a_bar * comp.std * comp.std + (1.0 - a_bar);
            let mut ll = 0.0;
            for (xv, mv) in x.data.iter().zip(&mu.data) {
                let d = xv - sa * mv;
                ll += -0.5 * d * d / var;
            }
            ll -= 0.5 * x.data.len() as f64 * var.ln();
            log_like.push(ll);
        }
        let max_ll = log_like.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_like.iter().map(|&l| (l - max_ll).exp()).collect();
        let total: f64 = weights.iter().sum();

        // E[x0 | x_t] = sum_c r_c (mu_c + shrink_c (x - sa mu_c))
        let mut posterior = vec![0.0; x.data.len()];
        for (k, &ci) in active.iter().enumerate() {
            let comp = &self.components[ci];
            let r = weights[k] / total;
            let mu = comp.mean.to_diffusion_range();
            let var = a_bar * comp.std * comp.std + (1.0 - a_bar);
            let shrink = sa * comp.std * comp.std / var;
            for i in 0..posterior.len() {
                posterior[i] += r * (mu.data[i] + shrink * (x.data[i] - sa * mu.data[i]));
            }
        }
        let eps = Image::from_data(
            x.width,
            x.height,
            x.data
                .iter()
                .zip(&posterior)
                .map(|(&xv, &pv)| (xv - sa * pv) / sb)
                .collect(),
        );
        Ok(eps)
    }
}

// ---------------------------------------------------------------------------
// Interval score matching gradient
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IsmParams {
    /// Inclusive timestep sampling range; lower bound must exceed stride.
    pub t_range: (usize, usize),
    pub stride: usize,
    /// When set, the reference branch at (x_s, s) also sees the
    /// conditioning instead of the unconditional mixture.
    pub reference_uses_conditioning: bool,
}

impl Default for IsmParams {
    fn default() -> Self {
        IsmParams {
            t_range: (20, 900),
            stride: 50,
            reference_uses_conditioning: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IsmDiagnostics {
    pub t: usize,
    pub s: usize,
    pub residual_norm: f64,
}

/// ISM gradient: w(t) * (eps(x_t, t, c) - eps(x_s, s, null)) treated as the
/// pixel cotangent and chained through the rasterizer backward pass. x_s and
/// x_t are consecutive DDIM-inversion iterates of the rendered image, with
/// s = t - stride.
pub fn ism_gradient(
    scene: &GaussianScene,
    camera: &Camera,
    conditioning: &ConditioningEmbedding,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    rng: &mut impl Rng,
    params: &IsmParams,
) -> Result<(SplatGradients, IsmDiagnostics)> {
    let t = rng.gen_range(params.t_range.0..=params.t_range.1);
    if params.stride >= t {
        return Err(Error::StrideTooLarge {
            stride: params.stride,
            t,
        });
    }
    let s = t - params.stride;
    let rendered = render(scene, camera);
    let x0 = rendered.pixels.to_diffusion_range();

    let trajectory = ddim_invert(&x0, s, params.stride, denoiser, schedule, None)?;
    let (_, x_s) = trajectory.last().unwrap();
    let ref_cond = if params.reference_uses_conditioning {
        Some(conditioning)
    } else {
        None
    };
    let eps_ref = denoiser.eval(
        &DenoiserQuery {
            image: x_s,
            timestep: s,
            conditioning: ref_cond,
        },
        schedule,
    )?;
    // the s -> t inversion step always uses the unconditional branch
    let eps_null = if params.reference_uses_conditioning {
        denoiser.eval(
            &DenoiserQuery {
                image: x_s,
                timestep: s,
                conditioning: None,
            },
            schedule,
        )?
    } else {
        eps_ref.clone()
    };
    let x_t = ddim_step(x_s, &eps_null, schedule.alpha_bar[s], schedule.alpha_bar[t]);
    let eps_cond = denoiser.eval(
        &DenoiserQuery {
            image: &x_t,
            timestep: t,
            conditioning: Some(conditioning),
        },
        schedule,
    )?;

    let residual = eps_cond.zip(&eps_ref, |a, b| a - b);
    let residual_norm = residual.l2_norm();
    // residual-as-cotangent; d(diffusion)/d(pixel) = 2
    let w = schedule.weight_w[t];
    let cotangent = residual.map(|v| 2.0 * w * v);
    let grads = render_backward(scene, camera, &cotangent);
    Ok((
        grads,
        IsmDiagnostics {
            t,
            s,
            residual_norm,
        },
    ))
}
