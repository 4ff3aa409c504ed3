//! Conditioning-embedding algebra.
//!
//! Embeddings are T x D token matrices closed under affine interpolation.
//! The text encoder is a deterministic stand-in: each token row is a
//! unit-norm pseudo-random vector seeded by an FNV-1a hash of the normalized
//! prompt and the row index, which preserves the one property the algebra
//! needs (distinct prompts point in distinct directions). Identity
//! conditioning injects a projected 64-dim unit vector into token row 0.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOKEN_SLOTS: usize = 8;
pub const EMBED_DIM: usize = 32;
pub const IDENTITY_DIM: usize = 64;

const PROJECTION_SEED: u64 = 0x5eed_1d00_beef_cafe;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningEmbedding {
    pub rows: usize,
    pub dim: usize,
    /// Row-major rows x dim.
    pub tokens: Vec<f64>,
    /// Provenance, e.g. "default|view:front@0.70|expr:happy@g0.50,e0.70".
    pub tag: String,
}

impl ConditioningEmbedding {
    pub fn from_rows(rows: Vec<Vec<f64>>, tag: &str) -> Self {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        assert!(rows.iter().all(|r| r.len() == dim));
        ConditioningEmbedding {
            rows: rows.len(),
            dim,
            tokens: rows.into_iter().flatten().collect(),
            tag: tag.to_string(),
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.tokens[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.tokens[t * self.dim..(t + 1) * self.dim]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.dim == other.dim
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.tokens.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    pub vector: [f64; IDENTITY_DIM],
}

impl IdentityEmbedding {
    /// Deterministic toy stand-in for a face-recognition embedding: hash the
    /// image bytes and project onto the unit sphere.
    pub fn from_image_bytes(bytes: &[u8]) -> Self {
        let mut v = [0.0; IDENTITY_DIM];
        let vals = seeded_gaussians(fnv1a(bytes), IDENTITY_DIM);
        v.copy_from_slice(&vals);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= n;
        }
        IdentityEmbedding { vector: v }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum AttributeKind {
    Expr,
    Acc,
}

impl AttributeKind {
    fn as_str(&self) -> &'static str {
        match self {
            AttributeKind::Expr => "expr",
            AttributeKind::Acc => "acc",
        }
    }
}

/// Expression or accessory stage of the hierarchical composition.
#[derive(Debug, Clone)]
pub struct AttributeSpec {
    pub prompt: String,
    /// Influence of the attribute text against the base embedding.
    pub gamma: f64,
    /// Intensity of the target attribute against its neutral counterpart.
    pub eta: f64,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic standard normals from a seed (Box-Muller over ChaCha).
fn seeded_gaussians(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1 = 1.0 - uniform();
        let u2 = uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        out.push(r * theta.sin());
    }
    out.truncate(n);
    out
}

fn normalize_prompt(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic toy text encoder: row t is a unit-norm gaussian vector
/// seeded by hash(normalized prompt, t).
pub fn encode_text(prompt: &str) -> Result<ConditioningEmbedding> {
    let norm = normalize_prompt(prompt);
    if norm.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut tokens = Vec::with_capacity(TOKEN_SLOTS * EMBED_DIM);
    for t in 0..TOKEN_SLOTS {
        let mut key = norm.clone().into_bytes();
        key.push(0x1f);
        key.extend_from_slice(&(t as u64).to_le_bytes());
        let mut row = seeded_gaussians(fnv1a(&key), EMBED_DIM);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= n;
        }
        tokens.extend(row);
    }
    Ok(ConditioningEmbedding {
        rows: TOKEN_SLOTS,
        dim: EMBED_DIM,
        tokens,
        tag: format!("prompt:{norm}"),
    })
}

/// Fixed seeded projection matrix mapping the identity vector into token
/// space (dim x IDENTITY_DIM, row-major).
fn identity_projection(dim: usize) -> Vec<f64> {
    let scale = 1.0 / (IDENTITY_DIM as f64).sqrt();
    seeded_gaussians(PROJECTION_SEED, dim * IDENTITY_DIM)
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

pub fn project_identity(id: &IdentityEmbedding, dim: usize) -> Vec<f64> {
    let p = identity_projection(dim);
    (0..dim)
        .map(|r| {
            (0..IDENTITY_DIM)
                .map(|c| p[r * IDENTITY_DIM + c] * id.vector[c])
                .sum()
        })
        .collect()
}

/// Identity-conditioned base embedding: the base prompt with token row 0
/// replaced by the projected identity vector.
pub fn make_default_embedding(
    id: &IdentityEmbedding,
    base_prompt: &str,
) -> Result<ConditioningEmbedding> {
    let mut emb = encode_text(base_prompt)?;
    let projected = project_identity(id, emb.dim);
    emb.row_mut(0).copy_from_slice(&projected);
    emb.tag = "default".to_string();
    Ok(emb)
}

fn lerp(
    a: &ConditioningEmbedding,
    b: &ConditioningEmbedding,
    weight_a: f64,
    tag: String,
) -> Result<ConditioningEmbedding> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows, a.dim, b.rows, b.dim
        )));
    }
    Ok(ConditioningEmbedding {
        rows: a.rows,
        dim: a.dim,
        tokens: a
            .tokens
            .iter()
            .zip(&b.tokens)
            .map(|(&x, &y)| weight_a * x + (1.0 - weight_a) * y)
            .collect(),
        tag,
    })
}

/// View-enriched blend: b * c_default + (1 - b) * c_view.
pub fn blend_view(
    c_default: &ConditioningEmbedding,
    c_view: &ConditioningEmbedding,
    b: f64,
) -> Result<ConditioningEmbedding> {
    assert!((0.0..=1.0).contains(&b));
    let tag = format!("{}|view:{}@{:.2}", c_default.tag, strip_prompt_tag(&c_view.tag), b);
    lerp(c_default, c_view, b, tag)
}

/// Attribute embedding: (1 - gamma) * base + gamma * encode(prompt).
pub fn make_attribute_embedding(
    base: &ConditioningEmbedding,
    attribute_prompt: &str,
    gamma: f64,
    kind: AttributeKind,
) -> Result<ConditioningEmbedding> {
    assert!((0.0..=1.0).contains(&gamma));
    let text = encode_text(attribute_prompt)?;
    let tag = format!(
        "{}|{}:{}@g{:.2}",
        base.tag,
        kind.as_str(),
        strip_prompt_tag(&text.tag),
        gamma
    );
    lerp(base, &text, 1.0 - gamma, tag)
}

/// Intensity interpolation: (1 - eta) * neutral + eta * target.
pub fn intensity_blend(
    c_neutral: &ConditioningEmbedding,
    c_target: &ConditioningEmbedding,
    eta: f64,
) -> Result<ConditioningEmbedding> {
    assert!((0.0..=1.0).contains(&eta));
    let tag = format!("{},e{:.2}", c_target.tag, eta);
    lerp(c_neutral, c_target, 1.0 - eta, tag)
}

/// Neutral-state counterpart prompts for the intensity interpolation.
pub fn neutral_prompt(kind: AttributeKind) -> &'static str {
    match kind {
        AttributeKind::Expr => "neutral expression",
        AttributeKind::Acc => "no accessories",
    }
}

/// Hierarchical composition: view stage, then expression, then accessory.
/// Omitted attributes skip their stage entirely.
pub fn compose_final(
    c_default: &ConditioningEmbedding,
    view_prompt: &str,
    b: f64,
    expr: Option<&AttributeSpec>,
    acc: Option<&AttributeSpec>,
) -> Result<ConditioningEmbedding> {
    let c_view = encode_text(view_prompt)?;
    let mut current = blend_view(c_default, &c_view, b)?;
    for (spec, kind) in [(expr, AttributeKind::Expr), (acc, AttributeKind::Acc)] {
        if let Some(spec) = spec {
            let neutral =
                make_attribute_embedding(&current, neutral_prompt(kind), spec.gamma, kind)?;
            let target =
                make_attribute_embedding(&current, &spec.prompt, spec.gamma, kind)?;
            current = intensity_blend(&neutral, &target, spec.eta)?;
        }
    }
    Ok(current)
}

fn strip_prompt_tag(tag: &str) -> &str {
    tag.strip_prefix("prompt:").unwrap_or(tag)
}

/// Row-wise cosine similarities between two embeddings.
pub fn row_cosines(a: &ConditioningEmbedding, b: &ConditioningEmbedding) -> Vec<f64> {
    assert!(a.same_shape(b));
    (0..a.rows)
        .map(|t| {
            let (ra, rb) = (a.row(t), b.row(t));
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        })
        .collect()
}
