//! Flat `key = value` run configuration. Every key is documented in KEYS;
//! unknown keys are rejected with a nearest-key suggestion, and
//! parse -> serialize -> parse is a fixpoint.

use anyhow::{bail, Context, Result};
use splatfit::trainer::TrainConfig;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunPaths {
    /// "icosphere:N" or a path to an OBJ file.
    pub template: String,
    /// Directory of PNG mixture components with JSON sidecars.
    pub denoiser_dir: String,
    /// Classifier weights header path; empty disables the expression loss.
    pub classifier: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            paths: RunPaths {
                template: "icosphere:1".into(),
                denoiser_dir: String::new(),
                classifier: String::new(),
            },
        }
    }
}

/// (key, doc) pairs; also the canonical serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("iterations", "optimization iterations"),
    ("seed", "global rng seed"),
    ("render_size", "square render resolution during fitting"),
    ("splats_per_vertex", "splats initialized per template vertex"),
    ("adam_lr", "adam learning rate"),
    ("adam_beta1", "adam first-moment decay"),
    ("adam_beta2", "adam second-moment decay"),
    ("adam_eps", "adam denominator epsilon"),
    ("t_min", "lower diffusion timestep bound"),
    ("t_max", "upper diffusion timestep bound"),
    ("stride", "interval between the two denoiser evaluations"),
    ("lambda_pos", "positional regularizer weight"),
    ("lambda_lap", "laplacian regularizer weight"),
    ("lambda_emotion", "expression loss weight"),
    ("emotion_every", "iterations between expression-loss applications"),
    ("target_expression", "target emotion class; empty for none"),
    ("prompt_base", "base identity prompt"),
    ("prompt_view_front", "front-view prompt"),
    ("prompt_view_side", "side-view prompt"),
    ("prompt_view_back", "back-view prompt"),
    ("prompt_expr", "expression attribute prompt; empty skips the stage"),
    ("prompt_acc", "accessory attribute prompt; empty skips the stage"),
    ("blend_b", "identity/view blend factor"),
    ("gamma_expr", "expression attribute influence"),
    ("gamma_acc", "accessory attribute influence"),
    ("eta_expr", "expression intensity"),
    ("eta_acc", "accessory intensity"),
    ("disable_semantic_embedding", "ablation: skip expr/acc stages"),
    ("disable_emotion_loss", "ablation: skip the expression loss"),
    ("checkpoint_every", "iterations between checkpoints; 0 disables"),
    ("log_timings", "record wall-clock times (breaks byte reproducibility)"),
    ("template", "icosphere:N or path to an OBJ mesh"),
    ("denoiser_dir", "directory of PNG mixture components"),
    ("classifier", "classifier weights path; empty for none"),
];

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut seen = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got {raw:?}", lineno + 1);
        };
        let key = key.trim().to_string();
        if !KEYS.iter().any(|(k, _)| *k == key) {
            bail!(
                "line {}: unknown key {key:?}; did you mean {:?}?",
                lineno + 1,
                nearest_key(&key)
            );
        }
        if seen.insert(key.clone(), value.trim().to_string()).is_some() {
            bail!("line {}: duplicate key {key:?}", lineno + 1);
        }
    }

    let mut cfg = RunConfig::default();
    for (key, value) in &seen {
        apply(&mut cfg, key, value).with_context(|| format!("key {key:?}"))?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    let t = &mut cfg.train;
    match key {
        "iterations" => t.iterations = v.parse()?,
        "seed" => t.seed = v.parse()?,
        "render_size" => t.render_size = v.parse()?,
        "splats_per_vertex" => t.splats_per_vertex = v.parse()?,
        "adam_lr" => t.adam.lr = v.parse()?,
        "adam_beta1" => t.adam.beta1 = v.parse()?,
        "adam_beta2" => t.adam.beta2 = v.parse()?,
        "adam_eps" => t.adam.eps = v.parse()?,
        "t_min" => t.t_range.0 = v.parse()?,
        "t_max" => t.t_range.1 = v.parse()?,
        "stride" => t.stride = v.parse()?,
        "lambda_pos" => t.weights.lambda_pos = v.parse()?,
        "lambda_lap" => t.weights.lambda_lap = v.parse()?,
        "lambda_emotion" => t.weights.lambda_emotion = v.parse()?,
        "emotion_every" => t.emotion_every = v.parse()?,
        "target_expression" => {
            t.target_expression = (!v.is_empty()).then(|| v.to_string());
        }
        "prompt_base" => t.prompts.base = v.to_string(),
        "prompt_view_front" => t.prompts.view_front = v.to_string(),
        "prompt_view_side" => t.prompts.view_side = v.to_string(),
        "prompt_view_back" => t.prompts.view_back = v.to_string(),
        "prompt_expr" => t.prompts.expr = v.to_string(),
        "prompt_acc" => t.prompts.acc = v.to_string(),
        "blend_b" => t.blend.b = v.parse()?,
        "gamma_expr" => t.blend.gamma_expr = v.parse()?,
        "gamma_acc" => t.blend.gamma_acc = v.parse()?,
        "eta_expr" => t.blend.eta_expr = v.parse()?,
        "eta_acc" => t.blend.eta_acc = v.parse()?,
        "disable_semantic_embedding" => t.disable_semantic_embedding = parse_bool(v)?,
        "disable_emotion_loss" => t.disable_emotion_loss = parse_bool(v)?,
        "checkpoint_every" => t.checkpoint_every = v.parse()?,
        "log_timings" => t.log_timings = parse_bool(v)?,
        "template" => cfg.paths.template = v.to_string(),
        "denoiser_dir" => cfg.paths.denoiser_dir = v.to_string(),
        "classifier" => cfg.paths.classifier = v.to_string(),
        _ => unreachable!("key set checked by parse"),
    }
    Ok(())
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("expected true or false, got {v:?}"),
    }
}

pub fn serialize(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let mut out = String::new();
    for (key, _) in KEYS {
        let value = match *key {
            "iterations" => t.iterations.to_string(),
            "seed" => t.seed.to_string(),
            "render_size" => t.render_size.to_string(),
            "splats_per_vertex" => t.splats_per_vertex.to_string(),
            "adam_lr" => t.adam.lr.to_string(),
            "adam_beta1" => t.adam.beta1.to_string(),
            "adam_beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "t_min" => t.t_range.0.to_string(),
            "t_max" => t.t_range.1.to_string(),
            "stride" => t.stride.to_string(),
            "lambda_pos" => t.weights.lambda_pos.to_string(),
            "lambda_lap" => t.weights.lambda_lap.to_string(),
            "lambda_emotion" => t.weights.lambda_emotion.to_string(),
            "emotion_every" => t.emotion_every.to_string(),
            "target_expression" => t.target_expression.clone().unwrap_or_default(),
            "prompt_base" => t.prompts.base.clone(),
            "prompt_view_front" => t.prompts.view_front.clone(),
            "prompt_view_side" => t.prompts.view_side.clone(),
            "prompt_view_back" => t.prompts.view_back.clone(),
            "prompt_expr" => t.prompts.expr.clone(),
            "prompt_acc" => t.prompts.acc.clone(),
            "blend_b" => t.blend.b.to_string(),
            "gamma_expr" => t.blend.gamma_expr.to_string(),
            "gamma_acc" => t.blend.gamma_acc.to_string(),
            "eta_expr" => t.blend.eta_expr.to_string(),
            "eta_acc" => t.blend.eta_acc.to_string(),
            "disable_semantic_embedding" => t.disable_semantic_embedding.to_string(),
            "disable_emotion_loss" => t.disable_emotion_loss.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "log_timings" => t.log_timings.to_string(),
            "template" => cfg.paths.template.clone(),
            "denoiser_dir" => cfg.paths.denoiser_dir.clone(),
            "classifier" => cfg.paths.classifier.clone(),
            _ => unreachable!(),
        };
        out.push_str(&format!("{key} = {value}\n"));
    }
    out
}

pub fn nearest_key(unknown: &str) -> &'static str {
    KEYS.iter()
        .map(|(k, _)| (*k, edit_distance(unknown, k)))
        .min_by_key(|(_, d)| *d)
        .map(|(k, _)| k)
        .unwrap()
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}
