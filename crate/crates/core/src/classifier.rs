//! Expression classifier: a small MLP over a 16x16 grayscale downsample of a
//! rendered face, trained on a procedural glyph corpus. The downsample is
//! area-weighted so every input pixel carries gradient, which lets the
//! expression loss flow back through the rasterizer.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::image_buf::{box_resize_gray, box_resize_gray_backward, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const EMOTION_LABELS: [&str; 7] = [
    "neutral", "happy", "sad", "surprise", "angry", "fear", "disgust",
];
pub const NUM_CLASSES: usize = 7;
/// Side length of the downsampled classifier input.
pub const INPUT_SIDE: usize = 16;
pub const INPUT_DIM: usize = INPUT_SIDE * INPUT_SIDE;
pub const HIDDEN_DIM: usize = 32;
/// Glyph canvas side.
pub const GLYPH_SIDE: usize = 64;

/// 256 -> 32 tanh -> 7 softmax. Weights round-trip through f32 so the binary
/// serialization is exact; all arithmetic stays in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionClassifier {
    /// HIDDEN_DIM x INPUT_DIM, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// NUM_CLASSES x HIDDEN_DIM, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub seed: u64,
}

struct ForwardCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl EmotionClassifier {
    fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| crate::guidance::standard_normal(&mut rng) * scale)
                .collect()
        };
        EmotionClassifier {
            w1: gauss(HIDDEN_DIM * INPUT_DIM, 1.0 / (INPUT_DIM as f64).sqrt()),
            b1: vec![0.0; HIDDEN_DIM],
            w2: gauss(NUM_CLASSES * HIDDEN_DIM, 1.0 / (HIDDEN_DIM as f64).sqrt()),
            b2: vec![0.0; NUM_CLASSES],
            seed,
        }
    }

    fn forward(&self, input: &[f64]) -> ForwardCache {
        assert_eq!(input.len(), INPUT_DIM);
        let mut hidden = vec![0.0; HIDDEN_DIM];
        for j in 0..HIDDEN_DIM {
            let mut z = self.b1[j];
            for i in 0..INPUT_DIM {
                z += self.w1[j * INPUT_DIM + i] * input[i];
            }
            hidden[j] = z.tanh();
        }
        let mut logits = [0.0; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            let mut z = self.b2[k];
            for j in 0..HIDDEN_DIM {
                z += self.w2[k * HIDDEN_DIM + j] * hidden[j];
            }
            logits[k] = z;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        ForwardCache {
            input: input.to_vec(),
            hidden,
            probs: exps.iter().map(|e| e / total).collect(),
        }
    }

    fn downsample(&self, image: &Image) -> Vec<f64> {
        // centered so the shared bright-face mode does not dominate the
        // gradient; a constant shift leaves the input gradient chain intact
        box_resize_gray(
            &image.to_gray(),
            image.width,
            image.height,
            INPUT_SIDE,
            INPUT_SIDE,
        )
        .iter()
        .map(|&v| v - 0.5)
        .collect()
    }

    /// Class probabilities for an image of any size.
    pub fn predict(&self, image: &Image) -> Vec<f64> {
        self.forward(&self.downsample(image)).probs
    }

    /// Cross-entropy against `target` plus the gradient of that loss with
    /// respect to every input pixel (all three channels).
    pub fn predict_backward(&self, image: &Image, target: usize) -> (f64, Image) {
        assert!(target < NUM_CLASSES);
        let cache = self.forward(&self.downsample(image));
        let loss = -cache.probs[target].max(1e-8).ln();
        // clamp is inactive whenever p > 1e-8; gradient treats it as exact
        let mut d_logits = cache.probs.clone();
        d_logits[target] -= 1.0;
        let d_input = self.backward_to_input(&cache, &d_logits);
        let d_gray = box_resize_gray_backward(
            &d_input,
            image.width,
            image.height,
            INPUT_SIDE,
            INPUT_SIDE,
        );
        let mut grad = Image::zeros(image.width, image.height);
        for (i, &g) in d_gray.iter().enumerate() {
            for c in 0..3 {
                grad.data[3 * i + c] = g / 3.0;
            }
        }
        (loss, grad)
    }

    fn backward_to_input(&self, cache: &ForwardCache, d_logits: &[f64]) -> Vec<f64> {
        let mut d_hidden = vec![0.0; HIDDEN_DIM];
        for k in 0..NUM_CLASSES {
            for j in 0..HIDDEN_DIM {
                d_hidden[j] += self.w2[k * HIDDEN_DIM + j] * d_logits[k];
            }
        }
        for j in 0..HIDDEN_DIM {
            d_hidden[j] *= 1.0 - cache.hidden[j] * cache.hidden[j];
        }
        let mut d_input = vec![0.0; INPUT_DIM];
        for j in 0..HIDDEN_DIM {
            for i in 0..INPUT_DIM {
                d_input[i] += self.w1[j * INPUT_DIM + i] * d_hidden[j];
            }
        }
        d_input
    }

    fn accumulate_weight_grads(
        &self,
        cache: &ForwardCache,
        target: usize,
        grads: &mut ClassifierGrads,
    ) {
        let mut d_logits = cache.probs.clone();
        d_logits[target] -= 1.0;
        let mut d_hidden = vec![0.0; HIDDEN_DIM];
        for k in 0..NUM_CLASSES {
            grads.b2[k] += d_logits[k];
            for j in 0..HIDDEN_DIM {
                grads.w2[k * HIDDEN_DIM + j] += d_logits[k] * cache.hidden[j];
                d_hidden[j] += self.w2[k * HIDDEN_DIM + j] * d_logits[k];
            }
        }
        for j in 0..HIDDEN_DIM {
            let dz = d_hidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
            grads.b1[j] += dz;
            for i in 0..INPUT_DIM {
                grads.w1[j * INPUT_DIM + i] += dz * cache.input[i];
            }
        }
    }

    fn quantize_f32(&mut self) {
        for v in self
            .w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
        {
            *v = *v as f32 as f64;
        }
    }

    fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite())
    }

    /// Writes `{path}` as a JSON header and `{path stem}.bin` as flat
    /// little-endian f32 weights in w1, b1, w2, b2 order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "layers": [INPUT_DIM, HIDDEN_DIM, NUM_CLASSES],
            "k": INPUT_SIDE,
            "labels": EMOTION_LABELS,
            "seed": self.seed,
        });
        std::fs::write(path, serde_json::to_string_pretty(&header)?)?;
        let mut f = std::fs::File::create(path.with_extension("bin"))?;
        for v in self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
        {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let layers: Vec<usize> = header["layers"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("missing layers".into()))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        if layers != [INPUT_DIM, HIDDEN_DIM, NUM_CLASSES] {
            return Err(Error::Checkpoint(format!(
                "unsupported layer shape {layers:?}"
            )));
        }
        let seed = header["seed"].as_u64().unwrap_or(0);
        let mut bytes = Vec::new();
        std::fs::File::open(path.with_extension("bin"))?.read_to_end(&mut bytes)?;
        let expected = HIDDEN_DIM * INPUT_DIM + HIDDEN_DIM + NUM_CLASSES * HIDDEN_DIM + NUM_CLASSES;
        if bytes.len() != expected * 4 {
            return Err(Error::Checkpoint(format!(
                "weight file has {} bytes, expected {}",
                bytes.len(),
                expected * 4
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        Ok(EmotionClassifier {
            w1: take(HIDDEN_DIM * INPUT_DIM),
            b1: take(HIDDEN_DIM),
            w2: take(NUM_CLASSES * HIDDEN_DIM),
            b2: take(NUM_CLASSES),
            seed,
        })
    }
}

struct ClassifierGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ClassifierGrads {
    fn zeros() -> Self {
        ClassifierGrads {
            w1: vec![0.0; HIDDEN_DIM * INPUT_DIM],
            b1: vec![0.0; HIDDEN_DIM],
            w2: vec![0.0; NUM_CLASSES * HIDDEN_DIM],
            b2: vec![0.0; NUM_CLASSES],
        }
    }
}

// ---------------------------------------------------------------------------
// Procedural glyph corpus
// ---------------------------------------------------------------------------

/// One 64x64 grayscale face glyph (stored as RGB with equal channels) for a
/// given class, with pose jitter drawn from `rng`.
pub fn make_glyph(class: usize, rng: &mut impl Rng) -> Image {
    assert!(class < NUM_CLASSES);
    let n = GLYPH_SIDE;
    let mut gray = vec![0.08; n * n];
    let cx = 32.0 + rng.gen_range(-2.0..2.0);
    let cy = 32.0 + rng.gen_range(-2.0..2.0);
    let face_r = 26.0 + rng.gen_range(-1.5..1.5);
    fill_disk(&mut gray, n, cx, cy, face_r, 0.85);

    let eye_dx = 10.0 + rng.gen_range(-1.0..1.0);
    let eye_y = cy - 8.0 + rng.gen_range(-1.0..1.0);
    for side in [-1.0, 1.0] {
        fill_disk(&mut gray, n, cx + side * eye_dx, eye_y, 2.5, 0.1);
    }

    // brows: flat by default, slanted inward for angry, raised for fear
    let brow_y = eye_y - 6.0;
    let brow_half = 5.0;
    match class {
        4 => {
            // angry: inner ends pulled down
            for side in [-1.0, 1.0] {
                draw_segment(
                    &mut gray,
                    n,
                    cx + side * (eye_dx - brow_half),
                    brow_y + 3.0,
                    cx + side * (eye_dx + brow_half),
                    brow_y - 2.0,
                    1.4,
                    0.1,
                );
            }
        }
        5 => {
            // fear: brows lifted well above the eyes
            for side in [-1.0, 1.0] {
                draw_segment(
                    &mut gray,
                    n,
                    cx + side * (eye_dx - brow_half),
                    brow_y - 5.0,
                    cx + side * (eye_dx + brow_half),
                    brow_y - 5.0,
                    1.4,
                    0.1,
                );
            }
        }
        _ => {
            for side in [-1.0, 1.0] {
                draw_segment(
                    &mut gray,
                    n,
                    cx + side * (eye_dx - brow_half),
                    brow_y,
                    cx + side * (eye_dx + brow_half),
                    brow_y,
                    1.4,
                    0.1,
                );
            }
        }
    }

    let mouth_y = cy + 12.0 + rng.gen_range(-1.0..1.0);
    let mouth_half = 9.0 + rng.gen_range(-1.0..1.0);
    let curve = 4.0 + rng.gen_range(-0.8..0.8);
    match class {
        1 => draw_arc(&mut gray, n, cx, mouth_y, mouth_half, -curve, 1.6, 0.1),
        2 => draw_arc(&mut gray, n, cx, mouth_y, mouth_half, curve, 1.6, 0.1),
        3 => ring(&mut gray, n, cx, mouth_y, 5.0 + rng.gen_range(-0.5..0.5), 1.6, 0.1),
        5 => ring(&mut gray, n, cx, mouth_y, 2.8 + rng.gen_range(-0.3..0.3), 1.4, 0.1),
        6 => draw_segment(
            &mut gray,
            n,
            cx - mouth_half,
            mouth_y + 3.0,
            cx + mouth_half,
            mouth_y - 3.0,
            1.6,
            0.1,
        ),
        _ => draw_segment(
            &mut gray,
            n,
            cx - mouth_half,
            mouth_y,
            cx + mouth_half,
            mouth_y,
            1.6,
            0.1,
        ),
    }

    let mut img = Image::zeros(n, n);
    for (i, &g) in gray.iter().enumerate() {
        for c in 0..3 {
            img.data[3 * i + c] = g;
        }
    }
    img
}

fn fill_disk(gray: &mut [f64], n: usize, cx: f64, cy: f64, r: f64, value: f64) {
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                gray[y * n + x] = value;
            }
        }
    }
}

fn ring(gray: &mut [f64], n: usize, cx: f64, cy: f64, r: f64, thickness: f64, value: f64) {
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            if (d - r).abs() <= thickness {
                gray[y * n + x] = value;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_segment(
    gray: &mut [f64],
    n: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    thickness: f64,
    value: f64,
) {
    let len2 = (x1 - x0).powi(2) + (y1 - y0).powi(2);
    for y in 0..n {
        for x in 0..n {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - x0) * (x1 - x0) + (py - y0) * (y1 - y0)) / len2).clamp(0.0, 1.0)
            };
            let qx = x0 + t * (x1 - x0);
            let qy = y0 + t * (y1 - y0);
            if ((px - qx).powi(2) + (py - qy).powi(2)).sqrt() <= thickness {
                gray[y * n + x] = value;
            }
        }
    }
}

/// Parabolic mouth arc; negative `curve` bends the corners upward (smile).
#[allow(clippy::too_many_arguments)]
fn draw_arc(
    gray: &mut [f64],
    n: usize,
    cx: f64,
    cy: f64,
    half: f64,
    curve: f64,
    thickness: f64,
    value: f64,
) {
    let steps = 40;
    for k in 0..steps {
        let u0 = -1.0 + 2.0 * k as f64 / steps as f64;
        let u1 = -1.0 + 2.0 * (k + 1) as f64 / steps as f64;
        let p = |u: f64| (cx + u * half, cy + curve * (u * u - 0.5));
        let (x0, y0) = p(u0);
        let (x1, y1) = p(u1);
        draw_segment(gray, n, x0, y0, x1, y1, thickness, value);
    }
}

/// `per_class` jittered glyphs for each of the 7 classes, deterministic in
/// `seed`. Returns (image, class index) pairs in class-major order.
pub fn make_synthetic_dataset(per_class: usize, seed: u64) -> Vec<(Image, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for _ in 0..per_class {
            out.push((make_glyph(class, &mut rng), class));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub per_class: usize,
    pub holdout_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            per_class: 40,
            holdout_per_class: 10,
            epochs: 500,
            learning_rate: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub final_loss: f64,
}

/// Full-batch gradient descent on the glyph corpus. The first
/// `holdout_per_class` samples of each class are held out. Weights are
/// quantized to f32 after training so save/load is bit-exact.
pub fn train_classifier(
    config: &ClassifierTrainConfig,
) -> Result<(EmotionClassifier, ClassifierReport)> {
    if config.holdout_per_class >= config.per_class {
        return Err(Error::InvalidConfig(
            "holdout_per_class must be smaller than per_class".into(),
        ));
    }
    let dataset = make_synthetic_dataset(config.per_class, config.seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (i, sample) in dataset.into_iter().enumerate() {
        if i % config.per_class < config.holdout_per_class {
            holdout.push(sample);
        } else {
            train.push(sample);
        }
    }
    let mut model = EmotionClassifier::init(config.seed);
    let inputs: Vec<(Vec<f64>, usize)> = train
        .iter()
        .map(|(img, class)| (model.downsample(img), *class))
        .collect();

    let mut final_loss = 0.0;
    for epoch in 0..config.epochs {
        let mut grads = ClassifierGrads::zeros();
        let mut loss = 0.0;
        for (input, class) in &inputs {
            let cache = model.forward(input);
            loss += -cache.probs[*class].max(1e-8).ln();
            model.accumulate_weight_grads(&cache, *class, &mut grads);
        }
        loss /= inputs.len() as f64;
        let step = config.learning_rate / inputs.len() as f64;
        for (w, g) in model.w1.iter_mut().zip(&grads.w1) {
            *w -= step * g;
        }
        for (w, g) in model.b1.iter_mut().zip(&grads.b1) {
            *w -= step * g;
        }
        for (w, g) in model.w2.iter_mut().zip(&grads.w2) {
            *w -= step * g;
        }
        for (w, g) in model.b2.iter_mut().zip(&grads.b2) {
            *w -= step * g;
        }
        // tanh saturation keeps runaway weights finite, so bound magnitude too
        let runaway = model
            .w1
            .iter()
            .chain(&model.w2)
            .any(|v| !v.is_finite() || v.abs() > 1e8);
        if !loss.is_finite() || !model.is_finite() || runaway {
            return Err(Error::Diverged(format!(
                "classifier training diverged at epoch {epoch}"
            )));
        }
        final_loss = loss;
    }
    model.quantize_f32();

    let accuracy = |set: &[(Image, usize)]| -> f64 {
        let correct = set
            .iter()
            .filter(|(img, class)| {
                let probs = model.predict(img);
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                argmax == *class
            })
            .count();
        correct as f64 / set.len() as f64
    };
    let report = ClassifierReport {
        train_accuracy: accuracy(&train),
        holdout_accuracy: accuracy(&holdout),
        final_loss,
    };
    Ok((model, report))
}
