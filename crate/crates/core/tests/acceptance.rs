//! Acceptance suite: one test per release criterion, each printing a
//! `criterion N ...: pass` line on success.

use splatfit::classifier::{
    make_glyph, train_classifier, ClassifierTrainConfig, EmotionClassifier, EMOTION_LABELS,
};
use splatfit::embedding::{
    blend_view, encode_text, intensity_blend, make_attribute_embedding, make_default_embedding,
    AttributeKind, ConditioningEmbedding, IdentityEmbedding, EMBED_DIM, TOKEN_SLOTS,
};
use splatfit::guidance::{
    ism_gradient, make_schedule, Denoiser, DenoiserQuery, IsmParams, MixtureComponent,
    MixtureDenoiser, NoiseSchedule,
};
use splatfit::image_buf::{box_resize_gray, Image};
use splatfit::losses::{emotion_loss, laplacian_loss, pos_loss};
use splatfit::metrics::{feature_stats, frechet_distance, nps, FeatureStats, FEATURE_DIM};
use splatfit::rasterizer::{render, render_backward};
use splatfit::scene::{
    init_scene, make_template, save_ply, AzimuthLabel, Camera, GaussianScene, Splat, TemplateKind,
};
use splatfit::trainer::{
    adam_step, fit, lr_multipliers, resume, AdamHyper, AdamState, TrainConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn test_camera(width: usize, height: usize) -> Camera {
    Camera {
        eye: [0.0, 0.0, 4.0],
        look_at: [0.0, 0.0, 0.0],
        up: [0.0, 1.0, 0.0],
        fov_y: 50.0_f64.to_radians(),
        width,
        height,
        azimuth_label: AzimuthLabel::Front,
    }
}

fn random_scene(n: usize, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splats: Vec<Splat> = (0..n)
        .map(|_| Splat {
            position: [
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            ],
            rotation: [
                rng.gen_range(0.5..1.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ],
            log_scale: [
                rng.gen_range(-1.8..-0.8),
                rng.gen_range(-1.8..-0.8),
                rng.gen_range(-1.8..-0.8),
            ],
            opacity_logit: rng.gen_range(-1.0..2.0),
            color: [
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.1..1.0),
            ],
        })
        .collect();
    let binding = (0..n).collect();
    GaussianScene { splats, binding }
}

// ---------------------------------------------------------------------------
// 1. Rasterizer gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_rasterizer_gradients_match_finite_differences() {
    let start = Instant::now();
    let cam = test_camera(32, 32);
    let mut checked = 0usize;
    let mut passed = 0usize;
    for seed in 0..5u64 {
        let scene = random_scene(10, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cot = Image::from_data(
            32,
            32,
            (0..32 * 32 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let loss = |s: &GaussianScene| -> f64 {
            render(s, &cam)
                .pixels
                .data
                .iter()
                .zip(&cot.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let analytic = render_backward(&scene, &cam, &cot);
        let params = scene.flatten();
        for i in 0..params.len() {
            if analytic.data[i].abs() <= 1e-6 {
                continue;
            }
            // small step: the render is only piecewise smooth across the
            // alpha-skip threshold, which the analytic gradient ignores
            let h = 1e-5f32 * params[i].abs().max(1.0);
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let achieved = plus[i] as f64 - minus[i] as f64;
            let mut sp = scene.clone();
            sp.unflatten(&plus);
            let mut sm = scene.clone();
            sm.unflatten(&minus);
            let fd = (loss(&sp) - loss(&sm)) / achieved;
            let diff = (fd - analytic.data[i]).abs();
            checked += 1;
            if diff <= 1e-5 + 1e-3 * analytic.data[i].abs().max(fd.abs()) {
                passed += 1;
            }
        }
    }
    assert!(checked > 100, "too few active parameters: {checked}");
    let frac = passed as f64 / checked as f64;
    assert!(frac >= 0.95, "only {passed}/{checked} partials matched");
    assert!(start.elapsed().as_secs() < 60, "gradcheck too slow");
    println!("criterion 1 rasterizer gradient check: pass ({passed}/{checked} partials)");
}

// ---------------------------------------------------------------------------
// 2. Embedding algebra
// ---------------------------------------------------------------------------

fn random_embedding(rng: &mut ChaCha8Rng, tag: &str) -> ConditioningEmbedding {
    let rows = (0..TOKEN_SLOTS)
        .map(|_| (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    ConditioningEmbedding::from_rows(rows, tag)
}

#[test]
fn criterion_2_embedding_endpoints_and_affinity() {
    let c_default = make_default_embedding(&IdentityEmbedding::from_image_bytes(b"img"), "a face")
        .unwrap();
    let c_view = encode_text("front view").unwrap();

    // endpoint identities hold exactly, not within tolerance
    assert_eq!(blend_view(&c_default, &c_view, 1.0).unwrap().tokens, c_default.tokens);
    assert_eq!(blend_view(&c_default, &c_view, 0.0).unwrap().tokens, c_view.tokens);
    let attr = encode_text("smiling").unwrap();
    assert_eq!(
        make_attribute_embedding(&c_default, "smiling", 0.0, AttributeKind::Expr)
            .unwrap()
            .tokens,
        c_default.tokens
    );
    assert_eq!(
        make_attribute_embedding(&c_default, "smiling", 1.0, AttributeKind::Expr)
            .unwrap()
            .tokens,
        attr.tokens
    );
    assert_eq!(intensity_blend(&c_default, &c_view, 0.0).unwrap().tokens, c_default.tokens);
    assert_eq!(intensity_blend(&c_default, &c_view, 1.0).unwrap().tokens, c_view.tokens);

    // affinity in the embedding argument on random triples
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let x = random_embedding(&mut rng, "x");
        let y = random_embedding(&mut rng, "y");
        let alpha: f64 = rng.gen_range(0.0..1.0);
        let mixed = ConditioningEmbedding::from_rows(
            (0..TOKEN_SLOTS)
                .map(|t| {
                    x.row(t)
                        .iter()
                        .zip(y.row(t))
                        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                        .collect()
                })
                .collect(),
            "mixed",
        );
        let b = rng.gen_range(0.0..1.0);
        let op = |e: &ConditioningEmbedding| blend_view(e, &c_view, b).unwrap().tokens;
        let lhs = op(&mixed);
        let ox = op(&x);
        let oy = op(&y);
        for (i, l) in lhs.iter().enumerate() {
            let r = alpha * ox[i] + (1.0 - alpha) * oy[i];
            assert!((l - r).abs() < 1e-9, "trial {trial} index {i}: {l} vs {r}");
        }

        let gamma = rng.gen_range(0.0..1.0);
        let op2 = |e: &ConditioningEmbedding| {
            make_attribute_embedding(e, "smiling", gamma, AttributeKind::Expr)
                .unwrap()
                .tokens
        };
        let (l2, ox2, oy2) = (op2(&mixed), op2(&x), op2(&y));
        for (i, l) in l2.iter().enumerate() {
            let r = alpha * ox2[i] + (1.0 - alpha) * oy2[i];
            assert!((l - r).abs() < 1e-9, "trial {trial} attr index {i}");
        }

        let eta = rng.gen_range(0.0..1.0);
        let op3 = |e: &ConditioningEmbedding| intensity_blend(e, &c_view, eta).unwrap().tokens;
        let (l3, ox3, oy3) = (op3(&mixed), op3(&x), op3(&y));
        for (i, l) in l3.iter().enumerate() {
            let r = alpha * ox3[i] + (1.0 - alpha) * oy3[i];
            assert!((l - r).abs() < 1e-9, "trial {trial} intensity index {i}");
        }
    }
    println!("criterion 2 embedding algebra: pass");
}

// ---------------------------------------------------------------------------
// 3. ISM sanity and toy convergence
// ---------------------------------------------------------------------------

struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn eval(&self, query: &DenoiserQuery, _schedule: &NoiseSchedule) -> splatfit::Result<Image> {
        Ok(Image::zeros(query.image.width, query.image.height))
    }
}

#[test]
fn criterion_3_ism_zero_residual_and_toy_convergence() {
    let start = Instant::now();
    let schedule = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let cam = test_camera(16, 16);
    let conditioning = encode_text("target").unwrap();
    let params = IsmParams {
        t_range: (60, 200),
        stride: 20,
        reference_uses_conditioning: false,
    };

    // identical epsilon on both branches: the gradient is exactly zero
    let scene = random_scene(4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (grads, diag) = ism_gradient(
        &scene,
        &cam,
        &conditioning,
        &schedule,
        &ZeroDenoiser,
        &mut rng,
        &params,
    )
    .unwrap();
    assert_eq!(diag.residual_norm, 0.0);
    assert!(grads.data.iter().all(|&g| g == 0.0));

    // toy convergence: pull a 4-splat render toward a renderable target
    let mut target_scene = random_scene(4, 1);
    let colors = [[0.9, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.2, 0.9], [0.9, 0.8, 0.1]];
    for (s, c) in target_scene.splats.iter_mut().zip(colors) {
        s.color = c;
    }
    let mu_target = render(&target_scene, &cam).pixels;
    let denoiser = MixtureDenoiser::new(vec![MixtureComponent {
        mean: mu_target.clone(),
        std: 0.5,
        prompt: String::new(),
    }]);

    let mut scene = random_scene(4, 1);
    for s in &mut scene.splats {
        s.color = [0.5, 0.5, 0.5];
    }
    let d0 = render(&scene, &cam).pixels.l2_distance(&mu_target);
    let hyper = AdamHyper {
        lr: 2e-2,
        ..Default::default()
    };
    let mut adam = AdamState::zeros(scene.parameter_count());
    let lr_scale = lr_multipliers(scene.splats.len());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let (grads, _) = ism_gradient(
            &scene,
            &cam,
            &conditioning,
            &schedule,
            &denoiser,
            &mut rng,
            &params,
        )
        .unwrap();
        let mut p: Vec<f64> = scene.flatten().iter().map(|&v| v as f64).collect();
        adam_step(&mut p, &grads.data, &mut adam, &hyper, &lr_scale);
        let q: Vec<f32> = p.iter().map(|&v| v as f32).collect();
        scene.unflatten(&q);
        for s in &mut scene.splats {
            s.renormalize_rotation();
        }
    }
    let d_end = render(&scene, &cam).pixels.l2_distance(&mu_target);
    assert!(
        d_end * 5.0 <= d0,
        "insufficient convergence: {d0} -> {d_end}"
    );
    assert!(start.elapsed().as_secs() < 300, "toy convergence too slow");
    println!("criterion 3 ism sanity and convergence: pass ({d0:.4} -> {d_end:.4})");
}

// ---------------------------------------------------------------------------
// 4. Expression regularization efficacy
// ---------------------------------------------------------------------------

fn small_classifier() -> EmotionClassifier {
    let (clf, report) = train_classifier(&ClassifierTrainConfig {
        per_class: 12,
        holdout_per_class: 2,
        epochs: 300,
        ..Default::default()
    })
    .unwrap();
    assert!(report.holdout_accuracy > 0.8, "{}", report.holdout_accuracy);
    clf
}

fn glyph_mean_denoiser(class: usize, size: usize) -> MixtureDenoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut acc = vec![0.0f64; size * size];
    let n = 16;
    for _ in 0..n {
        let glyph = make_glyph(class, &mut rng);
        let small = box_resize_gray(&glyph.to_gray(), glyph.width, glyph.height, size, size);
        for (a, v) in acc.iter_mut().zip(&small) {
            *a += v / n as f64;
        }
    }
    let data = acc.iter().flat_map(|&v| [v, v, v]).collect();
    MixtureDenoiser::new(vec![MixtureComponent {
        mean: Image::from_data(size, size, data),
        std: 0.6,
        prompt: String::new(),
    }])
}

#[test]
fn criterion_4_expression_regularization_lowers_nps() {
    let clf = small_classifier();
    let mesh = make_template(&TemplateKind::Icosphere { subdivisions: 0 }).unwrap();
    let happy = EMOTION_LABELS.iter().position(|l| *l == "happy").unwrap();
    let denoiser = glyph_mean_denoiser(happy, 16);

    let mut config = TrainConfig {
        iterations: 200,
        render_size: 16,
        t_range: (60, 200),
        stride: 20,
        emotion_every: 1,
        target_expression: Some("neutral".into()),
        ..Default::default()
    };
    config.weights.lambda_emotion = 8.0;
    config.validate().unwrap();

    let mut reg_lower = 0;
    for seed in 0..5u64 {
        config.seed = seed;
        config.disable_emotion_loss = false;
        let with = fit(b"photo", &mesh, &denoiser, Some(&clf), &config).unwrap();
        config.disable_emotion_loss = true;
        let without = fit(b"photo", &mesh, &denoiser, Some(&clf), &config).unwrap();

        let nps_with = nps(&with.scene, &clf, &mesh);
        let nps_without = nps(&without.scene, &clf, &mesh);
        if nps_with < nps_without {
            reg_lower += 1;
        }
        // confident target prediction on the regularized arm
        let frontal = render(&with.scene, &mesh.frontal_camera);
        let probs = clf.predict(&frontal.pixels);
        let neutral = EMOTION_LABELS.iter().position(|l| *l == "neutral").unwrap();
        assert!(
            probs[neutral] >= 0.9,
            "seed {seed}: p[neutral] = {}",
            probs[neutral]
        );
    }
    assert!(reg_lower >= 4, "regularized arm lower in only {reg_lower}/5 seeds");
    println!("criterion 4 expression regularization: pass ({reg_lower}/5 seeds)");
}

// ---------------------------------------------------------------------------
// 5. Semantic embedding ablation
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_semantic_ablation_changes_tags_and_render() {
    let mesh = make_template(&TemplateKind::Icosphere { subdivisions: 0 }).unwrap();
    let denoiser = MixtureDenoiser::new(vec![
        MixtureComponent {
            mean: Image::constant(16, 16, 0.25),
            std: 0.5,
            prompt: "view:".into(),
        },
        MixtureComponent {
            mean: Image::constant(16, 16, 0.85),
            std: 0.5,
            prompt: "expr:happy".into(),
        },
    ]);

    let mut config = TrainConfig {
        iterations: 40,
        render_size: 16,
        t_range: (60, 200),
        stride: 20,
        ..Default::default()
    };
    config.prompts.expr = "happy".into();
    config.prompts.acc = "glasses".into();
    config.validate().unwrap();

    config.disable_semantic_embedding = true;
    let ablated = fit(b"photo", &mesh, &denoiser, None, &config).unwrap();
    config.disable_semantic_embedding = false;
    let full = fit(b"photo", &mesh, &denoiser, None, &config).unwrap();

    for line in &ablated.log {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let tag = record["conditioning_tag"].as_str().unwrap();
        assert!(!tag.contains("expr:") && !tag.contains("acc:"), "{tag}");
    }
    for line in &full.log {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let tag = record["conditioning_tag"].as_str().unwrap();
        assert!(tag.contains("expr:") && tag.contains("acc:"), "{tag}");
    }

    let cam = mesh.frontal_camera.with_size(16, 16);
    let diff = render(&ablated.scene, &cam)
        .pixels
        .max_abs_diff(&render(&full.scene, &cam).pixels);
    assert!(diff > 0.01, "renders too similar: {diff}");
    println!("criterion 5 semantic embedding ablation: pass (max diff {diff:.4})");
}

// ---------------------------------------------------------------------------
// 6. Regularizer identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_loss_identities() {
    let mesh = make_template(&TemplateKind::Icosphere { subdivisions: 1 }).unwrap();
    let scene = init_scene(&mesh, 1, 0).unwrap();
    let (pos, _) = pos_loss(&scene, &mesh);
    assert_eq!(pos, 0.0);
    let lap = laplacian_loss(&scene, &mesh);
    assert_eq!(lap.value, 0.0);

    // uniform translation leaves the laplacian term invariant
    let mut shifted = scene.clone();
    let mut shifted_mesh = mesh.clone();
    for s in &mut shifted.splats {
        s.position[0] += 0.37;
        s.position[1] -= 0.21;
    }
    for v in &mut shifted_mesh.vertices {
        v[0] += 0.37;
        v[1] -= 0.21;
    }
    let lap_shifted = laplacian_loss(&shifted, &shifted_mesh);
    assert!((lap_shifted.value - lap.value).abs() < 1e-9);

    let k = EMOTION_LABELS.len();
    let uniform = vec![1.0 / k as f64; k];
    let (ce, _) = emotion_loss(&uniform, 0);
    assert!((ce - (k as f64).ln()).abs() < 1e-9);
    println!("criterion 6 loss identities: pass");
}

// ---------------------------------------------------------------------------
// 7. Metrics closed forms
// ---------------------------------------------------------------------------

fn diag_stats(diag: impl Fn(usize) -> f64, mean: impl Fn(usize) -> f64) -> FeatureStats {
    FeatureStats {
        mean: DVector::from_fn(FEATURE_DIM, |i, _| mean(i)),
        cov: DMatrix::from_diagonal(&DVector::from_fn(FEATURE_DIM, |i, _| diag(i))),
        n: 10,
    }
}

#[test]
fn criterion_7_metric_closed_forms() {
    // identity
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let imgs: Vec<Image> = (0..8)
        .map(|_| {
            Image::from_data(
                24,
                24,
                (0..24 * 24 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
        })
        .collect();
    let stats = feature_stats(&imgs).unwrap();
    assert!(frechet_distance(&stats, &stats).unwrap() < 1e-6);

    // pure mean shift
    let a = diag_stats(|i| 0.3 + 0.02 * i as f64, |_| 0.0);
    let b = diag_stats(|i| 0.3 + 0.02 * i as f64, |i| 0.05 * (i as f64 + 1.0));
    let expected: f64 = (0..FEATURE_DIM).map(|i| (0.05 * (i as f64 + 1.0)).powi(2)).sum();
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-6);

    // commuting diagonal covariances
    let a = diag_stats(|i| 0.2 + 0.03 * i as f64, |_| 0.1);
    let b = diag_stats(|i| 1.5 - 0.01 * i as f64, |_| 0.1);
    let expected: f64 = (0..FEATURE_DIM)
        .map(|i| {
            let x: f64 = 0.2 + 0.03 * i as f64;
            let y: f64 = 1.5 - 0.01 * i as f64;
            (x.sqrt() - y.sqrt()).powi(2)
        })
        .sum();
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-6);

    // the neutrality score is exactly the neutral-target cross entropy
    let clf = small_classifier();
    let mesh = make_template(&TemplateKind::Icosphere { subdivisions: 0 }).unwrap();
    let scene = init_scene(&mesh, 1, 0).unwrap();
    let rendered = render(&scene, &mesh.frontal_camera);
    let neutral = EMOTION_LABELS.iter().position(|l| *l == "neutral").unwrap();
    let direct = emotion_loss(&clf.predict(&rendered.pixels), neutral).0;
    assert_eq!(nps(&scene, &clf, &mesh), direct);
    println!("criterion 7 metric closed forms: pass");
}

// ---------------------------------------------------------------------------
// 8. Reproducibility and checkpoint resume
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_reproducibility_and_resume() {
    let mesh = make_template(&TemplateKind::Icosphere { subdivisions: 0 }).unwrap();
    let denoiser = MixtureDenoiser::new(vec![MixtureComponent {
        mean: Image::constant(16, 16, 0.4),
        std: 0.5,
        prompt: String::new(),
    }]);
    let config = TrainConfig {
        iterations: 8,
        render_size: 16,
        t_range: (60, 200),
        stride: 20,
        checkpoint_every: 4,
        seed: 3,
        ..Default::default()
    };
    config.validate().unwrap();

    let run_a = fit(b"photo", &mesh, &denoiser, None, &config).unwrap();
    let run_b = fit(b"photo", &mesh, &denoiser, None, &config).unwrap();
    assert_eq!(run_a.log, run_b.log);
    assert_eq!(save_ply(&run_a.scene), save_ply(&run_b.scene));

    // resume from the midpoint checkpoint matches the uninterrupted run bitwise
    let midpoint = run_a
        .checkpoints
        .iter()
        .find(|c| c.iteration == 4)
        .expect("midpoint checkpoint");
    let resumed = resume(midpoint, b"photo", &mesh, &denoiser, None, &config).unwrap();
    assert_eq!(save_ply(&resumed.scene), save_ply(&run_a.scene));
    assert_eq!(resumed.log.as_slice(), &run_a.log[4..]);
    println!("criterion 8 reproducibility and resume: pass");
}

// ---------------------------------------------------------------------------
// 9. Surrogate classifier
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_classifier_accuracy_and_pixel_gradients() {
    let (clf, report) = train_classifier(&ClassifierTrainConfig::default()).unwrap();
    assert!(
        report.holdout_accuracy >= 0.95,
        "holdout accuracy {}",
        report.holdout_accuracy
    );

    // pixel-space gradient of the cross entropy against central differences,
    // end to end through the downsampling front end on a rendered image
    let mesh = make_template(&TemplateKind::Icosphere { subdivisions: 0 }).unwrap();
    let scene = init_scene(&mesh, 1, 0).unwrap();
    let cam = mesh.frontal_camera.with_size(32, 32);
    let image = render(&scene, &cam).pixels;
    let target = EMOTION_LABELS.iter().position(|l| *l == "happy").unwrap();
    let (_, grad) = clf.predict_backward(&image, target);
    let loss = |img: &Image| emotion_loss(&clf.predict(img), target).0;

    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut checked = 0;
    while checked < 60 {
        let i = rng.gen_range(0..image.data.len());
        if grad.data[i].abs() < 1e-8 {
            continue;
        }
        let h = 1e-4;
        let mut plus = image.clone();
        plus.data[i] += h;
        let mut minus = image.clone();
        minus.data[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let diff = (fd - grad.data[i]).abs();
        assert!(
            diff <= 5e-3 * grad.data[i].abs().max(fd.abs()).max(1e-6),
            "pixel {i}: analytic {} fd {fd}",
            grad.data[i]
        );
        checked += 1;
    }
    println!(
        "criterion 9 classifier: pass (holdout {:.3}, {checked} pixel partials)",
        report.holdout_accuracy
    );
}
