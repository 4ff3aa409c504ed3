//! Command-line surface binding all modules into reproducible runs.
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use splatfit::classifier::{train_classifier, ClassifierTrainConfig, EmotionClassifier};
use splatfit::embedding::{encode_text, row_cosines};
use splatfit::guidance::MixtureDenoiser;
use splatfit::image_buf::Image;
use splatfit::metrics::{feature_stats, frechet_distance, id_similarity, nps};
use splatfit::scene::{
    load_ply, make_template, save_ply, AzimuthLabel, Camera, TemplateKind, TemplateMesh,
};
use splatfit::trainer::fit;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "splatfit",
    version,
    about = "Gaussian-splat avatar optimization with diffusion guidance",
    max_term_width = 100
)]
struct Cli {
    /// Rasterizer thread count; output is bit-identical for any value
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a splat avatar from an input photo
    Fit {
        /// Input photo (bytes feed the identity embedding)
        #[arg(long)]
        image: PathBuf,
        /// Flat key = value run configuration
        #[arg(long)]
        config: PathBuf,
        /// Output directory for final.ply, log.jsonl, checkpoints/
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a PLY scene to a PNG
    Render {
        /// Scene PLY path
        #[arg(long)]
        scene: PathBuf,
        /// Camera azimuth in degrees (0 = frontal)
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        /// Camera elevation in degrees
        #[arg(long, default_value_t = 0.0)]
        elevation: f64,
        /// Square output resolution
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Output PNG path
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics over image directories and/or a scene
    Metrics {
        /// Output JSON report path
        #[arg(long)]
        report: PathBuf,
        /// First PNG directory for the Frechet distance
        #[arg(long)]
        dir_a: Option<PathBuf>,
        /// Second PNG directory for the Frechet distance
        #[arg(long)]
        dir_b: Option<PathBuf>,
        /// Identity pairs as left.png:right.png
        #[arg(long)]
        pair: Vec<String>,
        /// Scene PLY for the neutrality preservation score
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Classifier weights header for the neutrality score
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Template (icosphere:N or OBJ path) for the frontal camera
        #[arg(long, default_value = "icosphere:1")]
        template: String,
    },
    /// Train the surrogate expression classifier
    ClassifierTrain {
        /// Output weights header path (.json; .bin written alongside)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
    },
    /// Inspect pairwise similarities of prompt embeddings
    EmbedInspect {
        /// Prompts to encode and compare
        #[arg(required = true)]
        prompts: Vec<String>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses 0 for --help/--version and 2 for usage errors
            e.exit();
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// Numeric failures exit 3; everything else is a usage/config error (2).
fn exit_code(e: &anyhow::Error) -> i32 {
    if let Some(err) = e.downcast_ref::<splatfit::Error>() {
        if matches!(err, splatfit::Error::Diverged(_) | splatfit::Error::NonFinite(_)) {
            return 3;
        }
    }
    if e.to_string().contains("numeric abort") {
        return 3;
    }
    2
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit {
            image,
            config,
            out_dir,
        } => cmd_fit(&image, &config, &out_dir),
        Command::Render {
            scene,
            azimuth,
            elevation,
            size,
            out,
        } => cmd_render(&scene, azimuth, elevation, size, &out),
        Command::Metrics {
            report,
            dir_a,
            dir_b,
            pair,
            scene,
            classifier,
            template,
        } => cmd_metrics(
            &report,
            dir_a.as_deref(),
            dir_b.as_deref(),
            &pair,
            scene.as_deref(),
            classifier.as_deref(),
            &template,
        ),
        Command::ClassifierTrain {
            out,
            seed,
            per_class,
            epochs,
        } => cmd_classifier_train(&out, seed, per_class, epochs),
        Command::EmbedInspect { prompts } => cmd_embed_inspect(&prompts),
    }
}

fn parse_template(spec: &str) -> Result<TemplateMesh> {
    let kind = if let Some(n) = spec.strip_prefix("icosphere:") {
        TemplateKind::Icosphere {
            subdivisions: n
                .parse()
                .with_context(|| format!("bad icosphere subdivision count {n:?}"))?,
        }
    } else {
        TemplateKind::ObjFile {
            path: PathBuf::from(spec),
        }
    };
    Ok(make_template(&kind)?)
}

fn cmd_fit(image: &Path, config_path: &Path, out_dir: &Path) -> Result<()> {
    let image_bytes =
        std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let run_config = config::parse(&text)?;
    run_config.train.validate()?;
    let mesh = parse_template(&run_config.paths.template)?;
    if run_config.paths.denoiser_dir.is_empty() {
        bail!("config must set denoiser_dir");
    }
    let denoiser = MixtureDenoiser::from_dir(Path::new(&run_config.paths.denoiser_dir))?;
    let classifier = if run_config.paths.classifier.is_empty() {
        None
    } else {
        Some(EmotionClassifier::load(Path::new(&run_config.paths.classifier))?)
    };
    if classifier.is_none()
        && run_config.train.target_expression.is_some()
        && !run_config.train.disable_emotion_loss
    {
        bail!("target_expression requires a classifier path in the config");
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    std::fs::write(out_dir.join("config.resolved"), config::serialize(&run_config))?;

    let result = fit(
        &image_bytes,
        &mesh,
        &denoiser,
        classifier.as_ref(),
        &run_config.train,
    )?;
    std::fs::write(out_dir.join("final.ply"), save_ply(&result.scene))?;
    let mut log = result.log.join("\n");
    log.push('\n');
    std::fs::write(out_dir.join("log.jsonl"), log)?;
    for cp in &result.checkpoints {
        cp.save(&out_dir.join(format!("checkpoints/ckpt-{:05}", cp.iteration)))?;
    }
    if let Some(report) = result.aborted {
        bail!("numeric abort: {report}");
    }
    Ok(())
}

fn cmd_render(scene: &Path, azimuth: f64, elevation: f64, size: usize, out: &Path) -> Result<()> {
    if size < 1 {
        bail!("--size must be positive");
    }
    let bytes = std::fs::read(scene).with_context(|| format!("reading {}", scene.display()))?;
    let scene = load_ply(&bytes)?;
    let camera = orbit_camera(&scene, azimuth, elevation, size);
    let rendered = splatfit::rasterizer::render(&scene, &camera);
    rendered.pixels.save_png(out)?;
    Ok(())
}

/// Camera on the splat cloud's bounding sphere, frontal at azimuth 0.
fn orbit_camera(
    scene: &splatfit::scene::GaussianScene,
    azimuth_deg: f64,
    elevation_deg: f64,
    size: usize,
) -> Camera {
    let mut center = [0.0f64; 3];
    for s in &scene.splats {
        #[allow(clippy::needless_range_loop)]
        for k in 0..3 {
            center[k] += s.position[k] as f64 / scene.splats.len() as f64;
        }
    }
    let radius = scene
        .splats
        .iter()
        .map(|s| {
            let d: f64 = (0..3)
                .map(|k| (s.position[k] as f64 - center[k]).powi(2))
                .sum();
            d.sqrt() + s.scale().iter().cloned().fold(0.0, f64::max) * 3.0
        })
        .fold(0.0, f64::max)
        .max(1e-6);
    let fov_y = 50.0_f64.to_radians();
    let distance = 1.1 * radius / (fov_y / 2.0).sin();
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    let dir = [az.sin() * el.cos(), el.sin(), az.cos() * el.cos()];
    Camera {
        eye: [
            center[0] + distance * dir[0],
            center[1] + distance * dir[1],
            center[2] + distance * dir[2],
        ],
        look_at: center,
        up: [0.0, 1.0, 0.0],
        fov_y,
        width: size,
        height: size,
        azimuth_label: AzimuthLabel::from_azimuth_deg(azimuth_deg),
    }
}

fn load_png_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    paths.iter().map(|p| Ok(Image::load_png(p)?)).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_metrics(
    report_path: &Path,
    dir_a: Option<&Path>,
    dir_b: Option<&Path>,
    pairs: &[String],
    scene: Option<&Path>,
    classifier: Option<&Path>,
    template: &str,
) -> Result<()> {
    let mut report = serde_json::Map::new();

    match (dir_a, dir_b) {
        (Some(a), Some(b)) => {
            let stats_a = feature_stats(&load_png_dir(a)?)?;
            let stats_b = feature_stats(&load_png_dir(b)?)?;
            let fd = frechet_distance(&stats_a, &stats_b)?;
            report.insert("fd".into(), fd.into());
        }
        (None, None) => {}
        _ => bail!("--dir-a and --dir-b must be given together"),
    }

    if !pairs.is_empty() {
        let mut sims = Vec::new();
        let mut listed = Vec::new();
        for pair in pairs {
            let (left, right) = pair
                .split_once(':')
                .ok_or_else(|| anyhow!("pair {pair:?} is not left.png:right.png"))?;
            let a = Image::load_png(Path::new(left))?;
            let b = Image::load_png(Path::new(right))?;
            sims.push(id_similarity(&a, &b));
            listed.push(serde_json::json!({ "left": left, "right": right }));
        }
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        report.insert("id_mean".into(), mean.into());
        report.insert("id_pairs".into(), listed.into());
    }

    if let Some(scene_path) = scene {
        let classifier_path =
            classifier.ok_or_else(|| anyhow!("--scene requires --classifier for nps"))?;
        let scene = load_ply(&std::fs::read(scene_path)?)?;
        let clf = EmotionClassifier::load(classifier_path)?;
        let mesh = parse_template(template)?;
        report.insert("nps".into(), nps(&scene, &clf, &mesh).into());
    }

    if report.is_empty() {
        bail!("nothing to compute: pass --dir-a/--dir-b, --pair, or --scene");
    }
    std::fs::write(
        report_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(report))?,
    )?;
    Ok(())
}

fn cmd_classifier_train(out: &Path, seed: u64, per_class: usize, epochs: usize) -> Result<()> {
    let config = ClassifierTrainConfig {
        per_class,
        holdout_per_class: (per_class / 4).max(1),
        epochs,
        seed,
        ..Default::default()
    };
    let (model, report) = train_classifier(&config)?;
    model.save(out)?;
    println!(
        "{}",
        serde_json::json!({
            "holdout_accuracy": report.holdout_accuracy,
            "train_accuracy": report.train_accuracy,
            "final_loss": report.final_loss,
            "weights": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_embed_inspect(prompts: &[String]) -> Result<()> {
    let embeddings = prompts
        .iter()
        .map(|p| Ok(encode_text(p)?))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let cosines = row_cosines(&embeddings[i], &embeddings[j]);
            let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
            pairs.push(serde_json::json!({
                "a": prompts[i],
                "b": prompts[j],
                "mean_row_cosine": mean,
            }));
        }
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "prompts": prompts,
            "pairs": pairs,
        }))?
    );
    Ok(())
}
