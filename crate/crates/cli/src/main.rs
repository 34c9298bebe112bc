//! `geodiff` command-line tool.
//!
//! Exit codes: 0 on success, 2 when the inputs are invalid, 3 when the run
//! itself fails.

mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geodiff::diffnet::{Denoiser, UnetConfig};
use geodiff::geometry::build_field;
use geodiff::io::{read_png_mask, read_png_rgb, write_png};
use geodiff::pipeline::{invert_image, preview, run_edit, warp_error, EditConfig};
use geodiff::sampler::Trajectory;
use geodiff::train::{train_toy, TrainConfig};
use serde_json::json;

use args::TransformArgs;

/// Environment variable naming the denoiser checkpoint.
const CHECKPOINT_ENV: &str = "GEODIFF_CHECKPOINT";

#[derive(Parser)]
#[command(name = "geodiff", version, about = "Geometry-aware diffusion image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// DDIM-invert an image and save the trajectory.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an edit and write the edited image.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        transform: TransformArgs,
        /// Edit config as JSON. Transform flags replace its `transform`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Reuse a trajectory saved by `geodiff invert`.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the naive-warp baseline here.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Write warp error, loss curves and step records as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the warp overlay and transformed masks without editing.
    Preview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        transform: TransformArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `warp_overlay.png`, `m_obj_t.png` and `m_disocc.png`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluation metrics.
    Metric {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Inversions and edits that may run at once.
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
    /// Train a toy checkpoint on procedural square scenes.
    TrainToy {
        #[arg(long, default_value_t = 8000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Metric {
    /// Mean absolute difference between the forward-warped object and the
    /// edited image over the warped object's pixels.
    WarpError {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        transform: TransformArgs,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// What went wrong, split by exit code.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<geodiff::Error> for Failure {
    fn from(e: geodiff::Error) -> Self {
        use geodiff::Error as E;
        match &e {
            _ if e.is_validation() => Failure::Invalid(e.to_string()),
            E::Json(_) | E::Image(_) | E::Missing(_) => Failure::Invalid(e.to_string()),
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_model() -> Outcome<Denoiser> {
    match std::env::var_os(CHECKPOINT_ENV) {
        Some(p) => Denoiser::load(&p).map_err(|e| Failure::Runtime(format!("loading checkpoint {}: {e}", Path::new(&p).display()))),
        None => {
            tracing::warn!("{CHECKPOINT_ENV} is not set; using an untrained model");
            Ok(Denoiser::random(UnetConfig::default(), 0))
        }
    }
}

/// Builds the edit config from `--config` and the transform flags.
fn edit_config(config: Option<&Path>, transform: &TransformArgs, steps: Option<usize>) -> Outcome<EditConfig> {
    let mut value = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(geodiff::Error::from)?;
            serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Failure::Invalid("edit config must be a JSON object".into()))?;
    if let Some(t) = transform.to_transform().map_err(Failure::Invalid)? {
        obj.insert("transform".into(), serde_json::to_value(t).expect("transform serializes"));
    } else if let Some(d) = &transform.depth {
        if let Some(t) = obj.get_mut("transform").and_then(|t| t.as_object_mut()) {
            t.insert("depth_source".into(), serde_json::to_value(d.source()).expect("depth source serializes"));
        }
    }
    if !obj.contains_key("transform") {
        return Err(Failure::Invalid("no transform: pass --kind or a config with `transform`".into()));
    }
    if let Some(s) = steps {
        obj.insert("steps".into(), json!(s));
    }
    Ok(EditConfig::from_json(&value.to_string())?)
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Invert { image, steps, out } => {
            let model = load_model()?;
            let img = read_png_rgb(&image)?;
            if steps == 0 {
                return Err(Failure::Invalid("steps must be at least 1".into()));
            }
            let traj = invert_image(&model, &img, steps)?;
            traj.save(&out)?;
            println!("{}", json!({ "trajectory": out, "steps": steps }));
        }
        Command::Edit {
            image,
            mask,
            transform,
            config,
            steps,
            trajectory,
            out,
            baseline,
            report,
        } => {
            let cfg = edit_config(config.as_deref(), &transform, steps)?;
            let img = read_png_rgb(&image)?;
            let m = read_png_mask(&mask)?;
            let depth = transform.depth_raster()?;
            let model = load_model()?;
            let traj = trajectory.as_deref().map(Trajectory::load).transpose()?;
            let outputs = run_edit(&model, &img, &m, depth.as_ref(), &cfg, traj.as_ref(), &mut |p| {
                tracing::info!(step = p.step, steps = p.steps, "denoising");
            })?;
            write_png(&out, &outputs.edited)?;
            if let Some(b) = &baseline {
                write_png(b, &outputs.baseline)?;
            }
            if let Some(r) = &report {
                let body = json!({
                    "warp_error": outputs.warp_error,
                    "loss_curves": outputs.loss_curves,
                    "steps": outputs.steps,
                });
                std::fs::write(r, serde_json::to_string_pretty(&body).expect("report serializes")).map_err(geodiff::Error::from)?;
            }
            println!("{}", json!({ "edited": out, "warp_error": outputs.warp_error }));
        }
        Command::Preview {
            image,
            mask,
            transform,
            config,
            out_dir,
        } => {
            let cfg = edit_config(config.as_deref(), &transform, None)?;
            let img = read_png_rgb(&image)?;
            let m = read_png_mask(&mask)?;
            let depth = transform.depth_raster()?;
            let p = preview(&img, &m, depth.as_ref(), &cfg.transform, cfg.intrinsics.as_ref())?;
            std::fs::create_dir_all(&out_dir).map_err(geodiff::Error::from)?;
            write_png(out_dir.join("warp_overlay.png"), &p.warp_overlay)?;
            write_png(out_dir.join("m_obj_t.png"), &p.masks.m_obj_t)?;
            write_png(out_dir.join("m_disocc.png"), &p.masks.m_disocc)?;
            println!(
                "{}",
                json!({ "out_dir": out_dir, "m_obj_t": p.masks.m_obj_t.count_on(), "m_disocc": p.masks.m_disocc.count_on() })
            );
        }
        Command::Metric {
            metric:
                Metric::WarpError {
                    input,
                    edited,
                    mask,
                    transform,
                    config,
                },
        } => {
            let cfg = edit_config(config.as_deref(), &transform, None)?;
            let a = read_png_rgb(&input)?;
            let b = read_png_rgb(&edited)?;
            let m = read_png_mask(&mask)?;
            let depth = transform.depth_raster()?;
            let (h, w) = a.dims();
            let field = build_field(&cfg.transform, h, w, depth.as_ref(), cfg.intrinsics.as_ref(), Some(&m))?;
            let we = warp_error(&a, &b, &m, &field)?;
            println!("{}", json!({ "warp_error": we }));
        }
        Command::Serve { port, host, workers } => {
            let model = load_model()?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(|e| Failure::Runtime(format!("binding {host}:{port}: {e}")))?;
                tracing::info!("listening on {}", listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?);
                geodiff_service::serve(listener, geodiff_service::AppState::new(model, workers))
                    .await
                    .map_err(|e| Failure::Runtime(e.to_string()))
            })?;
        }
        Command::TrainToy { iterations, seed, out } => {
            let cfg = TrainConfig {
                iterations,
                seed,
                ..TrainConfig::default()
            };
            let mut avg = 0.0;
            let model = train_toy(cfg, &mut |it, loss| {
                avg += loss;
                if (it + 1) % 200 == 0 {
                    tracing::info!(iteration = it + 1, loss = avg / 200.0, "training");
                    avg = 0.0;
                }
            })?;
            model.save(&out)?;
            println!("{}", json!({ "checkpoint": out, "iterations": iterations }));
        }
    }
    Ok(())
}
