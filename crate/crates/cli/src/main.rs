mod data;
mod learn;
mod pseudo;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use drivedit_core::backends::BackendSet;
use drivedit_editsvc::{AppState, ServiceConfig, SessionStore};

#[derive(Parser)]
#[command(name = "drivedit", version, about = "Driving-scene edit data pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PseudoKind {
    Global,
    Local,
}

#[derive(Subcommand)]
enum Command {
    /// Pair frames across traversals by pose distance.
    Pair {
        /// JSONL of frame poses.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        #[arg(long, default_value_t = 5.0)]
        radius: f64,
        /// Shortest-arc angle differences instead of raw ones.
        #[arg(long)]
        wrap_angles: bool,
        /// Restrict candidates to these traversal ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        traversals: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate every PNG in a directory.
    Describe {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        backends: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble a LangMask from edit specs.
    Mask {
        #[arg(long)]
        annotation: PathBuf,
        /// JSON array of edit specs.
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        backends: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the binary projection as PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Generate pseudo training pairs.
    Pseudogen {
        kind: PseudoKind,
        #[arg(long)]
        annotations: PathBuf,
        /// Directory holding `{image_id}.png`; defaults to the annotations' directory.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        backends: Option<PathBuf>,
        /// JSON overrides for the local generator.
        #[arg(long)]
        local_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run quality gates over a pseudogen output directory.
    Qc {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        backends: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Two-stage training of the toy generator.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated outputs against manifest targets.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        backends: Option<PathBuf>,
        /// Generate `{outputs}/{pair_id}.png` with this checkpoint first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = drivedit_core::evalkit::DEFAULT_CROP_PAD)]
        pad: u32,
        #[arg(long)]
        report: PathBuf,
    },
    /// Serve the edit-session HTTP API.
    Serve {
        #[arg(long, env = "DRIVEDIT_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = "DRIVEDIT_BACKENDS")]
        backends: Option<PathBuf>,
        #[arg(long, env = "DRIVEDIT_PERSIST")]
        persist: Option<PathBuf>,
        #[arg(long, env = "DRIVEDIT_RENDER_TIMEOUT_SECS", default_value_t = 60)]
        render_timeout_secs: u64,
    },
}

pub fn load_backends(path: Option<&Path>) -> Result<BackendSet> {
    match path {
        Some(p) => BackendSet::load(p).with_context(|| format!("loading backends from {}", p.display())),
        None => Ok(BackendSet::mock()),
    }
}

fn main() -> Result<()> {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match Cli::parse().command {
        Command::Pair {
            poses,
            threshold,
            radius,
            wrap_angles,
            traversals,
            out,
        } => data::pair(&poses, threshold, radius, wrap_angles, traversals, &out),
        Command::Describe { images, backends, out } => data::describe(&images, backends.as_deref(), &out),
        Command::Mask {
            annotation,
            edits,
            backends,
            out,
            png,
        } => data::mask(&annotation, &edits, backends.as_deref(), &out, png.as_deref()),
        Command::Pseudogen {
            kind,
            annotations,
            images,
            backends,
            local_config,
            seed,
            out,
        } => pseudo::pseudogen(
            kind,
            &annotations,
            images.as_deref(),
            backends.as_deref(),
            local_config.as_deref(),
            seed,
            &out,
        ),
        Command::Qc {
            input,
            backends,
            report,
        } => pseudo::qc(&input, backends.as_deref(), &report),
        Command::Train { config, out } => learn::train(config.as_deref(), &out),
        Command::Eval {
            manifest,
            outputs,
            backends,
            checkpoint,
            pad,
            report,
        } => learn::eval(
            &manifest,
            &outputs,
            backends.as_deref(),
            checkpoint.as_deref(),
            pad,
            &report,
        ),
        Command::Serve {
            bind,
            backends,
            persist,
            render_timeout_secs,
        } => {
            let store = match &persist {
                Some(dir) => SessionStore::persistent(dir)?,
                None => SessionStore::in_memory(),
            };
            let state = AppState::new(
                load_backends(backends.as_deref())?,
                store,
                ServiceConfig {
                    render_timeout: Duration::from_secs(render_timeout_secs),
                    ..ServiceConfig::default()
                },
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(drivedit_editsvc::serve(bind, state))?;
            Ok(())
        }
    }
}
