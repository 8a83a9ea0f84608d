use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use promptseg::config::ExperimentConfig;
use promptseg::evaluate::{self, EvalOptions, EvaluateError};
use promptseg::fuse::{fuse_records, fuse_volumes, FusionReport};
use promptseg::manifest::{self, CaseManifest};
use promptseg::report::{self, ReportError};
use promptseg::service::{self, AppState, ServiceConfig};
use promptseg::stub::{stub_router, StubMode};
use promptseg::{demo, evaluate::write_atomic};
use promptseg_core::backend::{build_backend, ExternalBackend, Segmenter};
use promptseg_core::volume::{load_volume, tumor_core_mask, BinaryVolume, Orientation, VolumeKind};

const EXIT_INVALID: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(
    name = "promptseg",
    version,
    about = "Prompt-simulation workbench for promptable slice segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulated-user evaluation over the configured grid.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Skip cases with a valid checkpoint from an earlier run.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Stack 2D results into volumes and score them against ground truth.
    Fuse {
        #[arg(long, conflicts_with = "exports", required_unless_present = "exports")]
        records: Option<PathBuf>,
        /// Directory of exported NIfTI volumes named `<case>_<orientation>*.nii[.gz]`.
        #[arg(long)]
        exports: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `<dataset>/manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,4")]
        core_labels: Vec<i32>,
        /// Defaults to the directory of the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate records into summary tables and tests.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Static UI bundle served under `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Build a case manifest from a dataset folder.
    Manifest {
        #[arg(long)]
        dataset_root: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Backend utilities.
    Backends {
        #[command(subcommand)]
        command: BackendCommand,
    },
    /// Write a synthetic phantom dataset with a manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        cases: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BackendCommand {
    /// Check that the configured backend answers.
    Health {
        #[arg(
            long,
            conflicts_with = "endpoint",
            required_unless_present = "endpoint"
        )]
        config: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 10.0)]
        timeout_s: f64,
    },
    /// Run a thresholding stand-in that speaks the wire protocol.
    Stub {
        #[arg(long, default_value_t = 8000)]
        port: u16,
        #[arg(long, default_value = "threshold")]
        mode: StubMode,
    },
}

/// Error carrying a specific process exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit(code: u8, e: impl std::fmt::Display) -> anyhow::Error {
    Exit(code, e.to_string()).into()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.0);
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| exit(EXIT_INVALID, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evaluate {
            config,
            resume,
            parallelism,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = parallelism {
                cfg.parallelism = p;
            }
            let summary =
                evaluate::evaluate(&cfg, &EvalOptions { resume }).map_err(|e| match e {
                    EvaluateError::Config(_) => exit(EXIT_INVALID, e),
                    EvaluateError::Health(_) | EvaluateError::Backend(_) => exit(EXIT_BACKEND, e),
                    other => other.into(),
                })?;
            println!(
                "{} records ({} failed slices) from {} evaluated and {} resumed cases in {}",
                summary.n_records,
                summary.n_failed_slices,
                summary.evaluated_cases,
                summary.resumed_cases,
                summary.output_dir.display()
            );
            Ok(())
        }
        Command::Fuse {
            records,
            exports,
            dataset,
            manifest,
            core_labels,
            out,
        } => {
            let manifest_path = manifest.unwrap_or_else(|| dataset.join("manifest.json"));
            let m = CaseManifest::load(&manifest_path).map_err(|e| exit(EXIT_INVALID, e))?;
            let load_gt = |case: &str| -> Result<BinaryVolume> {
                let entry = m
                    .get(case)
                    .with_context(|| format!("case '{case}' not in manifest"))?;
                let labels = entry.load_labels(&dataset)?;
                Ok(tumor_core_mask(&labels, &core_labels)?)
            };
            let (report, default_out) = match (records, exports) {
                (Some(r), _) => {
                    let recs = evaluate::read_records(&r)?;
                    if recs.is_empty() {
                        return Err(exit(EXIT_INVALID, "record file is empty"));
                    }
                    let parent = r.parent().unwrap_or(Path::new(".")).to_path_buf();
                    (
                        fuse_records(&recs, |c| load_gt(c).map_err(|e| format!("{e:#}")))?,
                        parent,
                    )
                }
                (None, Some(dir)) => (fuse_exports(&dir, &m, load_gt)?, dir),
                (None, None) => unreachable!("clap requires one input"),
            };
            for row in report.cases.iter().filter(|c| !c.warnings.is_empty()) {
                for w in &row.warnings {
                    eprintln!("warning: {}: {w}", row.case_id);
                }
            }
            let out = out.unwrap_or(default_out);
            std::fs::create_dir_all(&out)?;
            let mut json = serde_json::to_vec_pretty(&report)?;
            json.push(b'\n');
            write_atomic(&out.join("fusion.json"), &json)?;
            write_atomic(&out.join("fusion.md"), report.to_markdown().as_bytes())?;
            print!("{}", report.to_markdown());
            Ok(())
        }
        Command::Report { records, out } => {
            let recs = evaluate::read_records(&records)?;
            let out =
                out.unwrap_or_else(|| records.parent().unwrap_or(Path::new(".")).to_path_buf());
            std::fs::create_dir_all(&out)?;
            let r = report::write_report(&recs, &out).map_err(|e| match e {
                ReportError::Empty => exit(EXIT_INVALID, e),
                other => other.into(),
            })?;
            print!("{}", r.to_markdown());
            Ok(())
        }
        Command::Serve {
            config,
            port,
            host,
            static_dir,
        } => {
            let cfg = load_config(&config)?;
            let v = cfg
                .validate_for_service()
                .map_err(|e| exit(EXIT_INVALID, e))?;
            let backend = build_backend(&cfg.backend).map_err(|e| exit(EXIT_BACKEND, e))?;
            let model = backend.health().map_err(|e| exit(EXIT_BACKEND, e))?;
            tracing::info!(backend = %backend.id(), model, "backend ready");
            let state = AppState::new(
                ServiceConfig {
                    dataset_root: v.dataset_root,
                    manifest: v.manifest,
                    core_labels: cfg.core_labels.clone(),
                    session_dir: cfg.output_dir.join("sessions"),
                    static_dir,
                },
                backend,
            )?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(Arc::new(state), SocketAddr::new(host, port)))?;
            Ok(())
        }
        Command::Manifest {
            dataset_root,
            output,
        } => {
            let m = manifest::generate(&dataset_root).map_err(|e| exit(EXIT_INVALID, e))?;
            m.save(&output)?;
            println!("{} cases written to {}", m.cases.len(), output.display());
            Ok(())
        }
        Command::Backends { command } => match command {
            BackendCommand::Health {
                config,
                endpoint,
                timeout_s,
            } => {
                let backend: Arc<dyn Segmenter> = match (config, endpoint) {
                    (Some(c), _) => {
                        let cfg = load_config(&c)?;
                        build_backend(&cfg.backend).map_err(|e| exit(EXIT_BACKEND, e))?
                    }
                    (None, Some(url)) => Arc::new(
                        ExternalBackend::new(&url, Duration::from_secs_f64(timeout_s), 1)
                            .map_err(|e| exit(EXIT_BACKEND, e))?,
                    ),
                    (None, None) => unreachable!("clap requires one source"),
                };
                let model = backend.health().map_err(|e| exit(EXIT_BACKEND, e))?;
                println!("ok: {} ({model})", backend.id());
                Ok(())
            }
            BackendCommand::Stub { port, mode } => {
                let rt = tokio::runtime::Runtime::new()?;
                rt.block_on(async {
                    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
                    tracing::info!(addr = %listener.local_addr()?, ?mode, "stub backend");
                    axum::serve(listener, stub_router(mode)).await
                })?;
                Ok(())
            }
        },
        Command::Phantom {
            out,
            cases,
            size,
            seed,
        } => {
            if size < 8 {
                bail!("--size must be at least 8");
            }
            let m = demo::write_phantom_dataset(&out, cases, size, seed)?;
            println!(
                "{} phantom cases written to {}",
                m.cases.len(),
                out.display()
            );
            Ok(())
        }
    }
}

/// Loads `<case>_<orientation>*.nii[.gz]` files and scores them per case.
fn fuse_exports(
    dir: &Path,
    m: &CaseManifest,
    load_gt: impl Fn(&str) -> Result<BinaryVolume>,
) -> Result<FusionReport> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".nii") || n.ends_with(".nii.gz"))
        .collect();
    names.sort();
    let mut report = FusionReport::default();
    for case in &m.cases {
        let mut stacks = BTreeMap::new();
        for o in Orientation::ALL {
            let prefix = format!("{}_{}", case.id, o);
            let Some(name) = names.iter().find(|n| n.starts_with(&prefix)) else {
                continue;
            };
            let v = load_volume(dir.join(name), VolumeKind::Label)?;
            stacks.insert(o, BinaryVolume::from_nonzero(&v));
        }
        if stacks.is_empty() {
            continue;
        }
        let gt = load_gt(&case.id)?;
        report.cases.push(fuse_volumes(&case.id, &stacks, &gt)?);
    }
    if report.cases.is_empty() {
        return Err(exit(
            EXIT_INVALID,
            format!("no exports for manifest cases in {}", dir.display()),
        ));
    }
    Ok(report)
}
