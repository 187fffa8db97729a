//! `cirnas` command-line tool.

mod error;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cirnas_core::cost::{gflops, supernet_flops, FlopsRow, FlopsTable};
use cirnas_core::degrade::{degrade, load_png_dir, params_to_level, ActiveTypes, DegradationParams, LevelVector};
use cirnas_core::eval::{build_test_set, eval_grid, EffectModel, EvalGrid, IdentityModel};
use cirnas_core::extract::{extract_shared, extract_taskspecific, PrunedNet};
use cirnas_core::latency::bench_latency;
use cirnas_core::trainer::{checkpoint_kind, run_search, CheckpointKind, RunOutputs, TrainingData};
use cirnas_core::{
    CostReport, ModulationModel, Resolution, SearchState, SliceMode, SuperNetConfig, TaskVector, TrainConfig,
};
use cirnas_service::{AppState, ServiceConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "cirnas",
    version,
    about = "Task-conditioned architecture search for modulated image restoration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade every PNG in a directory at fixed levels.
    Degrade(DegradeArgs),
    /// Run the architecture search.
    Train(TrainArgs),
    /// Slice a pruned network out of a search checkpoint.
    Extract(ExtractArgs),
    /// Score the 27-effect grid on a directory of clean images.
    Eval(EvalArgs),
    /// Print the FLOPs table.
    Flops(FlopsArgs),
    /// Measure first versus subsequent effect latency.
    Bench(BenchArgs),
    /// Start the HTTP modulation service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum ModeArg {
    #[default]
    Full,
    MiddleOnly,
}

impl From<ModeArg> for SliceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => SliceMode::Full,
            ModeArg::MiddleOnly => SliceMode::MiddleOnly,
        }
    }
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Blur radius, noise sigma and JPEG quality (or `none`), e.g. `2,25,60`.
    #[arg(long)]
    levels: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Search configuration (TOML). Optional when resuming.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Directory for checkpoints and logs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides the configured iteration count.
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["task", "shared"]))]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task vector `t1,t2,t3`.
    #[arg(long)]
    task: Option<String>,
    /// Extract the shared prefix instead.
    #[arg(long)]
    shared: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    mode: ModeArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "identity")]
    checkpoint: Option<PathBuf>,
    /// Score the identity mapping instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    identity: bool,
    /// Directory of clean PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Number of grid effects; only the standard 27-point grid exists.
    #[arg(long, default_value_t = 27)]
    grid: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t)]
    mode: ModeArg,
}

#[derive(Args)]
struct FlopsArgs {
    /// Search or pruned checkpoint; without one the unpruned network is reported.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Search config (TOML) whose super network to report when no checkpoint is given.
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    /// Comma-separated `WxH` list.
    #[arg(long, default_value = "1280x720,2048x1080,3840x2160")]
    resolution: String,
    #[arg(long, default_value_t = 27)]
    effects: usize,
    #[arg(long, value_enum, default_value_t)]
    mode: ModeArg,
    /// Also write the cost reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "256x256")]
    resolution: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 4)]
    effects: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, value_enum, default_value_t)]
    mode: ModeArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "CIRNAS_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 4096)]
    max_dim: u32,
    #[arg(long, default_value_t = 16)]
    cache_sessions: usize,
    #[arg(long, value_enum, default_value_t)]
    mode: ModeArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn load_search(path: &Path) -> CliResult<SearchState> {
    match checkpoint_kind(path)? {
        CheckpointKind::Search => Ok(SearchState::load(path)?),
        CheckpointKind::Pruned => Err(CliError::Usage(format!(
            "{} holds a pruned network; a search checkpoint is needed",
            path.display()
        ))),
    }
}

fn parse_resolutions(s: &str) -> CliResult<Vec<Resolution>> {
    s.split(',').map(|r| Ok(Resolution::parse(r.trim())?)).collect()
}

/// The first `m` grid effects, cycling when `m` exceeds the grid.
fn grid_tasks(m: usize) -> CliResult<Vec<TaskVector>> {
    if m == 0 {
        return Err(CliError::Usage("at least one effect is needed".into()));
    }
    Ok(EvalGrid::standard().tasks().into_iter().cycle().take(m).collect())
}

#[derive(Serialize)]
struct DegradedRecord {
    file: String,
    source: String,
    params: DegradationParams,
    level: LevelVector,
    noise_seed: u64,
}

fn cmd_degrade(a: DegradeArgs) -> CliResult<()> {
    let params = DegradationParams::parse(&a.levels)?;
    let level = params_to_level(&params)?;
    let images = load_png_dir(&a.input)?;
    if images.is_empty() {
        return Err(cirnas_core::Error::Data(format!("no PNG files in {}", a.input.display())).into());
    }
    create_dir(&a.out)?;
    let mut manifest = String::new();
    for (i, (name, img)) in images.iter().enumerate() {
        let noise_seed = a.seed.wrapping_add(i as u64);
        let out = degrade(img, &params, noise_seed)?;
        let file = format!("{name}.png");
        let path = a.out.join(&file);
        out.save(&path).map_err(|source| CliError::Image {
            path: path.clone(),
            source,
        })?;
        let record = DegradedRecord {
            file,
            source: name.clone(),
            params,
            level,
            noise_seed,
        };
        manifest.push_str(&serde_json::to_string(&record)?);
        manifest.push('\n');
    }
    write_file(&a.out.join("manifest.jsonl"), manifest)?;
    println!("degraded {} images into {}", images.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut state = match (&a.resume, &a.config) {
        (Some(ckpt), config) => {
            let mut st = load_search(ckpt)?;
            if let Some(path) = config {
                let cfg = TrainConfig::load(path)?;
                let comparable = TrainConfig {
                    total_iterations: st.config.total_iterations,
                    ..cfg.clone()
                };
                if comparable != st.config {
                    return Err(CliError::Usage(
                        "config differs from the checkpoint in more than total_iterations".into(),
                    ));
                }
                st.config.total_iterations = cfg.total_iterations;
            }
            st
        }
        (None, Some(path)) => SearchState::new(TrainConfig::load(path)?)?,
        (None, None) => unreachable!("clap requires --config or --resume"),
    };
    if let Some(n) = a.iterations {
        state.config.total_iterations = n;
    }
    state.config.validate()?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.toml"), state.config.to_toml())?;
    let data = TrainingData::from_config(&state.config)?;
    let outputs = RunOutputs {
        dir: Some(a.out.clone()),
    };
    let outcome = run_search(state, &data, &outputs)?;
    let st = &outcome.state;
    let last = outcome.metrics.last();
    println!(
        "finished at iteration {}: loss {}, shared prefix {} of {} sites",
        st.iteration,
        last.map_or("n/a".to_string(), |m| format!("{:.5}", m.loss)),
        st.consensus.prefix_len(),
        st.config.supernet.num_sites()
    );
    if let Some(p) = outputs.checkpoint_path() {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn describe(net: &PrunedNet) -> CliResult<String> {
    let hd = net.flops(Resolution::HD)?;
    Ok(format!(
        "{} parameters, prefix {} of {} sites, {:.1} GFLOPs at {} (prefix {:.1}, tail {:.1})",
        net.num_params(),
        net.spec().shared_prefix_len,
        net.config().num_sites(),
        gflops(hd.network() as f64),
        Resolution::HD,
        gflops(hd.prefix as f64),
        gflops(hd.tail as f64)
    ))
}

fn cmd_extract(a: ExtractArgs) -> CliResult<()> {
    let state = load_search(&a.checkpoint)?;
    let mode = a.mode.into();
    let net = if a.shared {
        match extract_shared(&state, mode)? {
            Some(net) => net,
            None => {
                println!("empty prefix");
                return Ok(());
            }
        }
    } else {
        let t = TaskVector::parse(a.task.as_deref().expect("clap requires --task or --shared"))?;
        extract_taskspecific(&state, &t, mode)?
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    net.save(&a.out)?;
    println!("{}: {}", a.out.display(), describe(&net)?);
    Ok(())
}

impl EffectModelBox {
    fn new(a: &EvalArgs) -> CliResult<(Self, ActiveTypes)> {
        match &a.checkpoint {
            Some(path) => {
                let state = load_search(path)?;
                let active = state.config.data.active_types;
                let model = ModulationModel::from_search(&state, a.mode.into())?;
                Ok((EffectModelBox::Model(Box::new(model)), active))
            }
            None => Ok((EffectModelBox::Identity, ActiveTypes::ALL)),
        }
    }

    fn as_dyn(&self) -> &dyn EffectModel {
        match self {
            EffectModelBox::Model(m) => m.as_ref(),
            EffectModelBox::Identity => &IdentityModel,
        }
    }
}

enum EffectModelBox {
    Model(Box<ModulationModel>),
    Identity,
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let grid = EvalGrid::standard();
    if a.grid != grid.len() {
        return Err(CliError::Usage(format!(
            "only the {}-effect grid is supported, got --grid {}",
            grid.len(),
            a.grid
        )));
    }
    let (model, active) = EffectModelBox::new(&a)?;
    let clean = load_png_dir(&a.data)?;
    if clean.is_empty() {
        return Err(cirnas_core::Error::Data(format!("no PNG files in {}", a.data.display())).into());
    }
    let test = build_test_set(&clean, &grid.test_degradations(active), a.seed)?;
    let report = eval_grid(model.as_dyn(), &grid, &test)?;
    print!("{}", report.render());
    if let Some(path) = &a.report {
        let mut text = report.to_json()?;
        text.push('\n');
        write_file(path, text)?;
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> CliResult<()> {
    let resolutions = parse_resolutions(&a.resolution)?;
    let mode: SliceMode = a.mode.into();
    let row = |label: &str, f: &dyn Fn(Resolution) -> CliResult<f64>| -> CliResult<FlopsRow> {
        Ok(FlopsRow {
            label: label.to_string(),
            gflops: resolutions
                .iter()
                .map(|&r| f(r).map(gflops))
                .collect::<CliResult<_>>()?,
        })
    };
    let cfg_row = |cfg: SuperNetConfig| {
        row("Super network (unpruned)", &|r| {
            Ok(supernet_flops(&cfg, r.padded_to(cfg.head_stride))? as f64)
        })
    };
    let mut rows = Vec::new();
    let mut reports: Vec<CostReport> = Vec::new();
    match &a.checkpoint {
        None => {
            let cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?.supernet,
                None => SuperNetConfig::FULL,
            };
            rows.push(cfg_row(cfg)?);
        }
        Some(path) => match checkpoint_kind(path)? {
            CheckpointKind::Pruned => {
                let net = PrunedNet::load(path)?;
                rows.push(cfg_row(*net.config())?);
                rows.push(row("Pruned network", &|r| Ok(net.flops(r)?.total() as f64))?);
            }
            CheckpointKind::Search => {
                let model = ModulationModel::from_search(&SearchState::load(path)?, mode)?;
                let tasks = grid_tasks(a.effects)?;
                reports = resolutions
                    .iter()
                    .map(|&r| Ok(model.cost_report(r, &tasks)?))
                    .collect::<CliResult<_>>()?;
                let m = tasks.len();
                let pick = |f: &dyn Fn(&CostReport) -> CliResult<f64>| {
                    let vals = reports.iter().map(f).collect::<CliResult<Vec<_>>>()?;
                    Ok::<_, CliError>(vals)
                };
                rows.push(cfg_row(*model.config())?);
                let mut push = |label: String, vals: Vec<f64>| {
                    rows.push(FlopsRow {
                        label,
                        gflops: vals.into_iter().map(gflops).collect(),
                    })
                };
                push("Shared prefix".into(), pick(&|c| Ok(c.prefix_flops as f64))?);
                push("First effect".into(), pick(&|c| Ok(c.flops_first() as f64))?);
                if m > 1 {
                    push("Subsequent effect (mean)".into(), pick(&|c| Ok(c.flops_subsequent()))?);
                }
                push(format!("Amortized (M={m})"), pick(&|c| Ok(c.flops_amortized(m)?))?);
            }
        },
    }
    let table = FlopsTable { resolutions, rows };
    print!("{}", table.render());
    if let Some(path) = &a.json {
        write_json(path, &serde_json::json!({ "table": table, "reports": reports }))?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult<()> {
    let res = Resolution::parse(&a.resolution)?;
    let model = ModulationModel::from_search(&load_search(&a.checkpoint)?, a.mode.into())?;
    let tasks = grid_tasks(a.effects)?;
    let report = bench_latency(&model, res, &tasks, a.reps, a.warmup)?;
    println!(
        "{res}, {} effects, {} repetitions, prefix {} sites",
        report.effects,
        report.repetitions,
        model.prefix_len()
    );
    println!("{:<24}{:>12}{:>12}{:>12}", "latency (ms)", "median", "p10", "p90");
    for (label, s) in [
        ("First effect", report.first),
        ("Subsequent effect", report.subsequent),
        ("Full recompute", report.recompute),
    ] {
        println!(
            "{label:<24}{:>12.2}{:>12.2}{:>12.2}",
            s.median * 1e3,
            s.p10 * 1e3,
            s.p90 * 1e3
        );
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult<()> {
    let model = match &a.checkpoint {
        Some(path) => Some(ModulationModel::from_search(&load_search(path)?, a.mode.into())?),
        None => {
            tracing::warn!("no checkpoint given; model endpoints will answer 503");
            None
        }
    };
    let config = ServiceConfig {
        max_dim: a.max_dim,
        cache_sessions: a.cache_sessions,
    };
    if config.cache_sessions == 0 || config.max_dim == 0 {
        return Err(CliError::Usage(
            "--max-dim and --cache-sessions must be positive".into(),
        ));
    }
    let addr = SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
    runtime
        .block_on(cirnas_service::serve(addr, AppState::new(model, config)))
        .map_err(|e| CliError::io(addr.to_string(), e))
}
