use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coopadapt_api::{
    AdaptKind, AdaptRequest, ErrorKind, EvalRequest, GenerateRequest, JobState, JobStatus, PretrainRequest,
    ProfileSpec, RunLocation, SweepRequest,
};
use coopadapt_client::{Client, ClientError};
use coopadapt_core::config::ExperimentConfig;
use coopadapt_core::synthgen::DomainProfile;
use coopadapt_core::training::EpochRecord;

/// Synthetic collaborative LiDAR detection with sim-to-real domain adaptation.
#[derive(Parser)]
#[command(name = "coopadapt", version)]
struct Cli {
    /// Use a running service instead of starting one in-process.
    #[arg(long, global = true, env = "COOPADAPT_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate(GenerateArgs),
    /// Pretrain on the source domain or adapt to the target domain.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Adapt once per pair of reversal factors.
    Sweep(SweepArgs),
    /// Run the HTTP service in the foreground.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in profile: synthetic_sim or synthetic_real.
    #[arg(long, conflicts_with = "profile_file", required_unless_present = "profile_file")]
    profile: Option<String>,
    /// Profile as a JSON file.
    #[arg(long)]
    profile_file: Option<PathBuf>,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Labelled source-domain dataset (overrides data.source).
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target-domain dataset (overrides data.target).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Labelled dataset scored after each sweep cell (overrides data.eval).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
}

#[derive(Subcommand)]
enum TrainCommand {
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue an interrupted pretraining run from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    Adapt {
        #[arg(long, value_enum)]
        method: Method,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Pseudo-label score threshold (self-training only).
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dusa,
    Discriminator,
    SelfTrain,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    thresholds: Vec<f64>,
    /// Where the JSON report is written.
    #[arg(long, default_value = "eval.json")]
    out: PathBuf,
    /// Also write every scored detection as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.025,-0.05,-0.1")]
    lsa_gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.05,-0.1,-0.2")]
    cia_gammas: Vec<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Training jobs allowed to run at once.
    #[arg(long, default_value_t = 1)]
    max_jobs: usize,
}

/// A failure together with the exit code it maps to.
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api(a) if a.kind == ErrorKind::Config => Failure::Config(a.message),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<coopadapt_core::Error> for Failure {
    fn from(e: coopadapt_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(3);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

async fn run(cli: Cli) -> Outcome<()> {
    if let Command::Serve(args) = &cli.command {
        return serve(args).await;
    }
    let client = match &cli.server {
        Some(url) => Client::new(url)?,
        None => {
            let (addr, _handle) = coopadapt_server::spawn(([127, 0, 0, 1], 0).into(), 1)
                .await
                .map_err(|e| Failure::Runtime(format!("cannot start local service: {e}")))?;
            Client::new(&format!("http://{addr}"))?
        }
    };
    match cli.command {
        Command::Generate(a) => generate(&client, a).await,
        Command::Train(TrainCommand::Pretrain { cfg, resume }) => {
            let config = resolve_config(&cfg)?;
            let req = PretrainRequest {
                config,
                location: location(&cfg, resume)?,
            };
            let accepted = client.pretrain(&req).await?;
            follow(&client, accepted.id).await
        }
        Command::Train(TrainCommand::Adapt {
            method,
            from,
            tau,
            resume,
            cfg,
        }) => {
            let mut config = resolve_config(&cfg)?;
            if let Some(t) = tau {
                config.selftrain.tau = t;
                config.validate()?;
            }
            let method = match method {
                Method::Dusa => AdaptKind::Dusa,
                Method::Discriminator => AdaptKind::Discriminator,
                Method::SelfTrain => AdaptKind::SelfTrain,
            };
            let req = AdaptRequest {
                method,
                config,
                from: from.as_deref().map(absolute).transpose()?,
                location: location(&cfg, resume)?,
            };
            let accepted = client.adapt(&req).await?;
            follow(&client, accepted.id).await
        }
        Command::Eval(a) => eval(&client, a).await,
        Command::Sweep(a) => {
            let config = resolve_config(&a.cfg)?;
            let req = SweepRequest {
                config,
                from: a.from.as_deref().map(absolute).transpose()?,
                location: location(&a.cfg, None)?,
                lsa_gammas: a.lsa_gammas,
                cia_gammas: a.cia_gammas,
            };
            let accepted = client.sweep(&req).await?;
            follow(&client, accepted.id).await
        }
        Command::Serve(_) => unreachable!("handled above"),
    }
}

async fn serve(args: &ServeArgs) -> Outcome<()> {
    let (addr, handle) = coopadapt_server::spawn(args.addr, args.max_jobs)
        .await
        .map_err(|e| Failure::Runtime(format!("cannot bind {}: {e}", args.addr)))?;
    log::info!("listening on http://{addr}");
    tokio::select! {
        _ = handle => Err(Failure::Runtime("service stopped".into())),
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}

fn absolute(p: &Path) -> Outcome<PathBuf> {
    std::path::absolute(p).map_err(|e| Failure::Config(format!("bad path {}: {e}", p.display())))
}

fn location(cfg: &ConfigArgs, resume: Option<PathBuf>) -> Outcome<RunLocation> {
    Ok(RunLocation {
        runs_root: absolute(&cfg.runs)?,
        resume: resume.as_deref().map(absolute).transpose()?,
    })
}

/// File, then `COOPADAPT_SEED`, then `--set`, then dataset flags; paths made absolute.
fn resolve_config(args: &ConfigArgs) -> Outcome<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(seed) = std::env::var("COOPADAPT_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("COOPADAPT_SEED={seed:?} is not an unsigned integer")))?;
    }
    for o in &args.overrides {
        cfg.set(o)?;
    }
    if let Some(p) = &args.source {
        cfg.data.source = Some(p.clone());
    }
    if let Some(p) = &args.target {
        cfg.data.target = Some(p.clone());
    }
    if let Some(p) = &args.eval_data {
        cfg.data.eval = Some(p.clone());
    }
    for slot in [&mut cfg.data.source, &mut cfg.data.target, &mut cfg.data.eval] {
        if let Some(p) = slot.as_mut() {
            *p = absolute(p)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

async fn generate(client: &Client, a: GenerateArgs) -> Outcome<()> {
    let profile = match (a.profile, a.profile_file) {
        (Some(name), _) => ProfileSpec::Named(name),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::Config(format!("cannot read profile {}: {e}", path.display())))?;
            let p: DomainProfile = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("invalid profile {}: {e}", path.display())))?;
            ProfileSpec::Inline(p)
        }
        (None, None) => return Err(Failure::Config("pass --profile or --profile-file".into())),
    };
    let req = GenerateRequest {
        profile,
        frames: a.frames,
        seed: a.seed,
        out: absolute(&a.out)?,
    };
    let resp = client.generate(&req).await?;
    for w in &resp.warnings {
        log::warn!("{w}");
    }
    println!(
        "wrote {} frames ({} labelled boxes) to {}",
        resp.frames,
        resp.boxes,
        resp.out.display()
    );
    Ok(())
}

async fn eval(client: &Client, a: EvalArgs) -> Outcome<()> {
    let checkpoint = absolute(&a.checkpoint)?;
    let report_path = absolute(&a.out)?;
    let req = EvalRequest {
        checkpoint,
        dataset: absolute(&a.dataset)?,
        thresholds: a.thresholds,
        report: Some(report_path.clone()),
        csv: a.csv.as_deref().map(absolute).transpose()?,
    };
    let report = client.eval(&req).await?;
    for t in &report.ap {
        println!("AP@{}\t{:.4}", t.iou, t.ap);
    }
    log::info!("report written to {}", report_path.display());
    Ok(())
}

fn print_record(r: &EpochRecord) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let round = r.round.map_or(String::new(), |k| format!("round {k} "));
    log::info!(
        "{} {round}epoch {} steps {} lr {:.1e} det {} sim {} agent {} val {} heldout_acc {}",
        r.stage,
        r.epoch,
        r.steps,
        r.lr,
        fmt(r.det_loss),
        fmt(r.sim_loss),
        fmt(r.agent_loss),
        fmt(r.val_det_loss),
        fmt(r.heldout_sim_acc),
    );
}

/// Streams a job's epochs to the log; Ctrl-C cancels the job.
async fn follow(client: &Client, id: u64) -> Outcome<()> {
    let status: JobStatus = tokio::select! {
        s = client.wait_job(id, Duration::from_millis(200), print_record) => s?,
        _ = tokio::signal::ctrl_c() => {
            client.cancel(id).await?;
            log::warn!("cancellation requested; waiting for the job to stop");
            client.wait_job(id, Duration::from_millis(200), print_record).await?
        }
    };
    match status.state {
        JobState::Succeeded => {
            let result = status.result.unwrap_or_else(|| unreachable!("succeeded jobs carry a result"));
            for w in &result.warnings {
                log::warn!("{w}");
            }
            for cell in &result.sweep {
                let aps = cell.report.as_ref().map_or(String::new(), |r| {
                    r.ap.iter().map(|t| format!(" AP@{} {:.4}", t.iou, t.ap)).collect()
                });
                println!("lsa {} cia {}{aps}\t{}", cell.lsa_gamma, cell.cia_gamma, cell.checkpoint.display());
            }
            if let Some(ck) = result.final_checkpoint {
                println!("{}", ck.display());
            }
            Ok(())
        }
        JobState::Cancelled => Err(Failure::Runtime("job cancelled".into())),
        _ => Err(match status.error {
            Some(e) if e.kind == ErrorKind::Config => Failure::Config(e.message),
            Some(e) => Failure::Runtime(e.message),
            None => Failure::Runtime("job failed".into()),
        }),
    }
}
