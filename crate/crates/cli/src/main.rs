//! `fedstack` command line: ingest logs, train local models, federate with
//! stacking, ablate sensors and compare results with reference values.

mod commands;
mod config;
mod output;
mod results;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedstack::dataset::SensorGroup;
use fedstack::fedstack::{InferenceMode, TransportKind};
use fedstack::neural::Architecture;

use commands::{AcceptanceFailed, AuditFailed};
use config::{ConfigLayer, RunConfig};

const EXIT_DATA: u8 = 2;
const EXIT_AUDIT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fedstack", version, about = "Stacked federated learning for wearable activity recognition")]
struct Cli {
    /// Directory every output is written under.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// JSON file of settings; flags override it, it overrides the environment.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory holding mHealth_subject<N>.log files [env: FEDSTACK_DATA_DIR].
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    /// Base seed for splits, initialization and shuffling [env: FEDSTACK_SEED].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-client work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse subject logs into CSVs with label distributions and PCA variance.
    Ingest(IngestArgs),
    /// Train every local model on every client and score it on the client's test split.
    TrainLocal(TrainArgs),
    /// Run the federation, stack predictions and score global models on the held-out subject.
    Federate(FederateArgs),
    /// Federate once per sensor with only that sensor's axes.
    AblateSensor(AblateArgs),
    /// Compare earlier runs against the published results.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Share of each activity held back for testing.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Cumulative explained variance the PCA must reach.
    #[arg(long)]
    pca_threshold: Option<f64>,
    /// Feed standardized sensor axes instead of PCA scores.
    #[arg(long)]
    raw_axes: bool,
}

#[derive(Args, Debug)]
struct LocalArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Client subject ids.
    #[arg(long, value_delimiter = ',')]
    clients: Option<Vec<u32>>,
    /// Local architectures (ann, cnn1d, bilstm, linear).
    #[arg(long, value_delimiter = ',', value_parser = parse_architecture)]
    architectures: Option<Vec<Architecture>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Subject scored by the global models.
    #[arg(long)]
    held_out: Option<u32>,
    /// Meta-learner architectures.
    #[arg(long, value_delimiter = ',', value_parser = parse_architecture)]
    global_architectures: Option<Vec<Architecture>>,
    #[arg(long)]
    global_epochs: Option<usize>,
    #[arg(long)]
    global_batch_size: Option<usize>,
    #[arg(long)]
    global_learning_rate: Option<f64>,
    /// How messages travel between coordinator and clients.
    #[arg(long, value_parser = parse_transport)]
    transport: Option<TransportKind>,
    /// Loopback port for the tcp transport; 0 picks a free one.
    #[arg(long)]
    port: Option<u16>,
    /// Resends before a silent client is dropped.
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Share of clients drawn for the round.
    #[arg(long)]
    client_fraction: Option<f64>,
    /// Scoring of unseen-subject rows (per-row or ensemble-mean).
    #[arg(long, value_parser = parse_inference)]
    inference: Option<InferenceMode>,
    /// Continue training the meta-learners on the held-out subject's training rows.
    #[arg(long)]
    global_finetune: bool,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write this many synthetic subject logs under the output directory and ingest those.
    #[arg(long, value_name = "SUBJECTS")]
    synthetic: Option<u32>,
    /// Rows per activity in each synthetic log.
    #[arg(long, default_value_t = 200)]
    synthetic_rows: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    local: LocalArgs,
}

#[derive(Args, Debug)]
struct FederateArgs {
    #[command(flatten)]
    local: LocalArgs,
    #[command(flatten)]
    global: GlobalArgs,
    /// Also hold out each subject in turn.
    #[arg(long)]
    loo: bool,
    #[arg(long, hide = true, value_name = "CLIENT")]
    inject_leak_client: Option<u32>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    local: LocalArgs,
    #[command(flatten)]
    global: GlobalArgs,
    /// Sensors to run (chest, left-ankle, right-wrist).
    #[arg(long, value_delimiter = ',', value_parser = parse_sensor)]
    sensors: Option<Vec<SensorGroup>>,
    /// Heterogeneous global architecture to score.
    #[arg(long, value_parser = parse_architecture)]
    architecture: Option<Architecture>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Single tolerance applied to every non-exact comparison.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Exit 3 when any comparison is out of tolerance.
    #[arg(long)]
    strict: bool,
}

fn parse_architecture(s: &str) -> Result<Architecture, String> {
    Architecture::from_tag(s)
        .ok_or_else(|| format!("unknown architecture {s:?} (expected ann, cnn1d, bilstm or linear)"))
}

fn parse_sensor(s: &str) -> Result<SensorGroup, String> {
    SensorGroup::from_tag(s).ok_or_else(|| format!("unknown sensor {s:?} (expected chest, left-ankle or right-wrist)"))
}

fn parse_transport(s: &str) -> Result<TransportKind, String> {
    s.parse()
}

fn parse_inference(s: &str) -> Result<InferenceMode, String> {
    match s {
        "per-row" => Ok(InferenceMode::PerRow),
        "ensemble-mean" => Ok(InferenceMode::EnsembleMean),
        other => Err(format!("unknown inference mode {other:?} (expected per-row or ensemble-mean)")),
    }
}

impl PipelineArgs {
    fn fill(&self, l: &mut ConfigLayer) {
        l.test_fraction = self.test_fraction;
        l.pca_threshold = self.pca_threshold;
        l.use_pca = self.raw_axes.then_some(false);
    }
}

impl LocalArgs {
    fn fill(&self, l: &mut ConfigLayer) {
        self.pipeline.fill(l);
        l.clients = self.clients.clone();
        l.architectures = self.architectures.clone();
        l.epochs = self.epochs;
        l.batch_size = self.batch_size;
        l.learning_rate = self.learning_rate;
    }
}

impl GlobalArgs {
    fn fill(&self, l: &mut ConfigLayer) {
        l.held_out = self.held_out;
        l.global_architectures = self.global_architectures.clone();
        l.global_epochs = self.global_epochs;
        l.global_batch_size = self.global_batch_size;
        l.global_learning_rate = self.global_learning_rate;
        l.transport = self.transport;
        l.port = self.port;
        l.retries = self.retries;
        l.response_timeout_ms = self.timeout_ms;
        l.client_fraction = self.client_fraction;
        l.inference = self.inference;
        l.global_finetune = self.global_finetune.then_some(true);
    }
}

impl Cli {
    fn flags(&self) -> ConfigLayer {
        let mut l = ConfigLayer {
            out_dir: self.out_dir.clone(),
            data_dir: self.data_dir.clone(),
            seed: self.seed,
            jobs: self.jobs,
            ..ConfigLayer::default()
        };
        match &self.command {
            Command::Ingest(a) => a.pipeline.fill(&mut l),
            Command::TrainLocal(a) => a.local.fill(&mut l),
            Command::Federate(a) => {
                a.local.fill(&mut l);
                a.global.fill(&mut l);
            }
            Command::AblateSensor(a) => {
                a.local.fill(&mut l);
                a.global.fill(&mut l);
                l.sensors = a.sensors.clone();
                l.ablation_architecture = a.architecture;
            }
            Command::Report(a) => l.tolerance = a.tolerance,
        }
        l
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(|k| std::env::var(k).ok(), cli.config.as_deref(), cli.flags())?;
    log::debug!("effective settings: {}", cfg.settings());
    match &cli.command {
        Command::Ingest(a) => commands::ingest::run(
            &cfg,
            &commands::ingest::IngestOptions { synthetic: a.synthetic, synthetic_rows: a.synthetic_rows },
        ),
        Command::TrainLocal(_) => commands::train::run(&cfg),
        Command::Federate(a) => commands::federate::run(
            &cfg,
            &commands::federate::FederateOptions { loo: a.loo, inject_leak_client: a.inject_leak_client },
        ),
        Command::AblateSensor(_) => commands::ablate::run(&cfg),
        Command::Report(a) => commands::report::run(&cfg, a.strict),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<AuditFailed>() || e.is::<AcceptanceFailed>() {
                ExitCode::from(EXIT_AUDIT)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
