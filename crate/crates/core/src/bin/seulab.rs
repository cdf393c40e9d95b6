use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seulab::campaign::{self, CampaignError, RunOptions};
use seulab::checkpoint::{bit_statistics, CheckpointStore, Dtype};
use seulab::config::{self, CampaignConfig, ConfigError, Metric};
use seulab::half16::{bit_field_of, BitPosition};
use seulab::injector::{inject_named, ElementPolicy};
use seulab::model::{init_checkpoint, DiffuserConfig, ToyModel};
use seulab::report::{self, Grouping, ImageSet, ReportFormat, RunManifest};
use seulab::selector::{NamingScheme, TensorSelector, UnetTopology};

#[derive(Parser)]
#[command(name = "seulab", version, about = "Single-event-upset fault injection for binary16 diffusion weights")]
struct Cli {
    /// Campaign config (TOML). Also supplies the model config for other verbs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for element draws; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (output file for `corrupt` and `init-checkpoint`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::All)]
    format: Format,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    All,
}

impl Format {
    fn formats(self) -> Vec<ReportFormat> {
        match self {
            Format::Csv => vec![ReportFormat::Csv],
            Format::Json => vec![ReportFormat::Json],
            Format::All => vec![ReportFormat::Json, ReportFormat::Csv],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    /// Stable Diffusion 2.x UNet.
    Sd2,
    /// The toy model described by the config.
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Error-free images and scores for the configured prompts.
    Baseline,
    /// Run a fault-injection campaign.
    Campaign,
    /// Flip each of the 16 bits of one matrix in turn.
    BitSweep {
        /// Selector such as `down.0.t0.sa.wv`.
        #[arg(long)]
        target: String,
        /// Fixed element instead of a per-trial random one.
        #[arg(long)]
        index: Option<usize>,
        /// Defaults to the config's second prompt, or its only one.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = config::DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Fraction of set bits per position over weight tensors.
    BitStats {
        /// Checkpoint file; the seeded toy model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Built-in scheme name (`canonical`, `sd2-diffusers`) or a JSON file.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, value_enum)]
        topology: Option<TopologyArg>,
        /// Explicit tensor names; repeatable.
        #[arg(long = "tensor")]
        tensors: Vec<String>,
    },
    /// Flip one bit of one element in a checkpoint file.
    Corrupt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Selector resolved through `--scheme`.
        #[arg(long, conflicts_with = "tensor", required_unless_present = "tensor")]
        target: Option<String>,
        /// Raw tensor name.
        #[arg(long)]
        tensor: Option<String>,
        #[arg(long, default_value = "canonical")]
        scheme: String,
        #[arg(long, value_enum)]
        topology: Option<TopologyArg>,
        #[arg(long, default_value_t = 14)]
        bit: u32,
        /// Element to flip; drawn from `--seed` when omitted.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Summarize a saved result.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "by-block")]
        grouping: String,
        #[arg(long, default_value = "clip")]
        metric: String,
    },
    /// Write the seeded toy checkpoint.
    InitCheckpoint,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<report::ReportError> for CliError {
    fn from(e: report::ReportError) -> Self {
        match e {
            report::ReportError::UnknownGrouping(_) | report::ReportError::MissingMetric(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("seulab: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("seulab: {m}");
            ExitCode::from(3)
        }
    }
}

/// Config from `--config` with `--seed` applied; targets may be empty.
fn base_config(cli: &Cli) -> Result<CampaignConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            config::parse_settings(&text)?
        }
        None => CampaignConfig::new(Vec::new()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let started = report::unix_now();
    match &cli.command {
        Command::Baseline => {
            let cfg = base_config(cli)?;
            cfg.model.validate().map_err(usage)?;
            let model = ToyModel::new(cfg.model.clone()).map_err(usage)?;
            let b = campaign::run_baseline(&model, &cfg.prompts, &cfg.metrics, cfg.threshold)?;
            let dir = out_dir(cli, "baseline");
            std::fs::create_dir_all(&dir).map_err(runtime)?;
            let mut outputs = Vec::new();
            for (i, (s, img)) in b.scores.iter().zip(&b.images).enumerate() {
                let path = dir.join(format!("baseline_p{i}.ppm"));
                std::fs::write(&path, img.to_ppm()).map_err(runtime)?;
                outputs.push(path);
                println!("{i}\t{:.2}\t{}", s.values.get(&Metric::Clip).copied().unwrap_or(f64::NAN), s.prompt);
            }
            let path = dir.join("baseline.json");
            std::fs::write(&path, serde_json::to_string_pretty(&b.scores).map_err(runtime)? + "\n").map_err(runtime)?;
            outputs.push(path);
            write_manifest(cli, &cfg, started, outputs, &dir)
        }
        Command::Campaign => {
            if cli.config.is_none() {
                return Err(usage("campaign needs --config"));
            }
            let cfg = base_config(cli)?;
            cfg.validate().map_err(usage)?;
            let run = campaign::run_campaign(&cfg, &RunOptions { threads: cli.threads })?;
            let dir = out_dir(cli, "campaign");
            let outputs = emit_all(cli, &run, &dir)?;
            for metric in [Metric::Clip, Metric::Deviation] {
                if run.result.config.metrics.contains(&metric) {
                    println!("{}", report::summary_table(&run.result, Grouping::ByBlock, metric)?.render());
                }
            }
            write_manifest(cli, &run.result.config, started, outputs, &dir)
        }
        Command::BitSweep {
            target,
            index,
            prompt,
            trials,
        } => {
            let selector: TensorSelector = target.parse().map_err(usage)?;
            let base = base_config(cli)?;
            let prompt = match prompt {
                Some(p) => p.clone(),
                None => base.prompts.get(1).or(base.prompts.first()).cloned().unwrap_or_default(),
            };
            let cfg = campaign::bit_sweep_config(selector, *index, &prompt, *trials, &base);
            cfg.validate().map_err(usage)?;
            let run = campaign::run_campaign(&cfg, &RunOptions { threads: cli.threads })?;
            let dir = out_dir(cli, "bit-sweep");
            let outputs = emit_all(cli, &run, &dir)?;
            for metric in [Metric::Clip, Metric::Deviation] {
                if cfg.metrics.contains(&metric) {
                    println!("{}", report::summary_table(&run.result, Grouping::ByBit, metric)?.render());
                }
            }
            write_manifest(cli, &run.result.config, started, outputs, &dir)
        }
        Command::BitStats {
            checkpoint,
            scheme,
            topology,
            tensors,
        } => {
            let cfg = base_config(cli)?;
            let store = match checkpoint {
                Some(path) => read_checkpoint(path)?,
                None => init_checkpoint(&cfg.model).map_err(usage)?,
            };
            let names: Vec<String> = if !tensors.is_empty() {
                tensors.clone()
            } else if let Some(scheme) = scheme {
                let scheme = load_scheme(scheme)?;
                let topo = pick_topology(*topology, &scheme, &cfg.model);
                resolve_all(&scheme, &topo, &store)
            } else if checkpoint.is_none() {
                let topo = cfg.model.topology();
                resolve_all(&NamingScheme::canonical(), &topo, &store)
            } else {
                store
                    .header()
                    .entries()
                    .iter()
                    .filter(|e| e.dtype == Dtype::F16)
                    .map(|e| e.name.clone())
                    .collect()
            };
            let stats = bit_statistics(&store.into_view(), &names).map_err(runtime)?;
            println!("bit\tfield\taverage");
            for p in BitPosition::all().rev() {
                println!("{}\t{:?}\t{:.6}", p.index(), bit_field_of(p), stats[p.index() as usize]);
            }
            eprintln!("{} tensors", names.len());
            Ok(())
        }
        Command::Corrupt {
            checkpoint,
            target,
            tensor,
            scheme,
            topology,
            bit,
            index,
        } => {
            let out = cli.out.clone().ok_or_else(|| usage("corrupt needs --out <file>"))?;
            let bit = BitPosition::new(*bit).map_err(usage)?;
            let store = read_checkpoint(checkpoint)?;
            let name = match (target, tensor) {
                (_, Some(t)) => t.clone(),
                (Some(sel), None) => {
                    let cfg = base_config(cli)?;
                    let scheme = load_scheme(scheme)?;
                    let topo = pick_topology(*topology, &scheme, &cfg.model);
                    let sel: TensorSelector = sel.parse().map_err(usage)?;
                    scheme.resolve(&sel, &topo).map_err(usage)?
                }
                (None, None) => unreachable!("clap requires one of --target/--tensor"),
            };
            let policy = index.map_or(ElementPolicy::UniformRandom, ElementPolicy::Explicit);
            let seed = seulab::rng::derive_seed(cli.seed.unwrap_or(0), &format!("trial:{name}"), 0);
            let (view, record) = inject_named(&store.into_view(), &name, bit, policy, seed).map_err(|e| match e {
                seulab::injector::InjectionError::Checkpoint(_) => usage(e),
                _ => runtime(e),
            })?;
            std::fs::write(&out, view.to_bytes()).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            println!("{}", serde_json::to_string_pretty(&record).map_err(runtime)?);
            Ok(())
        }
        Command::Report {
            input,
            grouping,
            metric,
        } => {
            let grouping: Grouping = grouping.parse()?;
            let metric: Metric = metric.parse().map_err(usage)?;
            let result = report::load_result(input)?;
            println!("{}", report::summary_table(&result, grouping, metric)?.render());
            if let Some(dir) = &cli.out {
                for f in cli.format.formats() {
                    report::emit_results(&result, f, dir)?;
                }
            }
            Ok(())
        }
        Command::InitCheckpoint => {
            let cfg = base_config(cli)?;
            let out = cli.out.clone().ok_or_else(|| usage("init-checkpoint needs --out <file>"))?;
            let store = init_checkpoint(&cfg.model).map_err(usage)?;
            std::fs::write(&out, store.to_bytes()).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            println!("{}", store.checksum());
            Ok(())
        }
    }
}

fn emit_all(cli: &Cli, run: &campaign::CampaignRun, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut outputs = Vec::new();
    for f in cli.format.formats() {
        outputs.extend(report::emit_results(&run.result, f, dir)?);
    }
    let images = dir.join("images");
    outputs.extend(report::export_images(&run.result, Some(&run.images), ImageSet::Baseline, &images)?);
    outputs.extend(report::export_images(&run.result, Some(&run.images), ImageSet::Exemplars, &images)?);
    Ok(outputs)
}

fn write_manifest(
    cli: &Cli,
    cfg: &CampaignConfig,
    started: u64,
    outputs: Vec<PathBuf>,
    dir: &Path,
) -> Result<(), CliError> {
    let config_json = serde_json::to_vec(cfg).map_err(runtime)?;
    let manifest = RunManifest {
        command: std::env::args().collect::<Vec<_>>().join(" "),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: report::sha256_hex(&config_json),
        seed: cfg.seed,
        threads: cli.threads,
        started_unix: started,
        finished_unix: report::unix_now(),
        outputs,
    };
    let path = manifest.write(dir)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<CheckpointStore, CliError> {
    CheckpointStore::read_file(path)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_scheme(spec: &str) -> Result<NamingScheme, CliError> {
    if let Some(s) = NamingScheme::builtin(spec) {
        return Ok(s);
    }
    let text = std::fs::read_to_string(spec).map_err(|e| usage(format!("scheme `{spec}`: {e}")))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("scheme `{spec}`: {e}")))
}

fn pick_topology(arg: Option<TopologyArg>, scheme: &NamingScheme, model: &DiffuserConfig) -> UnetTopology {
    match arg {
        Some(TopologyArg::Sd2) => UnetTopology::SD2,
        Some(TopologyArg::Toy) => model.topology(),
        None if scheme.name == "canonical" => model.topology(),
        None => UnetTopology::SD2,
    }
}

/// Names of every transformer matrix under `scheme` that `store` contains.
fn resolve_all(scheme: &NamingScheme, topo: &UnetTopology, store: &CheckpointStore) -> Vec<String> {
    topo.selectors()
        .iter()
        .filter_map(|s| scheme.resolve(s, topo).ok())
        .filter(|n| store.header().get(n).is_some())
        .collect()
}
