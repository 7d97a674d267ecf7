use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::warn;
use semrec::artifacts::ArtifactStore;
use semrec::config::RunConfig;
use semrec::pipeline::{self, Recommender, StageStatus};
use semrec::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size dimensions (d = 768, K = 512, 6-layer generator).
    Full,
    /// Small dimensions for the synthetic catalog.
    Desk,
}

#[derive(Debug, Parser)]
#[command(name = "semrec", version, about = "Semantic-ID generative recommendation pipeline")]
struct Cli {
    /// Artifact root for this run.
    #[arg(long, env = "CEMG_RUN_DIR", default_value = "runs/default", global = true)]
    run_dir: PathBuf,

    /// Flat `section.key = value` config file. Without it the run
    /// directory's snapshot is used, then the preset.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "full", global = true)]
    preset: Preset,

    /// Override one key, e.g. `--set rqvae.K=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Re-run stages even when their manifests are current.
    #[arg(long, global = true)]
    force: bool,

    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Load or synthesize data, filter to the k-core and split.
    Prepare,
    /// Write a synthetic dataset as raw files.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train graph embeddings with BPR.
    TrainCollab,
    /// Reduce modality features and initialise the fusion weights.
    Fuse,
    /// Train the residual quantizer jointly with the fusion weights.
    TrainTokenizer,
    /// Assign collision-free semantic ids.
    AssignIds,
    /// Train the autoregressive generator.
    TrainGenerator,
    /// Print top-K recommendations as JSON lines.
    Recommend {
        /// Raw user ids; all users when omitted.
        #[arg(long = "user")]
        users: Vec<String>,
        #[arg(long, short, default_value_t = 10)]
        k: usize,
    },
    /// Score the generator and baselines and write metrics.json.
    Evaluate,
    /// Run the pipeline once per value of one tokenizer parameter.
    Sweep {
        /// One of M, K, lambda_q, lambda_d.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Compare metrics of several runs against the first.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the comparison as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let snapshot = cli.run_dir.join("config.conf");
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if snapshot.is_file() => RunConfig::load(&snapshot)?,
        None => match cli.preset {
            Preset::Full => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    cfg.apply_assignments(cli.overrides.iter().map(String::as_str))?;
    cfg.validate()?;
    Ok(cfg)
}

fn stage(cli: &Cli, name: &str) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let store = ArtifactStore::open(&cli.run_dir)?;
    cfg.save(&store.config_path())?;
    match pipeline::run_stage(&cfg, &store, name, cli.force)? {
        StageStatus::Ran => eprintln!("{name}: done"),
        StageStatus::Skipped => eprintln!("{name}: up to date (use --force to re-run)"),
    }
    Ok(())
}

fn recommend(cli: &Cli, users: &[String], k: usize) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let store = ArtifactStore::open(&cli.run_dir)?;
    let split = pipeline::load_split(&store)?;
    let user_ids = pipeline::load_users(&store)?;
    let items = pipeline::load_items(&store)?;
    let rec = Recommender::load(&store)?;
    let mut decode = cfg.decode;
    decode.beam = decode.beam.max(k);
    let chosen: Vec<&semrec::dataset::UserSplit> = if users.is_empty() {
        split.users.iter().collect()
    } else {
        users
            .iter()
            .map(|raw| {
                let dense = user_ids
                    .get(raw)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown user `{raw}`")))?;
                split
                    .users
                    .iter()
                    .find(|u| u.user == dense)
                    .ok_or_else(|| Error::InvalidInput(format!("user `{raw}` has no split")))
            })
            .collect::<Result<_>>()?
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for u in chosen {
        let list = rec.recommend(&u.test_history(), k, &decode)?;
        let line = serde_json::json!({
            "user": user_ids.raw(u.user),
            "items": list.items.iter().map(|r| items.raw(r.item)).collect::<Vec<_>>(),
            "scores": list.items.iter().map(|r| r.score).collect::<Vec<_>>(),
            "shortfall": list.shortfall,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Prepare => stage(cli, "prepare"),
        Cmd::TrainCollab => stage(cli, "train-collab"),
        Cmd::Fuse => stage(cli, "fuse"),
        Cmd::TrainTokenizer => stage(cli, "train-tokenizer"),
        Cmd::AssignIds => stage(cli, "assign-ids"),
        Cmd::TrainGenerator => stage(cli, "train-generator"),
        Cmd::Evaluate => stage(cli, "evaluate"),
        Cmd::Synth { out } => {
            let cfg = resolve_config(cli)?;
            let stats = pipeline::write_synthetic(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
        Cmd::Recommend { users, k } => recommend(cli, users, *k),
        Cmd::Pipeline => {
            let cfg = resolve_config(cli)?;
            let store = ArtifactStore::open(&cli.run_dir)?;
            let m = pipeline::run_pipeline(&cfg, &store, cli.force)?;
            for (k, hr) in &m.model.all.hr {
                println!("HR@{k} = {hr:.4}  NDCG@{k} = {:.4}", m.model.all.ndcg[k]);
            }
            Ok(())
        }
        Cmd::Sweep { param, values } => {
            let cfg = resolve_config(cli)?;
            let store = ArtifactStore::open(&cli.run_dir)?;
            let res = pipeline::run_sweep(&cfg, &store, param, values, cli.force)?;
            print!("{}", res.to_csv());
            Ok(())
        }
        Cmd::Report { runs, json } => {
            let report = pipeline::build_report(runs)?;
            for w in &report.warnings {
                warn!("{w}");
            }
            print!("{}", report.render());
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
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
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
