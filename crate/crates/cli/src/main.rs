use std::path::PathBuf;
use std::process::ExitCode;

use chronoscope_cli::commands::{self, ExplainMode, ExplainRequest, Query};
use chronoscope_cli::pipeline::{files, read_json, write_json};
use chronoscope_cli::{CliError, Pipeline, PipelineConfig, Result, RunOptions, Stage};
use chronoscope_core::io::save_ndjson;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chronoscope", version, about = "Patient-timeline foundation model pipeline on synthetic cohorts")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: CHRONOSCOPE_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Artifact directory (default: CHRONOSCOPE_CACHE_DIR or ./chronoscope-cache).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Pipeline configuration JSON; defaults to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Limit per-task stages to one task.
    #[arg(long)]
    task: Option<String>,
    /// Recompute even when cached outputs are valid.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ig,
    Loto,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate the synthetic cohort and its ground-truth manifest.
    Generate {
        /// Also export the cohort as NDJSON, with a `.manifest.json` sidecar.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Fit value bins and vocabulary on the training prefix; tokenize all patients.
    Tokenize(StageArgs),
    /// Masked-modeling pretraining of the encoder.
    Pretrain(StageArgs),
    /// Build time-to-event instances for each task.
    Curate(StageArgs),
    /// Embed each instance at its snapshot.
    Embed(StageArgs),
    /// PCA and Cox heads per task.
    Fit(StageArgs),
    /// Test-set metrics, significance and report figures.
    Evaluate(StageArgs),
    /// Run every stage in order, reusing valid cached outputs.
    Pipeline(StageArgs),
    /// Nearest patients by embedding cosine similarity.
    Retrieve {
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Query with a patient in the index (never returned itself).
        #[arg(long, conflicts_with = "query_vec")]
        query_patient: Option<String>,
        /// Query with a JSON array of floats.
        #[arg(long)]
        query_vec: Option<PathBuf>,
        /// Acc@k of a `DIAGNOSIS,MEDICATION` cohort instead of a single query.
        #[arg(long, conflicts_with_all = ["query_patient", "query_vec"])]
        cohort: Option<String>,
        /// Index time in minutes since birth (default: end of the generation horizon).
        #[arg(long)]
        as_of: Option<i64>,
        /// Index file (default: <cache-dir>/index.json).
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Attribution (IG) or leave-one-token-out analysis for one patient.
    Explain {
        #[arg(long)]
        task: String,
        #[arg(long)]
        patient: String,
        #[arg(long, value_enum, default_value = "ig")]
        mode: Mode,
        #[arg(long, default_value_t = chronoscope_analysis::attribution::DEFAULT_STEPS)]
        steps: usize,
        /// LOTO interval start and end (minutes since birth).
        #[arg(long, num_args = 2)]
        interval: Option<Vec<i64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::preset(&cli.preset, 0)?,
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cache_dir(cli: &Cli) -> PathBuf {
    cli.cache_dir
        .clone()
        .or_else(|| std::env::var_os("CHRONOSCOPE_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("chronoscope-cache"))
}

fn init_threads(cli: &Cli) -> Result<()> {
    let n = cli.threads.or_else(|| {
        std::env::var("CHRONOSCOPE_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Validation("--threads must be > 0".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    Ok(())
}

fn run_stage(pipe: &mut Pipeline, only: Option<Stage>, args: &StageArgs) -> Result<()> {
    let manifest = pipe.run(&RunOptions {
        only,
        task: args.task.clone(),
        force: args.force,
    })?;
    for s in &manifest.stages {
        if only.is_none_or(|o| s.stage.split(':').next() == Some(o.name())) {
            println!(
                "{:<28} {:>9.2}s {}",
                s.stage,
                s.wall_clock_s,
                if s.cached { "cached" } else { "ran" }
            );
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads(cli)?;
    let cfg = load_config(cli)?;
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let horizon = cfg.cohort.horizon_min();
    let mut pipe = Pipeline::new(cfg, cache_dir(cli))?;
    match &cli.command {
        Command::Config => unreachable!(),
        Command::Generate { out, stage } => {
            run_stage(&mut pipe, Some(Stage::Generate), stage)?;
            if let Some(out) = out {
                save_ndjson(out, &pipe.load_raw(Stage::Generate)?)?;
                let manifest: serde_json::Value = read_json(&pipe.path(files::COHORT_MANIFEST))?;
                let mut side = out.clone().into_os_string();
                side.push(".manifest.json");
                write_json(&PathBuf::from(side), &manifest)?;
            }
        }
        Command::Tokenize(a) => run_stage(&mut pipe, Some(Stage::Tokenize), a)?,
        Command::Pretrain(a) => run_stage(&mut pipe, Some(Stage::Pretrain), a)?,
        Command::Curate(a) => run_stage(&mut pipe, Some(Stage::Curate), a)?,
        Command::Embed(a) => run_stage(&mut pipe, Some(Stage::Embed), a)?,
        Command::Fit(a) => run_stage(&mut pipe, Some(Stage::Fit), a)?,
        Command::Evaluate(a) => run_stage(&mut pipe, Some(Stage::Evaluate), a)?,
        Command::Pipeline(a) => run_stage(&mut pipe, None, a)?,
        Command::Retrieve {
            k,
            query_patient,
            query_vec,
            cohort,
            as_of,
            index,
        } => {
            let path = index.clone().unwrap_or_else(|| pipe.path(commands::INDEX_FILE));
            let idx = commands::load_or_build_index(&pipe, &path, as_of.unwrap_or(horizon))?;
            if let Some(c) = cohort {
                let (dx, rx) = c
                    .split_once(',')
                    .ok_or_else(|| CliError::Validation("--cohort expects DIAGNOSIS,MEDICATION".into()))?;
                let report = commands::motif_retrieval(&pipe, &idx, dx, rx, *k)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                let query = match (query_patient, query_vec) {
                    (Some(id), _) => Query::Patient(id.clone()),
                    (None, Some(p)) => Query::Vector(read_json(p)?),
                    (None, None) => {
                        return Err(CliError::Validation(
                            "one of --query-patient, --query-vec or --cohort is required".into(),
                        ))
                    }
                };
                for id in commands::retrieve(&idx, &query, *k)? {
                    println!("{id}");
                }
            }
        }
        Command::Explain {
            task,
            patient,
            mode,
            steps,
            interval,
            out,
        } => {
            let req = ExplainRequest {
                task,
                patient,
                mode: match mode {
                    Mode::Ig => ExplainMode::Ig,
                    Mode::Loto => ExplainMode::Loto,
                },
                n_steps: *steps,
                interval: interval.as_ref().map(|v| (v[0], v[1])),
                out_dir: out
                    .clone()
                    .unwrap_or_else(|| pipe.path(&format!("explain/{task}/{patient}"))),
            };
            print!("{}", commands::explain(&pipe, &req)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
