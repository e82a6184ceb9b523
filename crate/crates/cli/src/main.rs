use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use stadb::harness::gradsuite::{run_gradient_suite, TOLERANCE};
use stadb::harness::{checkpoint, evaluate_model, generate_synthetic_dataset, train, visualize, Config, DatasetIndex, Split};
use stadb::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "stadb", version, about = "Attention-guided feature dropping for re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training images, or a directory holding a `train/` subdirectory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on query and gallery images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
    },
    /// Write attention-map, overlay and drop-mask heatmaps.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic identity dataset as train/query/gallery folders.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 2)]
        cams: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config { .. } => (EXIT_CONFIG, "config"),
            Error::Contract(_) | Error::Dimension(_) => (EXIT_CONFIG, "config"),
            Error::Ingestion { .. } => (EXIT_DATA, "ingestion"),
            Error::Checkpoint(_) => (EXIT_DATA, "checkpoint"),
            Error::Io { .. } => (EXIT_DATA, "io"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        None => Ok(Config::default()),
        Some(p) => Config::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure {
                code: EXIT_CONFIG,
                kind: "config",
                message: e.to_string(),
            },
            other => other.into(),
        }),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("json values serialise"));
}

fn run_train(config: Option<&Path>, data: &Path, out: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let nested = data.join(Split::Train.dir_name());
    let dir = if nested.is_dir() { nested } else { data.to_path_buf() };
    let index = DatasetIndex::load(&dir, cfg.height, cfg.width, Split::Train)?;
    let outcome = train(&cfg, &index, Some(out))?;
    let last = outcome.log.last().expect("at least one epoch");
    print_json(&json!({
        "epochs": outcome.log.len(),
        "final_loss": last.loss,
        "checkpoints": outcome.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "log": out.join("log.jsonl").display().to_string(),
    }));
    Ok(())
}

fn run_eval(checkpoint_path: &Path, query: &Path, gallery: &Path) -> Outcome {
    let (params, cfg) = checkpoint::load(checkpoint_path)?;
    let q = DatasetIndex::load(query, cfg.height, cfg.width, Split::Query)?;
    let g = DatasetIndex::load(gallery, cfg.height, cfg.width, Split::Gallery)?;
    let report = evaluate_model(&params, &q, &g)?;
    print_json(&json!({
        "mAP": report.map,
        "rank1": report.rank(1),
        "rank5": report.rank(5),
        "rank10": report.rank(10),
        "valid_queries": report.valid_queries,
        "skipped_queries": report.skipped_queries.len(),
    }));
    Ok(())
}

fn run_visualize(checkpoint_path: &Path, images: &Path, out: &Path) -> Outcome {
    let (params, cfg) = checkpoint::load(checkpoint_path)?;
    let index = DatasetIndex::load(images, cfg.height, cfg.width, Split::Query)?;
    let written = visualize(&params, &cfg, &index, out)?;
    print_json(&json!({ "written": written.len(), "out": out.display().to_string() }));
    Ok(())
}

fn run_gradcheck(instances: usize, seed: u64) -> Outcome {
    let results = run_gradient_suite(instances.max(1), seed)?;
    let max = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    print_json(&json!({
        "max_relative_error": max,
        "tolerance": TOLERANCE,
        "checks": results,
    }));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_GRADCHECK,
            kind: "gradcheck",
            message: format!("max relative error {max:e} exceeds {TOLERANCE:e} in {}", failed.join(", ")),
        })
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train { config, data, out } => run_train(config.as_deref(), &data, &out),
        Command::Eval {
            checkpoint,
            query,
            gallery,
        } => run_eval(&checkpoint, &query, &gallery),
        Command::Visualize { checkpoint, images, out } => run_visualize(&checkpoint, &images, &out),
        Command::Gradcheck { instances, seed } => run_gradcheck(instances, seed),
        Command::Synth {
            out,
            ids,
            per_id,
            cams,
            seed,
            height,
            width,
        } => {
            let data = generate_synthetic_dataset(ids, per_id, cams, seed, height, width)?;
            data.write(&out)?;
            print_json(&json!({ "images": data.len(), "out": out.display().to_string() }));
            Ok(())
        }
    }
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "exit_code": code, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            return fail(EXIT_USAGE, "usage", first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f.code, f.kind, &f.message),
    }
}
