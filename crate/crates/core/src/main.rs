use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gidp_core::config::PipelineConfig;
use gidp_core::dataset::{read_manifest, write_manifest, write_manifest_rows, SubmapRecord};
use gidp_core::encoder::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
use gidp_core::error::{Error, Result};
use gidp_core::pipeline::{
    embed_records, finetune_model, initial_params, pretrain_model, run_pipeline, split_records, synth_world,
};
use gidp_core::pointcloud::PointCloud;
use gidp_core::retrieval::{enhance_all, evaluate, load_descriptors, save_descriptors, EnhanceMode, Origin};

#[derive(Parser)]
#[command(name = "gidp", version, about = "Point-cloud place recognition: pretrain, finetune, embed, enhance, evaluate")]
struct Cli {
    /// Base seed for every random stream (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores (overrides `run.threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into a dataset directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write train/database/queries manifests next to a dataset's manifest.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Momentum-contrast pretraining on unlabeled clouds.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory or manifest; repeatable.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch statistics file.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        /// Queue capacity.
        #[arg(long)]
        queue: Option<usize>,
        /// Negatives per anchor drawn from the queue.
        #[arg(long = "neg-k")]
        neg_k: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Triplet finetuning, optionally from a pretrained checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Checkpoint to start from, or `random`.
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Compute global descriptors for a dataset.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-rank descriptors by inverse-distance enhancement.
    Enhance {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long = "out-db")]
        out_db: PathBuf,
        #[arg(long = "out-q")]
        out_q: PathBuf,
    },
    /// Recall at top 1 and top 1% of queries against a database.
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long = "match-radius", default_value_t = 25.0)]
        match_radius: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Every stage end to end on a synthetic world.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Finetune from random weights.
        #[arg(long = "skip-pretrain")]
        skip_pretrain: bool,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
    },
}

impl Cli {
    /// Defaults, then the file, then `--set`, then dedicated flags.
    fn load_config(&self, args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<PipelineConfig> {
        let mut cfg = match &args.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        let mut overrides = args.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        if let Some(t) = self.threads {
            overrides.push(format!("run.threads={t}"));
        }
        for (key, value) in flags {
            if let Some(v) = value {
                overrides.push(format!("{key}={v}"));
            }
        }
        cfg.apply_overrides(&overrides)?;
        Ok(cfg)
    }
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<SubmapRecord>> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_manifest(p)?);
    }
    Ok(records)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn echo_config(out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.txt");
    write_text(Path::new(&name), &cfg.to_text())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { cfg, out } => {
            let cfg = cli.load_config(cfg, &[])?;
            let records = synth_world(&cfg)?;
            let path = write_manifest(out, &records)?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            println!("wrote {} submaps to {}", records.len(), path.display());
        }
        Command::Split { cfg, data } => {
            let cfg = cli.load_config(cfg, &[])?;
            let records = read_manifest(data)?;
            let splits = split_records(&records, &cfg)?;
            let dir = if data.is_dir() { data.clone() } else { data.parent().map(Path::to_path_buf).unwrap_or_default() };
            write_manifest_rows(dir.join("train.csv"), &splits.train)?;
            write_manifest_rows(dir.join("database.csv"), &splits.database)?;
            write_manifest_rows(dir.join("queries.csv"), &splits.queries)?;
            println!(
                "train {} / database {} / queries {}",
                splits.train.len(),
                splits.database.len(),
                splits.queries.len()
            );
        }
        Command::Pretrain {
            cfg,
            data,
            out,
            log,
            epochs,
            batch,
            lr,
            momentum,
            queue,
            neg_k,
            tau,
        } => {
            let cfg = cli.load_config(
                cfg,
                &[
                    ("pretrain.epochs", epochs.map(|v| v.to_string())),
                    ("pretrain.batch_size", batch.map(|v| v.to_string())),
                    ("pretrain.learning_rate", lr.map(|v| v.to_string())),
                    ("pretrain.momentum", momentum.map(|v| v.to_string())),
                    ("pretrain.queue_capacity", queue.map(|v| v.to_string())),
                    ("pretrain.num_negatives", neg_k.map(|v| v.to_string())),
                    ("pretrain.temperature", tau.map(|v| v.to_string())),
                ],
            )?;
            let records = read_all(data)?;
            let clouds: Vec<&PointCloud> = records.iter().map(|r| r.cloud.as_ref()).collect();
            let mut lines = String::new();
            let state = pretrain_model(initial_params(&cfg)?, &clouds, &cfg, |s| {
                println!("{}", s.to_line());
                lines.push_str(&s.to_line());
                lines.push('\n');
                Ok(())
            })?;
            save_checkpoint(&state.anchor, Some(&state.optimizer), out)?;
            if let Some(l) = log {
                write_text(l, &lines)?;
            }
            echo_config(out, &cfg)?;
        }
        Command::Train {
            cfg,
            data,
            init,
            out,
            log,
            epochs,
            batch,
            lr,
            margin,
        } => {
            let cfg = cli.load_config(
                cfg,
                &[
                    ("finetune.epochs", epochs.map(|v| v.to_string())),
                    ("finetune.batch_size", batch.map(|v| v.to_string())),
                    ("finetune.learning_rate", lr.map(|v| v.to_string())),
                    ("finetune.margin", margin.map(|v| v.to_string())),
                ],
            )?;
            let records = read_all(data)?;
            let start = match init.as_str() {
                "random" => initial_params(&cfg)?,
                p => load_checkpoint_expecting(p, &cfg.encoder)?.0,
            };
            let mut lines = String::new();
            let (params, opt) = finetune_model(start, records, &cfg, |s| {
                println!("{}", s.to_line());
                lines.push_str(&s.to_line());
                lines.push('\n');
                Ok(())
            })?;
            save_checkpoint(&params, Some(&opt), out)?;
            if let Some(l) = log {
                write_text(l, &lines)?;
            }
            echo_config(out, &cfg)?;
        }
        Command::Embed { ckpt, data, out } => {
            let (params, _) = load_checkpoint(ckpt)?;
            let records = read_all(data)?;
            let store = embed_records(&params, &records, Origin::Database)?;
            save_descriptors(&store, out)?;
            println!("wrote {} descriptors of dimension {} to {}", store.len(), store.dim(), out.display());
        }
        Command::Enhance {
            cfg,
            train,
            db,
            queries,
            lambda,
            k,
            mode,
            out_db,
            out_q,
        } => {
            let cfg = cli.load_config(
                cfg,
                &[
                    ("enhance.lambda", lambda.map(|v| v.to_string())),
                    ("enhance.k", k.map(|v| v.to_string())),
                    ("enhance.mode", mode.clone()),
                ],
            )?;
            let t = load_descriptors(train, Origin::Train)?;
            let d = load_descriptors(db, Origin::Database)?;
            let q = load_descriptors(queries, Origin::Query)?;
            let (q2, d2) = enhance_all(&q, &d, &t, &cfg.enhance)?;
            save_descriptors(&d2, out_db)?;
            save_descriptors(&q2, out_q)?;
            let mode: EnhanceMode = cfg.enhance.mode;
            println!("enhanced {} queries and {} database entries ({mode})", q2.len(), d2.len());
        }
        Command::Eval {
            db,
            queries,
            match_radius,
            report,
        } => {
            let d = load_descriptors(db, Origin::Database)?;
            let q = load_descriptors(queries, Origin::Query)?;
            let r = evaluate(&q, &d, *match_radius)?;
            let text = r.to_text();
            match report {
                Some(p) => write_text(p, &text)?,
                None => print!("{text}"),
            }
            println!("recall@1 {:.4}  recall@1% {:.4}", r.recall_top1, r.recall_top1pct);
        }
        Command::Pipeline {
            cfg,
            out,
            skip_pretrain,
            lambda,
            k,
        } => {
            let cfg = cli.load_config(
                cfg,
                &[
                    ("run.output_dir", out.as_ref().map(|p| p.display().to_string())),
                    ("run.skip_pretrain", skip_pretrain.then(|| "true".to_string())),
                    ("enhance.lambda", lambda.map(|v| v.to_string())),
                    ("enhance.k", k.map(|v| v.to_string())),
                ],
            )?;
            let outcome = run_pipeline(&cfg)?;
            print!("{}", outcome.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads.filter(|&t| t > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
