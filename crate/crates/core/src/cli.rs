//! Command line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{load_checkpoint, save_checkpoint};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{control_sweep, evaluate, write_json};
use crate::pipeline::{self, init_workers};
use crate::routing::{load_routed, save_routed};
use crate::search::{read_dataset, read_jsonl, write_dataset, write_jsonl, write_stats};
use crate::seed;
use crate::supervision::write_epoch_log;
use crate::tasks::{gen_stratum, Stratum, TaskInstance};

#[derive(Debug, Parser)]
#[command(name = "depthroute", version, about = "Per-layer skip/execute/repeat routing experiments")]
pub struct Cli {
    /// TOML configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic task corpora.
    #[command(subcommand)]
    Tasks(TasksCommand),
    /// Build (and for the transformer, pretrain) the backbone checkpoint.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Tree search for per-example routing labels.
    Search {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-stratum statistics; defaults to search_stats.csv next to --out.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train routers on a supervision dataset.
    Train {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out corpus scored against oracle labels each epoch.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Epoch log; defaults to train_log.csv next to --out.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Routed accuracy, depth and label agreement.
    Eval {
        #[arg(long)]
        routers: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on multiple-choice strata of --dataset and evaluate on the numeric strata of --corpus.
        #[arg(long, requires = "dataset")]
        ood: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Usage heatmaps, depth groups and label distributions.
    Analyze {
        #[arg(long)]
        routers: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and depth across control values.
    Sweep {
        #[arg(long)]
        routers: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma separated values in [-1, 1]; defaults to the configured grid.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p_grid: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// The whole pipeline into one directory.
    All {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TasksCommand {
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Heldout,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub stratum: Option<Stratum>,
    /// Instances for --stratum.
    #[arg(long, requires = "stratum")]
    pub count: Option<usize>,
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    if let Command::All { out: Some(o) } = &cli.command {
        cfg.run.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn echo_config(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    init_workers(cfg.run.workers);
    match &cli.command {
        Command::Tasks(TasksCommand::Gen(a)) => {
            let corpus = match a.stratum {
                Some(s) => {
                    let n = a.count.unwrap_or(100);
                    gen_stratum(s, seed::derive(cfg.run.seed, "tasks"), n, &cfg.corpus_spec())
                }
                None => pipeline::generate_corpus(&cfg),
            };
            let corpus = match a.split {
                Split::All => corpus,
                Split::Train => pipeline::split_corpus(&corpus, cfg.tasks.holdout_every).0,
                Split::Heldout => pipeline::split_corpus(&corpus, cfg.tasks.holdout_every).1,
            };
            write_jsonl(&a.out, &corpus)?;
            echo_config(&cfg, &dir_of(&a.out))?;
            println!("wrote {} instances to {}", corpus.len(), a.out.display());
        }
        Command::Pretrain { out } => {
            let (backbone, report) = pipeline::build_backbone(&cfg)?;
            save_checkpoint(out, &backbone)?;
            if let Some(r) = report {
                write_json(&dir_of(out).join("pretrain.json"), &r)?;
                println!(
                    "pretrained {} steps, held-out token accuracy {:.4}{}",
                    r.steps,
                    r.heldout_accuracy,
                    if r.passed { "" } else { " (below threshold)" }
                );
            }
            echo_config(&cfg, &dir_of(out))?;
            println!("wrote backbone to {}", out.display());
        }
        Command::Search { backbone, corpus, out, stats } => {
            let b = load_checkpoint(backbone)?;
            let corpus: Vec<TaskInstance> = read_jsonl(corpus)?;
            let (data, st) = pipeline::run_search(&cfg, &b, &corpus)?;
            write_dataset(out, &data)?;
            let stats_path = stats.clone().unwrap_or_else(|| dir_of(out).join("search_stats.csv"));
            write_stats(&stats_path, &st)?;
            echo_config(&cfg, &dir_of(out))?;
            println!("kept {} of {} instances", data.len(), corpus.len());
        }
        Command::Train { backbone, dataset, out, heldout, log } => {
            let b = load_checkpoint(backbone)?;
            let data = read_dataset(dataset)?;
            let held = match heldout {
                Some(p) => pipeline::oracle_examples(&b, &read_jsonl::<TaskInstance>(p)?),
                None => None,
            };
            let (stack, metrics) = pipeline::train_stack(&cfg, &b, &data, &cfg.router, &cfg.loss, held.as_deref())?;
            save_routed(out, &b, &stack)?;
            write_epoch_log(&log.clone().unwrap_or_else(|| dir_of(out).join("train_log.csv")), &metrics)?;
            echo_config(&cfg, &dir_of(out))?;
            if let Some(m) = metrics.last() {
                println!("epoch {} loss {:.4} macro-F1 {:.4}", m.epoch, m.loss, m.macro_f1);
            }
        }
        Command::Eval { routers, corpus, out, ood, dataset } => {
            let (b, stack) = load_routed(routers)?;
            let corpus: Vec<TaskInstance> = read_jsonl(corpus)?;
            if *ood {
                let data = read_dataset(dataset.as_ref().expect("required by clap"))?;
                let r = pipeline::run_ood(&cfg, &b, &data, &corpus)?;
                write_json(out, &r)?;
                println!(
                    "in-domain {:.4}, out-of-distribution {:.4}, delta {:+.4}",
                    r.in_domain_accuracy, r.ood_accuracy, r.delta
                );
            } else {
                let oracle = pipeline::oracle_labels(&b, &corpus);
                let ev = evaluate(&b, &stack, &corpus, oracle.as_deref())?;
                write_json(out, &ev.report)?;
                println!(
                    "accuracy {:.4} (default {:.4}), average layers {:.3}",
                    ev.report.accuracy, ev.report.default_accuracy, ev.report.avg_executed_layers
                );
            }
            echo_config(&cfg, &dir_of(out))?;
        }
        Command::Analyze { routers, corpus, dataset, out } => {
            let (b, stack) = load_routed(routers)?;
            let corpus: Vec<TaskInstance> = read_jsonl(corpus)?;
            let data = match dataset {
                Some(p) => read_dataset(p)?,
                None => Vec::new(),
            };
            let ev = evaluate(&b, &stack, &corpus, None)?;
            pipeline::write_analysis(out, &ev, &data, cfg.eval.svg)?;
            echo_config(&cfg, out)?;
            println!("wrote analysis to {}", out.display());
        }
        Command::Sweep { routers, corpus, p_grid, out } => {
            let (b, stack) = load_routed(routers)?;
            let corpus: Vec<TaskInstance> = read_jsonl(corpus)?;
            let grid = p_grid.clone().unwrap_or_else(|| cfg.eval.p_grid.clone());
            let rows = control_sweep(&b, &stack, &corpus, &grid)?;
            let dir = dir_of(out);
            crate::eval::write_csv(out, &rows)?;
            if cfg.eval.svg {
                let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.avg_layers, r.accuracy)).collect();
                crate::eval::svg::write_svg(
                    &out.with_extension("svg"),
                    &crate::eval::svg::line_chart("control sweep", "average layers", "accuracy", &pts),
                )?;
            }
            echo_config(&cfg, &dir)?;
            for r in &rows {
                println!("p {:+.2}: accuracy {:.4}, layers {:.3}", r.p, r.accuracy, r.avg_layers);
            }
        }
        Command::All { .. } => {
            let s = pipeline::run_all(&cfg)?;
            let r = &s.report;
            println!("instances {} train / {} held out, {} supervision examples", s.train_instances, s.heldout_instances, s.examples);
            println!(
                "accuracy {:.4} (default {:.4}), average layers {:.3} of {}",
                r.accuracy, r.default_accuracy, r.avg_executed_layers, r.layers
            );
            if let Some(f) = r.f1 {
                println!(
                    "label F1 skip {:.3} execute {:.3} repeat {:.3} macro {:.3}",
                    f.skip, f.execute, f.repeat, f.macro_f1
                );
            }
            if let Some(o) = &s.ood {
                println!("out-of-distribution accuracy delta {:+.4}", o.delta);
            }
            println!("outputs in {}", cfg.run.out.display());
        }
    }
    Ok(())
}

/// Parses the process arguments, runs, and returns the exit status.
pub fn main_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
