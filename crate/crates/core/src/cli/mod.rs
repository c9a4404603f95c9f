//! The `crossan` command line: data generation, caching, training,
//! evaluation, ablation grids, mutual information and gate heatmaps.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, config or
//! files), 2 when a run fails.

mod ablate;
mod config;
mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use ablate::{ablate, expand_grid, AblationGrid, AblationResult, Cell, CellLabels, CellRun, GridAxis, PairTest, Skipped};
pub use config::{BackboneSection, EvalSection, RunConfig, RESOLVED_CONFIG_FILE};
pub use pipeline::{
    metrics_json, model_name, train_and_eval, write_metrics, write_run, RunInfo, RunOutcome, Workspace, CHECKPOINT_FILE,
    GATES_FILE, METRICS_FILE, PER_USER_FILE, RUN_FILE, TRAIN_LOG_FILE,
};

use crate::datakit::{generate_synthetic, load_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, mi_compare, EvalSplit, MIReport};
use crate::fusion::write_routing_log;
use crate::hscache::precompute_cache;
use crate::model::CrossanModel;
use pipeline::{json_line, write_file};

#[derive(Debug, Parser)]
#[command(name = "crossan", version, about = "Cross-modal side adapters for multimodal sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Precompute the backbone hidden-state cache for a dataset.
    Cache {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<data>/cache`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model and evaluate it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Cache directory; defaults to `<data>/cache` when it exists.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Run the backbones on every step instead of reading a cache.
        #[arg(long)]
        on_the_fly: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint with full-catalog ranking.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Defaults to the `config.json` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Mutual information between the text and image side outputs of a
    /// cross-modal and an independent checkpoint.
    Mi {
        #[arg(long)]
        cross: PathBuf,
        #[arg(long)]
        indep: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export gate values (and, with --data, the fusion routing log).
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parse `argv` (including the program name) and run the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Config for a command that reads a checkpoint: explicit path, else the
/// resolved config beside the checkpoint, else defaults.
fn config_near(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG_FILE);
    if beside.exists() {
        RunConfig::load(&beside)
    } else {
        Ok(RunConfig::default())
    }
}

/// Load the dataset and attach its cache: the explicit directory, else
/// `<data>/cache` when present, else an in-memory build.
fn workspace(data: &Path, cfg: &RunConfig, cache: Option<&Path>, on_the_fly: bool) -> Result<Workspace> {
    let ws = Workspace::new(load_dataset(data)?, cfg)?;
    if on_the_fly {
        return Ok(ws);
    }
    match cache {
        Some(dir) => ws.open_cache(dir),
        None if data.join("cache").is_dir() => ws.open_cache(&data.join("cache")),
        None => ws.build_cache(),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let d = generate_synthetic(&cfg.dataset, seed)?;
            mkdir(&out)?;
            let manifest = write_dataset(&d, &out)?;
            cfg.write_resolved(&out)?;
            println!("{}", serde_json::to_string(&manifest).expect("plain struct"));
        }
        Command::Cache { data, out, config } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let ws = Workspace::new(load_dataset(&data)?, &cfg)?;
            let out = out.unwrap_or_else(|| data.join("cache"));
            mkdir(&out)?;
            for p in precompute_cache(&ws.dataset, &ws.backbones, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train {
            data,
            config,
            out,
            cache,
            on_the_fly,
            seed,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let ws = workspace(&data, &cfg, cache.as_deref(), on_the_fly)?;
            let source = ws.source();
            let o = train_and_eval(&cfg, &ws.split, &*source, ws.dataset_hash(), seed)?;
            write_run(&out, &cfg, &o, ws.dataset_hash())?;
            println!("{}", serde_json::to_string(&o.metrics).expect("plain struct"));
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            cache,
            config,
        } => {
            let cfg = config_near(&checkpoint, config.as_deref())?;
            let (model, header) = CrossanModel::load(&checkpoint)?;
            let ws = workspace(&data, &cfg, cache.as_deref(), false)?;
            ws.check_checkpoint(&header)?;
            let source = ws.source();
            let r = evaluate(&model, &*source, &ws.split, split, cfg.eval.max_users)?;
            let mut named = cfg.clone();
            named.sidenet = model.config.sidenet.clone();
            named.fusion = model.config.fusion.clone();
            let m = metrics_json(&model_name(&named), ws.dataset_hash(), split, &r);
            let dir = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            mkdir(&dir)?;
            write_metrics(&dir, &m, &r)?;
            println!("{}", serde_json::to_string(&m).expect("plain struct"));
        }
        Command::Ablate {
            data,
            config,
            grid,
            out,
            jobs,
            cache,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let grid = AblationGrid::load(&grid)?;
            let ws = workspace(&data, &cfg, cache.as_deref(), false)?;
            let source = ws.source();
            let r = ablate(&cfg, &grid, &ws.split, &*source, ws.dataset_hash(), jobs, Some(&out))?;
            print!("{}", r.summary_csv());
        }
        Command::Mi {
            cross,
            indep,
            data,
            out,
            k,
            cache,
            config,
        } => {
            let cfg = config_near(&cross, config.as_deref())?;
            let (a, ha) = CrossanModel::load(&cross)?;
            let (b, hb) = CrossanModel::load(&indep)?;
            let ws = workspace(&data, &cfg, cache.as_deref(), false)?;
            ws.check_checkpoint(&ha)?;
            ws.check_checkpoint(&hb)?;
            let source = ws.source();
            let items: Vec<usize> = (0..ws.dataset.num_items).collect();
            let (mc, mi) = mi_compare(&a, &b, &*source, &items, k)?;
            mkdir(&out)?;
            #[derive(serde::Serialize)]
            struct MiOut<'a> {
                cross: &'a MIReport,
                independent: &'a MIReport,
            }
            let text = json_line(&MiOut {
                cross: &mc,
                independent: &mi,
            });
            write_file(&out.join("mi.json"), &text)?;
            print!("{text}");
        }
        Command::Heatmap {
            checkpoint,
            out,
            data,
            cache,
            config,
        } => {
            let (model, header) = CrossanModel::load(&checkpoint)?;
            mkdir(&out)?;
            model.side.export_gate_heatmap(&model.store, &out.join(GATES_FILE))?;
            print!("{}", model.side.gate_heatmap_csv(&model.store));
            if let Some(data) = data {
                let cfg = config_near(&checkpoint, config.as_deref())?;
                let ws = workspace(&data, &cfg, cache.as_deref(), false)?;
                ws.check_checkpoint(&header)?;
                let source = ws.source();
                let items: Vec<usize> = (0..ws.dataset.num_items).collect();
                let (selected, weights) = model.routing(&*source, &items)?;
                if let Some(w) = weights {
                    write_routing_log(&out.join("routing.csv"), &items, model.modalities(), &selected, &w)?;
                }
            }
        }
    }
    Ok(())
}
