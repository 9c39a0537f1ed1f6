//! `nanolab`: command-line driver for the compression pipeline and its
//! individual steps.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nanolab::budget::{filter_stream, BudgetConfig, DEFAULT_GRACE};
use nanolab::fp8::{materialize, quantize_checkpoint, skip_list};
use nanolab::importance::{importance_report, ImportanceReport};
use nanolab::io::{encode_stored, load_checkpoint, read_header, read_json, save_checkpoint, write_json};
use nanolab::model::Checkpoint;
use nanolab::pipeline::{calibration, describe, run_pipeline, search, stage_seed, PipelineConfig, Precision};
use nanolab::pruner::{prune_layers_protected, prune_to_widths};
use nanolab::train::{distill_run, eval_ce, log_to_jsonl, merge_checkpoints, synthetic_corpus, train_lm, CorpusPair, LogRecord};
use nanolab::{Error, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "nanolab", version, about = "Hybrid Mamba/attention model compression lab")]
struct Cli {
    /// Worker threads (defaults to NANOLAB_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Write a pipeline config to edit.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run every stage and write reports and checkpoints to a new directory.
    Pipeline {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the config's model from scratch on the synthetic corpus.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score layers, FFN neurons, embedding channels and Mamba heads.
    Importance {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        /// Also rank layers for removal down to this depth.
        #[arg(long)]
        target_depth: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Remove layers and/or shrink widths using an importance report.
    Prune {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        importance: PathBuf,
        /// Keep this many layers, dropping them in the report's removal order.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        d_ffn: Option<usize>,
        #[arg(long)]
        mamba_heads: Option<usize>,
        #[arg(long, default_value_t = 1)]
        min_attention: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Enumerate architectures that fit the config's memory budget.
    Nas {
        #[arg(short, long)]
        config: PathBuf,
        /// Base architecture; defaults to the config's model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        budget_bytes: Option<f64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Distill a student from a teacher with the config's final-run schedule.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Interpolate two checkpoints: (1 − alpha)·a + alpha·b.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Store linear-layer weights in E4M3 with 128×128 block scales.
    Quantize {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        skip_first: usize,
        #[arg(long, default_value_t = 1)]
        skip_last: usize,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Apply the thinking-budget filter to token streams, one per line.
    BudgetSim {
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = DEFAULT_GRACE)]
        grace: usize,
        #[arg(long)]
        open_id: usize,
        #[arg(long)]
        close_id: usize,
        #[arg(long)]
        newline_id: usize,
        /// Whitespace-separated token ids per line; stdin when absent.
        #[arg(short, long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Self::InitConfig { .. } => "init-config",
            Self::Pipeline { .. } => "pipeline",
            Self::Train { .. } => "train",
            Self::Importance { .. } => "importance",
            Self::Prune { .. } => "prune",
            Self::Nas { .. } => "nas",
            Self::Distill { .. } => "distill",
            Self::Merge { .. } => "merge",
            Self::Quantize { .. } => "quantize",
            Self::BudgetSim { .. } => "budget-sim",
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("NANOLAB_THREADS") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("NANOLAB_THREADS = {v:?}"))?)),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = read_json(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn corpus(cfg: &PipelineConfig) -> CorpusPair {
    synthetic_corpus(cfg.seed, cfg.data.train_bytes, cfg.data.eval_bytes)
}

/// True when every full-precision tensor in the file is `f32`.
fn stored_as_f32(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (header, _) = read_header(&bytes)?;
    let mut full = header.tensors.iter().filter(|e| e.quant.is_none()).peekable();
    Ok(full.peek().is_some() && full.all(|e| e.dtype == "f32"))
}

/// Runs `$body` with `$T` bound to the precision the checkpoint was saved in.
macro_rules! with_precision {
    ($path:expr, $T:ident => $body:expr) => {
        if stored_as_f32($path)? {
            type $T = f32;
            $body
        } else {
            type $T = f64;
            $body
        }
    };
}

fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn write_log(path: Option<&PathBuf>, log: &[LogRecord]) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, log_to_jsonl(log)?)?;
    }
    Ok(())
}

fn train<T: Scalar>(cfg: &PipelineConfig, out: &Path, log: Option<&PathBuf>) -> Result<()> {
    let data = corpus(cfg);
    // same seeds as the pipeline's teacher stage
    let init = Checkpoint::<T>::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 1)))?;
    let run = train_lm(init, &data.streams(), &cfg.train, stage_seed(cfg.seed, 2))?;
    let ce = eval_ce(&run.model, &data.eval_tokens(), cfg.data.eval_seq_len, cfg.data.eval_windows)?;
    save_checkpoint(&run.model, out)?;
    write_log(log, &run.log)?;
    println!("trained {} params, eval loss {ce:.4}", run.model.num_params());
    Ok(())
}

fn importance<T: Scalar>(model: &Path, cfg: &PipelineConfig, target_depth: Option<usize>, out: &Path) -> Result<()> {
    let ckpt = load::<T>(model)?;
    let calib = calibration(cfg, &corpus(cfg))?;
    let report = importance_report(
        &ckpt,
        &calib,
        cfg.search.aggregation,
        target_depth,
        Some(cfg.search.min_attention),
    )?;
    write_json(&report, out)?;
    println!("removal order {:?}", report.layer_removal_order.iter().map(|p| p.0).collect::<Vec<_>>());
    Ok(())
}

struct PruneArgs<'a> {
    importance: &'a Path,
    depth: Option<usize>,
    d_model: Option<usize>,
    d_ffn: Option<usize>,
    mamba_heads: Option<usize>,
    min_attention: usize,
}

fn prune<T: Scalar>(model: &Path, a: &PruneArgs<'_>, out: &Path) -> Result<()> {
    let mut ckpt = load::<T>(model)?;
    let report: ImportanceReport = read_json(a.importance)?;
    let widths = a.d_model.is_some() || a.d_ffn.is_some() || a.mamba_heads.is_some();
    if let Some(depth) = a.depth {
        let n = ckpt.config().n_layers();
        if depth > n || n - depth > report.layer_removal_order.len() {
            bail!(
                "report ranks {} layers for removal, depth {depth} needs {}",
                report.layer_removal_order.len(),
                n.saturating_sub(depth)
            );
        }
        if widths {
            bail!("prune depth and width in separate calls: width scores index the unpruned layers");
        }
        let remove: BTreeSet<usize> = report.layer_removal_order.iter().take(n - depth).map(|p| p.0).collect();
        ckpt = prune_layers_protected(&ckpt, &remove, a.min_attention)?;
    }
    if widths {
        let mut target = ckpt.config().clone();
        target.d_model = a.d_model.unwrap_or(target.d_model);
        target.d_ffn = a.d_ffn.unwrap_or(target.d_ffn);
        target.mamba_heads = a.mamba_heads.unwrap_or(target.mamba_heads);
        ckpt = prune_to_widths(&ckpt, &report.width_scores(), &target)?;
    }
    save_checkpoint(&ckpt, out)?;
    println!("{} with {} params", describe(ckpt.config()), ckpt.num_params());
    Ok(())
}

fn nas(cfg: &PipelineConfig, model: Option<&PathBuf>, budget_bytes: Option<f64>, out: &Path) -> Result<()> {
    let base = match model {
        Some(p) => with_precision!(p, T => load::<T>(p)?.config().clone()),
        None => cfg.model.clone(),
    };
    let budget = match budget_bytes {
        Some(b) => b,
        None => cfg.search.memory.budget()?,
    };
    let report = search(cfg, &base, vec![base.n_layers()], budget)?;
    write_json(&report, out)?;
    println!("{} of {} grid points fit {budget:.0} bytes", report.feasible, report.grid_size);
    Ok(())
}

fn distill<T: Scalar>(teacher: &Path, student: &Path, cfg: &PipelineConfig, out: &Path, log: Option<&PathBuf>) -> Result<()> {
    let t = load::<T>(teacher)?;
    let s = load::<T>(student)?;
    let data = corpus(cfg);
    let run = distill_run(&t, s, &data.streams(), &cfg.distill.final_run, cfg.seed)?;
    save_checkpoint(&run.model, out)?;
    write_log(log, &run.log)?;
    let last = run.log.last().map_or(f64::NAN, |r| r.loss);
    println!("final distillation loss {last:.6}");
    Ok(())
}

fn merge<T: Scalar>(a: &Path, b: &Path, alpha: f64, out: &Path) -> Result<()> {
    let merged = merge_checkpoints(&load::<T>(a)?, &load::<T>(b)?, alpha)?;
    save_checkpoint(&merged, out)?;
    Ok(())
}

fn quantize<T: Scalar>(model: &Path, first: usize, last: usize, out: &Path, report: Option<&PathBuf>) -> Result<()> {
    let ckpt = load::<T>(model)?;
    let skip = skip_list(ckpt.config(), first, last);
    let (stored, rep) = quantize_checkpoint(&ckpt, &skip)?;
    // the stored form must decode back to a valid model
    materialize(ckpt.config().clone(), &stored)?;
    fs::write(out, encode_stored(ckpt.config(), &stored)?)?;
    if let Some(p) = report {
        write_json(&rep, p)?;
    }
    let worst = rep.tensors.iter().map(|t| t.error.rel_frobenius_err).fold(0.0, f64::max);
    println!("{} tensors in E4M3, worst relative error {worst:.4}", rep.tensors.len());
    Ok(())
}

fn budget_sim(cfg: BudgetConfig, input: Option<&PathBuf>) -> Result<()> {
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(io::BufReader::new(fs::File::open(p)?)),
        None => Box::new(io::stdin().lock()),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("line {}: expected token ids", n + 1))?;
        let (output, metrics) = filter_stream(cfg, &tokens);
        let record = serde_json::json!({ "output": output, "metrics": metrics });
        writeln!(out, "{record}")?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitConfig { preset, seed, out } => {
            let cfg = match preset {
                Preset::Desk => PipelineConfig::desk(seed),
                Preset::Smoke => PipelineConfig::smoke(seed),
            };
            write_json(&cfg, out)?;
        }
        Command::Pipeline { config, out } => {
            let cfg = load_config(&config)?;
            if out.exists() && out.read_dir()?.next().is_some() {
                bail!("output directory {} is not empty", out.display());
            }
            let r = run_pipeline(&cfg, Some(&out))?;
            println!(
                "teacher loss {:.4}; depth {} selected; final {} loss {:.4} (fp8 {:.4})",
                r.teacher.eval_ce,
                r.depth.selected_depth,
                describe(&r.final_model.config),
                r.final_model.eval_ce_after,
                r.quantize.eval_ce_fp8
            );
        }
        Command::Train { config, out, log } => {
            let cfg = load_config(&config)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &out, log.as_ref())?,
                Precision::F64 => train::<f64>(&cfg, &out, log.as_ref())?,
            }
        }
        Command::Importance {
            model,
            config,
            target_depth,
            out,
        } => {
            let cfg = load_config(&config)?;
            with_precision!(&model, T => importance::<T>(&model, &cfg, target_depth, &out)?);
        }
        Command::Prune {
            model,
            importance,
            depth,
            d_model,
            d_ffn,
            mamba_heads,
            min_attention,
            out,
        } => {
            let args = PruneArgs {
                importance: &importance,
                depth,
                d_model,
                d_ffn,
                mamba_heads,
                min_attention,
            };
            with_precision!(&model, T => prune::<T>(&model, &args, &out)?);
        }
        Command::Nas {
            config,
            model,
            budget_bytes,
            out,
        } => nas(&load_config(&config)?, model.as_ref(), budget_bytes, &out)?,
        Command::Distill {
            teacher,
            student,
            config,
            out,
            log,
        } => {
            let cfg = load_config(&config)?;
            with_precision!(&student, T => distill::<T>(&teacher, &student, &cfg, &out, log.as_ref())?);
        }
        Command::Merge { a, b, alpha, out } => with_precision!(&a, T => merge::<T>(&a, &b, alpha, &out)?),
        Command::Quantize {
            model,
            skip_first,
            skip_last,
            out,
            report,
        } => with_precision!(&model, T => quantize::<T>(&model, skip_first, skip_last, &out, report.as_ref())?),
        Command::BudgetSim {
            budget,
            grace,
            open_id,
            close_id,
            newline_id,
            input,
        } => budget_sim(
            BudgetConfig {
                budget,
                grace,
                open_id,
                close_id,
                newline_id,
            },
            input.as_ref(),
        )?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("nanolab: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("nanolab: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match e.downcast_ref::<Error>() {
                Some(Error::Stage { stage: inner, .. }) => format!("{stage}/{inner}"),
                _ => stage.to_string(),
            };
            eprintln!("nanolab: stage `{stage}` failed: {e:#}");
            ExitCode::FAILURE
        }
    }
}
