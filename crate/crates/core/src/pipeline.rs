//! End-to-end compression run: teacher training, depth search, memory-bounded
//! width search, distillation, FP8 quantization and a thinking-budget check.
//!
//! Every random draw derives from the config seed, so reruns reproduce the
//! reports and checkpoints bit for bit.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{filter_stream, BudgetConfig, FilterMetrics, DEFAULT_GRACE};
use crate::error::{Error, Result};
use crate::fp8::{materialize, quantize_checkpoint, skip_list, QuantizeReport};
use crate::importance::{layer_importance_iterative_with, width_importance, Aggregation, CalibrationSet};
use crate::io::{encode_checkpoint, encode_stored};
use crate::model::{count_params, model_forward, Checkpoint, LayerKind, LayerPattern, ModelConfig, TokenBatch};
use crate::nas::{derive_budget, enumerate_candidates, estimate_memory, rank_candidates, Candidate, SearchSpace};
use crate::pruner::{prune_layers_protected, prune_to_widths, DEFAULT_MIN_ATTENTION};
use crate::scalar::Scalar;
use crate::train::corpus::{synthetic_corpus, CorpusPair, BYTE_VOCAB, NEWLINE, THINK_CLOSE, THINK_OPEN};
use crate::train::{distill_run, eval_ce, log_to_jsonl, train_lm, LogRecord, Stage, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Bytes of training text per source.
    pub train_bytes: usize,
    /// Bytes of held-out text per source.
    pub eval_bytes: usize,
    pub eval_seq_len: usize,
    pub eval_windows: usize,
}

/// Either a fixed byte budget or one derived from device memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default)]
    pub budget_bytes: Option<f64>,
    #[serde(default)]
    pub gpu_bytes: f64,
    #[serde(default)]
    pub buffer_fraction: f64,
    #[serde(default)]
    pub reserved_bytes: f64,
    pub seq_len: u64,
    pub batch: u64,
    pub bytes_per_elem: u64,
}

impl MemoryConfig {
    pub fn budget(&self) -> Result<f64> {
        match self.budget_bytes {
            Some(b) => Ok(b),
            None => derive_budget(self.gpu_bytes, self.buffer_fraction, self.reserved_bytes),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub calibration_samples: usize,
    pub calibration_seq_len: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_min_attention")]
    pub min_attention: usize,
    pub depths: Vec<usize>,
    pub d_models: Vec<usize>,
    pub d_ffns: Vec<usize>,
    pub mamba_heads: Vec<usize>,
    pub memory: MemoryConfig,
    pub top_k: usize,
}

fn default_min_attention() -> usize {
    DEFAULT_MIN_ATTENTION
}

/// Distillation budgets: per depth, per width candidate, and the final run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub depth: TrainConfig,
    pub candidate: TrainConfig,
    #[serde(rename = "final")]
    pub final_run: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    /// Linear layers kept in full precision at each end of the stack.
    pub skip_first: usize,
    pub skip_last: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSimConfig {
    pub budget: usize,
    #[serde(default = "default_grace")]
    pub grace: usize,
    pub streams: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

fn default_grace() -> usize {
    DEFAULT_GRACE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Teacher pretraining.
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub distill: DistillConfig,
    pub quantize: QuantizeConfig,
    pub budget: BudgetSimConfig,
}

fn desk_train(lr: f64, tokens: u64, seq_len: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        lr_stable: lr,
        lr_min: lr / 100.0,
        warmup_steps: warmup,
        decay_start_fraction: 0.5,
        weight_decay: 0.0,
        grad_clip: Some(1.0),
        mix_fraction: 0.7,
        ..TrainConfig::standard(8 * seq_len, vec![Stage { tokens, seq_len }])
    }
}

impl PipelineConfig {
    /// Desk defaults: 8 layers of width 64 over a byte vocabulary, token
    /// budgets in the low millions.
    pub fn desk(seed: u64) -> Self {
        let model = ModelConfig {
            pattern: LayerPattern::build(8, 1).expect("8 ≥ 1"),
            d_model: 64,
            d_ffn: 256,
            n_q_heads: 4,
            n_kv_heads: 2,
            attn_head_dim: 16,
            mamba_heads: 8,
            mamba_head_dim: 16,
            mamba_groups: 2,
            mamba_state_dim: 16,
            conv_window: 4,
            vocab_size: BYTE_VOCAB,
            tied_embeddings: false,
            norm_eps: 1e-5,
        };
        let mut teacher_train = desk_train(3e-3, 1_000_000, 32, 50);
        teacher_train.stages = vec![
            Stage { tokens: 600_000, seq_len: 32 },
            Stage { tokens: 400_000, seq_len: 64 },
        ];
        // roughly three quarters of the teacher's footprint
        let teacher_mem = estimate_memory(&model, 256, 1, 2).total_bytes as f64;
        Self {
            seed,
            precision: Precision::F32,
            data: DataConfig {
                train_bytes: 1_000_000,
                eval_bytes: 50_000,
                eval_seq_len: 64,
                eval_windows: 128,
            },
            train: teacher_train,
            search: SearchConfig {
                calibration_samples: 64,
                calibration_seq_len: 64,
                aggregation: Aggregation::L2,
                min_attention: 1,
                depths: vec![6, 7, 8],
                d_models: vec![48, 56, 64],
                d_ffns: vec![128, 192, 256],
                mamba_heads: vec![4, 6, 8],
                memory: MemoryConfig {
                    budget_bytes: None,
                    gpu_bytes: teacher_mem * 0.8 / 0.95,
                    buffer_fraction: 0.05,
                    reserved_bytes: 0.0,
                    seq_len: 256,
                    batch: 1,
                    bytes_per_elem: 2,
                },
                top_k: 3,
            },
            distill: DistillConfig {
                depth: desk_train(5e-4, 100_000, 64, 10),
                candidate: desk_train(5e-4, 100_000, 64, 10),
                final_run: desk_train(5e-4, 400_000, 64, 10),
            },
            quantize: QuantizeConfig {
                skip_first: 1,
                skip_last: 1,
            },
            budget: BudgetSimConfig {
                budget: 24,
                grace: DEFAULT_GRACE,
                streams: 8,
                max_new_tokens: 64,
                temperature: 0.8,
            },
            model,
        }
    }

    /// A seconds-long run on a 6-layer width-16 model, for smoke tests.
    pub fn smoke(seed: u64) -> Self {
        let mut c = Self::desk(seed);
        c.precision = Precision::F64;
        c.model = ModelConfig {
            pattern: LayerPattern::build(6, 1).expect("6 ≥ 1"),
            d_model: 16,
            d_ffn: 32,
            attn_head_dim: 4,
            mamba_heads: 4,
            mamba_head_dim: 4,
            mamba_state_dim: 4,
            conv_window: 3,
            ..c.model
        };
        c.data = DataConfig {
            train_bytes: 20_000,
            eval_bytes: 2_000,
            eval_seq_len: 16,
            eval_windows: 8,
        };
        c.train = desk_train(1e-2, 3_000, 16, 5);
        c.search.calibration_samples = 8;
        c.search.calibration_seq_len = 16;
        c.search.depths = vec![4, 5, 6];
        c.search.d_models = vec![12, 16];
        c.search.d_ffns = vec![16, 24, 32];
        c.search.mamba_heads = vec![2, 4];
        c.search.top_k = 2;
        let teacher_mem = estimate_memory(&c.model, 256, 1, 2).total_bytes as f64;
        c.search.memory.gpu_bytes = teacher_mem * 0.8 / 0.95;
        for t in [&mut c.distill.depth, &mut c.distill.candidate, &mut c.distill.final_run] {
            *t = desk_train(1e-3, 512, 16, 2);
        }
        c.distill.final_run.stages[0].tokens = 1_024;
        c.budget = BudgetSimConfig {
            budget: 6,
            grace: 20,
            streams: 2,
            max_new_tokens: 30,
            temperature: 1.0,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distill.depth.validate()?;
        self.distill.candidate.validate()?;
        self.distill.final_run.validate()?;
        if self.model.vocab_size < BYTE_VOCAB {
            return Err(Error::Config(format!("the byte corpus needs vocab ≥ {BYTE_VOCAB}")));
        }
        let n = self.model.n_layers();
        let s = &self.search;
        if s.depths.is_empty() || s.depths.iter().any(|&d| d == 0 || d > n) {
            return Err(Error::Config(format!("depths {:?} must lie in 1..={n}", s.depths)));
        }
        if s.top_k == 0 || s.calibration_samples == 0 || s.calibration_seq_len == 0 {
            return Err(Error::Config("top_k and the calibration sizes must be positive".into()));
        }
        if self.data.eval_seq_len == 0 || self.data.eval_windows == 0 {
            return Err(Error::Config("eval windows must be non-empty".into()));
        }
        if !(self.budget.temperature > 0.0) {
            return Err(Error::Config("sampling temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub params: u64,
    pub tokens: u64,
    pub final_train_loss: f64,
    pub eval_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    pub depth: usize,
    /// Original layer indices removed.
    pub removed: Vec<usize>,
    pub pattern: String,
    pub params: u64,
    pub eval_ce_pruned: f64,
    pub eval_ce_distilled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub removal_order: Vec<(usize, f64)>,
    pub results: Vec<DepthResult>,
    pub selected_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasReport {
    pub budget_bytes: f64,
    pub grid_size: usize,
    pub feasible: usize,
    pub top_k: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub d_model: usize,
    pub d_ffn: usize,
    pub mamba_heads: usize,
    pub params: u64,
    pub memory_bytes: u64,
    pub eval_ce_pruned: f64,
    pub eval_ce_distilled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthReport {
    pub candidates: Vec<CandidateResult>,
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub config: ModelConfig,
    pub params: u64,
    pub teacher_eval_ce: f64,
    pub eval_ce_before: f64,
    pub eval_ce_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantStageReport {
    pub quantize: QuantizeReport,
    pub eval_ce_full: f64,
    pub eval_ce_fp8: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetStageReport {
    pub config: BudgetConfig,
    pub streams: Vec<FilterMetrics>,
    pub well_formed_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub teacher: TeacherReport,
    pub depth: DepthReport,
    pub nas: NasReport,
    pub width: WidthReport,
    #[serde(rename = "final")]
    pub final_model: FinalReport,
    pub quantize: QuantStageReport,
    pub budget: BudgetStageReport,
}

/// Tags a stage's error with its name.
fn stage<R>(name: &'static str, r: Result<R>) -> Result<R> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Seed for the `k`-th random stream derived from the run seed.
pub fn stage_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

/// Writes stage artifacts; refuses to overwrite anything already there.
struct Artifacts {
    dir: Option<PathBuf>,
}

impl Artifacts {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new().write(true).create_new(true).open(dir.join(name))?;
            f.write_all(bytes)?;
        }
        Ok(())
    }

    fn json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        if self.dir.is_some() {
            let mut s = serde_json::to_string_pretty(value)?;
            s.push('\n');
            self.write(name, s.as_bytes())?;
        }
        Ok(())
    }

    fn checkpoint<T: Scalar>(&self, name: &str, ckpt: &Checkpoint<T>) -> Result<()> {
        if self.dir.is_some() {
            self.write(name, &encode_checkpoint(ckpt)?)?;
        }
        Ok(())
    }

    fn log(&self, name: &str, log: &[LogRecord]) -> Result<()> {
        if self.dir.is_some() {
            self.write(name, log_to_jsonl(log)?.as_bytes())?;
        }
        Ok(())
    }
}

/// Draws `n` tokens after `prompt`, conditioning on at most `context` tokens.
pub fn generate<T: Scalar>(
    ckpt: &Checkpoint<T>,
    prompt: &[usize],
    n: usize,
    context: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if prompt.is_empty() || context == 0 {
        return Err(Error::Invalid("generation needs a prompt and a positive context".into()));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let window = &seq[seq.len().saturating_sub(context)..];
        let logits = model_forward(&TokenBatch::single(window)?, ckpt)?;
        let v = logits.last_dim();
        let last = &logits.data()[logits.len() - v..];
        let max = last.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = last.iter().map(|x| ((x.as_f64() - max) / temperature).exp()).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(format!("sampling: {e}")))?;
        seq.push(dist.sample(rng));
    }
    Ok(seq[prompt.len()..].to_vec())
}

/// Runs every stage in order. With `out_dir`, each stage writes its report
/// and checkpoints there as new files.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineReport> {
    stage("config", cfg.validate())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let art = Artifacts {
        dir: out_dir.map(Path::to_path_buf),
    };
    art.json("00_config.json", cfg)?;
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, &art),
        Precision::F32 => run_typed::<f32>(cfg, &art),
    }
}

fn run_typed<T: Scalar>(cfg: &PipelineConfig, art: &Artifacts) -> Result<PipelineReport> {
    let corpus = synthetic_corpus(cfg.seed, cfg.data.train_bytes, cfg.data.eval_bytes);
    let eval_tokens = corpus.eval_tokens();
    let eval = |m: &Checkpoint<T>| eval_ce(m, &eval_tokens, cfg.data.eval_seq_len, cfg.data.eval_windows);

    // teacher
    let (teacher, teacher_report) = stage("teacher", {
        (|| {
            let init = Checkpoint::<T>::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 1)))?;
            let out = train_lm(init, &corpus.streams(), &cfg.train, stage_seed(cfg.seed, 2))?;
            let report = TeacherReport {
                params: out.model.num_params(),
                tokens: out.log.last().map_or(0, |r| r.tokens),
                final_train_loss: out.log.last().map_or(f64::NAN, |r| r.loss),
                eval_ce: eval(&out.model)?,
            };
            art.log("01_teacher_log.jsonl", &out.log)?;
            art.checkpoint("01_teacher.nnc", &out.model)?;
            art.json("01_teacher.json", &report)?;
            Ok((out.model, report))
        })()
    })?;

    let calib = stage("calibration", calibration(cfg, &corpus))?;

    // depth
    let (depth_model, depth_report) = stage("depth", depth_stage(cfg, &teacher, &corpus, &calib, &eval, art))?;

    // nas
    let nas_report = stage("nas", nas_stage(cfg, depth_model.config()))?;
    art.json("03_nas.json", &nas_report)?;

    // width candidates
    let (width_model, width_report) = stage(
        "width",
        width_stage(cfg, &teacher, &depth_model, &nas_report, &corpus, &calib, &eval, art),
    )?;

    // final distillation
    let (final_model, final_report) = stage("final", {
        (|| {
            let before = eval(&width_model)?;
            let out = distill_run(
                &teacher,
                width_model,
                &corpus.streams(),
                &cfg.distill.final_run,
                stage_seed(cfg.seed, 6),
            )?;
            let report = FinalReport {
                config: out.model.config().clone(),
                params: out.model.num_params(),
                teacher_eval_ce: teacher_report.eval_ce,
                eval_ce_before: before,
                eval_ce_after: eval(&out.model)?,
            };
            art.log("05_final_log.jsonl", &out.log)?;
            art.checkpoint("05_final.nnc", &out.model)?;
            art.json("05_final.json", &report)?;
            Ok((out.model, report))
        })()
    })?;

    // quantize
    let quant_report = stage("quantize", {
        (|| {
            let skip = skip_list(final_model.config(), cfg.quantize.skip_first, cfg.quantize.skip_last);
            let (stored, quantize) = quantize_checkpoint(&final_model, &skip)?;
            let fp8_model = materialize(final_model.config().clone(), &stored)?;
            let report = QuantStageReport {
                quantize,
                eval_ce_full: final_report.eval_ce_after,
                eval_ce_fp8: eval(&fp8_model)?,
            };
            art.write("06_final_fp8.nnc", &encode_stored(final_model.config(), &stored)?)?;
            art.json("06_quantize.json", &report)?;
            Ok(report)
        })()
    })?;

    // thinking budget
    let budget_report = stage("budget", budget_stage(cfg, &final_model, &corpus))?;
    art.json("07_budget.json", &budget_report)?;

    let report = PipelineReport {
        teacher: teacher_report,
        depth: depth_report,
        nas: nas_report,
        width: width_report,
        final_model: final_report,
        quantize: quant_report,
        budget: budget_report,
    };
    art.json("report.json", &report)?;
    Ok(report)
}

/// Calibration windows drawn from both training streams.
pub fn calibration(cfg: &PipelineConfig, corpus: &CorpusPair) -> Result<CalibrationSet> {
    let mut text = corpus.primary.train.clone();
    text.extend_from_slice(&corpus.secondary.train);
    CalibrationSet::sample(
        &text,
        cfg.search.calibration_samples,
        cfg.search.calibration_seq_len,
        stage_seed(cfg.seed, 3),
    )
}

fn pattern_string(p: &LayerPattern) -> String {
    p.kinds().iter().map(|k| k.symbol()).collect()
}

fn depth_stage<T: Scalar>(
    cfg: &PipelineConfig,
    teacher: &Checkpoint<T>,
    corpus: &CorpusPair,
    calib: &CalibrationSet,
    eval: &impl Fn(&Checkpoint<T>) -> Result<f64>,
    art: &Artifacts,
) -> Result<(Checkpoint<T>, DepthReport)> {
    let n = teacher.config().n_layers();
    let min_attention = cfg.search.min_attention;
    let shallowest = *cfg.search.depths.iter().min().expect("validated non-empty");
    let removal_order = if shallowest < n {
        layer_importance_iterative_with(teacher, calib, shallowest, Some(min_attention))?
    } else {
        Vec::new()
    };
    let mut results = Vec::new();
    let mut best: Option<(f64, Checkpoint<T>)> = None;
    for &depth in &cfg.search.depths {
        let removed: BTreeSet<usize> = removal_order.iter().take(n - depth).map(|&(i, _)| i).collect();
        let pruned = prune_layers_protected(teacher, &removed, min_attention)?;
        let eval_ce_pruned = eval(&pruned)?;
        let out = distill_run(
            teacher,
            pruned,
            &corpus.streams(),
            &cfg.distill.depth,
            stage_seed(cfg.seed, 100 + depth as u64),
        )?;
        let eval_ce_distilled = eval(&out.model)?;
        results.push(DepthResult {
            depth,
            removed: removed.into_iter().collect(),
            pattern: pattern_string(&out.model.config().pattern),
            params: out.model.num_params(),
            eval_ce_pruned,
            eval_ce_distilled,
        });
        art.checkpoint(&format!("02_depth_{depth}.nnc"), &out.model)?;
        if best.as_ref().is_none_or(|(b, _)| eval_ce_distilled < *b) {
            best = Some((eval_ce_distilled, out.model));
        }
    }
    let (_, model) = best.expect("at least one depth");
    let report = DepthReport {
        removal_order,
        results,
        selected_depth: model.config().n_layers(),
    };
    art.json("02_depth.json", &report)?;
    Ok((model, report))
}

fn nas_stage(cfg: &PipelineConfig, base: &ModelConfig) -> Result<NasReport> {
    search(cfg, base, vec![base.n_layers()], cfg.search.memory.budget()?)
}

/// Width grid of `cfg.search` at the given depths around `base`, keeping the
/// top-k candidates that fit `budget` bytes.
pub fn search(cfg: &PipelineConfig, base: &ModelConfig, depths: Vec<usize>, budget: f64) -> Result<NasReport> {
    let s = &cfg.search;
    let space = SearchSpace {
        base: base.clone(),
        depths,
        d_models: s.d_models.clone(),
        d_ffns: s.d_ffns.clone(),
        mamba_heads: s.mamba_heads.clone(),
    };
    let feasible = enumerate_candidates(&space, budget, s.memory.seq_len, s.memory.batch, s.memory.bytes_per_elem)?;
    if feasible.is_empty() {
        return Err(Error::NoFeasibleCandidate(budget));
    }
    Ok(NasReport {
        budget_bytes: budget,
        grid_size: space.grid_size(),
        feasible: feasible.len(),
        top_k: rank_candidates(&feasible, s.top_k)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn width_stage<T: Scalar>(
    cfg: &PipelineConfig,
    teacher: &Checkpoint<T>,
    base: &Checkpoint<T>,
    nas: &NasReport,
    corpus: &CorpusPair,
    calib: &CalibrationSet,
    eval: &impl Fn(&Checkpoint<T>) -> Result<f64>,
    art: &Artifacts,
) -> Result<(Checkpoint<T>, WidthReport)> {
    let scores = width_importance(base, calib, cfg.search.aggregation)?;
    let mut candidates = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint<T>)> = None;
    for (i, cand) in nas.top_k.iter().enumerate() {
        let pruned = prune_to_widths(base, &scores, &cand.config)?;
        let eval_ce_pruned = eval(&pruned)?;
        let out = distill_run(
            teacher,
            pruned,
            &corpus.streams(),
            &cfg.distill.candidate,
            stage_seed(cfg.seed, 200 + i as u64),
        )?;
        let eval_ce_distilled = eval(&out.model)?;
        candidates.push(CandidateResult {
            d_model: cand.config.d_model,
            d_ffn: cand.config.d_ffn,
            mamba_heads: cand.config.mamba_heads,
            params: count_params(&cand.config),
            memory_bytes: cand.memory.total_bytes,
            eval_ce_pruned,
            eval_ce_distilled,
        });
        art.checkpoint(&format!("04_candidate_{i}.nnc"), &out.model)?;
        if best.as_ref().is_none_or(|(b, _, _)| eval_ce_distilled < *b) {
            best = Some((eval_ce_distilled, i, out.model));
        }
    }
    let (_, selected, model) = best.ok_or(Error::NoFeasibleCandidate(nas.budget_bytes))?;
    let report = WidthReport { candidates, selected };
    art.json("04_width.json", &report)?;
    Ok((model, report))
}

fn budget_stage<T: Scalar>(cfg: &PipelineConfig, model: &Checkpoint<T>, corpus: &CorpusPair) -> Result<BudgetStageReport> {
    let b = &cfg.budget;
    let filter = BudgetConfig {
        budget: b.budget,
        grace: b.grace,
        open_id: THINK_OPEN,
        close_id: THINK_CLOSE,
        newline_id: NEWLINE,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 7));
    let context = cfg.data.eval_seq_len;
    let mut streams = Vec::with_capacity(b.streams);
    for i in 0..b.streams {
        // prompts are held-out line starts
        let src = if i % 2 == 0 { &corpus.primary.eval } else { &corpus.secondary.eval };
        let starts: Vec<usize> = (0..src.len()).filter(|&j| j == 0 || src[j - 1] == NEWLINE).collect();
        let start = starts[i / 2 % starts.len().max(1)];
        let mut prompt: Vec<usize> = src[start..(start + 4).min(src.len())].to_vec();
        prompt.push(THINK_OPEN);
        let generated = generate(model, &prompt, b.max_new_tokens, context, b.temperature, &mut rng)?;
        let mut stream = prompt;
        stream.extend(generated);
        streams.push(filter_stream(filter, &stream).1);
    }
    let well = streams.iter().filter(|m| m.well_formed).count();
    Ok(BudgetStageReport {
        config: filter,
        well_formed_rate: well as f64 / streams.len().max(1) as f64,
        streams,
    })
}

/// Layer kinds of `cfg` as a compact string such as `MFAM`.
pub fn describe(cfg: &ModelConfig) -> String {
    format!(
        "{} (d_model {}, d_ffn {}, mamba heads {}, attention {})",
        pattern_string(&cfg.pattern),
        cfg.d_model,
        cfg.d_ffn,
        cfg.mamba_heads,
        cfg.pattern.count(LayerKind::Attention)
    )
}
