//! Experiment configuration and the end-to-end commands: pretraining,
//! mask learning, evaluation through the cache engine, and analysis
//! reports. Every command is a pure function of its config, so two runs
//! with the same config write byte-identical artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, convert_streaming_by_whf, dynamic_norm_mask, freq_profile, freq_profile_mask, high_freq_ratio, Budget,
    QueryMode, StaticityReport, StreamingOrder,
};
use crate::cache::{generate, memory_report, time_decode, with_streaming_heads, CacheSettings, MemoryReport, TimingSample};
use crate::error::{invalid, Result};
use crate::io;
use crate::mask::{mask_stats, stage1_train, stage2_train, top_s_r, BinaryChannelMask, ChannelDims, MaskStats, ScalingFactors, TrainCurve, TrainSpec};
use crate::model::{answer_loss, pretrain, ModelConfig, PretrainSpec, ToyTransformer};
use crate::tasks::{mix_seed, TaskKind, TaskMix, TaskSample, TokenLayout};

/// Environment variable holding the root every relative output dir is
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "LEANK_OUTPUT_ROOT";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ALPHA_FILE: &str = "alpha.bin";
pub const ALPHA_STAGE1_FILE: &str = "alpha_stage1.bin";
pub const BETA_FILE: &str = "beta.bin";
pub const BETA_STAGE1_FILE: &str = "beta_stage1.bin";
pub const CURVES_FILE: &str = "curves.csv";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.json";
pub const CONFIG_FILE: &str = "config.json";

/// One pretraining phase over a sequence length range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub steps: usize,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub model_seed: u64,

    pub curriculum: Vec<CurriculumStage>,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_warmup: usize,
    pub pretrain_clip: f64,

    pub lambda: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub train_min_len: usize,
    pub train_max_len: usize,
    pub train_batch: usize,
    /// Held-out samples for choosing the deployed stage-2 mask.
    pub select_samples: usize,

    /// Task kinds used for pretraining and mask learning, equally weighted.
    pub train_tasks: Vec<TaskKind>,
    pub eval_tasks: Vec<TaskKind>,
    pub values_per_key: usize,
    pub filler_ratio: f64,
    pub eval_len: usize,
    pub eval_samples: usize,

    pub prune_ratio: f64,
    pub r: usize,
    pub sink: usize,
    pub window: usize,
    pub migrate_every: usize,
    pub bytes_per_element: usize,

    pub obs_window: usize,
    pub q_window: usize,
    pub static_samples: usize,
    pub staticity_lens: Vec<usize>,
    pub whf_fraction: f64,
    pub whf_order: String,
    /// High-frequency pair boundary; 0 means half of the pairs.
    pub high_boundary: usize,

    pub seed: u64,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_layers: 2,
                n_q_heads: 4,
                n_kv_heads: 2,
                head_dim: 16,
                d_model: 64,
                d_ff: 128,
                vocab: 128,
                rope_base: 10000.0,
                max_pos: 512,
            },
            model_seed: 7,
            curriculum: vec![
                CurriculumStage {
                    steps: 3000,
                    min_len: 8,
                    max_len: 16,
                },
                CurriculumStage {
                    steps: 1000,
                    min_len: 16,
                    max_len: 48,
                },
                CurriculumStage {
                    steps: 1000,
                    min_len: 32,
                    max_len: 128,
                },
            ],
            pretrain_lr: 1e-3,
            pretrain_batch: 16,
            pretrain_warmup: 100,
            pretrain_clip: 1.0,
            lambda: crate::mask::RECIPE_LAMBDA,
            lr_stage1: crate::mask::RECIPE_LR_STAGE1,
            lr_stage2: crate::mask::RECIPE_LR_STAGE1 / 2.0,
            steps_stage1: 1000,
            steps_stage2: 100,
            train_min_len: 64,
            train_max_len: 128,
            train_batch: 4,
            select_samples: 16,
            train_tasks: vec![TaskKind::DenseRetrieval],
            eval_tasks: vec![TaskKind::DenseRetrieval],
            values_per_key: 2,
            filler_ratio: 0.3,
            eval_len: 128,
            eval_samples: 200,
            prune_ratio: 0.7,
            r: 4,
            sink: 4,
            window: 16,
            migrate_every: crate::cache::DEFAULT_MIGRATE_EVERY,
            bytes_per_element: 2,
            obs_window: analysis::DEFAULT_OBS_WINDOW,
            q_window: 8,
            static_samples: 32,
            staticity_lens: vec![64, 128],
            whf_fraction: 0.25,
            whf_order: "lowest".into(),
            high_boundary: 0,
            seed: 0,
            output_dir: "run".into(),
        }
    }
}

/// Salts keeping the sample streams of different phases disjoint.
const SALT_PRETRAIN: u64 = 1;
const SALT_TRAIN: u64 = 2;
const SALT_EVAL: u64 = 3;
const SALT_CALIB: u64 = 4;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(invalid(format!("prune_ratio {} outside [0, 1)", self.prune_ratio)));
        }
        if self.r == 0 || self.r > self.model.head_dim {
            return Err(invalid(format!("r={} must lie in 1..={}", self.r, self.model.head_dim)));
        }
        if self.train_tasks.is_empty() || self.eval_tasks.is_empty() {
            return Err(invalid("train_tasks and eval_tasks must be non-empty"));
        }
        if self.eval_len > self.model.max_pos || self.train_max_len > self.model.max_pos {
            return Err(invalid("sequence lengths exceed the model's max_pos"));
        }
        if self.window == 0 || self.migrate_every == 0 || self.bytes_per_element == 0 {
            return Err(invalid("window, migrate_every and bytes_per_element must be positive"));
        }
        if !(0.0..=1.0).contains(&self.whf_fraction) {
            return Err(invalid("whf_fraction must lie in [0, 1]"));
        }
        StreamingOrder::parse(&self.whf_order, self.seed)?;
        self.train_spec().validate()
    }

    pub fn keep_ratio(&self) -> f64 {
        1.0 - self.prune_ratio
    }

    pub fn dims(&self) -> ChannelDims {
        ChannelDims::of(&self.model)
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::for_vocab(self.model.vocab)
    }

    pub fn cache_settings(&self) -> CacheSettings {
        CacheSettings::new(self.sink, self.window).with_migrate_every(self.migrate_every)
    }

    pub fn high_boundary(&self) -> usize {
        if self.high_boundary == 0 {
            (self.model.head_dim / 4).max(1)
        } else {
            self.high_boundary
        }
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            lambda: self.lambda,
            lr_stage1: self.lr_stage1,
            lr_stage2: self.lr_stage2,
            steps_stage1: self.steps_stage1,
            steps_stage2: self.steps_stage2,
            sink: self.sink,
            window: self.window,
            seq_len_range: (self.train_min_len, self.train_max_len),
            batch: self.train_batch,
            seed: mix_seed(self.seed, SALT_TRAIN),
            select_samples: self.select_samples,
        }
    }

    fn mix(&self, kinds: &[TaskKind], range: (usize, usize), salt: u64) -> TaskMix {
        TaskMix {
            kinds: kinds.iter().map(|&k| (k, 1.0)).collect(),
            seq_len_range: range,
            values_per_key: self.values_per_key,
            filler_ratio: self.filler_ratio,
            seed: mix_seed(self.seed, salt),
        }
    }

    pub fn train_mix(&self) -> TaskMix {
        self.mix(&self.train_tasks, (self.train_min_len, self.train_max_len), SALT_TRAIN)
    }

    /// Calibration inputs for the static baselines, disjoint from training
    /// and evaluation.
    pub fn calibration_mix(&self) -> TaskMix {
        self.mix(&self.train_tasks, (self.eval_len, self.eval_len), SALT_CALIB)
    }

    pub fn eval_mix(&self, kind: TaskKind) -> TaskMix {
        self.mix(&[kind], (self.eval_len, self.eval_len), mix_seed(SALT_EVAL, kind as u64))
    }

    /// SHA-256 of the config's compact JSON.
    pub fn hash(&self) -> Result<String> {
        Ok(io::sha256_hex(&serde_json::to_vec(self)?))
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.output_dir)
    }
}

/// Output root from the environment, defaulting to `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config_hash: String,
    pub model_seed: u64,
    pub losses: Vec<Vec<f64>>,
    /// Sample indices of the last batch and the trained model's mean loss
    /// on them.
    pub last_batch: Vec<u64>,
    pub last_batch_stage: usize,
    pub final_loss: f64,
}

fn stage_mix(config: &ExperimentConfig, i: usize, stage: &CurriculumStage) -> TaskMix {
    config.mix(
        &config.train_tasks,
        (stage.min_len, stage.max_len),
        mix_seed(SALT_PRETRAIN, i as u64),
    )
}

/// Mean answer loss of `model` over the given sample indices of `mix`.
pub fn batch_loss(model: &ToyTransformer, mix: &TaskMix, indices: &[u64]) -> Result<f64> {
    let layout = TokenLayout::for_vocab(model.config.vocab)?;
    let mut total = 0.0;
    let mut n = 0;
    for &i in indices {
        let (l, c) = answer_loss(model, &mix.sample(i, &layout)?)?;
        total += l;
        n += c;
    }
    Ok(total / n.max(1) as f64)
}

pub fn run_pretrain(config: &ExperimentConfig) -> Result<(ToyTransformer, PretrainReport)> {
    config.validate()?;
    let mut model = ToyTransformer::init(config.model.clone(), config.model_seed)?;
    let mut losses = Vec::new();
    for (i, stage) in config.curriculum.iter().enumerate() {
        let spec = PretrainSpec {
            steps: stage.steps,
            lr: config.pretrain_lr,
            batch: config.pretrain_batch,
            warmup: if i == 0 { config.pretrain_warmup } else { config.pretrain_warmup / 10 },
            clip: config.pretrain_clip,
        };
        let (m, log) = pretrain(&model, &stage_mix(config, i, stage), &spec)?;
        model = m;
        losses.push(log.losses);
    }
    let (last_batch_stage, last_batch) = match config.curriculum.iter().enumerate().rev().find(|(_, s)| s.steps > 0) {
        Some((i, s)) => {
            let start = ((s.steps - 1) * config.pretrain_batch) as u64;
            (i, (start..start + config.pretrain_batch as u64).collect())
        }
        None => (0, Vec::new()),
    };
    let final_loss = match config.curriculum.get(last_batch_stage) {
        Some(s) if !last_batch.is_empty() => batch_loss(&model, &stage_mix(config, last_batch_stage, s), &last_batch)?,
        _ => f64::NAN,
    };
    let report = PretrainReport {
        config_hash: config.hash()?,
        model_seed: config.model_seed,
        losses,
        last_batch,
        last_batch_stage,
        final_loss,
    };
    Ok((model, report))
}

/// Recomputes the logged final loss from a checkpoint.
pub fn recompute_final_loss(config: &ExperimentConfig, model: &ToyTransformer, report: &PretrainReport) -> Result<f64> {
    let stage = config
        .curriculum
        .get(report.last_batch_stage)
        .ok_or_else(|| invalid("report stage outside the curriculum"))?;
    batch_loss(model, &stage_mix(config, report.last_batch_stage, stage), &report.last_batch)
}

pub fn cmd_pretrain(config: &ExperimentConfig, root: &Path) -> Result<PretrainReport> {
    let (model, report) = run_pretrain(config)?;
    let dir = config.run_dir(root);
    io::save_checkpoint(&dir.join(CHECKPOINT_FILE), &model)?;
    io::save_json(&dir.join(PRETRAIN_LOG_FILE), &report)?;
    io::save_json(&dir.join(CONFIG_FILE), config)?;
    Ok(report)
}

pub fn load_model(config: &ExperimentConfig, root: &Path) -> Result<ToyTransformer> {
    let path = config.run_dir(root).join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(invalid(format!("checkpoint {} not found; run pretrain first", path.display())));
    }
    let model = io::load_checkpoint(&path)?;
    if model.config != config.model {
        return Err(invalid("checkpoint model config differs from the experiment config"));
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedMasks {
    pub alpha_stage1: ScalingFactors,
    pub alpha: ScalingFactors,
    pub beta_stage1: BinaryChannelMask,
    pub beta: BinaryChannelMask,
    pub stage1: TrainCurve,
    pub stage2: TrainCurve,
}

/// Stage 1 from scratch, or from `resume` when `steps_stage1 == 0`, then
/// stage 2 at the config's keep ratio.
pub fn learn_masks(model: &ToyTransformer, config: &ExperimentConfig, resume: Option<ScalingFactors>) -> Result<LearnedMasks> {
    let spec = config.train_spec();
    let mix = config.train_mix();
    let (alpha_stage1, stage1) = match resume {
        Some(a) if spec.steps_stage1 == 0 => (a, TrainCurve::default()),
        _ => stage1_train(model, &mix, &spec)?,
    };
    let keep = config.keep_ratio();
    let beta_stage1 = top_s_r(&alpha_stage1, keep, config.r)?;
    let (beta, alpha, stage2) = stage2_train(model, &mix, &alpha_stage1, keep, config.r, &spec)?;
    Ok(LearnedMasks {
        alpha_stage1,
        alpha,
        beta_stage1,
        beta,
        stage1,
        stage2,
    })
}

pub fn curves_csv(stage1: &TrainCurve, stage2: &TrainCurve) -> String {
    let mut s = String::from("stage,step,loss,distill\n");
    for (stage, c) in [(1, stage1), (2, stage2)] {
        for (i, (l, d)) in c.loss.iter().zip(&c.distill).enumerate() {
            writeln!(s, "{stage},{i},{l:?},{d:?}").expect("string write");
        }
    }
    s
}

pub fn cmd_learn_mask(config: &ExperimentConfig, root: &Path) -> Result<LearnedMasks> {
    config.validate()?;
    let model = load_model(config, root)?;
    let dir = config.run_dir(root);
    let resume_path = dir.join(ALPHA_STAGE1_FILE);
    let resume = if config.steps_stage1 == 0 && resume_path.exists() {
        Some(io::load_alpha(&resume_path, Some(config.dims()))?)
    } else {
        None
    };
    let out = learn_masks(&model, config, resume)?;
    io::save_alpha(&resume_path, &out.alpha_stage1)?;
    io::save_alpha(&dir.join(ALPHA_FILE), &out.alpha)?;
    io::save_beta(&dir.join(BETA_STAGE1_FILE), &out.beta_stage1)?;
    io::save_beta(&dir.join(BETA_FILE), &out.beta)?;
    io::atomic_write(&dir.join(CURVES_FILE), curves_csv(&out.stage1, &out.stage2).as_bytes())?;
    Ok(out)
}

/// Channel-selection policy used at decode time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Full,
    Leank,
    /// Top-s%,r of the stage-1 factors, without refinement.
    LeankStage1,
    StaticNorm,
    DynamicNorm,
    /// Dynamic scores with the learned mask's per-head budgets.
    DynamicNormPerHead,
    WhfStreaming,
}

impl EvalMode {
    pub const ALL: [EvalMode; 7] = [
        EvalMode::Full,
        EvalMode::Leank,
        EvalMode::LeankStage1,
        EvalMode::StaticNorm,
        EvalMode::DynamicNorm,
        EvalMode::DynamicNormPerHead,
        EvalMode::WhfStreaming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::Leank => "leank",
            EvalMode::LeankStage1 => "leank_stage1",
            EvalMode::StaticNorm => "static_norm",
            EvalMode::DynamicNorm => "dynamic_norm",
            EvalMode::DynamicNormPerHead => "dynamic_norm_per_head",
            EvalMode::WhfStreaming => "whf_streaming",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown eval mode '{s}'")))
    }
}

/// A mask fixed ahead of time, or one derived per input.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Static(BinaryChannelMask),
    Dynamic { budget: Budget, q_window: usize },
}

impl Policy {
    fn mask_for(&self, model: &ToyTransformer, prompt: &[usize]) -> Result<BinaryChannelMask> {
        match self {
            Policy::Static(m) => Ok(m.clone()),
            Policy::Dynamic { budget, q_window } => dynamic_norm_mask(model, prompt, budget, *q_window),
        }
    }

    pub fn static_mask(&self) -> Option<&BinaryChannelMask> {
        match self {
            Policy::Static(m) => Some(m),
            Policy::Dynamic { .. } => None,
        }
    }
}

/// Static-norm baseline mask from the config's calibration inputs.
pub fn static_baseline(model: &ToyTransformer, config: &ExperimentConfig, keep_ratio: f64) -> Result<BinaryChannelMask> {
    let layout = config.layout()?;
    let mix = config.calibration_mix();
    let samples = (0..config.static_samples.max(1) as u64)
        .map(|i| mix.sample(i, &layout).map(|s| s.tokens()))
        .collect::<Result<Vec<_>>>()?;
    analysis::static_norm_mask(model, &samples, keep_ratio, config.r, config.obs_window)
}

/// Streaming heads chosen by w_hf on one calibration input.
pub fn whf_streaming_heads(model: &ToyTransformer, config: &ExperimentConfig) -> Result<Vec<(usize, usize)>> {
    let layout = config.layout()?;
    let sample = config.calibration_mix().sample(0, &layout)?;
    let profile = high_freq_ratio(model, &sample.ctx_tokens, config.high_boundary(), QueryMode::Last)?;
    convert_streaming_by_whf(&profile, config.whf_fraction, StreamingOrder::parse(&config.whf_order, config.seed)?)
}

fn run_dir_mask(config: &ExperimentConfig, root: &Path, file: &str) -> Result<BinaryChannelMask> {
    let p = config.run_dir(root).join(file);
    if !p.exists() {
        return Err(invalid(format!("mask {} not found; run learn-mask first", p.display())));
    }
    io::load_beta(&p, Some(config.dims()))
}

/// Policy for `mode`. `mask` overrides the run directory's learned mask.
pub fn policy_for(
    mode: EvalMode,
    model: &ToyTransformer,
    config: &ExperimentConfig,
    root: &Path,
    mask: Option<&BinaryChannelMask>,
) -> Result<Policy> {
    let dims = config.dims();
    let learned = |file: &str| -> Result<BinaryChannelMask> {
        match mask {
            Some(m) => {
                if m.dims != dims {
                    return Err(invalid(format!("mask dims {:?} incompatible with model {:?}", m.dims, dims)));
                }
                Ok(m.clone())
            }
            None => run_dir_mask(config, root, file),
        }
    };
    Ok(match mode {
        EvalMode::Full => Policy::Static(BinaryChannelMask::full(dims, 1)?),
        EvalMode::Leank => Policy::Static(learned(BETA_FILE)?),
        EvalMode::LeankStage1 => Policy::Static(learned(BETA_STAGE1_FILE)?),
        EvalMode::StaticNorm => Policy::Static(static_baseline(model, config, config.keep_ratio())?),
        EvalMode::DynamicNorm => Policy::Dynamic {
            budget: Budget::Uniform(config.keep_ratio()),
            q_window: config.q_window,
        },
        EvalMode::DynamicNormPerHead => {
            let m = learned(BETA_FILE)?;
            let counts = mask_stats(&m).counts.concat();
            Policy::Dynamic {
                budget: Budget::PerHead(counts),
                q_window: config.q_window,
            }
        }
        EvalMode::WhfStreaming => {
            let heads = whf_streaming_heads(model, config)?;
            Policy::Static(with_streaming_heads(&BinaryChannelMask::full(dims, 1)?, &heads)?)
        }
    })
}

/// Greedy answer for one sample: prefill the context, feed the probe key,
/// then decode one token per gold value.
pub fn predict(model: &ToyTransformer, mask: &BinaryChannelMask, sample: &TaskSample, settings: CacheSettings) -> Result<Vec<usize>> {
    let (_, tokens) = generate(
        model,
        mask,
        &sample.ctx_tokens,
        &sample.ans_tokens[..1],
        sample.gold_values.len(),
        settings,
    )?;
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub samples: usize,
    pub accuracy: f64,
    /// Per-sample scores in sample order.
    pub scores: Vec<f64>,
}

pub fn evaluate_policy(
    model: &ToyTransformer,
    policy: &Policy,
    kind: TaskKind,
    config: &ExperimentConfig,
) -> Result<TaskAccuracy> {
    let layout = config.layout()?;
    let mix = config.eval_mix(kind);
    let settings = config.cache_settings();
    let scores = (0..config.eval_samples as u64)
        .into_par_iter()
        .map(|i| {
            let sample = mix.sample(i, &layout)?;
            let mask = policy.mask_for(model, &sample.ctx_tokens)?;
            let pred = predict(model, &mask, &sample, settings)?;
            Ok(crate::tasks::score(&pred, &sample))
        })
        .collect::<Result<Vec<f64>>>()?;
    let accuracy = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok(TaskAccuracy {
        kind,
        seq_len: config.eval_len,
        samples: scores.len(),
        accuracy,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: EvalMode,
    pub config_hash: String,
    pub prune_ratio: f64,
    pub tasks: Vec<TaskAccuracy>,
    pub mean_accuracy: f64,
    pub mask_stats: Option<MaskStats>,
    pub memory: Option<MemoryReport>,
    /// Wall-clock samples live in this sibling file so the report itself
    /// stays byte-stable.
    pub timing_file: Option<String>,
    pub config: ExperimentConfig,
}

pub fn evaluate(
    model: &ToyTransformer,
    config: &ExperimentConfig,
    mode: EvalMode,
    policy: &Policy,
) -> Result<RunReport> {
    let tasks = config
        .eval_tasks
        .iter()
        .map(|&k| evaluate_policy(model, policy, k, config))
        .collect::<Result<Vec<_>>>()?;
    let mean_accuracy = tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64;
    let (stats, memory) = match policy.static_mask() {
        Some(m) => (
            Some(mask_stats(m)),
            Some(memory_report(m, config.sink, config.window, config.eval_len, config.bytes_per_element)),
        ),
        None => (None, None),
    };
    Ok(RunReport {
        mode,
        config_hash: config.hash()?,
        prune_ratio: config.prune_ratio,
        tasks,
        mean_accuracy,
        mask_stats: stats,
        memory,
        timing_file: None,
        config: config.clone(),
    })
}

pub fn report_file(mode: EvalMode) -> String {
    format!("report_{}.json", mode.name())
}

/// Evaluates `mode` and writes its report. With `timing`, a decode timing
/// sample is written next to it.
pub fn cmd_eval(
    config: &ExperimentConfig,
    root: &Path,
    mode: EvalMode,
    mask: Option<&BinaryChannelMask>,
    timing: bool,
) -> Result<RunReport> {
    config.validate()?;
    let model = load_model(config, root)?;
    let policy = policy_for(mode, &model, config, root, mask)?;
    let mut report = evaluate(&model, config, mode, &policy)?;
    let dir = config.run_dir(root);
    if timing {
        if let Some(m) = policy.static_mask() {
            let sample = config.eval_mix(config.eval_tasks[0]).sample(0, &config.layout()?)?;
            let t: TimingSample = time_decode(&model, m, &sample.ctx_tokens, 32, config.cache_settings())?;
            let name = format!("timing_{}.json", mode.name());
            io::save_json(&dir.join(&name), &t)?;
            report.timing_file = Some(name);
        }
    }
    io::save_json(&dir.join(report_file(mode)), &report)?;
    Ok(report)
}

/// Staticity inputs: every eval task kind at every staticity length.
pub fn staticity_inputs(config: &ExperimentConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let layout = config.layout()?;
    let mut out = Vec::new();
    for &kind in &config.eval_tasks {
        for &len in &config.staticity_lens {
            let mix = config.mix(&[kind], (len, len), mix_seed(SALT_CALIB, len as u64));
            out.push((format!("{}@{len}", kind.name()), mix.sample(0, &layout)?.tokens()));
        }
    }
    Ok(out)
}

pub fn staticity_csv(report: &StaticityReport) -> String {
    let mut s = String::from("input");
    for l in &report.labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in report.labels.iter().zip(&report.matrix) {
        s.push_str(l);
        for x in row {
            write!(s, ",{x:?}").expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_staticity(config: &ExperimentConfig, root: &Path) -> Result<StaticityReport> {
    config.validate()?;
    let model = load_model(config, root)?;
    let report = analysis::staticity(&model, &staticity_inputs(config)?, config.obs_window)?;
    io::atomic_write(&config.run_dir(root).join("staticity.csv"), staticity_csv(&report).as_bytes())?;
    Ok(report)
}

pub fn profile_csv(profile: &[f64]) -> String {
    let mut s = String::from("pair_index,value\n");
    for (j, x) in profile.iter().enumerate() {
        writeln!(s, "{j},{x:?}").expect("string write");
    }
    s
}

/// Retained ratio per channel-pair index of the learned mask, plus the
/// mean norm ratio profile on one calibration input.
pub fn cmd_freq_profile(config: &ExperimentConfig, root: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    let model = load_model(config, root)?;
    let beta = run_dir_mask(config, root, BETA_FILE)?;
    let retained = freq_profile_mask(&beta)?;
    let sample = config.calibration_mix().sample(0, &config.layout()?)?;
    let norms = analysis::channel_norm_ratios(&model, &sample.tokens(), config.obs_window)?;
    let importance = freq_profile(norms.dims, &norms.values)?;
    let dir = config.run_dir(root);
    io::atomic_write(&dir.join("freq_profile_mask.csv"), profile_csv(&retained).as_bytes())?;
    io::atomic_write(&dir.join("freq_profile_norms.csv"), profile_csv(&importance).as_bytes())?;
    Ok((retained, importance))
}

pub fn cmd_whf(config: &ExperimentConfig, root: &Path, mode: QueryMode) -> Result<analysis::HeadFreqProfile> {
    config.validate()?;
    let model = load_model(config, root)?;
    let sample = config.calibration_mix().sample(0, &config.layout()?)?;
    let profile = high_freq_ratio(&model, &sample.ctx_tokens, config.high_boundary(), mode)?;
    let mut s = String::from("layer,head,w_hf\n");
    let h = profile.dims.n_kv_heads;
    for (i, w) in profile.w_hf.iter().enumerate() {
        writeln!(s, "{},{},{w:?}", i / h, i % h).expect("string write");
    }
    io::atomic_write(&config.run_dir(root).join("whf.csv"), s.as_bytes())?;
    Ok(profile)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub prompt_len: usize,
    pub forced: Vec<usize>,
    pub generated: Vec<usize>,
    /// Closed-form footprint at the final length.
    pub memory: MemoryReport,
}

/// Greedy decode of `prompt` through the cache under `mask` (full width
/// when `None`).
pub fn cmd_decode(
    config: &ExperimentConfig,
    root: &Path,
    mask: Option<&BinaryChannelMask>,
    prompt: &[usize],
    forced: &[usize],
    max_new_tokens: usize,
) -> Result<DecodeReport> {
    config.validate()?;
    let model = load_model(config, root)?;
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = BinaryChannelMask::full(config.dims(), 1)?;
            &full
        }
    };
    let (_, generated) = generate(&model, mask, prompt, forced, max_new_tokens, config.cache_settings())?;
    let len = prompt.len() + forced.len() + generated.len();
    Ok(DecodeReport {
        prompt_len: prompt.len(),
        forced: forced.to_vec(),
        generated,
        memory: memory_report(mask, config.sink, config.window, len, config.bytes_per_element),
    })
}

/// Eval samples as JSON lines.
pub fn export_samples(config: &ExperimentConfig, kind: TaskKind, n: usize) -> Result<String> {
    let layout = config.layout()?;
    let mix = config.eval_mix(kind);
    let mut s = String::new();
    for i in 0..n as u64 {
        s.push_str(&serde_json::to_string(&mix.sample(i, &layout)?)?);
        s.push('\n');
    }
    Ok(s)
}
