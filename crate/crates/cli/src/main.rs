use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use leank::analysis::QueryMode;
use leank::cache::memory_report;
use leank::io;
use leank::mask::BinaryChannelMask;
use leank::pipeline::{self, CurriculumStage, EvalMode, ExperimentConfig, OUTPUT_ROOT_ENV};
use leank::tasks::TaskKind;

#[derive(Parser, Debug)]
#[command(name = "leank", version, about = "Learned static key-cache channel pruning on a toy transformer")]
struct Cli {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model and write checkpoint.bin.
    Pretrain,
    /// Run both mask-learning stages and write alpha.bin, beta.bin and curves.csv.
    LearnMask,
    /// Greedy-decode the eval tasks through the cache and write a report.
    Eval {
        #[arg(long, value_enum, default_value_t = Mode::Leank)]
        mode: Mode,
        /// Mask file to use instead of the run directory's learned mask.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Also write a decode timing sample.
        #[arg(long)]
        timing: bool,
    },
    /// Channel and head analyses.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Greedy decode one prompt through the cache.
    Decode {
        /// Comma-separated prompt token ids.
        #[arg(long, conflicts_with = "task")]
        prompt: Option<String>,
        /// Take the prompt from an eval sample of this task kind.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Comma-separated tokens fed before greedy decoding.
        #[arg(long)]
        forced: Option<String>,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        /// Mask file; the run's learned mask when `--learned`, else full width.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        learned: bool,
    },
    /// Closed-form cache footprint of a mask.
    MemoryReport {
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Write eval samples as JSON lines.
    ExportSamples {
        #[arg(long, default_value = "dense_retrieval")]
        task: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective config.
    ShowConfig,
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Pearson matrix of channel norm ratios across tasks and lengths.
    Staticity,
    /// Retained ratio and norm importance per channel-pair index.
    FreqProfile,
    /// Per-head high-frequency ratio.
    Whf {
        /// Average over this many trailing queries instead of the last one.
        #[arg(long)]
        query_window: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Full,
    Leank,
    LeankStage1,
    StaticNorm,
    DynamicNorm,
    DynamicNormPerHead,
    WhfStreaming,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => EvalMode::Full,
            Mode::Leank => EvalMode::Leank,
            Mode::LeankStage1 => EvalMode::LeankStage1,
            Mode::StaticNorm => EvalMode::StaticNorm,
            Mode::DynamicNorm => EvalMode::DynamicNorm,
            Mode::DynamicNormPerHead => EvalMode::DynamicNormPerHead,
            Mode::WhfStreaming => EvalMode::WhfStreaming,
        }
    }
}

/// One optional flag per config field.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    n_layers: Option<usize>,
    #[arg(long, global = true)]
    n_q_heads: Option<usize>,
    #[arg(long, global = true)]
    n_kv_heads: Option<usize>,
    #[arg(long, global = true)]
    head_dim: Option<usize>,
    #[arg(long, global = true)]
    d_model: Option<usize>,
    #[arg(long, global = true)]
    d_ff: Option<usize>,
    #[arg(long, global = true)]
    vocab: Option<usize>,
    #[arg(long, global = true)]
    rope_base: Option<f64>,
    #[arg(long, global = true)]
    max_pos: Option<usize>,
    #[arg(long, global = true)]
    model_seed: Option<u64>,
    /// Pretraining phases as `steps:min_len:max_len`, comma-separated.
    #[arg(long, global = true)]
    curriculum: Option<String>,
    #[arg(long, global = true)]
    pretrain_lr: Option<f64>,
    #[arg(long, global = true)]
    pretrain_batch: Option<usize>,
    #[arg(long, global = true)]
    pretrain_warmup: Option<usize>,
    #[arg(long, global = true)]
    pretrain_clip: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    lr_stage1: Option<f64>,
    #[arg(long, global = true)]
    lr_stage2: Option<f64>,
    #[arg(long, global = true)]
    steps_stage1: Option<usize>,
    #[arg(long, global = true)]
    steps_stage2: Option<usize>,
    #[arg(long, global = true)]
    train_min_len: Option<usize>,
    #[arg(long, global = true)]
    train_max_len: Option<usize>,
    #[arg(long, global = true)]
    train_batch: Option<usize>,
    #[arg(long, global = true)]
    select_samples: Option<usize>,
    /// Comma-separated task kinds.
    #[arg(long, global = true)]
    train_tasks: Option<String>,
    #[arg(long, global = true)]
    eval_tasks: Option<String>,
    #[arg(long, global = true)]
    values_per_key: Option<usize>,
    #[arg(long, global = true)]
    filler_ratio: Option<f64>,
    #[arg(long, global = true)]
    eval_len: Option<usize>,
    #[arg(long, global = true)]
    eval_samples: Option<usize>,
    #[arg(long, global = true)]
    prune_ratio: Option<f64>,
    #[arg(long, global = true)]
    r: Option<usize>,
    #[arg(long, global = true)]
    sink: Option<usize>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    migrate_every: Option<usize>,
    #[arg(long, global = true)]
    bytes_per_element: Option<usize>,
    #[arg(long, global = true)]
    obs_window: Option<usize>,
    #[arg(long, global = true)]
    q_window: Option<usize>,
    #[arg(long, global = true)]
    static_samples: Option<usize>,
    /// Comma-separated lengths.
    #[arg(long, global = true)]
    staticity_lens: Option<String>,
    #[arg(long, global = true)]
    whf_fraction: Option<f64>,
    /// highest, lowest or random
    #[arg(long, global = true)]
    whf_order: Option<String>,
    #[arg(long, global = true)]
    high_boundary: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, relative to the output root.
    #[arg(long, global = true)]
    output_dir: Option<String>,
}

fn list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(f).collect()
}

fn parse_tasks(s: &str) -> Result<Vec<TaskKind>> {
    list(s, |x| Ok(TaskKind::parse(x)?))
}

fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    list(s, |x| x.parse::<usize>().with_context(|| format!("bad token id {x:?}")))
}

fn parse_curriculum(s: &str) -> Result<Vec<CurriculumStage>> {
    list(s, |x| {
        let parts: Vec<&str> = x.split(':').collect();
        let [steps, lo, hi] = parts[..] else {
            bail!("curriculum stage {x:?} is not steps:min_len:max_len");
        };
        Ok(CurriculumStage {
            steps: steps.parse()?,
            min_len: lo.parse()?,
            max_len: hi.parse()?,
        })
    })
}

macro_rules! apply {
    ($o:expr, $target:expr, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $o.$field.clone() { $target.$field = v; })*
    };
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) -> Result<()> {
        apply!(self, c.model, n_layers, n_q_heads, n_kv_heads, head_dim, d_model, d_ff, vocab, rope_base, max_pos);
        apply!(
            self,
            c,
            model_seed,
            pretrain_lr,
            pretrain_batch,
            pretrain_warmup,
            pretrain_clip,
            lambda,
            lr_stage1,
            lr_stage2,
            steps_stage1,
            steps_stage2,
            train_min_len,
            train_max_len,
            train_batch,
            select_samples,
            values_per_key,
            filler_ratio,
            eval_len,
            eval_samples,
            prune_ratio,
            r,
            sink,
            window,
            migrate_every,
            bytes_per_element,
            obs_window,
            q_window,
            static_samples,
            whf_fraction,
            whf_order,
            high_boundary,
            seed,
            output_dir,
        );
        if let Some(s) = &self.curriculum {
            c.curriculum = parse_curriculum(s)?;
        }
        if let Some(s) = &self.train_tasks {
            c.train_tasks = parse_tasks(s)?;
        }
        if let Some(s) = &self.eval_tasks {
            c.eval_tasks = parse_tasks(s)?;
        }
        if let Some(s) = &self.staticity_lens {
            c.staticity_lens = list(s, |x| Ok(x.parse::<usize>()?))?;
        }
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => io::load_json(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut c)?;
    c.validate()?;
    Ok(c)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_mask(config: &ExperimentConfig, path: &Path) -> Result<BinaryChannelMask> {
    io::load_beta(path, Some(config.dims())).with_context(|| format!("loading mask {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let root = cli.output_root.clone().unwrap_or_else(pipeline::output_root);
    match cli.command {
        Command::Pretrain => print_json(&pipeline::cmd_pretrain(&config, &root)?)?,
        Command::LearnMask => {
            let out = pipeline::cmd_learn_mask(&config, &root)?;
            print_json(&serde_json::json!({
                "keep_ratio": out.beta.keep_ratio,
                "mask_stats": leank::mask::mask_stats(&out.beta),
                "stage1_final_loss": out.stage1.loss.last(),
                "stage2_final_loss": out.stage2.loss.last(),
                "stage2_selected_step": out.stage2.selected_step,
                "run_dir": config.run_dir(&root),
            }))?;
        }
        Command::Eval { mode, mask, timing } => {
            let mask = mask.map(|p| load_mask(&config, &p)).transpose()?;
            let report = pipeline::cmd_eval(&config, &root, mode.into(), mask.as_ref(), timing)?;
            print_json(&serde_json::json!({
                "mode": report.mode,
                "mean_accuracy": report.mean_accuracy,
                "tasks": report.tasks.iter().map(|t| serde_json::json!({
                    "kind": t.kind, "seq_len": t.seq_len, "samples": t.samples, "accuracy": t.accuracy,
                })).collect::<Vec<_>>(),
                "memory": report.memory,
                "report": config.run_dir(&root).join(pipeline::report_file(report.mode)),
            }))?;
        }
        Command::Analyze { what } => match what {
            Analysis::Staticity => print_json(&pipeline::cmd_staticity(&config, &root)?)?,
            Analysis::FreqProfile => {
                let (retained, importance) = pipeline::cmd_freq_profile(&config, &root)?;
                print_json(&serde_json::json!({ "retained": retained, "norm_importance": importance }))?;
            }
            Analysis::Whf { query_window } => {
                let mode = query_window.map_or(QueryMode::Last, QueryMode::Window);
                print_json(&pipeline::cmd_whf(&config, &root, mode)?)?;
            }
        },
        Command::Decode {
            prompt,
            task,
            index,
            forced,
            max_new_tokens,
            mask,
            learned,
        } => {
            let (prompt, default_forced) = match (prompt, task) {
                (Some(p), _) => (parse_tokens(&p)?, Vec::new()),
                (None, Some(t)) => {
                    let s = config.eval_mix(TaskKind::parse(&t)?).sample(index, &config.layout()?)?;
                    (s.ctx_tokens, s.ans_tokens[..1].to_vec())
                }
                (None, None) => bail!("decode needs --prompt or --task"),
            };
            let forced = match forced {
                Some(f) => parse_tokens(&f)?,
                None => default_forced,
            };
            let mask = match (mask, learned) {
                (Some(p), _) => Some(load_mask(&config, &p)?),
                (None, true) => Some(load_mask(&config, &config.run_dir(&root).join(pipeline::BETA_FILE))?),
                (None, false) => None,
            };
            print_json(&pipeline::cmd_decode(&config, &root, mask.as_ref(), &prompt, &forced, max_new_tokens)?)?;
        }
        Command::MemoryReport { mask, seq_len } => {
            let path = mask.unwrap_or_else(|| config.run_dir(&root).join(pipeline::BETA_FILE));
            let beta = load_mask(&config, &path)?;
            let seq = seq_len.unwrap_or(config.eval_len);
            print_json(&memory_report(&beta, config.sink, config.window, seq, config.bytes_per_element))?;
        }
        Command::ExportSamples { task, count, out } => {
            let lines = pipeline::export_samples(&config, TaskKind::parse(&task)?, count)?;
            match out {
                Some(p) => io::atomic_write(&p, lines.as_bytes())?,
                None => print!("{lines}"),
            }
        }
        Command::ShowConfig => print_json(&config)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
