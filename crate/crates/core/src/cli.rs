//! Command-line front end: dataset generation, training, evaluation and
//! plotting from a TOML run file plus flag overrides.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::HiFlow;
use crate::nn::ParamStore;
use crate::sampler::{trace_to_plot, Sampler};
use crate::tasks::env::CHUNK_BUDGET;
use crate::tasks::{
    generate, initial_states, load_dataset, rollout_parallel, save_dataset, summarize, Dataset, ModelPolicy, Summary,
    TaskKind,
};
use crate::training::{Checkpoint, Trainer};

/// Everything a command needs. The top-level `seed` drives data
/// generation and evaluation and is copied into `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub num_tasks: usize,
    /// Episodes to generate, or rollouts to evaluate.
    pub episodes: usize,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// Evaluate the EMA weights rather than the live ones.
    pub use_ema: bool,
    pub max_chunks: usize,
    /// Replace the schedule by the finest scale alone and multiply the
    /// Euler steps by the original number of scales, keeping the flow
    /// evaluations per chunk equal.
    pub single_scale_baseline: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Reach,
            num_tasks: 1,
            episodes: 200,
            seed: 0,
            dataset: None,
            out: PathBuf::from("runs/default"),
            use_ema: true,
            max_chunks: CHUNK_BUDGET,
            single_scale_baseline: false,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies flag overrides and derived settings, then validates.
    pub fn resolve(mut self, flags: &CommonArgs) -> Result<Self> {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(t) = &flags.task {
            self.task = t.parse()?;
        }
        if let Some(n) = flags.episodes {
            self.episodes = n;
        }
        if let Some(n) = flags.steps {
            self.train.total_steps = n;
        }
        if let Some(o) = &flags.out {
            self.out = o.clone();
        }
        if let Some(b) = flags.use_ema {
            self.use_ema = b;
        }
        if let Some(b) = flags.strict_mask {
            self.model.strict_mask = b;
        }
        if let Some(list) = &flags.scales {
            self.model.scales = crate::multiscale::ScaleSchedule::parse(list, self.model.chunk_len)?.scales().to_vec();
        }
        if self.single_scale_baseline {
            self.train.sample_steps *= self.model.scales.len();
            self.model.scales = vec![self.model.chunk_len];
            self.single_scale_baseline = false;
        }
        self.train.seed = self.seed;
        if self.task == TaskKind::Reach {
            self.num_tasks = 1;
        }
        self.model.num_tasks = self.num_tasks;
        self.model.action_dim = 2;
        self.model.obs_dim = 4;
        self.model.proprio_dim = 2;
        self.model.validate()?;
        self.train.validate()?;
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML run file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scale schedule, e.g. 1,2,4,8.
    #[arg(long, global = true)]
    pub scales: Option<String>,
    #[arg(long, global = true)]
    pub task: Option<String>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    /// Total training steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "BOOL")]
    pub use_ema: Option<bool>,
    #[arg(long, global = true, value_name = "BOOL")]
    pub strict_mask: Option<bool>,
}

#[derive(Parser, Debug)]
#[command(name = "hiflow", version, about = "Coarse-to-fine flow-matching action policies")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a demonstration dataset.
    Gen,
    /// Train a policy on a dataset.
    Train {
        /// Dataset file; defaults to `<out>/dataset.hfds`, generated if absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint up to the configured total steps.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out one or more checkpoints and print a success table.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Sample one chunk and draw every scale's trajectory.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the evaluation initial state to plot.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Worker threads for evaluation: `HIFLOW_THREADS` if set, else the
/// available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("HIFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn cmd_gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<PathBuf> {
    create_dir(&cfg.out)?;
    let episodes = generate(cfg.task, cfg.episodes, cfg.num_tasks, cfg.seed, cfg.model.chunk_len)?;
    let ds = Dataset::new(cfg.model.chunk_len, cfg.num_tasks, episodes);
    let path = cfg.dataset.clone().unwrap_or_else(|| cfg.out.join("dataset.hfds"));
    save_dataset(&ds, &path)?;
    write(&cfg.out.join("gen.toml"), cfg.to_toml())?;
    let chunks: usize = ds.episodes.iter().map(|e| e.chunks.len()).sum();
    writeln!(out, "generated {} episodes ({chunks} chunks) of task {} -> {}", ds.episodes.len(), cfg.task, path.display())
        .map_err(|e| Error::io("writing summary", e))?;
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>, resume: Option<&Path>, out: &mut dyn Write) -> Result<PathBuf> {
    create_dir(&cfg.out)?;
    let path = dataset.map(Path::to_path_buf).or_else(|| cfg.dataset.clone()).unwrap_or_else(|| cfg.out.join("dataset.hfds"));
    if !path.exists() && dataset.is_none() && cfg.dataset.is_none() {
        let sub = RunConfig { dataset: Some(path.clone()), ..cfg.clone() };
        cmd_gen(&sub, out)?;
    }
    let ds = load_dataset(&path)?;
    if ds.header.chunk_len != cfg.model.chunk_len || ds.header.num_tasks != cfg.num_tasks {
        return Err(Error::Schema(format!(
            "dataset has chunk length {} and {} tasks, run expects {} and {}",
            ds.header.chunk_len, ds.header.num_tasks, cfg.model.chunk_len, cfg.num_tasks
        )));
    }
    let examples = ds.examples();
    let mut trainer = match resume {
        Some(p) => {
            let mut ckpt = Checkpoint::load(p)?;
            if ckpt.settings.model != cfg.model {
                return Err(Error::Config(format!("{} was trained with a different model configuration", p.display())));
            }
            // resuming may extend the run; other training settings stay as recorded
            ckpt.settings.train.total_steps = cfg.train.total_steps;
            Trainer::resume(ckpt, &examples)?
        }
        None => Trainer::new(&cfg.model, &cfg.train, &examples)?,
    };
    write(&cfg.out.join("train.toml"), cfg.to_toml())?;
    let metrics_path = cfg.out.join("metrics.jsonl");
    let mut metrics = Vec::new();
    let remaining = (cfg.train.total_steps as u64).saturating_sub(trainer.step_count());
    trainer.run(remaining, |rec| {
        log::info!("step {} loss {:.5} lr {:.2e}", rec.step, rec.loss, rec.lr);
        metrics.extend_from_slice(serde_json::to_string(rec).expect("record serializes").as_bytes());
        metrics.push(b'\n');
        Ok(())
    })?;
    if resume.is_some() && metrics_path.exists() {
        let mut previous = std::fs::read(&metrics_path).map_err(|e| Error::io("reading metrics", e))?;
        previous.extend_from_slice(&metrics);
        metrics = previous;
    }
    write(&metrics_path, &metrics)?;
    let ckpt_path = cfg.out.join("checkpoint.hfck");
    trainer.checkpoint().save(&ckpt_path)?;
    writeln!(out, "trained {} steps on {} examples -> {}", trainer.step_count(), examples.len(), ckpt_path.display())
        .map_err(|e| Error::io("writing summary", e))?;
    Ok(ckpt_path)
}

/// Model, the parameters selected for evaluation, and the checkpoint.
pub fn load_policy(path: &Path, use_ema: bool) -> Result<(HiFlow, ParamStore, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, init) = HiFlow::new(&ckpt.settings.model, ckpt.settings.train.seed)?;
    if !init.same_layout(&ckpt.live) {
        return Err(Error::Schema(format!("{} does not match its recorded model", path.display())));
    }
    let params = if use_ema { ckpt.ema.clone() } else { ckpt.live.clone() };
    Ok((model, params, ckpt))
}

pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path, threads: usize) -> Result<(Summary, Vec<crate::tasks::Outcome>)> {
    let (model, params, ckpt) = load_policy(path, cfg.use_ema)?;
    let envs = initial_states(cfg.task, cfg.episodes, cfg.seed, ckpt.settings.model.num_tasks);
    let sampler = Sampler::new(&model, &params, &ckpt.normalizer, ckpt.settings.train.sample_steps);
    let outcomes = rollout_parallel(envs, cfg.max_chunks, threads, |_, _| ModelPolicy::new(sampler, cfg.seed))?;
    Ok((summarize(&outcomes), outcomes))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], out: &mut dyn Write) -> Result<Vec<Summary>> {
    create_dir(&cfg.out)?;
    write(&cfg.out.join("eval.toml"), cfg.to_toml())?;
    let threads = eval_threads();
    let mut records = String::new();
    let mut summaries = Vec::new();
    let io = |e| Error::io("writing table", e);
    writeln!(out, "{:<40} {:>8} {:>8} {:>11} {:>10}", "checkpoint", "rollouts", "success", "mean_chunks", "collisions").map_err(io)?;
    for path in checkpoints {
        let (s, outcomes) = evaluate_checkpoint(cfg, path, threads)?;
        writeln!(
            out,
            "{:<40} {:>8} {:>8.3} {:>11.2} {:>10}",
            path.display(),
            s.rollouts,
            s.success_rate,
            s.mean_chunks,
            s.collisions
        )
        .map_err(io)?;
        for o in &outcomes {
            let rec = serde_json::json!({ "checkpoint": path, "outcome": o });
            records.push_str(&rec.to_string());
            records.push('\n');
        }
        summaries.push(s);
    }
    write(&cfg.out.join("eval.jsonl"), records)?;
    Ok(summaries)
}

pub fn cmd_plot(cfg: &RunConfig, checkpoint: &Path, index: usize, out: &mut dyn Write) -> Result<PathBuf> {
    create_dir(&cfg.out)?;
    let (model, params, ckpt) = load_policy(checkpoint, cfg.use_ema)?;
    let env = initial_states(cfg.task, index + 1, cfg.seed, ckpt.settings.model.num_tasks).remove(index);
    let sampler = Sampler::new(&model, &params, &ckpt.normalizer, ckpt.settings.train.sample_steps);
    let trace = sampler.sample_chunk(&env.observe(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let svg = cfg.out.join("plot.svg");
    let panels = trace_to_plot(&trace, &svg)?;
    write(&cfg.out.join("trace.json"), trace.to_json())?;
    write(&cfg.out.join("plot.toml"), cfg.to_toml())?;
    writeln!(out, "plotted {} scale panels -> {}", panels.len(), svg.display()).map_err(|e| Error::io("writing summary", e))?;
    Ok(svg)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let base = match &cli.common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(&cli.common)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, out).map(drop),
        Command::Train { dataset, resume } => cmd_train(&cfg, dataset.as_deref(), resume.as_deref(), out).map(drop),
        Command::Eval { checkpoints } => cmd_eval(&cfg, checkpoints, out).map(drop),
        Command::Plot { checkpoint, index } => cmd_plot(&cfg, checkpoint, *index, out).map(drop),
    }
}
