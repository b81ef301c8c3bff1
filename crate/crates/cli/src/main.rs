//! `ssformers`: synthetic data, pre-training, meta-training, evaluation and
//! ablations from the command line.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when the pipeline
//! fails (including a failed `selftest`).

mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssformers::backbone::GridSpec;
use ssformers::bench::Benchmark;
use ssformers::data::{SplitKind, SyntheticSpec};
use ssformers::episodes::EpisodeConfig;
use ssformers::model::{HeadInit, ModelConfig, Variant};
use ssformers::sstl::MaskMode;
use ssformers::training::{OptimizerKind, PretrainConfig, Schedule, TrainConfig};

use run::{Command, DataSource, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "ssformers", version, about = "Few-shot image classification by sparse patch attention")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic glyph benchmark as PPM files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Pre-train the backbone as a plain classifier over the training classes.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        no_augment: bool,
    },
    /// Meta-train on episodes from the training split; writes model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        episodes_per_epoch: Option<usize>,
        /// Take the backbone from this (pre-training) checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on sampled episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Meta-train and evaluate several variants under one budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        episodes_per_epoch: Option<usize>,
        /// Comma-separated: full, no_sstl, no_pmm, global_feature.
        #[arg(long, value_delimiter = ',', default_value = "full,no_sstl,no_pmm,global_feature")]
        variants: Vec<String>,
        /// Run the full model over the seven grid layouts instead.
        #[arg(long)]
        grid_study: bool,
        /// Pre-train a shared backbone for this many epochs first (0 skips).
        #[arg(long, default_value_t = 0)]
        pretrain_epochs: usize,
    },
    /// Evaluate with supports extended from an unlabeled pool.
    Semi {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        unlabeled_per_class: usize,
        /// Add images of classes outside the episode to the pool.
        #[arg(long)]
        distractors: bool,
        #[arg(long, default_value_t = 3)]
        distractor_classes: usize,
    },
    /// Gradient checks and oracle comparisons.
    Selftest,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replay a resolved `run_config.json`; other flags except --out are
    /// ignored and outputs default to the file's directory.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON file with synthetic dataset settings.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    train_classes: Option<usize>,
    #[arg(long)]
    val_classes: Option<usize>,
    #[arg(long)]
    test_classes: Option<usize>,
    #[arg(long)]
    images_per_class: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root with train/val/test class folders; synthetic data
    /// (seeded by --seed) when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Image side after loading.
    #[arg(long, default_value_t = 32)]
    image_side: usize,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Patch grids, e.g. "2x2+3x3".
    #[arg(long)]
    grid: Option<String>,
    /// Patch area growth factor around each cell centre.
    #[arg(long)]
    expansion: Option<f64>,
    #[arg(long, value_enum)]
    mask_mode: Option<MaskModeArg>,
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, value_enum)]
    head_init: Option<HeadInitArg>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    attention_dropout: Option<f64>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    m_shot: Option<usize>,
    #[arg(long)]
    b_query: Option<usize>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskModeArg {
    PreSoftmax,
    HardZero,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadInitArg {
    Random,
    Identity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

type Resolved = Result<RunConfig, String>;

impl SynthArgs {
    fn resolve(&self) -> Result<SyntheticSpec, String> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => Benchmark::desk().data,
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut spec.side, self.side);
        set(&mut spec.train_classes, self.train_classes);
        set(&mut spec.val_classes, self.val_classes);
        set(&mut spec.test_classes, self.test_classes);
        set(&mut spec.images_per_class, self.images_per_class);
        Ok(spec)
    }
}

impl DataArgs {
    fn resolve(&self, seed: u64) -> Result<DataSource, String> {
        Ok(match &self.data {
            Some(path) => DataSource::Directory {
                path: path.clone(),
                side: self.image_side,
            },
            None => DataSource::Synthetic {
                spec: self.synth.resolve()?,
                seed,
            },
        })
    }
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig, String> {
        let mut m = Benchmark::desk().ablation.model;
        let expansion = self.expansion.unwrap_or(m.grid.expansion());
        let grid = self.grid.clone().unwrap_or_else(|| m.grid.to_string());
        m.grid = GridSpec::parse(&grid, expansion).map_err(|e| e.to_string())?;
        if let Some(mode) = self.mask_mode {
            m.mask_mode = match mode {
                MaskModeArg::PreSoftmax => MaskMode::PreSoftmax,
                MaskModeArg::HardZero => MaskMode::HardZero,
            };
        }
        if let Some(init) = self.head_init {
            m.head_init = match init {
                HeadInitArg::Random => HeadInit::Random,
                HeadInitArg::Identity => HeadInit::Identity,
            };
        }
        if self.head_dim.is_some() {
            m.head_dim = self.head_dim;
            if self.head_init.is_none() {
                m.head_init = HeadInit::Random;
            }
        }
        if let Some(d) = self.attention_dropout {
            m.attention_dropout = d;
        }
        m.variant = Variant::parse(&self.variant).map_err(|e| e.to_string())?;
        m.validate().map_err(|e| e.to_string())?;
        Ok(m)
    }
}

impl ScheduleArgs {
    fn apply(&self, mut s: Schedule) -> Schedule {
        if let Some(e) = self.epochs {
            s.epochs = e;
        }
        if let Some(lr) = self.lr {
            s.learning_rate = lr;
        }
        if let Some(o) = self.optimizer {
            s.optimizer = match o {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            };
        }
        s
    }
}

impl EpisodeArgs {
    fn apply(&self, mut e: EpisodeConfig) -> EpisodeConfig {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut e.n_way, self.n_way);
        set(&mut e.m_shot, self.m_shot);
        set(&mut e.b_query, self.b_query);
        set(&mut e.episode_count, self.episodes);
        e
    }
}

fn split_kind(s: SplitArg) -> SplitKind {
    match s {
        SplitArg::Train => SplitKind::Train,
        SplitArg::Val => SplitKind::Val,
        SplitArg::Test => SplitKind::Test,
    }
}

/// Meta-training settings of the desk benchmark with overrides. Only the
/// way and shot carry over from the evaluation flags; training keeps its
/// own query count.
fn train_config(schedule: &ScheduleArgs, episode: &EpisodeArgs, per_epoch: Option<usize>) -> TrainConfig {
    let mut t = Benchmark::desk().ablation.train;
    t.schedule = schedule.apply(t.schedule);
    if let Some(n) = per_epoch {
        t.episodes_per_epoch = n;
    }
    t.episode.n_way = episode.n_way.unwrap_or(t.episode.n_way);
    t.episode.m_shot = episode.m_shot.unwrap_or(t.episode.m_shot);
    t
}

/// The data source a checkpoint was trained on, if its run config says.
fn checkpoint_data(path: &Path) -> Option<DataSource> {
    let ck = ssformers::training::load_checkpoint(path).ok()?;
    serde_json::from_str::<RunConfig>(&ck.run_config_json).ok()?.data
}

impl Cmd {
    fn common(&self) -> Option<(&Common, Command)> {
        Some(match self {
            Cmd::Selftest => return None,
            Cmd::GenData { common, .. } => (common, Command::GenData),
            Cmd::Pretrain { common, .. } => (common, Command::Pretrain),
            Cmd::Train { common, .. } => (common, Command::Train),
            Cmd::Eval { common, .. } => (common, Command::Eval),
            Cmd::Ablate { common, .. } => (common, Command::Ablate),
            Cmd::Semi { common, .. } => (common, Command::Semi),
        })
    }
}

/// Loads a stored run; its outputs go beside the file unless `--out` says otherwise.
fn replay(path: &Path, command: Command, out: Option<PathBuf>) -> Resolved {
    let mut run = RunConfig::from_file(path).map_err(|e| e.to_string())?;
    if run.command != command {
        return Err(format!(
            "{} holds a `{}` run, not `{}`",
            path.display(),
            run.command.name(),
            command.name()
        ));
    }
    run.out = out.or_else(|| path.parent().map(Path::to_path_buf));
    Ok(run)
}

fn resolve(cmd: Cmd) -> Resolved {
    if let Some((Common { config: Some(path), out, .. }, command)) = cmd.common() {
        return replay(path, command, out.clone());
    }
    let (common, mut run) = match cmd {
        Cmd::Selftest => return Ok(RunConfig::new(Command::Selftest, 0)),
        Cmd::GenData { common, synth } => {
            let mut run = RunConfig::new(Command::GenData, common.seed);
            run.data = Some(DataSource::Synthetic {
                spec: synth.resolve()?,
                seed: common.seed,
            });
            (common, run)
        }
        Cmd::Pretrain {
            common,
            data,
            model,
            schedule,
            batch_size,
            no_augment,
        } => {
            let mut run = RunConfig::new(Command::Pretrain, common.seed);
            run.data = Some(data.resolve(common.seed)?);
            run.model = Some(model.resolve()?);
            let base = PretrainConfig::default();
            run.pretrain = Some(PretrainConfig {
                schedule: schedule.apply(base.schedule),
                batch_size,
                augment: !no_augment,
            });
            (common, run)
        }
        Cmd::Train {
            common,
            data,
            model,
            schedule,
            episode,
            episodes_per_epoch,
            init,
            resume,
        } => {
            let mut run = RunConfig::new(Command::Train, common.seed);
            run.data = Some(data.resolve(common.seed)?);
            run.model = Some(model.resolve()?);
            let mut train = train_config(&schedule, &episode, episodes_per_epoch);
            if let Some(b) = episode.b_query {
                train.episode.b_query = b;
            }
            run.train = Some(train);
            run.checkpoint = init;
            run.resume = resume;
            (common, run)
        }
        Cmd::Eval {
            common,
            data,
            episode,
            checkpoint,
            split,
        } => {
            let mut run = RunConfig::new(Command::Eval, common.seed);
            let checkpoint = checkpoint.ok_or("eval needs --checkpoint")?;
            run.data = match (&data.data, checkpoint_data(&checkpoint)) {
                (None, Some(source)) => Some(source),
                _ => Some(data.resolve(common.seed)?),
            };
            run.eval = Some(episode.apply(EpisodeConfig::default()));
            run.checkpoint = Some(checkpoint);
            run.split = split_kind(split);
            (common, run)
        }
        Cmd::Semi {
            common,
            data,
            episode,
            checkpoint,
            unlabeled_per_class,
            distractors,
            distractor_classes,
        } => {
            let mut run = RunConfig::new(Command::Semi, common.seed);
            let checkpoint = checkpoint.ok_or("semi needs --checkpoint")?;
            run.data = match (&data.data, checkpoint_data(&checkpoint)) {
                (None, Some(source)) => Some(source),
                _ => Some(data.resolve(common.seed)?),
            };
            run.eval = Some(EpisodeConfig {
                semi_supervised: true,
                unlabeled_per_class,
                distractors,
                distractor_classes,
                ..episode.apply(EpisodeConfig::default())
            });
            run.checkpoint = Some(checkpoint);
            (common, run)
        }
        Cmd::Ablate {
            common,
            data,
            model,
            schedule,
            episode,
            episodes_per_epoch,
            variants,
            grid_study,
            pretrain_epochs,
        } => {
            let mut run = RunConfig::new(Command::Ablate, common.seed);
            run.data = Some(data.resolve(common.seed)?);
            run.model = Some(model.resolve()?);
            run.train = Some(train_config(&schedule, &episode, episodes_per_epoch));
            run.eval = Some(episode.apply(EpisodeConfig::default()));
            if pretrain_epochs > 0 {
                let mut p = PretrainConfig::default();
                p.schedule.epochs = pretrain_epochs;
                run.pretrain = Some(p);
            }
            run.variants = variants
                .iter()
                .map(|v| Variant::parse(v.trim()).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            run.grid_study = grid_study;
            (common, run)
        }
    };
    run.out = common.out;
    Ok(run)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = match resolve(cli.command) {
        Ok(run) => run,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(1);
        }
    };
    match run::execute(&run) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
