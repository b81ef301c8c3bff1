//! The resolved run configuration and the pipelines behind each subcommand.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use ssformers::backbone::GridSpec;
use ssformers::data::{export_dataset, generate_synthetic_dataset, load_dataset, Dataset, SplitKind, SyntheticSpec};
use ssformers::episodes::{evaluate, EpisodeConfig, EvalReport};
use ssformers::model::{ModelConfig, Variant};
use ssformers::selftest::run_selftest;
use ssformers::training::{
    init_model, load_checkpoint, pretrain_backbone, run_ablation, save_checkpoint, AblationConfig, Checkpoint,
    PretrainConfig, TrainConfig, Trainer,
};
use ssformers::{Error, Result};

use crate::report::{accuracy_line, append_rows, ResultRow};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    Pretrain,
    Train,
    Eval,
    Ablate,
    Semi,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Semi => "semi",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// `{train,val,test}/<class>/*.ppm`, resized to `side`.
    Directory { path: PathBuf, side: usize },
    Synthetic { spec: SyntheticSpec, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Directory { path, side } => load_dataset(path, *side),
            DataSource::Synthetic { spec, seed } => generate_synthetic_dataset(spec, *seed),
        }
    }
}

/// Everything a run depends on. Written as `run_config.json` next to the
/// run's outputs; feeding that file back through `--config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    /// Where the file itself lives, so not stored.
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub data: Option<DataSource>,
    pub model: Option<ModelConfig>,
    pub pretrain: Option<PretrainConfig>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EpisodeConfig>,
    /// Input checkpoint: the backbone source for `train`, the model for
    /// `eval` and `semi`.
    pub checkpoint: Option<PathBuf>,
    /// Continue this training checkpoint instead of starting afresh.
    pub resume: Option<PathBuf>,
    pub split: SplitKind,
    pub variants: Vec<Variant>,
    /// `ablate` only: sweep the full model over the seven study grids.
    pub grid_study: bool,
}

impl RunConfig {
    pub fn new(command: Command, seed: u64) -> Self {
        RunConfig {
            command,
            seed,
            out: None,
            data: None,
            model: None,
            pretrain: None,
            train: None,
            eval: None,
            checkpoint: None,
            resume: None,
            split: SplitKind::Test,
            variants: Vec::new(),
            grid_study: false,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self
            .out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("`{}` needs an output directory", self.command.name())))?;
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        Ok(dir)
    }

    fn required<'a, T>(&self, value: &'a Option<T>, what: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("`{}` run config lacks `{what}`", self.command.name())))
    }

    fn dataset(&self) -> Result<Dataset> {
        self.required(&self.data, "data")?.load()
    }

    fn run_id(&self) -> String {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        format!("{}-s{}-{stamp}", self.command.name(), self.seed)
    }

    fn save(&self) -> Result<()> {
        let dir = self.out_dir()?;
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| io_error(&path, e))
    }
}

fn csv_error(dir: &Path, e: csv::Error) -> Error {
    Error::Config(format!("writing {}: {e}", dir.join(crate::report::RESULTS_FILE).display()))
}

fn result_row(run: &RunConfig, run_id: &str, eval: &EpisodeConfig, variant: String, report: &EvalReport, secs: f64) -> ResultRow {
    ResultRow {
        run_id: run_id.to_string(),
        command: run.command.name().to_string(),
        n_way: eval.n_way,
        m_shot: eval.m_shot,
        b_query: eval.b_query,
        episodes: eval.episode_count,
        variant,
        mean_acc: report.mean,
        ci95: report.ci95,
        wall_seconds: secs,
    }
}

/// Runs the pipeline and returns whether every check held (only `selftest`
/// can report `false`).
pub fn execute(run: &RunConfig) -> Result<bool> {
    match run.command {
        Command::Selftest => selftest(),
        Command::GenData => gen_data(run).map(|_| true),
        Command::Pretrain => pretrain(run).map(|_| true),
        Command::Train => train(run).map(|_| true),
        Command::Eval | Command::Semi => eval(run).map(|_| true),
        Command::Ablate => ablate(run).map(|_| true),
    }
}

fn selftest() -> Result<bool> {
    let mut ok = true;
    for check in run_selftest()? {
        let status = if check.passed() { "ok" } else { "FAILED" };
        println!("{status:>6}  {:<44} error {:.3e} (tolerance {:.0e})", check.name, check.error, check.tolerance);
        ok &= check.passed();
    }
    Ok(ok)
}

fn gen_data(run: &RunConfig) -> Result<()> {
    let dataset = run.dataset()?;
    let dir = run.out_dir()?;
    export_dataset(&dataset, dir)?;
    run.save()?;
    println!("wrote {} images to {}", dataset.image_count(), dir.display());
    Ok(())
}

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

fn pretrain(run: &RunConfig) -> Result<()> {
    let dataset = run.dataset()?;
    let model_config = run.required(&run.model, "model")?.clone();
    let config = run.required(&run.pretrain, "pretrain")?;
    let (backbone, report) = pretrain_backbone(&dataset.train, &model_config.backbone, config, run.seed)?;
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {}: loss {loss:.4}", e + 1);
    }
    println!("train accuracy {:.2}", 100.0 * report.train_accuracy);
    let model = init_model(model_config, run.seed)?.with_backbone(backbone)?;
    let ck = Checkpoint::weights_only(model, &run.to_json());
    let dir = run.out_dir()?;
    save_checkpoint(&dir.join(BACKBONE_FILE), &ck)?;
    run.save()
}

fn train(run: &RunConfig) -> Result<()> {
    let dataset = run.dataset()?;
    let dir = run.out_dir()?.to_path_buf();
    let mut trainer = match &run.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            println!("resuming {} after epoch {}", path.display(), ck.epoch);
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let mut model = init_model(run.required(&run.model, "model")?.clone(), run.seed)?;
            if let Some(path) = &run.checkpoint {
                model = model.with_backbone(load_checkpoint(path)?.model.backbone)?;
            }
            Trainer::new(model, run.required(&run.train, "train")?.clone(), run.seed)?
        }
    };
    run.save()?;
    let json = run.to_json();
    let path = dir.join(MODEL_FILE);
    while trainer.epoch < trainer.config.schedule.epochs {
        let losses = trainer.run_epoch(&dataset.train)?;
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        println!("epoch {}: loss {mean:.4}", trainer.epoch);
        save_checkpoint(&path, &trainer.checkpoint(&json))?;
    }
    save_checkpoint(&path, &trainer.checkpoint(&json))?;
    println!("saved {}", path.display());
    Ok(())
}

/// `eval` and `semi`: the semi-supervised settings live in the episode config.
fn eval(run: &RunConfig) -> Result<()> {
    let path = run.required(&run.checkpoint, "checkpoint")?;
    let model = load_checkpoint(path)?.model;
    let dataset = run.dataset()?;
    let config = run.required(&run.eval, "eval")?;
    let start = Instant::now();
    let report = evaluate(&model, dataset.split(run.split), config, run.seed)?;
    let secs = start.elapsed().as_secs_f64();
    println!("{}", accuracy_line(config.n_way, config.m_shot, &report));
    if let Some(a) = &report.admission {
        println!(
            "admitted patches: in-class {:.2}% ({}/{}), distractor {:.2}% ({}/{})",
            100.0 * a.in_class_rate(),
            a.in_class_admitted,
            a.in_class_total,
            100.0 * a.distractor_rate(),
            a.distractor_admitted,
            a.distractor_total
        );
    }
    let dir = run.out_dir()?;
    let row = result_row(run, &run.run_id(), config, model.config.variant.to_string(), &report, secs);
    append_rows(dir, &[row]).map_err(|e| csv_error(dir, e))?;
    run.save()
}

fn ablate(run: &RunConfig) -> Result<()> {
    let dataset = run.dataset()?;
    let base = AblationConfig {
        model: run.required(&run.model, "model")?.clone(),
        pretrain: run.pretrain.clone(),
        train: run.required(&run.train, "train")?.clone(),
        eval: run.required(&run.eval, "eval")?.clone(),
        seed: run.seed,
    };
    let run_id = run.run_id();
    let heading = format!("{}-way {}-shot", base.eval.n_way, base.eval.m_shot);
    let mut rows = Vec::new();
    if run.grid_study {
        println!("{:<12} {:>4}  {:<18} {:>9}", "grid", "K", heading, "seconds");
        let expansion = base.model.grid.expansion();
        for layout in GridSpec::study_layouts() {
            let mut config = base.clone();
            config.model.grid = GridSpec::parse(layout, expansion)?;
            let row = run_ablation(&dataset, &[Variant::Full], &config)?.remove(0);
            println!(
                "{layout:<12} {:>4}  {:<18} {:>9.1}",
                config.model.grid.patch_count(),
                accuracy_line(base.eval.n_way, base.eval.m_shot, &row.report)
                    .split_once(": ")
                    .map(|(_, v)| v.to_string())
                    .unwrap_or_default(),
                row.seconds
            );
            rows.push(result_row(run, &run_id, &base.eval, format!("full[{layout}]"), &row.report, row.seconds));
        }
    } else {
        println!("{:<16} {:<18} {:>9}", "variant", heading, "seconds");
        for row in run_ablation(&dataset, &run.variants, &base)? {
            let line = accuracy_line(base.eval.n_way, base.eval.m_shot, &row.report);
            let value = line.split_once(": ").map(|(_, v)| v).unwrap_or_default();
            println!("{:<16} {value:<18} {:>9.1}", row.variant.name(), row.seconds);
            rows.push(result_row(run, &run_id, &base.eval, row.variant.to_string(), &row.report, row.seconds));
        }
    }
    let dir = run.out_dir()?;
    append_rows(dir, &rows).map_err(|e| csv_error(dir, e))?;
    run.save()
}
