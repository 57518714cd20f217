//! Command-line front end: run configs, artifact files and the `gen-data`,
//! `train`, `eval`, `gradcheck` and `ablate` subcommands.

pub mod gradcheck;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate, load_dataset, save_embeddings, save_samples, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{closed_set_accuracy, default_grid, evaluate, select_validation_threshold, Confidence, EvalOptions, MetricReport};
use crate::mathcore::Rng;
use crate::meta::{Ablation, MetaMode, MetricPoint, TrainConfig, Trainer, TrainerState};
use crate::model::{ModelConfig, ModelParams};

pub const PRESETS: [&str; 3] = ["desk", "tiny", "paper_s1"];

const DATA_FORMAT: &str = "ltds-data";
const CHECKPOINT_FORMAT: &str = "ltds-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Fixed rejection threshold; chosen by validation H when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub confidence: Confidence,
    #[serde(default)]
    pub pooled_acc: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            confidence: Confidence::MaxProb,
            pooled_acc: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub rows: Vec<String>,
    /// Runs per row, with root seeds `seed, seed+1, …`.
    pub seeds: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            rows: ["a", "b", "i", "j"].map(String::from).to_vec(),
            seeds: 5,
        }
    }
}

/// Everything one invocation needs. The `seed` fields of `data` and `train`
/// are derived from the root `seed` by [`RunConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub io: IoConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

/// Independent 64-bit seed for a named subsystem.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    Rng::new(root).fork_named(label).next_u64()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    })
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        d_x: 16,
        hidden: vec![32],
        d_v: 16,
        d_s: 12,
        classes: 20,
        use_batch_standardization: true,
    }
}

impl RunConfig {
    /// Desk benchmark used by the ablation criterion.
    pub fn desk() -> Self {
        let mut train = TrainConfig::paper_s1();
        train.steps_per_epoch = 30;
        train.batch_size = 16;
        train.ap.lambda = 0.5;
        Self {
            seed: 0,
            data: SyntheticConfig::desk(),
            model: desk_model(),
            train,
            eval: EvalConfig::default(),
            io: IoConfig::default(),
            ablate: AblateConfig::default(),
        }
    }

    /// A few seconds end to end.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.data.n_max = 60;
        c.data.val_per_class = 5;
        c.data.val_open_per_class = 5;
        c.data.test_per_class = 10;
        c.model.hidden = vec![16];
        c.model.d_v = 8;
        c.train.t_max = 10;
        c.train.t_sigma = 4;
        c.train.steps_per_epoch = 2;
        c.train.batch_size = 8;
        c.ablate.seeds = 2;
        c
    }

    /// The reference hyperparameters on the desk benchmark.
    pub fn paper_s1() -> Self {
        let mut train = TrainConfig::paper_s1();
        train.steps_per_epoch = 30;
        Self {
            train,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            "paper_s1" => Some(Self::paper_s1()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Copy with the subsystem seeds derived from the root seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.seed = derive_seed(self.seed, "data");
        c.train.seed = derive_seed(self.seed, "train");
        c
    }

    /// Cross-field checks, run before any work.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        let (d, m) = (&self.data, &self.model);
        for (field, got, want) in [("d_x", m.d_x, d.d_x), ("d_s", m.d_s, d.d_s), ("classes", m.classes, d.classes)] {
            if got != want {
                return Err(Error::Config(format!("model.{field} is {got} but data.{field} is {want}")));
            }
        }
        let n = ModelParams::zeros(m)?.num_params();
        self.train.validate(d.train_domains, d.classes, n)?;
        if let Some(t) = self.eval.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("eval.threshold must lie in [0, 1], got {t}")));
            }
        }
        for r in &self.ablate.rows {
            Ablation::row(r)?;
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablate.seeds must be >= 1".into()));
        }
        Ok(())
    }

    /// Identity of the generated dataset.
    pub fn data_hash(&self) -> String {
        let r = self.resolved();
        sha256_hex(serde_json::to_string(&r.data).expect("serializable").as_bytes())
    }

    fn eval_options(&self, params: &ModelParams, dataset: &Dataset, threshold: Option<f64>) -> Result<EvalOptions> {
        let threshold = match threshold.or(self.eval.threshold) {
            Some(t) => t,
            None => select_validation_threshold(params, dataset, &default_grid(), self.eval.confidence)?,
        };
        Ok(EvalOptions {
            threshold,
            confidence: self.eval.confidence,
            pooled_acc: self.eval.pooled_acc,
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub data_seed: u64,
    /// sha256 of the resolved data config.
    pub config_hash: String,
    /// sha256 of each written file.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub data_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: not a version {FORMAT_VERSION} checkpoint",
                path.display()
            )));
        }
        Ok(ck)
    }

    fn check(&self, cfg: &RunConfig) -> Result<()> {
        if self.data_hash != cfg.data_hash() {
            return Err(Error::Config("checkpoint was trained on a different dataset (config hash mismatch)".into()));
        }
        if self.model != cfg.model {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        Ok(())
    }
}

/// Writes `samples.csv`, `embeddings.csv` and `manifest.json` into `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<DataManifest> {
    cfg.validate()?;
    let r = cfg.resolved();
    let ds = generate(&r.data)?;
    create_dir(dir)?;
    let mut files = BTreeMap::new();
    for (name, result) in [
        ("samples.csv", save_samples(&ds, &dir.join("samples.csv"))),
        ("embeddings.csv", save_embeddings(ds.semantic(), &dir.join("embeddings.csv"))),
    ] {
        result?;
        files.insert(name.to_string(), file_hash(&dir.join(name))?);
    }
    let manifest = DataManifest {
        format: DATA_FORMAT.into(),
        version: FORMAT_VERSION,
        seed: cfg.seed,
        data_seed: r.data.seed,
        config_hash: cfg.data_hash(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads the dataset in `dir`, checking that it was generated from `cfg`.
pub fn load_checked_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::Config(format!("no dataset in {}; run gen-data first", dir.display())));
    }
    let manifest: DataManifest = read_json(&mpath)?;
    if manifest.format != DATA_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Config(format!("{}: unsupported dataset format", mpath.display())));
    }
    if manifest.config_hash != cfg.data_hash() {
        return Err(Error::Config(format!(
            "dataset in {} was generated from a different config (hash mismatch)",
            dir.display()
        )));
    }
    load_dataset(&dir.join("samples.csv"), &dir.join("embeddings.csv"), cfg.data.classes, cfg.data.d_s)
}

/// Per-invocation summary of `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_step: usize,
    pub history: Vec<MetricPoint>,
}

/// Runs `train` on the dataset in `data_dir`, writing artifacts to `out`.
/// With `resume`, continues from a checkpoint and appends to `steps.jsonl`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: Option<&Path>, max_steps: Option<usize>) -> Result<TrainSummary> {
    cfg.validate()?;
    let r = cfg.resolved();
    let ds = load_checked_dataset(cfg, data_dir)?;
    let mut trainer = Trainer::new(&ds, &r.model, &r.train)?;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        ck.check(cfg)?;
        if ck.train != r.train {
            return Err(Error::Config("checkpoint training config differs from the run config".into()));
        }
        trainer.restore(ck.state)?;
    }
    create_dir(out)?;
    let steps_path = out.join("steps.jsonl");
    let mut steps = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&steps_path)
        .map_err(|e| Error::io(&steps_path, e))?;
    let total = r.train.total_steps();
    let stop = max_steps.map_or(total, |m| m.min(total));
    let checkpoint = |trainer: &Trainer, path: &Path| -> Result<()> {
        write_json(
            path,
            &Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                version: FORMAT_VERSION,
                data_hash: cfg.data_hash(),
                model: r.model.clone(),
                train: r.train.clone(),
                state: trainer.state(),
            },
        )
    };
    let val = |trainer: &Trainer| -> Result<MetricPoint> {
        Ok(MetricPoint {
            step: trainer.step_index(),
            val_acc: closed_set_accuracy(trainer.params(), &ds, Split::Val)?,
        })
    };
    let mut history = Vec::new();
    let start = trainer.step_index();
    while trainer.step_index() < stop {
        let report = trainer.step()?;
        writeln!(steps, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io(&steps_path, e))?;
        let s = trainer.step_index();
        if cfg.io.checkpoint_every > 0 && s % cfg.io.checkpoint_every == 0 && s < stop {
            checkpoint(&trainer, &out.join(format!("checkpoint_step{s}.json")))?;
        }
        if r.train.eval_every > 0 && s % r.train.eval_every == 0 && s < stop {
            history.push(val(&trainer)?);
        }
    }
    history.push(val(&trainer)?);
    checkpoint(&trainer, &out.join("checkpoint.json"))?;
    let summary = TrainSummary {
        steps_run: trainer.step_index() - start,
        final_step: trainer.step_index(),
        history,
    };
    write_json(&out.join("history.json"), &summary)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(summary)
}

/// Metrics of a checkpoint on the held-out domain of the dataset in `data_dir`.
pub fn eval_checkpoint(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, threshold: Option<f64>) -> Result<MetricReport> {
    cfg.validate()?;
    let ds = load_checked_dataset(cfg, data_dir)?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.check(cfg)?;
    let params = &ck.state.params;
    let opts = cfg.eval_options(params, &ds, threshold)?;
    evaluate(params, &ds, ds.domains() - 1, &opts)
}

/// One ablation row, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub ablation: Ablation,
    pub seeds: u64,
    pub acc_u: f64,
    pub acc: f64,
    pub h: f64,
    pub acc_u_sd: f64,
    pub acc_sd: f64,
    pub h_sd: f64,
    pub runs: Vec<MetricReport>,
}

/// Generates the dataset, trains row `row` and evaluates, all in memory,
/// from root seed `seed`.
pub fn run_single(cfg: &RunConfig, row: &str, seed: u64) -> Result<MetricReport> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.train.ablation = Ablation::row(row)?;
    c.validate()?;
    let r = c.resolved();
    let ds = generate(&r.data)?;
    let out = crate::meta::run(&ds, &r.model, &r.train)?;
    let opts = c.eval_options(&out.params, &ds, None)?;
    evaluate(&out.params, &ds, ds.domains() - 1, &opts)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Every row over seeds `cfg.seed .. cfg.seed + seeds`; runs fan out over
/// worker threads and are collected in a fixed order.
pub fn run_ablation(cfg: &RunConfig, rows: &[String], seeds: u64) -> Result<Vec<AblationRow>> {
    if rows.is_empty() || seeds == 0 {
        return Err(Error::Config("ablation needs at least one row and one seed".into()));
    }
    let ablations = rows.iter().map(|r| Ablation::row(r)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|i| (0..seeds).map(move |s| (i, s))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(i, s)| run_single(cfg, &rows[i], cfg.seed + s))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows
        .iter()
        .zip(ablations)
        .enumerate()
        .map(|(i, (row, ablation))| {
            let runs: Vec<MetricReport> = reports[i * seeds as usize..(i + 1) * seeds as usize].to_vec();
            let (acc_u, acc_u_sd) = mean_sd(&runs.iter().map(|r| r.acc_u).collect::<Vec<_>>());
            let (acc, acc_sd) = mean_sd(&runs.iter().map(|r| r.acc).collect::<Vec<_>>());
            let (h, h_sd) = mean_sd(&runs.iter().map(|r| r.h).collect::<Vec<_>>());
            AblationRow {
                row: row.trim_start_matches("row_").to_string(),
                ablation,
                seeds,
                acc_u,
                acc,
                h,
                acc_u_sd,
                acc_sd,
                h_sd,
                runs,
            }
        })
        .collect())
}

/// Table with one line per row and the component checkmarks as 0/1 columns.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("row,classifier,z2s,s2s,s2z,aug,meta,single_prototype,unweighted_blend,seeds,acc_u,acc,h,acc_u_sd,acc_sd,h_sd\n");
    for r in rows {
        let a = &r.ablation;
        let b = |v: bool| u8::from(v);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.row,
            match a.classifier {
                crate::meta::Classifier::Ce => "ce",
                crate::meta::Classifier::Dc => "dc",
            },
            b(a.use_z2s),
            b(a.use_s2s),
            b(a.use_s2z),
            b(a.use_aug),
            b(a.use_meta),
            b(a.single_prototype),
            b(a.unweighted_blend),
            r.seeds,
            r.acc_u,
            r.acc,
            r.h,
            r.acc_u_sd,
            r.acc_sd,
            r.h_sd
        )
        .expect("string write");
    }
    out
}

#[derive(Parser, Debug)]
#[command(name = "ltds", version, about = "Long-tailed classification under domain shift at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark
    GenData(Common),
    /// Train one configuration
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out domain
    Eval(EvalArgs),
    /// Check analytic loss gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Run ablation rows over several seeds
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Config JSON file or preset name (desk, tiny, paper_s1)
    #[arg(long, default_value = "desk")]
    config: String,
    /// Root seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ablation row a..l (also accepts row_a..row_l)
    #[arg(long)]
    ablation: Option<String>,
    /// Meta-test gradient: first_order or fd_exact
    #[arg(long, value_parser = parse_meta_mode)]
    meta_mode: Option<MetaMode>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many total steps are done
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fixed rejection threshold instead of validation selection
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Random points per loss
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Negate the analytic gradient of this loss
    #[arg(long, hide = true)]
    inject_sign_flip: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated rows, e.g. a,b,i,j
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<String>>,
    /// Seeds per row
    #[arg(long)]
    seeds: Option<u64>,
}

fn parse_meta_mode(s: &str) -> std::result::Result<MetaMode, String> {
    match s {
        "first_order" => Ok(MetaMode::FirstOrder),
        "fd_exact" => Ok(MetaMode::FdExact),
        _ => Err(format!("expected first_order or fd_exact, got {s:?}")),
    }
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

fn criterion(message: String) -> CliError {
    CliError { code: 1, message }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = Path::new(&common.config);
    let mut cfg = match RunConfig::preset(&common.config) {
        Some(c) if !path.exists() => c,
        _ => RunConfig::load(path)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let dir = c.out.unwrap_or_else(|| cfg.io.data_dir.clone());
            let m = gen_data(&cfg, &dir)?;
            println!("wrote {} (config hash {})", dir.display(), m.config_hash);
        }
        Command::Train(a) => {
            let mut cfg = load_config(&a.common)?;
            if let Some(row) = &a.ablation {
                cfg.train.ablation = Ablation::row(row)?;
            }
            if let Some(m) = a.meta_mode {
                cfg.train.meta_mode = m;
            }
            let data = a.data.unwrap_or_else(|| cfg.io.data_dir.clone());
            let out = a.common.out.unwrap_or_else(|| cfg.io.out_dir.clone());
            let s = train(&cfg, &data, &out, a.resume.as_deref(), a.max_steps)?;
            let last = s.history.last().map_or(0.0, |p| p.val_acc);
            println!(
                "ran {} steps (now at {}); validation accuracy {last:.2}%; artifacts in {}",
                s.steps_run,
                s.final_step,
                out.display()
            );
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.common)?;
            let data = a.data.unwrap_or_else(|| cfg.io.data_dir.clone());
            let report = eval_checkpoint(&cfg, &data, &a.checkpoint, a.threshold)?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            if let Some(out) = &a.common.out {
                create_dir(out)?;
                write_file(&out.join("metrics.json"), &format!("{text}\n"))?;
            }
            println!("{text}");
        }
        Command::Gradcheck(a) => {
            let cfg = load_config(&a.common)?;
            let rows = gradcheck::run_suite(a.points, a.tol, cfg.seed, a.inject_sign_flip.as_deref())?;
            println!("{:<6} {:>6} {:>14} {:>6}  result", "loss", "points", "max_rel_err", "worst");
            for r in &rows {
                println!(
                    "{:<6} {:>6} {:>14.3e} {:>6}  {}",
                    r.loss,
                    r.points,
                    r.max_rel_err,
                    r.worst_point,
                    if r.pass { "pass" } else { "FAIL" }
                );
            }
            if let Some(out) = &a.common.out {
                create_dir(out)?;
                write_json(&out.join("gradcheck.json"), &rows)?;
            }
            let worst = rows
                .iter()
                .filter(|r| !r.pass)
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
            if let Some(w) = worst {
                return Err(criterion(format!(
                    "gradient check failed; worst offender {} with relative error {:.3e} at point {} (tolerance {:.1e})",
                    w.loss, w.max_rel_err, w.worst_point, a.tol
                )));
            }
        }
        Command::Ablate(a) => {
            let cfg = load_config(&a.common)?;
            cfg.validate()?;
            let rows = a.rows.unwrap_or_else(|| cfg.ablate.rows.clone());
            let seeds = a.seeds.unwrap_or(cfg.ablate.seeds);
            let table = run_ablation(&cfg, &rows, seeds)?;
            let csv = ablation_csv(&table);
            if let Some(out) = &a.common.out {
                create_dir(out)?;
                write_file(&out.join("ablation.csv"), &csv)?;
                write_json(&out.join("ablation.json"), &table)?;
            }
            print!("{csv}");
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code.clamp(0, 255) as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_none());
    }

    #[test]
    fn checked_in_presets_match() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in PRESETS {
            let file = RunConfig::load(&dir.join(format!("{name}.json"))).unwrap();
            assert_eq!(file, RunConfig::preset(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn cross_field_mismatch_is_named() {
        let mut c = RunConfig::tiny();
        c.model.d_x = 3;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("model.d_x"), "{e}");
    }

    #[test]
    fn derived_seeds_differ_per_subsystem() {
        let r = RunConfig::tiny().resolved();
        assert_ne!(r.data.seed, r.train.seed);
        assert_eq!(r, RunConfig::tiny().resolved());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).code, 2);
        assert_eq!(CliError::from(Error::Input("x".into())).code, 1);
    }
}
