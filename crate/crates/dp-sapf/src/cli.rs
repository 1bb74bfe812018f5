//! File-based command-line interface.
//!
//! Every subcommand reads a JSON configuration (`--config`), honors a
//! `--seed` override, and writes its artifacts under `--out`. Exit
//! codes: 0 success, 2 infeasible privacy target, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::accountant::{
    budget_ratios, calibrate_sigma_d, compose, delta_from_dataset_size, gaussian_rdp, rdp_to_dp,
    sgm_rdp, PrivacySpec, RdpCurve, RenyiOrderGrid, SelectionQueryParams, SgmParams,
};
use crate::checkpoint::{read_checkpoint, write_model, write_model_with_adapters};
use crate::data::{gen_datasets, Datasets, ToySpec};
use crate::denoiser::{DenoiserParams, ModelDims, Sample};
use crate::error::{Error, Result};
use crate::harness::{pretrain_public, run_variant, sweep, SweepAxis, Variant};
use crate::report::{
    run_report_to_json, saliency_to_csv, saliency_to_json, steps_to_csv, sweep_to_csv,
    variants_to_csv,
};
use crate::trainer::{run_selection, train, SelectionMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "dp-sapf",
    about = "Saliency-aware DP fine-tuning pipeline on a toy diffusion model",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed override (wins over the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the public/sensitive toy datasets.
    GenData,
    /// Pretrain the public model on the public split.
    Pretrain,
    /// Run the DP selection query and emit the saliency report.
    Select,
    /// DP fine-tune a public model on the sensitive split.
    Train,
    /// Pure accounting: epsilon, budget ratios, optional calibration.
    Account,
    /// Sweep one hyperparameter axis of the full pipeline.
    Sweep,
    /// Run the variant comparison and emit metrics.csv.
    Report,
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::BadConfig(e.to_string()))
        }
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// On-disk dataset bundle.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    spec: ToySpec,
    seed: u64,
    public: Vec<Sample>,
    sensitive_train: Vec<Sample>,
    sensitive_test: Vec<Sample>,
}

fn load_datasets(path: &Path) -> Result<(ToySpec, Datasets)> {
    let text = fs::read_to_string(path)?;
    let file: DatasetFile =
        serde_json::from_str(&text).map_err(|e| Error::BadConfig(e.to_string()))?;
    Ok((
        file.spec,
        Datasets {
            public: file.public,
            sensitive_train: file.sensitive_train,
            sensitive_test: file.sensitive_test,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    #[serde(flatten)]
    spec: ToySpec,
    seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            spec: ToySpec::default(),
            seed: 0,
        }
    }
}

fn cmd_gen_data(cli: &Cli) -> Result<()> {
    let mut cfg: GenDataConfig = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let data = gen_datasets(&cfg.spec, cfg.seed)?;
    let file = DatasetFile {
        spec: cfg.spec,
        seed: cfg.seed,
        public: data.public,
        sensitive_train: data.sensitive_train,
        sensitive_test: data.sensitive_test,
    };
    let path = write_out(&cli.out, "datasets.json", &serde_json::to_string(&file).unwrap())?;
    println!(
        "{}",
        json!({"written": path, "public": file.public.len(),
               "sensitive_train": file.sensitive_train.len(),
               "sensitive_test": file.sensitive_test.len()})
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct PretrainConfig {
    data: PathBuf,
    steps: usize,
    batch_size: usize,
    lr: f64,
    t_steps: usize,
    seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("out/datasets.json"),
            steps: 1500,
            batch_size: 32,
            lr: 0.05,
            t_steps: 50,
            seed: 0,
        }
    }
}

fn cmd_pretrain(cli: &Cli) -> Result<()> {
    let mut cfg: PretrainConfig = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let (_, data) = load_datasets(&cfg.data)?;
    let params = pretrain_public(
        &data.public,
        ModelDims::default(),
        cfg.t_steps,
        cfg.steps,
        cfg.batch_size,
        cfg.lr,
        cfg.seed,
    )?;
    fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("public_model.ckpt");
    write_model(&path, &params)?;
    println!("{}", json!({"written": path, "steps": cfg.steps}));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SelectConfig {
    model: PathBuf,
    data: PathBuf,
    mode: SelectionMode,
    sigma_s: f64,
    clip_s: f64,
    ratio_c: f64,
    seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("out/public_model.ckpt"),
            data: PathBuf::from("out/datasets.json"),
            mode: SelectionMode::Saliency,
            sigma_s: 5.0,
            clip_s: 1.0,
            ratio_c: 0.30,
            seed: 0,
        }
    }
}

fn cmd_select(cli: &Cli) -> Result<()> {
    let mut cfg: SelectConfig = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let (params, _) = read_checkpoint(&cfg.model)?;
    let (_, data) = load_datasets(&cfg.data)?;
    let train_cfg = TrainConfig {
        sigma_s: cfg.sigma_s,
        clip_s: cfg.clip_s,
        ratio_c: cfg.ratio_c,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let report = run_selection(&params, &data.sensitive_train, &train_cfg, cfg.mode)?;
    write_out(
        &cli.out,
        "saliency.json",
        &serde_json::to_string_pretty(&saliency_to_json(&report)).unwrap(),
    )?;
    let path = write_out(&cli.out, "saliency.csv", &saliency_to_csv(&report))?;
    println!(
        "{}",
        json!({"written": path, "selected": report.selected.iter().map(|i| i.to_string()).collect::<Vec<_>>()})
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainCmdConfig {
    model: PathBuf,
    data: PathBuf,
    mode: SelectionMode,
    #[serde(flatten)]
    train: TrainConfig,
    /// Override the delta rule (default 1 / (N ln N) of the sensitive split).
    delta: Option<f64>,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("out/public_model.ckpt"),
            data: PathBuf::from("out/datasets.json"),
            mode: SelectionMode::Saliency,
            train: TrainConfig::default(),
            delta: None,
        }
    }
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let mut cfg: TrainCmdConfig = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let (params, _) = read_checkpoint(&cfg.model)?;
    let (_, data) = load_datasets(&cfg.data)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.delta = cfg
        .delta
        .unwrap_or_else(|| delta_from_dataset_size(data.sensitive_train.len() as u64));
    // B* = q N by definition unless explicitly set.
    if (train_cfg.b_star - TrainConfig::default().b_star).abs() < f64::EPSILON {
        train_cfg.b_star = train_cfg.q * data.sensitive_train.len() as f64;
    }
    let grid = RenyiOrderGrid::default();
    let outcome = train(&params, &data.sensitive_train, train_cfg.clone(), cfg.mode, &grid)?;

    fs::create_dir_all(&cli.out)?;
    let model_path = cli.out.join("model.ckpt");
    match &outcome.adapters {
        Some(set) => write_model_with_adapters(&model_path, &outcome.params, set)?,
        None => write_model(&model_path, &outcome.params)?,
    }
    write_out(
        &cli.out,
        "report.json",
        &serde_json::to_string_pretty(&run_report_to_json(&train_cfg, &outcome.report)).unwrap(),
    )?;
    write_out(&cli.out, "steps.csv", &steps_to_csv(&outcome.report.steps))?;
    write_out(
        &cli.out,
        "saliency.csv",
        &saliency_to_csv(&outcome.report.selection),
    )?;
    println!(
        "{}",
        json!({"written": model_path, "epsilon": outcome.report.certificate.epsilon,
               "sigma_d": outcome.report.certificate.sigma_d})
    );
    Ok(())
}

/// Accounting request, per the documented JSON schema: `q`, `sigma_d`,
/// `sigma_s`, `t_d`, `n`, `delta` or `delta_rule`, `target_epsilon`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct AccountConfig {
    q: f64,
    sigma_d: Option<f64>,
    sigma_s: f64,
    t_d: u64,
    n: Option<u64>,
    delta: Option<f64>,
    delta_rule: Option<String>,
    target_epsilon: Option<f64>,
}

fn cmd_account(cli: &Cli) -> Result<()> {
    let cfg: AccountConfig = load_config(&cli.config)?;
    let delta = match (cfg.delta, cfg.delta_rule.as_deref(), cfg.n) {
        (Some(d), _, _) => d,
        (None, Some("n-log-n") | None, Some(n)) => delta_from_dataset_size(n),
        _ => {
            return Err(Error::BadConfig(
                "need `delta`, or `n` with the n-log-n delta rule".into(),
            ))
        }
    };
    let grid = RenyiOrderGrid::default();
    let selection_curve = if cfg.sigma_s > 0.0 {
        gaussian_rdp(cfg.sigma_s, &grid)?
    } else {
        RdpCurve::zero(grid.clone())
    };

    let mut calibrated = None;
    let sigma_d = match (cfg.sigma_d, cfg.target_epsilon) {
        (Some(sd), _) => sd,
        (None, Some(eps)) => {
            let sel = SelectionQueryParams {
                sigma_s: cfg.sigma_s,
                clip_s: 1.0,
                n_star: cfg.n.unwrap_or(1),
            };
            let target = PrivacySpec {
                epsilon: eps,
                delta,
            };
            let sd = calibrate_sigma_d(&target, &sel, cfg.q, cfg.t_d, &grid)?;
            calibrated = Some(sd);
            sd
        }
        (None, None) => {
            return Err(Error::BadConfig(
                "need `sigma_d` or `target_epsilon` to calibrate".into(),
            ))
        }
    };

    let dpsgd_curve = sgm_rdp(
        &SgmParams {
            q: cfg.q,
            sigma: sigma_d,
            steps: cfg.t_d,
        },
        &grid,
    )?;
    let composed = compose(&selection_curve, &dpsgd_curve)?;
    let (epsilon, alpha_star) = rdp_to_dp(&composed, delta)?;
    let split = budget_ratios(&selection_curve, &dpsgd_curve, delta)?;
    let mut out = json!({
        "epsilon": epsilon,
        "alpha_star": alpha_star,
        "gamma_total": split.gamma_total,
        "r_s": split.r_s,
        "r_d": split.r_d,
    });
    if let Some(sd) = calibrated {
        out["calibrated_sigma_d"] = json!(sd);
    }
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepConfig {
    model: PathBuf,
    data: PathBuf,
    axis: SweepAxis,
    values: Vec<f64>,
    seeds: Vec<u64>,
    #[serde(flatten)]
    base: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("out/public_model.ckpt"),
            data: PathBuf::from("out/datasets.json"),
            axis: SweepAxis::Epsilon,
            values: vec![0.2, 1.0, 5.0, 10.0, 15.0, 20.0],
            seeds: vec![0, 1, 2, 3, 4],
            base: TrainConfig::default(),
        }
    }
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let mut cfg: SweepConfig = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let (params, _) = read_checkpoint(&cfg.model)?;
    let (spec, data) = load_datasets(&cfg.data)?;
    let mut base = cfg.base.clone();
    base.delta = delta_from_dataset_size(spec.n_sensitive as u64);
    base.b_star = base.q * data.sensitive_train.len() as f64;
    let grid = RenyiOrderGrid::default();
    let rows = sweep(cfg.axis, &cfg.values, &cfg.seeds, &params, &data, &base, &grid)?;
    let path = write_out(&cli.out, "metrics.csv", &sweep_to_csv(&rows))?;
    println!("{}", json!({"written": path, "rows": rows.len()}));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ReportConfig {
    model: PathBuf,
    data: PathBuf,
    variants: Vec<Variant>,
    seeds: Vec<u64>,
    #[serde(flatten)]
    base: TrainConfig,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("out/public_model.ckpt"),
            data: PathBuf::from("out/datasets.json"),
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            base: TrainConfig::default(),
        }
    }
}

fn cmd_report(cli: &Cli) -> Result<()> {
    let mut cfg: ReportConfig = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let (params, _) = read_checkpoint(&cfg.model)?;
    let (spec, data) = load_datasets(&cfg.data)?;
    let mut base = cfg.base.clone();
    base.delta = delta_from_dataset_size(spec.n_sensitive as u64);
    base.b_star = base.q * data.sensitive_train.len() as f64;
    let grid = RenyiOrderGrid::default();

    let mut results = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let r = run_variant(variant, &params, &data, &base, seed, &grid)?;
            eprintln!(
                "{} seed {}: mmd={:.4} util_acc={:.4}",
                variant.name(),
                seed,
                r.metrics.mmd,
                r.metrics.util_acc
            );
            results.push(r);
        }
    }
    let path = write_out(&cli.out, "metrics.csv", &variants_to_csv(&results))?;
    println!("{}", json!({"written": path, "rows": results.len()}));
    Ok(())
}

/// Entry point used by the thin binary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData => cmd_gen_data(&cli),
        Command::Pretrain => cmd_pretrain(&cli),
        Command::Select => cmd_select(&cli),
        Command::Train => cmd_train(&cli),
        Command::Account => cmd_account(&cli),
        Command::Sweep => cmd_sweep(&cli),
        Command::Report => cmd_report(&cli),
    }
}

/// Process exit code for an error: 2 for infeasible privacy targets,
/// 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InfeasibleTarget { .. } => 2,
        _ => 1,
    }
}

#[allow(dead_code)]
fn default_params_for_tests() -> DenoiserParams {
    DenoiserParams::init(ModelDims::default(), 50, 0)
}
