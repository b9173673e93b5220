//! `mutualdepth`: data generation, training, evaluation, ablations and
//! figure export.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use mutualdepth::ablation::{ablation_csv, run_ablation};
use mutualdepth::checkpoint::{Checkpoint, FORMAT_VERSION};
use mutualdepth::config::{BranchTag, Config};
use mutualdepth::eval::{select_final_branch, uncertainty_split, write_metrics, MetricRow};
use mutualdepth::model::forward_branch;
use mutualdepth::synthdata::{generate_dataset, save_sequences};
use mutualdepth::train::{
    parse_history_csv, prepare_train, prepare_val, resume_fit, train_data_seed, val_data_seed, val_params, TrainData, Trainer,
    CHECKPOINT_FILE, HISTORY_FILE,
};

/// Environment variable naming the generated-dataset cache directory.
const CACHE_ENV: &str = "MUTUALDEPTH_CACHE";

#[derive(Parser)]
#[command(name = "mutualdepth", version, about = "Semi-supervised monocular depth with mutual distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset into `<out>/train` and `<out>/val`.
    GenData(Common),
    /// Train and write checkpoint, loss history and validation history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate every branch of a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Branch reported as final (default: `eval.branch`).
        #[arg(long)]
        branch: Option<BranchTag>,
    },
    /// Run the D/M/N grid and the UW/UT/UWT comparison.
    Ablate(Common),
    /// Export depth (magma) and uncertainty (hot) maps, and loss curves.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Loss history CSV; defaults to the one next to the checkpoint.
        #[arg(long, value_name = "PATH")]
        history: Option<PathBuf>,
        /// Number of validation frames to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    format_version: u32,
    tool_version: &'a str,
    command: &'a str,
    seed: u64,
    config: &'a Config,
    /// The same config in the flat text format.
    config_text: String,
    /// Cache directory the data came from, if any.
    dataset_cache: Option<PathBuf>,
}

/// Default config, then the file, then `--set` overrides, then `--seed`.
fn resolve(base: Config, common: &Common) -> Result<Config> {
    let mut config = base;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        config.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    for s in &common.set {
        config.apply_override(s).with_context(|| format!("in --set {s}"))?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_manifest(out: &Path, command: &str, config: &Config, cache: Option<PathBuf>) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        config,
        config_text: config.to_text(),
        dataset_cache: cache,
    };
    let path = out.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("cannot write {}", path.display()))
}

/// Renders and saves the train and validation splits of `config`.
fn write_dataset(config: &Config, dir: &Path) -> Result<()> {
    let train = generate_dataset(train_data_seed(config.seed), &config.data)?;
    save_sequences(&dir.join("train"), &train)?;
    if config.val_frames >= 3 {
        let val = generate_dataset(val_data_seed(config.seed), &val_params(config))?;
        save_sequences(&dir.join("val"), &val)?;
    }
    Ok(())
}

/// Points `config` at a cached copy of its generated data when
/// `MUTUALDEPTH_CACHE` is set, rendering it on first use.
fn use_cache(config: &mut Config) -> Result<Option<PathBuf>> {
    let Some(root) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return Ok(None);
    };
    if config.dataset_root.is_some() {
        return Ok(None);
    }
    let key = serde_json::to_vec(&(&config.data, config.val_frames, config.seed))?;
    let digest: String = Sha256::digest(&key).iter().take(12).map(|b| format!("{b:02x}")).collect();
    let dir = root.join(digest);
    if !dir.exists() {
        let tmp = root.join(format!(".tmp-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&tmp);
        write_dataset(config, &tmp)?;
        std::fs::rename(&tmp, &dir).with_context(|| format!("cannot move dataset into cache {}", dir.display()))?;
        info!("cached dataset at {}", dir.display());
    }
    config.dataset_root = Some(dir.join("train"));
    if config.val_root.is_none() && dir.join("val").exists() {
        config.val_root = Some(dir.join("val"));
    }
    Ok(Some(dir))
}

fn load_data(config: &Config) -> Result<(TrainData, Option<PathBuf>)> {
    let mut resolved = config.clone();
    let cache = use_cache(&mut resolved)?;
    let data = TrainData {
        train: prepare_train(&resolved)?,
        val: prepare_val(&resolved)?,
    };
    Ok((data, cache))
}

fn gen_data(common: &Common) -> Result<()> {
    let config = resolve(Config::default(), common)?;
    write_dataset(&config, &common.out)?;
    write_manifest(&common.out, "gen-data", &config, None)?;
    println!("dataset written to {}", common.out.display());
    Ok(())
}

fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let (trainer, config, history) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let config = resolve(ck.config.clone(), common)?;
            let mut trainer = Trainer::from_checkpoint(ck);
            trainer.config.train.steps = config.train.steps;
            // Carry the earlier loss history forward when it sits next to the checkpoint.
            let prior = path.parent().map(|p| p.join(HISTORY_FILE)).filter(|p| p.is_file());
            let history = match prior {
                Some(p) => parse_history_csv(&std::fs::read_to_string(&p)?, &trainer.config.loss)?,
                None => Vec::new(),
            };
            (trainer, config, history)
        }
        None => {
            let config = resolve(Config::default(), common)?;
            (Trainer::new(config.clone())?, config, Vec::new())
        }
    };
    let (data, cache) = load_data(&config)?;
    write_manifest(&common.out, "train", &config, cache)?;
    std::fs::write(common.out.join("config.txt"), config.to_text())?;
    let result = resume_fit(trainer, history, &data, Some(&common.out))?;
    for r in result.validation.iter().filter(|r| r.step == result.trainer.step) {
        println!("{}: abs_rel {:.4} rmse {:.4} a1 {:.4}", r.branch, r.metrics.abs_rel, r.metrics.rmse, r.metrics.a1);
    }
    println!("checkpoint written to {}", common.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, branch: Option<BranchTag>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let config = resolve(ck.config.clone(), common)?;
    let mut resolved = config.clone();
    let cache = use_cache(&mut resolved)?;
    let val = prepare_val(&resolved)?;
    if val.is_empty() {
        bail!("no validation data: set dataset.val_root, or data.val_frames >= 3 for generated data");
    }
    let nets: Vec<_> = ck.branches.iter().map(|b| (b.tag, &b.net)).collect();
    let prefer = branch.unwrap_or(config.eval.branch);
    let selection = select_final_branch(&nets, &val, prefer, config.eval.median_scale)?;
    let rows: Vec<MetricRow> = selection
        .per_branch
        .iter()
        .map(|(tag, m)| MetricRow {
            split: "val".into(),
            branch: tag.to_string(),
            metrics: *m,
        })
        .collect();
    write_metrics(&common.out, "metrics", &rows)?;
    let mut uncertainty = serde_json::Map::new();
    for b in ck.branches.iter().filter(|b| b.tag != BranchTag::Baseline) {
        let split = uncertainty_split(&b.net, &val)?;
        uncertainty.insert(
            b.tag.to_string(),
            serde_json::json!({"labelled": split.labelled, "unlabelled": split.unlabelled, "ratio": split.ratio()}),
        );
    }
    let summary = serde_json::json!({
        "step": ck.step,
        "selected": selection.branch,
        "final": selection.metrics,
        "sigma": uncertainty,
    });
    std::fs::write(common.out.join("selection.json"), serde_json::to_string_pretty(&summary)?)?;
    write_manifest(&common.out, "eval", &config, cache)?;
    for (tag, m) in &selection.per_branch {
        println!("{tag}: abs_rel {:.4} rmse {:.4} a1 {:.4}", m.abs_rel, m.rmse, m.a1);
    }
    println!("final branch: {}", selection.branch);
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let config = resolve(Config::default(), common)?;
    let (data, cache) = load_data(&config)?;
    if data.val.is_empty() {
        bail!("ablation needs validation data: set dataset.val_root or data.val_frames >= 3");
    }
    write_manifest(&common.out, "ablate", &config, cache)?;
    let rows = run_ablation(&config, &data, |v, row| {
        println!("{:8} {:8} abs_rel {:.4}", v.study.name(), v.name, row.metrics.abs_rel);
    })?;
    let path = common.out.join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows))?;
    std::fs::write(common.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Reads the named numeric columns of a loss history CSV.
fn read_history(path: &Path, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let idx = columns
        .iter()
        .map(|c| header.iter().position(|h| h == c).with_context(|| format!("{} has no `{c}` column", path.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        for (k, &i) in idx.iter().enumerate() {
            let v = fields
                .get(i)
                .and_then(|f| f.parse().ok())
                .with_context(|| format!("{}: bad row {}", path.display(), n + 2))?;
            out[k].push(v);
        }
    }
    Ok(out)
}

fn plot(common: &Common, checkpoint: &Path, history: Option<&Path>, count: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let config = resolve(ck.config.clone(), common)?;
    let mut resolved = config.clone();
    let cache = use_cache(&mut resolved)?;
    let mut frames = prepare_val(&resolved)?;
    if frames.is_empty() {
        frames = prepare_train(&resolved)?;
    }
    std::fs::create_dir_all(&common.out)?;
    for (i, sample) in frames.iter().take(count).enumerate() {
        let img = sample.target.data();
        let (h, w) = sample.target.shape();
        let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| (img[[c, y as usize, x as usize]] * 255.0).round() as u8))
        });
        rgb.save(common.out.join(format!("input_{i:03}.png")))?;
        for b in &ck.branches {
            let out = forward_branch(&b.net, &sample.target)?;
            plot::colorize(out.depths[0].data(), plot::magma)
                .save(common.out.join(format!("depth_{}_{i:03}.png", b.tag)))?;
            if b.tag != BranchTag::Baseline {
                plot::colorize(&out.log_sigmas[0].sigma(), plot::hot)
                    .save(common.out.join(format!("sigma_{}_{i:03}.png", b.tag)))?;
            }
        }
    }
    let history = history
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(|p| p.join(HISTORY_FILE)))
        .filter(|p| p.exists());
    if let Some(path) = history {
        let columns = ["total_s", "total_u", "l_s", "l_u"];
        let series = read_history(&path, &columns)?;
        plot::loss_curves(&series, 800, 400).save(common.out.join("loss_curves.png"))?;
        println!("loss curves ({}) from {}", columns.join(", "), path.display());
    }
    write_manifest(&common.out, "plot", &config, cache)?;
    println!("figures written to {}", common.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train { common, resume } => train(common, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            branch,
        } => eval(common, checkpoint, *branch),
        Command::Ablate(c) => ablate(c),
        Command::Plot {
            common,
            checkpoint,
            history,
            count,
        } => plot(common, checkpoint, history.as_deref(), *count),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| matches!(c.downcast_ref(), Some(mutualdepth::Error::Config(_)))) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(2)
        }
    }
}
