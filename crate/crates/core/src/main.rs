use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use serde::de::DeserializeOwned;
use serde::Serialize;

use rul_core::corpus::{
    dataset_vocab, generate_dataset, load_dataset, make_preference_pairs, save_dataset, save_pairs, Dataset,
    Example, GenerationSpec, Vocab,
};
use rul_core::eval::{evaluate, render_report, run_ablation, AblationConfig, EvalOptions};
use rul_core::manifest::{write_json, RunManifest};
use rul_core::model::{load_checkpoint, save_checkpoint, Aggregation, ModelParams, Prepared};
use rul_core::training::{
    grad_check, gradcheck_fixture, heldout_reward, pair_accuracy, train_reward_model, train_rl, train_sft,
    GradCheckOptions, LossSelector, ModelReward, RlConfig, RlIteration, RmPair, SftExample, TrainConfig,
};
use rul_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rul", version, about = "Unanswerability detection and refusal generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Attention,
    Mean,
}

impl From<AggArg> for Aggregation {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Attention => Aggregation::Attention,
            AggArg::Mean => Aggregation::Mean,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test JSONL splits and the vocabulary.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised fine-tuning with the composite loss.
    TrainSft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reward model on oracle preference pairs.
    TrainRm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 2000)]
        train_pairs: i64,
        #[arg(long, default_value_t = 400)]
        valid_pairs: i64,
    },
    /// KL-regularized policy-gradient refinement.
    TrainRl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sft_ckpt: Option<PathBuf>,
        #[arg(long)]
        rm_ckpt: Option<PathBuf>,
    },
    /// Metrics report for a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "attention")]
        aggregation: AggArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Decision threshold; defaults to the checkpoint's.
        #[arg(long)]
        tau: Option<f64>,
        /// Timing repetitions (at least 3); omitted skips timing.
        #[arg(long)]
        timing: Option<usize>,
    },
    /// Finite-difference gradient check.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "all")]
        loss: String,
    },
    /// Three-arm ablation: full, mean pooling, SFT only.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn init_logging() -> Result<bool> {
    let (level, quiet) = match std::env::var("RUL_LOG").as_deref() {
        Err(_) | Ok("info") => (LevelFilter::Info, false),
        Ok("quiet") => (LevelFilter::Error, true),
        Ok("debug") => (LevelFilter::Debug, false),
        Ok(other) => return Err(Error::config("RUL_LOG", format!("`{other}` is not one of quiet, info, debug"))),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(quiet)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let field = e.to_string();
        Error::config(path.display().to_string(), field)
    })
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

struct DataDir {
    vocab: Vocab,
    train: Vec<Example>,
    valid: Vec<Example>,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<Example>> {
    let p = dir.join(format!("{split}.jsonl"));
    require(&p)?;
    load_dataset(&p)
}

fn load_vocab(dir: &Path) -> Result<Vocab> {
    let p = dir.join("vocab.json");
    require(&p)?;
    read_json(&p)
}

fn load_data(dir: &Path) -> Result<DataDir> {
    Ok(DataDir {
        vocab: load_vocab(dir)?,
        train: load_split(dir, "train")?,
        valid: load_split(dir, "valid")?,
    })
}

fn load_ckpt(path: &Path, vocab: &Vocab) -> Result<ModelParams> {
    require(path)?;
    let p = load_checkpoint(path)?;
    if p.config.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "{} has vocabulary size {} but the data vocabulary has {}",
            path.display(),
            p.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(p)
}

fn progress<T: Serialize>(quiet: bool, rec: &T) {
    if !quiet {
        if let Ok(line) = serde_json::to_string(rec) {
            println!("{line}");
        }
    }
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: GenerationSpec = read_config(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_dataset(&spec)?;
    let vocab = dataset_vocab(&data);
    let mut m = RunManifest::new("gen-data", to_value(&spec), spec.seed);
    for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        let p = out.join(format!("{name}.jsonl"));
        save_dataset(split, &p)?;
        m.record(&p)?;
    }
    let vp = out.join("vocab.json");
    write_json(&vp, &vocab)?;
    m.record(&vp)?;
    info!(
        "wrote {} / {} / {} examples, vocabulary of {}",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        vocab.len()
    );
    m.finish(&out.join("manifest.json"))
}

fn train_sft_cmd(data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>, quiet: bool) -> Result<()> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let d = load_data(data)?;
    let train = SftExample::batch(&d.train, &d.vocab);
    let valid = SftExample::batch(&d.valid, &d.vocab);
    let mut m = RunManifest::new("train-sft", to_value(&cfg), cfg.seed);
    m.inputs.push(data.to_path_buf());
    info!("training on {} examples, validating on {}", train.len(), valid.len());
    let (params, mut report) = train_sft(&train, &valid, d.vocab.len(), &cfg, |r| progress(quiet, r))?;
    save_checkpoint(&params, out)?;
    m.record(out)?;
    report.checkpoint = Some(out.display().to_string());
    let rp = sibling(out, "report.json");
    write_json(&rp, &report)?;
    m.record(&rp)?;
    m.epoch_seconds = report.epoch_seconds.clone();
    info!("best epoch {} of {}", report.best_epoch, report.epochs.len());
    m.finish(&sibling(out, "manifest.json"))
}

fn train_rm_cmd(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    pairs: (i64, i64),
    quiet: bool,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let d = load_data(data)?;
    let tp = make_preference_pairs(&d.train, pairs.0, cfg.seed)?;
    let vp = make_preference_pairs(&d.valid, pairs.1, cfg.seed.wrapping_add(1))?;
    let mut m = RunManifest::new("train-rm", to_value(&cfg), cfg.seed);
    m.inputs.push(data.to_path_buf());
    let pp = sibling(out, "pairs.jsonl");
    save_pairs(&tp, &pp)?;
    m.record(&pp)?;
    let train = RmPair::resolve(&tp, &d.train, &d.vocab)?;
    let valid = RmPair::resolve(&vp, &d.valid, &d.vocab)?;
    let (params, mut report) = train_reward_model(&train, &valid, d.vocab.len(), &cfg, |r| progress(quiet, r))?;
    info!("held-out pair accuracy {:.3}", pair_accuracy(&params, &valid)?);
    save_checkpoint(&params, out)?;
    m.record(out)?;
    report.checkpoint = Some(out.display().to_string());
    let rp = sibling(out, "report.json");
    write_json(&rp, &report)?;
    m.record(&rp)?;
    m.epoch_seconds = report.epoch_seconds.clone();
    m.finish(&sibling(out, "manifest.json"))
}

#[derive(Serialize)]
struct RlRunReport {
    iterations: Vec<RlIteration>,
    heldout_reward_sft: f64,
    heldout_reward_rl: f64,
    max_abs_param_change: f64,
    checkpoint: String,
}

const HELDOUT_PROMPTS: usize = 200;
const HELDOUT_SAMPLES: usize = 2;

fn train_rl_cmd(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    sft: Option<&Path>,
    rm: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let mut cfg: RlConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let sft = sft.ok_or_else(|| Error::Usage("train-rl needs --sft-ckpt".into()))?;
    let rm = rm.ok_or_else(|| Error::Usage("train-rl needs --rm-ckpt".into()))?;
    let d = load_data(data)?;
    let sft_params = load_ckpt(sft, &d.vocab)?;
    let rm_params = load_ckpt(rm, &d.vocab)?;
    let prompts: Vec<Prepared> = d.train.iter().map(|e| Prepared::new(e, &d.vocab)).collect();
    let held: Vec<Prepared> = d
        .valid
        .iter()
        .take(HELDOUT_PROMPTS)
        .map(|e| Prepared::new(e, &d.vocab))
        .collect();
    let reward = ModelReward(&rm_params);
    let mut m = RunManifest::new("train-rl", to_value(&cfg), cfg.seed);
    m.inputs.extend([data.to_path_buf(), sft.to_path_buf(), rm.to_path_buf()]);
    let before = heldout_reward(&sft_params, &reward, &held, &cfg, HELDOUT_SAMPLES, cfg.seed)?;
    let (params, report) = train_rl(&sft_params, &reward, &prompts, &cfg, |r| progress(quiet, r))?;
    let after = heldout_reward(&params, &reward, &held, &cfg, HELDOUT_SAMPLES, cfg.seed)?;
    info!("held-out reward {before:.4} -> {after:.4}");
    save_checkpoint(&params, out)?;
    m.record(out)?;
    let rp = sibling(out, "report.json");
    write_json(
        &rp,
        &RlRunReport {
            iterations: report.iterations,
            heldout_reward_sft: before,
            heldout_reward_rl: after,
            max_abs_param_change: params.max_abs_diff(&sft_params),
            checkpoint: out.display().to_string(),
        },
    )?;
    m.record(&rp)?;
    m.finish(&sibling(out, "manifest.json"))
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    data: &Path,
    ckpt: &Path,
    agg: Aggregation,
    out: &Path,
    split: &str,
    tau: Option<f64>,
    timing: Option<usize>,
    quiet: bool,
) -> Result<()> {
    let vocab = load_vocab(data)?;
    let params = load_ckpt(ckpt, &vocab)?;
    let examples = load_split(data, split)?;
    let opts = EvalOptions {
        tau: tau.unwrap_or(params.config.tau),
        aggregation: agg,
        timing_repetitions: timing,
        ..EvalOptions::default()
    };
    if !(0.0..=1.0).contains(&opts.tau) {
        return Err(Error::config("tau", "must lie in [0, 1]"));
    }
    let report = evaluate(&params, &examples, &vocab, &opts)?;
    let mut m = RunManifest::new(
        "eval",
        serde_json::json!({"aggregation": agg, "split": split, "tau": opts.tau, "timing": timing}),
        0,
    );
    m.inputs.extend([data.to_path_buf(), ckpt.to_path_buf()]);
    write_json(out, &report)?;
    m.record(out)?;
    if !quiet {
        print!("{}", render_report(&report));
    }
    m.finish(&sibling(out, "manifest.json"))
}

fn gradcheck_cmd(seed: u64, loss: &str) -> Result<Outcome> {
    let selectors: Vec<LossSelector> = if loss == "all" {
        LossSelector::ALL.to_vec()
    } else {
        vec![loss.parse()?]
    };
    let (params, batch, pairs) = gradcheck_fixture(seed)?;
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut ok = true;
    for sel in selectors {
        let r = grad_check(&params, &batch, &pairs, sel, &opts)?;
        ok &= r.pass;
        println!(
            "{} {:<3} max_rel_err={:.3e} coords={} worst={}",
            if r.pass { "PASS" } else { "FAIL" },
            sel,
            r.max_rel_error,
            r.coordinates,
            r.worst
        );
    }
    Ok(if ok { Outcome::Ok } else { Outcome::CheckFailed })
}

fn ablate_cmd(data: &Path, config: Option<&Path>, out: &Path, seed: u64, quiet: bool) -> Result<()> {
    let cfg: AblationConfig = read_config(config)?;
    let cfg = cfg.with_seed(seed);
    cfg.sft.validate()?;
    cfg.reward.validate()?;
    cfg.rl.validate()?;
    let d = load_data(data)?;
    let test = load_split(data, "test")?;
    let dataset = Dataset {
        train: d.train,
        valid: d.valid,
        test,
    };
    let mut m = RunManifest::new("ablate", to_value(&cfg), seed);
    m.inputs.push(data.to_path_buf());
    let table = run_ablation(&dataset, &d.vocab, &cfg, seed, |stage| info!("{stage}"))?;
    write_json(out, &table)?;
    m.record(out)?;
    if !quiet {
        print!("{}", table.render());
    }
    m.finish(&sibling(out, "manifest.json"))
}

fn run(cli: Cli, quiet: bool) -> Result<Outcome> {
    match cli.command {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed)?,
        Command::TrainSft {
            data,
            config,
            out,
            seed,
        } => train_sft_cmd(&data, config.as_deref(), &out, seed, quiet)?,
        Command::TrainRm {
            data,
            config,
            out,
            seed,
            train_pairs,
            valid_pairs,
        } => train_rm_cmd(&data, config.as_deref(), &out, seed, (train_pairs, valid_pairs), quiet)?,
        Command::TrainRl {
            data,
            config,
            out,
            seed,
            sft_ckpt,
            rm_ckpt,
        } => train_rl_cmd(&data, config.as_deref(), &out, seed, sft_ckpt.as_deref(), rm_ckpt.as_deref(), quiet)?,
        Command::Eval {
            data,
            ckpt,
            aggregation,
            out,
            split,
            tau,
            timing,
        } => eval_cmd(&data, &ckpt, aggregation.into(), &out, &split, tau, timing, quiet)?,
        Command::Gradcheck { seed, loss } => return gradcheck_cmd(seed, &loss),
        Command::Ablate {
            data,
            config,
            out,
            seed,
        } => ablate_cmd(&data, config.as_deref(), &out, seed, quiet)?,
    }
    Ok(Outcome::Ok)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Training(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match init_logging() {
        Ok(q) => q,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli, quiet) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
