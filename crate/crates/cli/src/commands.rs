use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fedemb_core::accounting::{extrapolate_sweep, privacy_report, PrivacyReport, SweepBase, SWEEP_CSV_HEADER};
use fedemb_core::checkpoint::Checkpoint;
use fedemb_core::data::{
    generate_synthetic_identities, input_dim, load_dataset_csv, num_classes, write_dataset_csv,
    SyntheticParams, UserDataset,
};
use fedemb_core::eval::{pairwise_scores, roc_from_summary, Metric, ScoreSummary};
use fedemb_core::mechanism::Mechanism;
use fedemb_core::model::build_model;
use fedemb_core::trainer::{run_training, EvalData, RoundLog, ROUND_CSV_HEADER};
use fedemb_core::{ParamVector, RngStream, StreamPurpose};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{output_root, resolve, CliError};

type Result<T> = std::result::Result<T, CliError>;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRIVACY_FILE: &str = "privacy.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn config_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Training users named by the config.
pub fn load_training_users(cfg: &ExperimentConfig, config_path: &Path) -> Result<Vec<UserDataset>> {
    let users = match (&cfg.data.csv, &cfg.data.synthetic) {
        (Some(csv), _) => load_dataset_csv(&resolve(&config_dir(config_path), csv))?,
        (None, Some(s)) => generate_synthetic_identities(
            &s.params(),
            &RngStream::derive(cfg.synthetic_seed(), StreamPurpose::Synthetic, 0, 0),
        )?,
        (None, None) => unreachable!("validated"),
    };
    if input_dim(&users).is_none() {
        return Err(CliError::Config("data: dataset has no examples".into()));
    }
    Ok(users)
}

/// Held-out users named by the config, if any.
pub fn load_eval_users(cfg: &ExperimentConfig, config_path: &Path) -> Result<Option<Vec<UserDataset>>> {
    if let Some(csv) = &cfg.eval.csv {
        return Ok(Some(load_dataset_csv(&resolve(&config_dir(config_path), csv))?));
    }
    match (&cfg.data.synthetic, cfg.eval.num_identities) {
        (Some(s), Some(n)) => Ok(Some(generate_synthetic_identities(
            &SyntheticParams {
                num_users: n,
                ..s.params()
            },
            &RngStream::derive(cfg.synthetic_seed(), StreamPurpose::Synthetic, 0, 1),
        )?)),
        _ => Ok(None),
    }
}

fn check_dims(what: &str, users: &[UserDataset], expected: usize) -> Result<()> {
    match input_dim(users) {
        Some(d) if d != expected => Err(CliError::Config(format!(
            "{what} has {d} input features but the model expects {expected}"
        ))),
        None => Err(CliError::Config(format!("{what} has no examples"))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub threads: Option<usize>,
    pub force: bool,
    pub resume: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    pub seed: u64,
    pub mode: fedemb_core::trainer::Mode,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub rounds_completed: u64,
    pub resumed_from_round: Option<u64>,
    pub final_loss: Option<f64>,
    pub final_recall_at_far: Option<f64>,
    pub eval_far: f64,
    pub privacy: PrivacyReport,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
}

/// Rows of an existing metrics file up to and including `round`.
fn metrics_prefix(path: &Path, round: u64) -> Result<Vec<String>> {
    let mut keep = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        let r: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| CliError::Runtime(format!("{}: malformed row `{line}`", path.display())))?;
        if r <= round {
            keep.push(line);
        }
    }
    Ok(keep)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let started = unix_ms();
    let cfg = ExperimentConfig::load(&args.config)?;
    let users = load_training_users(&cfg, &args.config)?;
    let dim = input_dim(&users).expect("checked nonempty");
    let tcfg = cfg.trainer_config(dim)?;
    tcfg.validate(users.len())?;
    let eval_users = load_eval_users(&cfg, &args.config)?;
    if let Some(e) = &eval_users {
        check_dims("eval data", e, dim)?;
    }
    let eval = eval_users.as_deref().map(EvalData::from_users).transpose()?;
    let warm = cfg
        .checkpoint
        .warm_start
        .as_ref()
        .map(|p| Checkpoint::load(&resolve(&config_dir(&args.config), p)))
        .transpose()?;

    let out = resolve(&output_root(), &cfg.output_dir);
    let manifest_path = out.join(MANIFEST_FILE);
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let resume = if args.resume {
        let path = ckpt_dir.join(LATEST_CHECKPOINT);
        if !path.exists() {
            return Err(CliError::Config(format!("--resume: no checkpoint at {}", path.display())));
        }
        Some(Checkpoint::load(&path)?)
    } else {
        if manifest_path.exists() && !args.force {
            return Err(CliError::Config(format!(
                "{} exists; pass --force to overwrite",
                manifest_path.display()
            )));
        }
        None
    };

    fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = match &resume {
        Some(ck) => {
            let rows = metrics_prefix(&metrics_path, ck.round)?;
            let mut f = File::create(&metrics_path)?;
            writeln!(f, "{ROUND_CSV_HEADER}")?;
            for r in rows {
                writeln!(f, "{r}")?;
            }
            f
        }
        None => {
            if manifest_path.exists() {
                fs::remove_file(&manifest_path)?;
            }
            for entry in fs::read_dir(&ckpt_dir)? {
                fs::remove_file(entry?.path())?;
            }
            let mut f = File::create(&metrics_path)?;
            writeln!(f, "{ROUND_CSV_HEADER}")?;
            f
        }
    };
    fs::write(out.join("config.toml"), cfg.to_toml())?;

    let every = cfg.checkpoint.every;
    let total = cfg.rounds;
    let init = resume.as_ref().or(warm.as_ref());
    let outcome = run_training(tcfg, &users, eval.as_ref(), init, args.threads, |log: &RoundLog, tr| {
        writeln!(metrics, "{}", log.csv_line())?;
        let periodic = every > 0 && log.round % every == 0;
        if periodic || log.round == total {
            let ck = tr.checkpoint();
            if periodic {
                ck.save(&ckpt_dir.join(format!("round_{:06}.ckpt", log.round)))?;
            }
            if log.round == total {
                ck.save(&ckpt_dir.join(FINAL_CHECKPOINT))?;
            }
            ck.save(&ckpt_dir.join(LATEST_CHECKPOINT))?;
        }
        Ok(())
    })?;
    metrics.flush()?;

    let final_path = ckpt_dir.join(FINAL_CHECKPOINT);
    if !final_path.exists() {
        Checkpoint {
            cfg_digest: cfg.model.mlp(dim).digest(),
            round: cfg.rounds,
            backbone: outcome.backbone.clone(),
            head: outcome.head.clone(),
            clip_norm: cfg.privacy.clip_norm,
            velocity: None,
        }
        .save(&final_path)?;
    }
    write_json(&out.join(PRIVACY_FILE), &outcome.privacy)?;

    let manifest = RunManifest {
        config_digest: cfg.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        mode: cfg.mode,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        rounds_completed: cfg.rounds,
        resumed_from_round: resume.as_ref().map(|c| c.round),
        final_loss: outcome.logs.last().map(|l| l.loss),
        final_recall_at_far: outcome.final_recall,
        eval_far: cfg.eval.far,
        privacy: outcome.privacy,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(TrainSummary {
        output_dir: out,
        manifest,
    })
}

#[derive(Debug, Clone)]
pub struct AccountArgs {
    pub q: f64,
    pub sigma: f64,
    pub rounds: u64,
    pub delta: f64,
    pub mechanism: Mechanism,
    /// Horizon for tree noise; defaults to `rounds`.
    pub total_rounds: Option<u64>,
}

pub fn cmd_account(args: &AccountArgs) -> Result<PrivacyReport> {
    if !(0.0..=1.0).contains(&args.q) {
        return Err(CliError::Config(format!("q must be in [0, 1], got {}", args.q)));
    }
    Ok(privacy_report(
        args.mechanism,
        args.q,
        args.sigma,
        args.rounds,
        args.total_rounds.unwrap_or(args.rounds),
        args.delta,
    )?)
}

#[derive(Debug, Clone)]
pub struct ExtrapolateArgs {
    pub total_users: u64,
    pub users_per_round: u64,
    pub sigma: f64,
    pub rounds: u64,
    pub delta: f64,
    pub factors: Vec<f64>,
}

/// The sweep as CSV text, header included.
pub fn cmd_extrapolate(args: &ExtrapolateArgs) -> Result<String> {
    if args.factors.is_empty() {
        return Err(CliError::Config("at least one scale factor is required".into()));
    }
    let rows = extrapolate_sweep(
        &SweepBase {
            noise_multiplier: args.sigma,
            users_per_round: args.users_per_round,
            rounds: args.rounds,
            total_users: args.total_users,
            delta: args.delta,
        },
        &args.factors,
    )?;
    let mut text = String::from(SWEEP_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    Ok(text)
}

pub const DEFAULT_FARS: [f64; 3] = [1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub config: PathBuf,
    /// Seeded initial model when absent.
    pub checkpoint: Option<PathBuf>,
    /// Overrides the config's evaluation data.
    pub data: Option<PathBuf>,
    /// Explicit targets must all be resolvable; the default list reports
    /// unresolvable ones as null.
    pub fars: Option<Vec<f64>>,
    pub metric: Option<Metric>,
    pub sample_identities: Option<usize>,
    pub roc_points: usize,
    /// Defaults to `<output_dir>/eval`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FarResult {
    pub far: f64,
    pub recall: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub num_embeddings: usize,
    pub num_identities: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub recall_at_far: Vec<FarResult>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let cfg = ExperimentConfig::load(&args.config)?;
    if let Some(bad) = args.fars.iter().flatten().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Config(format!("far targets must be in (0, 1], got {bad}")));
    }
    let train_users = load_training_users(&cfg, &args.config)?;
    let dim = input_dim(&train_users).expect("checked nonempty");
    let model = cfg.model.mlp(dim);
    let users = match &args.data {
        Some(p) => load_dataset_csv(p)?,
        None => load_eval_users(&cfg, &args.config)?.unwrap_or(train_users.clone()),
    };
    check_dims("eval data", &users, dim)?;

    let theta: ParamVector = match &args.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.cfg_digest != model.digest() {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written for a different model architecture",
                    p.display()
                )));
            }
            if ck.backbone.len() != model.backbone_len() {
                return Err(CliError::Config(format!(
                    "checkpoint backbone has {} parameters, model expects {}",
                    ck.backbone.len(),
                    model.backbone_len()
                )));
            }
            ck.backbone
        }
        None => {
            build_model(
                &model,
                num_classes(&train_users),
                &RngStream::derive(cfg.seed, StreamPurpose::Init, 0, 0),
            )?
            .0
        }
    };

    let eval = EvalData::from_users(&users)?;
    let mut es = eval.embed(&theta, &model)?;
    if let Some(n) = args.sample_identities {
        es = es.subsample_identities(n, &RngStream::derive(cfg.seed, StreamPurpose::Eval, 0, 0))?;
    }
    let metric = args.metric.unwrap_or(cfg.eval.metric);
    let (pos, neg) = pairwise_scores(&es, metric);
    let summary = ScoreSummary::new(pos, neg);
    let strict = args.fars.is_some();
    let fars = args.fars.clone().unwrap_or_else(|| DEFAULT_FARS.to_vec());
    let mut results = Vec::with_capacity(fars.len());
    for far in fars {
        match summary.recall_at(far) {
            Ok(r) => results.push(FarResult {
                far,
                recall: Some(r.recall),
                threshold: Some(r.threshold),
            }),
            Err(e @ fedemb_core::Error::UnresolvableFar { .. }) if strict => return Err(e.into()),
            Err(fedemb_core::Error::UnresolvableFar { .. }) => results.push(FarResult {
                far,
                recall: None,
                threshold: None,
            }),
            Err(e) => return Err(e.into()),
        }
    }
    let mut ids = es.labels.clone();
    ids.sort_unstable();
    ids.dedup();
    let report = EvalReport {
        metric,
        num_embeddings: es.len(),
        num_identities: ids.len(),
        positive_pairs: summary.num_positive(),
        negative_pairs: summary.num_negative(),
        recall_at_far: results,
    };

    let out = resolve(
        &output_root(),
        &args.out.clone().unwrap_or_else(|| cfg.output_dir.join("eval")),
    );
    fs::create_dir_all(&out)?;
    write_json(&out.join("summary.json"), &report)?;
    if summary.num_negative() > 0 && summary.num_positive() > 0 {
        let roc = roc_from_summary(&summary, args.roc_points.max(2))?;
        let mut f = File::create(out.join("roc.csv"))?;
        roc.write_csv(&mut f)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub params: SyntheticParams,
    pub seed: u64,
    /// Resolved against the output root.
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub path: PathBuf,
    pub users: usize,
    pub classes: usize,
    pub rows: usize,
}

/// Writes the same users a config with `data.synthetic` and this seed trains on.
pub fn cmd_synth(args: &SynthArgs) -> Result<SynthReport> {
    let users = generate_synthetic_identities(
        &args.params,
        &RngStream::derive(args.seed, StreamPurpose::Synthetic, 0, 0),
    )?;
    let path = resolve(&output_root(), &args.out);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_dataset_csv(&path, &users)?;
    Ok(SynthReport {
        path,
        users: users.len(),
        classes: num_classes(&users),
        rows: users.iter().map(|u| u.examples.len()).sum(),
    })
}

/// Appends one JSON line to `w`.
pub fn print_json_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w, "{line}")?;
    Ok(())
}
