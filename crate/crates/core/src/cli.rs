//! Command-line front end. Each command writes a run directory named after the hash of its
//! resolved configuration, with a `manifest.json` listing every file it produced.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{
    run_attack, AttackSpec, FdScheme, ObjectiveKind, PassLedger, PgdConfig, PgdInit, QuadAttackConfig, SimbaConfig,
};
use crate::autodiff::Tensor;
use crate::data_io::{dataset_root, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    clean_report, compare_quad_vs_pgd, escalate_pgd, masking_scatter, sweep, verify_bound, write_text, BoundConfig,
    CompareConfig, ComparedModel, MaskingConfig, SweepOptions,
};
use crate::explain::{contrastive, write_bundle, ContrastiveConfig, ImageShape};
use crate::lp_geometry::{AttackBudget, Norm};
use crate::models::{Activation, Architecture, LabeledBatch, Model};
use crate::training::{config_hash, TrainConfig, TrainState, Trainer};

#[derive(Debug, Parser)]
#[command(name = "scorpio", version, about = "Robust training, adversarial attacks and robustness diagnostics")]
pub struct Cli {
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Run one attack and write per-example records.
    Attack(AttackCmd),
    /// Adversarial accuracy over a grid of budgets and objectives.
    Sweep(AttackCmd),
    /// Success rates of PGD and the quadratic attack on standard and robust models.
    Compare(CompareArgs),
    /// Gradient-masking diagnostics.
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Check the worst-case loss gap bound on a small tanh network.
    VerifyBound(BoundArgs),
    /// Saliency maps and loss-raising / loss-lowering perturbations.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Continue from the run directory's checkpoint when present.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetArg {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetArg,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Use only the first N examples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub val_size: usize,
    /// Examples per attack batch.
    #[arg(long, default_value_t = 500)]
    pub chunk: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Quad,
    Simba,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub attack: AttackKind,
    #[arg(long, default_value = "l2")]
    pub norm: Norm,
    /// Budget(s), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Objective(s), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "ul")]
    pub objective: Vec<ObjectiveKind>,
    /// Finite-difference scheme of the quadratic attack.
    #[arg(long)]
    pub fd: Option<FdScheme>,
    /// Finite-difference step of the quadratic attack.
    #[arg(long)]
    pub h: Option<f64>,
    /// PGD step length (default depends on norm and steps).
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AttackCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Standard (non-robust) model checkpoints.
    #[arg(long, required = true)]
    pub standard: Vec<PathBuf>,
    /// Robust model checkpoints.
    #[arg(long, required = true)]
    pub robust: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "l2")]
    pub norm: Norm,
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 1.15)]
    pub h: f64,
    #[arg(long, default_value_t = 10)]
    pub pgd_steps: usize,
    #[arg(long, default_value_t = 3)]
    pub quad_steps: usize,
    #[arg(long, default_value = "fe")]
    pub fd: FdScheme,
}

#[derive(Debug, Subcommand)]
pub enum Diagnose {
    /// Margins after PGD against margins after SimBA.
    Masking(MaskingArgs),
    /// Margin-objective PGD accuracy as the step count grows.
    Escalate(EscalateArgs),
}

#[derive(Debug, Args)]
pub struct MaskingArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "l2")]
    pub norm: Norm,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value = "ul")]
    pub objective: ObjectiveKind,
    #[arg(long, default_value_t = 0.2)]
    pub simba_step: f64,
    /// SimBA queries per example (one coordinate each).
    #[arg(long, default_value_t = 784)]
    pub simba_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub red_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EscalateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "l2")]
    pub norm: Norm,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,100")]
    pub steps: Vec<usize>,
    /// Accuracy drop (points) above which masking is flagged.
    #[arg(long, default_value_t = 2.0)]
    pub threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundArgs {
    /// Input dimension of the random tanh network.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value = "l2")]
    pub norm: Norm,
    #[arg(long, default_value_t = 0.3)]
    pub eps: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 200)]
    pub pgd_steps: usize,
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 4.0)]
    pub eps: f64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Number of examples to explain.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
}

/// Process exit code for an error: 2 configuration, 3 data, 4 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnsupportedNorm { .. } | Error::Shape { .. } => 2,
        Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::Json(_) => 3,
        Error::NonFinite { .. } | Error::Diverged { .. } => 4,
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
    pub timings: serde_json::Value,
    pub ledger: PassLedger,
    /// Files written by the run, relative to the run directory.
    pub outputs: Vec<String>,
}

struct Run {
    dir: PathBuf,
    command: String,
    config: serde_json::Value,
    hash: String,
    seed: u64,
    start: Instant,
    outputs: Vec<PathBuf>,
    ledger: PassLedger,
}

impl Run {
    fn new<C: Serialize>(root: &Path, command: &str, config: &C, seed: u64) -> Result<Run> {
        let config = serde_json::to_value(config)?;
        let hash = config_hash(&serde_json::json!({ "command": command, "config": config }));
        let dir = root.join(format!("{command}-{}", &hash[..12]));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(Run { dir, command: command.into(), config, hash, seed, start: Instant::now(), outputs: Vec::new(), ledger: PassLedger::default() })
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.dir.join(name);
        write_text(&p, text)?;
        self.outputs.push(p);
        Ok(())
    }

    fn add(&mut self, files: Vec<PathBuf>) {
        self.outputs.extend(files);
    }

    fn finish(self, extra_timings: serde_json::Value) -> Result<PathBuf> {
        let mut timings = serde_json::json!({ "total_seconds": self.start.elapsed().as_secs_f64() });
        if let (Some(t), serde_json::Value::Object(extra)) = (timings.as_object_mut(), extra_timings) {
            t.extend(extra);
        }
        let mut outputs: Vec<String> = self
            .outputs
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        outputs.sort();
        outputs.dedup();
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.hash,
            timings,
            ledger: self.ledger,
            outputs,
        };
        write_text(&self.dir.join("manifest.json"), &serde_json::to_string_pretty(&m)?)?;
        Ok(self.dir)
    }
}

fn load_data(args: &DataArgs) -> Result<(Dataset, LabeledBatch<f32>)> {
    let root = dataset_root(args.data_root.as_deref());
    let ds = match args.dataset {
        DatasetArg::Mnist => Dataset::mnist(&root, args.val_size)?,
        DatasetArg::Cifar10 => Dataset::cifar10(&root, args.val_size)?,
    };
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let b = ds.split(split);
    let n = args.limit.unwrap_or(b.len()).min(b.len());
    let batch = b.slice(0, n);
    Ok((ds, batch))
}

fn load_model(path: &Path, data: &Dataset) -> Result<Model<f32>> {
    let m = Model::load(path)?;
    if m.input_dim() != data.train.x.row_len() {
        return Err(Error::Config(format!(
            "model {} expects {} inputs, dataset {} has {}",
            path.display(),
            m.input_dim(),
            data.name,
            data.train.x.row_len()
        )));
    }
    Ok(m)
}

/// Attack cells for every `(eps, objective)` pair, rejecting flag combinations an attack
/// cannot honor. `eps = 0` cells are dropped: the clean row already covers them.
pub fn build_attack_grid(a: &AttackArgs, clamp_box: Option<(f64, f64)>) -> Result<Vec<AttackSpec>> {
    let bad = |m: String| Err(Error::Config(m));
    if a.eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return bad("--eps values must be finite and >= 0".into());
    }
    if a.attack != AttackKind::Quad && (a.fd.is_some() || a.h.is_some()) {
        return bad("--fd and --h only apply to --attack quad".into());
    }
    if !matches!(a.attack, AttackKind::Pgd) && (a.step_size.is_some() || a.random_init) {
        return bad("--step-size and --random-init only apply to --attack pgd".into());
    }
    match a.attack {
        AttackKind::Pgd if !matches!(a.norm, Norm::L2 | Norm::Linf) => {
            return bad(format!(
                "--attack pgd projects onto the ball after every step, which is implemented for l2 and linf only; \
                 got {}. Use --attack quad, which needs no projection",
                a.norm
            ))
        }
        AttackKind::Fgsm | AttackKind::Simba if a.norm != Norm::Linf => {
            return bad(format!("--attack {:?} is an linf attack; pass --norm linf", a.attack).to_lowercase())
        }
        AttackKind::Fgsm | AttackKind::Simba if a.objective.iter().any(|o| *o != ObjectiveKind::Ul) => {
            return bad("fgsm and simba only support --objective ul".into())
        }
        _ => {}
    }
    let mut out = Vec::new();
    for &eps in a.eps.iter().filter(|e| **e > 0.0) {
        let budget = AttackBudget { norm: a.norm, eps, clamp_box };
        match a.attack {
            AttackKind::Fgsm => out.push(AttackSpec::Fgsm { budget }),
            AttackKind::Simba => {
                let mut cfg = SimbaConfig::new(eps, a.steps, a.seed);
                cfg.clamp_box = clamp_box;
                out.push(AttackSpec::Simba { cfg })
            }
            AttackKind::Pgd => {
                for &objective in &a.objective {
                    let mut cfg = PgdConfig::new(budget, a.steps)?;
                    if let Some(s) = a.step_size {
                        cfg.step_size = s;
                    }
                    if a.random_init {
                        cfg.init = PgdInit::Random;
                        cfg.seed = a.seed;
                    }
                    cfg.validate()?;
                    out.push(AttackSpec::Pgd { objective, cfg });
                }
            }
            AttackKind::Quad => {
                let (Some(fd), Some(h)) = (a.fd, a.h) else {
                    return bad("--attack quad needs both --fd and --h".into());
                };
                for &objective in &a.objective {
                    out.push(AttackSpec::Quad { objective, cfg: QuadAttackConfig::new(budget, a.steps, fd, h)? });
                }
            }
        }
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train(a) => cmd_train(&cli.out, &a),
        Command::Attack(a) => cmd_attack(&cli.out, &a, "attack"),
        Command::Sweep(a) => cmd_attack(&cli.out, &a, "sweep"),
        Command::Compare(a) => cmd_compare(&cli.out, &a),
        Command::Diagnose(Diagnose::Masking(a)) => cmd_masking(&cli.out, &a),
        Command::Diagnose(Diagnose::Escalate(a)) => cmd_escalate(&cli.out, &a),
        Command::VerifyBound(a) => cmd_verify_bound(&cli.out, &a),
        Command::Explain(a) => cmd_explain(&cli.out, &a),
    }
}

pub fn cmd_train(out: &Path, a: &TrainArgs) -> Result<PathBuf> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let data = cfg.data.load(a.data_root.as_deref(), cfg.seed)?;
    let mut run = Run::new(out, "train", &cfg, cfg.seed)?;
    let ckpt = run.dir.join("state.ckpt");
    let trainer = if a.resume && ckpt.exists() {
        Trainer::resume(&cfg, &data, TrainState::load(&ckpt)?)?
    } else {
        let init = cfg.init_from.as_deref().map(Model::load).transpose()?;
        Trainer::new(&cfg, &data, init)?
    };
    let quiet = a.quiet;
    let mut progress = |m: &crate::training::EpochMetrics| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val clean {:.2}%  val adv {}  {:.1}s",
                m.epoch,
                m.train_loss,
                m.val_clean_acc,
                m.val_adv_acc.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "-".into()),
                m.wall_seconds
            );
        }
    };
    let outcome = trainer.run(Some(&ckpt), Some(&mut progress))?;
    run.add(outcome.write(&run.dir)?);
    if ckpt.exists() {
        run.outputs.push(ckpt);
    }
    run.ledger = outcome.attack_ledger;
    run.ledger.add(outcome.train_ledger);
    let secs: f64 = outcome.metrics.iter().map(|m| m.wall_seconds).sum();
    run.finish(serde_json::json!({
        "train_seconds": secs,
        "best_epoch": outcome.best_epoch,
        "attack_passes": outcome.attack_ledger,
        "train_passes": outcome.train_ledger,
    }))
}

fn cmd_attack(out: &Path, a: &AttackCmd, command: &str) -> Result<PathBuf> {
    if command == "attack" && (a.attack.eps.len() != 1 || a.attack.objective.len() != 1) {
        return Err(Error::Config("attack takes a single --eps and --objective; use sweep for grids".into()));
    }
    // Flag combinations are checked before any data is read.
    build_attack_grid(&a.attack, None)?;
    let (ds, batch) = load_data(&a.data)?;
    let grid = build_attack_grid(&a.attack, ds.input_range)?;
    let model = load_model(&a.model, &ds)?;
    let config = serde_json::json!({ "model": a.model, "model_checksum": model.checksum(), "data": a.data, "attack": a.attack });
    let mut run = Run::new(out, command, &config, a.attack.seed)?;
    let id = a.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let split = format!("{:?}", a.data.split).to_lowercase();
    let opts = SweepOptions { target_seed: a.attack.seed, chunk: a.data.chunk };
    let report = if grid.is_empty() {
        clean_report(&model, &batch, &id, &split, a.data.chunk)?
    } else {
        sweep(&model, &batch, &grid, &id, &split, opts)?
    };
    if command == "attack" {
        if let Some(spec) = grid.first() {
            let r = run_attack(&model, &batch, spec, a.attack.seed, a.data.chunk)?;
            let mut buf = Vec::new();
            r.write_jsonl(&mut buf)?;
            run.text("records.jsonl", &String::from_utf8_lossy(&buf))?;
        }
    }
    for r in &report.rows {
        run.ledger.add(r.ledger);
        println!(
            "{:<16} {:<5} eps={:<8} acc={:>6.2}%  passes={}",
            r.name,
            r.norm.map(|n| n.to_string()).unwrap_or_default(),
            r.eps,
            r.adversarial_accuracy,
            r.ledger.forward
        );
    }
    run.add(report.write(&run.dir, command)?);
    run.finish(serde_json::Value::Null)
}

fn cmd_compare(out: &Path, a: &CompareArgs) -> Result<PathBuf> {
    let (ds, batch) = load_data(&a.data)?;
    let mut loaded = Vec::new();
    for (p, robust) in a.standard.iter().map(|p| (p, false)).chain(a.robust.iter().map(|p| (p, true))) {
        loaded.push((p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), robust, load_model(p, &ds)?));
    }
    let models: Vec<ComparedModel<'_, f32>> =
        loaded.iter().map(|(name, robust, m)| ComparedModel { name: name.clone(), robust: *robust, model: m }).collect();
    let cfg = CompareConfig {
        norm: a.norm,
        eps_grid: a.eps.clone(),
        clamp_box: ds.input_range,
        pgd_steps: a.pgd_steps,
        quad_steps: a.quad_steps,
        scheme: a.fd,
        h: a.h,
        chunk: a.data.chunk,
    };
    let config = serde_json::json!({ "standard": a.standard, "robust": a.robust, "data": a.data, "compare": cfg });
    let mut run = Run::new(out, "compare", &config, 0)?;
    let rep = compare_quad_vs_pgd(&models, &batch, &cfg)?;
    for c in &rep.curves {
        println!("{} (robust: {}): max |gap| {:.2} points", c.model, c.robust, c.max_abs_gap);
    }
    run.add(rep.write(&run.dir, "compare")?);
    run.finish(serde_json::Value::Null)
}

fn cmd_masking(out: &Path, a: &MaskingArgs) -> Result<PathBuf> {
    if !matches!(a.norm, Norm::L2 | Norm::Linf) {
        return Err(Error::Config(format!("PGD needs --norm l2 or linf, got {}", a.norm)));
    }
    let (ds, batch) = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let mut simba = SimbaConfig::new(a.simba_step, a.simba_iters, a.seed);
    simba.clamp_box = ds.input_range;
    // Under L2 both attacks search the same ball.
    if a.norm == Norm::L2 {
        simba.max_l2 = Some(a.eps);
    }
    let cfg = MaskingConfig {
        pgd: PgdConfig::new(AttackBudget { norm: a.norm, eps: a.eps, clamp_box: ds.input_range }, a.steps)?,
        objective: a.objective,
        simba,
        red_threshold: a.red_threshold,
        chunk: a.data.chunk,
    };
    let config = serde_json::json!({ "model": a.model, "data": a.data, "masking": cfg });
    let mut run = Run::new(out, "masking", &config, a.seed)?;
    let rep = masking_scatter(&model, &batch, &cfg)?;
    println!("red points: {} of {}", rep.red_count, rep.points.len());
    run.add(rep.write(&run.dir, "scatter")?);
    run.text("scatter.json", &serde_json::to_string_pretty(&rep)?)?;
    run.finish(serde_json::Value::Null)
}

fn cmd_escalate(out: &Path, a: &EscalateArgs) -> Result<PathBuf> {
    let (ds, batch) = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let budget = AttackBudget { norm: a.norm, eps: a.eps, clamp_box: ds.input_range };
    let config = serde_json::json!({ "model": a.model, "data": a.data, "budget": budget, "steps": a.steps, "threshold": a.threshold });
    let mut run = Run::new(out, "escalate", &config, 0)?;
    let rep = escalate_pgd(&model, &batch, budget, &a.steps, a.threshold, a.data.chunk)?;
    for r in &rep.rows {
        println!("PGD({}) um: {:.2}%", r.steps, r.adversarial_accuracy);
        run.ledger.add(r.ledger);
    }
    if rep.warning {
        println!("warning: accuracy drops {:.2} points with more steps; gradients may be masked", rep.degradation);
    }
    run.text("escalate.csv", &rep.to_csv())?;
    run.text("escalate.json", &serde_json::to_string_pretty(&rep)?)?;
    run.finish(serde_json::Value::Null)
}

fn cmd_verify_bound(out: &Path, a: &BoundArgs) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model: Model<f64> = Model::init(Architecture::mlp(&[a.dim, a.hidden, a.classes], Activation::Tanh), &mut rng)?;
    let rows: Vec<Vec<f64>> = (0..a.points).map(|_| (0..a.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y: Vec<usize> = (0..a.points).map(|_| rng.gen_range(0..a.classes)).collect();
    let pts = LabeledBatch::new(Tensor::from_rows(&rows)?, y)?;
    let cfg = BoundConfig {
        samples: a.samples,
        pgd_steps: a.pgd_steps,
        restarts: a.restarts,
        seed: a.seed,
        ..BoundConfig::new(a.norm, a.eps)
    };
    let mut run = Run::new(out, "verify-bound", a, a.seed)?;
    let rep = verify_bound(&model, &pts, &cfg)?;
    println!("{} points, {} violations, mean gap {:.3e}", rep.records.len(), rep.violations, rep.mean_gap());
    run.text("bound.csv", &rep.to_csv())?;
    run.text("bound.json", &serde_json::to_string_pretty(&rep)?)?;
    run.finish(serde_json::Value::Null)
}

fn cmd_explain(out: &Path, a: &ExplainArgs) -> Result<PathBuf> {
    let (ds, batch) = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let batch = batch.slice(0, a.count.min(batch.len()));
    let mut cfg = ContrastiveConfig::new(a.eps, a.steps);
    cfg.clamp_box = ds.input_range;
    let config = serde_json::json!({ "model": a.model, "data": a.data, "explain": cfg, "count": a.count });
    let mut run = Run::new(out, "explain", &config, 0)?;
    let ex = contrastive(&model, &batch, &cfg)?;
    let bundle = run.dir.join("bundle");
    let manifest = write_bundle(&bundle, &model, &batch, &ex, &cfg, ImageShape::from_input(&ds.input_shape))?;
    let mut files = vec![manifest];
    for e in &ex {
        let sub = bundle.join(format!("{:05}", e.index));
        if let Ok(entries) = std::fs::read_dir(&sub) {
            let mut names: Vec<PathBuf> = entries.filter_map(|d| d.ok().map(|d| d.path())).collect();
            names.sort();
            files.extend(names);
        }
    }
    run.add(files);
    let flipped = ex.iter().filter(|e| !e.correct && e.pred_min == e.label).count();
    let wrong = ex.iter().filter(|e| !e.correct).count();
    println!("{} explanations; {flipped} of {wrong} misclassified examples restored by delta_min", ex.len());
    run.finish(serde_json::Value::Null)
}
