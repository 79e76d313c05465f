mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use regnet::checkpoint::Checkpoint;
use regnet::data::{
    load_dataset, parse_dataset, prepare_all, save_dataset, select, split_dataset, DatasetRecord,
};
use regnet::gradsuite::run_suite;
use regnet::lattice::CrystalStructure;
use regnet::model::PreparedStructure;
use regnet::moe::UsageMode;
use regnet::synthetic::{generate, SyntheticConfig, SyntheticTarget};
use regnet::train::{evaluate, expert_usage, metrics_csv, predict, Trainer};
use serde_json::json;

use crate::config::{atom_table, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "regnet",
    version,
    about = "Crystal property prediction with reciprocal-space message passing"
)]
struct Cli {
    /// Overrides every seed in the configuration (initialisation, shuffling,
    /// gate noise and the data split).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data preparation and evaluation. Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Use 64-bit floats. All computation is 64-bit; accepted for
    /// compatibility.
    #[arg(long, global = true)]
    float64: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints and metrics.
    Train(TrainArgs),
    /// Per-task MAE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict properties for the structures in a file.
    Predict(PredictArgs),
    /// Expert selection frequencies and task similarity of an MT checkpoint.
    InspectExperts(InspectArgs),
    /// Check a dataset file and report every invalid record.
    ValidateData(ValidateArgs),
    /// Finite-difference gradient checks, module by module.
    Gradcheck(GradcheckArgs),
    /// Paired runs with and without the reciprocal block.
    Ablate(AblateArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// JSON-lines dataset.
    #[arg(long)]
    data: PathBuf,
    /// TOML configuration with [model], [train] and [data] tables.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints, metrics and the summary.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    /// Replace every reciprocal block by the identity.
    #[arg(long)]
    no_reciprocal: bool,
    /// Continue from a checkpoint; its model and training settings win over
    /// the configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitName {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Subset to evaluate, using the split from the configuration.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitName,
    /// Atom feature table used in training (overrides the configuration).
    #[arg(long)]
    atom_table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A JSON record or a JSON-lines file of records; targets may be omitted.
    #[arg(long)]
    structure: PathBuf,
    #[arg(long)]
    atom_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Weights,
    Indicator,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitName,
    #[arg(long, value_enum, default_value = "weights")]
    mode: ModeArg,
    /// Where to write the JSON report.
    #[arg(long, default_value = "expert_usage.json")]
    out: PathBuf,
    #[arg(long)]
    atom_table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, value_delimiter = ',', default_value = "long_range")]
    targets: Vec<String>,
    #[arg(long, default_value_t = 1)]
    min_atoms: usize,
    #[arg(long, default_value_t = 6)]
    max_atoms: usize,
    /// Probability of dropping each label after the first.
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
}

/// Exit status other than runtime errors.
enum Outcome {
    Ok,
    ValidationFailed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ValidationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if cli.float64 {
        log::debug!("--float64 has no effect; all arithmetic is already 64-bit");
    }
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a, seed),
        Command::Predict(a) => cmd_predict(a),
        Command::InspectExperts(a) => cmd_inspect(a, seed),
        Command::ValidateData(a) => cmd_validate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a, seed.unwrap_or(0)),
        Command::Ablate(a) => cmd_ablate(a, seed),
        Command::Synth(a) => cmd_synth(a, seed.unwrap_or(0)),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(path)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn load_structures(path: &Path, strict: bool) -> Result<Vec<CrystalStructure>> {
    let loaded =
        load_dataset(path, strict).with_context(|| format!("loading {}", path.display()))?;
    if !loaded.rejected.is_empty() {
        warn!("skipped {} invalid records", loaded.rejected.len());
    }
    info!(
        "{} structures from {}",
        loaded.structures.len(),
        path.display()
    );
    Ok(loaded.structures)
}

struct Splits {
    train: Vec<PreparedStructure>,
    val: Vec<PreparedStructure>,
    test: Vec<PreparedStructure>,
}

fn prepare_splits(cfg: &RunConfig, structures: &[CrystalStructure]) -> Result<Splits> {
    let table = atom_table(cfg.data.atom_table.as_deref())?;
    let prepared = prepare_all(structures, &cfg.model, &table)?;
    let split = split_dataset(prepared.len(), &cfg.data.split)?;
    info!(
        "split {}/{}/{} (train/val/test)",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(Splits {
        train: select(&prepared, &split.train),
        val: select(&prepared, &split.val),
        test: select(&prepared, &split.test),
    })
}

fn fmt_mae(tasks: &[String], mae: &[Option<f64>]) -> String {
    tasks
        .iter()
        .zip(mae)
        .map(|(t, m)| match m {
            Some(v) => format!("{t}={v:.6}"),
            None => format!("{t}=absent"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn mae_json(tasks: &[String], mae: &[Option<f64>]) -> serde_json::Value {
    tasks
        .iter()
        .zip(mae)
        .map(|(t, m)| (t.clone(), json!(m)))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

/// Trains to completion, writing `last.ckpt`, `best.ckpt` and `metrics.csv`
/// under `out`. Returns the trainer restored to its best epoch.
fn train_run(
    cfg: &RunConfig,
    splits: &Splits,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Trainer> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut trainer = match resume {
        Some(p) => Checkpoint::load(p)?.into_trainer()?,
        None => Trainer::new(&cfg.model, cfg.train.clone(), &splits.train)?,
    };
    let tasks = trainer.model.cfg.tasks.clone();
    let (last, best, csv) = (
        out.join("last.ckpt"),
        out.join("best.ckpt"),
        out.join("metrics.csv"),
    );
    Checkpoint::from_trainer(&trainer).save(&last)?;
    if !best.exists() || resume.is_none() {
        Checkpoint::from_trainer(&trainer).save(&best)?;
    }
    trainer.fit(&splits.train, &splits.val, |t, m, is_best| {
        info!(
            "epoch {}/{} lr {:.3e} train [{}] val [{}]",
            m.epoch,
            t.cfg.epochs,
            m.lr,
            fmt_mae(&tasks, &m.train_mae),
            fmt_mae(&tasks, &m.val_mae)
        );
        let ck = Checkpoint::from_trainer(t);
        ck.save(&last)?;
        if is_best {
            ck.save(&best)?;
        }
        fs::write(&csv, metrics_csv(&t.state.history, &tasks)).map_err(|e| regnet::Error::Io {
            path: csv.clone(),
            source: e,
        })
    })?;
    fs::write(&csv, metrics_csv(&trainer.state.history, &tasks))?;
    Checkpoint::load(&best)?.into_trainer().map_err(Into::into)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let mut cfg = load_config(a.data.config.as_deref(), seed)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.max_lr {
        cfg.train.schedule.max_lr = lr;
    }
    if let Some(h) = a.hidden {
        cfg.model.hidden = h;
    }
    if let Some(n) = a.num_blocks {
        cfg.model.num_blocks = n;
    }
    if a.no_reciprocal {
        cfg.model.use_reciprocal = false;
    }
    if let Some(p) = &a.resume {
        let ck = Checkpoint::load(p)?;
        cfg.model = ck.model;
    }
    let structures = load_structures(&a.data.data, cfg.data.strict)?;
    let splits = prepare_splits(&cfg, &structures)?;
    let best = train_run(&cfg, &splits, &a.out, a.resume.as_deref())?;
    let tasks = &best.model.cfg.tasks;
    let test_mae = if splits.test.is_empty() {
        vec![None; tasks.len()]
    } else {
        evaluate(
            &best.model,
            &best.store,
            &best.normalizer,
            &splits.test,
            best.cfg.batch_size,
        )?
    };
    println!("best epoch: {:?}", best.state.best_epoch);
    println!("test MAE: {}", fmt_mae(tasks, &test_mae));
    let summary = json!({
        "best_epoch": best.state.best_epoch,
        "epochs": best.state.epoch,
        "test_mae": mae_json(tasks, &test_mae),
        "sizes": {"train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len()},
    });
    fs::write(
        a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(Outcome::Ok)
}

/// Structures of the requested split, prepared with the checkpoint's model
/// settings.
fn checkpoint_items(
    ck: &Checkpoint,
    data: &DataArgs,
    split: SplitName,
    table: Option<&Path>,
    seed: Option<u64>,
) -> Result<Vec<PreparedStructure>> {
    let mut cfg = load_config(data.config.as_deref(), seed)?;
    cfg.model = ck.model.clone();
    if let Some(t) = table {
        cfg.data.atom_table = Some(t.to_path_buf());
    }
    let structures = load_structures(&data.data, cfg.data.strict)?;
    if let SplitName::All = split {
        let table = atom_table(cfg.data.atom_table.as_deref())?;
        return Ok(prepare_all(&structures, &cfg.model, &table)?);
    }
    let s = prepare_splits(&cfg, &structures)?;
    Ok(match split {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        _ => s.test,
    })
}

fn cmd_eval(a: EvalArgs, seed: Option<u64>) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let items = checkpoint_items(&ck, &a.data, a.split, a.atom_table.as_deref(), seed)?;
    let model = ck.build_model()?;
    let mae = evaluate(
        &model,
        &ck.store,
        &ck.normalizer,
        &items,
        ck.train.batch_size,
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "structures": items.len(),
            "mae": mae_json(&ck.model.tasks, &mae),
        }))?
    );
    Ok(Outcome::Ok)
}

fn read_structures(path: &Path) -> Result<Vec<CrystalStructure>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(r) = serde_json::from_str::<DatasetRecord>(&text) {
        return Ok(vec![r.into()]);
    }
    Ok(parse_dataset(&text, true)?.structures)
}

fn cmd_predict(a: PredictArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let structures = read_structures(&a.structure)?;
    if structures.is_empty() {
        bail!("no structures in {}", a.structure.display());
    }
    let table = atom_table(a.atom_table.as_deref())?;
    let items = prepare_all(&structures, &ck.model, &table)?;
    let model = ck.build_model()?;
    let preds = predict(
        &model,
        &ck.store,
        &ck.normalizer,
        &items,
        ck.train.batch_size,
    )?;
    let rows: Vec<_> = items
        .iter()
        .zip(preds.rows())
        .map(|(it, row)| {
            let values: serde_json::Map<_, _> = ck
                .model
                .tasks
                .iter()
                .cloned()
                .zip(row.iter().map(|&v| json!(v)))
                .collect();
            json!({"id": it.id, "predictions": values})
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(Outcome::Ok)
}

fn cmd_inspect(a: InspectArgs, seed: Option<u64>) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let items = checkpoint_items(&ck, &a.data, a.split, a.atom_table.as_deref(), seed)?;
    let model = ck.build_model()?;
    let mode = match a.mode {
        ModeArg::Weights => UsageMode::Weights,
        ModeArg::Indicator => UsageMode::Indicator,
    };
    let usage = expert_usage(&model, &ck.store, &items, ck.train.batch_size, mode)?;
    fs::write(&a.out, serde_json::to_string_pretty(&usage)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", usage.to_text_table());
    println!("wrote {}", a.out.display());
    Ok(Outcome::Ok)
}

fn cmd_validate(a: ValidateArgs) -> Result<Outcome> {
    let loaded = match load_dataset(&a.data, false) {
        Ok(l) => l,
        Err(e @ regnet::Error::Parse { .. }) => {
            println!("{}: {e}", a.data.display());
            println!("1 violation");
            return Ok(Outcome::ValidationFailed);
        }
        Err(e) => return Err(e.into()),
    };
    let mut violations = 0;
    for r in &loaded.rejected {
        for reason in &r.reasons {
            println!("line {} ({}): {reason}", r.line, r.id);
            violations += 1;
        }
    }
    println!(
        "{} records checked",
        loaded.structures.len() + loaded.rejected.len()
    );
    println!("{violations} violations");
    Ok(if violations == 0 {
        Outcome::Ok
    } else {
        Outcome::ValidationFailed
    })
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64) -> Result<Outcome> {
    let checks = run_suite(seed)?;
    let width = checks.iter().map(|c| c.module.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{:<width$}  {:.3e}  (< {:.0e})  {}",
            c.module,
            c.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&checks)?)?;
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} modules, {failed} failed", checks.len());
    Ok(if failed == 0 {
        Outcome::Ok
    } else {
        Outcome::ValidationFailed
    })
}

fn cmd_ablate(a: AblateArgs, seed: Option<u64>) -> Result<Outcome> {
    let base = load_config(a.data.config.as_deref(), seed)?;
    let structures = load_structures(&a.data.data, base.data.strict)?;
    let mut rows = Vec::new();
    let mut wins = 0;
    for &s in &a.seeds {
        let mut maes = [0.0; 2];
        for (i, with) in [true, false].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.set_seed(s);
            cfg.model.use_reciprocal = with;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let splits = prepare_splits(&cfg, &structures)?;
            if splits.val.is_empty() {
                bail!("ablation needs a non-empty validation split");
            }
            let tag = if with { "reciprocal" } else { "no_reciprocal" };
            let best = train_run(&cfg, &splits, &a.out.join(format!("seed{s}_{tag}")), None)?;
            let mae = evaluate(
                &best.model,
                &best.store,
                &best.normalizer,
                &splits.val,
                best.cfg.batch_size,
            )?;
            maes[i] = mae[0].context("first task has no validation labels")?;
        }
        let better = maes[0] < maes[1];
        wins += usize::from(better);
        println!(
            "seed {s}: val MAE with reciprocal {:.6}, without {:.6}{}",
            maes[0],
            maes[1],
            if better { "  (reciprocal better)" } else { "" }
        );
        rows.push(json!({"seed": s, "with_reciprocal": maes[0], "without_reciprocal": maes[1]}));
    }
    println!(
        "reciprocal block better in {wins} of {} seeds",
        a.seeds.len()
    );
    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("ablation.json"),
        serde_json::to_string_pretty(&json!({"runs": rows, "reciprocal_wins": wins}))?,
    )?;
    Ok(Outcome::Ok)
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<Outcome> {
    let targets = a
        .targets
        .iter()
        .map(|t| match t.as_str() {
            "long_range" => Ok(SyntheticTarget::LongRange),
            "composition" => Ok(SyntheticTarget::Composition),
            other => bail!("unknown synthetic target `{other}` (long_range, composition)"),
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = SyntheticConfig {
        num_structures: a.count,
        min_atoms: a.min_atoms,
        max_atoms: a.max_atoms,
        targets,
        missing_fraction: a.missing,
        seed,
    };
    let data = generate(&cfg)?;
    save_dataset(&a.out, &data)?;
    println!("wrote {} structures to {}", data.len(), a.out.display());
    Ok(Outcome::Ok)
}
