use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use eprobust::attacks::{attack_suite, cw_attack, pgd_attack, square_attack, AttackConfig, AttackResult, Norm};
use eprobust::bench::checkpoint::Checkpoint;
use eprobust::bench::config::RunConfig;
use eprobust::bench::dataset::{evaluate, load_cifar_binary, CifarVariant, Dataset, Split};
use eprobust::bench::records::{emit_results, load_results, mean_robustness, Format, RunRecord};
use eprobust::corruptions::{corruption_sweep, CorruptionKind, SeverityTable};
use eprobust::model::{accuracy, Model, ModelKind};
use eprobust::train::{self, TrainConfig};
use eprobust::uncertainty::{bootstrap_exponent, disagreement_curve, fit_exponent};
use eprobust::{Error, Result};

/// Number of worker threads; unset means one per core.
const THREADS_ENV: &str = "EPROBUST_THREADS";

#[derive(Parser)]
#[command(name = "eprobust", version, about = "Train energy models with equilibrium propagation and benchmark their robustness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// `synth` (regenerated from the checkpoint's config) or a CIFAR binary file.
    #[arg(long, default_value = "synth")]
    data: String,
    /// Parse `--data` as CIFAR-100 (two label bytes per record).
    #[arg(long)]
    cifar100: bool,
    /// Use only the first N examples.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long, value_parser = ModelKind::parse)]
        model: ModelKind,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `synth` or a CIFAR binary training file.
        #[arg(long, default_value = "synth")]
        data: String,
        /// Held-out data for per-epoch validation (`synth` or a CIFAR file).
        #[arg(long)]
        val: Option<String>,
        #[arg(long)]
        cifar100: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Robust accuracy under an attack family over a list of budgets.
    Attack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = ["pgd", "cw", "square", "suite"])]
        family: String,
        #[arg(long, value_parser = Norm::parse, default_value = "linf")]
        norm: Norm,
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.05,0.1")]
        eps: Vec<f64>,
        /// Comma-separated C&W constants.
        #[arg(long, value_delimiter = ',', default_value = "0.005,0.01,0.1,1.0")]
        cw_c: Vec<f64>,
        /// PGD iterations (C&W uses 100 unless given).
        #[arg(long)]
        steps: Option<usize>,
        /// Free-phase step to attack: a number, `auto` for the measured
        /// convergence step, or `free` for the configured t_free.
        #[arg(long, default_value = "auto")]
        timestep: String,
        #[arg(long, default_value_t = 5000)]
        query_budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy under natural corruptions.
    Corrupt {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated kinds, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        kinds: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        severities: Vec<u8>,
        /// Alternative severity table file.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Disagreement curve and uncertainty exponent.
    Uncertainty {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        eps_grid: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, value_parser = Norm::parse, default_value = "l2")]
        norm: Norm,
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        /// JSON file for the curve and fit.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print result files and optionally their mean robustness.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        mean_robustness: bool,
    },
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            model,
            config,
            data,
            val,
            cifar100,
            out,
        } => cmd_train(model, config.as_deref(), &data, val.as_deref(), cifar100, &out),
        Command::Eval { ckpt, data, out } => cmd_eval(&ckpt, &data, out.as_deref()),
        Command::Attack {
            ckpt,
            family,
            norm,
            eps,
            cw_c,
            steps,
            timestep,
            query_budget,
            seed,
            data,
            out,
        } => {
            let opts = AttackOpts {
                family,
                norm,
                eps,
                cw_c,
                steps,
                timestep,
                query_budget,
                seed,
            };
            cmd_attack(&ckpt, &opts, &data, &out)
        }
        Command::Corrupt {
            ckpt,
            kinds,
            severities,
            table,
            seed,
            data,
            out,
        } => cmd_corrupt(&ckpt, &kinds, &severities, table.as_deref(), seed, &data, &out),
        Command::Uncertainty {
            ckpt,
            eps_grid,
            samples,
            norm,
            bootstrap,
            seed,
            data,
            out,
        } => cmd_uncertainty(&ckpt, &eps_grid, samples, norm, bootstrap, seed, &data, out.as_deref()),
        Command::Report { inputs, mean_robustness } => cmd_report(&inputs, mean_robustness),
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => RunConfig::parse(""),
    }
}

fn load_data(spec: &str, cfg: &RunConfig, cifar100: bool, split: Split) -> Result<Dataset> {
    if spec == "synth" {
        return cfg.synth_split(split);
    }
    let variant = if cifar100 { CifarVariant::Cifar100 } else { CifarVariant::Cifar10 };
    load_cifar_binary(Path::new(spec), variant, split)
}

fn cmd_train(kind: ModelKind, config: Option<&Path>, data: &str, val: Option<&str>, cifar100: bool, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let train_set = load_data(data, &cfg, cifar100, Split::Train)?;
    let val_set = val.map(|v| load_data(v, &cfg, cifar100, Split::Val)).transpose()?;
    let mut tcfg: TrainConfig = cfg.train.clone();
    if kind == ModelKind::Adv {
        tcfg.adversarial = Some(cfg.adversarial);
    }
    let start = Instant::now();
    let (model, history) = train::train(kind, &train_set, val_set.as_ref(), &cfg.spec, &tcfg)?;
    for e in &history.epochs {
        match e.val_accuracy {
            Some(v) => println!("epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.train_accuracy, v),
            None => println!("epoch {:>3}  loss {:.4}  train {:.4}", e.epoch, e.train_loss, e.train_accuracy),
        }
    }
    println!("trained {} model in {:.1}s", kind.as_str(), start.elapsed().as_secs_f64());
    Checkpoint {
        model,
        config: cfg.to_text(),
        seed: tcfg.seed,
    }
    .save(out)
}

struct Loaded {
    ckpt: Checkpoint,
    name: String,
    data: Dataset,
}

fn load_for_eval(path: &Path, data: &DataArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config)?;
    let mut set = load_data(&data.data, &cfg, data.cifar100, Split::Test)?;
    if let Some(n) = data.subset {
        set = set.head(n);
    }
    if set.is_empty() {
        return Err(Error::invalid("eval", "no evaluation examples"));
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    Ok(Loaded { ckpt, name, data: set })
}

#[allow(clippy::too_many_arguments)]
fn record(l: &Loaded, attack: &str, norm: &str, strength: f64, severity: Option<u8>, acc: f64, ms: u128, seed: u64) -> RunRecord {
    RunRecord {
        model: l.name.clone(),
        attack: attack.into(),
        norm: norm.into(),
        strength,
        severity,
        accuracy: acc,
        n: l.data.len(),
        seed,
        wall_ms: ms as u64,
    }
}

fn emit(records: &[RunRecord], out: &Path) -> Result<()> {
    emit_results(records, out, Format::from_path(out))?;
    println!("wrote {} rows to {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval(path: &Path, data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let l = load_for_eval(path, data)?;
    let t = Instant::now();
    let acc = evaluate(&l.ckpt.model, &l.data, 256)?;
    println!("{} clean accuracy {acc:.4} on {} examples", l.name, l.data.len());
    if let Some(out) = out {
        emit(&[record(&l, "clean", "", 0.0, None, acc, t.elapsed().as_millis(), l.ckpt.seed)], out)?;
    }
    Ok(())
}

struct AttackOpts {
    family: String,
    norm: Norm,
    eps: Vec<f64>,
    cw_c: Vec<f64>,
    steps: Option<usize>,
    timestep: String,
    query_budget: usize,
    seed: u64,
}

fn resolve_timestep(model: &Model, spec: &str, xs: &[eprobust::tensor::Tensor]) -> Result<Option<usize>> {
    if model.kind != ModelKind::Ep {
        return Ok(None);
    }
    match spec {
        "auto" => model.convergence_step(xs).map(Some),
        "free" => Ok(Some(model.spec.t_free)),
        n => n
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid("attack", format!("--timestep must be a number, auto or free; got {n:?}"))),
    }
}

fn cmd_attack(path: &Path, o: &AttackOpts, data: &DataArgs, out: &Path) -> Result<()> {
    let l = load_for_eval(path, data)?;
    let xs = &l.data.images;
    let ys = &l.data.labels;
    let mut model = l.ckpt.model.clone();
    if let Some(t) = resolve_timestep(&model, &o.timestep, xs)? {
        println!("attacking free-phase step {t}");
        model = model.with_timestep(t);
    }
    let t0 = Instant::now();
    let clean = accuracy(&model, xs, ys)?;
    let mut rows = vec![record(&l, "clean", "", 0.0, None, clean, t0.elapsed().as_millis(), o.seed)];
    println!("clean accuracy {clean:.4}");
    let configure = |mut c: AttackConfig| {
        if let Some(s) = o.steps {
            c.steps = s;
        }
        c.query_budget = o.query_budget;
        c.seed = o.seed;
        c
    };
    let report = |rows: &mut Vec<RunRecord>, name: &str, norm: Norm, strength: f64, r: &AttackResult, t: Instant| {
        println!("{name:<7} {:<4} {strength:<8} robust accuracy {:.4}", norm.as_str(), r.robust_accuracy());
        rows.push(record(&l, name, norm.as_str(), strength, None, r.robust_accuracy(), t.elapsed().as_millis(), o.seed));
    };
    match o.family.as_str() {
        "pgd" => {
            for &eps in &o.eps {
                let t = Instant::now();
                let r = pgd_attack(&model, xs, ys, &configure(AttackConfig::pgd(o.norm, eps)))?;
                report(&mut rows, "pgd", o.norm, eps, &r, t);
            }
        }
        "square" => {
            for &eps in &o.eps {
                let t = Instant::now();
                let r = square_attack(&model, xs, ys, &configure(AttackConfig::square(eps)))?;
                report(&mut rows, "square", Norm::Linf, eps, &r, t);
            }
        }
        "cw" => {
            for &c in &o.cw_c {
                let t = Instant::now();
                let mut cfg = configure(AttackConfig::cw(c));
                cfg.steps = o.steps.unwrap_or(100);
                let r = cw_attack(&model, xs, ys, &cfg)?;
                report(&mut rows, "cw", Norm::L2, c, &r, t);
            }
        }
        _ => {
            for &eps in &o.eps {
                let t = Instant::now();
                let mut attacks = vec![configure(AttackConfig::pgd(o.norm, eps))];
                match o.norm {
                    Norm::Linf => attacks.push(configure(AttackConfig::square(eps))),
                    Norm::L2 => {
                        let mut cw = configure(AttackConfig::cw(1.0));
                        cw.steps = 100;
                        cw.epsilon = eps;
                        attacks.push(cw);
                    }
                }
                let s = attack_suite(&model, xs, ys, &attacks)?;
                for (cfg, r) in &s.runs {
                    report(&mut rows, cfg.family.as_str(), cfg.norm, eps, r, t);
                }
                let worst = s.worst_case_accuracy();
                println!("suite   {:<4} {eps:<8} worst-case accuracy {worst:.4}", o.norm.as_str());
                rows.push(record(&l, "suite", o.norm.as_str(), eps, None, worst, t.elapsed().as_millis(), o.seed));
            }
        }
    }
    emit(&rows, out)
}

fn cmd_corrupt(path: &Path, kinds: &[String], severities: &[u8], table: Option<&Path>, seed: u64, data: &DataArgs, out: &Path) -> Result<()> {
    let l = load_for_eval(path, data)?;
    let table = match table {
        Some(p) => SeverityTable::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SeverityTable::default(),
    };
    let kinds: Vec<CorruptionKind> = if kinds.iter().any(|k| k == "all") {
        CorruptionKind::ALL.to_vec()
    } else {
        kinds.iter().map(|k| CorruptionKind::parse(k)).collect::<Result<_>>()?
    };
    let t = Instant::now();
    let grid = corruption_sweep(&l.ckpt.model, &l.data, &kinds, severities, &table, seed)?;
    let ms = t.elapsed().as_millis();
    println!("clean accuracy {:.4}", grid.clean);
    let mut rows = vec![record(&l, "clean", "", 0.0, None, grid.clean, ms, seed)];
    for c in &grid.cells {
        println!("{:<15} severity {}  accuracy {:.4}", c.kind.as_str(), c.severity, c.accuracy);
        rows.push(record(&l, c.kind.as_str(), "", 0.0, Some(c.severity), c.accuracy, ms, seed));
    }
    emit(&rows, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_uncertainty(
    path: &Path,
    grid: &[f64],
    samples: usize,
    norm: Norm,
    bootstrap: usize,
    seed: u64,
    data: &DataArgs,
    out: Option<&Path>,
) -> Result<()> {
    let l = load_for_eval(path, data)?;
    let curve = disagreement_curve(&l.ckpt.model, &l.data.images, norm, grid, samples, seed)?;
    for ((e, r), (lo, hi)) in curve.eps.iter().zip(curve.rates()).zip(curve.intervals()) {
        println!("eps {e:<10} disagreement {r:.5}  [{lo:.5}, {hi:.5}]");
    }
    let fit = fit_exponent(&curve);
    let ci = bootstrap_exponent(&curve, bootstrap, 0.95, seed);
    match &fit {
        Ok(f) => println!("alpha {:.4} over eps in [{}, {}] ({} cells)", f.alpha, f.fit_range.0, f.fit_range.1, f.cells),
        Err(e) => println!("no fit: {e}"),
    }
    if let Some((lo, hi)) = ci {
        println!("bootstrap 95% interval [{lo:.4}, {hi:.4}]");
    }
    if let Some(out) = out {
        let doc = serde_json::json!({
            "model": l.name,
            "curve": curve,
            "rates": curve.rates(),
            "intervals": curve.intervals(),
            "fit": fit.as_ref().ok(),
            "bootstrap": ci,
        });
        std::fs::write(out, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(out, e))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], mean: bool) -> Result<()> {
    let mut all = Vec::new();
    for p in inputs {
        all.extend(load_results(p)?);
    }
    println!("{:<16} {:<16} {:<5} {:>9} {:>4} {:>9} {:>6}", "model", "attack", "norm", "strength", "sev", "accuracy", "n");
    for r in &all {
        let sev = r.severity.map(|s| s.to_string()).unwrap_or_default();
        println!(
            "{:<16} {:<16} {:<5} {:>9} {:>4} {:>9.4} {:>6}",
            r.model, r.attack, r.norm, r.strength, sev, r.accuracy, r.n
        );
    }
    if mean {
        println!("mean_robustness {}", mean_robustness(&all)?);
    }
    Ok(())
}
