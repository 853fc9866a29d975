use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use cstn::ablate::{self, AblationOptions};
use cstn::checks;
use cstn::data::{self, Dataset};
use cstn::metrics::{read_records, size_histogram, write_records};
use cstn::train::evaluate_paired;
use cstn::{viz, Checkpoint, MetricsReport, Split, TrainConfig, Trainer};

/// Relative output paths resolve against this directory.
const OUTPUT_ROOT_VAR: &str = "CSTN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "cstn", version, about = "Convolutional spatial transformer localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset described by the config to a directory.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint and epoch log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint; overrides may only touch training settings.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint, or recompute metrics from a record file.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Check name, `model`, or `all`.
        #[arg(default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Draw default, transformed and ground-truth boxes for chosen samples.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid and write a combined report.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Transform regularizer weights to sweep.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Skip the plain classifier baseline.
        #[arg(long)]
        no_plain: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one value, e.g. `--set train.lambda=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory; defaults to the config's, else regenerated from its spec.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "val")]
    split: Split,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "records", conflicts_with = "records")]
    checkpoint: Option<PathBuf>,
    /// Existing record stream to summarize instead of running a model.
    #[arg(long)]
    records: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Report default receptive-field boxes instead of transformed ones.
    #[arg(long)]
    no_transform: bool,
    /// Score only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("unknown split {s:?}, expected train or val")),
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        output_root().join(path)
    }
}

/// Inputs are taken as given when they exist, else looked up under the
/// output root where earlier commands wrote them.
fn locate(path: &Path) -> PathBuf {
    if path.exists() {
        path.to_path_buf()
    } else {
        resolve(path)
    }
}

/// `--out`, else the config's output path, else `<root>/<fallback>`.
fn out_dir(out: Option<&Path>, cfg: Option<&TrainConfig>, fallback: &str) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.paths.output.clone()))
        .unwrap_or_else(|| PathBuf::from(fallback));
    let dir = resolve(&dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dataset_for(cfg: &TrainConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir.map(Path::to_path_buf).or_else(|| cfg.paths.dataset.clone()) {
        Some(d) => {
            let d = locate(&d);
            let ds = data::load(&d).with_context(|| format!("loading dataset {}", d.display()))?;
            ensure!(
                ds.spec.num_classes == cfg.model.num_classes,
                "dataset has {} classes but the model has {}",
                ds.spec.num_classes,
                cfg.model.num_classes
            );
            Ok(ds)
        }
        None => Ok(data::generate(&cfg.data)?),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    let path = &locate(path);
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Trainer::from_checkpoint(&ck)?)
}

fn generate_data(config: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let cfg = config.load()?;
    let dir = out_dir(out, None, "data")?;
    let ds = data::generate(&cfg.data)?;
    data::save(&ds, &dir)?;
    println!("wrote {} train and {} val samples to {}", ds.train.len(), ds.val.len(), dir.display());
    Ok(())
}

fn train(config: &ConfigArgs, resume: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            let mut t = load_trainer(p)?;
            let mut cfg = t.config.clone();
            for o in &config.overrides {
                cfg.apply_override(o)?;
            }
            cfg.validate()?;
            ensure!(
                cfg.model == t.config.model && cfg.data == t.config.data && cfg.seed == t.config.seed,
                "only training settings can change when resuming"
            );
            t.config = cfg;
            t
        }
        None => Trainer::new(config.load()?)?,
    };
    let cfg = trainer.config.clone();
    let dir = out_dir(out, Some(&cfg), "train")?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    let ds = dataset_for(&cfg, None)?;
    let log_path = dir.join("train_log.ndjson");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_err = None;
    let result = trainer.fit(&ds.train, &ds.val, |e| {
        eprintln!(
            "epoch {:3} loss {:.5} (cls {:.5} theta {:.5} scale {:.5}) val cls {} loc {}",
            e.epoch,
            e.loss,
            e.loss_cls,
            e.loss_theta,
            e.loss_scale,
            e.val_top1_class.map_or("-".into(), |v| format!("{v:.3}")),
            e.val_top1_loc.map_or("-".into(), |v| format!("{v:.3}")),
        );
        let line = serde_json::to_string(e).expect("plain struct");
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
    });
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e).context("writing the epoch log");
    }
    if let Err(e) = result {
        let dump = dir.join("abort.txt");
        write_file(&dump, &format!("{e}\n"))?;
        return Err(e).context(format!("training aborted, diagnostics in {}", dump.display()));
    }
    let ck_path = dir.join("checkpoint.bin");
    trainer.to_checkpoint().save(&ck_path)?;
    println!("wrote {}", ck_path.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    if let Some(path) = &args.records {
        let path = &locate(path);
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records = read_records(BufReader::new(file), path)?;
        println!("{}", MetricsReport::from_records(&records).to_json());
        return Ok(());
    }
    let ck = args.checkpoint.as_deref().expect("clap requires one of the two");
    let mut trainer = load_trainer(ck)?;
    let cfg = trainer.config.clone();
    let ds = dataset_for(&cfg, args.data.dataset.as_deref())?;
    let mut samples = ds.split(args.data.split);
    if let Some(n) = args.limit {
        samples = &samples[..n.min(samples.len())];
    }
    let paired = evaluate_paired(&mut trainer.model, samples, cfg.eval.batch_size)?;
    let use_transform = cfg.eval.use_transform && !args.no_transform;
    let records = if use_transform { &paired.transformed } else { &paired.default };
    let dir = out_dir(args.out.as_deref(), None, "eval")?;
    write_records(BufWriter::new(File::create(dir.join("records.ndjson"))?), records)?;
    let report = MetricsReport::from_records(records).to_json();
    write_file(&dir.join("metrics.json"), &report)?;
    let hist = size_histogram(&paired.transformed, &paired.default, ["transformed", "default"])?;
    write_file(&dir.join("histogram.txt"), &hist.table())?;
    write_file(&dir.join("histogram.svg"), &hist.svg())?;
    println!("{report}");
    print!("{}", hist.table());
    Ok(())
}

fn gradcheck(scope: &str, seeds: u64, first_seed: u64, corrupt: bool) -> Result<bool> {
    let selected: Vec<&checks::Check> = if scope == "all" {
        checks::registry().iter().collect()
    } else {
        vec![checks::find(scope)?]
    };
    ensure!(seeds > 0, "--seeds must be positive");
    let mut all_passed = true;
    for c in selected {
        let mut worst: Option<cstn::autodiff::gradcheck::GradcheckReport> = None;
        let mut failures = 0;
        for seed in first_seed..first_seed + seeds {
            let r = c.run(seed, corrupt)?;
            failures += usize::from(!r.passed);
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        let worst = worst.expect("at least one seed");
        all_passed &= failures == 0;
        println!(
            "{:<20} {} {}/{} seeds, worst {:.3e} (tolerance {:.0e})",
            c.name,
            if failures == 0 { "PASS" } else { "FAIL" },
            seeds as usize - failures,
            seeds,
            worst.max_rel_error,
            worst.tolerance
        );
    }
    Ok(all_passed)
}

fn visualize(checkpoint: &Path, data_args: &DataArgs, ids: &[usize], out: Option<&Path>) -> Result<()> {
    let mut trainer = load_trainer(checkpoint)?;
    let cfg = trainer.config.clone();
    let ds = dataset_for(&cfg, data_args.dataset.as_deref())?;
    let split = ds.split(data_args.split);
    let mut wanted = Vec::new();
    let mut skipped = 0;
    for &id in ids {
        match split.iter().find(|s| s.id == id) {
            Some(s) => wanted.push(s.clone()),
            None => {
                eprintln!("warning: no sample with id {id} in the {} split", data_args.split.as_str());
                skipped += 1;
            }
        }
    }
    let dir = out_dir(out, None, "viz")?;
    let paired = evaluate_paired(&mut trainer.model, &wanted, cfg.eval.batch_size)?;
    for (i, s) in wanted.iter().enumerate() {
        let svg = viz::sample_svg(s, &paired.transformed[i], &paired.default[i])?;
        write_file(&dir.join(format!("sample_{}.svg", s.id)), &svg)?;
    }
    println!("wrote {} files to {}, skipped {skipped} missing ids", wanted.len(), dir.display());
    Ok(())
}

fn run_ablation(config: &ConfigArgs, lambdas: Option<&[f64]>, no_plain: bool, out: Option<&Path>) -> Result<()> {
    let cfg = config.load()?;
    let dir = out_dir(out, Some(&cfg), "ablate")?;
    let ds = dataset_for(&cfg, None)?;
    let mut opts = AblationOptions::default();
    if let Some(l) = lambdas {
        ensure!(l.iter().all(|v| *v >= 0.0), "lambdas must be non-negative");
        opts.lambdas = l.to_vec();
    }
    opts.plain_baseline = !no_plain;
    let report = ablate::run(&cfg, &ds.train, &ds.val, &opts, |line| eprintln!("{line}"))?;
    write_file(&dir.join("report.txt"), &report.text())?;
    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("transform_histogram.svg"), &report.transform_histogram.svg())?;
    write_file(&dir.join("level_histogram.svg"), &report.level_histogram.svg())?;
    print!("{}", report.text());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData { config, out } => generate_data(&config, out.as_deref())?,
        Command::Train { config, resume, out } => train(&config, resume.as_deref(), out.as_deref())?,
        Command::Eval(args) => eval(&args)?,
        Command::Gradcheck {
            scope,
            seeds,
            first_seed,
            corrupt,
        } => {
            if !gradcheck(&scope, seeds, first_seed, corrupt)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Viz {
            checkpoint,
            data,
            ids,
            out,
        } => visualize(&checkpoint, &data, &ids, out.as_deref())?,
        Command::Ablate {
            config,
            lambdas,
            no_plain,
            out,
        } => run_ablation(&config, lambdas.as_deref(), no_plain, out.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
