use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ecgi_core::diffusion::ScheduleKind;
use ecgi_core::forward_sim::{load_dataset, make_dataset, save_dataset, split_checksum, DatasetConfig, DatasetSplit};
use ecgi_core::harness::{
    classical_config, evaluate, export_traces, log_csv, run_comparison, train, Comparison, ComparisonRow,
    ExperimentConfig, Method, ModelKind, TrainedModel,
};
use ecgi_core::inverse::RegOperator;
use ecgi_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ecgi", version, about = "Conditional diffusion for inverse electrocardiography")]
struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config JSON (unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 6 hearts × 48 beats, one test heart.
    Desk,
    /// 7 hearts, 380 beats, four test hearts.
    Full,
}

#[derive(Args)]
struct DataArg {
    /// Dataset file; falls back to the config's `dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired dataset.
    GenData {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        hearts: Option<usize>,
        #[arg(long)]
        beats_per_heart: Option<usize>,
        #[arg(long)]
        nh: Option<usize>,
        #[arg(long)]
        nb: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        test_hearts: Option<usize>,
    },
    /// Train a learned model and keep its best-validation checkpoint.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// diffusion | cnn1d | lstm | transformer; defaults to the config's model.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw posterior samples for the test split and save their means.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a classical solver on the test split.
    Baseline {
        #[arg(long)]
        method: String,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[command(flatten)]
        data: DataArg,
        /// Report path; defaults to `<out>/baseline_<method>.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and score every method on one split.
    Compare {
        #[command(flatten)]
        data: DataArg,
    },
    /// Write truth/prediction traces for selected electrodes of one test beat.
    ExportTraces {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0)]
        beat: usize,
        /// Electrodes per selection criterion.
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Explicit electrode indices instead of the two criteria.
        #[arg(long, value_delimiter = ',')]
        electrodes: Option<Vec<usize>>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dataset(arg: &DataArg, cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let path = arg
        .data
        .as_ref()
        .or(cfg.dataset.as_ref())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `dataset` in the config".into()))?;
    load_dataset(path)
}

fn write(out: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn single_row(schedule: ScheduleKind, method: &str, report: ecgi_core::harness::MetricsReport) -> Comparison {
    Comparison {
        rows: vec![ComparisonRow {
            method: method.to_owned(),
            result: Ok(report),
        }],
        schedule,
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData {
            preset,
            hearts,
            beats_per_heart,
            nh,
            nb,
            t,
            snr_db,
            test_hearts,
        } => {
            let mut d = match preset {
                Preset::Desk => DatasetConfig::default(),
                Preset::Full => DatasetConfig::full_scale(),
            };
            if hearts.is_some() || beats_per_heart.is_some() {
                d.beat_counts = None;
            }
            d.hearts = hearts.unwrap_or(d.hearts);
            d.beats_per_heart = beats_per_heart.unwrap_or(d.beats_per_heart);
            d.n_h = nh.unwrap_or(d.n_h);
            d.n_b = nb.unwrap_or(d.n_b);
            d.t = t.unwrap_or(d.t);
            d.snr_db = snr_db.unwrap_or(d.snr_db);
            d.test_hearts = test_hearts.unwrap_or(d.test_hearts);
            d.seed = cli.seed.unwrap_or(d.seed);
            let split = make_dataset(&d)?;
            fs::create_dir_all(out)?;
            let path = out.join("dataset.ecgd");
            save_dataset(&split, &path)?;
            println!(
                "{}: train {} / validation {} / test {}, sha256 {}",
                path.display(),
                split.train.len(),
                split.validation.len(),
                split.test.len(),
                split_checksum(&split)
            );
        }
        Command::Train { data, model, epochs } => {
            let mut cfg = cfg.clone();
            if let Some(m) = model {
                cfg.model = ModelKind::parse(m)?;
            }
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            let split = dataset(data, &cfg)?;
            let run = train(&cfg, &split, Some(out))?;
            let name = cfg.model.name();
            fs::create_dir_all(out)?;
            let ckpt = out.join(format!("{name}.ecgi"));
            run.model.save(&ckpt)?;
            let log = write(out, &format!("{name}_log.csv"), &log_csv(&run.log))?;
            println!(
                "{} ({} parameters, best epoch {}), log {}",
                ckpt.display(),
                run.model.param_count(),
                run.model.spec.best_epoch,
                log.display()
            );
        }
        Command::Sample { checkpoint, data, k } => {
            let model = TrainedModel::load(checkpoint)?;
            let mut split = dataset(data, &cfg)?;
            let k = k.unwrap_or(model.spec.diffusion.samples);
            let preds = Method::Trained(&model).predict(&split.test, k, cfg.seed)?;
            for (pair, p) in split.test.iter_mut().zip(preds) {
                pair.beat.potentials = p.mean;
            }
            split.train.clear();
            split.validation.clear();
            split.operators.clear();
            fs::create_dir_all(out)?;
            let path = out.join("samples.ecgd");
            save_dataset(&split, &path)?;
            println!("{}: posterior means of {} test beats, K = {k}", path.display(), split.test.len());
        }
        Command::Evaluate { checkpoint, data, k } => {
            let model = TrainedModel::load(checkpoint)?;
            let split = dataset(data, &cfg)?;
            let k = k.unwrap_or(model.spec.diffusion.samples);
            let mut report = evaluate(&Method::Trained(&model), &split, k, cfg.seed)?;
            report.config_fingerprint = cfg.fingerprint();
            let table = single_row(model.spec.diffusion.schedule, model.spec.kind.name(), report);
            let path = write(out, "report.csv", &table.csv())?;
            print!("{}", table.table());
            println!("{}", path.display());
        }
        Command::Baseline {
            method,
            lambda,
            rank,
            data,
            report,
        } => {
            let kind = ModelKind::parse(method)?;
            let mut cfg = cfg.clone();
            cfg.classical.lambda = lambda.or(cfg.classical.lambda);
            cfg.classical.rank = rank.or(cfg.classical.rank);
            let split = dataset(data, &cfg)?;
            let rc = classical_config(kind, &cfg, &split)?;
            let rep = evaluate(&Method::Classical { kind, cfg: rc.clone(), data: &split }, &split, 1, cfg.seed)?;
            let table = single_row(cfg.diffusion.schedule, kind.name(), rep);
            let path = match report {
                Some(p) => {
                    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(dir)?;
                    }
                    fs::write(p, table.csv())?;
                    p.clone()
                }
                None => write(out, &format!("baseline_{}.csv", kind.name()), &table.csv())?,
            };
            let setting = match (rc.truncation_rank, rc.operator) {
                (Some(k), _) => format!("rank {k}"),
                (None, RegOperator::Identity) => format!("lambda {} with identity", rc.lambda),
                (None, RegOperator::FirstDifference) => format!("lambda {} with graph differences", rc.lambda),
            };
            print!("{}", table.table());
            println!("{setting}; {}", path.display());
        }
        Command::Compare { data } => {
            let split = dataset(data, &cfg)?;
            let cmp = run_comparison(&cfg, &split)?;
            write(out, "comparison.csv", &cmp.csv())?;
            write(out, "comparison.txt", &cmp.table())?;
            print!("{}", cmp.table());
            return Ok(cmp.all_ok());
        }
        Command::ExportTraces {
            checkpoint,
            data,
            beat,
            k,
            electrodes,
            samples,
        } => {
            let model = TrainedModel::load(checkpoint)?;
            let split = dataset(data, &cfg)?;
            let samples = samples.unwrap_or(model.spec.diffusion.samples);
            let t = export_traces(
                &Method::Trained(&model),
                &split,
                *beat,
                *k,
                electrodes.as_deref(),
                samples,
                cfg.seed,
            )?;
            let path = write(out, "traces.csv", &t.csv)?;
            println!("{}: top-CC {:?}, low-MSE {:?}", path.display(), t.by_cc, t.by_mse);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one comparison row failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
