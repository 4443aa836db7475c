use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mambaloc::bench::bench_scan;
use mambaloc::data::{save_dataset, synthesize};
use mambaloc::distill::DistillConfig;
use mambaloc::train::{self, write_atomic, TrainConfig, Trained};
use mambaloc::Error;

#[derive(Parser)]
#[command(name = "mambaloc", version, about = "Selective-SSM camera pose regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run record and weights.
    Train(Common),
    /// Evaluate saved weights on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Train the gis, classical and off arms on identical data.
    Ablate(Common),
    /// Train at several training-set fractions.
    SparseSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fractions, e.g. `1,1/10,1/20`.
        #[arg(long, default_value = "1,1/10,1/20")]
        fractions: String,
    },
    /// Distil a saved teacher into a half-width student.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher model file; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        temperature: f64,
        /// Use KL(student ‖ teacher) instead of KL(teacher ‖ student).
        #[arg(long)]
        reverse_kl: bool,
    },
    /// Time the sequential and chunked scans over sequence lengths.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096,16384")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the synthetic scene and write `train/` and `test/` datasets.
    GenData(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    gis_mode: Option<String>,
    /// Training-set fraction: 1, 1/2, 1/3, 1/10 or 1/20.
    #[arg(long)]
    sparsity: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        let flags = [
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("gis_mode", self.gis_mode.clone()),
            ("sparsity", self.sparsity.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("max_epochs", self.epochs.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &TrainConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn parse_fraction(s: &str) -> Result<f64, Error> {
    let bad = || Error::Config(format!("bad fraction `{s}`"));
    match s.split_once('/') {
        Some((a, b)) => Ok(a.trim().parse::<f64>().map_err(|_| bad())? / b.trim().parse::<f64>().map_err(|_| bad())?),
        None => s.trim().parse().map_err(|_| bad()),
    }
}

fn save_trained(dir: &Path, t: &Trained) -> Result<(), Error> {
    t.record.save(&dir.join("record.json"))?;
    train::save_model(&dir.join("model.json"), &t.model, &t.store)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let t = train::train(&cfg)?;
            let dir = out_dir(&cfg);
            save_trained(&dir, &t)?;
            let m = &t.record.metrics;
            println!(
                "epochs {} best {} median translation {:.4} rotation {:.3} deg -> {}",
                t.record.epochs.len(),
                t.record.best_epoch,
                m.median_translation_error,
                m.median_rotation_error,
                dir.display()
            );
        }
        Command::Eval { common, model } => {
            let cfg = common.resolve()?;
            let (m, store) = train::load_model(&model)?;
            let splits = train::prepare_data(&cfg)?;
            let metrics = m.evaluate(&store, &splits.test)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate(common) => {
            let cfg = common.resolve()?;
            let a = train::ablate(&cfg)?;
            json(&out_dir(&cfg).join("ablation.json"), &a)?;
            print!("{}", a.table());
        }
        Command::SparseSweep { common, fractions } => {
            let cfg = common.resolve()?;
            let fr = fractions.split(',').map(parse_fraction).collect::<Result<Vec<_>, _>>()?;
            let pts = train::sparse_sweep(&cfg, &fr)?;
            json(&out_dir(&cfg).join("sweep.json"), &pts)?;
            println!("{:>10} {:>10} {:>12}", "fraction", "t_med", "degradation");
            for p in &pts {
                println!(
                    "{:>10.4} {:>10.4} {:>12.3}",
                    p.fraction, p.record.metrics.median_translation_error, p.degradation
                );
            }
        }
        Command::Distill {
            common,
            teacher,
            temperature,
            reverse_kl,
        } => {
            let cfg = common.resolve()?;
            let dir = out_dir(&cfg);
            let splits = train::prepare_data(&cfg)?;
            let (model, store, teacher_err) = match teacher {
                Some(path) => {
                    let (model, store) = train::load_model(&path)?;
                    let err = model.evaluate(&store, &splits.test)?.median_translation_error;
                    (model, store, err)
                }
                None => {
                    let t = train::train_on(&cfg, &splits, "teacher")?;
                    save_trained(&dir.join("teacher"), &t)?;
                    (t.model, t.store, t.record.metrics.median_translation_error)
                }
            };
            let dcfg = DistillConfig {
                temperature,
                direction: if reverse_kl {
                    mambaloc::distill::KlDirection::StudentTeacher
                } else {
                    mambaloc::distill::KlDirection::TeacherStudent
                },
                ..DistillConfig::default()
            };
            let s = train::distill(&cfg, &dcfg, (&model, &store), &splits)?;
            save_trained(&dir.join("student"), &s)?;
            println!(
                "teacher {:.4} student {:.4} ratio {:.3}",
                teacher_err,
                s.record.metrics.median_translation_error,
                s.record.metrics.median_translation_error / teacher_err
            );
        }
        Command::BenchScan {
            lengths,
            d,
            n,
            b,
            reps,
            out,
        } => {
            let rep = bench_scan(&lengths, d, n, b, reps)?;
            let csv = rep.to_csv();
            match out {
                Some(p) => write_atomic(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
            eprintln!("log-log slope {:.4}, R^2 {:.4}", rep.slope, rep.r_squared);
        }
        Command::GenData(common) => {
            let cfg = common.resolve()?;
            let dir = out_dir(&cfg);
            let s = synthesize(&cfg.scene)?;
            save_dataset(&dir.join("train"), &s.train)?;
            save_dataset(&dir.join("test"), &s.test)?;
            println!("{} train / {} test frames -> {}", s.train.len(), s.test.len(), dir.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::FractionOutOfRange(_) | Error::Parse { .. } | Error::Json(_) => 2,
        Error::NonFiniteLoss { .. } | Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
