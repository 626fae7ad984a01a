use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bcnn::checkpoint::{self, write_atomic};
use bcnn::config::{parse_grid, RunConfig};
use bcnn::eval::{evaluate, perturbation_sweep, sweep_csv};
use bcnn::perturb::TransformKind;
use bcnn::preprocess::{decode_image, load_dataset, make_split, ImageRecord};
use bcnn::toy::{self, ToyConfig};
use bcnn::train::train;
use bcnn::{Detector, Error};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One-class Bayesian CNN: train on real images, flag the rest as synthetic.
///
/// Without --config the reduced 32x32 network is used with batch size 32,
/// lr0 0.01, 20 epochs, alpha 0.01, beta 100, split 0.8 and a 5th-percentile
/// threshold. Config files hold `key = value` lines; flags override them.
#[derive(Parser, Debug)]
#[command(name = "bcnn", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the split and for training; overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Share of real images used for training; overrides the config
    #[arg(long)]
    split: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on real/ images and write model.ckpt plus train_report.csv
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root holding real/ and anomalous-<name>/
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Score an image or every image in a directory
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory
        path: PathBuf,
        /// CSV destination (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-source AP and mAP on the test split; writes eval.csv and histogram.csv
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// mAP under a post-processing transform; writes sweep_<transform>.csv
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// blur (sigma), jpeg (quality) or resize (factor)
        #[arg(long)]
        transform: String,
        /// Comma-separated parameters, e.g. 0,1,2,4 or 1/2,1/4
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the procedural toy dataset as PPM files
    MakeToy {
        #[arg(long, default_value_t = 2000)]
        n_real: usize,
        #[arg(long, default_value_t = 2000)]
        n_anomalous: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(Error::InvalidArgument(_) | Error::Config { .. }) => 1,
            Failure::Lib(Error::Numerical(_)) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("cannot read config {}: {io}", p.display())),
            other => Failure::Lib(other),
        })?,
        None => RunConfig::toy(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(f) = common.split {
        cfg.split = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let p = dir.join(name);
    write_atomic(&p, text.as_bytes())?;
    Ok(p)
}

fn cmd_train(common: &Common, data: &Path, out: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let pool = load_dataset(data)?;
    let split = make_split(&pool, cfg.split, cfg.train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let init = Detector::new(cfg.arch, cfg.train.alpha, cfg.train.beta, &mut rng)?;
    let (det, report) = train(init, &pool, &split, &cfg.train)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    checkpoint::save(&det, &out.join("model.ckpt"))?;
    write_out(out, "train_report.csv", &report.to_csv())?;
    match report.best_metric() {
        Some(m) => println!("best validation metric {m} at epoch {}", report.best_epoch.unwrap_or(0)),
        None => println!("no epochs run"),
    }
    Ok(())
}

fn image_paths(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Failure::Lib(Error::MissingDirectory(path.to_path_buf())));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_score(ckpt: &Path, path: &Path, out: Option<&Path>) -> Outcome {
    let det = checkpoint::load(ckpt)?;
    let gamma = det.gamma.ok_or(Error::Untrained)?;
    let paths = image_paths(path)?;
    if paths.is_empty() {
        return Err(Failure::Lib(Error::EmptyData(format!("no files in {}", path.display()))));
    }
    let mut csv = String::from("path,score,verdict\n");
    let mut ok = 0usize;
    for p in &paths {
        let name = csv_field(&p.display().to_string());
        let scored = fs::read(p)
            .map_err(Error::from)
            .and_then(|b| decode_image(&b))
            .and_then(|img| det.score_images(std::slice::from_ref(&img)));
        match scored {
            Ok(s) => {
                ok += 1;
                let _ = writeln!(csv, "{name},{},{}", s[0], bcnn::eval::classify(s[0], gamma).as_str());
            }
            Err(e) => {
                let _ = writeln!(csv, "{name},,{}", csv_field(&format!("error: {e}")));
            }
        }
    }
    match out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if ok == 0 {
        return Err(Failure::Lib(Error::EmptyData("no image could be scored".into())));
    }
    Ok(())
}

fn eval_setup(common: &Common, ckpt: &Path, data: &Path) -> Result<(Detector, Vec<ImageRecord>, bcnn::preprocess::DatasetSplit), Failure> {
    let cfg = load_config(common)?;
    let det = checkpoint::load(ckpt)?;
    let pool = load_dataset(data)?;
    if pool.iter().all(|r| r.label.is_real()) {
        return Err(Failure::Lib(Error::EmptyData(format!("no anomalous-<name>/ directories under {}", data.display()))));
    }
    let split = make_split(&pool, cfg.split, cfg.train.seed)?;
    Ok((det, pool, split))
}

fn cmd_eval(common: &Common, ckpt: &Path, data: &Path, out: &Path) -> Outcome {
    let (det, pool, split) = eval_setup(common, ckpt, data)?;
    let report = evaluate(&det, &pool, &split)?;
    write_out(out, "eval.csv", &report.to_csv())?;
    write_out(out, "histogram.csv", &report.histogram.to_csv())?;
    println!("mAP {}", report.map);
    Ok(())
}

fn cmd_perturb(common: &Common, ckpt: &Path, data: &Path, transform: &str, grid: &str, out: &Path) -> Outcome {
    let kind: TransformKind = transform.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let grid = parse_grid(grid).map_err(|e| Failure::Usage(e.to_string()))?;
    let (det, pool, split) = eval_setup(common, ckpt, data)?;
    let points = perturbation_sweep(&det, &pool, &split, kind, &grid)?;
    let p = write_out(out, &format!("sweep_{kind}.csv"), &sweep_csv(kind, &points))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn cmd_make_toy(n_real: usize, n_anomalous: usize, seed: u64, out: &Path) -> Outcome {
    let pool = toy::generate(&ToyConfig { n_real, n_anomalous, seed, ..ToyConfig::default() })?;
    toy::write_dataset(out, &pool)?;
    println!("wrote {} images to {}", pool.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.cmd {
        Command::Train { common, data, out } => cmd_train(common, data, out),
        Command::Score { checkpoint, path, out } => cmd_score(checkpoint, path, out.as_deref()),
        Command::Eval { common, checkpoint, data, out } => cmd_eval(common, checkpoint, data, out),
        Command::Perturb { common, checkpoint, data, transform, grid, out } => {
            cmd_perturb(common, checkpoint, data, transform, grid, out)
        }
        Command::MakeToy { n_real, n_anomalous, seed, out } => cmd_make_toy(*n_real, *n_anomalous, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            match f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(code)
        }
    }
}
