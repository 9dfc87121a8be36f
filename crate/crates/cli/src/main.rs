use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use noisereg::config::{parse_noise, ExperimentConfig};
use noisereg::data::{read_dataset, write_dataset};
use noisereg::diagnostics::{mean_lid_over_batches, LidConfig};
use noisereg::experiment::{generate_dataset, run_experiment};
use noisereg::jacobian::{mc_jacobian_norm, mean_exact_frob_sq, sample_bound};
use noisereg::mlp::{read_checkpoint, write_checkpoint, MlpModel};
use noisereg::noise::{corrupt, LabeledDataset};
use noisereg::variance_reg::PredictionSpace;
use noisereg::{Error, RngStream};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "noisereg", version, about = "Variance-regularized training under label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, or one per λ in a grid.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "noisereg-out")]
        out: PathBuf,
        /// Comma-separated λ_max values; each gets its own subdirectory.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
    },
    /// Write the clean dataset a config describes.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt the clean labels of a dataset file.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        noise: NoiseKind,
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Uniform noise may also redraw the true class.
        #[arg(long)]
        allow_self_flip: bool,
    },
    /// Mean LID of a checkpoint's last hidden layer over batches of a dataset.
    DiagnoseLid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        batches: usize,
    },
    /// Exact and Monte-Carlo mean squared Jacobian norm of a checkpoint.
    EstimateJacobian {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Space::Probabilities)]
        space: Space,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    Uniform,
    Asym10,
    Circular,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Logits,
    Probabilities,
}

impl From<Space> for PredictionSpace {
    fn from(s: Space) -> Self {
        match s {
            Space::Logits => PredictionSpace::Logits,
            Space::Probabilities => PredictionSpace::Probabilities,
        }
    }
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGED,
            Error::Config(_) | Error::Parameter(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn config_error(msg: String) -> Failure {
    Failure { code: EXIT_CONFIG, msg }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_FAILURE, msg: format!("{}: {e}", path.display()) }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out, lambda_grid } => train(&config, seed, &out, lambda_grid),
        Command::Generate { config, seed, out } => generate(&config, seed, &out),
        Command::Corrupt { input, noise, eta, seed, out, allow_self_flip } => {
            corrupt_file(&input, noise, eta, seed, allow_self_flip, &out)
        }
        Command::DiagnoseLid { checkpoint, data, k, batch, batches } => {
            diagnose_lid(&checkpoint, &data, k, batch, batches)
        }
        Command::EstimateJacobian { checkpoint, sigma, pairs, data, space, seed } => {
            estimate_jacobian(&checkpoint, sigma, pairs, &data, space.into(), seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("noisereg: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| config_error(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(cfg)
}

fn thread_cap() -> Result<usize, Failure> {
    match std::env::var("NOISEREG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(config_error(format!("NOISEREG_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn train(config: &Path, seed: Option<u64>, out: &Path, grid: Option<Vec<f64>>) -> Result<(), Failure> {
    let base = load_config(config, seed)?;
    let runs: Vec<(ExperimentConfig, PathBuf)> = match grid {
        None => vec![(base, out.to_path_buf())],
        Some(lambdas) => lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mut cfg = base.clone();
                cfg.regularizer.lambda_max = l;
                cfg.validate().map_err(|e| config_error(e.to_string()))?;
                Ok((cfg, out.join(format!("run-{i}"))))
            })
            .collect::<Result<_, Failure>>()?,
    };
    let threads = thread_cap()?.min(runs.len());

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<String, Failure>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, dir)) = runs.get(i) else { break };
                let r = train_one(cfg, i as u64, dir);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });

    let mut worst: Option<Failure> = None;
    for (i, r) in results.into_inner().unwrap().into_iter().enumerate() {
        match r.expect("every grid entry runs") {
            Ok(summary) => println!("{summary}"),
            Err(f) => {
                eprintln!("noisereg: run {i}: {}", f.msg);
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(f) => Err(Failure { code: f.code, msg: "one or more runs failed".into() }),
    }
}

fn train_one(cfg: &ExperimentConfig, stream_id: u64, dir: &Path) -> Result<String, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?);
    let out = run_experiment(cfg, stream_id, Some(&mut metrics));
    metrics.flush().map_err(|e| io_error(&metrics_path, e))?;
    let out = out?;
    let ckpt = dir.join("model.ckpt");
    write_checkpoint(&out.model, BufWriter::new(File::create(&ckpt).map_err(|e| io_error(&ckpt, e))?))?;
    let last = out.rows.last().expect("at least one epoch");
    Ok(format!(
        "{}: lambda_max={} epochs={} test_acc={:.4} train_acc_vs_noisy={:.4} label_precision={:.4} lid_mean={:.4}",
        dir.display(),
        cfg.regularizer.lambda_max,
        last.epoch,
        last.test_acc,
        last.train_acc_vs_noisy,
        last.label_precision,
        last.lid_mean
    ))
}

fn generate(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, seed)?;
    let ds = generate_dataset(&cfg, 0)?;
    save_dataset(&ds, out)?;
    println!("wrote {} examples, {} features, {} classes to {}", ds.len(), ds.dim(), ds.num_classes, out.display());
    Ok(())
}

fn load_dataset_file(path: &Path) -> Result<LabeledDataset, Failure> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    Ok(read_dataset(BufReader::new(f))?)
}

fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), Failure> {
    let f = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(f);
    write_dataset(ds, &mut w)?;
    w.flush().map_err(|e| io_error(path, e))
}

fn load_model(path: &Path) -> Result<MlpModel, Failure> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    Ok(read_checkpoint(BufReader::new(f))?)
}

fn corrupt_file(
    input: &Path,
    noise: NoiseKind,
    eta: f64,
    seed: u64,
    allow_self_flip: bool,
    out: &Path,
) -> Result<(), Failure> {
    let name = match noise {
        NoiseKind::Uniform => "uniform",
        NoiseKind::Asym10 => "asym10",
        NoiseKind::Circular => "circular",
    };
    let model = parse_noise(name, eta, allow_self_flip).map_err(|e| config_error(e.to_string()))?;
    let ds = load_dataset_file(input)?;
    let t = model.transition_matrix(ds.num_classes).map_err(|e| config_error(e.to_string()))?;
    let noisy = corrupt(&ds, &t, &mut RngStream::new(seed, 0))?;
    save_dataset(&noisy, out)?;
    let flipped = noisy.clean_mask().iter().filter(|c| !**c).count();
    println!("flipped {flipped} of {} labels ({:.4})", noisy.len(), flipped as f64 / noisy.len() as f64);
    Ok(())
}

fn diagnose_lid(checkpoint: &Path, data: &Path, k: usize, batch: usize, batches: usize) -> Result<(), Failure> {
    let model = load_model(checkpoint)?;
    let ds = load_dataset_file(data)?;
    let cfg = LidConfig { k, batch_size: batch, feature_layer: None };
    let lid = mean_lid_over_batches(&model, &ds.features, &cfg, batches)?;
    println!("{lid:.6}");
    Ok(())
}

fn estimate_jacobian(
    checkpoint: &Path,
    sigma: f64,
    pairs: usize,
    data: &Path,
    space: PredictionSpace,
    seed: u64,
) -> Result<(), Failure> {
    let model = load_model(checkpoint)?;
    let ds = load_dataset_file(data)?;
    let exact = mean_exact_frob_sq(&model, &ds.features, space)?;
    let mc = mc_jacobian_norm(&model, &ds.features, sigma, pairs, space, &mut RngStream::new(seed, 0))?;
    let bound = sample_bound(0.1, 0.05)?;
    println!(
        "exact_frob_sq={exact:.6e} mc_estimate={:.6e} std_error={:.6e} sample_bound(eps=0.1,delta=0.05)={bound}",
        mc.estimate, mc.std_error
    );
    Ok(())
}
