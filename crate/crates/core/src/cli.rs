//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 when a verification fails, 2 on usage, input or I/O errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{load_dataset, write_synthetic, SyntheticSpec};
use crate::error::{Result, UktlError};
use crate::kernel::{bases_of, gram_symmetric, Combine, KernelConfig};
use crate::linalg::Matrix;
use crate::model::{grad_check, load_checkpoint, save_checkpoint, train_with_log, Prediction, TrainConfig};
use crate::nystrom::fit_nystrom;
use crate::oracle::nystrom_error_curve;
use crate::pivot::{soft_kmeans, SoftKMeansConfig};
use crate::subspace::tensor_subspaces;
use crate::tensor::format_f64;
use crate::uncertainty::MsnInput;
use crate::verify::{gradcheck_fixture, run_criterion, CRITERIA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "uktl", version, about = "Uncertainty-aware tensor kernel learning on multi-way data")]
struct Cli {
    /// Worker threads (falls back to UKTL_THREADS, then to the machine's parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic subspace-clustered dataset (DIR/train.json, DIR/test.json)
    Gen(GenArgs),
    /// Train a model and write a checkpoint
    Fit(FitArgs),
    /// Write per-sample predictions as CSV (index,label,confidence)
    Predict(PredictArgs),
    /// Print test accuracy as `accuracy=<value>`
    Eval(EvalArgs),
    /// Export the kernel matrix, or Nyström features with --nystrom, as CSV
    Gram(GramArgs),
    /// Nyström relative error for several pivot counts, as CSV
    BenchPivots(BenchArgs),
    /// Compare analytic and finite-difference gradients on a seeded fixture
    Gradcheck(GradcheckArgs),
    /// Run the acceptance suite
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Number of classes
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Samples per class (80% train, 20% test)
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Tensor dimensions, comma separated
    #[arg(long, value_delimiter = ',', default_value = "8,10,12")]
    dims: Vec<usize>,
    /// Per-mode signal rank
    #[arg(long, default_value_t = 4)]
    rank: usize,
    /// Standard deviation of the additive Gaussian noise
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

/// Training and kernel settings. Flags override values from --config, which
/// override the built-in defaults.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    /// JSON file with any subset of the settings below (snake_case keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// SGD learning rate [default: 0.1]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay on matrix weights [default: 1e-4]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Minibatch size [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 60]
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs at which the learning rate decays, comma separated [default: 40,50]
    #[arg(long, value_delimiter = ',')]
    lr_decay_epochs: Option<Vec<usize>>,
    /// Learning-rate decay factor [default: 0.1]
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// Epochs between pivot kernel refreshes [default: 5]
    #[arg(long)]
    refresh_every: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Uncertainty penalty weight [default: 0.01]
    #[arg(long)]
    beta: Option<f64>,
    /// RBF bandwidth [default: 1]
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Initial sum-product weight [default: 0.5]
    #[arg(long)]
    mu: Option<f64>,
    /// Factor combination: sum, product or sum_product [default: sum_product]
    #[arg(long)]
    combine: Option<Combine>,
    /// Learn mu [default: true]
    #[arg(long)]
    learn_mu: Option<bool>,
    /// Learn the log bandwidth [default: false]
    #[arg(long)]
    learn_bandwidth: Option<bool>,
    /// Keep the uncertainty network fixed [default: false]
    #[arg(long)]
    freeze_msn: Option<bool>,
    /// Number of pivots C [default: 16]
    #[arg(long)]
    pivots: Option<usize>,
    /// Soft k-means temperature [default: 1]
    #[arg(long)]
    temperature: Option<f64>,
    /// Soft k-means iteration cap [default: 100]
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    /// Subspace order per mode [default: 4]
    #[arg(long)]
    p: Option<usize>,
    /// Relative eigenvalue clamp for the pivot kernel [default: 1e-8]
    #[arg(long)]
    clamp_eps: Option<f64>,
    /// Uncertainty network input: singular_values or projection_flat [default: singular_values]
    #[arg(long)]
    msn_input: Option<MsnInput>,
    /// Lower uncertainty bound [default: 0.1]
    #[arg(long)]
    sigma_min: Option<f64>,
    /// Upper uncertainty bound [default: 10]
    #[arg(long)]
    sigma_max: Option<f64>,
    /// Scale of the initial uncertainty weights [default: 0.1]
    #[arg(long)]
    msn_init_scale: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| UktlError::io(path, e))?;
                serde_json::from_str(&text)?
            }
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        apply!(
            learning_rate, momentum, weight_decay, batch_size, epochs, lr_decay_epochs, lr_decay_factor,
            refresh_every, seed, beta, bandwidth, mu, combine, learn_mu, learn_bandwidth, freeze_msn, pivots,
            temperature, kmeans_max_iter, p, clamp_eps, msn_input, sigma_min, sigma_max, msn_init_scale
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Training manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Suppress per-epoch log lines
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint written by `fit`
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `fit`
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct GramArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output Nyström features with this many pivots instead of the full kernel
    #[arg(long)]
    nystrom: Option<usize>,
    /// CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pivot counts, comma separated
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    counts: Vec<usize>,
    /// CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Criteria to run, comma separated (all when omitted)
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<u32>>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    configure_threads(cli.threads);
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| std::env::var("UKTL_THREADS").ok()?.parse().ok());
    if let Some(n) = n.filter(|&n| n > 0) {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> UktlError + '_ {
    move |e| UktlError::io(path, e)
}

fn emit(text: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}

pub fn matrix_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| format_f64(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut s = String::from("index,label,confidence\n");
    for (i, p) in preds.iter().enumerate() {
        s.push_str(&format!("{i},{},{}\n", p.label, format_f64(p.confidence)));
    }
    s
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let w = |e: std::io::Error| UktlError::io("<stdout>", e);
    match command {
        Command::Gen(a) => {
            let spec = SyntheticSpec {
                num_classes: a.classes,
                per_class: a.per_class,
                dims: a.dims,
                rank: a.rank,
                noise: a.noise,
                seed: a.seed,
            };
            let (train, test) = write_synthetic(&spec, &a.out)?;
            writeln!(out, "{}\n{}", train.display(), test.display()).map_err(w)?;
        }
        Command::Fit(a) => {
            let cfg = a.config.resolve()?;
            let data = load_dataset(&a.manifest)?;
            let epochs = cfg.epochs;
            let (model, _) = train_with_log(&data.tensors, &data.labels, &cfg, |s| {
                if !a.quiet {
                    let _ = writeln!(
                        err,
                        "epoch {}/{} loss={:.6} train_acc={:.4} lr={} mu={:.4}{}",
                        s.epoch + 1,
                        epochs,
                        s.loss,
                        s.train_accuracy,
                        s.learning_rate,
                        s.mu,
                        if s.refreshed { " refreshed" } else { "" }
                    );
                }
            })?;
            save_checkpoint(&model, &a.out)?;
            writeln!(out, "{}", a.out.display()).map_err(w)?;
        }
        Command::Predict(a) => {
            let model = load_checkpoint(&a.model)?;
            let data = load_dataset(&a.manifest)?;
            emit(&predictions_csv(&model.predict(&data.tensors)?), a.out.as_deref(), out)?;
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.model)?;
            let data = load_dataset(&a.manifest)?;
            let acc = model.evaluate(&data.tensors, &data.labels)?;
            writeln!(out, "accuracy={acc:.4}").map_err(w)?;
        }
        Command::Gram(a) => {
            let cfg = a.config.resolve()?;
            let data = load_dataset(&a.manifest)?;
            let kcfg = KernelConfig {
                bandwidth: cfg.bandwidth,
                mu: cfg.mu,
                combine: cfg.combine,
            };
            let orders = vec![cfg.p; data.dims.len()];
            let items = data
                .tensors
                .iter()
                .map(|t| tensor_subspaces(t, &orders).map(|s| bases_of(&s)))
                .collect::<Result<Vec<_>>>()?;
            let m = match a.nystrom {
                None => gram_symmetric(&items, &kcfg)?,
                Some(c) => {
                    let pcfg = SoftKMeansConfig {
                        clusters: c,
                        temperature: cfg.temperature,
                        max_iter: cfg.kmeans_max_iter,
                        seed: cfg.seed,
                        ..SoftKMeansConfig::default()
                    };
                    let pivots = soft_kmeans(&data.tensors, &pcfg)?
                        .pivots
                        .iter()
                        .map(|z| tensor_subspaces(z, &orders).map(|s| bases_of(&s)))
                        .collect::<Result<Vec<_>>>()?;
                    let mut map = fit_nystrom(pivots, kcfg, cfg.clamp_eps)?;
                    map.embed_fit(&items)?
                }
            };
            emit(&matrix_csv(&m), a.out.as_deref(), out)?;
        }
        Command::BenchPivots(a) => {
            let cfg = a.config.resolve()?;
            let data = load_dataset(&a.manifest)?;
            let kcfg = KernelConfig {
                bandwidth: cfg.bandwidth,
                mu: cfg.mu,
                combine: cfg.combine,
            };
            let orders = vec![cfg.p; data.dims.len()];
            let curve = nystrom_error_curve(&data.tensors, &orders, &kcfg, &a.counts, cfg.seed, cfg.temperature)?;
            let mut s = String::from("pivots,relative_error\n");
            for (c, e) in curve {
                s.push_str(&format!("{c},{}\n", format_f64(e)));
            }
            emit(&s, a.out.as_deref(), out)?;
        }
        Command::Gradcheck(a) => {
            let (model, tensors, labels) = gradcheck_fixture(a.seed)?;
            let report = grad_check(&model, &tensors, &labels, a.step)?;
            for (g, e) in &report.groups {
                writeln!(out, "{}_max_rel_err={e:e}", g.name()).map_err(w)?;
            }
            writeln!(out, "max_rel_err={:e}", report.max_rel_err).map_err(w)?;
            if !(report.max_rel_err <= a.tol) {
                writeln!(err, "gradient check failed: {:e} > {:e}", report.max_rel_err, a.tol).map_err(w)?;
                return Ok(EXIT_FAILED);
            }
        }
        Command::Verify(a) => {
            let ids: Vec<u32> = a.criteria.unwrap_or_else(|| CRITERIA.iter().map(|(i, _)| *i).collect());
            let mut failed = 0;
            for id in ids {
                let r = run_criterion(id);
                write!(out, "{r}").map_err(w)?;
                out.flush().map_err(w)?;
                if !r.passed() {
                    failed += 1;
                }
            }
            writeln!(out, "{}", if failed == 0 { "all criteria passed".to_string() } else { format!("{failed} criteria failed") })
                .map_err(w)?;
            if failed > 0 {
                return Ok(EXIT_FAILED);
            }
        }
    }
    Ok(EXIT_OK)
}
