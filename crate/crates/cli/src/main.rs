//! `savigp` command-line front end: train, predict, evaluate, verify.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use savigp::error::Error;
use savigp::io::{
    class_indices, inducing_from_data, kmeans_init, load_csv, parse_predictions, predictions_csv, raw_scale,
    read_matrix, ModelArtifact, TargetSpec, SCHEMA_VERSION,
};
use savigp::likelihood::{LikelihoodModel, Task};
use savigp::model::{column_variance, Data, Model, PosteriorKind};
use savigp::optimizer::{fit, OptimizerConfig, OptimizerMode};
use savigp::posterior::{CovStructure, InducingConfig};
use savigp::predict::{evaluate, predict, prediction_state, MetricsReport, PredictOptions};
use savigp::verify::{run_suite, Suite};
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "savigp",
    version,
    about = "Sparse variational inference for latent Gaussian-process models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write it as JSON.
    Train(TrainArgs),
    /// Predict at new inputs with a trained model.
    Predict(PredictArgs),
    /// Score a predictions file against targets.
    Evaluate(EvaluateArgs),
    /// Run the built-in correctness checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LikelihoodArg {
    Gaussian,
    Warped,
    Logistic,
    Softmax,
    Lgcp,
    Gprn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Batch,
    Adadelta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Gradients,
    Exactgp,
    Variance,
    All,
}

/// `fg` or `diag:K`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct PosteriorArg {
    components: usize,
    structure: CovStructure,
}

fn parse_posterior(s: &str) -> Result<PosteriorArg, String> {
    if s == "fg" {
        return Ok(PosteriorArg {
            components: 1,
            structure: CovStructure::Full,
        });
    }
    let k = s
        .strip_prefix("diag:")
        .ok_or_else(|| format!("expected `fg` or `diag:K`, got `{s}`"))?;
    match k.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(PosteriorArg {
            components: k,
            structure: CovStructure::Diagonal,
        }),
        _ => Err(format!("`diag:K` needs a positive integer K, got `{k}`")),
    }
}

fn parse_sparsity(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(r) if r > 0.0 && r <= 1.0 => Ok(r),
        _ => Err(format!("sparsity factor must lie in (0, 1], got `{s}`")),
    }
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("inducing").required(true).args(["num_inducing", "sparsity_factor", "dense"])))]
struct TrainArgs {
    /// Feature CSV.
    #[arg(long)]
    x: PathBuf,
    /// Target CSV.
    #[arg(long)]
    y: PathBuf,
    #[arg(long, value_enum)]
    likelihood: LikelihoodArg,
    /// Number of inducing inputs per latent process.
    #[arg(long)]
    num_inducing: Option<usize>,
    /// Inducing inputs as a fraction of the training set; 1.0 is the dense model.
    #[arg(long, value_parser = parse_sparsity)]
    sparsity_factor: Option<f64>,
    /// Place the inducing inputs at the training inputs.
    #[arg(long)]
    dense: bool,
    #[arg(long, default_value = "fg", value_parser = parse_posterior)]
    posterior: PosteriorArg,
    #[arg(long, value_enum, default_value = "batch")]
    optimizer: OptimizerArg,
    /// Monte Carlo samples per marginal for the expected log likelihood.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Minibatch size for `adadelta`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Global iterations (batch) or epochs (adadelta).
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimize the inducing inputs too.
    #[arg(long)]
    learn_inducing: bool,
    /// Take the first M training inputs instead of k-means centroids.
    #[arg(long)]
    inducing_from_data: bool,
    /// Class count for `softmax` (default: largest label + 1).
    #[arg(long)]
    classes: Option<usize>,
    /// Latent nodes for `gprn`.
    #[arg(long, default_value_t = 1)]
    nodes: usize,
    /// Output model path; the training trace goes to `<out>.trace.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    x: PathBuf,
    /// Observed targets, for log predictive densities.
    #[arg(long)]
    y: Option<PathBuf>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pred_samples: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Training targets; their variance standardizes the squared error.
    #[arg(long)]
    train_y: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
}

/// A failure with its process exit status.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            e if e.is_data_error() => EXIT_DATA,
            _ => EXIT_NUMERICAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("savigp: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Train(a) => train(&a),
        Command::Predict(a) => run_predict(&a),
        Command::Evaluate(a) => run_evaluate(&a),
        Command::Verify(a) => run_verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("savigp: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Honors `SAVIGP_THREADS` as a cap on worker threads.
fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SAVIGP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::usage(format!("SAVIGP_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot configure threads: {e}")))
}

fn target_spec(lik: LikelihoodArg, classes: Option<usize>) -> TargetSpec {
    match lik {
        LikelihoodArg::Gaussian | LikelihoodArg::Gprn => TargetSpec::Standardized,
        // the warping learns the target scale
        LikelihoodArg::Warped | LikelihoodArg::Lgcp => TargetSpec::Raw,
        LikelihoodArg::Logistic => TargetSpec::Classes(Some(2)),
        LikelihoodArg::Softmax => TargetSpec::Classes(classes),
    }
}

fn build_likelihood(args: &TrainArgs, y: &nalgebra::DMatrix<f64>) -> Result<LikelihoodModel, Failure> {
    let var = if y.nrows() > 1 { column_variance(y, 0) } else { 1.0 };
    let noise = 0.1 * if var > 0.0 { var } else { 1.0 };
    Ok(match args.likelihood {
        LikelihoodArg::Gaussian => LikelihoodModel::gaussian(noise),
        LikelihoodArg::Warped => {
            let col = y.column(0);
            LikelihoodModel::warped(noise, col.min(), col.max())
        }
        LikelihoodArg::Logistic => LikelihoodModel::Logistic,
        LikelihoodArg::Softmax => {
            let classes = match args.classes {
                Some(c) => c,
                None => y.column(0).max() as usize + 1,
            };
            if classes < 2 {
                return Err(Failure::usage("softmax needs at least two classes"));
            }
            LikelihoodModel::Softmax { classes }
        }
        LikelihoodArg::Lgcp => LikelihoodModel::PoissonLgcp {
            offset: y.column(0).mean().max(1e-3).ln(),
        },
        LikelihoodArg::Gprn => {
            if args.nodes == 0 {
                return Err(Failure::usage("gprn needs at least one node"));
            }
            LikelihoodModel::Gprn {
                outputs: y.ncols(),
                nodes: args.nodes,
                log_sigma_y: 0.5 * noise.ln(),
                log_sigma_w: None,
            }
        }
    })
}

fn trace_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trace.csv");
    PathBuf::from(s)
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let ds = load_csv(&args.x, &args.y, target_spec(args.likelihood, args.classes))?;
    let lik = build_likelihood(args, &ds.y)?;
    let n = ds.x.nrows();
    let q = lik.num_latent();

    let dense = args.dense || args.sparsity_factor == Some(1.0);
    let inducing = if dense {
        InducingConfig::dense(&ds.x, q)
    } else {
        let m = match (args.num_inducing, args.sparsity_factor) {
            (Some(m), _) => m,
            (None, Some(r)) => ((r * n as f64).ceil() as usize).max(1),
            (None, None) => unreachable!("clap requires one inducing option"),
        };
        if m == 0 || m > n {
            return Err(Failure::usage(format!(
                "number of inducing inputs must lie in 1..={n}, got {m}"
            )));
        }
        let z = if args.inducing_from_data {
            inducing_from_data(&ds.x, m)?
        } else {
            kmeans_init(&ds.x, m, args.seed)?
        };
        InducingConfig::sparse(vec![z; q])?
    };
    let num_inducing = inducing.num_inducing();

    let data = Data::new(ds.x.clone(), ds.y.clone())?;
    let kind = PosteriorKind::Mixture {
        components: args.posterior.components,
        structure: args.posterior.structure,
    };
    let mut model = Model::init(&data, lik, inducing, kind)?;
    let cfg = OptimizerConfig {
        mode: match args.optimizer {
            OptimizerArg::Batch => OptimizerMode::Batch,
            OptimizerArg::Adadelta => OptimizerMode::Stochastic,
        },
        max_global_iters: args.iterations,
        batch_size: args.batch_size,
        samples: args.samples,
        seed: args.seed,
        learn_inducing: args.learn_inducing,
        ..Default::default()
    };
    let trace = fit(&mut model, &data, &cfg)?;

    let structure = match args.posterior.structure {
        CovStructure::Full => "full",
        CovStructure::Diagonal => "diagonal",
    };
    let artifact = ModelArtifact {
        schema_version: SCHEMA_VERSION,
        seed: args.seed,
        x_stats: ds.x_stats,
        y_stats: ds.y_stats,
        config: json!({
            "likelihood": model.likelihood.name(),
            "dense": dense,
            "num_inducing": num_inducing,
            "components": args.posterior.components,
            "covariance": structure,
            "inducing_init": if dense { "training" } else if args.inducing_from_data { "data" } else { "kmeans" },
            "optimizer": cfg,
        }),
        model,
    };
    artifact.save(&args.out)?;
    std::fs::write(trace_path(&args.out), trace.to_csv())?;
    eprintln!(
        "trained {} model on {n} points (M = {num_inducing}), final ELBO {:.6}{}",
        artifact.model.likelihood.name(),
        trace.final_total().unwrap_or(f64::NAN),
        if trace.converged {
            ""
        } else {
            " (iteration limit reached)"
        }
    );
    Ok(())
}

fn num_classes(lik: &LikelihoodModel) -> Option<usize> {
    match lik {
        LikelihoodModel::Logistic => Some(2),
        LikelihoodModel::Softmax { classes } => Some(*classes),
        _ => None,
    }
}

fn run_predict(args: &PredictArgs) -> Result<(), Failure> {
    if args.pred_samples == 0 {
        return Err(Failure::usage("--pred-samples must be positive"));
    }
    let art = ModelArtifact::load(&args.model)?;
    let x = art.x_stats.apply(&read_matrix(&args.x)?)?;
    let y = match &args.y {
        None => None,
        Some(path) => {
            let raw = read_matrix(path)?;
            if raw.nrows() != x.nrows() {
                return Err(Error::data(format!("{} input rows but {} target rows", x.nrows(), raw.nrows())).into());
            }
            Some(match (num_classes(&art.model.likelihood), &art.y_stats) {
                (Some(c), _) => class_indices(&raw, Some(c))?,
                (None, Some(s)) => s.apply(&raw)?,
                (None, None) => raw,
            })
        }
    };
    let state = prediction_state(&art.model)?;
    let opts = PredictOptions {
        samples: args.pred_samples,
        seed: art.seed,
    };
    let results = predict(&art.model, &state, &x, y.as_ref(), &opts)?;
    let text = predictions_csv(&raw_scale(&results, art.y_stats.as_ref()));
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn format_report(r: &MetricsReport) -> String {
    let rows = [
        ("sse", r.sse),
        ("rmse", r.rmse),
        ("nlpd", r.nlpd),
        ("error_rate", r.error_rate),
        ("nlp", r.nlp),
    ];
    let mut out = String::from("metric      value\n");
    for (name, v) in rows {
        if let Some(v) = v {
            out.push_str(&format!("{name:<11} {v:.6}\n"));
        }
    }
    out
}

fn run_evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    let preds = parse_predictions(&std::fs::read_to_string(&args.preds)?)?;
    let raw = read_matrix(&args.y)?;
    let (task, targets) = match args.task {
        TaskArg::Regression => (Task::Regression, raw),
        TaskArg::Classification => (Task::Classification, class_indices(&raw, None)?),
    };
    let train_var = match &args.train_y {
        Some(path) => {
            let t = read_matrix(path)?;
            if t.ncols() != targets.ncols() {
                return Err(Error::data("training and test targets have different widths").into());
            }
            Some((0..t.ncols()).map(|c| column_variance(&t, c)).collect::<Vec<_>>())
        }
        None => None,
    };
    let report = evaluate(&preds, &targets, task, train_var.as_deref())?;
    print!("{}", format_report(&report));
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let suite = match args.suite {
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::Exactgp => Suite::ExactGp,
        SuiteArg::Variance => Suite::Variance,
        SuiteArg::All => Suite::All,
    };
    let outcomes = run_suite(suite);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("{failed} check(s) failed"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_strings() {
        assert_eq!(parse_posterior("fg").unwrap().structure, CovStructure::Full);
        let p = parse_posterior("diag:3").unwrap();
        assert_eq!((p.components, p.structure), (3, CovStructure::Diagonal));
        assert!(parse_posterior("diag:0").is_err());
        assert!(parse_posterior("full").is_err());
    }

    #[test]
    fn sparsity_range() {
        assert_eq!(parse_sparsity("1.0"), Ok(1.0));
        assert!(parse_sparsity("0").is_err());
        assert!(parse_sparsity("1.5").is_err());
    }

    #[test]
    fn trace_sits_beside_model() {
        assert_eq!(
            trace_path(Path::new("out/model.json")),
            PathBuf::from("out/model.json.trace.csv")
        );
    }
}
