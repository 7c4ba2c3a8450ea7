mod config;
mod datasets;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use grflow::data::{DatasetBundle, Split};
use grflow::flow::{checkpoint, FlowConfig, ResidualFlow};
use grflow::inversion::{self, InversionConfig, Method};
use grflow::tensor::Tensor2;
use grflow::train::{self, InferenceTask, Objective, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use datasets::{DatasetName, Source};
use manifest::{unix_now, RunManifest};

/// Graphical residual flows: training, evaluation and inversion.
#[derive(Debug, Parser)]
#[command(name = "grflow", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic dataset into train.csv and test.csv.
    GenData(GenDataArgs),
    /// Train a flow by maximum likelihood or on the ELBO.
    Train(TrainArgs),
    /// Report the test log-likelihood or ELBO of a checkpoint.
    Eval(EvalArgs),
    /// Invert a flow on data points and report reconstruction errors.
    Invert(InvertArgs),
    /// Grid-search inversion settings, record convergence curves and
    /// compare Lipschitz bounds.
    BenchInvert(BenchArgs),
    /// Draw samples from a trained flow.
    Sample(SampleArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    dataset: DatasetName,
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long, default_value_t = 5_000)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DataArgs {
    /// Directory written by `gen-data`.
    #[arg(long, conflicts_with = "csv")]
    data: Option<PathBuf>,
    /// Single CSV table, split in file order.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Graph file for `--csv`; the protein network when omitted.
    #[arg(long, requires = "csv")]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    train_rows: usize,
    #[arg(long)]
    test_rows: Option<usize>,
    /// Keep raw CSV values instead of z-scoring with training statistics.
    #[arg(long)]
    no_standardize: bool,
}

impl DataArgs {
    fn source(&self) -> Result<Source> {
        match (&self.data, &self.csv) {
            (Some(d), None) => Ok(Source::Dir(d.clone())),
            (None, Some(c)) => Ok(Source::Csv {
                path: c.clone(),
                graph: self.graph.clone(),
                split: Split {
                    train: self.train_rows,
                    test: self.test_rows,
                },
                standardize: !self.no_standardize,
            }),
            _ => Err(UsageError("one of --data or --csv is required".into()).into()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveArg {
    Mle,
    Elbo,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Architecture preset, e.g. grf-s-arith or grf-l-protein.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Spectral-norm bound of every weight matrix.
    #[arg(long, default_value_t = 0.99)]
    c: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Mle)]
    objective: ObjectiveArg,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    elbo_samples: usize,
    #[arg(long, default_value_t = 1)]
    eval_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    /// Monte Carlo draws per observation for the ELBO.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Newton,
    Banach,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Newton => Method::Newton,
            MethodArg::Banach => Method::Banach,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct InvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Number of test points to invert.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Newton)]
    method: MethodArg,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Per-block tolerance; defaults to tol divided by the number of blocks.
    #[arg(long)]
    block_tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Newton)]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Step sizes to search; 0.1, 0.2, ..., 1.9 when omitted.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Largest per-block iteration budget searched.
    #[arg(long, default_value_t = 50)]
    max_n: usize,
    /// Also record error-versus-iteration curves for Newton and Banach.
    #[arg(long)]
    curves: bool,
    #[arg(long, default_value_t = 50)]
    curve_iters: usize,
    /// Train one flow per bound on the same data and record Banach curves.
    #[arg(long, value_delimiter = ',')]
    c_sweep: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    sweep_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Observations to condition on, for inference flows.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Error caused by invalid input rather than a failed computation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn configure_threads() {
    if let Some(n) = std::env::var("GRFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second initialisation only happens in tests; ignoring it is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Invert(a) => invert_cmd(a),
        Command::BenchInvert(a) => bench_cmd(a),
        Command::Sample(a) => sample_cmd(a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn record_inputs(m: &mut RunManifest, paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        if p.exists() {
            m.input(p)?;
        }
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let started = unix_now();
    if a.n_train < 1 || a.n_test < 1 {
        return Err(usage("--n-train and --n-test must be positive"));
    }
    let bundle = a.dataset.generate(a.n_train, a.n_test, a.seed).map_err(|e| usage(e.to_string()))?;
    let mut m = RunManifest::new("gen-data", serde_json::to_value(&a)?, a.seed, started);
    for p in datasets::write_dir(&a.out, a.dataset, a.seed, &bundle)? {
        m.artifact(&p);
    }
    m.write(&a.out)?;
    println!(
        "wrote {} train and {} test rows over {} variables to {}",
        bundle.train.rows(),
        bundle.test.rows(),
        bundle.graph.len(),
        a.out.display()
    );
    Ok(())
}

fn flow_config(a: &TrainArgs, dataset: Option<DatasetName>) -> Result<FlowConfig> {
    let base = match (&a.preset, dataset) {
        (Some(name), _) => Some(
            train::preset(name).ok_or_else(|| usage(format!("unknown preset `{name}`")))?,
        ),
        (None, Some(d)) => train::preset(&format!("grf-s-{}", d.preset_suffix())),
        (None, None) => None,
    };
    let steps = a.steps.or(base.map(|p| p.steps));
    let width = a.width.or(base.map(|p| p.width));
    let (Some(steps), Some(width)) = (steps, width) else {
        return Err(usage("give --preset or both --steps and --width"));
    };
    if !(a.c > 0.0 && a.c < 1.0) {
        return Err(usage("--c must lie in (0, 1)"));
    }
    Ok(FlowConfig {
        steps,
        hidden_widths: vec![width],
        lip_bound: a.c,
        seed: a.seed,
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let started = unix_now();
    let source = a.data.source()?;
    let (bundle, name) = source.load()?;
    let objective = match a.objective {
        ObjectiveArg::Mle => Objective::Mle,
        ObjectiveArg::Elbo => Objective::Elbo,
    };
    let fcfg = flow_config(&a, name)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        lr_min: a.lr_min,
        patience: a.patience,
        seed: a.seed,
        objective,
        elbo_samples: a.elbo_samples,
        eval_samples: a.eval_samples,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (flow, task) = train::build_flow(&bundle, objective, &fcfg).map_err(|e| usage(e.to_string()))?;
    create_out(&a.out)?;
    if !a.quiet {
        eprintln!(
            "training {} blocks x {} hidden units ({} parameters) on {}",
            fcfg.steps,
            fcfg.hidden_widths[0],
            flow.parameter_count(),
            bundle.name
        );
    }
    let quiet = a.quiet;
    let out = train::train(flow, &bundle, task.as_ref(), &cfg, |m| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  lr {:.0e}  train {:.4}  test {:.4}",
                m.epoch, m.lr, m.train_loss, m.test_metric
            );
        }
    })?;

    let mut m = RunManifest::new("train", serde_json::to_value(&a)?, a.seed, started);
    record_inputs(&mut m, &source.inputs())?;
    let final_path = a.out.join("checkpoint.json");
    let best_path = a.out.join("best.json");
    let metrics_path = a.out.join("metrics.csv");
    checkpoint::save(&out.flow, &final_path)?;
    checkpoint::save(&out.best, &best_path)?;
    let mut w = csv::Writer::from_path(&metrics_path)?;
    w.write_record(["epoch", "lr", "train_loss", "test_metric"])?;
    for e in &out.metrics {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.train_loss.to_string(),
            e.test_metric.to_string(),
        ])?;
    }
    w.flush()?;
    let summary_path = a.out.join("summary.json");
    let metric = match objective {
        Objective::Mle => "test_log_likelihood",
        Objective::Elbo => "test_elbo",
    };
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&json!({
            "metric": metric,
            "final": out.final_test,
            "best_epoch": out.best_epoch,
            "parameters": out.flow.parameter_count(),
            "standardization": bundle.standardization,
        }))?,
    )?;
    for p in [&final_path, &best_path, &metrics_path, &summary_path] {
        m.artifact(p);
    }
    m.write(&a.out)?;
    println!("{metric} {:.6}", out.final_test);
    Ok(())
}

/// Loads a checkpoint and its data, checking they describe the same variables.
fn load_model(ckpt: &Path, data: &DataArgs) -> Result<(ResidualFlow, DatasetBundle, Source, Option<InferenceTask>)> {
    let mut flow = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    flow.refresh_spectral_state();
    let source = data.source()?;
    let (bundle, _) = source.load()?;
    let task = if flow.cond_dim() > 0 {
        let joint = bundle
            .joint
            .clone()
            .ok_or_else(|| usage("inference checkpoints need a dataset with a known joint density"))?;
        let task = InferenceTask::new(joint)?;
        if task.graph.nodes() != flow.graph().nodes() || task.conditioning != flow.conditioning() {
            return Err(usage("checkpoint does not match the dataset's latent structure"));
        }
        Some(task)
    } else {
        if bundle.graph.nodes() != flow.graph().nodes() {
            return Err(usage("checkpoint variables do not match the dataset columns"));
        }
        None
    };
    Ok((flow, bundle, source, task))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let started = unix_now();
    let (flow, bundle, source, task) = load_model(&a.checkpoint, &a.data)?;
    let x = if a.train_split { &bundle.train } else { &bundle.test };
    let eff = flow.effective();
    let (metric, value) = match &task {
        None => ("log_likelihood", train::mean_log_likelihood(&eff, x)?),
        Some(t) => (
            "elbo",
            train::mean_elbo(&eff, &t.observations(x), t, a.samples.max(1), a.seed)?,
        ),
    };
    let report = json!({
        "metric": metric,
        "value": value,
        "split": if a.train_split { "train" } else { "test" },
        "rows": x.rows(),
    });
    println!("{}", serde_json::to_string(&report)?);
    if let Some(out) = &a.out {
        create_out(out)?;
        let mut m = RunManifest::new("eval", serde_json::to_value(&a)?, a.seed, started);
        record_inputs(&mut m, &source.inputs())?;
        m.input(&a.checkpoint)?;
        let p = out.join("eval.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
        m.artifact(&p);
        m.write(out)?;
    }
    Ok(())
}

/// Points to invert: `z = F(x)` for density flows, `z = F(ε; x)` for
/// inference flows. Returns `(z, cond)`.
fn targets(
    flow: &ResidualFlow,
    bundle: &DatasetBundle,
    task: Option<&InferenceTask>,
    n: usize,
    seed: u64,
) -> Result<(Tensor2, Option<Tensor2>)> {
    let n = n.min(bundle.test.rows());
    let rows = bundle.test.slice_rows(0, n)?;
    let eff = flow.effective();
    match task {
        None => Ok((eff.transform(&rows, None)?, None)),
        Some(t) => {
            let x = t.observations(&rows);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = train::standard_normal(n, flow.dim(), &mut rng);
            Ok((eff.transform(&eps, Some(&x))?, Some(x)))
        }
    }
}

fn invert_cmd(a: InvertArgs) -> Result<()> {
    let started = unix_now();
    let (flow, bundle, source, task) = load_model(&a.checkpoint, &a.data)?;
    let cfg = InversionConfig {
        method: a.method.into(),
        alpha: a.alpha,
        max_iters: a.max_iters,
        tol: a.tol,
        block_tol: a.block_tol,
        fixed_iters: false,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (z, cond) = targets(&flow, &bundle, task.as_ref(), a.n, a.seed)?;
    let (_, rep) = inversion::invert_flow(&flow.effective(), &z, cond.as_ref(), &cfg)?;
    create_out(&a.out)?;
    let csv_path = a.out.join("inversion.csv");
    inversion::write_rows(&rep.rows(), std::fs::File::create(&csv_path)?)?;
    let summary = json!({
        "method": cfg.method.name(),
        "alpha": cfg.alpha,
        "converged": rep.converged_count(),
        "samples": rep.samples.len(),
        "median_block_iterations": rep.median_block_iterations(),
        "batch_micros": rep.micros,
    });
    let summary_path = a.out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    let mut m = RunManifest::new("invert", serde_json::to_value(&a)?, a.seed, started);
    record_inputs(&mut m, &source.inputs())?;
    m.input(&a.checkpoint)?;
    m.artifact(&csv_path);
    m.artifact(&summary_path);
    m.write(&a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn write_curves(path: &Path, rows: &[(String, usize, usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "sample_id", "iterations", "recon_error"])?;
    for (label, s, it, e) in rows {
        w.write_record([label.clone(), s.to_string(), it.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn curve_rows(label: &str, curves: &[Vec<f64>]) -> Vec<(String, usize, usize, f64)> {
    curves
        .iter()
        .enumerate()
        .flat_map(|(s, c)| c.iter().enumerate().map(move |(it, &e)| (label.to_string(), s, it, e)))
        .collect()
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let started = unix_now();
    let (flow, bundle, source, task) = load_model(&a.checkpoint, &a.data)?;
    if a.max_n == 0 {
        return Err(usage("--max-n must be positive"));
    }
    let alphas = if a.alphas.is_empty() {
        inversion::default_alphas()
    } else {
        a.alphas.clone()
    };
    let budgets: Vec<usize> = (1..=a.max_n).collect();
    let (z, cond) = targets(&flow, &bundle, task.as_ref(), a.n, a.seed)?;
    let eff = flow.effective();
    let grid = inversion::grid_search_inversion(&eff, &z, cond.as_ref(), a.method.into(), &alphas, &budgets, a.tol)
        .map_err(|e| match e {
            inversion::InversionError::Config(m) => usage(m),
            other => other.into(),
        })?;
    create_out(&a.out)?;
    let mut m = RunManifest::new("bench-invert", serde_json::to_value(&a)?, a.seed, started);
    record_inputs(&mut m, &source.inputs())?;
    m.input(&a.checkpoint)?;

    let grid_path = a.out.join("grid.csv");
    inversion::write_rows(&grid.rows(), std::fs::File::create(&grid_path)?)?;
    m.artifact(&grid_path);

    if a.curves {
        let mut rows = curve_rows(
            "newton",
            &inversion::error_curves(&eff, &z, cond.as_ref(), Method::Newton, 1.0, a.curve_iters)?,
        );
        rows.extend(curve_rows(
            "banach",
            &inversion::error_curves(&eff, &z, cond.as_ref(), Method::Banach, 1.0, a.curve_iters)?,
        ));
        let p = a.out.join("curves.csv");
        write_curves(&p, &rows)?;
        m.artifact(&p);
    }

    if !a.c_sweep.is_empty() {
        let mut rows = Vec::new();
        for &c in &a.c_sweep {
            if !(c > 0.0 && c < 1.0) {
                return Err(usage(format!("sweep bound {c} is outside (0, 1)")));
            }
            let fcfg = FlowConfig {
                steps: flow.steps(),
                hidden_widths: flow.blocks()[0].hidden_widths().to_vec(),
                lip_bound: c,
                seed: a.seed,
            };
            let objective = if task.is_some() { Objective::Elbo } else { Objective::Mle };
            let (f, t) = train::build_flow(&bundle, objective, &fcfg)?;
            let tcfg = TrainConfig {
                epochs: a.sweep_epochs,
                seed: a.seed,
                objective,
                ..TrainConfig::default()
            };
            let trained = train::train(f, &bundle, t.as_ref(), &tcfg, |_| {})?.flow;
            let (zc, cc) = targets(&trained, &bundle, t.as_ref(), a.n, a.seed)?;
            let curves = inversion::error_curves(
                &trained.effective(),
                &zc,
                cc.as_ref(),
                Method::Banach,
                1.0,
                a.curve_iters,
            )?;
            rows.extend(curve_rows(&format!("banach c={c}"), &curves));
        }
        let p = a.out.join("c_sweep.csv");
        write_curves(&p, &rows)?;
        m.artifact(&p);
    }

    let summary = json!({
        "method": grid.method.name(),
        "batch_alpha": grid.batch_alpha,
        "batch_n": grid.batch_n,
        "batch_converged": grid.batch_converged,
        "samples": grid.per_sample.len(),
        "batch_micros": grid.batch_micros,
    });
    let summary_path = a.out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    m.artifact(&summary_path);
    m.write(&a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let started = unix_now();
    let mut flow = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    flow.refresh_spectral_state();
    let eff = flow.effective();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut m = RunManifest::new("sample", serde_json::to_value(&a)?, a.seed, started);
    m.input(&a.checkpoint)?;
    let (header, samples): (Vec<String>, Tensor2) = if flow.cond_dim() == 0 {
        let eps = train::standard_normal(a.n, flow.dim(), &mut rng);
        let cfg = InversionConfig::newton(a.alpha, a.max_iters);
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let (x, rep) = inversion::invert_flow(&eff, &eps, None, &cfg)?;
        let failed = rep.samples.len() - rep.converged_count();
        if failed > 0 {
            eprintln!("warning: {failed} of {} samples did not reach the inversion tolerance", a.n);
        }
        (flow.graph().nodes().to_vec(), x)
    } else {
        let (flow2, bundle, source, task) = load_model(&a.checkpoint, &a.data)?;
        drop(flow2);
        record_inputs(&mut m, &source.inputs())?;
        let task = task.expect("conditional flow");
        let n = a.n.min(bundle.test.rows());
        let x = task.observations(&bundle.test.slice_rows(0, n)?);
        let eps = train::standard_normal(n, flow.dim(), &mut rng);
        let z = eff.transform(&eps, Some(&x))?;
        let mut header = flow.graph().nodes().to_vec();
        header.extend(flow.conditioning().iter().cloned());
        (header, Tensor2::hcat(&[&z, &x])?)
    };
    create_out(&a.out)?;
    let p = a.out.join("samples.csv");
    grflow::data::write_matrix(&p, &header, &samples)?;
    m.artifact(&p);
    m.write(&a.out)?;
    println!("wrote {} samples to {}", samples.rows(), p.display());
    Ok(())
}
