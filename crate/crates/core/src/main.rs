use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use mcbsvm::active::{run_active_learning, write_aggregate_csv, ALConfig, Policy};
use mcbsvm::data::{load_csv, make_blobs, read_features};
use mcbsvm::gradcheck::{check_gradients, random_instance};
use mcbsvm::io::ModelFile;
use mcbsvm::optim::{train, Method, TrainConfig};
use mcbsvm::predict::{decide, mean_softmax, variation_ratio, DEFAULT_VR_SAMPLES};
use mcbsvm::rank::{mean_ranks, render_table, write_ranks_csv, AccuracyTable};
use mcbsvm::{fmt_f64, Dataset, Error, ModelState};

const EXIT_INGESTION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mcbsvm", version, about = "Sparse variational multi-class Bayesian SVM")]
struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a CSV file.
    Train(TrainArgs),
    /// Predict labels and variation ratios for a CSV file.
    Predict(PredictArgs),
    /// Simulate pool-based active learning.
    ActiveLearn(ActiveArgs),
    /// Mean ranks of methods from a long-form accuracy table.
    Rank(RankArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic Gaussian-blob dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the label column.
    #[arg(long, default_value = "target")]
    label: String,
    /// Model JSON output.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Per-epoch objective trace (default: <out>.trace.csv).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Number of inducing points.
    #[arg(long, default_value_t = 64)]
    inducing: usize,
    /// adam or coord_ascent.
    #[arg(long, default_value = "adam")]
    method: Method,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Coordinate-ascent step size.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One lengthscale per feature.
    #[arg(long)]
    ard: bool,
    /// Refine kernel hyperparameters and inducing inputs every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    hyperopt_every: usize,
    /// Minibatch size (default: full batch).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Update α by Adam instead of its closed form.
    #[arg(long)]
    alpha_gradient: bool,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV containing the model's feature columns; a label column is optional.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
    /// Monte Carlo draws for the variation ratio.
    #[arg(long, default_value_t = DEFAULT_VR_SAMPLES)]
    vr_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ActiveArgs {
    /// Pool CSV (labels revealed on query).
    #[arg(long)]
    pool: PathBuf,
    /// Held-out test CSV.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "target")]
    label: String,
    /// variation_ratio or mean_entropy.
    #[arg(long, default_value = "variation_ratio")]
    policy: Policy,
    /// Number of queries.
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[arg(long, default_value_t = 4)]
    inducing: usize,
    /// Adam epochs per retrain.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_VR_SAMPLES)]
    vr_samples: usize,
    /// Repeat for several seeds.
    #[arg(long = "seed", default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// Directory for the traces, aggregate and manifest.
    #[arg(long, default_value = "al_out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RankArgs {
    /// Long-form CSV with columns dataset,method,accuracy.
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value = "ranks.csv")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// Seed of the first random instance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    instances: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = mcbsvm::gradcheck::DEFAULT_TOLERANCE)]
    tol: f64,
    /// Add this to every analytic gradient entry (fault injection).
    #[arg(long, default_value_t = 0.0)]
    perturb_analytic: f64,
    /// Report output.
    #[arg(long, default_value = "gradcheck.txt")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// Distance between cluster centers.
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "blobs.csv")]
    out: PathBuf,
}

/// Resolved configuration, timings and version, written next to the outputs.
struct Manifest {
    command: &'static str,
    config: Value,
    timings: BTreeMap<String, f64>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    fn new(command: &'static str, config: impl Serialize) -> Self {
        Self {
            command,
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            timings: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> mcbsvm::Result<T>) -> mcbsvm::Result<T> {
        let start = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
        out
    }

    fn write(&self, path: &Path, threads: usize) -> mcbsvm::Result<()> {
        let doc = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "threads": threads,
            "outputs": self.outputs,
            "timings_seconds": self.timings,
            "written_at": chrono::Utc::now().to_rfc3339(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: &TrainArgs, threads: usize) -> mcbsvm::Result<()> {
    let cfg = TrainConfig {
        method: a.method,
        epochs: a.epochs,
        learning_rate: a.lr,
        rho: a.rho,
        seed: a.seed,
        hyperopt_every: a.hyperopt_every,
        batch_size: a.batch_size,
        alpha_gradient: a.alpha_gradient,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    if a.inducing == 0 {
        return Err(Error::Config("--inducing must be >= 1".into()));
    }
    let trace_path = a.trace.clone().unwrap_or_else(|| sibling(&a.out, ".trace.csv"));
    let mut m = Manifest::new("train", json!({ "args": a, "train_config": cfg }));
    let data = m.time("load", || load_csv(&a.data, &a.label)?.fit_standardize())?;
    let state = m.time("initialize", || {
        ModelState::initialize(&data.features, data.class_count(), a.inducing, a.ard, a.seed)
    })?;
    let (state, trace) = m.time("train", || train(state, &data.features, &data.labels, &cfg))?;
    ModelFile::from_state(&state, &data).save(&a.out)?;
    trace.save_csv(&trace_path)?;
    if let Some(v) = trace.last_elbo() {
        println!("epochs {} final objective {}", trace.len(), fmt_f64(v));
    }
    m.outputs = vec![a.out.clone(), trace_path];
    m.write(&sibling(&a.out, ".manifest.json"), threads)
}

fn cmd_predict(a: &PredictArgs, threads: usize) -> mcbsvm::Result<()> {
    let mut m = Manifest::new("predict", a);
    let model = ModelFile::load(&a.model)?;
    let predictor = model.predictor()?;
    let (raw, truth) = m.time("load", || read_features(&a.data, &model.feature_names, Some(&model.label_column)))?;
    let x = model.standardization.apply(&raw)?;
    let dist = m.time("predict", || predictor.predict(&x))?;
    let labels = decide(&dist);
    let vr = variation_ratio(&dist, a.vr_samples, a.seed)?;
    let probs = mean_softmax(&dist);

    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header = vec!["row".to_string(), "predicted".into(), "variation_ratio".into()];
    header.extend(model.label_names.iter().map(|l| format!("mean_{l}")));
    header.extend(model.label_names.iter().map(|l| format!("softmax_{l}")));
    if truth.is_some() {
        header.push("true_label".into());
    }
    w.write_record(&header)?;
    for i in 0..dist.n_points() {
        let mut rec = vec![i.to_string(), model.label_names[labels[i]].clone(), fmt_f64(vr[i])];
        rec.extend(dist.means.row(i).iter().map(|&v| fmt_f64(v)));
        rec.extend(probs.row(i).iter().map(|&v| fmt_f64(v)));
        if let Some(t) = &truth {
            rec.push(t[i].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    if let Some(t) = &truth {
        let correct = labels.iter().zip(t).filter(|(p, y)| &model.label_names[**p] == *y).count();
        println!("accuracy {} ({correct}/{})", fmt_f64(correct as f64 / t.len().max(1) as f64), t.len());
    }
    m.outputs = vec![a.out.clone()];
    m.write(&sibling(&a.out, ".manifest.json"), threads)
}

fn cmd_active_learn(a: &ActiveArgs, threads: usize) -> mcbsvm::Result<()> {
    let cfg = ALConfig {
        policy: a.policy,
        budget: a.budget,
        inducing_points: a.inducing,
        retrain_epochs: a.epochs,
        seeds: a.seeds.clone(),
        vr_samples: a.vr_samples,
        learning_rate: a.lr,
    };
    cfg.validate()?;
    let mut m = Manifest::new("active-learn", json!({ "args": a, "al_config": cfg }));
    let (pool, test) = m.time("load", || {
        let pool = load_csv(&a.pool, &a.label)?.fit_standardize()?;
        let (raw, truth) = read_features(&a.test, &pool.feature_names, Some(&a.label))?;
        let truth = truth.ok_or_else(|| Error::ingestion_msg(&a.test, format!("label column '{}' not found", a.label)))?;
        let labels = truth
            .iter()
            .map(|name| {
                pool.label_names
                    .iter()
                    .position(|p| p == name)
                    .ok_or_else(|| Error::Config(format!("test label '{name}' does not occur in the pool")))
            })
            .collect::<mcbsvm::Result<Vec<_>>>()?;
        let test = Dataset {
            features: pool.scaling.apply(&raw)?,
            labels,
            ..pool.subset(&[])
        };
        Ok((pool, test))
    })?;
    let traces = m.time("run", || run_active_learning(&pool, &test, &cfg))?;
    std::fs::create_dir_all(&a.out_dir)?;
    for t in &traces {
        let p = a.out_dir.join(format!("trace_{}_seed{}.csv", a.policy, t.seed));
        t.write_csv(&p)?;
        m.outputs.push(p);
    }
    let agg = a.out_dir.join(format!("aggregate_{}.csv", a.policy));
    write_aggregate_csv(&traces, &agg)?;
    m.outputs.push(agg);
    let finals: Vec<f64> = traces.iter().map(|t| t.final_error()).collect();
    println!(
        "policy {} seeds {} mean final test error {}",
        a.policy,
        traces.len(),
        fmt_f64(finals.iter().sum::<f64>() / finals.len() as f64)
    );
    m.write(&a.out_dir.join(format!("manifest_{}.json", a.policy)), threads)
}

fn cmd_rank(a: &RankArgs, threads: usize) -> mcbsvm::Result<()> {
    let mut m = Manifest::new("rank", a);
    let table = m.time("load", || AccuracyTable::from_long_csv(&a.table))?;
    write_ranks_csv(&table, &a.out)?;
    print!("{}", render_table(&table));
    log::debug!("{:?}", mean_ranks(&table));
    m.outputs = vec![a.out.clone()];
    m.write(&sibling(&a.out, ".manifest.json"), threads)
}

/// Returns whether every instance passed.
fn cmd_gradcheck(a: &GradcheckArgs, threads: usize) -> mcbsvm::Result<bool> {
    let mut m = Manifest::new("gradcheck", a);
    let mut text = String::new();
    let mut all_ok = true;
    let mut worst: Option<(u64, mcbsvm::gradcheck::BlockReport)> = None;
    m.time("check", || {
        for seed in a.seed..a.seed + a.instances.max(1) {
            let inst = random_instance(seed)?;
            let rep = check_gradients(&inst, a.perturb_analytic)?;
            let ok = rep.passed(a.tol);
            all_ok &= ok;
            text.push_str(&format!(
                "instance seed {seed} (N={}, C={}, P={}): {}\n{rep}",
                inst.labels.len(),
                inst.state.n_classes(),
                inst.state.vp.n_inducing(),
                if ok { "PASS" } else { "FAIL" }
            ));
            if let Some(b) = rep.worst() {
                if worst.as_ref().is_none_or(|(_, w)| b.max_rel_err > w.max_rel_err) {
                    worst = Some((seed, b.clone()));
                }
            }
        }
        Ok(())
    })?;
    print!("{text}");
    std::fs::write(&a.out, &text)?;
    if !all_ok {
        if let Some((seed, b)) = &worst {
            eprintln!(
                "gradient check failed: worst relative error {:.3e} at {} of instance seed {seed} (tolerance {:.1e})",
                b.max_rel_err, b.worst, a.tol
            );
        }
    }
    m.outputs = vec![a.out.clone()];
    m.write(&sibling(&a.out, ".manifest.json"), threads)?;
    Ok(all_ok)
}

fn cmd_synth(a: &SynthArgs, threads: usize) -> mcbsvm::Result<()> {
    let mut m = Manifest::new("synth", a);
    let d = m.time("generate", || make_blobs(a.n, a.classes, a.dims, a.separation, a.seed))?;
    d.write_csv(&a.out)?;
    m.outputs = vec![a.out.clone()];
    m.write(&sibling(&a.out, ".manifest.json"), threads)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_ingestion() => EXIT_INGESTION,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, cli.threads),
        Command::Predict(a) => cmd_predict(a, cli.threads),
        Command::ActiveLearn(a) => cmd_active_learn(a, cli.threads),
        Command::Rank(a) => cmd_rank(a, cli.threads),
        Command::Synth(a) => cmd_synth(a, cli.threads),
        Command::Gradcheck(a) => match cmd_gradcheck(a, cli.threads) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_NUMERICAL),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
