//! `vecforge`: covariance collection, rank allocation, merging and the
//! synthetic workbench from the command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use log::{error, info};

use vecforge_core::covariance::{build_covariance_set, streams_from_container, RegularizeOptions};
use vecforge_core::linalg::Matrix;
use vecforge_core::pipeline::run_recipe;
use vecforge_core::purify::Decomposer;
use vecforge_core::rank_alloc::{allocate_with_exempt, build_profiles, per_model_ratios};
use vecforge_core::recipe::{check_budget, default_gamma, MergeRecipe, DEFAULT_RHO};
use vecforge_core::tensor_store::{
    read_checkpoint, read_covariance, write_checkpoint, write_covariance, Checkpoint, Container,
};
use vecforge_core::workbench::{
    default_specs, eval_model, figure3_experiment, max_full_rank, run_activations, Fig3Config,
    SuiteManifest, WorldConfig, FIG3_HEADER,
};
use vecforge_core::{Error, ErrorClass, Result};

#[derive(Parser, Debug)]
#[command(name = "vecforge", version, about = "Covariance-aware task-vector merging")]
struct Cli {
    /// Worker threads (default: all cores). VECFORGE_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Input covariances of every linear layer of a fine-tuned model.
    Cov {
        #[arg(long)]
        model: PathBuf,
        /// Activation container ("<layer>.acts.<batch>") or a suite.json.
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples to draw (suite) or to keep (container).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Task id; defaults to the model's task_id metadata.
        #[arg(long)]
        task: Option<String>,
        /// Replace an all-zero covariance by the identity.
        #[arg(long)]
        identity_fallback: bool,
    },
    /// Spectral rank allocation across models.
    Alloc {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        covs: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RHO)]
        rho: f64,
        /// Defaults to rho - (1 - rho)/2.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        exempt: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a merge recipe. Relative paths resolve against the recipe's directory.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic suite: manifest, base, fine-tuned and reference models.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value_t = 0.025)]
        noise: f64,
    },
    /// Score a model on the tasks of a suite (CSV on stdout).
    Eval {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 4000)]
        n_eval: usize,
        #[arg(long, default_value_t = 100)]
        seed: u64,
    },
    /// Per-task rank sweep of every decomposer (CSV).
    Fig3 {
        #[arg(long)]
        suite: PathBuf,
        /// Grid ranks, measured against the widest layer. Default: eight even steps.
        #[arg(long, value_delimiter = ',')]
        ranks: Vec<usize>,
        /// e.g. co_svd,plain_svd,co_svd_random:3,co_svd_crosstask:t1
        #[arg(long, value_delimiter = ',')]
        decomposers: Vec<DecomposerArg>,
        #[arg(long, default_value_t = 1024)]
        n_cov: usize,
        #[arg(long, default_value_t = 4000)]
        n_eval: usize,
        #[arg(long, default_value_t = 7)]
        cov_seed: u64,
        #[arg(long, default_value_t = 100)]
        eval_seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
struct DecomposerArg(Decomposer);

impl FromStr for DecomposerArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let d = match name {
            "plain_svd" => Decomposer::PlainSvd,
            "scaled_svd" => Decomposer::ScaledSvd,
            "whitened_svd" => Decomposer::WhitenedSvd,
            "co_svd" => Decomposer::CoSvd,
            "co_svd_random" => Decomposer::CoSvdRandom {
                seed: if arg.is_empty() { 0 } else { arg.parse().map_err(|e| format!("{s}: {e}"))? },
            },
            "co_svd_crosstask" => Decomposer::CoSvdCrosstask { task_id: arg.to_string() },
            _ => return Err(format!("unknown decomposer {name}")),
        };
        Ok(DecomposerArg(d))
    }
}

fn init_logging(level: &str) {
    env_logger::Builder::new()
        .parse_filters(level)
        .format(|buf, rec| writeln!(buf, "level={} {}", rec.level().as_str().to_lowercase(), rec.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn init_threads(flag: Option<usize>) {
    let env = std::env::var("VECFORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = env.or(flag).filter(|&n| n > 0) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_manifest(path: &Path) -> Result<SuiteManifest> {
    require(path)?;
    SuiteManifest::read(path)
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// First `n` columns across the batches, in order.
fn keep_samples(batches: Vec<Matrix>, n: usize) -> Vec<Matrix> {
    let mut left = n;
    let mut out = Vec::new();
    for b in batches {
        if left == 0 {
            break;
        }
        let take = left.min(b.cols());
        out.push(if take == b.cols() { b } else { b.columns(0, take) });
        left -= take;
    }
    out
}

fn task_of(model: &Checkpoint, flag: Option<String>) -> String {
    flag.or_else(|| model.metadata.get("task_id").cloned()).unwrap_or_default()
}

fn cmd_cov(
    model: &Path,
    acts: &Path,
    out: &Path,
    samples: Option<usize>,
    seed: u64,
    task: Option<String>,
    identity_fallback: bool,
) -> Result<()> {
    require(model)?;
    require(acts)?;
    if samples == Some(0) {
        return Err(Error::EmptyStream("every layer (--samples 0)".into()));
    }
    let ck = read_checkpoint(model)?;
    let streams = if is_manifest(acts) {
        let suite = load_manifest(acts)?.build()?;
        let id = task_of(&ck, task);
        let world = suite
            .tasks
            .iter()
            .find(|t| t.spec.task_id == id)
            .ok_or_else(|| Error::InvariantViolation(format!("task {id:?} is not in the suite")))?;
        run_activations(&ck, world, samples.unwrap_or(1024), seed)?
    } else {
        let c = Container::read(acts)?;
        let mut streams = streams_from_container(&c, &ck.linear_layers, &task_of(&ck, task))?;
        if let Some(n) = samples {
            for s in &mut streams {
                s.batches = keep_samples(std::mem::take(&mut s.batches), n);
            }
        }
        streams
    };
    let id = streams.first().map(|s| s.source_task.clone()).unwrap_or_default();
    let set = build_covariance_set(&id, &streams, RegularizeOptions { identity_fallback })?;
    for (layer, e) in &set.entries {
        info!("event=covariance layer={layer} samples={} boost={:e}", e.sample_count, e.diag_boost);
    }
    write_covariance(&set, out)?;
    info!("event=written path={}", out.display());
    Ok(())
}

fn cmd_alloc(
    models: &[PathBuf],
    covs: &[PathBuf],
    rho: f64,
    gamma: Option<f64>,
    exempt: &[String],
    out: &Path,
) -> Result<()> {
    let gamma = gamma.unwrap_or_else(|| default_gamma(rho));
    check_budget(rho, gamma)?;
    if models.len() != covs.len() {
        return Err(Error::InvariantViolation(format!(
            "{} models but {} covariance files",
            models.len(),
            covs.len()
        )));
    }
    for p in models.iter().chain(covs) {
        require(p)?;
    }
    let cks: Vec<Checkpoint> = models.iter().map(read_checkpoint).collect::<Result<_>>()?;
    let cs: Vec<_> = covs.iter().map(read_covariance).collect::<Result<_>>()?;
    let profiles = build_profiles(&cks, &cs)?;
    let exempt = exempt.iter().cloned().collect();
    let alloc = allocate_with_exempt(&profiles, rho, gamma, &exempt)?;
    write_text(out, &alloc.to_text())?;
    let mut stdout = std::io::stdout().lock();
    for (m, r) in per_model_ratios(&alloc) {
        writeln!(stdout, "{m}\t{r:.4}").map_err(|e| Error::io("<stdout>", e))?;
    }
    info!("event=written path={}", out.display());
    Ok(())
}

/// `<out>` with `suffix` appended to the file name.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn cmd_merge(recipe_path: &Path, out: &Path) -> Result<()> {
    require(recipe_path)?;
    let text = std::fs::read_to_string(recipe_path).map_err(|e| Error::io(recipe_path, e))?;
    let recipe = MergeRecipe::from_json(&text)?;
    let root = recipe_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| root.join(p);
    require(&resolve(&recipe.base))?;
    for inp in &recipe.inputs {
        require(&resolve(&inp.checkpoint))?;
        if let (Some(c), Some(_)) = (&inp.covariance, &recipe.purification) {
            require(&resolve(c))?;
        }
    }
    let run = run_recipe(&recipe, root)?;
    write_checkpoint(&run.merged.weights, out)?;
    write_text(&sidecar(out, ".recipe.json"), &recipe.to_json())?;
    if let Some(emr) = &run.merged.emr {
        emr.write(sidecar(out, ".emr.safetensors"))?;
    }
    if let Some(a) = &run.allocation {
        write_text(&sidecar(out, ".alloc.txt"), &a.to_text())?;
        for (m, r) in per_model_ratios(a) {
            info!("event=ratio model={m} ratio={r:.4}");
        }
    }
    info!("event=written path={} method={:?}", out.display(), recipe.method);
    Ok(())
}

fn cmd_synth(out: &Path, seed: u64, tasks: usize, noise: f64) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = SuiteManifest {
        base_seed: seed,
        world: WorldConfig::default(),
        specs: default_specs(tasks, seed, noise),
    };
    let suite = manifest.build()?;
    manifest.write(out.join("suite.json"))?;
    write_checkpoint(&suite.base, out.join("base.safetensors"))?;
    for (t, ft) in suite.tasks.iter().zip(&suite.finetuned) {
        let id = &t.spec.task_id;
        write_checkpoint(ft, out.join(format!("{id}.safetensors")))?;
        write_checkpoint(&t.reference, out.join(format!("{id}.reference.safetensors")))?;
    }
    info!("event=written path={} tasks={tasks}", out.display());
    Ok(())
}

fn cmd_eval(suite: &Path, model: &Path, task: Option<String>, n_eval: usize, seed: u64) -> Result<()> {
    require(model)?;
    let suite = load_manifest(suite)?.build()?;
    let ck = read_checkpoint(model)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "task,score").map_err(|e| Error::io("<stdout>", e))?;
    let mut any = false;
    for t in suite.tasks.iter().filter(|t| task.as_ref().is_none_or(|id| &t.spec.task_id == id)) {
        let s = eval_model(&ck, t, n_eval, seed)?;
        writeln!(stdout, "{},{s}", t.spec.task_id).map_err(|e| Error::io("<stdout>", e))?;
        any = true;
    }
    if !any {
        return Err(Error::InvariantViolation(format!("task {task:?} is not in the suite")));
    }
    Ok(())
}

fn cmd_fig3(suite: &Path, ranks: Vec<usize>, decomposers: Vec<DecomposerArg>, cfg: Fig3Config, out: Option<&Path>) -> Result<()> {
    let suite = load_manifest(suite)?.build()?;
    let full = max_full_rank(&suite);
    let ranks = if ranks.is_empty() {
        (1..=8).map(|i| (i * full).div_ceil(8)).collect()
    } else {
        ranks
    };
    let cfg = if decomposers.is_empty() {
        cfg
    } else {
        Fig3Config {
            decomposers: decomposers.into_iter().map(|d| d.0).collect(),
            ..cfg
        }
    };
    let rows = figure3_experiment(&suite, &ranks, &cfg)?;
    let mut text = format!("{FIG3_HEADER}\n");
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    match out {
        Some(p) => write_text(p, &text)?,
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Cov {
            model,
            acts,
            out,
            samples,
            seed,
            task,
            identity_fallback,
        } => cmd_cov(&model, &acts, &out, samples, seed, task, identity_fallback),
        Cmd::Alloc {
            models,
            covs,
            rho,
            gamma,
            exempt,
            out,
        } => cmd_alloc(&models, &covs, rho, gamma, &exempt, &out),
        Cmd::Merge { recipe, out } => cmd_merge(&recipe, &out),
        Cmd::Synth { out, seed, tasks, noise } => cmd_synth(&out, seed, tasks, noise),
        Cmd::Eval {
            suite,
            model,
            task,
            n_eval,
            seed,
        } => cmd_eval(&suite, &model, task, n_eval, seed),
        Cmd::Fig3 {
            suite,
            ranks,
            decomposers,
            n_cov,
            n_eval,
            cov_seed,
            eval_seed,
            out,
        } => {
            let cfg = Fig3Config {
                n_cov,
                n_eval,
                cov_seed,
                eval_seed,
                ..Fig3Config::default()
            };
            cmd_fig3(&suite, ranks, decomposers, cfg, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log_level);
    init_threads(cli.threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Error::Schema(errs) = &e {
                for m in errs {
                    error!("event=schema message={m:?}");
                }
            }
            error!("event=failed error={:?}", e.to_string());
            ExitCode::from(match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
