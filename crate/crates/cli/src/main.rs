//! `latree` command line: generate synthetic models, learn trees from samples,
//! and compare trees.
//!
//! Exit codes: 0 success, 1 I/O, configuration or malformed input,
//! 2 distances do not connect all variables, 3 local grouping stalled.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use latree::distances::SvdMode;
use latree::eval::{parameter_error, robinson_foulds};
use latree::io::{read_group_map, read_samples, samples_to_sparse};
use latree::lrg::{Epsilon, HiddenDistance};
use latree::model::{
    random_latent_tree_with, sample_model, GeneratorOptions, GroundTruthModel, LatentTree, ModelFile,
    ObservationFamily, Topology,
};
use latree::moments::MomentSource;
use latree::mst::MstAlgorithm;
use latree::pipeline::{learn, RunConfig};
use latree::tensor::TensorOptions;

const VERSION: &str = env!("LATREE_VERSION");

#[derive(Parser)]
#[command(name = "latree", version = VERSION, about = "Latent tree structure and parameter learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random identifiable model and, optionally, samples from it.
    Gen(GenArgs),
    /// Learn a latent tree from samples (or from the exact moments of a model).
    Learn(LearnArgs),
    /// Compare two trees: Robinson-Foulds distance and parameter error.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of observed variables.
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// One dimension for every variable, or a comma-separated list of p.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    dims: Vec<usize>,
    /// balanced, caterpillar, or random-degree:<max degree>.
    #[arg(long, default_value = "balanced")]
    topology: Topology,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples; omit to write the model only.
    #[arg(long = "n", short = 'n')]
    n: Option<usize>,
    /// categorical, or gaussian:<sigma>.
    #[arg(long, default_value = "categorical", value_parser = parse_family)]
    family: ObservationFamily,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SvdArg {
    Exact,
    Randomized,
}

#[derive(Args)]
struct LearnArgs {
    /// Sample file (sparse or dense CSV).
    samples: Option<PathBuf>,
    /// Learn from the exact moments of this model instead of samples.
    #[arg(long, conflicts_with = "samples")]
    moments_from_model: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, value_enum, default_value = "exact")]
    svd: SvdArg,
    /// Sketch width factor for the randomized SVD.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Sibling test tolerance: a number or "auto".
    #[arg(long, default_value = "auto")]
    epsilon: Epsilon,
    #[arg(long, value_enum, default_value = "moment")]
    hidden_distance: HiddenDistanceArg,
    /// Force the most sibling-like pair together when a grouping round stalls,
    /// and floor negative edge-length estimates at zero.
    #[arg(long)]
    lrg_fallback: bool,
    #[arg(long, value_enum, default_value = "prim")]
    mst: MstArg,
    /// Tensor power method restarts.
    #[arg(long, default_value_t = TensorOptions::default().restarts)]
    restarts: usize,
    /// Tensor power method iterations per restart.
    #[arg(long, default_value_t = TensorOptions::default().iters)]
    iters: usize,
    #[arg(long, default_value_t = TensorOptions::default().tol)]
    tol: f64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation family used by the posterior hidden-distance route.
    #[arg(long, default_value = "categorical", value_parser = parse_family)]
    family: ObservationFamily,
    /// CSV mapping raw feature ids to (variable, coordinate).
    #[arg(long)]
    group_map: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum HiddenDistanceArg {
    Moment,
    Additive,
    Posterior,
}

#[derive(Clone, Copy, ValueEnum)]
enum MstArg {
    Prim,
    Boruvka,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated tree (tree.json or model JSON).
    estimate: PathBuf,
    /// Reference tree.
    truth: PathBuf,
}

fn parse_family(s: &str) -> Result<ObservationFamily, String> {
    match s {
        "categorical" | "discrete" => Ok(ObservationFamily::Categorical),
        "gaussian" => Ok(ObservationFamily::Gaussian { sigma: 1.0 }),
        _ => {
            let sigma = s
                .strip_prefix("gaussian:")
                .and_then(|x| x.parse::<f64>().ok())
                .filter(|x| *x > 0.0 && x.is_finite())
                .ok_or_else(|| format!("expected categorical or gaussian:<sigma>, got {s:?}"))?;
            Ok(ObservationFamily::Gaussian { sigma })
        }
    }
}

impl LearnArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            k: self.k,
            svd: match self.svd {
                SvdArg::Exact => SvdMode::Exact,
                SvdArg::Randomized => SvdMode::Randomized { alpha: self.alpha },
            },
            epsilon: self.epsilon,
            hidden_distance: match self.hidden_distance {
                HiddenDistanceArg::Moment => HiddenDistance::Moment,
                HiddenDistanceArg::Additive => HiddenDistance::Additive,
                HiddenDistanceArg::Posterior => HiddenDistance::Posterior,
            },
            tensor: TensorOptions { restarts: self.restarts, iters: self.iters, tol: self.tol, seed: self.seed },
            threads: self.threads,
            seed: self.seed,
            family: self.family,
            mst: match self.mst {
                MstArg::Prim => MstAlgorithm::Prim,
                MstArg::Boruvka => MstAlgorithm::Boruvka,
            },
            lrg_fallback: self.lrg_fallback,
        }
    }
}

#[derive(Serialize)]
struct GenConfig<'a> {
    p: usize,
    k: usize,
    dims: &'a [usize],
    topology: Topology,
    seed: u64,
    n: Option<usize>,
    family: ObservationFamily,
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_gen(args: &GenArgs) -> anyhow::Result<Value> {
    let opts = GeneratorOptions { family: args.family, ..Default::default() };
    let model = random_latent_tree_with(args.p, args.k, &args.dims, args.topology, args.seed, &opts)?;
    let config = GenConfig {
        p: args.p,
        k: args.k,
        dims: &args.dims,
        topology: args.topology,
        seed: args.seed,
        n: args.n,
        family: args.family,
    };
    let meta = json!({ "version": VERSION, "command": "gen", "config": config });
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;

    let mut file = model.to_json();
    file.meta = Some(meta.clone());
    let model_path = args.out.join("model.json");
    write(&model_path, &serde_json::to_string_pretty(&file)?)?;

    let samples_path = match args.n {
        Some(n) => {
            let samples = sample_model(&model, n, args.seed)?;
            let path = args.out.join("samples.csv");
            write(&path, &samples_to_sparse(&samples, Some(&meta)))?;
            Some(path)
        }
        None => None,
    };
    Ok(json!({ "model": model_path, "samples": samples_path }))
}

fn read_model_file(path: &Path) -> anyhow::Result<ModelFile> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let file = serde_json::from_str(&text).with_context(|| format!("{} is not a tree file", path.display()))?;
    Ok(file)
}

fn cmd_learn(args: &LearnArgs) -> anyhow::Result<Value> {
    let config = args.config();
    let source: Box<dyn MomentSource> = match (&args.samples, &args.moments_from_model) {
        (_, Some(m)) => Box::new(GroundTruthModel::from_json(&read_model_file(m)?)?),
        (Some(s), None) => {
            let map = args.group_map.as_deref().map(read_group_map).transpose()?;
            let samples =
                read_samples(s, map.as_ref()).with_context(|| format!("cannot load samples from {}", s.display()))?;
            Box::new(samples)
        }
        (None, None) => bail!("give a sample file or --moments-from-model"),
    };
    let out = learn(source.as_ref(), &config)?;
    let meta = json!({ "version": VERSION, "command": "learn", "config": config, "report": out.report });
    let comment = serde_json::to_string(&json!({ "version": VERSION, "config": config }))?;

    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let file = ModelFile {
        tree: out.tree.to_json(),
        family: Some(config.family),
        seed: Some(config.seed),
        root: Some(out.root),
        meta: Some(meta),
    };
    let paths = [args.out.join("tree.json"), args.out.join("tree.dot"), args.out.join("tree.nwk")];
    write(&paths[0], &serde_json::to_string_pretty(&file)?)?;
    write(&paths[1], &out.tree.to_dot(Some(&comment)))?;
    let mut newick = out.tree.to_newick(Some(&comment));
    newick.push('\n');
    write(&paths[2], &newick)?;
    Ok(json!({
        "tree": paths[0],
        "dot": paths[1],
        "newick": paths[2],
        "root": out.root,
        "report": out.report,
    }))
}

#[derive(Serialize)]
struct EvalOutput {
    rf: f64,
    param_max_err: Option<f64>,
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<Value> {
    let est = LatentTree::from_json(&read_model_file(&args.estimate)?.tree)?;
    let truth = LatentTree::from_json(&read_model_file(&args.truth)?.tree)?;
    let rf = robinson_foulds(&est, &truth)?;
    // Parameter error needs identical structure and parameters on both sides.
    let err = if rf == 0.0 && !est.params().is_empty() && !truth.params().is_empty() {
        match parameter_error(&est, &truth) {
            Ok(e) => Some(e.max_column_error),
            Err(e) => {
                log::warn!("parameter error unavailable: {e}");
                None
            }
        }
    } else {
        None
    };
    Ok(serde_json::to_value(EvalOutput { rf, param_max_err: err })?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<latree::Error>() {
        Some(latree::Error::Disconnected { .. }) => 2,
        Some(latree::Error::NonConvergence { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Learn(a) => cmd_learn(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
