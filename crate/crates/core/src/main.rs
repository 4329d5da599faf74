use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphormer_kit::expressiveness::run_express_checks;
use graphormer_kit::graph::{Graph, Target, Vocab};
use graphormer_kit::io::{
    generate_synthetic, load_dataset, load_or_build_features, prepare_all, save_dataset, split_tail, RunConfig,
    SyntheticSpec, SyntheticTask,
};
use graphormer_kit::model::{Model, ModelConfig, PreparedGraph, Task};
use graphormer_kit::training::{
    ablation_csv, check_ordering, evaluate, resume, run_ablation, train, AblationConfig, Checkpoint, LAST_CHECKPOINT,
};
use graphormer_kit::{Error, Result};

const THREADS_ENV: &str = "GRAPHORMER_KIT_THREADS";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "graphormer-kit", version, about = "Graph transformer training and expressiveness checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (train) or file (eval, ablate, generate).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSONL dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute structural features and store them next to the dataset.
    Preprocess(Common),
    /// Train a model; writes metrics.csv, best.ckpt and last.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval(Common),
    /// Compare tape gradients of full-model losses with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        runs: u64,
    },
    /// Verify the attention constructions against message-passing oracles.
    ExpressCheck(Common),
    /// Train the encoding variants on a synthetic task and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Write a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SyntheticTask::Diameter)]
        task: SyntheticTask,
        #[arg(long, default_value_t = 1000)]
        num_graphs: usize,
        #[arg(long, default_value_t = 8)]
        min_nodes: usize,
        #[arg(long, default_value_t = 16)]
        max_nodes: usize,
        #[arg(long, default_value_t = 1)]
        node_types: usize,
        #[arg(long, default_value_t = 1)]
        edge_types: usize,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{what} is required")))
}

/// Load a dataset and its cached features.
fn load_prepared(path: &Path, max_path_len: usize) -> Result<(Vocab, Task, Vec<PreparedGraph>)> {
    let data = load_dataset(path)?;
    let (feats, reused) = load_or_build_features(path, &data.graphs, max_path_len)?;
    eprintln!(
        "{}: {} graphs, features {}",
        path.display(),
        data.graphs.len(),
        if reused { "from cache" } else { "computed" }
    );
    Ok((data.vocab, data.task, prepare_all(data.graphs, feats)?))
}

fn preprocess(common: &Common) -> Result<bool> {
    let cfg = run_config(common)?;
    for path in [&cfg.dataset, &cfg.valid_dataset].into_iter().flatten() {
        load_prepared(path, cfg.max_path_len)?;
    }
    required(&cfg.dataset, "dataset")?;
    Ok(true)
}

fn train_cmd(common: &Common, resume_run: bool) -> Result<bool> {
    let cfg = run_config(common)?;
    let (vocab, task, graphs) = load_prepared(required(&cfg.dataset, "dataset")?, cfg.max_path_len)?;
    let (train_set, valid_set) = match &cfg.valid_dataset {
        Some(p) => {
            let (v, _, valid) = load_prepared(p, cfg.max_path_len)?;
            if v != vocab {
                return Err(Error::Config("validation dataset uses a different vocabulary".into()));
            }
            (graphs, valid)
        }
        None => split_tail(&graphs, cfg.valid_fraction),
    };
    let tc = cfg.train();
    let outcome = if resume_run {
        let out = required(&cfg.out, "out")?;
        eprintln!("resuming from {}", out.join(LAST_CHECKPOINT).display());
        resume(&train_set, &valid_set, &tc, out)?
    } else {
        let model = Model::new(cfg.model(task), vocab, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        eprintln!(
            "training {} parameters on {} graphs ({} validation)",
            model.params.num_scalars(),
            train_set.len(),
            valid_set.len()
        );
        train(model, &train_set, &valid_set, &tc, cfg.out.as_deref())?
    };
    println!("final_valid {}", outcome.final_valid);
    println!("best_valid {} at step {}", outcome.best_valid, outcome.best_step);
    Ok(true)
}

fn eval_cmd(common: &Common) -> Result<bool> {
    let ck = Checkpoint::load(required(&common.checkpoint, "checkpoint")?)?;
    let (vocab, task, graphs) = load_prepared(required(&common.dataset, "dataset")?, ck.model.config.max_path_len)?;
    if vocab != ck.model.vocab || task != ck.model.config.task {
        return Err(Error::Config("dataset vocabulary or task differs from the checkpoint".into()));
    }
    let metric = evaluate(&ck.model, &graphs, 128)?;
    let name = match task {
        Task::Regression => "mae",
        Task::Binary => "bce",
    };
    println!("{name} {metric}");
    if let Some(out) = &common.out {
        let preds = ck.model.predict_all(&graphs, 128)?;
        let mut csv = String::from("index,prediction,target\n");
        for (i, (p, g)) in preds.iter().zip(&graphs).enumerate() {
            let t = g.graph.target.map_or(String::new(), |t| t.value().to_string());
            csv.push_str(&format!("{i},{p},{t}\n"));
        }
        fs::write(out, csv)?;
    }
    Ok(true)
}

/// Two-layer model on a random 6-node graph with randomized features.
fn gradcheck_case(seed: u64, task: Task) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        num_layers: 2,
        hidden: 8,
        num_heads: 2,
        edge_dim: 4,
        max_deg: 8,
        max_spd: 8,
        max_path_len: 8,
        attention_dropout: 0.0,
        task,
        ..ModelConfig::default()
    };
    let vocab = Vocab::new(vec![4], vec![3]);
    let mut model = Model::new(cfg, vocab, &mut rng)?;
    // lift the parameters off the tiny initialization scale
    for (_, t) in model.params.named_mut() {
        *t = t.map(|x| x * 10.0);
    }
    let edges = graphormer_kit::io::connected_erdos_renyi(6, 0.4, &mut rng);
    let nodes = (0..6).map(|_| vec![rng.random_range(0..4)]).collect();
    let efeats = (0..edges.len()).map(|_| vec![rng.random_range(0..3)]).collect();
    let target = match task {
        Task::Regression => Target::Regression(rng.random_range(-2.0..2.0)),
        Task::Binary => Target::Binary(rng.random()),
    };
    let g = Graph::with_features(6, false, edges, nodes, efeats)?.with_target(target);
    let pg = model.prepare(g)?;
    model.gradient_check(&model.batch(&[&pg])?, 1e-5)
}

fn gradcheck(common: &Common, runs: u64) -> Result<bool> {
    let base = common.seed.unwrap_or(0);
    let mut ok = true;
    for task in [Task::Regression, Task::Binary] {
        let mut worst = 0.0f64;
        for s in 0..runs {
            worst = worst.max(gradcheck_case(base + s, task)?);
        }
        let pass = worst < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "{:<10} {runs} runs  max rel err {worst:.3e}  {}",
            format!("{task:?}").to_lowercase(),
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn express_check(common: &Common) -> Result<bool> {
    let report = run_express_checks(common.seed.unwrap_or(0))?;
    println!("{report}");
    Ok(report.all_passed())
}

fn ablate(common: &Common, steps: Option<u64>, seeds: Option<Vec<u64>>) -> Result<bool> {
    let mut cfg = match &common.config {
        Some(p) => toml::from_str::<AblationConfig>(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => AblationConfig::default(),
    };
    if let Some(s) = steps {
        cfg.train.steps = s;
        cfg.train.eval_every = s;
        cfg.train.optim.total_steps = s;
        cfg.train.optim.warmup_steps = cfg.train.optim.warmup_steps.min(s);
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    eprintln!("variants: none, +spatial, +centrality, +edge (no positional-encoding variant)");
    let rows = run_ablation(&cfg, &|name, seed, mae| eprintln!("{name:<24} seed {seed}: valid MAE {mae:.4}"))?;
    let csv = ablation_csv(&rows, &cfg.seeds);
    match &common.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    let (ok, notes) = check_ordering(&rows);
    for n in notes {
        eprintln!("{n}");
    }
    Ok(ok)
}

#[allow(clippy::too_many_arguments)]
fn generate(
    common: &Common,
    task: SyntheticTask,
    num_graphs: usize,
    min_nodes: usize,
    max_nodes: usize,
    node_types: usize,
    edge_types: usize,
) -> Result<bool> {
    let spec = SyntheticSpec {
        task,
        num_graphs,
        min_nodes,
        max_nodes,
        node_types,
        edge_types,
        seed: common.seed.unwrap_or(0),
        ..SyntheticSpec::default()
    };
    let out = required(&common.out, "out")?;
    save_dataset(out, &generate_synthetic(&spec))?;
    eprintln!("wrote {num_graphs} graphs to {}", out.display());
    Ok(true)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Preprocess(c) => preprocess(c),
        Command::Train { common, resume } => train_cmd(common, *resume),
        Command::Eval(c) => eval_cmd(c),
        Command::Gradcheck { common, runs } => gradcheck(common, *runs),
        Command::ExpressCheck(c) => express_check(c),
        Command::Ablate { common, steps, seeds } => ablate(common, *steps, seeds.clone()),
        Command::Generate { common, task, num_graphs, min_nodes, max_nodes, node_types, edge_types } => {
            generate(common, *task, *num_graphs, *min_nodes, *max_nodes, *node_types, *edge_types)
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
