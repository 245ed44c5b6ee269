//! Command-line pipeline stages and the ranking service.

pub mod server;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use phenokg_core::autodiff::LrSchedule;
use phenokg_core::eval::{embed_patients, evaluate, EvalConfig};
use phenokg_core::kg::synthetic::{generate, SyntheticGraphConfig};
use phenokg_core::kg::{load_graph, load_graph_dir, write_graph_dir, KnowledgeGraph, DEFAULT_EDGE_ATTR_DIM};
use phenokg_core::model::checkpoint::stored_width;
use phenokg_core::model::{EmbeddingMode, Model, ModelConfig};
use phenokg_core::patient::{load_patients, simulate_cohort, write_patients, CandidateSource, SimulatorConfig};
use phenokg_core::scalar::Scalar;
use phenokg_core::service::{RankRequest, Ranker};
use phenokg_core::train::{resume, train, EpochLog, LossArms, TrainConfig};

use server::SharedService;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "phenokg", version, about = "Phenotype-driven causative-gene prioritization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a node/edge TSV pair (or generate a synthetic graph) into a graph directory.
    BuildGraph(BuildGraphArgs),
    /// Write a simulated patient cohort as JSON lines.
    Simulate(SimulateArgs),
    /// Train a model, or resume a run from its last checkpoint.
    Train(TrainArgs),
    /// Rank every patient in a cohort and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Rank candidate genes for one patient.
    Rank(RankArgs),
    /// Serve the HTTP ranking API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Graph directory holding nodes.tsv, edges.tsv and optional embeddings.bin.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EDGE_ATTR_DIM)]
    pub edge_attr_dim: usize,
}

impl GraphArgs {
    fn load(&self) -> anyhow::Result<KnowledgeGraph> {
        load_graph_dir(&self.graph, self.edge_attr_dim).with_context(|| format!("loading graph from {}", self.graph.display()))
    }
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long, required_unless_present = "synthetic")]
    pub nodes: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    pub edges: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Generate a small synthetic graph instead of reading files.
    #[arg(long, conflicts_with_all = ["nodes", "edges", "embeddings"])]
    pub synthetic: bool,
    /// Feature width for the synthetic graph.
    #[arg(long, requires = "synthetic")]
    pub embedding_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EDGE_ATTR_DIM)]
    pub edge_attr_dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 100)]
    pub patients: usize,
    #[arg(long, default_value_t = 19)]
    pub distractors: usize,
    #[arg(long, default_value_t = 1)]
    pub noise_phenotypes: usize,
    #[arg(long, default_value_t = 0.5)]
    pub hard_fraction: f64,
    /// Draw causative genes from this many genes only.
    #[arg(long)]
    pub causative_pool: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelSize {
    /// Full-size dimensions.
    Full,
    /// Reduced dimensions for laptop-scale runs.
    Small,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for best.ckpt, last.ckpt and report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a last.ckpt; model and training flags come from the checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping (default 25, capped at --epochs).
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value = "both")]
    pub arms: LossArms,
    #[arg(long, default_value = "pretrained")]
    pub embedding_mode: EmbeddingMode,
    #[arg(long, value_enum, default_value = "full")]
    pub model: ModelSize,
    /// Node-table width in random embedding mode.
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Overrides the dropout rate of the graph and gene encoders.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CandidateMode {
    /// Rank each patient's own candidate list.
    Candidates,
    /// Rank every gene within k hops of the phenotypes.
    Khop,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub patients: PathBuf,
    #[arg(long, value_enum, default_value = "candidates")]
    pub mode: CandidateMode,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Labeled cohort whose embeddings serve as the top-q match reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub phenotypes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<String>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub top: Option<usize>,
    /// Print the response as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = "PHENOKG_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: String,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            EXIT_DATA
        }
    }
}

/// The error chain joined by ": ", skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

pub fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::BuildGraph(a) => build_graph(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Train(a) => match a.precision {
            Precision::F32 => train_cmd::<f32>(&a),
            Precision::F64 => train_cmd::<f64>(&a),
        },
        Command::Evaluate(a) => match width(&a.ckpt)? {
            Precision::F32 => evaluate_cmd::<f32>(&a),
            Precision::F64 => evaluate_cmd::<f64>(&a),
        },
        Command::Rank(a) => {
            let service = load_service(&a.graph, &a.ckpt)?;
            rank_cmd(service.as_ref(), &a)
        }
        Command::Serve(a) => {
            let service = load_service(&a.graph, &a.ckpt)?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(server::serve(service, &a.addr)).with_context(|| format!("serving on {}", a.addr))
        }
    }
}

fn width(ckpt: &Path) -> anyhow::Result<Precision> {
    match stored_width(ckpt).with_context(|| format!("reading {}", ckpt.display()))? {
        4 => Ok(Precision::F32),
        _ => Ok(Precision::F64),
    }
}

fn build_graph(a: &BuildGraphArgs) -> anyhow::Result<()> {
    let graph = if a.synthetic {
        generate(&SyntheticGraphConfig { embedding_dim: a.embedding_dim, seed: a.seed, ..Default::default() })
    } else {
        let (nodes, edges) = (a.nodes.as_ref().expect("required by clap"), a.edges.as_ref().expect("required by clap"));
        let mut g = load_graph(nodes, edges, a.edge_attr_dim)?;
        if let Some(e) = &a.embeddings {
            if !e.exists() {
                bail!("embedding file {} does not exist", e.display());
            }
            g.attach_embeddings(e)?;
        }
        g
    };
    write_graph_dir(&graph, &a.out)?;
    let counts: Vec<String> = graph.type_counts().into_iter().map(|(t, n)| format!("{t}={n}")).collect();
    println!("{} nodes, {} edges ({}), features: {}", graph.node_count(), graph.edge_count(), counts.join(" "), graph.feature_dim().map_or("none".into(), |d| d.to_string()));
    Ok(())
}

fn simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let graph = a.graph.load()?;
    let config = SimulatorConfig {
        n_patients: a.patients,
        noise_phenotypes: a.noise_phenotypes,
        distractor_candidates: a.distractors,
        hard_fraction: a.hard_fraction,
        causative_pool: a.causative_pool,
        seed: a.seed,
        ..Default::default()
    };
    let cohort = simulate_cohort(&graph, &config)?;
    write_patients(&a.out, &cohort)?;
    println!("wrote {} patients to {}", cohort.len(), a.out.display());
    Ok(())
}

fn model_config(a: &TrainArgs, graph: &KnowledgeGraph) -> anyhow::Result<ModelConfig> {
    let dim = match (a.embedding_mode, graph.feature_dim()) {
        (EmbeddingMode::Random, _) => a.input_dim.unwrap_or(match a.model {
            ModelSize::Full => 512,
            ModelSize::Small => 32,
        }),
        (_, Some(d)) => d,
        (_, None) => bail!("{:?} embedding mode needs node features; add embeddings.bin or use --embedding-mode random", a.embedding_mode),
    };
    let mut config = match a.model {
        ModelSize::Full => ModelConfig::full(dim),
        ModelSize::Small => ModelConfig::small(dim),
    }
    .with_mode(a.embedding_mode, graph);
    if let Some(p) = a.dropout {
        config.gnn.dropout = p;
        config.gene.dropout = p;
    }
    Ok(config)
}

fn print_epoch(log: &EpochLog) {
    println!("{log}");
}

fn train_cmd<T: Scalar>(a: &TrainArgs) -> anyhow::Result<()> {
    let graph = a.graph.load()?;
    let train_set = load_patients(&a.train, &graph)?;
    let val_set = match &a.val {
        Some(p) => load_patients(p, &graph)?,
        None => Vec::new(),
    };
    let (report, _) = match &a.resume {
        Some(ckpt) => resume::<T>(ckpt, &graph, &train_set, &val_set, a.epochs, &a.out, &mut print_epoch)?,
        None => {
            let defaults = TrainConfig::default();
            let max_epochs = a.epochs.unwrap_or(defaults.max_epochs);
            let config = TrainConfig {
                max_epochs,
                patience: a.patience.unwrap_or(defaults.patience.min(max_epochs)),
                batch_size: a.batch_size,
                schedule: LrSchedule { lr_max: a.lr, ..LrSchedule::default() },
                arms: a.arms,
                candidates: CandidateSource::Provided { k: a.k },
                seed: a.seed,
                ..defaults
            };
            train::<T>(&graph, &train_set, &val_set, model_config(a, &graph)?, config, &a.out, &mut print_epoch)?
        }
    };
    match report.best_epoch {
        Some(e) => println!("best epoch {e}, validation MRR {:.4}, checkpoint {}", report.best_val_mrr, report.checkpoint.display()),
        None => println!("no epoch run"),
    }
    Ok(())
}

fn evaluate_cmd<T: Scalar>(a: &EvaluateArgs) -> anyhow::Result<()> {
    let graph = a.graph.load()?;
    let model = Model::<T>::load(&a.ckpt)?;
    let patients = load_patients(&a.patients, &graph)?;
    let source = match a.mode {
        CandidateMode::Candidates => CandidateSource::Provided { k: a.k },
        CandidateMode::Khop => CandidateSource::KHop { k: a.k },
    };
    let config = EvalConfig { source, ..EvalConfig::default() };
    let reference = match &a.reference {
        Some(p) => Some(embed_patients(&model, &graph, &load_patients(p, &graph)?, source)?),
        None => None,
    };
    let (report, _) = evaluate(&model, &graph, &patients, &config, reference.as_deref())?;
    report.write(&a.out)?;
    println!("evaluated {} patients, excluded {}; MRR {:.4}; report {}", report.evaluated(), report.excluded(), report.mrr, a.out.display());
    Ok(())
}

fn load_service(graph: &GraphArgs, ckpt: &Path) -> anyhow::Result<SharedService> {
    let g = graph.load()?;
    Ok(match width(ckpt)? {
        Precision::F32 => Arc::new(Ranker::new(g, Model::<f32>::load(ckpt)?)?),
        Precision::F64 => Arc::new(Ranker::new(g, Model::<f64>::load(ckpt)?)?),
    })
}

fn rank_cmd(service: &dyn server::RankService, a: &RankArgs) -> anyhow::Result<()> {
    let request = RankRequest { phenotypes: a.phenotypes.clone(), candidate_genes: a.candidates.clone(), k: a.k, top: a.top };
    let response = service.rank(&request).map_err(|e| anyhow!(e))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&response)?);
    } else if response.excluded {
        println!("excluded: no candidate gene is reachable from the phenotypes");
    } else {
        println!("rank\tgene\tsymbol\tscore");
        for (i, e) in response.ranking.iter().enumerate() {
            println!("{}\t{}\t{}\t{:.6}", i + 1, e.gene, e.symbol.as_deref().unwrap_or("-"), e.score);
        }
    }
    Ok(())
}
