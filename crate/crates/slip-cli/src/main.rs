//! `slip` — command-line front end for the structure-aware language-image
//! pretraining engine: graph construction from purchase logs, synthetic
//! dataset generation, training, retrieval evaluation, hop-distance
//! analysis, ranked-list dumps, gradient checking, and ablation grids.
//!
//! Exit codes: 0 success, 1 failed numerical check, 2 usage error,
//! 3 data/format error, 4 training divergence.

use clap::{Args, Parser, Subcommand};
use slip_core::ablate::{format_ablation_table, grid_errors, run_grid, GridSpec, Variant};
use slip_core::encoders::Modality;
use slip_core::eval::{dump_ranked_list, hop_similarity_analysis, metrics_table, Direction};
use slip_core::graph::{graph_stats, k_core, project_bipartite, GraphStats};
use slip_core::io::{
    dataset_stats, emit_stats_table, load_dataset, load_dataset_dir, read_edge_list,
    read_purchase_log, read_train_config, save_checkpoint, write_dataset, write_edge_list,
    write_hop_analysis, write_lines, write_train_config, LoadReport,
};
use slip_core::model::ModelParams;
use slip_core::sampling::sample_subgraph_batch;
use slip_core::synth::{generate_synthetic, LabeledDataset, SplitSpec, SyntheticSpec};
use slip_core::tensor::Tensor;
use slip_core::trainer::{
    full_loss_grad_check, retrieval_on_nodes, train, TrainConfig,
};
use slip_core::{Result, SlipError};
use std::path::{Path, PathBuf};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(exit_code(&e));
    }
}

/// Map library errors to the documented exit codes: bad requests and bad
/// configuration are usage errors (2), malformed or unreadable data is a
/// format error (3), and a non-finite training loss is divergence (4).
fn exit_code(e: &SlipError) -> i32 {
    match e {
        SlipError::Divergence { .. } => 4,
        SlipError::InvalidInput(_) | SlipError::Config(_) => 2,
        _ => 3,
    }
}

#[derive(Parser)]
#[command(
    name = "slip",
    version,
    about = "Structure-aware language-image pretraining on co-purchase graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a co-purchase item graph from a user-item purchase log
    BuildGraph(BuildGraphArgs),
    /// Generate a synthetic clustered dataset with planted structure
    Synth(SynthArgs),
    /// Print the statistics table for datasets and/or edge lists
    Stats(StatsArgs),
    /// Train the dual-encoder model and write logs, checkpoints, and metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint's retrieval metrics on a dataset split
    Eval(EvalArgs),
    /// Group cross-modal similarities by graph hop distance
    AnalyzeHops(AnalyzeHopsArgs),
    /// Dump the top-k ranked candidates for one query item
    DumpRanked(DumpRankedArgs),
    /// Check model gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Run a train+eval grid over batch sizes, component variants, and seeds
    Ablate(AblateArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AnalyzeHops(a) => cmd_analyze_hops(a),
        Command::DumpRanked(a) => cmd_dump_ranked(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

// ---------------------------------------------------------------------------
// Shared argument groups
// ---------------------------------------------------------------------------

/// Training configuration: an optional file of `key = value` lines plus one
/// flag per key; flags override file values, which override defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines (flags below override it)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Nodes per training batch
    #[arg(long, value_name = "INT")]
    batch_size: Option<String>,
    /// Maximum training epochs (hard cap 50)
    #[arg(long, value_name = "INT")]
    epochs: Option<String>,
    /// Peak learning rate of the shallowest encoder tensors
    #[arg(long, value_name = "FLOAT")]
    base_lr: Option<String>,
    /// Per-depth decay factor for discriminative encoder rates
    #[arg(long, value_name = "FLOAT")]
    layer_decay: Option<String>,
    /// Learning rate of the structural tower and classifier head
    #[arg(long, value_name = "FLOAT")]
    graph_lr: Option<String>,
    /// Linear warmup steps before the linear decay
    #[arg(long, value_name = "INT")]
    warmup_steps: Option<String>,
    /// Epochs without improvement before early stopping
    #[arg(long, value_name = "INT")]
    patience: Option<String>,
    /// Minimum validation gain that counts as improvement
    #[arg(long, value_name = "FLOAT")]
    min_delta: Option<String>,
    /// Positive-pair hop threshold of the structural loss
    #[arg(long, value_name = "INT")]
    hop_threshold: Option<String>,
    /// Run seed driving initialization, sampling, and dropout
    #[arg(long, value_name = "INT")]
    seed: Option<String>,
    /// Enable the structural graph loss (true/false)
    #[arg(long, value_name = "BOOL")]
    graph_loss: Option<String>,
    /// Enable the auxiliary classification loss (true/false)
    #[arg(long, value_name = "BOOL")]
    aux_loss: Option<String>,
    /// Enable discriminative per-depth learning rates (true/false)
    #[arg(long, value_name = "BOOL")]
    dlr: Option<String>,
    /// Weight of the structural loss term
    #[arg(long, value_name = "FLOAT")]
    lambda_graph: Option<String>,
    /// Weight of the auxiliary classification term
    #[arg(long, value_name = "FLOAT")]
    lambda_aux: Option<String>,
    /// Exclude the anchor from the structural softmax (true/false)
    #[arg(long, value_name = "BOOL")]
    exclude_self: Option<String>,
    /// Batch sampling strategy: uniform or bfs-expand
    #[arg(long, value_name = "NAME")]
    sampling: Option<String>,
    /// Shared embedding dimension of both towers
    #[arg(long, value_name = "INT")]
    embed_dim: Option<String>,
    /// Encoder kind: linear or table
    #[arg(long, value_name = "NAME")]
    encoder: Option<String>,
    /// Hidden width of the first attention layer
    #[arg(long, value_name = "INT")]
    gat_hidden: Option<String>,
    /// Attention heads per layer
    #[arg(long, value_name = "INT")]
    gat_heads: Option<String>,
    /// Dropout probability on attention weights
    #[arg(long, value_name = "FLOAT")]
    gat_dropout: Option<String>,
    /// Negative-side slope of the attention nonlinearity
    #[arg(long, value_name = "FLOAT")]
    leaky_slope: Option<String>,
    /// Initial similarity scale (the learnable temperature starts at its log)
    #[arg(long, value_name = "FLOAT")]
    temp_init_scale: Option<String>,
    /// Adam first-moment decay
    #[arg(long, value_name = "FLOAT")]
    adam_beta1: Option<String>,
    /// Adam second-moment decay
    #[arg(long, value_name = "FLOAT")]
    adam_beta2: Option<String>,
    /// Adam denominator epsilon
    #[arg(long, value_name = "FLOAT")]
    adam_eps: Option<String>,
    /// Fraction of nodes in the training split
    #[arg(long, value_name = "FLOAT")]
    train_frac: Option<String>,
    /// Fraction of nodes in the validation split
    #[arg(long, value_name = "FLOAT")]
    val_frac: Option<String>,
    /// Fraction of nodes in the test split
    #[arg(long, value_name = "FLOAT")]
    test_frac: Option<String>,
    /// Seed of the split shuffle
    #[arg(long, value_name = "INT")]
    split_seed: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_train_config(path)?,
            None => TrainConfig::default(),
        };
        let overrides: [(&str, &Option<String>); 31] = [
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("base_lr", &self.base_lr),
            ("layer_decay", &self.layer_decay),
            ("graph_lr", &self.graph_lr),
            ("warmup_steps", &self.warmup_steps),
            ("patience", &self.patience),
            ("min_delta", &self.min_delta),
            ("hop_threshold", &self.hop_threshold),
            ("seed", &self.seed),
            ("graph_loss", &self.graph_loss),
            ("aux_loss", &self.aux_loss),
            ("dlr", &self.dlr),
            ("lambda_graph", &self.lambda_graph),
            ("lambda_aux", &self.lambda_aux),
            ("exclude_self", &self.exclude_self),
            ("sampling", &self.sampling),
            ("embed_dim", &self.embed_dim),
            ("encoder", &self.encoder),
            ("gat_hidden", &self.gat_hidden),
            ("gat_heads", &self.gat_heads),
            ("gat_dropout", &self.gat_dropout),
            ("leaky_slope", &self.leaky_slope),
            ("temp_init_scale", &self.temp_init_scale),
            ("adam_beta1", &self.adam_beta1),
            ("adam_beta2", &self.adam_beta2),
            ("adam_eps", &self.adam_eps),
            ("train_frac", &self.train_frac),
            ("val_frac", &self.val_frac),
            ("test_frac", &self.test_frac),
            ("split_seed", &self.split_seed),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set_key(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where the data comes from: a dataset directory, or explicit file paths.
#[derive(Args)]
struct DataArgs {
    /// Dataset directory holding edges.tsv, features_image.tsv,
    /// features_text.tsv, and optionally labels.tsv
    #[arg(
        long,
        value_name = "DIR",
        conflicts_with_all = ["edges", "image_features", "text_features", "labels"]
    )]
    dataset: Option<PathBuf>,
    /// Edge list file (item<TAB>item<TAB>weight)
    #[arg(long, value_name = "FILE", requires_all = ["image_features", "text_features"])]
    edges: Option<PathBuf>,
    /// Image feature table (dim=<d> modality=image header)
    #[arg(long, value_name = "FILE")]
    image_features: Option<PathBuf>,
    /// Text feature table (dim=<d> modality=text header)
    #[arg(long, value_name = "FILE")]
    text_features: Option<PathBuf>,
    /// Label file (item<TAB>class); optional
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, split: &SplitSpec) -> Result<(LabeledDataset, LoadReport)> {
        match (&self.dataset, &self.edges) {
            (Some(dir), _) => load_dataset_dir(dir, split),
            (None, Some(edges)) => {
                let image = self.image_features.as_ref().expect("enforced by clap");
                let text = self.text_features.as_ref().expect("enforced by clap");
                load_dataset(edges, image, text, self.labels.as_deref(), split)
            }
            (None, None) => Err(SlipError::InvalidInput(
                "provide --dataset DIR, or --edges with --image-features and --text-features"
                    .into(),
            )),
        }
    }
}

fn report_load(report: &LoadReport) {
    eprintln!(
        "loaded {} nodes ({} dropped), {} edges ({} dropped)",
        report.nodes_kept, report.nodes_dropped, report.edges_kept, report.edges_dropped
    );
}

/// An output directory that records every artifact it hands out and writes
/// them into a manifest on `finish`.
struct OutDir {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)
            .map_err(|e| SlipError::io(root.display().to_string(), e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    /// Path for a new artifact, recorded under its relative name.
    fn path(&mut self, rel: &str) -> PathBuf {
        self.artifacts.push(rel.to_string());
        self.root.join(rel)
    }

    /// Record an artifact written by other means (e.g. a checkpoint tree).
    fn record(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.artifacts.push("manifest.tsv".to_string());
        let mut lines = vec!["artifact".to_string()];
        lines.extend(self.artifacts.iter().cloned());
        let manifest = self.root.join("manifest.tsv");
        write_lines(&manifest, &lines)?;
        Ok(manifest)
    }
}

fn print_lines(lines: &[String]) {
    for line in lines {
        println!("{}", line);
    }
}

// ---------------------------------------------------------------------------
// build-graph
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BuildGraphArgs {
    /// Purchase log (user<TAB>item[<TAB>timestamp])
    #[arg(long, value_name = "FILE")]
    log: PathBuf,
    /// Keep edges co-purchased at least this many times
    #[arg(long, value_name = "INT", default_value_t = 3)]
    min_cofreq: u32,
    /// k-core order: iteratively drop nodes of degree below k
    #[arg(long, value_name = "INT", default_value_t = 5)]
    kcore: u32,
    /// Whether frequency filtering or the k-core runs first
    #[arg(long, value_name = "ORDER", default_value = "freq-first",
          value_parser = ["freq-first", "core-first"])]
    order: String,
    /// Output edge list path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<()> {
    let log = read_purchase_log(&args.log)?;
    // Project with every co-purchase edge, then apply the two filters in the
    // configured order.
    let projected = project_bipartite(&log, 1)?;
    let g = match args.order.as_str() {
        "freq-first" => k_core(&projected.filter_edges_by_weight(args.min_cofreq), args.kcore),
        "core-first" => k_core(&projected, args.kcore).filter_edges_by_weight(args.min_cofreq),
        other => {
            return Err(SlipError::InvalidInput(format!(
                "unknown order '{}'",
                other
            )))
        }
    };
    write_edge_list(&args.out, &g)?;
    eprintln!(
        "projected {} items from {} log records; kept {} nodes / {} edges -> {}",
        projected.n(),
        log.len(),
        g.n(),
        g.edge_count(),
        args.out.display()
    );
    print_lines(&emit_stats_table(&[graph_stats(&g, None)]));
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Number of items
    #[arg(long, value_name = "INT", default_value_t = 200)]
    n_items: usize,
    /// Number of latent clusters (doubles as the label set)
    #[arg(long, value_name = "INT", default_value_t = 8)]
    n_clusters: usize,
    /// Image feature dimension
    #[arg(long, value_name = "INT", default_value_t = 32)]
    image_dim: usize,
    /// Text feature dimension
    #[arg(long, value_name = "INT", default_value_t = 32)]
    text_dim: usize,
    /// Edge probability within a cluster
    #[arg(long, value_name = "FLOAT", default_value_t = 0.2)]
    intra_prob: f64,
    /// Edge probability across clusters
    #[arg(long, value_name = "FLOAT", default_value_t = 0.002)]
    inter_prob: f64,
    /// Fraction of within-cluster edges drawn between distinct roles
    #[arg(long, value_name = "FLOAT", default_value_t = 0.5)]
    complement_fraction: f64,
    /// Gaussian feature noise
    #[arg(long, value_name = "FLOAT", default_value_t = 0.1)]
    noise_sigma: f64,
    /// Generator seed (also seeds the split shuffle)
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_items: args.n_items,
        n_clusters: args.n_clusters,
        image_dim: args.image_dim,
        text_dim: args.text_dim,
        intra_cluster_edge_prob: args.intra_prob,
        inter_cluster_edge_prob: args.inter_prob,
        complement_pair_fraction: args.complement_fraction,
        feature_noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let (data, meta) = generate_synthetic(&spec)?;
    let mut out = OutDir::create(&args.out_dir)?;
    write_dataset(&args.out_dir, &data)?;
    out.record("edges.tsv");
    out.record("features_image.tsv");
    out.record("features_text.tsv");
    out.record("labels.tsv");
    let manifest = out.finish()?;
    eprintln!(
        "generated {} items in {} clusters ({} intra / {} inter edges) -> {}",
        data.n(),
        spec.n_clusters,
        meta.intra_edges,
        meta.inter_edges,
        manifest.display()
    );
    print_lines(&emit_stats_table(&[dataset_stats(&data)]));
    Ok(())
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Args)]
struct StatsArgs {
    /// Dataset directories (scored with the feature-cosine stand-in)
    #[arg(long = "dataset", value_name = "DIR")]
    datasets: Vec<PathBuf>,
    /// Raw edge list files (no features, score columns print na)
    #[arg(long = "edges", value_name = "FILE")]
    edges: Vec<PathBuf>,
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    if args.datasets.is_empty() && args.edges.is_empty() {
        return Err(SlipError::InvalidInput(
            "nothing to report: pass --dataset and/or --edges".into(),
        ));
    }
    let mut rows: Vec<GraphStats> = Vec::new();
    for dir in &args.datasets {
        let (data, report) = load_dataset_dir(dir, &SplitSpec::standard(0))?;
        report_load(&report);
        rows.push(dataset_stats(&data));
    }
    for path in &args.edges {
        let g = read_edge_list(path)?;
        rows.push(graph_stats(&g, None));
    }
    print_lines(&emit_stats_table(&rows));
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for logs, checkpoints, and metrics
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let (data, report) = args.data.load(&config.split_spec())?;
    report_load(&report);

    let outcome = train(&data, &config)?;

    let mut out = OutDir::create(&args.out_dir)?;
    write_train_config(&out.path("config.txt"), &config)?;

    let mut loss_log =
        vec!["step\tL_total\tL_clip\tL_graph\tL_aux\talignment\tlr".to_string()];
    loss_log.extend(outcome.step_log.iter().cloned());
    write_lines(&out.path("loss_log.tsv"), &loss_log)?;

    let mut epoch_log =
        vec!["epoch\tval_mrr_i2t\tval_mrr_t2i\tval_mean\tstatus".to_string()];
    epoch_log.extend(outcome.epoch_log.iter().cloned());
    write_lines(&out.path("epoch_log.tsv"), &epoch_log)?;

    save_checkpoint(&out.root.join("best"), &outcome.best, &outcome.best_meta)?;
    out.record("best");
    save_checkpoint(&out.root.join("last"), &outcome.last, &outcome.last_meta)?;
    out.record("last");

    let mut summary = vec![format!(
        "ran {} steps over {} epochs{}",
        outcome.steps_run,
        outcome.last_meta.epoch,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    )];
    if !outcome.best_meta.val_metric.is_nan() {
        summary.push(format!(
            "best validation mean MRR {:.6} at epoch {}",
            outcome.best_meta.val_metric, outcome.best_meta.epoch
        ));
    }

    if data.split.test.is_empty() {
        summary.push("test split empty: no metrics report".to_string());
    } else {
        let (i2t, t2i) = retrieval_on_nodes(&outcome.best, &data, &data.split.test)?;
        let table = metrics_table(&[&i2t, &t2i]);
        write_lines(&out.path("metrics.tsv"), &table)?;
        summary.push("test retrieval of the best checkpoint:".to_string());
        summary.extend(table);
    }

    let manifest = out.finish()?;
    summary.push(format!("artifacts listed in {}", manifest.display()));
    print_lines(&summary);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint directory (the best/ or last/ tree written by train)
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Node set to rank: train, val, test, or all
    #[arg(long, value_name = "SPLIT", default_value = "test",
          value_parser = ["train", "val", "test", "all"])]
    split: String,
    /// Optional output directory for the metrics report
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn split_nodes<'a>(data: &'a LabeledDataset, which: &str, all: &'a mut Vec<usize>) -> &'a [usize] {
    match which {
        "train" => &data.split.train,
        "val" => &data.split.val,
        "test" => &data.split.test,
        _ => {
            *all = (0..data.n()).collect();
            all
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let (data, report) = args.data.load(&config.split_spec())?;
    report_load(&report);
    let (params, meta) = slip_core::io::load_checkpoint(&args.checkpoint)?;
    eprintln!(
        "checkpoint from step {}, epoch {}, validation metric {}",
        meta.step, meta.epoch, meta.val_metric
    );

    let mut all = Vec::new();
    let nodes = split_nodes(&data, &args.split, &mut all);
    if nodes.is_empty() {
        return Err(SlipError::InvalidInput(format!(
            "the {} split is empty",
            args.split
        )));
    }
    let (i2t, t2i) = retrieval_on_nodes(&params, &data, nodes)?;
    let table = metrics_table(&[&i2t, &t2i]);
    if let Some(dir) = &args.out_dir {
        let mut out = OutDir::create(dir)?;
        write_lines(&out.path("metrics.tsv"), &table)?;
        out.finish()?;
    }
    print_lines(&table);
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze-hops
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AnalyzeHopsArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint directory providing the encoders
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Largest hop distance grouped
    #[arg(long, value_name = "INT", default_value_t = 3)]
    max_hop: u32,
    /// Pair sample budget per hop group beyond distance 1
    #[arg(long, value_name = "INT", default_value_t = 20000)]
    budget: usize,
    /// Seed of the budget subsampling
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
    /// Output directory for hop<k>.tsv files and summary.tsv
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn encode_all(params: &ModelParams, data: &LabeledDataset) -> Result<(Tensor, Tensor)> {
    let nodes: Vec<usize> = (0..data.n()).collect();
    let e_v = params.encode_plain(Some(&data.image_features), Modality::Image, &nodes)?;
    let e_t = params.encode_plain(Some(&data.text_features), Modality::Text, &nodes)?;
    Ok((e_v, e_t))
}

fn cmd_analyze_hops(args: AnalyzeHopsArgs) -> Result<()> {
    let (data, report) = args.data.load(&SplitSpec::standard(0))?;
    report_load(&report);
    let (params, _) = slip_core::io::load_checkpoint(&args.checkpoint)?;
    let (e_v, e_t) = encode_all(&params, &data)?;
    let table = hop_similarity_analysis(&e_v, &e_t, &data.graph, args.max_hop, args.budget, args.seed)?;

    let mut out = OutDir::create(&args.out_dir)?;
    let written = write_hop_analysis(&args.out_dir, &table)?;
    for name in &written {
        out.record(name);
    }
    out.finish()?;

    let mut lines = vec!["hop\tpairs\tmean\tstd".to_string()];
    for g in &table.groups {
        lines.push(format!("{}\t{}\t{:.6}\t{:.6}", g.hop, g.pairs, g.mean, g.std));
    }
    print_lines(&lines);
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-ranked
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DumpRankedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint directory providing the encoders
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Query item id
    #[arg(long, value_name = "ITEM")]
    query: String,
    /// Retrieval direction: i2t or t2i
    #[arg(long, value_name = "DIR", default_value = "i2t")]
    direction: String,
    /// Number of candidates to list
    #[arg(long, value_name = "INT", default_value_t = 10)]
    k: usize,
    /// Optional output directory for ranked.tsv
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

fn cmd_dump_ranked(args: DumpRankedArgs) -> Result<()> {
    let direction: Direction = args.direction.parse()?;
    let (data, report) = args.data.load(&SplitSpec::standard(0))?;
    report_load(&report);
    let (params, _) = slip_core::io::load_checkpoint(&args.checkpoint)?;
    let (e_v, e_t) = encode_all(&params, &data)?;
    let query = data.graph.index_of(&args.query).ok_or_else(|| {
        SlipError::InvalidInput(format!("unknown query item '{}'", args.query))
    })?;
    let entries = dump_ranked_list(&e_v, &e_t, query, direction, args.k)?;

    let mut lines = vec!["rank\titem\tscore\tmatch".to_string()];
    for (rank, e) in entries.iter().enumerate() {
        lines.push(format!(
            "{}\t{}\t{:.6}\t{}",
            rank + 1,
            data.graph.node_id(e.node),
            e.score,
            e.is_match
        ));
    }
    if let Some(dir) = &args.out_dir {
        let mut out = OutDir::create(dir)?;
        write_lines(&out.path("ranked.tsv"), &lines)?;
        out.finish()?;
    }
    print_lines(&lines);
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Batch size of the checked loss
    #[arg(long, value_name = "INT", default_value_t = 6)]
    nodes: usize,
    /// Central finite-difference step
    #[arg(long, value_name = "FLOAT", default_value_t = 1e-5)]
    step: f64,
    /// Largest acceptable relative gradient error
    #[arg(long, value_name = "FLOAT", default_value_t = 1e-4)]
    threshold: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let data = if args.data.dataset.is_none() && args.data.edges.is_none() {
        // No data given: check on a small built-in clustered dataset.
        let spec = SyntheticSpec {
            n_items: 24,
            n_clusters: 4,
            image_dim: 8,
            text_dim: 8,
            intra_cluster_edge_prob: 0.5,
            inter_cluster_edge_prob: 0.02,
            seed: config.seed,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec)?.0
    } else {
        let (data, report) = args.data.load(&config.split_spec())?;
        report_load(&report);
        data
    };

    // A connected batch so the structural loss has positive pairs to grade.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    let batch = sample_subgraph_batch(
        &data.graph,
        args.nodes.min(data.n()),
        config.sampling,
        config.hop_threshold,
        &mut rng,
    )?;
    let report = full_loss_grad_check(&data, &config, &batch.node_ids, args.step)?;

    let mut lines = vec!["tensor\tmax_rel_error".to_string()];
    for (name, err) in &report.per_tensor {
        lines.push(format!("{}\t{:.3e}", name, err));
    }
    lines.push(format!("worst\t{:.3e}", report.worst()));
    print_lines(&lines);

    if report.worst() > args.threshold {
        eprintln!(
            "gradient check FAILED: worst relative error {:.3e} exceeds {:.3e}",
            report.worst(),
            args.threshold
        );
        std::process::exit(1);
    }
    eprintln!("gradient check passed");
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the ablation table
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Comma-separated batch sizes, one grid axis
    #[arg(long, value_name = "LIST", default_value = "64,128,256,512,1024")]
    batch_sizes: String,
    /// Comma-separated variants: wo-g, w-g, base, g, g-aux, g-aux-dlr
    #[arg(long, value_name = "LIST", default_value = "wo-g,w-g")]
    variants: String,
    /// Seeds per cell (cell k trains with seed + k)
    #[arg(long, value_name = "INT", default_value_t = 3)]
    seeds: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_batch_sizes(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|_| {
                SlipError::InvalidInput(format!("bad batch size '{}' in --batch-sizes", s))
            })
        })
        .collect()
}

fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

/// Worker cap for the ablation grid: the SLIP_THREADS environment variable
/// when set, otherwise the machine's available parallelism.
fn max_threads() -> Result<usize> {
    match std::env::var("SLIP_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                SlipError::InvalidInput(format!("SLIP_THREADS must be a positive integer, got '{}'", v))
            })?;
            if n == 0 {
                return Err(SlipError::InvalidInput(
                    "SLIP_THREADS must be a positive integer".into(),
                ));
            }
            Ok(n)
        }
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
        Err(e) => Err(SlipError::InvalidInput(format!("SLIP_THREADS: {}", e))),
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let grid = GridSpec {
        batch_sizes: parse_batch_sizes(&args.batch_sizes)?,
        variants: parse_variants(&args.variants)?,
        seeds: args.seeds,
    };
    let (data, report) = args.data.load(&base.split_spec())?;
    report_load(&report);

    let threads = max_threads()?;
    eprintln!(
        "running {} cells on up to {} worker threads",
        grid.batch_sizes.len() * grid.variants.len() * grid.seeds as usize,
        threads
    );
    let results = run_grid(&data, &base, &grid, threads)?;

    let table = format_ablation_table(&results);
    let mut out = OutDir::create(&args.out_dir)?;
    write_train_config(&out.path("config.txt"), &base)?;
    write_lines(&out.path("ablation.tsv"), &table)?;

    let errors = grid_errors(&results);
    if !errors.is_empty() {
        let mut lines = vec!["batch\tvariant\tseed\terror".to_string()];
        for (key, msg) in &errors {
            lines.push(format!(
                "{}\t{}\t{}\t{}",
                key.batch, key.variant, key.seed, msg
            ));
        }
        write_lines(&out.path("errors.tsv"), &lines)?;
        eprintln!("{} of {} cells failed; see errors.tsv", errors.len(), results.len());
    }
    out.finish()?;
    print_lines(&table);
    Ok(())
}
