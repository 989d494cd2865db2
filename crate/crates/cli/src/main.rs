//! Command-line front end: one binary, one subcommand per workflow, with
//! exit codes mapped from error categories so scripts can branch on the
//! failure class.

use clap::{Args, Parser, Subcommand};
use fedssl_core::data::{
    convert_medmnist, dirichlet_partition, file_sha256, mean_label_entropy, synth_generate,
    DatasetContainer, PartitionConfig, Split, SynthPattern, SynthSpec,
};
use fedssl_core::error::{Error, Result};
use fedssl_core::eval::{evaluate_all_clients, KnnConfig};
use fedssl_core::fed::{broadcast, ClientState, Scheme, ServerState};
use fedssl_core::model::build_model;
use fedssl_core::params::load_weights;
use fedssl_core::rng::stream;
use fedssl_core::runner::{
    emit_plots, final_round_records, parse_config, read_metrics, run_experiment, run_grid,
    summarize_grid, ExperimentConfig, GridSpec, PlotKind,
};
use fedssl_core::ssl::Method;
use fedssl_core::tensor::{gradcheck, BnStats, Tape, Tensor, Var};
use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedssl", version, about = "Federated self-supervised learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment cell and persist its manifest and metrics log.
    Run(RunArgs),
    /// Run a method x scheme x client-count grid under one base config.
    Grid(GridArgs),
    /// Inspect a Dirichlet split of a dataset container.
    Partition(PartitionArgs),
    /// Convert a MedMNIST npz archive into train/test containers.
    ConvertDataset(ConvertArgs),
    /// Generate synthetic train/test containers.
    Synth(SynthArgs),
    /// Re-evaluate saved global weights under a config's protocol.
    ///
    /// Evaluates the persisted global view on freshly rebuilt client
    /// shards; client-local BN state is not persisted, so a FedBN run is
    /// re-evaluated with the global placeholders.
    Eval(EvalArgs),
    /// Emit plot-data files from a grid directory.
    Plots(PlotsArgs),
    /// Tensor-engine gradient self-test.
    Gradcheck,
}

/// Every ExperimentConfig key as a flag; values use the same syntax as
/// the config file and override it.
#[derive(Args, Default)]
struct ConfigFlags {
    /// Flat key = value config file, applied before any flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long = "data_dir")]
    data_dir: Option<String>,
    #[arg(long = "out_dir")]
    out_dir: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long = "n_clients")]
    n_clients: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long = "local_epochs")]
    local_epochs: Option<String>,
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long = "knn_k")]
    knn_k: Option<String>,
    #[arg(long)]
    participation: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "eval_every_round")]
    eval_every_round: Option<String>,
    #[arg(long)]
    parallel: Option<String>,
    #[arg(long = "save_weights")]
    save_weights: Option<String>,
}

impl ConfigFlags {
    fn entries(&self) -> Vec<(&'static str, &String)> {
        [
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("arch", &self.arch),
            ("method", &self.method),
            ("scheme", &self.scheme),
            ("n_clients", &self.n_clients),
            ("rounds", &self.rounds),
            ("local_epochs", &self.local_epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("temperature", &self.temperature),
            ("alpha", &self.alpha),
            ("mu", &self.mu),
            ("knn_k", &self.knn_k),
            ("participation", &self.participation),
            ("seed", &self.seed),
            ("eval_every_round", &self.eval_every_round),
            ("parallel", &self.parallel),
            ("save_weights", &self.save_weights),
        ]
        .into_iter()
        .filter_map(|(key, value)| value.as_ref().map(|v| (key, v)))
        .collect()
    }

    fn resolve(&self) -> Result<(ExperimentConfig, Vec<String>)> {
        let (mut cfg, mut overrides) = match &self.config {
            Some(path) => parse_config(&fs::read_to_string(path)?)?,
            None => (ExperimentConfig::default(), Vec::new()),
        };
        for (key, value) in self.entries() {
            cfg.apply(key, value)?;
            if !overrides.iter().any(|k| k == key) {
                overrides.push(key.to_string());
            }
        }
        Ok((cfg, overrides))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Comma-separated methods, e.g. simclr,barlow.
    #[arg(long)]
    methods: String,
    /// Comma-separated schemes, e.g. fedavg,fedbn.
    #[arg(long)]
    schemes: String,
    /// Comma-separated client counts, e.g. 5,10,20.
    #[arg(long)]
    clients: String,
}

#[derive(Args)]
struct PartitionArgs {
    /// Path to a .fssld container.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    clients: usize,
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConvertArgs {
    /// MedMNIST-layout npz archive.
    #[arg(long)]
    archive: PathBuf,
    /// Dataset name, e.g. breastmnist.
    #[arg(long)]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    name: String,
    /// blobs or stripes.
    #[arg(long)]
    pattern: String,
    /// Train split size.
    #[arg(long)]
    train: usize,
    /// Test split size.
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 2)]
    classes: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Weight snapshot; defaults to <out_dir>/global.fsslw.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct PlotsArgs {
    /// Directory holding the grid's cell subdirectories.
    #[arg(long = "grid_dir")]
    grid_dir: PathBuf,
    #[arg(long)]
    methods: String,
    #[arg(long)]
    schemes: String,
    #[arg(long)]
    clients: String,
    /// clients-vs-score or ncl-best-vs-simclr.
    #[arg(long)]
    kind: String,
}

fn parse_list<T>(what: &str, text: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty {what} list")));
    }
    Ok(items)
}

fn grid_spec(methods: &str, schemes: &str, clients: &str) -> Result<GridSpec> {
    Ok(GridSpec {
        methods: parse_list("method", methods, Method::parse)?,
        schemes: parse_list("scheme", schemes, Scheme::parse)?,
        client_counts: parse_list("client count", clients, |s| {
            s.parse()
                .map_err(|e| Error::Config(format!("bad client count {s:?}: {e}")))
        })?,
    })
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (cfg, overrides) = args.flags.resolve()?;
    let manifest = run_experiment(&cfg, &overrides)?;
    let records = read_metrics(&cfg.out_dir.join("metrics.jsonl"))?;
    let summary = fedssl_core::eval::summarize_records(&final_round_records(&records))?;
    println!(
        "completed {} rounds in {:.1}s: accuracy {:.4}±{:.4}, weighted F1 {:.4}±{:.4}",
        manifest.rounds.len(),
        manifest.wall_clock_seconds,
        summary.mean_accuracy,
        summary.std_accuracy,
        summary.mean_f1,
        summary.std_f1
    );
    println!("manifest: {}", cfg.out_dir.join("manifest.json").display());
    Ok(())
}

fn cmd_grid(args: &GridArgs) -> Result<()> {
    let (base, overrides) = args.flags.resolve()?;
    let grid = grid_spec(&args.methods, &args.schemes, &args.clients)?;
    let (outcomes, _) = run_grid(&base, &grid, &overrides)?;
    let mut failures = 0;
    for outcome in &outcomes {
        match &outcome.error {
            None => println!("cell {}: ok", outcome.dir),
            Some(msg) => {
                failures += 1;
                println!("cell {}: FAILED ({msg})", outcome.dir);
            }
        }
    }
    println!(
        "summary tables: {} and {}",
        base.out_dir.join("summary_accuracy.tsv").display(),
        base.out_dir.join("summary_f1.tsv").display()
    );
    if failures > 0 {
        return Err(Error::Config(format!(
            "{failures} of {} grid cells failed",
            outcomes.len()
        )));
    }
    Ok(())
}

fn cmd_partition(args: &PartitionArgs) -> Result<()> {
    let container = DatasetContainer::load(&args.data)?;
    let cfg = PartitionConfig {
        n_clients: args.clients,
        alpha: args.alpha,
        seed: args.seed,
    };
    let shards = dirichlet_partition(container.labels(), &cfg)?;
    for (id, shard) in shards.iter().enumerate() {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for &idx in shard {
            *counts.entry(container.labels()[idx]).or_insert(0) += 1;
        }
        let histogram: Vec<String> = counts
            .iter()
            .map(|(class, n)| format!("{class}:{n}"))
            .collect();
        println!(
            "client {id}: {} samples [{}]",
            shard.len(),
            histogram.join(" ")
        );
    }
    println!(
        "mean label entropy: {:.4} nats",
        mean_label_entropy(&shards, container.labels())
    );
    Ok(())
}

fn cmd_convert(args: &ConvertArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let (train_path, test_path) = convert_medmnist(&args.archive, &args.name, &args.out)?;
    for path in [&train_path, &test_path] {
        let container = DatasetContainer::load(path)?;
        println!(
            "{}: {} samples, {} classes, sha256 {}",
            path.display(),
            container.len(),
            container.n_classes(),
            file_sha256(path)?
        );
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let pattern = SynthPattern::parse(&args.pattern)?;
    for (split, n) in [(Split::Train, args.train), (Split::Test, args.test)] {
        let container = synth_generate(&SynthSpec {
            name: args.name.clone(),
            split,
            n,
            classes: args.classes,
            pattern,
            seed: args.seed,
        })?;
        let path = args.out.join(format!("{}.{split}.fssld", args.name));
        container.save(&path)?;
        println!("{}: {} samples, sha256 {}", path.display(), n, file_sha256(&path)?);
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (cfg, _) = args.flags.resolve()?;
    cfg.validate()?;
    let weights_path = args
        .weights
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("global.fsslw"));
    let global = load_weights(&weights_path)?;

    let train_path = cfg.data_dir.join(format!("{}.train.fssld", cfg.dataset));
    let test_path = cfg.data_dir.join(format!("{}.test.fssld", cfg.dataset));
    let train = DatasetContainer::load(&train_path)?;
    let test = DatasetContainer::load(&test_path)?;
    let spec = fedssl_core::model::ArchitectureSpec::desk(train.dims().0, cfg.method);
    spec.validate_for(cfg.method)?;

    let partition = PartitionConfig {
        n_clients: cfg.n_clients,
        alpha: cfg.alpha,
        seed: cfg.seed,
    };
    let shards = dirichlet_partition(train.labels(), &partition)?;
    let init = build_model(&spec, &mut stream(cfg.seed, "model-init", &[0]))?;
    let mut clients = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientState::new(id, init.clone(), shard, &spec, cfg.method))
        .collect::<Result<Vec<ClientState>>>()?;
    let server = ServerState::new(global);
    for client in clients.iter_mut() {
        broadcast(Scheme::FedAvg, &server.global, &mut client.params)?;
    }

    let knn = KnnConfig {
        k: cfg.knn_k,
        ..KnnConfig::default()
    };
    let (records, summary) =
        evaluate_all_clients(&spec, &clients, &train, &test, &knn, cfg.rounds)?;
    for record in &records {
        println!(
            "{}",
            serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?
        );
    }
    println!(
        "accuracy {:.4}±{:.4}, weighted F1 {:.4}±{:.4}",
        summary.mean_accuracy, summary.std_accuracy, summary.mean_f1, summary.std_f1
    );
    Ok(())
}

fn cmd_plots(args: &PlotsArgs) -> Result<()> {
    let grid = grid_spec(&args.methods, &args.schemes, &args.clients)?;
    let kind = PlotKind::parse(&args.kind)?;
    summarize_grid(&args.grid_dir, &grid)?;
    let (path, missing) = emit_plots(&args.grid_dir, &grid, kind)?;
    println!("wrote {}", path.display());
    for cell in &missing {
        println!("missing cell: {cell}");
    }
    Ok(())
}

/// Deterministic sign-mixed projection so every output coordinate of the
/// checked op influences the scalar loss.
fn projected(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|i| if i % 2 == 0 { 0.7 } else { -1.3 })
        .collect();
    let r = tape.leaf(Tensor::new(shape, data)?);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn random_tensor(shape: &[usize], tag: u64) -> Result<Tensor> {
    use rand::Rng;
    let mut rng = stream(1213, "cli-gradcheck", &[tag]);
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data)
}

fn cmd_gradcheck() -> Result<()> {
    let cases: Vec<(&str, f64, Box<dyn Fn() -> Result<gradcheck::Report>>)> = vec![
        (
            "matmul",
            1e-6,
            Box::new(|| {
                let a = random_tensor(&[3, 4], 1)?;
                let b = random_tensor(&[4, 2], 2)?;
                gradcheck::check(&[a, b], gradcheck::DEFAULT_STEP, |tape, vars| {
                    let c = tape.matmul(vars[0], vars[1])?;
                    projected(tape, c)
                })
            }),
        ),
        (
            "conv2d",
            1e-5,
            Box::new(|| {
                let x = random_tensor(&[1, 2, 5, 5], 3)?;
                let k = random_tensor(&[3, 2, 3, 3], 4)?;
                gradcheck::check(&[x, k], gradcheck::DEFAULT_STEP, |tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1])?;
                    projected(tape, y)
                })
            }),
        ),
        (
            "batchnorm",
            1e-5,
            Box::new(|| {
                let x = random_tensor(&[4, 3], 5)?;
                let gamma = random_tensor(&[3], 6)?;
                let beta = random_tensor(&[3], 7)?;
                gradcheck::check(&[x, gamma, beta], gradcheck::DEFAULT_STEP, |tape, vars| {
                    let mut rm = vec![0.0; 3];
                    let mut rv = vec![1.0; 3];
                    let y = tape.batchnorm(
                        vars[0],
                        vars[1],
                        vars[2],
                        BnStats::Train {
                            running_mean: &mut rm,
                            running_var: &mut rv,
                            momentum: 0.1,
                        },
                        1e-5,
                    )?;
                    projected(tape, y)
                })
            }),
        ),
    ];

    let mut failed = false;
    for (name, threshold, run) in cases {
        let report = run()?;
        let ok = report.max_rel_err < threshold;
        failed |= !ok;
        println!(
            "{name}: max rel err {:.3e} over {} coordinates (threshold {threshold:.0e}) {}",
            report.max_rel_err,
            report.checked,
            if ok { "ok" } else { "FAILED" }
        );
    }
    if failed {
        return Err(Error::contract("gradcheck", "gradient self-test failed"));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Partition(args) => cmd_partition(args),
        Command::ConvertDataset(args) => cmd_convert(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plots(args) => cmd_plots(args),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "format" => 3,
        "integrity" => 4,
        "io" => 5,
        "partition" => 6,
        "aggregation" => 7,
        "spec" => 8,
        "metric" => 9,
        "shape" => 10,
        "non-finite" => 11,
        "domain" => 12,
        "contract" => 13,
        "degenerate-batch" => 14,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
