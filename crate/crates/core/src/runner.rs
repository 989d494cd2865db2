//! Experiment orchestration: config ingestion, single federated runs, the
//! method x scheme x client-count grid, and plot-data emission.
//!
//! Everything persisted is recomputable: the manifest echoes the resolved
//! config and dataset hashes, the metrics log holds every raw per-client
//! record, and grid summaries are rebuilt from those logs rather than from
//! in-memory state.

use crate::augment::AugmentConfig;
use crate::data::{dirichlet_partition, file_sha256, DatasetContainer, PartitionConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all_clients, summarize_records, EvalSummary, KnnConfig, MetricsRecord};
use crate::fed::{
    broadcast, run_round, ClientState, FedConfig, RoundPlan, RoundSummary, Scheme, ServerState,
    TrainContext,
};
use crate::model::{build_model, ArchitectureSpec};
use crate::params::save_weights;
use crate::rng::stream;
use crate::ssl::{Method, SslConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// One experiment cell, fully resolved except for the batch-size default
/// that depends on the client count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub arch: String,
    pub method: Method,
    pub scheme: Scheme,
    pub n_clients: usize,
    pub rounds: u64,
    pub local_epochs: usize,
    /// Unset means the client-count rule: 64 at 20 clients, 128 otherwise.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub mu: f64,
    pub knn_k: usize,
    pub participation: f64,
    pub seed: u64,
    pub eval_every_round: bool,
    pub parallel: bool,
    pub save_weights: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: String::new(),
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            arch: "desk".into(),
            method: Method::SimClr,
            scheme: Scheme::FedAvg,
            n_clients: 5,
            rounds: 20,
            local_epochs: 20,
            batch_size: None,
            lr: 0.01,
            temperature: 0.5,
            alpha: 0.1,
            mu: 0.001,
            knn_k: 20,
            participation: 1.0,
            seed: 0,
            eval_every_round: false,
            parallel: true,
            save_weights: false,
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

impl ExperimentConfig {
    /// Set one field by its config-file key. Unknown keys are errors so a
    /// typo never silently falls back to a default.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.to_string(),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "arch" => self.arch = value.to_string(),
            "method" => self.method = Method::parse(value)?,
            "scheme" => self.scheme = Scheme::parse(value)?,
            "n_clients" => self.n_clients = parse_as(key, value)?,
            "rounds" => self.rounds = parse_as(key, value)?,
            "local_epochs" => self.local_epochs = parse_as(key, value)?,
            "batch_size" => self.batch_size = Some(parse_as(key, value)?),
            "lr" => self.lr = parse_as(key, value)?,
            "temperature" => self.temperature = parse_as(key, value)?,
            "alpha" => self.alpha = parse_as(key, value)?,
            "mu" => self.mu = parse_as(key, value)?,
            "knn_k" => self.knn_k = parse_as(key, value)?,
            "participation" => self.participation = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "eval_every_round" => self.eval_every_round = parse_as(key, value)?,
            "parallel" => self.parallel = parse_as(key, value)?,
            "save_weights" => self.save_weights = parse_as(key, value)?,
            unknown => {
                return Err(Error::Config(format!("unknown config key {unknown:?}")));
            }
        }
        Ok(())
    }

    pub fn resolved_batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or(if self.n_clients == 20 { 64 } else { 128 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset name is required".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir is required".into()));
        }
        if self.arch != "desk" {
            return Err(Error::Config(format!(
                "unknown architecture {:?}, expected desk",
                self.arch
            )));
        }
        if self.n_clients < 2 {
            return Err(Error::Config("n_clients must be at least 2".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        FedConfig {
            scheme: self.scheme,
            mu: self.mu,
            participation: self.participation,
        }
        .validate()?;
        RoundPlan {
            local_epochs: self.local_epochs,
            batch_size: self.resolved_batch_size(),
        }
        .validate()?;
        let mut ssl = SslConfig::new(self.method);
        ssl.temperature = self.temperature;
        ssl.validate()?;
        Ok(())
    }
}

/// Parse the flat `key = value` config format. Blank lines and `#`
/// comments are skipped. Returns the config and the keys that were set,
/// in first-appearance order.
pub fn parse_config(text: &str) -> Result<(ExperimentConfig, Vec<String>)> {
    let mut cfg = ExperimentConfig::default();
    let mut overrides = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {line:?}", idx + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        cfg.apply(key, value)?;
        if !overrides.iter().any(|k| k == key) {
            overrides.push(key.to_string());
        }
    }
    Ok((cfg, overrides))
}

/// Everything needed to re-run a cell bit-identically, plus what happened.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub overrides: Vec<String>,
    pub batch_size: usize,
    pub code_version: String,
    pub train_hash: String,
    pub test_hash: String,
    pub wall_clock_seconds: f64,
    pub rounds: Vec<RoundSummary>,
    pub completed: bool,
    pub failed_round: Option<u64>,
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(manifest).map_err(|e| json_err(&path, e))?;
    fs::write(&path, body + "\n")?;
    Ok(())
}

fn build_arch(cfg: &ExperimentConfig, input_channels: usize) -> Result<ArchitectureSpec> {
    match cfg.arch.as_str() {
        "desk" => Ok(ArchitectureSpec::desk(input_channels, cfg.method)),
        other => Err(Error::Config(format!("unknown architecture {other:?}"))),
    }
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<(DatasetContainer, String)> {
    let path = cfg
        .data_dir
        .join(format!("{}.{}.fssld", cfg.dataset, split));
    let container = DatasetContainer::load(&path)?;
    if container.split() != split {
        return Err(Error::Integrity(format!(
            "{} holds the {} split",
            path.display(),
            container.split()
        )));
    }
    let hash = file_sha256(&path)?;
    Ok((container, hash))
}

/// One federated run: partition, train `rounds` rounds, evaluate (each
/// round if asked, always after the last), and persist the manifest plus
/// an append-only metrics log. A mid-run failure still writes the
/// manifest, marked with the failing round.
pub fn run_experiment(cfg: &ExperimentConfig, overrides: &[String]) -> Result<RunManifest> {
    cfg.validate()?;
    let started = std::time::Instant::now();

    let (train, train_hash) = load_split(cfg, Split::Train)?;
    let (test, test_hash) = load_split(cfg, Split::Test)?;
    let spec = build_arch(cfg, train.dims().0)?;
    spec.validate_for(cfg.method)?;

    let partition = PartitionConfig {
        n_clients: cfg.n_clients,
        alpha: cfg.alpha,
        seed: cfg.seed,
    };
    let shards = dirichlet_partition(train.labels(), &partition)?;
    let global = build_model(&spec, &mut stream(cfg.seed, "model-init", &[0]))?;
    let mut clients = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientState::new(id, global.clone(), shard, &spec, cfg.method))
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState::new(global);

    let mut ssl = SslConfig::new(cfg.method);
    ssl.temperature = cfg.temperature;
    let augment = AugmentConfig::default();
    let plan = RoundPlan {
        local_epochs: cfg.local_epochs,
        batch_size: cfg.resolved_batch_size(),
    };
    let fed = FedConfig {
        scheme: cfg.scheme,
        mu: cfg.mu,
        participation: cfg.participation,
    };
    let knn = KnnConfig {
        k: cfg.knn_k,
        ..KnnConfig::default()
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)?;

    let mut manifest = RunManifest {
        config: cfg.clone(),
        overrides: overrides.to_vec(),
        batch_size: plan.batch_size,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        train_hash,
        test_hash,
        wall_clock_seconds: 0.0,
        rounds: Vec::new(),
        completed: false,
        failed_round: None,
    };

    let ctx = TrainContext {
        spec: &spec,
        data: &train,
        ssl: &ssl,
        augment: &augment,
        plan: &plan,
        fed: &fed,
        lr: cfg.lr,
        seed: cfg.seed,
        parallel: cfg.parallel,
    };

    let mut outcome: Result<()> = Ok(());
    for r in 0..cfg.rounds {
        let step = (|| -> Result<()> {
            run_round(&mut server, &mut clients, &ctx)?;
            if cfg.eval_every_round || r + 1 == cfg.rounds {
                for client in clients.iter_mut() {
                    broadcast(cfg.scheme, &server.global, &mut client.params)?;
                }
                let (records, _) =
                    evaluate_all_clients(&spec, &clients, &train, &test, &knn, server.round)?;
                for record in &records {
                    let line =
                        serde_json::to_string(record).map_err(|e| json_err(&metrics_path, e))?;
                    metrics_file.write_all(line.as_bytes())?;
                    metrics_file.write_all(b"\n")?;
                }
                metrics_file.flush()?;
            }
            Ok(())
        })();
        if let Err(e) = step {
            manifest.failed_round = Some(r);
            outcome = Err(e);
            break;
        }
    }

    if outcome.is_ok() && cfg.save_weights {
        outcome = save_weights(&server.global, &cfg.out_dir.join("global.fsslw"));
    }

    manifest.rounds = server.history.clone();
    manifest.completed = outcome.is_ok();
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_manifest(&cfg.out_dir, &manifest)?;
    outcome.map(|()| manifest)
}

/// Read a metrics log back into records, one JSON object per line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(|e| json_err(path, e)))
        .collect()
}

/// The records from the latest evaluation in a log.
pub fn final_round_records(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    let last = records.iter().map(|r| r.round).max();
    records
        .iter()
        .filter(|r| Some(r.round) == last)
        .cloned()
        .collect()
}

/// The grid dimensions of one results table: every method crossed with
/// every scheme and client count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub methods: Vec<Method>,
    pub schemes: Vec<Scheme>,
    pub client_counts: Vec<usize>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.schemes.is_empty() || self.client_counts.is_empty() {
            return Err(Error::Config("grid needs at least one entry per axis".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> impl Iterator<Item = (Method, Scheme, usize)> + '_ {
        self.methods.iter().flat_map(move |&m| {
            self.schemes.iter().flat_map(move |&s| {
                self.client_counts.iter().map(move |&k| (m, s, k))
            })
        })
    }
}

pub fn cell_dir_name(method: Method, scheme: Scheme, n_clients: usize) -> String {
    format!("{method}-{scheme}-{n_clients}clients")
}

/// What happened to one grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub method: Method,
    pub scheme: Scheme,
    pub n_clients: usize,
    pub dir: String,
    pub error: Option<String>,
}

/// Final-round summaries arranged like a results table: one row per
/// method, one column per (scheme, client count), missing cells `None`.
#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub rows: Vec<Method>,
    pub columns: Vec<(Scheme, usize)>,
    pub cells: Vec<Vec<Option<EvalSummary>>>,
}

impl GridSummary {
    pub fn cell(&self, method: Method, scheme: Scheme, n_clients: usize) -> Option<&EvalSummary> {
        let row = self.rows.iter().position(|&m| m == method)?;
        let col = self
            .columns
            .iter()
            .position(|&(s, k)| s == scheme && k == n_clients)?;
        self.cells[row][col].as_ref()
    }
}

/// Run every cell of the grid sequentially, each into its own directory
/// under the base out_dir. Cell failures are recorded, not fatal; the
/// summary is rebuilt from the persisted metrics logs afterwards.
pub fn run_grid(
    base: &ExperimentConfig,
    grid: &GridSpec,
    overrides: &[String],
) -> Result<(Vec<CellOutcome>, GridSummary)> {
    grid.validate()?;
    if base.out_dir.as_os_str().is_empty() {
        return Err(Error::Config("out_dir is required".into()));
    }
    let mut outcomes = Vec::new();
    for (method, scheme, n_clients) in grid.cells() {
        let dir = cell_dir_name(method, scheme, n_clients);
        let mut cfg = base.clone();
        cfg.method = method;
        cfg.scheme = scheme;
        cfg.n_clients = n_clients;
        cfg.out_dir = base.out_dir.join(&dir);
        let error = run_experiment(&cfg, overrides).err().map(|e| e.to_string());
        if let Some(msg) = &error {
            log::warn!("grid cell {dir} failed: {msg}");
        }
        outcomes.push(CellOutcome {
            method,
            scheme,
            n_clients,
            dir,
            error,
        });
    }

    let summary = summarize_grid(&base.out_dir, grid)?;
    fs::write(
        base.out_dir.join("summary_accuracy.tsv"),
        render_summary(&summary, |s| (s.mean_accuracy, s.std_accuracy)),
    )?;
    fs::write(
        base.out_dir.join("summary_f1.tsv"),
        render_summary(&summary, |s| (s.mean_f1, s.std_f1)),
    )?;
    Ok((outcomes, summary))
}

/// Rebuild the results table for a grid from the metrics logs on disk.
pub fn summarize_grid(grid_dir: &Path, grid: &GridSpec) -> Result<GridSummary> {
    grid.validate()?;
    let columns: Vec<(Scheme, usize)> = grid
        .schemes
        .iter()
        .flat_map(|&s| grid.client_counts.iter().map(move |&k| (s, k)))
        .collect();
    let mut cells = Vec::new();
    for &method in &grid.methods {
        let mut row = Vec::new();
        for &(scheme, n_clients) in &columns {
            let path = grid_dir
                .join(cell_dir_name(method, scheme, n_clients))
                .join("metrics.jsonl");
            let summary = match read_metrics(&path) {
                Ok(records) => {
                    let latest = final_round_records(&records);
                    summarize_records(&latest).ok()
                }
                Err(_) => None,
            };
            row.push(summary);
        }
        cells.push(row);
    }
    Ok(GridSummary {
        rows: grid.methods.clone(),
        columns,
        cells,
    })
}

/// Results-table text: rows = methods, columns = scheme x client count,
/// cells `mean±std` or `-` where the cell is missing.
fn render_summary(summary: &GridSummary, pick: impl Fn(&EvalSummary) -> (f64, f64)) -> String {
    let mut out = String::from("method");
    for &(scheme, k) in &summary.columns {
        let _ = write!(out, "\t{scheme}-{k}clients");
    }
    out.push('\n');
    for (row, &method) in summary.rows.iter().enumerate() {
        let _ = write!(out, "{method}");
        for cell in &summary.cells[row] {
            match cell {
                Some(s) => {
                    let (mean, std) = pick(s);
                    let _ = write!(out, "\t{mean:.4}±{std:.4}");
                }
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}

pub const NON_CONTRASTIVE: [Method; 4] = [
    Method::SimSiam,
    Method::Barlow,
    Method::VicReg,
    Method::Tico,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    ClientsVsScore,
    NclBestVsSimclr,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clients-vs-score" => Ok(PlotKind::ClientsVsScore),
            "ncl-best-vs-simclr" => Ok(PlotKind::NclBestVsSimclr),
            other => Err(Error::Config(format!(
                "unknown plot kind {other:?}, expected clients-vs-score or ncl-best-vs-simclr"
            ))),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::ClientsVsScore => "plot_clients_vs_score.tsv",
            PlotKind::NclBestVsSimclr => "plot_ncl_best_vs_simclr.tsv",
        }
    }
}

/// Best non-contrastive cell at one (scheme, client count) point: the
/// maximum mean accuracy over the non-contrastive methods present in the
/// summary, ties to the earlier method in the canonical order.
pub fn ncl_best(
    summary: &GridSummary,
    scheme: Scheme,
    n_clients: usize,
) -> Option<(Method, f64)> {
    let mut best: Option<(Method, f64)> = None;
    for method in NON_CONTRASTIVE {
        if let Some(cell) = summary.cell(method, scheme, n_clients) {
            let better = match best {
                None => true,
                Some((_, acc)) => cell.mean_accuracy > acc,
            };
            if better {
                best = Some((method, cell.mean_accuracy));
            }
        }
    }
    best
}

/// Write one plot-data file from the logs under `grid_dir`. Returns the
/// file path and the cells that were requested but missing; present cells
/// are still emitted (partial emit).
pub fn emit_plots(grid_dir: &Path, grid: &GridSpec, kind: PlotKind) -> Result<(PathBuf, Vec<String>)> {
    let summary = summarize_grid(grid_dir, grid)?;
    let mut missing = Vec::new();
    let mut out = String::new();
    match kind {
        PlotKind::ClientsVsScore => {
            out.push_str("method\tscheme\tn_clients\tmean_accuracy\tstd_accuracy\tmean_f1\tstd_f1\n");
            for (method, scheme, n_clients) in grid.cells() {
                match summary.cell(method, scheme, n_clients) {
                    Some(s) => {
                        let _ = writeln!(
                            out,
                            "{method}\t{scheme}\t{n_clients}\t{}\t{}\t{}\t{}",
                            s.mean_accuracy, s.std_accuracy, s.mean_f1, s.std_f1
                        );
                    }
                    None => missing.push(cell_dir_name(method, scheme, n_clients)),
                }
            }
        }
        PlotKind::NclBestVsSimclr => {
            out.push_str("scheme\tn_clients\tsimclr_accuracy\tncl_best_accuracy\tncl_best_method\n");
            for &scheme in &grid.schemes {
                for &n_clients in &grid.client_counts {
                    let contrastive = summary.cell(Method::SimClr, scheme, n_clients);
                    let best = ncl_best(&summary, scheme, n_clients);
                    match (contrastive, best) {
                        (Some(s), Some((method, acc))) => {
                            let _ = writeln!(
                                out,
                                "{scheme}\t{n_clients}\t{}\t{acc}\t{method}",
                                s.mean_accuracy
                            );
                        }
                        _ => missing.push(format!("{scheme}-{n_clients}clients")),
                    }
                }
            }
        }
    }
    let path = grid_dir.join(kind.file_name());
    fs::write(&path, out)?;
    Ok((path, missing))
}
