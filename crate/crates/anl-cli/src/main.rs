//! Command-line front end for the `anl` training laboratory.
//!
//! Subcommands mirror the pipeline stages — `generate`, `fda`, `cluster`,
//! `rss`, `train`, `eval`, `pipeline` — and exchange artifacts through a
//! shared run directory, so any stage can be re-run from what the previous
//! one serialized. A `run_manifest.json` in that directory records which
//! stage produced which artifact, under which config hash and seed.
//!
//! Exit codes: 0 success, 2 usage/config error, 1 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use anl::cluster::{dbscan, select_eps, ClusterAssignment};
use anl::config::{load_config, PipelineConfig};
use anl::error::AnlError;
use anl::eval::{
    cmc_map, export_embeddings, pairwise_f_value, write_csv, write_report, FScore, RetrievalMeta,
};
use anl::fda::{fda_train, save_bank, standard_modules, FdaOptions};
use anl::math::{pairwise_distance, Mat64, Metric};
use anl::nn::{Activation, AdamState, DenseNet};
use anl::rng::{component_rng, stream};
use anl::rss::{export_verdicts, import_verdicts, run_rss_round, RssOptions};
use anl::trainer::{main_epoch, run_pipeline, MainEpochOptions, MainTraceRow};
use anl::world::{export_dataset, generate_world, import_dataset, Dataset};

/// Env var naming the default run directory when `--out` is not given.
const RUN_DIR_ENV: &str = "ANL_RUN_DIR";
const MANIFEST_FILE: &str = "run_manifest.json";

/// Relative artifact paths inside a run directory. Stage commands read and
/// write these fixed names so that consecutive invocations chain.
mod artifact {
    pub const DATASET_DIR: &str = "dataset";
    pub const DATASET_CSV: &str = "dataset/dataset.csv";
    pub const DATASET_MANIFEST: &str = "dataset/manifest.json";
    pub const ENCODER: &str = "encoder.json";
    pub const SOURCE_HEAD: &str = "source_head.json";
    pub const DISCRIMINATOR: &str = "discriminator.json";
    pub const BANK: &str = "bank.json";
    pub const FDA_TRACE: &str = "fda_trace.csv";
    pub const ASSIGNMENT: &str = "assignment.csv";
    pub const CLUSTERING: &str = "clustering.json";
    pub const VERDICTS: &str = "verdicts.csv";
    pub const RSS_TRACE: &str = "rss_trace.csv";
    pub const AUX_ENCODER: &str = "aux_encoder.json";
    pub const AUX_HEAD: &str = "aux_head.json";
    pub const MAIN_ENCODER: &str = "main_encoder.json";
    pub const MAIN_HEAD: &str = "main_head.json";
    pub const MAIN_TRACE: &str = "main_trace.csv";
    pub const EMBEDDINGS: &str = "embeddings.csv";
    pub const META: &str = "meta.csv";
    pub const REPORT: &str = "report.json";
}

/// Desk-scale cross-domain pseudo-label training laboratory.
#[derive(Parser)]
#[command(name = "anl", version, about)]
struct Cli {
    /// Config file: flat key=value lines, or JSON if the extension is .json.
    /// Unknown keys are errors. Omitted fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the config seed (both the run seed and the world seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap within-stage parallelism at this many threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Run directory for artifacts. Defaults to $ANL_RUN_DIR, then to
    /// runs/<config-hash>-<seed>.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the two-domain world and write it as CSV.
    Generate,
    /// Align source and target features; writes the trained encoder, source
    /// head, discriminator, memory bank, and loss trace.
    Fda,
    /// Cluster target embeddings into pseudo-labels with DBSCAN.
    Cluster,
    /// Run one label-correction round over the current cluster assignment.
    Rss(RssArgs),
    /// Train the main model on reliable samples plus outlier instances.
    Train,
    /// Score an embeddings/meta CSV pair: prints CMC@{1,5,10} and mAP.
    Eval(EvalArgs),
    /// Run every stage end to end and write the metrics report.
    Pipeline,
}

#[derive(Args)]
struct RssArgs {
    /// Correction round index (offsets the round's random streams).
    #[arg(long, default_value_t = 0)]
    round: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Embeddings CSV with header `index,e0,...`. Defaults to
    /// <run dir>/embeddings.csv.
    #[arg(value_name = "EMBEDDINGS")]
    embeddings: Option<PathBuf>,

    /// Metadata CSV with header `index,role,identity,camera`; rows pair
    /// with the embeddings file by position. Defaults to <run dir>/meta.csv.
    #[arg(value_name = "META")]
    meta: Option<PathBuf>,

    /// Also score the pseudo-labels in this file (assignment CSV with
    /// header `index,label`) against the meta identities with the pairwise
    /// F-value.
    #[arg(long, value_name = "FILE")]
    f_value: Option<PathBuf>,
}

/// An error plus the exit code it maps to under the stable contract:
/// usage/config problems exit 2, runtime failures exit 1.
struct Failure {
    code: u8,
    err: AnlError,
}

fn classify(err: &AnlError) -> u8 {
    match err {
        AnlError::Config(_) | AnlError::Parse { .. } => 2,
        AnlError::Stage { source, .. } => classify(source),
        _ => 1,
    }
}

impl From<AnlError> for Failure {
    fn from(err: AnlError) -> Self {
        Failure {
            code: classify(&err),
            err,
        }
    }
}

/// Force the usage exit code regardless of variant (e.g. an unreadable
/// config path is a usage problem, not a runtime one).
fn usage(err: AnlError) -> Failure {
    Failure { code: 2, err }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage(AnlError::Config("--threads must be positive".into())));
        }
        if !anl::par::configure_threads(n) {
            log::debug!("thread pool already initialized; --threads ignored");
        }
    }
    // Eval is a pure reader: it scores files without touching config or
    // manifest, so prepared fixtures can be evaluated standalone.
    if let Command::Eval(args) = &cli.command {
        return cmd_eval(cli, args);
    }

    let cfg = effective_config(cli)?;
    let dir = run_dir(cli, &cfg);
    std::fs::create_dir_all(&dir).map_err(|e| AnlError::io(&dir, e))?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, &dir),
        Command::Fda => cmd_fda(&cfg, &dir),
        Command::Cluster => cmd_cluster(&cfg, &dir),
        Command::Rss(args) => cmd_rss(&cfg, &dir, args.round),
        Command::Train => cmd_train(&cfg, &dir),
        Command::Pipeline => cmd_pipeline(&cfg, &dir),
        Command::Eval(_) => unreachable!("handled above"),
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path).map_err(usage)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.world.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn run_dir(cli: &Cli, cfg: &PipelineConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Ok(dir) = std::env::var(RUN_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("runs").join(format!("{}-{}", cfg.hash(), cfg.seed))
}

/// Seconds since the epoch, honoring SOURCE_DATE_EPOCH so that runs meant
/// to be byte-reproducible can pin their timestamps.
fn unix_now() -> u64 {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(t) = v.parse() {
            return t;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    mode: String,
    config_hash: String,
    seed: u64,
    stages: Vec<StageRecord>,
}

/// Load the run manifest, or start a fresh one. A directory created under a
/// different config or seed is refused rather than silently mixed.
fn load_manifest(dir: &Path, cfg: &PipelineConfig) -> Result<RunManifest, Failure> {
    let path = dir.join(MANIFEST_FILE);
    let hash = cfg.hash();
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| AnlError::io(&path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| AnlError::json(&path, e))?;
        if m.config_hash != hash || m.seed != cfg.seed {
            return Err(usage(AnlError::Config(format!(
                "run directory {} holds config {} seed {}, but the current invocation is config {} seed {}; pick a different --out",
                dir.display(),
                m.config_hash,
                m.seed,
                hash,
                cfg.seed
            ))));
        }
        Ok(m)
    } else {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            mode: anl::par::MODE.into(),
            config_hash: hash,
            seed: cfg.seed,
            stages: Vec::new(),
        })
    }
}

/// Collects a stage's artifact paths while it runs.
struct StageIo {
    stage: &'static str,
    started: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl StageIo {
    fn new(stage: &'static str) -> Self {
        StageIo {
            stage,
            started: unix_now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, rel: &str) {
        self.inputs.push(rel.to_string());
    }

    fn output(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }
}

/// Verify every artifact the stage claims, upsert its record (re-running a
/// stage replaces the previous record), and write the manifest back.
fn finalize_stage(dir: &Path, mut manifest: RunManifest, io: StageIo) -> CmdResult {
    let record = StageRecord {
        stage: io.stage.to_string(),
        inputs: io.inputs,
        outputs: io.outputs,
        started_unix: io.started,
        finished_unix: unix_now(),
    };
    for rel in record.inputs.iter().chain(&record.outputs) {
        let p = dir.join(rel);
        if !p.exists() {
            return Err(AnlError::domain(
                "run_manifest",
                format!("artifact {} missing at finalization", p.display()),
            )
            .into());
        }
    }
    manifest.stages.retain(|s| s.stage != record.stage);
    manifest.stages.push(record);
    let path = dir.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| AnlError::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| AnlError::io(&path, e))?;
    Ok(())
}

fn load_dataset(dir: &Path, io: &mut StageIo) -> Result<Dataset, Failure> {
    io.input(artifact::DATASET_CSV);
    io.input(artifact::DATASET_MANIFEST);
    Ok(import_dataset(dir.join(artifact::DATASET_DIR))?)
}

fn load_encoder(dir: &Path, io: &mut StageIo) -> Result<DenseNet, Failure> {
    io.input(artifact::ENCODER);
    Ok(DenseNet::load_json(dir.join(artifact::ENCODER))?)
}

/// Normalized target embeddings under the given encoder.
fn unit_target_embeddings(encoder: &DenseNet, ds: &Dataset) -> Result<Mat64, AnlError> {
    encoder.infer(&ds.target_features())?.normalized_rows()
}

fn fda_options(cfg: &PipelineConfig) -> FdaOptions {
    FdaOptions {
        epochs: cfg.alignment_epochs,
        batch_size: cfg.batch_size,
        temperature: cfg.temperature,
        bank_update_rate: cfg.bank_update_rate,
        intra_neighbors: cfg.intra_neighbors,
        cross_neighbors: cfg.cross_neighbors,
        learning_rate: cfg.learning_rate,
        variant_sigma: cfg.world.variant_sigma,
        freeze_variants: cfg.freeze_variants,
        seed: cfg.seed,
    }
}

fn rss_options(cfg: &PipelineConfig, round: usize) -> RssOptions {
    RssOptions {
        clean_per_cluster: cfg.clean_per_cluster,
        confidence_threshold: cfg.confidence_threshold,
        stage1_epochs: cfg.stage1_epochs,
        stage2_epochs: cfg.stage2_epochs,
        soft_label_scale: cfg.soft_label_scale,
        anchor_weight: cfg.anchor_weight,
        entropy_weight: cfg.entropy_weight,
        label_learning_rate: cfg.label_learning_rate,
        learning_rate: cfg.learning_rate,
        p_identities: cfg.p_identities,
        k_samples: cfg.k_samples,
        triplet_margin: cfg.triplet_margin,
        kl_reversed: cfg.kl_reversed,
        round,
        seed: cfg.seed,
    }
}

fn main_epoch_options(cfg: &PipelineConfig) -> MainEpochOptions {
    MainEpochOptions {
        p_identities: cfg.p_identities,
        k_samples: cfg.k_samples,
        outliers_per_batch: cfg.outliers_per_batch,
        instance_terms: cfg.instance_terms,
        triplet_margin: cfg.triplet_margin,
        variant_sigma: cfg.world.variant_sigma,
        seed: cfg.seed,
    }
}

fn cmd_generate(cfg: &PipelineConfig, dir: &Path) -> CmdResult {
    let manifest = load_manifest(dir, cfg)?;
    let mut io = StageIo::new("generate");
    let ds = generate_world(&cfg.world).map_err(|e| e.in_stage("world"))?;
    export_dataset(&ds, dir.join(artifact::DATASET_DIR), Some(cfg.world.seed))?;
    io.output(artifact::DATASET_CSV);
    io.output(artifact::DATASET_MANIFEST);
    println!(
        "generate: {} source + {} target samples ({} query / {} gallery) -> {}",
        ds.source.len(),
        ds.target.len(),
        ds.query.len(),
        ds.gallery.len(),
        dir.join(artifact::DATASET_DIR).display()
    );
    finalize_stage(dir, manifest, io)
}

fn cmd_fda(cfg: &PipelineConfig, dir: &Path) -> CmdResult {
    let manifest = load_manifest(dir, cfg)?;
    let mut io = StageIo::new("fda");
    let ds = load_dataset(dir, &mut io)?;
    let tag = |e: AnlError| e.in_stage("alignment");

    let source_x = ds.source_features();
    let (source_labels, n_source_classes) = ds.source_labels().map_err(tag)?;
    let target_x = ds.target_features();
    let target_cams = ds.target_cameras();

    let mut modules = standard_modules(ds.raw_dim, n_source_classes, cfg.seed).map_err(tag)?;
    let out = fda_train(
        &mut modules,
        &source_x,
        &source_labels,
        &target_x,
        &target_cams,
        &fda_options(cfg),
    )
    .map_err(tag)?;

    modules.encoder.save_json(dir.join(artifact::ENCODER))?;
    io.output(artifact::ENCODER);
    modules
        .source_head
        .save_json(dir.join(artifact::SOURCE_HEAD))?;
    io.output(artifact::SOURCE_HEAD);
    modules
        .discriminator
        .save_json(dir.join(artifact::DISCRIMINATOR))?;
    io.output(artifact::DISCRIMINATOR);
    save_bank(&out.bank, dir.join(artifact::BANK))?;
    io.output(artifact::BANK);
    write_csv(&dir.join(artifact::FDA_TRACE), &out.trace)?;
    io.output(artifact::FDA_TRACE);

    if let Some(last) = out.trace.last() {
        println!(
            "fda: {} epochs, final losses ce {:.4} contrastive {:.4} gen {:.4} disc {:.4}",
            out.trace.len(),
            last.l_ce,
            last.l_cl,
            last.l_g,
            last.l_d
        );
    }
    finalize_stage(dir, manifest, io)
}

fn cmd_cluster(cfg: &PipelineConfig, dir: &Path) -> CmdResult {
    let manifest = load_manifest(dir, cfg)?;
    let mut io = StageIo::new("cluster");
    let ds = load_dataset(dir, &mut io)?;
    let encoder = load_encoder(dir, &mut io)?;
    let tag = |e: AnlError| e.in_stage("clustering");

    let unit = unit_target_embeddings(&encoder, &ds).map_err(tag)?;
    let dist = pairwise_distance(&unit, Metric::CosineDist).map_err(tag)?;
    let eps = select_eps(&dist, cfg.cluster_quantile).map_err(tag)?;
    let assignment = dbscan(&dist, eps, cfg.min_pts).map_err(tag)?;

    assignment.export_csv(dir.join(artifact::ASSIGNMENT))?;
    io.output(artifact::ASSIGNMENT);

    // Score against hidden identities when the dataset carries them.
    let truth_f: Option<FScore> = match ds.target_identities() {
        Ok(ids) => Some(pairwise_f_value(assignment.labels(), &ids)?),
        Err(_) => None,
    };
    #[derive(Serialize)]
    struct ClusterSummary {
        eps: f64,
        quantile: f64,
        min_pts: usize,
        n_samples: usize,
        n_clusters: usize,
        n_outliers: usize,
        truth_f: Option<FScore>,
    }
    let summary = ClusterSummary {
        eps,
        quantile: cfg.cluster_quantile,
        min_pts: cfg.min_pts,
        n_samples: assignment.len(),
        n_clusters: assignment.n_clusters(),
        n_outliers: assignment.outliers().len(),
        truth_f,
    };
    let spath = dir.join(artifact::CLUSTERING);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| AnlError::json(&spath, e))?;
    std::fs::write(&spath, text + "\n").map_err(|e| AnlError::io(&spath, e))?;
    io.output(artifact::CLUSTERING);

    match summary.truth_f {
        Some(f) => println!(
            "cluster: eps {:.5} -> {} clusters, {} outliers, F {:.4}",
            eps, summary.n_clusters, summary.n_outliers, f.f_value
        ),
        None => println!(
            "cluster: eps {:.5} -> {} clusters, {} outliers",
            eps, summary.n_clusters, summary.n_outliers
        ),
    }
    finalize_stage(dir, manifest, io)
}

fn cmd_rss(cfg: &PipelineConfig, dir: &Path, round: usize) -> CmdResult {
    let manifest = load_manifest(dir, cfg)?;
    let mut io = StageIo::new("rss");
    let ds = load_dataset(dir, &mut io)?;
    let encoder = load_encoder(dir, &mut io)?;
    io.input(artifact::ASSIGNMENT);
    let assignment = ClusterAssignment::import_csv(dir.join(artifact::ASSIGNMENT))?;
    let tag = |e: AnlError| e.in_stage("correction");

    let target_x = ds.target_features();
    let unit = unit_target_embeddings(&encoder, &ds).map_err(tag)?;
    let out = run_rss_round(&encoder, &target_x, &unit, &assignment, &rss_options(cfg, round))
        .map_err(tag)?;

    export_verdicts(dir.join(artifact::VERDICTS), &out.verdicts)?;
    io.output(artifact::VERDICTS);
    out.aux.encoder.save_json(dir.join(artifact::AUX_ENCODER))?;
    io.output(artifact::AUX_ENCODER);
    out.aux.head.save_json(dir.join(artifact::AUX_HEAD))?;
    io.output(artifact::AUX_HEAD);
    write_csv(&dir.join(artifact::RSS_TRACE), &out.trace)?;
    io.output(artifact::RSS_TRACE);

    let kept = out.verdicts.iter().filter(|v| v.kept).count();
    println!(
        "rss: round {} kept {} of {} clustered samples ({} final labeled in warm-up)",
        round,
        kept,
        out.verdicts.len(),
        out.final_labeled
    );
    finalize_stage(dir, manifest, io)
}

fn cmd_train(cfg: &PipelineConfig, dir: &Path) -> CmdResult {
    let manifest = load_manifest(dir, cfg)?;
    let mut io = StageIo::new("train");
    let ds = load_dataset(dir, &mut io)?;
    let mut encoder = load_encoder(dir, &mut io)?;
    io.input(artifact::ASSIGNMENT);
    let assignment = ClusterAssignment::import_csv(dir.join(artifact::ASSIGNMENT))?;
    let tag = |e: AnlError| e.in_stage("training");

    // Reliable set: the filter's survivors when a correction round ran,
    // otherwise every clustered sample at its cluster label.
    let verdict_path = dir.join(artifact::VERDICTS);
    let mut outliers = assignment.outliers();
    let reliable: Vec<(usize, usize)> = if verdict_path.exists() {
        io.input(artifact::VERDICTS);
        let verdicts = import_verdicts(&verdict_path)?;
        let rejected: Vec<usize> = verdicts
            .iter()
            .filter(|v| !v.kept)
            .map(|v| v.sample_index)
            .collect();
        outliers.extend(&rejected);
        outliers.sort_unstable();
        verdicts
            .iter()
            .filter(|v| v.kept)
            .map(|v| (v.sample_index, v.cluster_label))
            .collect()
    } else {
        assignment
            .labels()
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|c| (i, c)))
            .collect()
    };
    if reliable.is_empty() {
        return Err(AnlError::domain(
            "cmd_train",
            "no reliable samples to train on; run cluster (and rss) first",
        )
        .in_stage("training")
        .into());
    }

    let target_x = ds.target_features();
    let mut head = DenseNet::new(
        encoder.output_dim(),
        &[(assignment.n_clusters(), Activation::Identity)],
        &mut component_rng(cfg.seed, stream::INIT_MAIN_HEAD),
    )
    .map_err(tag)?;
    let mut enc_state = AdamState::new(encoder.param_count(), cfg.learning_rate);
    let mut head_state = AdamState::new(head.param_count(), cfg.learning_rate);
    let opts = main_epoch_options(cfg);

    let mut trace: Vec<MainTraceRow> = Vec::with_capacity(cfg.main_epochs);
    for epoch in 0..cfg.main_epochs {
        trace.push(
            main_epoch(
                &mut encoder,
                &mut head,
                &mut enc_state,
                &mut head_state,
                &target_x,
                &reliable,
                &outliers,
                &opts,
                epoch,
            )
            .map_err(tag)?,
        );
    }

    encoder.save_json(dir.join(artifact::MAIN_ENCODER))?;
    io.output(artifact::MAIN_ENCODER);
    head.save_json(dir.join(artifact::MAIN_HEAD))?;
    io.output(artifact::MAIN_HEAD);
    write_csv(&dir.join(artifact::MAIN_TRACE), &trace)?;
    io.output(artifact::MAIN_TRACE);

    let unit = unit_target_embeddings(&encoder, &ds).map_err(tag)?;
    export_final_embeddings(dir, &unit, &ds, &mut io)?;

    let (cmc, map) = split_retrieval(&unit, &ds).map_err(|e| e.in_stage("evaluation"))?;
    println!(
        "train: {} epochs over {} reliable + {} outliers -> mAP {:.4}, rank-1 {:.4}",
        cfg.main_epochs,
        reliable.len(),
        outliers.len(),
        map,
        cmc.first().copied().unwrap_or(0.0)
    );
    finalize_stage(dir, manifest, io)
}

fn cmd_pipeline(cfg: &PipelineConfig, dir: &Path) -> CmdResult {
    let manifest = load_manifest(dir, cfg)?;
    let mut io = StageIo::new("pipeline");
    let outcome = run_pipeline(cfg)?;

    write_report(&outcome.report, dir)?;
    for rel in ["report.json", "fda_trace.csv", "rss_trace.csv", "main_trace.csv", "f_trace.csv"] {
        io.output(rel);
    }
    export_dataset(
        &outcome.dataset,
        dir.join(artifact::DATASET_DIR),
        Some(cfg.world.seed),
    )?;
    io.output(artifact::DATASET_CSV);
    io.output(artifact::DATASET_MANIFEST);
    outcome.encoder.save_json(dir.join(artifact::ENCODER))?;
    io.output(artifact::ENCODER);
    if let Some(head) = &outcome.head {
        head.save_json(dir.join(artifact::MAIN_HEAD))?;
        io.output(artifact::MAIN_HEAD);
    }
    save_bank(&outcome.bank, dir.join(artifact::BANK))?;
    io.output(artifact::BANK);
    if let Some(assignment) = &outcome.assignment {
        assignment.export_csv(dir.join(artifact::ASSIGNMENT))?;
        io.output(artifact::ASSIGNMENT);
    }

    let unit =
        unit_target_embeddings(&outcome.encoder, &outcome.dataset).map_err(|e| e.in_stage("evaluation"))?;
    export_final_embeddings(dir, &unit, &outcome.dataset, &mut io)?;

    for s in &outcome.report.stages {
        println!(
            "{:<10} mAP {:.4}  rank-1 {:.4}",
            s.stage,
            s.map,
            s.cmc.first().copied().unwrap_or(0.0)
        );
    }
    println!("report -> {}", dir.join(artifact::REPORT).display());
    finalize_stage(dir, manifest, io)
}

/// Write the final target embeddings in the eval command's input format:
/// query rows first, then gallery rows, roles and hidden identities in the
/// metadata file.
fn export_final_embeddings(
    dir: &Path,
    unit: &Mat64,
    ds: &Dataset,
    io: &mut StageIo,
) -> Result<(), Failure> {
    let ids = ds.target_identities()?;
    let cams = ds.target_cameras();
    let mut order: Vec<(usize, &str)> = Vec::with_capacity(ds.query.len() + ds.gallery.len());
    order.extend(ds.query.iter().map(|&i| (i, "query")));
    order.extend(ds.gallery.iter().map(|&i| (i, "gallery")));
    let rows: Vec<usize> = order.iter().map(|&(i, _)| i).collect();
    let meta: Vec<RetrievalMeta> = rows
        .iter()
        .map(|&i| RetrievalMeta {
            identity: ids[i],
            camera: cams[i],
        })
        .collect();
    let selected = unit.select_rows(&rows)?;
    export_embeddings(dir, &selected, &order, &meta)?;
    io.output(artifact::EMBEDDINGS);
    io.output(artifact::META);
    Ok(())
}

/// CMC/mAP of the dataset's query/gallery split under the given embeddings.
fn split_retrieval(unit: &Mat64, ds: &Dataset) -> Result<(Vec<f64>, f64), AnlError> {
    let ids = ds.target_identities()?;
    let cams = ds.target_cameras();
    let meta_of = |idx: &[usize]| -> Vec<RetrievalMeta> {
        idx.iter()
            .map(|&i| RetrievalMeta {
                identity: ids[i],
                camera: cams[i],
            })
            .collect()
    };
    let q = unit.select_rows(&ds.query)?;
    let g = unit.select_rows(&ds.gallery)?;
    cmc_map(&q, &meta_of(&ds.query), &g, &meta_of(&ds.gallery))
}

// ---------------------------------------------------------------------------
// eval: score prepared embeddings/meta files

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> AnlError {
    AnlError::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

struct MetaRow {
    index: usize,
    is_query: bool,
    identity: usize,
    camera: usize,
}

fn read_embeddings(path: &Path) -> Result<Mat64, AnlError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("index") {
        return Err(parse_err(path, 1, "expected header `index,e0,...`"));
    }
    let width = headers.len() - 1;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != width + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", width + 1, rec.len()),
            ));
        }
        rec[0]
            .parse::<usize>()
            .map_err(|e| parse_err(path, line, format!("index: {}", e)))?;
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|e| {
                parse_err(path, line, format!("{}: {}", headers.get(c + 1).unwrap_or("?"), e))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    line,
                    format!("{}: non-finite value", headers.get(c + 1).unwrap_or("?")),
                ));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Mat64::new(rows, width, data)
}

fn read_meta(path: &Path) -> Result<Vec<MetaRow>, AnlError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let expected = ["index", "role", "identity", "camera"];
    if headers.iter().ne(expected) {
        return Err(parse_err(
            path,
            1,
            "expected header `index,role,identity,camera`",
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != expected.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let index = rec[0]
            .parse::<usize>()
            .map_err(|e| parse_err(path, line, format!("index: {}", e)))?;
        let is_query = match &rec[1] {
            "query" => true,
            "gallery" => false,
            other => {
                return Err(parse_err(
                    path,
                    line,
                    format!("role must be `query` or `gallery`, found `{}`", other),
                ))
            }
        };
        let identity = rec[2]
            .parse::<usize>()
            .map_err(|e| parse_err(path, line, format!("identity: {}", e)))?;
        let camera = rec[3]
            .parse::<usize>()
            .map_err(|e| parse_err(path, line, format!("camera: {}", e)))?;
        out.push(MetaRow {
            index,
            is_query,
            identity,
            camera,
        });
    }
    Ok(out)
}

/// Pseudo-labels in the assignment CSV format: `index,label` with `outlier`
/// (or an empty field) marking unclustered samples.
fn read_labels(path: &Path) -> Result<Vec<(usize, Option<usize>)>, AnlError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.iter().ne(["index", "label"]) {
        return Err(parse_err(path, 1, "expected header `index,label`"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        let index = rec[0]
            .parse::<usize>()
            .map_err(|e| parse_err(path, line, format!("index: {}", e)))?;
        let label = match &rec[1] {
            "" | "outlier" => None,
            text => Some(
                text.parse::<usize>()
                    .map_err(|e| parse_err(path, line, format!("label: {}", e)))?,
            ),
        };
        out.push((index, label));
    }
    Ok(out)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> CmdResult {
    let base: Option<PathBuf> = cli.out.clone().or_else(|| {
        std::env::var(RUN_DIR_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    });
    let resolve = |given: &Option<PathBuf>, name: &str| -> Result<PathBuf, Failure> {
        match (given, &base) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(b)) => Ok(b.join(name)),
            (None, None) => Err(usage(AnlError::Config(format!(
                "no {} given and no run directory set (--out or ${})",
                name, RUN_DIR_ENV
            )))),
        }
    };
    let epath = resolve(&args.embeddings, artifact::EMBEDDINGS)?;
    let mpath = resolve(&args.meta, artifact::META)?;

    let emb = read_embeddings(&epath)?;
    let meta = read_meta(&mpath)?;
    if emb.rows() != meta.len() {
        return Err(usage(AnlError::Config(format!(
            "{} has {} rows but {} has {}; the files pair by position",
            epath.display(),
            emb.rows(),
            mpath.display(),
            meta.len()
        ))));
    }

    let mut q_rows = Vec::new();
    let mut g_rows = Vec::new();
    let mut q_meta = Vec::new();
    let mut g_meta = Vec::new();
    for (r, m) in meta.iter().enumerate() {
        let rm = RetrievalMeta {
            identity: m.identity,
            camera: m.camera,
        };
        if m.is_query {
            q_rows.push(r);
            q_meta.push(rm);
        } else {
            g_rows.push(r);
            g_meta.push(rm);
        }
    }
    if g_rows.is_empty() {
        return Err(usage(AnlError::Config("gallery is empty".into())));
    }
    if q_rows.is_empty() {
        return Err(usage(AnlError::Config("query set is empty".into())));
    }

    let q = emb.select_rows(&q_rows)?;
    let g = emb.select_rows(&g_rows)?;
    let (cmc, map) = cmc_map(&q, &q_meta, &g, &g_meta).map_err(|e| e.in_stage("evaluation"))?;
    let at = |k: usize| cmc[k.min(cmc.len()) - 1];
    println!("cmc@1 {:.6}", at(1));
    println!("cmc@5 {:.6}", at(5));
    println!("cmc@10 {:.6}", at(10));
    println!("map {:.6}", map);

    if let Some(lpath) = &args.f_value {
        let labels = read_labels(lpath)?;
        let by_index: std::collections::HashMap<usize, Option<usize>> =
            labels.into_iter().collect();
        let mut pred = Vec::with_capacity(meta.len());
        let truth: Vec<usize> = meta.iter().map(|m| m.identity).collect();
        for m in &meta {
            match by_index.get(&m.index) {
                Some(l) => pred.push(*l),
                None => {
                    return Err(usage(AnlError::Config(format!(
                        "label file {} has no row for sample index {}",
                        lpath.display(),
                        m.index
                    ))))
                }
            }
        }
        let f = pairwise_f_value(&pred, &truth).map_err(|e| e.in_stage("evaluation"))?;
        println!("f_precision {:.6}", f.precision);
        println!("f_recall {:.6}", f.recall);
        println!("f_value {:.6}", f.f_value);
    }
    Ok(())
}
