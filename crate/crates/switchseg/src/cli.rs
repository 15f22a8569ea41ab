//! Operator-facing command surface: corpus generation, training,
//! evaluation, segmentation, K sweeps, transfer runs, switch-usage stats,
//! and corpus statistics. Every run that produces artifacts also writes a
//! JSON manifest (resolved config, seed, dataset content hashes, artifact
//! paths, timing) sufficient to reproduce it.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, LoadedCheckpoint};
use crate::corpus::{
    read_segmented, stats, stats_tsv_row, word_types, CharMap, SegmentedSentence,
    STATS_TSV_HEADER,
};
use crate::embeddings::load_pretrained_vectors;
use crate::metrics::{eval_tsv_row, write_report_block, EvalReport, EVAL_TSV_HEADER};
use crate::numerics::derive_seed;
use crate::switch_lstm::{write_trace_tsv, SwitchMode};
use crate::synthgen::{
    corpora_for_criterion, derived_criterion, gen_corpora, make_spec, oracle_upper_bound,
    GenConfig, SpecOptions, SynthManifest,
};
use crate::trainer::{
    self, collect_traces, evaluate_model, history_tsv_rows, run_prepared, sweep_k, transfer_fit,
    Instance, TaskSpec, TrainConfig, Trainer, Vocabs, HISTORY_TSV_HEADER,
};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "switchseg",
    version,
    about = "Multi-criteria sequence segmentation with switched recurrent cells over a CRF"
)]
pub struct Cli {
    /// Worker threads (overrides the SWITCHSEG_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic multi-criteria corpora with planted conflicts.
    Gen(GenArgs),
    /// Train a model on one or more segmented corpora.
    Train(TrainArgs),
    /// Score a checkpoint on test corpora.
    Eval(EvalArgs),
    /// Segment raw text with a checkpoint.
    Segment(SegmentArgs),
    /// Train once per K and tabulate parameter counts and dev F.
    SweepK(SweepKArgs),
    /// Fit only a new task embedding on a frozen base model.
    Transfer(TransferArgs),
    /// Aggregate switch-usage distributions of a checkpoint on a corpus.
    SwitchStats(SwitchStatsArgs),
    /// Corpus statistics (tokens, chars, dictionary sizes, OOV rate).
    Stats(StatsArgs),
}

/// `NAME=TRAIN[,DEV]` dataset argument.
#[derive(Clone, Debug)]
struct DataArg {
    name: String,
    train: PathBuf,
    dev: Option<PathBuf>,
}

fn parse_data_arg(s: &str) -> std::result::Result<DataArg, String> {
    let (name, paths) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=PATH[,DEV_PATH], got '{s}'"))?;
    if name.is_empty() {
        return Err("dataset name must not be empty".into());
    }
    let mut parts = paths.splitn(2, ',');
    let train = PathBuf::from(parts.next().unwrap());
    let dev = parts.next().map(PathBuf::from);
    Ok(DataArg { name: name.to_string(), train, dev })
}

/// Flags that mirror the training configuration; file values first, then
/// these overrides.
#[derive(Args, Debug, Default, Clone)]
struct ConfigOpts {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of candidate cells per direction.
    #[arg(long)]
    k: Option<usize>,
    /// single (no task embedding) or multi.
    #[arg(long)]
    mode: Option<String>,
    /// normal, random-train, random-test, or ablate=x,s,em.
    #[arg(long)]
    switch_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tasks_per_step: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    d_embed: Option<usize>,
    /// 0 disables the bigram channel.
    #[arg(long)]
    d_bigram: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    d_task: Option<usize>,
    /// Stop once every task's dev F reaches this value.
    #[arg(long)]
    stop_at_min_dev_f: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Datasets as NAME=TRAIN[,DEV]; without DEV a 10% split is held out.
    #[arg(long = "data", value_parser = parse_data_arg, required = true)]
    data: Vec<DataArg>,
    #[arg(long)]
    out: PathBuf,
    /// Two-column character mapping applied at ingestion.
    #[arg(long)]
    char_map: Option<PathBuf>,
    /// Pretrained character vectors (token + values per line).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test sets as NAME=PATH.
    #[arg(long = "data", value_parser = parse_data_arg, required = true)]
    data: Vec<DataArg>,
    /// Training corpora as NAME=PATH, used for OOV recall.
    #[arg(long = "train", value_parser = parse_data_arg)]
    train: Vec<DataArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    char_map: Option<PathBuf>,
    /// tsv (default) or block.
    #[arg(long, default_value = "tsv")]
    format: String,
    #[arg(long, default_value = "normal")]
    switch_mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task name for multi-criteria checkpoints.
    #[arg(long)]
    task: Option<String>,
    /// Input file; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    char_map: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepKArgs {
    #[arg(long = "data", value_parser = parse_data_arg, required = true)]
    data: Vec<DataArg>,
    /// Comma-separated K values, e.g. 1,2,4.
    #[arg(long = "k-values", value_delimiter = ',', default_values_t = [1usize, 2, 4])]
    k_values: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    char_map: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The new criterion as NAME=TRAIN[,DEV].
    #[arg(long = "data", value_parser = parse_data_arg)]
    data: DataArg,
    /// Held-out test corpus for the new criterion.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Training-set sizes to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 300, 500, 700, 1000])]
    counts: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    char_map: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args, Debug)]
struct SwitchStatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "data", value_parser = parse_data_arg, required = true)]
    data: Vec<DataArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump per-position traces (task, direction, position, k, weight).
    #[arg(long)]
    dump_traces: Option<PathBuf>,
    #[arg(long)]
    char_map: Option<PathBuf>,
    #[arg(long, default_value = "normal")]
    switch_mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long = "data", value_parser = parse_data_arg, required = true)]
    data: Vec<DataArg>,
    /// Training corpora as NAME=PATH for the OOV column.
    #[arg(long = "train", value_parser = parse_data_arg)]
    train: Vec<DataArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    char_map: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    criteria: usize,
    #[arg(long, default_value_t = 40)]
    lexicon: usize,
    #[arg(long, default_value_t = 0.5)]
    conflict: f64,
    #[arg(long, default_value_t = 50)]
    alphabet: usize,
    #[arg(long, default_value_t = 2)]
    min_unit_len: usize,
    #[arg(long, default_value_t = 4)]
    max_unit_len: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 3)]
    min_units: usize,
    #[arg(long, default_value_t = 10)]
    max_units: usize,
    /// Extra criteria composed from the base criteria's rules.
    #[arg(long, default_value_t = 0)]
    held_out: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

// ---------------------------------------------------------------------------
// Config file handling
// ---------------------------------------------------------------------------

/// Parse a flat `key = value` file ('#' starts a comment).
fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            source_name: path.display().to_string(),
            line: idx + 1,
            message: "expected 'key = value'".into(),
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn set_config_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
    }
    match key {
        "k" => cfg.k = parse(key, value)?,
        "d_embed" => cfg.d_embed = parse(key, value)?,
        "d_bigram" => cfg.d_bigram = parse(key, value)?,
        "d_hidden" => cfg.d_hidden = parse(key, value)?,
        "d_task" => cfg.d_task = parse(key, value)?,
        "mode" => {
            cfg.multi = match value {
                "multi" => true,
                "single" => false,
                _ => return Err(Error::Config(format!("mode must be single or multi, got '{value}'"))),
            }
        }
        "crf_boundary" => cfg.crf_boundary = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "tasks_per_step" => cfg.tasks_per_step = parse(key, value)?,
        "dropout" => cfg.dropout = parse(key, value)?,
        "patience" => cfg.patience = parse(key, value)?,
        "max_epochs" => cfg.max_epochs = parse(key, value)?,
        "stop_at_min_dev_f" => cfg.stop_at_min_dev_f = Some(parse(key, value)?),
        "lr" => cfg.lr = parse(key, value)?,
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "eps" => cfg.eps = parse(key, value)?,
        "clip_norm" => cfg.clip_norm = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "switch_mode" => cfg.switch_mode = SwitchMode::parse(value)?,
        "min_count" => cfg.min_count = parse(key, value)?,
        "sentence_cap" => cfg.sentence_cap = parse(key, value)?,
        "dev_fraction" => cfg.dev_fraction = parse(key, value)?,
        "task_capacity_extra" => cfg.task_capacity_extra = parse(key, value)?,
        "grad_chunk" => cfg.grad_chunk = parse(key, value)?,
        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

fn config_to_map(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("k".into(), cfg.k.to_string());
    m.insert("d_embed".into(), cfg.d_embed.to_string());
    m.insert("d_bigram".into(), cfg.d_bigram.to_string());
    m.insert("d_hidden".into(), cfg.d_hidden.to_string());
    m.insert("d_task".into(), cfg.d_task.to_string());
    m.insert("mode".into(), if cfg.multi { "multi" } else { "single" }.into());
    m.insert("crf_boundary".into(), cfg.crf_boundary.to_string());
    m.insert("batch_size".into(), cfg.batch_size.to_string());
    m.insert("tasks_per_step".into(), cfg.tasks_per_step.to_string());
    m.insert("dropout".into(), cfg.dropout.to_string());
    m.insert("patience".into(), cfg.patience.to_string());
    m.insert("max_epochs".into(), cfg.max_epochs.to_string());
    if let Some(v) = cfg.stop_at_min_dev_f {
        m.insert("stop_at_min_dev_f".into(), v.to_string());
    }
    m.insert("lr".into(), cfg.lr.to_string());
    m.insert("beta1".into(), cfg.beta1.to_string());
    m.insert("beta2".into(), cfg.beta2.to_string());
    m.insert("eps".into(), cfg.eps.to_string());
    m.insert("clip_norm".into(), cfg.clip_norm.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("switch_mode".into(), cfg.switch_mode.to_string());
    m.insert("min_count".into(), cfg.min_count.to_string());
    m.insert("sentence_cap".into(), cfg.sentence_cap.to_string());
    m.insert("dev_fraction".into(), cfg.dev_fraction.to_string());
    m.insert("task_capacity_extra".into(), cfg.task_capacity_extra.to_string());
    m.insert("grad_chunk".into(), cfg.grad_chunk.to_string());
    m
}

/// Defaults, then the config file, then command-line flags.
fn resolve_config(opts: &ConfigOpts) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &opts.config {
        for (key, value) in read_config_file(path)? {
            set_config_key(&mut cfg, &key, &value)?;
        }
    }
    let mut flag = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            set_config_key(&mut cfg, key, &v)?;
        }
        Ok(())
    };
    flag("k", opts.k.map(|v| v.to_string()))?;
    flag("mode", opts.mode.clone())?;
    flag("switch_mode", opts.switch_mode.clone())?;
    flag("seed", opts.seed.map(|v| v.to_string()))?;
    flag("max_epochs", opts.epochs.map(|v| v.to_string()))?;
    flag("batch_size", opts.batch_size.map(|v| v.to_string()))?;
    flag("tasks_per_step", opts.tasks_per_step.map(|v| v.to_string()))?;
    flag("lr", opts.lr.map(|v| v.to_string()))?;
    flag("dropout", opts.dropout.map(|v| v.to_string()))?;
    flag("patience", opts.patience.map(|v| v.to_string()))?;
    flag("d_embed", opts.d_embed.map(|v| v.to_string()))?;
    flag("d_bigram", opts.d_bigram.map(|v| v.to_string()))?;
    flag("d_hidden", opts.d_hidden.map(|v| v.to_string()))?;
    flag("d_task", opts.d_task.map(|v| v.to_string()))?;
    flag("stop_at_min_dev_f", opts.stop_at_min_dev_f.map(|v| v.to_string()))?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Serialize, Debug)]
struct DatasetFingerprint {
    name: String,
    path: String,
    sha256: String,
}

#[derive(Serialize, Debug)]
struct RunManifest {
    command: Vec<String>,
    seed: u64,
    config: BTreeMap<String, String>,
    datasets: Vec<DatasetFingerprint>,
    artifacts: Vec<String>,
    elapsed_seconds: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn fingerprint(name: &str, path: &Path) -> Result<DatasetFingerprint> {
    Ok(DatasetFingerprint {
        name: name.to_string(),
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_char_map(path: Option<&PathBuf>) -> Result<Option<CharMap>> {
    match path {
        Some(p) => {
            let reader = BufReader::new(File::open(p)?);
            Ok(Some(CharMap::from_reader(reader, &p.display().to_string())?))
        }
        None => Ok(None),
    }
}

fn read_corpus(path: &Path, map: Option<&CharMap>) -> Result<Vec<SegmentedSentence>> {
    let file = File::open(path).map_err(|e| {
        Error::InvalidInput(format!("cannot open dataset {}: {e}", path.display()))
    })?;
    read_segmented(BufReader::new(file), &path.display().to_string(), map)
}

fn out_writer(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => Ok(Box::new(BufWriter::new(File::create(p)?))),
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

/// Resolve a task name against a checkpoint's task registry.
fn task_id_by_name(ckpt: &LoadedCheckpoint, name: &str) -> Result<Option<u32>> {
    if !ckpt.model.cfg.multi {
        return Ok(None);
    }
    match ckpt.task_names.iter().position(|n| n == name) {
        Some(idx) => Ok(Some(idx as u32)),
        None => Err(Error::InvalidInput(format!(
            "task '{name}' is not registered in this checkpoint (tasks: {})",
            ckpt.task_names.join(", ")
        ))),
    }
}

fn encode_corpus(vocabs: &Vocabs, corpus: &[SegmentedSentence]) -> Vec<Instance> {
    corpus.iter().map(|s| vocabs.encode(s)).collect()
}

fn avg_report(reports: &[(String, EvalReport)]) -> EvalReport {
    let n = reports.len().max(1) as f64;
    let oovs: Vec<f64> = reports.iter().filter_map(|(_, r)| r.oov_recall).collect();
    EvalReport {
        precision: reports.iter().map(|(_, r)| r.precision).sum::<f64>() / n,
        recall: reports.iter().map(|(_, r)| r.recall).sum::<f64>() / n,
        f1: reports.iter().map(|(_, r)| r.f1).sum::<f64>() / n,
        oov_recall: if oovs.is_empty() {
            None
        } else {
            Some(oovs.iter().sum::<f64>() / oovs.len() as f64)
        },
        gold_words: reports.iter().map(|(_, r)| r.gold_words).sum(),
        pred_words: reports.iter().map(|(_, r)| r.pred_words).sum(),
        correct_words: reports.iter().map(|(_, r)| r.correct_words).sum(),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let config = resolve_config(&args.config)?;
    let map = load_char_map(args.char_map.as_ref())?;

    let mut specs = Vec::new();
    let mut datasets = Vec::new();
    for data in &args.data {
        let train = read_corpus(&data.train, map.as_ref())?;
        datasets.push(fingerprint(&data.name, &data.train)?);
        let dev = match &data.dev {
            Some(p) => {
                datasets.push(fingerprint(&data.name, p)?);
                Some(read_corpus(p, map.as_ref())?)
            }
            None => None,
        };
        specs.push(TaskSpec { name: data.name.clone(), train, dev });
    }

    fs::create_dir_all(&args.out)?;
    let mut trainer = Trainer::new(config.clone(), &specs)?;
    if let Some(path) = &args.pretrained {
        let reader = BufReader::new(File::open(path)?);
        let coverage = load_pretrained_vectors(
            reader,
            &path.display().to_string(),
            &trainer.vocabs.chars,
            &mut trainer.model.char_table,
        )?;
        println!(
            "pretrained vectors: {} of {} vocabulary rows covered",
            coverage.matched, coverage.total
        );
        datasets.push(fingerprint("pretrained", path)?);
    }
    let task_names: Vec<String> = trainer.tasks.iter().map(|t| t.name.clone()).collect();
    let outcome = run_prepared(trainer)?;

    let ckpt_path = args.out.join("checkpoint.swseg");
    checkpoint::save(
        &ckpt_path,
        &outcome.best_model,
        &outcome.trainer.vocabs,
        &task_names,
        Some(outcome.best_avg_f),
    )?;

    let history_path = args.out.join("history.tsv");
    {
        let mut w = BufWriter::new(File::create(&history_path)?);
        writeln!(w, "{HISTORY_TSV_HEADER}")?;
        for record in &outcome.history {
            for row in history_tsv_rows(record) {
                writeln!(w, "{row}")?;
            }
        }
    }

    let manifest = RunManifest {
        command: std::env::args().collect(),
        seed: config.seed,
        config: config_to_map(&config),
        datasets,
        artifacts: vec![ckpt_path.display().to_string(), history_path.display().to_string()],
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&args.out.join("manifest.json"), &manifest)?;

    println!(
        "trained {} epochs; best avg dev F {:.4} at epoch {}",
        outcome.history.len(),
        outcome.best_avg_f,
        outcome.best_epoch
    );
    for record in outcome.history.last().iter() {
        for task in &record.tasks {
            println!("  {}: dev F {:.4}", task.name, task.report.f1);
        }
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let map = load_char_map(args.char_map.as_ref())?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mode = SwitchMode::parse(&args.switch_mode)?;

    let train_dicts: BTreeMap<&str, &PathBuf> =
        args.train.iter().map(|d| (d.name.as_str(), &d.train)).collect();

    let mut reports = Vec::new();
    for data in &args.data {
        let corpus = read_corpus(&data.train, map.as_ref())?;
        if corpus.is_empty() {
            return Err(Error::InvalidInput(format!(
                "test file {} contains no sentences",
                data.train.display()
            )));
        }
        let task_id = task_id_by_name(&ckpt, &data.name)?;
        let instances = encode_corpus(&ckpt.vocabs, &corpus);
        let oov = match train_dicts.get(data.name.as_str()) {
            Some(path) => {
                let train_corpus = read_corpus(path, map.as_ref())?;
                let (set, _) = crate::corpus::oov_words(&train_corpus, &corpus);
                Some(set)
            }
            None => None,
        };
        let report =
            evaluate_model(&ckpt.model, &instances, task_id, oov.as_ref(), mode, args.seed)?;
        reports.push((data.name.clone(), report));
    }

    let avg = avg_report(&reports);
    let mut w = out_writer(args.out.as_ref())?;
    match args.format.as_str() {
        "tsv" => {
            writeln!(w, "{EVAL_TSV_HEADER}")?;
            for (name, report) in &reports {
                writeln!(w, "{}", eval_tsv_row(name, report))?;
            }
            writeln!(w, "{}", eval_tsv_row("Avg", &avg))?;
        }
        "block" => {
            for (name, report) in &reports {
                write_report_block(&mut w, name, report)?;
            }
            write_report_block(&mut w, "Avg", &avg)?;
        }
        other => return Err(Error::Config(format!("unknown format '{other}'"))),
    }
    Ok(())
}

fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    let map = load_char_map(args.char_map.as_ref())?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let task_id = match (&args.task, ckpt.model.cfg.multi) {
        (Some(name), true) => task_id_by_name(&ckpt, name)?,
        (None, true) => {
            return Err(Error::InvalidInput(
                "this checkpoint is multi-criteria; pass --task".into(),
            ))
        }
        (Some(_), false) => {
            return Err(Error::InvalidInput(
                "this checkpoint is single-criterion; --task does not apply".into(),
            ))
        }
        (None, false) => None,
    };

    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) => Box::new(BufReader::new(File::open(p)?)),
        None => Box::new(BufReader::new(std::io::stdin().lock())),
    };
    let mut w = out_writer(args.output.as_ref())?;
    let opts = crate::model::PassOptions::eval(SwitchMode::Normal);
    for line in reader.lines() {
        let line = line?;
        // Existing whitespace is stripped before segmentation.
        let mut text: String = line.split_whitespace().collect();
        if let Some(m) = &map {
            text = m.apply_str(&text);
        }
        if text.is_empty() {
            writeln!(w)?;
            continue;
        }
        let chars: Vec<char> = text.chars().collect();
        let enc = crate::embeddings::encode_sentence(
            &chars,
            &ckpt.vocabs.chars,
            ckpt.vocabs.bigrams.as_ref(),
        );
        let (labels, _) = ckpt.model.decode(&enc, task_id, &opts, None)?;
        let segmented = crate::corpus::from_bmes(&chars, &labels)?;
        writeln!(w, "{}", segmented.to_line())?;
    }
    Ok(())
}

fn cmd_sweep_k(args: &SweepKArgs) -> Result<()> {
    let started = Instant::now();
    let config = resolve_config(&args.config)?;
    let map = load_char_map(args.char_map.as_ref())?;

    let mut specs = Vec::new();
    let mut datasets = Vec::new();
    for data in &args.data {
        let train = read_corpus(&data.train, map.as_ref())?;
        datasets.push(fingerprint(&data.name, &data.train)?);
        let dev = match &data.dev {
            Some(p) => Some(read_corpus(p, map.as_ref())?),
            None => None,
        };
        specs.push(TaskSpec { name: data.name.clone(), train, dev });
    }

    let rows = sweep_k(&config, &specs, &args.k_values)?;
    fs::create_dir_all(&args.out)?;
    let sweep_path = args.out.join("sweep.tsv");
    {
        let mut w = BufWriter::new(File::create(&sweep_path)?);
        writeln!(w, "k\tparam_count\tavg_dev_f")?;
        for row in &rows {
            writeln!(w, "{}\t{}\t{:.4}", row.k, row.param_count, row.avg_dev_f)?;
            println!("K={}: {} parameters, avg dev F {:.4}", row.k, row.param_count, row.avg_dev_f);
        }
    }
    let manifest = RunManifest {
        command: std::env::args().collect(),
        seed: config.seed,
        config: config_to_map(&config),
        datasets,
        artifacts: vec![sweep_path.display().to_string()],
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&args.out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    let started = Instant::now();
    let config = resolve_config(&args.config)?;
    let map = load_char_map(args.char_map.as_ref())?;
    let ckpt = checkpoint::load(&args.checkpoint)?;

    let train = read_corpus(&args.data.train, map.as_ref())?;
    let dev = match &args.data.dev {
        Some(p) => Some(read_corpus(p, map.as_ref())?),
        None => None,
    };
    let test = match &args.test {
        Some(p) => Some(read_corpus(p, map.as_ref())?),
        None => None,
    };
    let mut datasets = vec![fingerprint(&args.data.name, &args.data.train)?];
    if let Some(p) = &args.test {
        datasets.push(fingerprint(&args.data.name, p)?);
    }

    fs::create_dir_all(&args.out)?;
    let next_id = ckpt
        .model
        .task_table
        .as_ref()
        .map(|t| t.registered() as u32)
        .unwrap_or(0);
    let frozen_before = trainer::checksum_excluding_task_row(&ckpt.model, Some(next_id));

    let transfer_path = args.out.join("transfer.tsv");
    let mut w = BufWriter::new(File::create(&transfer_path)?);
    writeln!(w, "instances\tprecision\trecall\tf1\toov_recall\tfrozen_intact")?;
    for &count in &args.counts {
        if count > train.len() {
            return Err(Error::InvalidInput(format!(
                "requested {count} training instances but the corpus has {}",
                train.len()
            )));
        }
        let outcome = transfer_fit(
            &ckpt.model,
            &ckpt.vocabs,
            &args.data.name,
            &train[..count],
            dev.as_deref(),
            &config,
        )?;
        let frozen_after =
            trainer::checksum_excluding_task_row(&outcome.model, Some(outcome.task_id));
        let intact = frozen_before == frozen_after;

        let report = match &test {
            Some(test) => {
                let instances = encode_corpus(&ckpt.vocabs, test);
                evaluate_model(
                    &outcome.model,
                    &instances,
                    Some(outcome.task_id),
                    None,
                    config.switch_mode,
                    config.seed,
                )?
            }
            None => outcome
                .history
                .last()
                .map(|r| r.tasks[0].report.clone())
                .ok_or_else(|| Error::InvalidInput("transfer produced no evaluation".into()))?,
        };
        let oov = report
            .oov_recall
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".to_string());
        writeln!(
            w,
            "{count}\t{:.4}\t{:.4}\t{:.4}\t{oov}\t{intact}",
            report.precision, report.recall, report.f1
        )?;
        println!(
            "{count} instances: F {:.4} (trainable parameters: {}, frozen intact: {intact})",
            report.f1, outcome.trainable_parameters
        );
    }
    drop(w);

    let manifest = RunManifest {
        command: std::env::args().collect(),
        seed: config.seed,
        config: config_to_map(&config),
        datasets,
        artifacts: vec![transfer_path.display().to_string()],
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&args.out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn cmd_switch_stats(args: &SwitchStatsArgs) -> Result<()> {
    let map = load_char_map(args.char_map.as_ref())?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mode = SwitchMode::parse(&args.switch_mode)?;
    let k = ckpt.model.cfg.k;

    let mut w = out_writer(args.out.as_ref())?;
    let header: Vec<String> = (0..k).map(|i| format!("k{i}")).collect();
    writeln!(w, "task\tdirection\t{}", header.join("\t"))?;

    let mut trace_writer = match &args.dump_traces {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut first_dump = true;

    for data in &args.data {
        let corpus = read_corpus(&data.train, map.as_ref())?;
        let task_id = task_id_by_name(&ckpt, &data.name)?;
        let instances = encode_corpus(&ckpt.vocabs, &corpus);
        let traces = collect_traces(&ckpt.model, &instances, task_id, mode, args.seed)?;
        let (fwd, bwd) = crate::metrics::switch_distribution(&traces)?;
        let fmt = |v: &crate::numerics::Tensor1| {
            v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join("\t")
        };
        writeln!(w, "{}\tforward\t{}", data.name, fmt(&fwd))?;
        writeln!(w, "{}\tbackward\t{}", data.name, fmt(&bwd))?;
        if let Some(tw) = trace_writer.as_mut() {
            write_trace_tsv(tw, &data.name, &traces, first_dump)?;
            first_dump = false;
        }
    }
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let map = load_char_map(args.char_map.as_ref())?;
    let train_paths: BTreeMap<&str, &PathBuf> =
        args.train.iter().map(|d| (d.name.as_str(), &d.train)).collect();
    let mut w = out_writer(args.out.as_ref())?;
    writeln!(w, "{STATS_TSV_HEADER}")?;
    for data in &args.data {
        let corpus = read_corpus(&data.train, map.as_ref())?;
        let dict = match train_paths.get(data.name.as_str()) {
            Some(path) => Some(word_types(&read_corpus(path, map.as_ref())?)),
            None => None,
        };
        let s = stats(&corpus, dict.as_ref());
        writeln!(w, "{}", stats_tsv_row(&data.name, &s))?;
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = make_spec(&SpecOptions {
        criteria: args.criteria,
        lexicon_size: args.lexicon,
        conflict_fraction: args.conflict,
        alphabet_size: args.alphabet,
        min_unit_len: args.min_unit_len,
        max_unit_len: args.max_unit_len,
        seed: args.seed,
    })?;
    let gen = GenConfig {
        train_sentences: args.train,
        dev_sentences: args.dev,
        test_sentences: args.test,
        min_units: args.min_units,
        max_units: args.max_units,
        seed: derive_seed(args.seed, &[0x6E6]),
    };
    let generated = gen_corpora(&spec, &gen)?;
    let bound = oracle_upper_bound(&spec, &generated)?;

    let write_corpus = |path: &Path, corpus: &[SegmentedSentence]| -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in corpus {
            writeln!(w, "{}", s.to_line())?;
        }
        Ok(())
    };

    for corpora in &generated.criteria {
        let dir = args.out.join(&corpora.name);
        fs::create_dir_all(&dir)?;
        write_corpus(&dir.join("train.txt"), &corpora.train)?;
        write_corpus(&dir.join("dev.txt"), &corpora.dev)?;
        write_corpus(&dir.join("test.txt"), &corpora.test)?;
    }

    let mut held_out = Vec::new();
    for i in 0..args.held_out {
        let name = format!("crit{}", (b'A' + (args.criteria + i) as u8) as char);
        let criterion = derived_criterion(&spec, &name, derive_seed(args.seed, &[0xDE, i as u64]));
        let corpora = corpora_for_criterion(&spec, &generated, &criterion);
        let dir = args.out.join(&corpora.name);
        fs::create_dir_all(&dir)?;
        write_corpus(&dir.join("train.txt"), &corpora.train)?;
        write_corpus(&dir.join("dev.txt"), &corpora.dev)?;
        write_corpus(&dir.join("test.txt"), &corpora.test)?;
        held_out.push(criterion);
    }

    let manifest = SynthManifest { spec, gen, oracle_bound: bound.clone(), held_out };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    fs::write(args.out.join("manifest.json"), json)?;

    for (i, f) in bound.per_criterion.iter().enumerate() {
        println!("task-blind bound for {}: F {:.4}", manifest.spec.criteria[i].name, f);
    }
    println!("task-blind bound average: F {:.4}", bound.average);
    Ok(())
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("SWITCHSEG_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        });
    if let Some(n) = threads {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Segment(args) => cmd_segment(args),
        Command::SweepK(args) => cmd_sweep_k(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::SwitchStats(args) => cmd_switch_stats(args),
        Command::Stats(args) => cmd_stats(args),
    }
}

/// Entry point for the binary; maps errors to exit codes.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_arg_parsing() {
        let d = parse_data_arg("pku=/tmp/train.txt,/tmp/dev.txt").unwrap();
        assert_eq!(d.name, "pku");
        assert_eq!(d.train, PathBuf::from("/tmp/train.txt"));
        assert_eq!(d.dev, Some(PathBuf::from("/tmp/dev.txt")));
        let d = parse_data_arg("msr=/tmp/t.txt").unwrap();
        assert!(d.dev.is_none());
        assert!(parse_data_arg("no-equals").is_err());
        assert!(parse_data_arg("=path").is_err());
    }

    #[test]
    fn config_file_parsing_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "k = 3\nlr = 0.01  # comment\nmode = single\n").unwrap();
        let opts = ConfigOpts { config: Some(path), k: Some(5), ..Default::default() };
        let cfg = resolve_config(&opts).unwrap();
        assert_eq!(cfg.k, 5); // flag wins over file
        assert_eq!(cfg.lr, 0.01);
        assert!(!cfg.multi);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(set_config_key(&mut cfg, "nonsense", "1").is_err());
        assert!(set_config_key(&mut cfg, "k", "abc").is_err());
        assert!(set_config_key(&mut cfg, "mode", "both").is_err());
        assert!(set_config_key(&mut cfg, "switch_mode", "random-test").is_ok());
    }

    #[test]
    fn config_map_round_trips_through_setter() {
        let cfg = TrainConfig::default();
        let map = config_to_map(&cfg);
        let mut rebuilt = TrainConfig::default();
        for (k, v) in &map {
            set_config_key(&mut rebuilt, k, v).unwrap();
        }
        assert_eq!(config_to_map(&rebuilt), map);
    }
}
