//! Command-line surface: training runs, evaluation, synthetic data,
//! hyperparameter sweeps and embedding export.
//!
//! Exit codes: 0 on success, 2 for invalid flags or inputs, 3 when training
//! diverges.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_networks, load_network_files, save_network, with_label_rates, NetworkPaths,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{embeddings_tsv, score_nodes, F1Scores};
use crate::graph::{align_attributes, reduce_common_attributes, renormalized_filter, DomainPair};
use crate::model::{predict_scores, Checkpoint, TaskMode, Variant};
use crate::trainer::{TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "adagcn",
    version,
    about = "Cross-network node classification with adversarial domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a source/target network pair.
    #[command(allow_negative_numbers = true)]
    Train(TrainArgs),
    /// Score a trained checkpoint on a labeled target network.
    Eval(EvalArgs),
    /// Write a synthetic source/target pair as TSV files.
    GenSynth(GenSynthArgs),
    /// Train over a hyperparameter grid and tabulate target F1.
    #[command(allow_negative_numbers = true)]
    Sweep(SweepArgs),
    /// Write dropout-free node representations of both networks as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub source_edges: Option<PathBuf>,
    #[arg(long)]
    pub source_feats: Option<PathBuf>,
    #[arg(long)]
    pub source_labels: Option<PathBuf>,
    #[arg(long)]
    pub target_edges: Option<PathBuf>,
    #[arg(long)]
    pub target_feats: Option<PathBuf>,
    #[arg(long)]
    pub target_labels: Option<PathBuf>,
}

/// Every flag overrides one field of the resolved run settings; omitted flags
/// keep the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Representation learner: gcn or igcn.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Domain-adaptation weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Gradient-penalty weight γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Critic steps per epoch.
    #[arg(long)]
    pub nd: Option<usize>,
    /// Filter passes in the igcn layer.
    #[arg(long)]
    pub ni: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr_critic: Option<f64>,
    #[arg(long)]
    pub lr_generator: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated representation widths, e.g. 1000,100,16.
    #[arg(long)]
    pub widths: Option<String>,
    /// multi-label or multi-class.
    #[arg(long)]
    pub mode: Option<TaskMode>,
    /// Fraction of source nodes whose labels are used for training.
    #[arg(long)]
    pub source_rate: Option<f64>,
    /// Fraction of target nodes whose labels are used for training.
    #[arg(long)]
    pub target_rate: Option<f64>,
    /// Delete shared attributes until the common-attribute rate is at most this.
    #[arg(long)]
    pub common_attr_rate: Option<f64>,
    /// Score the target network every k epochs (0 disables).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Replay the inputs and settings of an earlier run.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    All,
    TargetUnlabeledOnly,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target_edges: PathBuf,
    #[arg(long)]
    pub target_feats: PathBuf,
    #[arg(long)]
    pub target_labels: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long)]
    pub p_in: Option<f64>,
    #[arg(long)]
    pub p_out: Option<f64>,
    /// Signature attributes per label.
    #[arg(long)]
    pub signature: Option<usize>,
    #[arg(long)]
    pub noise: Option<usize>,
    #[arg(long)]
    pub q_sig_source: Option<f64>,
    #[arg(long)]
    pub q_noise_source: Option<f64>,
    #[arg(long)]
    pub q_sig_target: Option<f64>,
    #[arg(long)]
    pub q_noise_target: Option<f64>,
    /// Common-attribute rate of the pair.
    #[arg(long)]
    pub ra: Option<f64>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Axis as `key=v1,v2,...` or `key=start:end:step`; repeat for a
    /// cartesian grid.
    #[arg(long)]
    pub grid: Vec<String>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// Train on the default synthetic pair instead of data files.
    #[arg(long)]
    pub synthetic: bool,
    /// Runs trained concurrently; each run stays single-threaded.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything that determines a training run besides the input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub config: TrainConfig,
    pub source_rate: f64,
    pub target_rate: f64,
    pub common_attr_rate: Option<f64>,
    pub eval_every: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            config: TrainConfig::default(),
            source_rate: 0.1,
            target_rate: 0.0,
            common_attr_rate: None,
            eval_every: 0,
        }
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad width `{w}` in `{s}`")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunSettings {
    pub fn apply(&mut self, args: &ConfigArgs) -> Result<()> {
        let c = &mut self.config;
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = args.$flag.clone() {
                    $field = v;
                }
            };
        }
        set!(variant => c.variant);
        set!(lambda => c.lambda);
        set!(gamma => c.gamma);
        set!(nd => c.critic_steps);
        set!(ni => c.smoothing);
        set!(epochs => c.epochs);
        set!(seed => c.seed);
        set!(lr_critic => c.critic_lr);
        set!(lr_generator => c.generator_lr);
        set!(dropout => c.dropout);
        set!(weight_decay => c.weight_decay);
        set!(mode => c.mode);
        set!(source_rate => self.source_rate);
        set!(target_rate => self.target_rate);
        set!(eval_every => self.eval_every);
        if let Some(w) = &args.widths {
            c.widths = parse_widths(w)?;
        }
        if let Some(r) = args.common_attr_rate {
            self.common_attr_rate = Some(r);
        }
        Ok(())
    }

    /// Sets one field by its flag name (`lambda`, `nd`, `source-rate`, ...).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.config;
        match key.replace('_', "-").as_str() {
            "variant" => c.variant = value.parse()?,
            "mode" => c.mode = value.parse()?,
            "lambda" => c.lambda = parse_num(key, value)?,
            "gamma" => c.gamma = parse_num(key, value)?,
            "nd" => c.critic_steps = parse_num(key, value)?,
            "ni" => c.smoothing = parse_num(key, value)?,
            "epochs" => c.epochs = parse_num(key, value)?,
            "seed" => c.seed = parse_num(key, value)?,
            "lr-critic" => c.critic_lr = parse_num(key, value)?,
            "lr-generator" => c.generator_lr = parse_num(key, value)?,
            "dropout" => c.dropout = parse_num(key, value)?,
            "weight-decay" => c.weight_decay = parse_num(key, value)?,
            "widths" => c.widths = parse_widths(value)?,
            "source-rate" => self.source_rate = parse_num(key, value)?,
            "target-rate" => self.target_rate = parse_num(key, value)?,
            "common-attr-rate" => self.common_attr_rate = Some(parse_num(key, value)?),
            "eval-every" => self.eval_every = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if !(self.source_rate > 0.0 && self.source_rate <= 1.0) {
            return Err(Error::Config(format!(
                "source rate {} outside (0, 1]",
                self.source_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return Err(Error::Config(format!(
                "target rate {} outside [0, 1]",
                self.target_rate
            )));
        }
        Ok(())
    }
}

/// The files a run reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInputs {
    pub source: NetworkPaths,
    pub target_edges: PathBuf,
    pub target_features: PathBuf,
    pub target_labels: Option<PathBuf>,
}

impl RunInputs {
    fn from_args(data: &DataArgs) -> Result<Self> {
        let need = |p: &Option<PathBuf>, flag: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("missing required flag --{flag}")))
        };
        Ok(Self {
            source: NetworkPaths {
                edges: need(&data.source_edges, "source-edges")?,
                features: need(&data.source_feats, "source-feats")?,
                labels: need(&data.source_labels, "source-labels")?,
            },
            target_edges: need(&data.target_edges, "target-edges")?,
            target_features: need(&data.target_feats, "target-feats")?,
            target_labels: data.target_labels.clone(),
        })
    }

    fn files(&self) -> Vec<&Path> {
        let mut out = vec![
            self.source.edges.as_path(),
            self.source.features.as_path(),
            self.source.labels.as_path(),
            self.target_edges.as_path(),
            self.target_features.as_path(),
        ];
        if let Some(l) = &self.target_labels {
            out.push(l);
        }
        out
    }

    /// SHA-256 of every input file, keyed by path.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        self.files()
            .into_iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub manifest: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join(CHECKPOINT_FILE),
            history: dir.join(HISTORY_FILE),
            manifest: dir.join(MANIFEST_FILE),
        }
    }
}

/// Resolved description of one training run, sufficient to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub settings: RunSettings,
    pub inputs: RunInputs,
    pub digests: BTreeMap<String, String>,
    pub artifacts: RunArtifacts,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: bad manifest: {e}", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// A training-ready pair plus the attributes removed from both networks.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub pair: DomainPair,
    pub dropped: BTreeSet<String>,
}

/// Loads, aligns, optionally thins the shared attributes, and samples the
/// labeled sets.
pub fn prepare_pair(inputs: &RunInputs, settings: &RunSettings) -> Result<PreparedPair> {
    let source = load_network_files(
        &inputs.source.edges,
        &inputs.source.features,
        Some(&inputs.source.labels),
    )?;
    let target = load_network_files(
        &inputs.target_edges,
        &inputs.target_features,
        inputs.target_labels.as_deref(),
    )?;
    if settings.target_rate > 0.0 && !target.has_labels() {
        return Err(Error::Config(
            "a target training rate needs --target-labels".into(),
        ));
    }
    let aligned = align_attributes(&source, &target)?;
    let seed = settings.config.seed;
    let (reduced, dropped) = match settings.common_attr_rate {
        Some(rate) => {
            let reduced = reduce_common_attributes(&aligned, rate, seed)?;
            let kept: BTreeSet<&String> = reduced.union_vocab().iter().collect();
            let dropped = aligned
                .union_vocab()
                .iter()
                .filter(|a| !kept.contains(a))
                .cloned()
                .collect();
            (reduced, dropped)
        }
        None => (aligned, BTreeSet::new()),
    };
    let pair = with_label_rates(&reduced, settings.source_rate, settings.target_rate, seed)?;
    Ok(PreparedPair { pair, dropped })
}

/// Run facts a later `eval` or `export-embeddings` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub vocab: Vec<String>,
    pub dropped_attributes: BTreeSet<String>,
    pub source_training_nodes: Vec<usize>,
    pub target_training_nodes: Vec<usize>,
    pub epochs: usize,
}

impl CheckpointMetadata {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("bad run metadata: {e}")))
    }
}

fn checkpoint_for(trainer: &Trainer, prepared: &PreparedPair) -> Checkpoint {
    let meta = CheckpointMetadata {
        vocab: prepared.pair.union_vocab().to_vec(),
        dropped_attributes: prepared.dropped.clone(),
        source_training_nodes: prepared.pair.source.labeled_set().to_vec(),
        target_training_nodes: prepared.pair.target.labeled_set().to_vec(),
        epochs: trainer.epochs_done(),
    };
    Checkpoint {
        architecture: trainer.architecture(),
        params: trainer.params().clone(),
        metadata: serde_json::to_value(meta).expect("serializable"),
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub final_snapshot: Option<F1Scores>,
}

/// Trains one run and writes checkpoint, JSON-lines history and manifest
/// into `out`. On divergence the parameters of the last completed epoch are
/// written to `last_good.ckpt` before the error is returned.
pub fn run_training(inputs: &RunInputs, settings: &RunSettings, out: &Path) -> Result<RunOutcome> {
    settings.validate()?;
    let digests = inputs.digests()?;
    let prepared = prepare_pair(inputs, settings)?;
    create_dir(out)?;
    let artifacts = RunArtifacts::in_dir(out);
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: settings.config.seed,
        settings: settings.clone(),
        inputs: inputs.clone(),
        digests,
        artifacts: artifacts.clone(),
    };
    write_json(&artifacts.manifest, &manifest)?;

    let mut trainer =
        Trainer::new(&prepared.pair, &settings.config)?.with_evaluation(settings.eval_every);
    let file = File::create(&artifacts.history).map_err(|e| Error::io(&artifacts.history, e))?;
    let mut history = BufWriter::new(file);
    while trainer.epochs_done() < settings.config.epochs {
        match trainer.run_epoch() {
            Ok(record) => {
                if let Some(s) = record.snapshot {
                    log::info!(
                        "epoch {}: L_c {:.4} L_d {:.4} micro-F1 {:.4} macro-F1 {:.4}",
                        record.epoch,
                        record.losses.classification,
                        record.losses.critic,
                        s.micro_f1,
                        s.macro_f1
                    );
                }
                writeln!(history, "{}", record.json_line())
                    .and_then(|_| history.flush())
                    .map_err(|e| Error::io(&artifacts.history, e))?;
            }
            Err(err) => {
                let last_good = out.join(LAST_GOOD_FILE);
                checkpoint_for(&trainer, &prepared).save(&last_good)?;
                return Err(match err {
                    Error::Training { epoch, msg } => Error::Training {
                        epoch,
                        msg: format!("{msg}; parameters saved to {}", last_good.display()),
                    },
                    other => other,
                });
            }
        }
    }
    checkpoint_for(&trainer, &prepared).save(&artifacts.checkpoint)?;
    Ok(RunOutcome {
        manifest,
        final_snapshot: trainer.history().last_snapshot(),
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunOutcome> {
    let (inputs, mut settings) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            for (file, digest) in &m.digests {
                let now = sha256_file(Path::new(file))?;
                if &now != digest {
                    log::warn!("{file} changed since the manifest was written");
                }
            }
            (m.inputs, m.settings)
        }
        None => (RunInputs::from_args(&args.data)?, RunSettings::default()),
    };
    settings.apply(&args.config)?;
    run_training(&inputs, &settings, &args.out)
}

/// Loads a checkpoint and maps a target network onto its vocabulary.
fn load_for_scoring(
    checkpoint: &Path,
    edges: &Path,
    features: &Path,
    labels: Option<&Path>,
) -> Result<(
    Checkpoint,
    CheckpointMetadata,
    crate::graph::AttributedNetwork,
)> {
    let ck = Checkpoint::load(checkpoint)?;
    let meta = CheckpointMetadata::from_checkpoint(&ck)?;
    if meta.vocab.len() != ck.architecture.input_dim {
        return Err(Error::Checkpoint(format!(
            "vocabulary of {} attributes for a {}-wide input layer",
            meta.vocab.len(),
            ck.architecture.input_dim
        )));
    }
    let net = load_network_files(edges, features, labels)?.project_onto(
        &meta.vocab,
        &meta.dropped_attributes,
        ck.architecture.label_count,
    )?;
    Ok((ck, meta, net))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<F1Scores> {
    let (ck, meta, target) = load_for_scoring(
        &args.checkpoint,
        &args.target_edges,
        &args.target_feats,
        Some(&args.target_labels),
    )?;
    let training: BTreeSet<usize> = meta.target_training_nodes.iter().copied().collect();
    let nodes: Vec<usize> = target
        .nodes_with_labels()
        .into_iter()
        .filter(|i| args.split == Split::All || !training.contains(i))
        .collect();
    if nodes.is_empty() {
        return Err(Error::Config("no labeled target nodes to score".into()));
    }
    let filter = renormalized_filter(&target)?;
    let features = std::sync::Arc::new(target.features().clone());
    let scores = predict_scores(&ck.params, &filter, &features)?;
    score_nodes(&scores, &target, &nodes, ck.architecture.mode)
}

fn synthetic_config(args: &GenSynthArgs) -> SyntheticConfig {
    let mut cfg = SyntheticConfig::default();
    macro_rules! set {
        ($flag:ident => $field:expr) => {
            if let Some(v) = args.$flag {
                $field = v;
            }
        };
    }
    set!(nodes => cfg.nodes);
    set!(labels => cfg.labels);
    set!(p_in => cfg.p_in);
    set!(p_out => cfg.p_out);
    set!(signature => cfg.signature_attributes);
    set!(noise => cfg.noise_attributes);
    set!(q_sig_source => cfg.source.signature);
    set!(q_noise_source => cfg.source.noise);
    set!(q_sig_target => cfg.target.signature);
    set!(q_noise_target => cfg.target.noise);
    set!(ra => cfg.common_rate);
    set!(overlap => cfg.overlap);
    set!(seed => cfg.seed);
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub tool: String,
    pub version: String,
    pub config: SyntheticConfig,
    pub achieved_common_rate: f64,
    pub source: NetworkPaths,
    pub target: NetworkPaths,
    pub digests: BTreeMap<String, String>,
}

/// Generates and writes a synthetic pair into `out`.
pub fn write_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<SynthManifest> {
    let (source, target) = generate_networks(cfg)?;
    create_dir(out)?;
    let sp = NetworkPaths::in_dir(out, "source");
    let tp = NetworkPaths::in_dir(out, "target");
    save_network(&source, &sp)?;
    save_network(&target, &tp)?;
    let achieved = align_attributes(&source, &target)?.common_attribute_rate();
    let mut digests = BTreeMap::new();
    for p in [&sp, &tp] {
        for f in [&p.edges, &p.features, &p.labels] {
            digests.insert(f.display().to_string(), sha256_file(f)?);
        }
    }
    let manifest = SynthManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        achieved_common_rate: achieved,
        source: sp,
        target: tp,
        digests,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<SynthManifest> {
    write_synthetic(&synthetic_config(args), &args.out)
}

/// One sweep axis: a setting name and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `key=v1,v2,...` or `key=start:end:step` (inclusive end).
pub fn parse_axis(spec: &str) -> Result<GridAxis> {
    let (key, rest) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis `{spec}` is not key=values")))?;
    let key = key.trim().to_string();
    let rest = rest.trim();
    let values: Vec<String> = if rest.contains(':') {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "range `{rest}` is not start:end:step"
            )));
        }
        let start: f64 = parse_num(&key, parts[0])?;
        let end: f64 = parse_num(&key, parts[1])?;
        let step: f64 = parse_num(&key, parts[2])?;
        if step.is_nan() || step <= 0.0 || end < start {
            return Err(Error::Config(format!("range `{rest}` is empty")));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| {
                // Round away accumulated binary error so `0.4:2.0:0.4` yields 1.2, not 1.2000000000000002.
                let v = start + step * i as f64;
                let v: f64 = format!("{v:.10}").parse().expect("formatted float");
                v.to_string()
            })
            .collect()
    } else {
        rest.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .collect()
    };
    if key.is_empty() || values.is_empty() {
        return Err(Error::Config(format!("grid axis `{spec}` has no values")));
    }
    Ok(GridAxis { key, values })
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<String>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push(v.clone());
                    next
                })
            })
            .collect();
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub values: Vec<String>,
    pub seed: u64,
    pub scores: F1Scores,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// CSV with one `run` row per (cell, seed) followed by `mean` and `std` rows
/// per cell (sample standard deviation).
pub fn sweep_csv(axes: &[GridAxis], rows: &[SweepRow]) -> String {
    let mut out = String::from("kind");
    for a in axes {
        out.push(',');
        out.push_str(&a.key);
    }
    out.push_str(",seed,micro_f1,macro_f1\n");
    let line = |out: &mut String, kind: &str, values: &[String], seed: &str, a: f64, b: f64| {
        out.push_str(kind);
        for v in values {
            out.push(',');
            out.push_str(v);
        }
        out.push_str(&format!(",{seed},{a},{b}\n"));
    };
    for r in rows {
        line(
            &mut out,
            "run",
            &r.values,
            &r.seed.to_string(),
            r.scores.micro_f1,
            r.scores.macro_f1,
        );
    }
    let cells: BTreeSet<usize> = rows.iter().map(|r| r.cell).collect();
    for cell in cells {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.cell == cell).collect();
        let micro: Vec<f64> = group.iter().map(|r| r.scores.micro_f1).collect();
        let macro_: Vec<f64> = group.iter().map(|r| r.scores.macro_f1).collect();
        let (m1, s1) = mean_std(&micro);
        let (m2, s2) = mean_std(&macro_);
        line(&mut out, "mean", &group[0].values, "", m1, m2);
        line(&mut out, "std", &group[0].values, "", s1, s2);
    }
    out
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| parse_num("seeds", v))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    Ok(seeds)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let axes: Vec<GridAxis> = args
        .grid
        .iter()
        .map(|g| parse_axis(g))
        .collect::<Result<_>>()?;
    if axes.is_empty() {
        return Err(Error::Config(
            "empty grid: give at least one --grid axis".into(),
        ));
    }
    let seeds = parse_seeds(&args.seeds)?;
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let mut base = RunSettings::default();
    base.apply(&args.config)?;

    let cells = grid_cells(&axes);
    let mut runs = Vec::new();
    for (ci, values) in cells.iter().enumerate() {
        for &seed in &seeds {
            let mut s = base.clone();
            for (axis, v) in axes.iter().zip(values) {
                s.set(&axis.key, v)?;
            }
            s.config.seed = seed;
            s.validate()?;
            runs.push((ci, values.clone(), seed, s));
        }
    }

    create_dir(&args.out)?;
    let inputs = if args.synthetic {
        let m = write_synthetic(&SyntheticConfig::default(), &args.out.join("data"))?;
        RunInputs {
            source: m.source,
            target_edges: m.target.edges,
            target_features: m.target.features,
            target_labels: Some(m.target.labels),
        }
    } else {
        RunInputs::from_args(&args.data)?
    };
    let Some(target_labels) = inputs.target_labels.clone() else {
        return Err(Error::Config(
            "a sweep needs --target-labels to score runs".into(),
        ));
    };

    let run_one = |(ci, values, seed, settings): &(usize, Vec<String>, u64, RunSettings)| {
        let dir = args.out.join(format!("cell{ci:03}-seed{seed}"));
        run_training(&inputs, settings, &dir)?;
        let scores = cmd_eval(&EvalArgs {
            checkpoint: dir.join(CHECKPOINT_FILE),
            target_edges: inputs.target_edges.clone(),
            target_feats: inputs.target_features.clone(),
            target_labels: target_labels.clone(),
            split: Split::All,
        })?;
        log::info!(
            "cell {ci} {values:?} seed {seed}: micro-F1 {:.4}",
            scores.micro_f1
        );
        Ok(SweepRow {
            cell: *ci,
            values: values.clone(),
            seed: *seed,
            scores,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> =
        pool.install(|| runs.par_iter().map(run_one).collect::<Result<_>>())?;
    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, sweep_csv(&axes, &rows)).map_err(|e| Error::io(&csv_path, e))?;
    Ok(rows)
}

pub fn cmd_export_embeddings(args: &ExportArgs) -> Result<()> {
    let inputs = RunInputs::from_args(&args.data)?;
    let (ck, meta, source) = load_for_scoring(
        &args.checkpoint,
        &inputs.source.edges,
        &inputs.source.features,
        Some(&inputs.source.labels),
    )?;
    let target = load_network_files(
        &inputs.target_edges,
        &inputs.target_features,
        inputs.target_labels.as_deref(),
    )?
    .project_onto(
        &meta.vocab,
        &meta.dropped_attributes,
        ck.architecture.label_count,
    )?;
    let text = embeddings_tsv(&ck.params, &source, &target)?;
    std::fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Training { .. } => EXIT_DIVERGED,
        Error::Contract(_) => 1,
        _ => EXIT_USAGE,
    }
}

/// Runs a parsed command, printing results to stdout and errors to stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|o| {
            if let Some(s) = o.final_snapshot {
                println!("{}", serde_json::to_string(&s).expect("serializable"));
            }
        }),
        Command::Eval(a) => {
            cmd_eval(a).map(|s| println!("{}", serde_json::to_string(&s).expect("serializable")))
        }
        Command::GenSynth(a) => cmd_gen_synth(a).map(|m| {
            println!(
                "{}",
                serde_json::json!({ "achieved_common_rate": m.achieved_common_rate })
            )
        }),
        Command::Sweep(a) => cmd_sweep(a).map(|rows| {
            log::info!("{} runs written to {}", rows.len(), a.out.display());
        }),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
