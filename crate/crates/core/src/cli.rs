//! Command-line surface.
//!
//! Every command resolves one [`RunConfig`] (defaults, optionally the desk
//! preset, then a `--config` JSON overlay, then flags), writes it to
//! `<out-dir>/run_config.json` and holds a lock file in the output directory
//! while it runs.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{index_dataset, DatasetIndex, DirImageStore, FaceDataset};
use crate::encoder::{self, cosine_distance, EncoderConfig, EncoderTrainConfig};
use crate::error::{bail, Error, Result};
use crate::face::FaceImage;
use crate::protocol::{self, Attack, DistanceCache, Evaluator, MorphReport, Reference, SweepRow};
use crate::synth;
use crate::trainer::{self, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const LOCK_FILE: &str = ".facemorph.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub identities: usize,
    pub images_per_identity: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { identities: 8, images_per_identity: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolOptions {
    pub genuine_pairs: usize,
    pub imposter_pairs: usize,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self { genuine_pairs: 100, imposter_pairs: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub alpha: f64,
    pub far: f64,
    pub sweep_alphas: Vec<f64>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            far: protocol::DEFAULT_FAR,
            sweep_alphas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            batch_size: 16,
        }
    }
}

/// Every parameter a command may use, persisted with its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub desk_scale: Option<usize>,
    pub synth: SynthOptions,
    pub encoder: EncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolOptions,
    pub evaluation: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            desk_scale: None,
            synth: SynthOptions::default(),
            encoder: EncoderConfig::default(),
            encoder_train: EncoderTrainConfig::default(),
            train: TrainConfig::default(),
            protocol: ProtocolOptions::default(),
            evaluation: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Desk preset: small encoder and a generator with channels divided by `scale`.
    pub fn desk(scale: usize) -> Self {
        let encoder = EncoderConfig::desk();
        Self { desk_scale: Some(scale), train: TrainConfig::desk(&encoder, scale), encoder, ..Self::default() }
    }

    /// Propagates the root seed into every component.
    fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.encoder_train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.train.generator.feature_dim != self.encoder.feature_dim
            || self.train.generator.f4_channels != self.encoder.f4_channels
        {
            bail!(Config, "generator conditioning does not match the encoder configuration");
        }
        for &a in self.evaluation.sweep_alphas.iter().chain([&self.evaluation.alpha]) {
            crate::alpha::split(a)?;
        }
        if !(0.0..=1.0).contains(&self.evaluation.far) {
            bail!(Config, "far must lie in [0, 1]");
        }
        Ok(())
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Parser)]
#[command(name = "facemorph", version, about = "Identity-conditioned face morph generation and evaluation")]
pub struct Cli {
    /// JSON file overlaid on the default (or desk) configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,
    /// Use the desk preset with channel widths divided by this factor.
    #[arg(long, global = true)]
    pub desk_scale: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Index a directory-per-identity dataset into `<out-dir>/index.csv`.
    Index {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic dataset into `<out-dir>`.
    Synth {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        images_per_identity: Option<usize>,
    },
    /// Train the desk encoder and write `<out-dir>/encoder.fmck`.
    TrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Train the generator; `<out-dir>` becomes the run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        batches_per_epoch: Option<usize>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Morph two aligned face images.
    Morph {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        image1: PathBuf,
        #[arg(long)]
        image2: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a quintuple protocol, sampling triplets when none are given.
    BuildProtocol {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        genuine_pairs: Option<usize>,
        #[arg(long)]
        imposter_pairs: Option<usize>,
    },
    /// Evaluate a generator on a protocol (quintuple and triplet references).
    Evaluate {
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        far: Option<f64>,
    },
    /// Evaluate at several α values and write `<out-dir>/sweep.csv`.
    SweepAlpha {
        #[command(flatten)]
        target: EvalTarget,
        /// Comma-separated α values.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "quintuple")]
        reference: ReferenceArg,
    },
    /// Consolidate evaluation outputs of a run directory for plotting.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalTarget {
    #[arg(long)]
    pub generator: PathBuf,
    /// Encoder used to condition the generator.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Encoder under attack; defaults to `--encoder` (white-box).
    #[arg(long)]
    pub test_encoder: Option<PathBuf>,
    #[arg(long)]
    pub protocol: PathBuf,
    /// Dataset root the protocol's image paths are relative to.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceArg {
    Quintuple,
    Triplet,
}

impl From<ReferenceArg> for Reference {
    fn from(r: ReferenceArg) -> Self {
        match r {
            ReferenceArg::Quintuple => Reference::Quintuple,
            ReferenceArg::Triplet => Reference::Triplet,
        }
    }
}

/// Persisted record of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a Command,
    pub config: &'a RunConfig,
}

/// Exclusive ownership of an output directory for the lifetime of a command.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Cli {
    /// Effective configuration before command-specific flags.
    pub fn base_config(&self) -> Result<RunConfig> {
        let base = match self.desk_scale {
            Some(0) => bail!(Config, "desk scale must be positive"),
            Some(s) => RunConfig::desk(s),
            None => RunConfig::default(),
        };
        let mut cfg = match &self.config {
            Some(path) => {
                let mut value = serde_json::to_value(&base)?;
                let overlay: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
                merge_json(&mut value, overlay);
                serde_json::from_value::<RunConfig>(value)?
            }
            None => base,
        };
        if let Some(s) = self.desk_scale {
            cfg.desk_scale = Some(s);
        }
        let seed = self.seed.unwrap_or(cfg.seed);
        cfg.apply_seed(seed);
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = self.base_config()?;
        match &self.command {
            Command::Synth { identities, images_per_identity } => {
                if let Some(n) = identities {
                    cfg.synth.identities = *n;
                }
                if let Some(n) = images_per_identity {
                    cfg.synth.images_per_identity = *n;
                }
            }
            Command::Train { pretrain_epochs, finetune_epochs, batches_per_epoch, dry_run, .. } => {
                if let Some(e) = pretrain_epochs {
                    cfg.train.pretrain_epochs = *e;
                }
                if let Some(e) = finetune_epochs {
                    cfg.train.finetune_epochs = *e;
                }
                if batches_per_epoch.is_some() {
                    cfg.train.batches_per_epoch = *batches_per_epoch;
                }
                cfg.train.dry_run |= *dry_run;
            }
            Command::Morph { alpha: Some(a), .. } => cfg.evaluation.alpha = *a,
            Command::BuildProtocol { genuine_pairs, imposter_pairs, .. } => {
                if let Some(n) = genuine_pairs {
                    cfg.protocol.genuine_pairs = *n;
                }
                if let Some(n) = imposter_pairs {
                    cfg.protocol.imposter_pairs = *n;
                }
            }
            Command::Evaluate { alpha, far, .. } => {
                if let Some(a) = alpha {
                    cfg.evaluation.alpha = *a;
                }
                if let Some(f) = far {
                    cfg.evaluation.far = *f;
                }
            }
            Command::SweepAlpha { alphas: Some(a), .. } => cfg.evaluation.sweep_alphas = a.clone(),
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_run_config(dir: &Path) -> Result<RunConfig> {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(RUN_CONFIG_FILE))?)?;
    Ok(serde_json::from_value(v["config"].clone())?)
}

fn load_index(data: &Path, index: Option<&Path>) -> Result<DatasetIndex> {
    match index {
        Some(p) => DatasetIndex::read_csv(p),
        None => Ok(index_dataset(data)?.index),
    }
}

/// Parses arguments and runs the command.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let out = cli.out_dir.clone();
    let _lock = RunLock::acquire(&out)?;
    let record = RunRecord { command: &cli.command, config: &cfg };
    std::fs::write(out.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(&record)?)?;
    match &cli.command {
        Command::Index { data } => {
            let scan = index_dataset(data)?;
            scan.index.write_csv(&out.join("index.csv"))?;
            std::fs::write(out.join("index_warnings.txt"), scan.warnings.join("\n"))?;
            for w in &scan.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} images of {} identities", scan.index.len(), scan.index.num_identities());
        }
        Command::Synth { .. } => {
            let n = synth::generate_synthetic_faces(&out, cfg.synth.identities, cfg.synth.images_per_identity, cfg.seed)?;
            println!("wrote {n} images");
        }
        Command::TrainEncoder { data, index } => {
            let index = load_index(data, index.as_deref())?;
            let ds = FaceDataset::load(data, index)?;
            let (enc, report) = encoder::train_desk_encoder(&ds.images, &ds.index.labels(), &cfg.encoder, &cfg.encoder_train)?;
            checkpoint::save_encoder(&out.join("encoder.fmck"), &enc)?;
            std::fs::write(out.join("encoder_report.json"), serde_json::to_string_pretty(&report)?)?;
            println!("held-out identity accuracy {:.1}%", 100.0 * report.heldout_accuracy);
        }
        Command::Train { data, encoder, index, .. } => {
            let enc = checkpoint::load_encoder(encoder)?;
            let ds = FaceDataset::load(data, load_index(data, index.as_deref())?)?;
            let art = trainer::run_training(&cfg.train, &ds, &enc, &out)?;
            println!("{} steps, generator {}", art.log.len(), art.generator_hash);
        }
        Command::Morph { generator, encoder, image1, image2, output, .. } => {
            let g = checkpoint::load_generator(generator)?;
            let enc = checkpoint::load_encoder(encoder)?;
            let x1 = FaceImage::load(image1)?;
            let x2 = FaceImage::load(image2)?;
            let f1 = enc.encode(&x1)?;
            let f2 = enc.encode(&x2)?;
            let morph = g.generate_morph(&f1, &f2, cfg.evaluation.alpha)?;
            morph.save_png(output)?;
            let fm = enc.encode(&morph)?.vectors()?.remove(0);
            let d1 = cosine_distance(&fm, &f1.vectors()?.remove(0))?;
            let d2 = cosine_distance(&fm, &f2.vectors()?.remove(0))?;
            println!("d(morph, image1) = {d1:.6}\nd(morph, image2) = {d2:.6}");
        }
        Command::BuildProtocol { index, triplets, .. } => {
            let idx = DatasetIndex::read_csv(index)?;
            let trips = match triplets {
                Some(p) => protocol::read_triplets(p)?,
                None => {
                    let t = protocol::generate_triplets(&idx, cfg.protocol.genuine_pairs, cfg.protocol.imposter_pairs, cfg.seed)?;
                    protocol::write_triplets(&out.join("triplets.csv"), &t)?;
                    t
                }
            };
            let build = protocol::build_quintuples(&trips, &idx, cfg.seed)?;
            protocol::write_quintuples(&out.join("protocol.csv"), &build.quintuples)?;
            let summary = serde_json::json!({
                "quintuples": build.quintuples.len(),
                "replaced": build.replaced,
                "sha256": protocol::protocol_hash(&build.quintuples)?,
            });
            std::fs::write(out.join("protocol_build.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{} quintuples ({} replaced)", build.quintuples.len(), build.replaced);
        }
        Command::Evaluate { target, .. } => {
            let [q, t] = evaluate_both(target, &cfg, &out)?;
            for r in [&q, &t] {
                print_report(r);
            }
        }
        Command::SweepAlpha { target, reference, .. } => {
            let rows = sweep(target, &cfg, (*reference).into(), &out)?;
            protocol::write_sweep(&out.join("sweep.csv"), &rows)?;
            for r in &rows {
                println!("alpha {:.2}: acc_morph {:.1}  side1 {:.1}  side2 {:.1}", r.alpha, r.acc_morph, r.acc_side1, r.acc_side2);
            }
        }
        Command::Report { run_dir } => {
            let written = write_report(run_dir, &out)?;
            println!("wrote {}", written.display());
        }
    }
    Ok(())
}

struct Loaded {
    generator: crate::morphnet::Generator,
    enc_gen: crate::encoder::EncoderHandle,
    enc_test: crate::encoder::EncoderHandle,
    quintuples: Vec<protocol::Quintuple>,
    store: DirImageStore,
}

fn load_target(target: &EvalTarget) -> Result<Loaded> {
    let enc_gen = checkpoint::load_encoder(&target.encoder)?;
    let enc_test = match &target.test_encoder {
        Some(p) => checkpoint::load_encoder(p)?,
        None => enc_gen.clone(),
    };
    Ok(Loaded {
        generator: checkpoint::load_generator(&target.generator)?,
        enc_gen,
        enc_test,
        quintuples: protocol::read_quintuples(&target.protocol)?,
        store: DirImageStore { root: target.data.clone() },
    })
}

fn evaluator<'a>(l: &'a Loaded, cfg: &RunConfig) -> Result<Evaluator<'a>> {
    let attack = Attack { generator: &l.generator, enc_gen: &l.enc_gen, enc_test: &l.enc_test };
    let mut ev = Evaluator::new(attack, &l.quintuples, &l.store)?;
    ev.batch_size = cfg.evaluation.batch_size;
    Ok(ev)
}

/// Writes `evaluation.json` (quintuple references) and
/// `evaluation_triplet.json`.
pub fn evaluate_both(target: &EvalTarget, cfg: &RunConfig, out: &Path) -> Result<[MorphReport; 2]> {
    let loaded = load_target(target)?;
    let mut ev = evaluator(&loaded, cfg)?;
    let mut cache = DistanceCache::on_disk(&out.join("distance_cache"))?;
    let e = &cfg.evaluation;
    let q = ev.evaluate(e.alpha, Reference::Quintuple, e.far, &mut cache)?;
    let t = ev.evaluate(e.alpha, Reference::Triplet, e.far, &mut cache)?;
    std::fs::write(out.join("evaluation.json"), serde_json::to_string_pretty(&q)?)?;
    std::fs::write(out.join("evaluation_triplet.json"), serde_json::to_string_pretty(&t)?)?;
    Ok([q, t])
}

pub fn sweep(target: &EvalTarget, cfg: &RunConfig, reference: Reference, out: &Path) -> Result<Vec<SweepRow>> {
    let loaded = load_target(target)?;
    let mut ev = evaluator(&loaded, cfg)?;
    let mut cache = DistanceCache::on_disk(&out.join("distance_cache"))?;
    ev.sweep_alpha(&cfg.evaluation.sweep_alphas, reference, &mut cache)
}

fn pct(v: Option<&protocol::SubsetMetrics>, f: fn(&protocol::SubsetMetrics) -> f64) -> String {
    v.map_or_else(|| "-".to_string(), |m| format!("{:.1}", f(m)))
}

pub fn print_report(r: &MorphReport) {
    println!("reference {:?}, alpha {}, N_same {}, N_diff {}", r.reference, r.alpha, r.n_same, r.n_diff);
    for p in [&r.max_accuracy, &r.far_point] {
        println!(
            "  {:?}: acc_morph same {} diff {} | diff side1 {} side2 {} | verification {:.1}",
            p.rule,
            pct(p.same.as_ref(), |m| m.acc_morph),
            pct(p.diff.as_ref(), |m| m.acc_morph),
            pct(p.diff.as_ref(), |m| m.acc_side1),
            pct(p.diff.as_ref(), |m| m.acc_side2),
            p.verification_accuracy
        );
    }
}

/// Consolidated metrics plus plot data: `metrics.json`, `scatter.csv`,
/// `thresholds.json` and, when present in the run, `sweep.csv`.
pub fn write_report(run_dir: &Path, out: &Path) -> Result<PathBuf> {
    let eval_path = run_dir.join("evaluation.json");
    if !eval_path.exists() {
        bail!(Data, "{} has no evaluation.json; run evaluate first", run_dir.display());
    }
    let report: MorphReport = serde_json::from_slice(&std::fs::read(&eval_path)?)?;
    let dir = out.join("report");
    std::fs::create_dir_all(&dir)?;
    let summary = |p: &protocol::OperatingPoint| {
        serde_json::json!({
            "rule": p.rule,
            "verification_accuracy": p.verification_accuracy,
            "same": p.same,
            "diff": p.diff,
        })
    };
    let mut metrics = serde_json::json!({
        "reference": report.reference,
        "alpha": report.alpha,
        "n_same": report.n_same,
        "n_diff": report.n_diff,
        "max_accuracy": summary(&report.max_accuracy),
        "far": summary(&report.far_point),
        "generator_hash": report.generator_hash,
        "encoder_gen_hash": report.encoder_gen_hash,
        "encoder_test_hash": report.encoder_test_hash,
        "protocol_hash": report.protocol_hash,
    });
    let triplet_path = run_dir.join("evaluation_triplet.json");
    if triplet_path.exists() {
        let t: MorphReport = serde_json::from_slice(&std::fs::read(&triplet_path)?)?;
        metrics["triplet"] = serde_json::json!({
            "max_accuracy": summary(&t.max_accuracy),
            "far": summary(&t.far_point),
        });
    }
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    protocol::write_scatter(&dir.join("scatter.csv"), &protocol::scatter_rows(&report))?;
    let thresholds = serde_json::json!({
        "max_accuracy": report.max_accuracy.thresholds,
        "far": report.far_point.thresholds,
        "far_rate": report.far,
    });
    std::fs::write(dir.join("thresholds.json"), serde_json::to_string_pretty(&thresholds)?)?;
    let sweep = run_dir.join("sweep.csv");
    if sweep.exists() {
        std::fs::copy(&sweep, dir.join("sweep.csv"))?;
    }
    Ok(dir)
}
