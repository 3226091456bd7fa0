//! Alternating generator/discriminator optimization.
//!
//! Training runs a pretrain phase where every pair is an image with itself
//! (α fixed at 0.5) followed by a finetune phase on cross-identity pairs.
//! The generator takes one Adam step per batch; the discriminator only on
//! every `disc_update_period`-th global step, on detached morphs. Both
//! learning rates decay by `lr_decay` every `decay_interval` epochs.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, DiscriminatorConfig};
use crate::alpha::AlphaWeights;
use crate::checkpoint;
use crate::dataset::FaceDataset;
use crate::encoder::{EncoderHandle, FaceFeatures};
use crate::error::{bail, Error, Result};
use crate::face::FaceImage;
use crate::losses::{self, LossBreakdown, LossComponents, LossWeights};
use crate::morphnet::{Generator, MorphNetConfig};
use crate::nn;
use crate::optim::{Adam, AdamParams};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AlphaMode {
    FixedHalf,
    /// `N(mean, std²)` redrawn until it falls inside `[0, 1]`.
    TruncatedGaussian { mean: f64, std: f64 },
}

impl Default for AlphaMode {
    fn default() -> Self {
        Self::TruncatedGaussian { mean: 0.5, std: 0.2 }
    }
}

pub fn sample_alpha(mode: &AlphaMode, rng: &mut Rng) -> f64 {
    match *mode {
        AlphaMode::FixedHalf => 0.5,
        AlphaMode::TruncatedGaussian { mean, std } => {
            let normal = Normal::new(mean, std).expect("validated distribution parameters");
            loop {
                let a = normal.sample(rng);
                if (0.0..=1.0).contains(&a) {
                    return a;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_faces: usize,
    pub identities_per_batch: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub disc_update_period: usize,
    /// Distribution of α in the finetune phase; pretraining always uses 0.5.
    pub alpha_mode: AlphaMode,
    /// Draw α independently for every pair instead of once per batch.
    pub alpha_per_pair: bool,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Batches per epoch; `None` means one pass worth of face slots.
    pub batches_per_epoch: Option<usize>,
    /// Write a checkpoint every this many epochs (0 disables periodic ones).
    pub checkpoint_every: usize,
    /// Walk the schedule and batch sampler without running any network.
    pub dry_run: bool,
    pub generator: MorphNetConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 5,
            finetune_epochs: 10,
            batch_faces: 32,
            identities_per_batch: 16,
            gen_lr: 1e-4,
            disc_lr: 1e-5,
            lr_decay: 0.5,
            decay_interval: 3,
            disc_update_period: 4,
            alpha_mode: AlphaMode::default(),
            alpha_per_pair: false,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batches_per_epoch: None,
            checkpoint_every: 1,
            dry_run: false,
            generator: MorphNetConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Laptop-sized run on an 8-identity synthetic set: 1 + 2 epochs of 40
    /// batches, channel widths divided by `scale`, 16 faces from 8 identities
    /// per batch. The AAD mask passes the normalized activation through where
    /// it is closed. Loss weights favour identity, and the style weight is
    /// rescaled for the small encoder whose Gram entries are orders of
    /// magnitude larger.
    pub fn desk(encoder: &crate::encoder::EncoderConfig, scale: usize) -> Self {
        let mut generator = MorphNetConfig::for_encoder(encoder, scale);
        generator.mask_mode = crate::morphnet::MaskMode::PassThrough;
        Self {
            pretrain_epochs: 1,
            finetune_epochs: 2,
            batch_faces: 16,
            identities_per_batch: 8,
            gen_lr: 1e-3,
            disc_lr: 5e-5,
            batches_per_epoch: Some(40),
            loss_weights: LossWeights { adv: 0.1, id: 10.0, per: 0.1, style: 1e-5 },
            generator,
            discriminator: DiscriminatorConfig::scaled(scale),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_faces != 2 * self.identities_per_batch {
            bail!(
                Config,
                "batch_faces ({}) must be twice identities_per_batch ({})",
                self.batch_faces,
                self.identities_per_batch
            );
        }
        if self.identities_per_batch < 2 {
            bail!(Config, "a batch needs at least 2 identities");
        }
        if self.pretrain_epochs + self.finetune_epochs == 0 {
            bail!(Config, "no epochs to run");
        }
        for (name, v) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr), ("lr_decay", self.lr_decay)] {
            if !(v > 0.0) || !v.is_finite() {
                bail!(Config, "{name} must be positive, got {v}");
            }
        }
        if self.decay_interval == 0 || self.disc_update_period == 0 || self.batches_per_epoch == Some(0) {
            bail!(Config, "decay interval, discriminator period and batches per epoch must be positive");
        }
        if let AlphaMode::TruncatedGaussian { mean, std } = self.alpha_mode {
            if !(std > 0.0) || !std.is_finite() || !(0.0..=1.0).contains(&mean) {
                bail!(Config, "truncated gaussian needs std > 0 and mean in [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            bail!(Config, "adam betas must lie in [0, 1)");
        }
        self.loss_weights.validate()?;
        self.generator.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.finetune_epochs
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Finetune
        }
    }

    /// `(generator, discriminator)` learning rates for an epoch.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let factor = self.lr_decay.powi((epoch / self.decay_interval) as i32);
        (self.gen_lr * factor, self.disc_lr * factor)
    }

    pub fn disc_updates_at(&self, global_step: u64) -> bool {
        global_step % self.disc_update_period as u64 == 0
    }

    fn batches_for(&self, num_images: usize) -> usize {
        self.batches_per_epoch.unwrap_or_else(|| num_images.div_ceil(self.batch_faces).max(1))
    }
}

/// Pairs of dataset positions fed to the generator in one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub phase: Phase,
    pub pairs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn face_slots(&self) -> usize {
        2 * self.pairs.len()
    }

    pub fn distinct_images(&self) -> HashSet<usize> {
        self.pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// Draws batches of `K` pairs, i.e. `2K` face slots, covering exactly `K`
/// identities.
///
/// Images are taken round-robin from per-identity shuffled lists.
/// Pretraining pairs one image of each chosen identity with itself.
/// Finetuning draws two images per identity and pairs the first image of
/// the j-th chosen identity with the second image of the (j+1)-th, so every
/// pair crosses identities and every identity fills two slots.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    groups: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    identity_order: Vec<usize>,
    identity_cursor: usize,
    per_batch: usize,
}

impl BatchSampler {
    pub fn new(groups: Vec<Vec<usize>>, identities_per_batch: usize) -> Result<Self> {
        if groups.iter().any(|g| g.is_empty()) {
            bail!(Data, "identity without images");
        }
        if groups.len() < identities_per_batch {
            bail!(
                Config,
                "batches need {identities_per_batch} identities but the dataset has {}",
                groups.len()
            );
        }
        let n = groups.len();
        Ok(Self {
            cursors: vec![0; n],
            identity_order: (0..n).collect(),
            identity_cursor: n,
            groups,
            per_batch: identities_per_batch,
        })
    }

    fn next_identities(&mut self, rng: &mut Rng) -> Vec<usize> {
        let mut chosen = Vec::with_capacity(self.per_batch);
        while chosen.len() < self.per_batch {
            if self.identity_cursor == self.identity_order.len() {
                self.identity_order.shuffle(rng);
                self.identity_cursor = 0;
            }
            let id = self.identity_order[self.identity_cursor];
            self.identity_cursor += 1;
            if !chosen.contains(&id) {
                chosen.push(id);
            }
        }
        chosen
    }

    fn next_image(&mut self, id: usize, rng: &mut Rng) -> usize {
        let g = &mut self.groups[id];
        if self.cursors[id] == 0 {
            g.shuffle(rng);
        }
        let img = g[self.cursors[id]];
        self.cursors[id] = (self.cursors[id] + 1) % g.len();
        img
    }

    pub fn next_batch(&mut self, phase: Phase, rng: &mut Rng) -> Batch {
        let ids = self.next_identities(rng);
        let firsts: Vec<usize> = ids.iter().map(|&id| self.next_image(id, rng)).collect();
        let seconds: Vec<usize> = match phase {
            Phase::Pretrain => Vec::new(),
            Phase::Finetune => ids.iter().map(|&id| self.next_image(id, rng)).collect(),
        };
        let pairs = match phase {
            Phase::Pretrain => firsts.iter().map(|&x| (x, x)).collect(),
            Phase::Finetune => {
                let k = ids.len();
                (0..k).map(|j| (firsts[j], seconds[(j + 1) % k])).collect()
            }
        };
        Batch { phase, pairs }
    }
}

/// One row of the loss log. Loss fields are empty in dry runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub id: Option<f64>,
    pub per: Option<f64>,
    pub style: Option<f64>,
    pub total: Option<f64>,
    pub alpha: f64,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub disc_updated: u8,
    pub n_pairs: usize,
    pub n_face_slots: usize,
    pub n_images: usize,
    pub n_identities: usize,
    pub pairs_same_image: usize,
    pub pairs_same_identity: usize,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?)
}

/// Live training state: networks, optimizers and the random streams.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    encoder: &'a EncoderHandle,
    dataset: &'a FaceDataset,
    labels: Vec<usize>,
    pub generator: Generator,
    pub discriminator: Discriminator,
    gen_opt: Adam,
    disc_opt: Adam,
    sampler: BatchSampler,
    batch_rng: Rng,
    alpha_rng: Rng,
    features: HashMap<usize, FaceFeatures>,
    pub epoch: usize,
    pub global_step: u64,
    pub history: Vec<LogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, encoder: &'a EncoderHandle, dataset: &'a FaceDataset) -> Result<Self> {
        config.validate()?;
        let enc = encoder.config();
        if config.generator.feature_dim != enc.feature_dim || config.generator.f4_channels != enc.f4_channels {
            bail!(Config, "generator conditioning does not match the encoder taps");
        }
        let groups: Vec<Vec<usize>> = dataset.index.groups().into_iter().map(|(_, g)| g).collect();
        let sampler = BatchSampler::new(groups, config.identities_per_batch)?;
        let seed = config.seed;
        let generator = Generator::init(&config.generator, rng::derive_seed(seed, "generator"), DType::F32)?;
        let discriminator = Discriminator::init(&config.discriminator, rng::derive_seed(seed, "discriminator"), DType::F32)?;
        let adam = |lr| AdamParams { lr, beta1: config.adam_beta1, beta2: config.adam_beta2, ..Default::default() };
        let (g_lr, d_lr) = config.learning_rates(0);
        let gen_opt = Adam::new(generator.params().trainable().map(|(_, v)| v), adam(g_lr))?;
        let disc_opt = Adam::new(discriminator.params().trainable().map(|(_, v)| v), adam(d_lr))?;
        Ok(Self {
            encoder,
            dataset,
            labels: dataset.index.labels(),
            generator,
            discriminator,
            gen_opt,
            disc_opt,
            sampler,
            batch_rng: rng::stream(seed, "batches"),
            alpha_rng: rng::stream(seed, "alpha"),
            features: HashMap::new(),
            epoch: 0,
            global_step: 0,
            history: Vec::new(),
            config,
        })
    }

    pub fn next_batch(&mut self, phase: Phase) -> Batch {
        self.sampler.next_batch(phase, &mut self.batch_rng)
    }

    /// Per-pair α for a batch of the given phase.
    pub fn draw_alphas(&mut self, phase: Phase, n: usize) -> Vec<f64> {
        let mode = match phase {
            Phase::Pretrain => AlphaMode::FixedHalf,
            Phase::Finetune => self.config.alpha_mode,
        };
        if self.config.alpha_per_pair {
            (0..n).map(|_| sample_alpha(&mode, &mut self.alpha_rng)).collect()
        } else {
            vec![sample_alpha(&mode, &mut self.alpha_rng); n]
        }
    }

    fn encode_cached(&mut self, positions: &[usize]) -> Result<FaceFeatures> {
        let missing: Vec<usize> = {
            let mut seen = HashSet::new();
            positions.iter().copied().filter(|p| !self.features.contains_key(p) && seen.insert(*p)).collect()
        };
        if !missing.is_empty() {
            let faces: Vec<&FaceImage> = missing.iter().map(|&p| &self.dataset.images[p]).collect();
            let feats = self.encoder.encode_many(&faces, 32)?.detach();
            for (k, &p) in missing.iter().enumerate() {
                self.features.insert(p, feats.get(k)?);
            }
        }
        FaceFeatures::cat(&positions.iter().map(|p| &self.features[p]).collect::<Vec<_>>())
    }

    fn pixels(&self, positions: &[usize]) -> Result<Tensor> {
        FaceImage::batch(&positions.iter().map(|&p| &self.dataset.images[p]).collect::<Vec<_>>(), DType::F32)
    }

    /// Generator objective on a batch: `(total, components, morphs)`.
    fn generator_objective(&mut self, batch: &Batch, w: &AlphaWeights) -> Result<(Tensor, LossComponents, Tensor)> {
        let (p1, p2): (Vec<usize>, Vec<usize>) = batch.pairs.iter().copied().unzip();
        let f1 = self.encode_cached(&p1)?;
        let f2 = self.encode_cached(&p2)?;
        let x_m = self.generator.forward(&f1, &f2, w, true)?;
        let f_m = self.encoder.forward(&x_m)?;
        let adv_g = losses::adv_generator(&self.discriminator.forward(&x_m, false)?)?;
        let id = losses::identity(&f_m.f, &f1.f, &f2.f, w)?;
        let (m1, m2, mm) = (f1.loss_maps(), f2.loss_maps(), f_m.loss_maps());
        let per = losses::perceptual(&m1, &m2, &mm, w)?;
        let style = losses::style(&m1, &m2, &mm, w)?;
        let lw = &self.config.loss_weights;
        let total = (adv_g.affine(lw.adv, 0.0)?
            + id.affine(lw.id, 0.0)?
            + per.affine(lw.per, 0.0)?
            + style.affine(lw.style, 0.0)?)?;
        let components = LossComponents {
            adv_g: nn::scalar(&adv_g)?,
            id: nn::scalar(&id)?,
            per: nn::scalar(&per)?,
            style: nn::scalar(&style)?,
        };
        Ok((total, components, x_m))
    }

    fn discriminator_objective(&self, batch: &Batch, x_m: &Tensor) -> Result<Tensor> {
        let (p1, p2): (Vec<usize>, Vec<usize>) = batch.pairs.iter().copied().unzip();
        let d_m = self.discriminator.forward(&x_m.detach(), true)?;
        let d_1 = self.discriminator.forward(&self.pixels(&p1)?, true)?;
        let d_2 = self.discriminator.forward(&self.pixels(&p2)?, true)?;
        losses::adv_discriminator(&d_m, &d_1, &d_2)
    }

    /// Gradients of one generator and one discriminator objective on a
    /// batch, without applying any update.
    pub fn inspect_gradients(&mut self, batch: &Batch, alphas: &[f64]) -> Result<(GradStore, GradStore)> {
        let w = AlphaWeights::new(alphas)?;
        let (total, _, x_m) = self.generator_objective(batch, &w)?;
        let g = total.backward()?;
        let d = self.discriminator_objective(batch, &x_m)?.backward()?;
        Ok((g, d))
    }

    /// One optimization step. Returns the loss breakdown and whether the
    /// discriminator was updated.
    pub fn train_step(&mut self, batch: &Batch, alphas: &[f64]) -> Result<(LossBreakdown, bool)> {
        let w = AlphaWeights::new(alphas)?;
        let (total, components, x_m) = self.generator_objective(batch, &w)?;
        let mut breakdown = losses::loss_total(components, &self.config.loss_weights)?;
        let total_value = nn::scalar(&total)?;
        if !total_value.is_finite() {
            bail!(Numeric, "non-finite generator loss at step {}: {:?}", self.global_step, breakdown);
        }
        breakdown.total = total_value;
        self.gen_opt.step(&total.backward()?)?;

        let update_d = self.config.disc_updates_at(self.global_step);
        if update_d {
            let loss_d = self.discriminator_objective(batch, &x_m)?;
            let v = nn::scalar(&loss_d)?;
            if !v.is_finite() {
                bail!(Numeric, "non-finite discriminator loss at step {}", self.global_step);
            }
            breakdown.adv_d = Some(v);
            self.disc_opt.step(&loss_d.backward()?)?;
        }
        Ok((breakdown, update_d))
    }

    fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        let (g, d) = self.config.learning_rates(epoch);
        self.gen_opt.set_learning_rate(g);
        self.disc_opt.set_learning_rate(d);
    }

    fn log_row(&self, batch: &Batch, alphas: &[f64], losses: Option<&LossBreakdown>, disc_updated: bool) -> LogRow {
        let images = batch.distinct_images();
        let identities: HashSet<usize> = images.iter().map(|&p| self.labels[p]).collect();
        let same_identity = batch.pairs.iter().filter(|(a, b)| self.labels[*a] == self.labels[*b]).count();
        LogRow {
            step: self.global_step,
            epoch: self.epoch,
            phase: batch.phase.as_str().to_string(),
            adv_g: losses.map(|l| l.adv_g),
            adv_d: losses.and_then(|l| l.adv_d),
            id: losses.map(|l| l.id),
            per: losses.map(|l| l.per),
            style: losses.map(|l| l.style),
            total: losses.map(|l| l.total),
            alpha: alphas.iter().sum::<f64>() / alphas.len() as f64,
            gen_lr: self.gen_opt.learning_rate(),
            disc_lr: self.disc_opt.learning_rate(),
            disc_updated: u8::from(disc_updated),
            n_pairs: batch.pairs.len(),
            n_face_slots: batch.face_slots(),
            n_images: images.len(),
            n_identities: identities.len(),
            pairs_same_image: batch.pairs.iter().filter(|(a, b)| a == b).count(),
            pairs_same_identity: same_identity,
        }
    }

    /// Runs one epoch and appends its rows to the history.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<()> {
        self.set_epoch(epoch);
        let phase = self.config.phase_of(epoch);
        for _ in 0..self.config.batches_for(self.dataset.images.len()) {
            let batch = self.next_batch(phase);
            let alphas = self.draw_alphas(phase, batch.pairs.len());
            let row = if self.config.dry_run {
                let updated = self.config.disc_updates_at(self.global_step);
                self.log_row(&batch, &alphas, None, updated)
            } else {
                let (losses, updated) = self.train_step(&batch, &alphas)?;
                self.log_row(&batch, &alphas, Some(&losses), updated)
            };
            self.history.push(row);
            self.global_step += 1;
        }
        Ok(())
    }
}

/// Files produced by [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<LogRow>,
    pub generator_path: PathBuf,
    pub generator_hash: String,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SeedRecord<'a> {
    root_seed: u64,
    streams: Vec<(&'a str, u64)>,
}

#[derive(Debug, Serialize)]
struct AbortSnapshot<'a> {
    epoch: usize,
    global_step: u64,
    error: String,
    recent: &'a [LogRow],
}

/// Full training schedule with run-directory outputs: `config.json`,
/// `seed.json`, `loss_log.csv`, `checkpoints/` and `generator.fmck`.
pub fn run_training(
    config: &TrainConfig,
    dataset: &FaceDataset,
    encoder: &EncoderHandle,
    run_dir: &Path,
) -> Result<TrainArtifacts> {
    let encoder_hash = encoder.hash()?;
    let mut trainer = Trainer::new(config.clone(), encoder, dataset)?;
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    let labels = ["generator", "discriminator", "batches", "alpha"];
    let record = SeedRecord {
        root_seed: config.seed,
        streams: labels.iter().map(|l| (*l, rng::derive_seed(config.seed, l))).collect(),
    };
    std::fs::write(run_dir.join("seed.json"), serde_json::to_string_pretty(&record)?)?;

    let log_path = run_dir.join("loss_log.csv");
    let mut checkpoints = Vec::new();
    for epoch in 0..config.total_epochs() {
        if let Err(e) = trainer.run_epoch(epoch) {
            if matches!(e, Error::Numeric(_)) {
                let tail = trainer.history.len().saturating_sub(8);
                let snap = AbortSnapshot {
                    epoch: trainer.epoch,
                    global_step: trainer.global_step,
                    error: e.to_string(),
                    recent: &trainer.history[tail..],
                };
                let mut f = File::create(run_dir.join("abort.json"))?;
                f.write_all(serde_json::to_string_pretty(&snap)?.as_bytes())?;
                write_log(&log_path, &trainer.history)?;
            }
            return Err(e);
        }
        write_log(&log_path, &trainer.history)?;
        let last = epoch + 1 == config.total_epochs();
        if !config.dry_run && config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && !last {
            let dir = run_dir.join("checkpoints");
            let g = dir.join(format!("generator_e{:03}.fmck", epoch + 1));
            let d = dir.join(format!("discriminator_e{:03}.fmck", epoch + 1));
            checkpoint::save_generator(&g, &trainer.generator)?;
            checkpoint::save_discriminator(&d, &trainer.discriminator)?;
            checkpoints.extend([g, d]);
        }
    }
    if encoder.hash()? != encoder_hash {
        bail!(Numeric, "encoder weights changed during training");
    }
    let generator_path = run_dir.join("generator.fmck");
    let generator_hash = checkpoint::save_generator(&generator_path, &trainer.generator)?;
    checkpoint::save_discriminator(&run_dir.join("discriminator.fmck"), &trainer.discriminator)?;
    Ok(TrainArtifacts { run_dir: run_dir.to_path_buf(), log_path, log: trainer.history, generator_path, generator_hash, checkpoints })
}

/// Mean total generator loss per epoch, skipping dry-run rows.
pub fn epoch_mean_totals(rows: &[LogRow]) -> Vec<(usize, f64)> {
    let mut acc: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        let Some(t) = r.total else { continue };
        match acc.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += t;
                *n += 1;
            }
            _ => acc.push((r.epoch, t, 1)),
        }
    }
    acc.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}
