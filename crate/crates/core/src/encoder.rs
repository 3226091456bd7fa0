//! Face feature extractor: identity vector plus tapped intermediate maps.
//!
//! The backbone is a small residual CNN whose stages emit a 14×14 map
//! (`f3`), two 7×7 maps (`f4`, `f5`) and a pooled identity vector `f`.
//! Channel counts per tap come from [`EncoderConfig`]; the defaults follow
//! the production shapes, while [`EncoderConfig::desk`] is small enough to
//! train on synthetic faces in minutes. Any trained handle can play the
//! role of the generation encoder or the evaluation encoder.

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::face::{FaceImage, FACE_SIZE};
use crate::nn::{self, Conv2d, Linear};
use crate::optim::{Adam, AdamParams};
use crate::params::{Init, ParamBuilder, ParamStore, View};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stage1_channels: usize,
    pub f3_channels: usize,
    pub f4_channels: usize,
    pub f5_channels: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 64,
            stage1_channels: 256,
            f3_channels: 512,
            f4_channels: 1024,
            f5_channels: 2048,
            feature_dim: 256,
        }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            stage1_channels: 24,
            f3_channels: 32,
            f4_channels: 48,
            f5_channels: 64,
            feature_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.stem_channels,
            self.stage1_channels,
            self.f3_channels,
            self.f4_channels,
            self.f5_channels,
            self.feature_dim,
        ];
        if all.iter().any(|&c| c == 0) {
            bail!(Config, "encoder channel counts must be positive");
        }
        Ok(())
    }

    pub fn f3_shape(&self) -> [usize; 3] {
        [self.f3_channels, 14, 14]
    }

    pub fn f4_shape(&self) -> [usize; 3] {
        [self.f4_channels, 7, 7]
    }

    pub fn f5_shape(&self) -> [usize; 3] {
        [self.f5_channels, 7, 7]
    }
}

/// Features of a batch of faces from a single encoder pass.
///
/// `f` is `(N, D)`; `f3`, `f4`, `f5` are `(N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct FaceFeatures {
    pub f: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
    pub f5: Tensor,
}

impl FaceFeatures {
    pub fn len(&self) -> usize {
        self.f.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps used by the perceptual and style losses.
    pub fn loss_maps(&self) -> [Tensor; 2] {
        [self.f4.clone(), self.f5.clone()]
    }

    pub fn detach(&self) -> Self {
        Self { f: self.f.detach(), f3: self.f3.detach(), f4: self.f4.detach(), f5: self.f5.detach() }
    }

    pub fn get(&self, i: usize) -> Result<Self> {
        Ok(Self {
            f: self.f.narrow(0, i, 1)?,
            f3: self.f3.narrow(0, i, 1)?,
            f4: self.f4.narrow(0, i, 1)?,
            f5: self.f5.narrow(0, i, 1)?,
        })
    }

    pub fn cat(items: &[&FaceFeatures]) -> Result<Self> {
        if items.is_empty() {
            bail!(Validation, "no features to concatenate");
        }
        let pick = |g: fn(&FaceFeatures) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&items.iter().map(|x| g(x)).collect::<Vec<_>>(), 0)?)
        };
        Ok(Self { f: pick(|x| &x.f)?, f3: pick(|x| &x.f3)?, f4: pick(|x| &x.f4)?, f5: pick(|x| &x.f5)? })
    }

    /// Identity vectors as plain rows.
    pub fn vectors(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.f.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Option<Conv2d>,
}

impl ResBlock {
    fn new(mut pb: ParamBuilder<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        let conv1 = Conv2d::new(pb.pp("conv1"), c_in, c_out, 3, 1, 1)?;
        let conv2 = Conv2d::new(pb.pp("conv2"), c_out, c_out, 3, 1, 1)?;
        let proj = if c_in != c_out { Some(Conv2d::new(pb.pp("proj"), c_in, c_out, 1, 1, 0)?) } else { None };
        Ok(Self { conv1, conv2, proj })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let skip = match &self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h.affine(0.5, 0.0)? + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: Conv2d,
    down1: Conv2d,
    res1: ResBlock,
    down2: Conv2d,
    res2: ResBlock,
    down3: Conv2d,
    res3: ResBlock,
    res4: ResBlock,
    embed: Linear,
}

impl Backbone {
    fn new(mut pb: ParamBuilder<'_>, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            stem: Conv2d::new(pb.pp("stem"), 3, cfg.stem_channels, 3, 2, 1)?,
            down1: Conv2d::new(pb.pp("down1"), cfg.stem_channels, cfg.stage1_channels, 3, 2, 1)?,
            res1: ResBlock::new(pb.pp("res1"), cfg.stage1_channels, cfg.stage1_channels)?,
            down2: Conv2d::new(pb.pp("down2"), cfg.stage1_channels, cfg.f3_channels, 3, 2, 1)?,
            res2: ResBlock::new(pb.pp("res2"), cfg.f3_channels, cfg.f3_channels)?,
            down3: Conv2d::new(pb.pp("down3"), cfg.f3_channels, cfg.f4_channels, 3, 2, 1)?,
            res3: ResBlock::new(pb.pp("res3"), cfg.f4_channels, cfg.f4_channels)?,
            res4: ResBlock::new(pb.pp("res4"), cfg.f4_channels, cfg.f5_channels)?,
            embed: Linear::new(pb.pp("embed"), cfg.f5_channels, cfg.feature_dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<FaceFeatures> {
        let h = self.stem.forward(x)?.relu()?; // 56
        let h = self.res1.forward(&self.down1.forward(&h)?.relu()?)?; // 28
        let f3 = self.res2.forward(&self.down2.forward(&h)?.relu()?)?; // 14
        let f4 = self.res3.forward(&self.down3.forward(&f3)?.relu()?)?; // 7
        let f5 = self.res4.forward(&f4)?;
        let pooled = f5.mean((2, 3))?;
        let f = self.embed.forward(&pooled)?;
        Ok(FaceFeatures { f, f3, f4, f5 })
    }
}

/// A loaded encoder with frozen weights.
#[derive(Debug, Clone)]
pub struct EncoderHandle {
    config: EncoderConfig,
    params: ParamStore,
    net: Backbone,
}

impl EncoderHandle {
    /// Randomly initialized encoder.
    pub fn init(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut r = rng::stream(seed, "encoder-init");
        Backbone::new(ParamBuilder::init(&mut params, &mut r), config)?;
        Self::from_params(config.clone(), params)
    }

    pub fn from_params(config: EncoderConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        let net = Backbone::new(ParamBuilder::load(&mut params, View::Frozen), &config)?;
        Ok(Self { config, params, net })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn hash(&self) -> Result<String> {
        self.params.hash()
    }

    /// Batched forward pass on `(N, 3, 112, 112)` pixels. Gradients flow
    /// to the input but never to the encoder weights.
    pub fn forward(&self, pixels: &Tensor) -> Result<FaceFeatures> {
        let (_, c, h, w) = pixels.dims4()?;
        if c != 3 || h != FACE_SIZE || w != FACE_SIZE {
            bail!(Shape, "encoder expects (N, 3, 112, 112), got {:?}", pixels.dims());
        }
        self.net.forward(&pixels.to_dtype(self.dtype())?)
    }

    /// Encodes one face; the result has a leading batch dimension of 1.
    pub fn encode(&self, x: &FaceImage) -> Result<FaceFeatures> {
        let feats = self.forward(&x.tensor().unsqueeze(0)?)?;
        let f = nn::to_vec_f64(&feats.f)?;
        if f.iter().any(|v| !v.is_finite()) || f.iter().all(|v| *v == 0.0) {
            bail!(Validation, "encoder produced a degenerate identity vector");
        }
        Ok(feats)
    }

    /// Encodes many faces in chunks, returning features with the batch
    /// dimension in input order.
    pub fn encode_many(&self, faces: &[&FaceImage], chunk: usize) -> Result<FaceFeatures> {
        let mut parts = Vec::new();
        for group in faces.chunks(chunk.max(1)) {
            parts.push(self.forward(&FaceImage::batch(group, self.dtype())?)?);
        }
        FaceFeatures::cat(&parts.iter().collect::<Vec<_>>())
    }
}

/// Cosine distance `1 - <a,b> / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Shape, "feature length mismatch: {} vs {}", a.len(), b.len());
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        bail!(Domain, "cosine distance of a zero or non-finite vector");
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Row-wise L2 normalization of an `(N, D)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each identity's images held out for accuracy measurement.
    pub holdout_fraction: f64,
    /// Scale applied to cosine logits of the normalized softmax classifier.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 16, lr: 3e-3, holdout_fraction: 0.2, logit_scale: 16.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    pub identities: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Trains the desk-scale backbone as an identity classifier with a
/// cosine-softmax head and returns the frozen encoder.
///
/// `labels[i]` is the identity of `images[i]`; identities are dense
/// `0..n`.
pub fn train_desk_encoder(
    images: &[FaceImage],
    labels: &[usize],
    config: &EncoderConfig,
    train: &EncoderTrainConfig,
) -> Result<(EncoderHandle, EncoderTrainReport)> {
    if images.len() != labels.len() {
        bail!(Validation, "{} images but {} labels", images.len(), labels.len());
    }
    let n_ids = labels.iter().copied().max().map_or(0, |m| m + 1);
    if n_ids < 2 {
        bail!(Config, "encoder training needs at least 2 identities, got {n_ids}");
    }
    if train.batch_size == 0 || train.epochs == 0 || train.lr <= 0.0 {
        bail!(Config, "encoder training needs positive epochs, batch size and learning rate");
    }
    config.validate()?;

    let mut split_rng = rng::stream(train.seed, "encoder-split");
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for id in 0..n_ids {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == id).collect();
        members.shuffle(&mut split_rng);
        let hold = if members.len() >= 2 {
            ((members.len() as f64 * train.holdout_fraction).round() as usize).clamp(1, members.len() - 1)
        } else {
            0
        };
        held_idx.extend_from_slice(&members[..hold]);
        train_idx.extend_from_slice(&members[hold..]);
    }

    let dtype = DType::F32;
    let mut params = ParamStore::new(dtype);
    let mut init_rng = rng::stream(train.seed, "encoder-init");
    let (net, head) = {
        let mut pb = ParamBuilder::init(&mut params, &mut init_rng);
        let net = Backbone::new(pb.pp("backbone"), config)?;
        let head = pb.pp("head").weight("weight", &[n_ids, config.feature_dim], Init::Normal(1.0))?;
        (net, head)
    };
    let mut opt = Adam::new(params.trainable().map(|(_, v)| v), AdamParams { lr: train.lr, ..Default::default() })?;

    let logits_of = |feats: &FaceFeatures| -> Result<Tensor> {
        let f = l2_normalize(&feats.f)?;
        let w = l2_normalize(&head)?;
        Ok(f.matmul(&w.t()?)?.affine(train.logit_scale, 0.0)?)
    };

    let mut order_rng = rng::stream(train.seed, "encoder-order");
    let mut final_loss = f64::NAN;
    for _ in 0..train.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(train.batch_size) {
            let batch = FaceImage::batch(&chunk.iter().map(|&i| &images[i]).collect::<Vec<_>>(), dtype)?;
            let onehot: Vec<f32> = chunk
                .iter()
                .flat_map(|&i| (0..n_ids).map(move |c| if c == labels[i] { 1.0 } else { 0.0 }))
                .collect();
            let onehot = Tensor::from_vec(onehot, (chunk.len(), n_ids), &nn::cpu())?;
            let logp = nn::log_softmax(&logits_of(&net.forward(&batch)?)?)?;
            let loss = (logp * onehot)?.sum_all()?.affine(-1.0 / chunk.len() as f64, 0.0)?;
            final_loss = nn::scalar(&loss)?;
            if !final_loss.is_finite() {
                bail!(Numeric, "encoder training loss became non-finite");
            }
            opt.step(&loss.backward()?)?;
        }
    }

    // Drop the classifier head; only the backbone is kept.
    let backbone = params.extract_prefix("backbone.")?;
    let handle = EncoderHandle::from_params(config.clone(), backbone)?;

    let heldout_accuracy = if held_idx.is_empty() {
        f64::NAN
    } else {
        let faces: Vec<&FaceImage> = held_idx.iter().map(|&i| &images[i]).collect();
        let feats = handle.encode_many(&faces, 32)?;
        let pred = logits_of(&feats)?.argmax_keepdim(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?;
        let correct = held_idx.iter().zip(&pred).filter(|(&i, &p)| labels[i] == p as usize).count();
        correct as f64 / held_idx.len() as f64
    };

    Ok((
        handle,
        EncoderTrainReport {
            identities: n_ids,
            train_images: train_idx.len(),
            heldout_images: held_idx.len(),
            heldout_accuracy,
            final_loss,
        },
    ))
}
