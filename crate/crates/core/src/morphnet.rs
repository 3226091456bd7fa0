//! The morph generator.
//!
//! A trainable latent `Z` (7×7) is decoded by five AAD residual blocks into
//! a 112×112 face. Each AAD layer normalizes its input, predicts a one
//! channel sigmoid mask and de-normalizes the map twice, once per input
//! face, through a single shared projection. The two de-normalized maps
//! are blended by α and gated by the mask:
//!
//! ```text
//! H_out = M ⊙ (α·A1 + (1 − α)·A2),   A_i = γ_i ⊙ H̄ + β_i
//! ```
//!
//! Because the projection is shared and the α weights come from
//! [`alpha::split`], `generate(A, B, α)` and `generate(B, A, 1 − α)` are
//! bitwise identical.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::alpha::{self, AlphaWeights};
use crate::encoder::{EncoderConfig, FaceFeatures};
use crate::error::{bail, Result};
use crate::face::{FaceImage, FACE_SIZE};
use crate::nn::{self, BatchNorm, Conv2d, Linear};
use crate::params::{Init, ParamBuilder, ParamStore, View};
use crate::rng;

pub const NUM_BLOCKS: usize = 5;
pub const LATENT_SIZE: usize = 7;
/// Initial projections start close to `γ = 1, β = 0`.
const PROJ_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `H_out = M ⊙ blend`.
    #[default]
    Literal,
    /// `H_out = (1 − M) ⊙ H̄ + M ⊙ blend`.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorphNetConfig {
    /// Channels of `Z` and of the first block; later blocks halve it.
    pub latent_channels: usize,
    pub feature_dim: usize,
    pub f4_channels: usize,
    pub z_std: f64,
    pub mask_mode: MaskMode,
}

impl Default for MorphNetConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            latent_channels: 512,
            feature_dim: enc.feature_dim,
            f4_channels: enc.f4_channels,
            z_std: 0.02,
            mask_mode: MaskMode::Literal,
        }
    }
}

impl MorphNetConfig {
    /// Conditioning shapes taken from an encoder, channels divided by `scale`.
    pub fn for_encoder(enc: &EncoderConfig, scale: usize) -> Self {
        Self {
            latent_channels: 512 / scale.max(1),
            feature_dim: enc.feature_dim,
            f4_channels: enc.f4_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels < 16 || self.latent_channels % 16 != 0 {
            bail!(Config, "latent channels must be a positive multiple of 16, got {}", self.latent_channels);
        }
        if self.feature_dim == 0 || self.f4_channels == 0 {
            bail!(Config, "conditioning dimensions must be positive");
        }
        if !(self.z_std > 0.0) {
            bail!(Config, "z_std must be positive");
        }
        Ok(())
    }

    /// `[c, c, c/2, c/4, c/8, c/16]`: input of block 1 followed by each block's output.
    pub fn channel_schedule(&self) -> [usize; NUM_BLOCKS + 1] {
        let c = self.latent_channels;
        [c, c, c / 2, c / 4, c / 8, c / 16]
    }

    pub fn f4_flat_dim(&self) -> usize {
        self.f4_channels * LATENT_SIZE * LATENT_SIZE
    }
}

/// Intermediate values of one AAD layer.
#[derive(Debug, Clone)]
pub struct AadOutput {
    pub h_bar: Tensor,
    pub mask: Tensor,
    pub a1: Tensor,
    pub a2: Tensor,
    pub out: Tensor,
}

/// `A = γ ⊙ H̄ + β` with `(γ, β)` an `(N, 2C)` projection output.
pub fn denormalize(h_bar: &Tensor, gamma_beta: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = h_bar.dims4()?;
    let (gn, gc) = gamma_beta.dims2()?;
    if gn != n || gc != 2 * c {
        bail!(Shape, "projection output {:?} does not match map with {c} channels", gamma_beta.dims());
    }
    let gamma = gamma_beta.narrow(1, 0, c)?.reshape((n, c, 1, 1))?;
    let beta = gamma_beta.narrow(1, c, c)?.reshape((n, c, 1, 1))?;
    Ok(h_bar.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// De-normalizes `h_bar` with the projection of a flattened condition.
pub fn aad_denormalize(h_bar: &Tensor, cond: &Tensor, proj: &Linear) -> Result<Tensor> {
    let flat = cond.flatten_from(1)?;
    if flat.dim(1)? != proj.in_dim() {
        bail!(Shape, "condition has {} features, projection expects {}", flat.dim(1)?, proj.in_dim());
    }
    denormalize(h_bar, &proj.forward(&flat)?)
}

/// `w1·a1 + w2·a2` per sample, evaluated as `(a1 + a2)/2 + (w1 − w2)/2 · (a1 − a2)`.
///
/// Both terms change sign together when the inputs and weights are swapped,
/// so the result is swap-invariant bitwise; equal inputs return the input
/// unchanged for every α, and the endpoints α ∈ {0, 1} select `a2`/`a1`
/// exactly.
pub fn blend_pair(a1: &Tensor, a2: &Tensor, weights: &AlphaWeights) -> Result<Tensor> {
    let n = a1.dim(0)?;
    if weights.len() != n || a2.dims() != a1.dims() {
        bail!(Shape, "blend operands {:?} / {:?} with {} weights", a1.dims(), a2.dims(), weights.len());
    }
    let rank = a1.rank();
    let mut shape = vec![1usize; rank];
    shape[0] = n;
    let dev = a1.device();
    let half_diff: Vec<f64> = weights.w1.iter().zip(&weights.w2).map(|(w1, w2)| (w1 - w2) * 0.5).collect();
    let d = Tensor::from_vec(half_diff, shape.as_slice(), dev)?.to_dtype(a1.dtype())?;
    let center = (a1 + a2)?.affine(0.5, 0.0)?;
    let mut out = center.add(&(a1 - a2)?.broadcast_mul(&d)?)?;
    let pick = |flags: Vec<u8>| -> Result<Option<Tensor>> {
        if flags.iter().all(|&f| f == 0) {
            return Ok(None);
        }
        Ok(Some(Tensor::from_vec(flags, shape.as_slice(), dev)?.broadcast_as(a1.shape())?))
    };
    if let Some(m) = pick(weights.w2.iter().map(|&w| u8::from(w == 0.0)).collect())? {
        out = m.where_cond(a1, &out)?;
    }
    if let Some(m) = pick(weights.w1.iter().map(|&w| u8::from(w == 0.0)).collect())? {
        out = m.where_cond(a2, &out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AadLayer {
    bn: BatchNorm,
    mask_conv: Conv2d,
    proj: Linear,
    channels: usize,
    mode: MaskMode,
}

impl AadLayer {
    pub fn new(mut pb: ParamBuilder<'_>, channels: usize, cond_dim: usize, mode: MaskMode) -> Result<Self> {
        let bn = BatchNorm::new(pb.pp("bn"), channels)?;
        let mask_conv = Conv2d::new(pb.pp("mask"), channels, 1, 3, 1, 1)?;
        let bias: Vec<f64> = (0..2 * channels).map(|i| if i < channels { 1.0 } else { 0.0 }).collect();
        let proj = Linear::with_init(pb.pp("proj"), cond_dim, 2 * channels, PROJ_GAIN, Init::Values(bias))?;
        Ok(Self { bn, mask_conv, proj, channels, mode })
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    fn check(&self, h: &Tensor, cond1: &Tensor, cond2: &Tensor, weights: &AlphaWeights) -> Result<()> {
        let (n, c, _, _) = h.dims4()?;
        if c != self.channels {
            bail!(Shape, "AAD layer expects {} channels, got {c}", self.channels);
        }
        if weights.len() != n || cond1.dim(0)? != n || cond2.dim(0)? != n {
            bail!(Shape, "batch size mismatch between map, conditions and alpha");
        }
        Ok(())
    }

    fn conditions(&self, cond1: &Tensor, cond2: &Tensor) -> Result<(Tensor, Tensor)> {
        let project = |c: &Tensor| -> Result<Tensor> {
            let flat = c.flatten_from(1)?;
            if flat.dim(1)? != self.proj.in_dim() {
                bail!(Shape, "condition has {} features, projection expects {}", flat.dim(1)?, self.proj.in_dim());
            }
            self.proj.forward(&flat)
        };
        Ok((project(cond1)?, project(cond2)?))
    }

    /// Blend of the two de-normalizations. `A_i` is affine in `(γ_i, β_i)`,
    /// so blending the projections and de-normalizing once gives
    /// `w1·A1 + w2·A2` without materializing either map.
    fn gate(&self, h_bar: &Tensor, gb1: &Tensor, gb2: &Tensor, weights: &AlphaWeights) -> Result<(Tensor, Tensor)> {
        let mask = nn::sigmoid(&self.mask_conv.forward(h_bar)?)?;
        let blend = denormalize(h_bar, &blend_pair(gb1, gb2, weights)?)?;
        let out = match self.mode {
            MaskMode::Literal => blend.broadcast_mul(&mask)?,
            MaskMode::PassThrough => (h_bar + (blend - h_bar)?.broadcast_mul(&mask)?)?,
        };
        Ok((mask, out))
    }

    /// Full AAD computation, returning every intermediate.
    pub fn forward_io(
        &self,
        h: &Tensor,
        cond1: &Tensor,
        cond2: &Tensor,
        weights: &AlphaWeights,
        train: bool,
    ) -> Result<AadOutput> {
        self.check(h, cond1, cond2, weights)?;
        let h_bar = self.bn.forward(h, train)?;
        let (gb1, gb2) = self.conditions(cond1, cond2)?;
        let a1 = denormalize(&h_bar, &gb1)?;
        let a2 = denormalize(&h_bar, &gb2)?;
        let (mask, out) = self.gate(&h_bar, &gb1, &gb2, weights)?;
        Ok(AadOutput { h_bar, mask, a1, a2, out })
    }

    pub fn blend(&self, h: &Tensor, cond1: &Tensor, cond2: &Tensor, weights: &AlphaWeights, train: bool) -> Result<Tensor> {
        self.check(h, cond1, cond2, weights)?;
        let h_bar = self.bn.forward(h, train)?;
        let (gb1, gb2) = self.conditions(cond1, cond2)?;
        Ok(self.gate(&h_bar, &gb1, &gb2, weights)?.1)
    }
}

#[derive(Debug, Clone)]
pub struct AadResBlock {
    aad1: AadLayer,
    conv1: Conv2d,
    aad2: AadLayer,
    conv2: Conv2d,
    shortcut: Option<(AadLayer, Conv2d)>,
    c_in: usize,
    c_out: usize,
}

impl AadResBlock {
    pub fn new(mut pb: ParamBuilder<'_>, c_in: usize, c_out: usize, cond_dim: usize, mode: MaskMode) -> Result<Self> {
        let aad1 = AadLayer::new(pb.pp("aad1"), c_in, cond_dim, mode)?;
        let conv1 = Conv2d::new(pb.pp("conv1"), c_in, c_in, 3, 1, 1)?;
        let aad2 = AadLayer::new(pb.pp("aad2"), c_in, cond_dim, mode)?;
        let conv2 = Conv2d::new(pb.pp("conv2"), c_in, c_out, 3, 1, 1)?;
        let shortcut = if c_in != c_out {
            Some((
                AadLayer::new(pb.pp("aad3"), c_in, cond_dim, mode)?,
                Conv2d::new(pb.pp("conv3"), c_in, c_out, 3, 1, 1)?,
            ))
        } else {
            None
        };
        Ok(Self { aad1, conv1, aad2, conv2, shortcut, c_in, c_out })
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.c_in, self.c_out)
    }

    pub fn forward(&self, h: &Tensor, cond1: &Tensor, cond2: &Tensor, w: &AlphaWeights, train: bool) -> Result<Tensor> {
        if h.dim(1)? != self.c_in {
            bail!(Config, "residual block expects {} input channels, got {}", self.c_in, h.dim(1)?);
        }
        let x = self.aad1.blend(h, cond1, cond2, w, train)?.relu()?;
        let x = self.conv1.forward(&x)?;
        let x = self.aad2.blend(&x, cond1, cond2, w, train)?.relu()?;
        let main = self.conv2.forward(&x)?;
        let skip = match &self.shortcut {
            Some((aad, conv)) => conv.forward(&aad.blend(h, cond1, cond2, w, train)?.relu()?)?,
            None => h.clone(),
        };
        Ok((main + skip)?)
    }
}

#[derive(Debug, Clone)]
struct MorphNet {
    z: Tensor,
    blocks: Vec<AadResBlock>,
    head3: Conv2d,
    head1: Conv2d,
}

impl MorphNet {
    fn new(mut pb: ParamBuilder<'_>, cfg: &MorphNetConfig) -> Result<Self> {
        let sched = cfg.channel_schedule();
        let z = pb.weight("z", &[1, sched[0], LATENT_SIZE, LATENT_SIZE], Init::Normal(cfg.z_std))?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for k in 0..NUM_BLOCKS {
            let cond_dim = if k == 0 { cfg.f4_flat_dim() } else { cfg.feature_dim };
            blocks.push(AadResBlock::new(pb.pp(format!("block{}", k + 1)), sched[k], sched[k + 1], cond_dim, cfg.mask_mode)?);
        }
        let last = sched[NUM_BLOCKS];
        let head3 = Conv2d::new(pb.pp("head3"), last, last, 3, 1, 1)?;
        let head1 = Conv2d::new(pb.pp("head1"), last, 3, 1, 1, 0)?;
        Ok(Self { z, blocks, head3, head1 })
    }
}

/// Clips to `[-1, 1]` in the forward pass while passing gradients through
/// unchanged, so saturated pixels can still be pulled back into range.
/// The value is exactly the clipped tensor: `x - detach(x)` is zero.
pub fn clip_straight_through(x: &Tensor) -> Result<Tensor> {
    let clipped = x.detach().clamp(-1.0f64, 1.0f64)?;
    Ok(clipped.add(&x.sub(&x.detach())?)?)
}

/// Generator parameters together with a network view over them.
#[derive(Debug, Clone)]
pub struct Generator {
    config: MorphNetConfig,
    params: ParamStore,
    net: MorphNet,
}

impl Generator {
    /// Deterministic initialization from `seed`; `Z ~ N(0, z_std²)`.
    pub fn init(config: &MorphNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut r = rng::stream(seed, "generator-init");
        MorphNet::new(ParamBuilder::init(&mut params, &mut r), config)?;
        Self::from_params(config.clone(), params)
    }

    /// Trainable view over existing parameters.
    pub fn from_params(config: MorphNetConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        let net = MorphNet::new(ParamBuilder::load(&mut params, View::Trainable), &config)?;
        Ok(Self { config, params, net })
    }

    pub fn config(&self) -> &MorphNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn hash(&self) -> Result<String> {
        self.params.hash()
    }

    pub fn blocks(&self) -> &[AadResBlock] {
        &self.net.blocks
    }

    pub fn latent(&self) -> &Tensor {
        &self.net.z
    }

    /// Batched generation: `(N, 3, 112, 112)` pixels clipped to `[-1, 1]`.
    ///
    /// Block 1 is conditioned on the flattened `f4` maps, blocks 2..5 on the
    /// identity vectors. In training mode batch-norm layers use batch
    /// statistics and update their running averages.
    pub fn forward(&self, feats1: &FaceFeatures, feats2: &FaceFeatures, weights: &AlphaWeights, train: bool) -> Result<Tensor> {
        let n = feats1.len();
        if feats2.len() != n || weights.len() != n {
            bail!(Shape, "generator batch mismatch: {n} vs {} features, {} alphas", feats2.len(), weights.len());
        }
        let dtype = self.params.dtype();
        let f4_dims = [self.config.f4_channels, LATENT_SIZE, LATENT_SIZE];
        for f in [feats1, feats2] {
            if f.f4.dims().len() != 4 || f.f4.dims()[1..] != f4_dims {
                bail!(Validation, "f4 tap must be {:?}, got {:?}", f4_dims, f.f4.dims());
            }
            if f.f.dims() != [n, self.config.feature_dim] {
                bail!(Validation, "identity vector must be ({n}, {}), got {:?}", self.config.feature_dim, f.f.dims());
            }
        }
        let m1 = feats1.f4.to_dtype(dtype)?.flatten_from(1)?;
        let m2 = feats2.f4.to_dtype(dtype)?.flatten_from(1)?;
        let v1 = feats1.f.to_dtype(dtype)?;
        let v2 = feats2.f.to_dtype(dtype)?;

        let c0 = self.config.channel_schedule()[0];
        let mut h = self.net.z.broadcast_as((n, c0, LATENT_SIZE, LATENT_SIZE))?;
        for (k, block) in self.net.blocks.iter().enumerate() {
            h = if k == 0 {
                block.forward(&h, &m1, &m2, weights, train)?
            } else {
                block.forward(&nn::upsample_bilinear2x(&h)?, &v1, &v2, weights, train)?
            };
        }
        let out = self.net.head1.forward(&self.net.head3.forward(&h)?)?;
        debug_assert_eq!(out.dims()[2], FACE_SIZE);
        clip_straight_through(&out)
    }

    /// Inference on a single pair with frozen batch-norm statistics.
    pub fn generate_morph(&self, feats1: &FaceFeatures, feats2: &FaceFeatures, alpha: f64) -> Result<FaceImage> {
        alpha::split(alpha)?;
        let w = AlphaWeights::uniform(alpha, 1)?;
        let out = self.forward(feats1, feats2, &w, false)?;
        FaceImage::new(out.get(0)?.detach())
    }
}
