//! Global discriminator: four convolutions (the first two strided) and a
//! fully connected sigmoid head.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::face::FACE_SIZE;
use crate::nn::{self, Conv2d, Linear};
use crate::params::{ParamBuilder, ParamStore, View};
use crate::rng;

/// Probabilities are kept inside `[EPS, 1 - EPS]` so both log terms stay finite.
pub const PROB_EPS: f64 = 1e-7;
const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub channels: [usize; 4],
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { channels: [64, 128, 256, 512], leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn scaled(scale: usize) -> Self {
        let d = Self::default();
        Self { channels: d.channels.map(|c| (c / scale.max(1)).max(1)), ..d }
    }

    /// Spatial size after each convolution: 112 → 56 → 28 → 27 → 26.
    pub fn spatial_sizes() -> [usize; 4] {
        let mut s = FACE_SIZE;
        let mut out = [0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            let stride = if i < 2 { 2 } else { 1 };
            s = (s + 2 - KERNEL) / stride + 1;
            *o = s;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Net {
    convs: Vec<Conv2d>,
    fc: Linear,
    slope: f64,
}

impl Net {
    fn new(mut pb: ParamBuilder<'_>, cfg: &DiscriminatorConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let stride = if i < 2 { 2 } else { 1 };
            convs.push(Conv2d::new(pb.pp(format!("conv{}", i + 1)), c_in, c, KERNEL, stride, 1)?);
            c_in = c;
        }
        let s = DiscriminatorConfig::spatial_sizes()[3];
        let fc = Linear::new(pb.pp("fc"), c_in * s * s, 1)?;
        Ok(Self { convs, fc, slope: cfg.leaky_slope })
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    net: Net,
    frozen: Net,
}

impl Discriminator {
    pub fn init(config: &DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.channels.iter().any(|&c| c == 0) {
            bail!(Config, "discriminator channels must be positive");
        }
        let mut params = ParamStore::new(dtype);
        let mut r = rng::stream(seed, "discriminator-init");
        Net::new(ParamBuilder::init(&mut params, &mut r), config)?;
        Self::from_params(config.clone(), params)
    }

    pub fn from_params(config: DiscriminatorConfig, mut params: ParamStore) -> Result<Self> {
        let net = Net::new(ParamBuilder::load(&mut params, View::Trainable), &config)?;
        let frozen = Net::new(ParamBuilder::load(&mut params, View::Frozen), &config)?;
        Ok(Self { config, params, net, frozen })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn hash(&self) -> Result<String> {
        self.params.hash()
    }

    /// Per-image realness probabilities `(N,)`. With `track_params = false`
    /// gradients still reach the input but not the discriminator weights.
    pub fn forward(&self, x: &Tensor, track_params: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != FACE_SIZE || w != FACE_SIZE {
            bail!(Shape, "discriminator expects (N, 3, 112, 112), got {:?}", x.dims());
        }
        let net = if track_params { &self.net } else { &self.frozen };
        let mut h = x.to_dtype(self.params.dtype())?;
        for conv in &net.convs {
            h = nn::leaky_relu(&conv.forward(&h)?, net.slope)?;
        }
        let logit = net.fc.forward(&h.flatten_from(1)?)?.squeeze(1)?;
        Ok(nn::sigmoid(&logit)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
    }

    pub fn discriminate(&self, x: &crate::face::FaceImage) -> Result<f64> {
        let p = self.forward(&x.tensor().unsqueeze(0)?, false)?;
        nn::scalar(&p)
    }
}
