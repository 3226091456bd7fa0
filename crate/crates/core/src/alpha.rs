//! Mixing coefficients for the two morph inputs.
//!
//! Every α-weighted quantity in the crate (AAD blending, identity, perceptual
//! and style losses) takes its weights from [`AlphaWeights`]. The split is
//! canonicalized so that the weights for `1 - α` are exactly the swapped
//! weights for `α`, which makes swapping the two inputs together with
//! `α -> 1 - α` bitwise neutral.

use candle_core::{DType, Device, Tensor};

use crate::error::{bail, Result};

/// Returns `(w1, w2)` with `w1 ≈ α`, `w2 ≈ 1 - α` and `w1 + w2 == 1`.
///
/// For `α >= 0.5` the subtraction `1 - α` is exact; below 0.5 the larger
/// weight is rounded once and the smaller one derived from it, so
/// `split(1 - α) == swap(split(α))` holds for every representable α.
pub fn split(alpha: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Domain, "alpha must lie in [0, 1], got {alpha}");
    }
    if alpha >= 0.5 {
        Ok((alpha, 1.0 - alpha))
    } else {
        let w2 = 1.0 - alpha;
        Ok((1.0 - w2, w2))
    }
}

/// Per-sample blending weights for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl AlphaWeights {
    pub fn new(alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            bail!(Validation, "empty alpha list");
        }
        let (w1, w2) = alphas.iter().map(|&a| split(a)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Ok(Self { w1, w2 })
    }

    pub fn uniform(alpha: f64, n: usize) -> Result<Self> {
        Self::new(&vec![alpha; n])
    }

    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self { w1: self.w2.clone(), w2: self.w1.clone() }
    }

    /// Weight tensors of shape `(N, 1, .., 1)` with `rank` dimensions.
    pub fn tensors(&self, rank: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let mut shape = vec![1usize; rank.max(1)];
        shape[0] = self.len();
        let w1 = Tensor::from_vec(self.w1.clone(), shape.as_slice(), device)?.to_dtype(dtype)?;
        let w2 = Tensor::from_vec(self.w2.clone(), shape.as_slice(), device)?.to_dtype(dtype)?;
        Ok((w1, w2))
    }
}
