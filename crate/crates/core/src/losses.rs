//! α-weighted generator losses and the discriminator loss.
//!
//! All tensor losses take per-sample inputs with a leading batch dimension
//! and return the batch mean as a scalar tensor, so they can be
//! back-propagated directly.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::adversary::PROB_EPS;
use crate::alpha::AlphaWeights;
use crate::error::{bail, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    pub id: f64,
    pub per: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, id: 2.0, per: 0.5, style: 120.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { adv: 0.0, id: 0.0, per: 0.0, style: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("adv", self.adv), ("id", self.id), ("per", self.per), ("style", self.style)] {
            if !(w >= 0.0) || !w.is_finite() {
                bail!(Config, "loss weight {name} must be finite and non-negative, got {w}");
            }
        }
        Ok(())
    }
}

/// Unweighted generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv_g: f64,
    pub id: f64,
    pub per: f64,
    pub style: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: Option<f64>,
    pub id: f64,
    pub per: f64,
    pub style: f64,
    pub total: f64,
}

/// Weighted generator objective with its components.
pub fn loss_total(c: LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let total = w.adv * c.adv_g + w.id * c.id + w.per * c.per + w.style * c.style;
    Ok(LossBreakdown { adv_g: c.adv_g, adv_d: None, id: c.id, per: c.per, style: c.style, total })
}

fn checked_probs(p: &Tensor) -> Result<Tensor> {
    let v = nn::to_vec_f64(p)?;
    if v.is_empty() {
        bail!(Validation, "empty probability tensor");
    }
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        bail!(Domain, "probabilities must lie in [0, 1]");
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// `−log D(X_m)`, averaged over the batch.
pub fn adv_generator(p_m: &Tensor) -> Result<Tensor> {
    Ok(checked_probs(p_m)?.log()?.neg()?.mean_all()?)
}

/// `−log(1 − D(X_m)) − ½ [log D(X_1) + log D(X_2)]`, averaged over the batch.
pub fn adv_discriminator(p_m: &Tensor, p_1: &Tensor, p_2: &Tensor) -> Result<Tensor> {
    let fake = checked_probs(p_m)?.affine(-1.0, 1.0)?.log()?.neg()?;
    let real = (checked_probs(p_1)?.log()? + checked_probs(p_2)?.log()?)?.affine(-0.5, 0.0)?;
    Ok((fake + real)?.mean_all()?)
}

/// Row-wise cosine distance of two `(N, D)` tensors.
pub fn cosine_distance_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() || a.rank() != 2 {
        bail!(Shape, "cosine distance needs matching (N, D) inputs, got {:?} and {:?}", a.dims(), b.dims());
    }
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    for n in nn::to_vec_f64(&na)?.into_iter().chain(nn::to_vec_f64(&nb)?) {
        if !(n > 0.0) || !n.is_finite() {
            bail!(Domain, "cosine distance of a zero or non-finite vector");
        }
    }
    let dot = (a * b)?.sum(D::Minus1)?;
    Ok(dot.div(&(na * nb)?)?.affine(-1.0, 1.0)?)
}

fn weighted(s1: &Tensor, s2: &Tensor, w: &AlphaWeights) -> Result<Tensor> {
    let (w1, w2) = w.tensors(1, s1.dtype(), s1.device())?;
    Ok((s1.mul(&w1)? + s2.mul(&w2)?)?)
}

fn check_batch(n: usize, w: &AlphaWeights) -> Result<()> {
    if w.len() != n {
        bail!(Shape, "{} alpha weights for a batch of {n}", w.len());
    }
    Ok(())
}

/// `α d(f_m, f_1) + (1 − α) d(f_m, f_2)`.
pub fn identity(f_m: &Tensor, f_1: &Tensor, f_2: &Tensor, w: &AlphaWeights) -> Result<Tensor> {
    check_batch(f_m.dim(0)?, w)?;
    let d1 = cosine_distance_rows(f_m, f_1)?;
    let d2 = cosine_distance_rows(f_m, f_2)?;
    Ok(weighted(&d1, &d2, w)?.mean_all()?)
}

fn check_maps(maps_1: &[Tensor], maps_2: &[Tensor], maps_m: &[Tensor]) -> Result<()> {
    if maps_1.len() != maps_m.len() || maps_2.len() != maps_m.len() || maps_m.is_empty() {
        bail!(Shape, "tap lists differ in length");
    }
    for ((a, b), m) in maps_1.iter().zip(maps_2).zip(maps_m) {
        if a.dims() != m.dims() || b.dims() != m.dims() || m.rank() < 2 {
            bail!(Shape, "tap shapes differ: {:?} / {:?} / {:?}", a.dims(), b.dims(), m.dims());
        }
    }
    Ok(())
}

fn per_sample_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_from(1)?.sum(1)?)
}

/// `Σ_i α/N_i ‖F_1 − F_m‖₁ + (1 − α)/N_i ‖F_2 − F_m‖₁` over the tapped maps.
pub fn perceptual(maps_1: &[Tensor], maps_2: &[Tensor], maps_m: &[Tensor], w: &AlphaWeights) -> Result<Tensor> {
    check_maps(maps_1, maps_2, maps_m)?;
    check_batch(maps_m[0].dim(0)?, w)?;
    let mut total: Option<Tensor> = None;
    for ((f1, f2), fm) in maps_1.iter().zip(maps_2).zip(maps_m) {
        let per_sample = fm.elem_count() / fm.dim(0)?;
        let s1 = per_sample_sum(&(f1 - fm)?.abs()?)?;
        let s2 = per_sample_sum(&(f2 - fm)?.abs()?)?;
        let term = weighted(&s1, &s2, w)?.affine(1.0 / per_sample as f64, 0.0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap").mean_all()?)
}

/// Gram matrices `(N, C, C)` of `(N, C, H, W)` maps, normalized by `C·H·W`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = f.dims4()?;
    let s = h * w;
    if c == 0 || s == 0 {
        bail!(Shape, "gram of an empty map {:?}", f.dims());
    }
    let m = f.reshape((n, c, s))?;
    Ok(m.matmul(&m.t()?)?.affine(1.0 / (c * s) as f64, 0.0)?)
}

/// `Σ_i α ‖G(F_1) − G(F_m)‖²_F + (1 − α) ‖G(F_2) − G(F_m)‖²_F`.
pub fn style(maps_1: &[Tensor], maps_2: &[Tensor], maps_m: &[Tensor], w: &AlphaWeights) -> Result<Tensor> {
    check_maps(maps_1, maps_2, maps_m)?;
    check_batch(maps_m[0].dim(0)?, w)?;
    let mut total: Option<Tensor> = None;
    for ((f1, f2), fm) in maps_1.iter().zip(maps_2).zip(maps_m) {
        let gm = gram(fm)?;
        let s1 = per_sample_sum(&(gram(f1)? - &gm)?.sqr()?)?;
        let s2 = per_sample_sum(&(gram(f2)? - &gm)?.sqr()?)?;
        let term = weighted(&s1, &s2, w)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap").mean_all()?)
}
