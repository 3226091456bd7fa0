//! Acceptance suite: runs criteria 1-10 and prints one PASS/FAIL line per
//! criterion. Criteria 8 and 10 run the desk pipeline end to end through the
//! command-line entry point.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use facemorph::alpha::AlphaWeights;
use facemorph::cli::{Cli, RunConfig};
use facemorph::dataset::{DatasetIndex, FaceDataset};
use facemorph::encoder::{EncoderConfig, EncoderHandle, FaceFeatures};
use facemorph::face::FaceImage;
use facemorph::losses;
use facemorph::morphnet::{AadLayer, Generator, MaskMode, MorphNetConfig};
use facemorph::nn;
use facemorph::params::{ParamBuilder, ParamStore};
use facemorph::protocol::{self, DistanceRow, Quintuple, ThresholdRule, Triplet, NUM_FOLDS};
use facemorph::rng;
use facemorph::trainer::{self, Phase, TrainConfig, Trainer};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn vals(t: &Tensor) -> Vec<f64> {
    nn::to_vec_f64(t).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------- 1

fn random_features(r: &mut ChaCha8Rng, cfg: &MorphNetConfig) -> FaceFeatures {
    let f = normal_vec(r, cfg.feature_dim).iter().map(|v| *v as f32).collect::<Vec<_>>();
    let f4 = normal_vec(r, cfg.f4_flat_dim()).iter().map(|v| v.abs() as f32).collect::<Vec<_>>();
    let dev = Device::Cpu;
    FaceFeatures {
        f: Tensor::from_vec(f, (1, cfg.feature_dim), &dev).unwrap(),
        f3: Tensor::zeros((1, 1, 14, 14), DType::F32, &dev).unwrap(),
        f4: Tensor::from_vec(f4, (1, cfg.f4_channels, 7, 7), &dev).unwrap(),
        f5: Tensor::zeros((1, 1, 7, 7), DType::F32, &dev).unwrap(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::desk(8).train.generator;
    let mut report = Vec::new();
    for mode in [MaskMode::Literal, MaskMode::PassThrough] {
        let cfg = MorphNetConfig { mask_mode: mode, ..cfg.clone() };
        let g = Generator::init(&cfg, 11, DType::F32).map_err(err)?;
        let mut r = rng_for(1);
        let n = if mode == MaskMode::Literal { 60 } else { 40 };
        for k in 0..n {
            let a = random_features(&mut r, &cfg);
            let b = random_features(&mut r, &cfg);
            let alpha = match k {
                0 => 0.0,
                1 => 1.0,
                2 => 0.5,
                _ => r.random::<f64>(),
            };
            let x = g.generate_morph(&a, &b, alpha).map_err(err)?;
            let y = g.generate_morph(&b, &a, 1.0 - alpha).map_err(err)?;
            let xb: Vec<u32> = x.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
            ensure!(xb == yb, "{mode:?}: morph differs after swapping inputs at alpha {alpha}");
        }
        report.push(format!("{n} {mode:?}"));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{} inputs bitwise equal in {:.1}s", report.join(" + "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-15.0, 15.0)).exp())
}

struct AadOracle {
    h_bar: Vec<f64>,
    mask: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

/// Element-wise loop evaluation of one AAD layer on `(N, C, H, W)` input.
fn aad_loop(store: &ParamStore, h: &[f64], dims: [usize; 4], c1: &[f64], c2: &[f64], cond_dim: usize) -> AadOracle {
    let [n, c, hh, ww] = dims;
    let at = |i: usize, ch: usize, y: usize, x: usize| ((i * c + ch) * hh + y) * ww + x;
    let get = |name: &str| vals(store.get(name).unwrap().as_tensor());
    let mut h_bar = vec![0.0; h.len()];
    for ch in 0..c {
        let mut xs = Vec::new();
        for i in 0..n {
            for y in 0..hh {
                for x in 0..ww {
                    xs.push(h[at(i, ch, y, x)]);
                }
            }
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        for i in 0..n {
            for y in 0..hh {
                for x in 0..ww {
                    h_bar[at(i, ch, y, x)] = (h[at(i, ch, y, x)] - mean) / (var + 1e-5).sqrt();
                }
            }
        }
    }
    let (mw, mb) = (get("mask.weight"), get("mask.bias"));
    let mut mask = vec![0.0; n * hh * ww];
    for i in 0..n {
        for y in 0..hh {
            for x in 0..ww {
                let mut s = mb[0];
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= hh as isize || sx >= ww as isize {
                                continue;
                            }
                            s += mw[(ch * 3 + ky) * 3 + kx] * h_bar[at(i, ch, sy as usize, sx as usize)];
                        }
                    }
                }
                mask[(i * hh + y) * ww + x] = sigmoid(s);
            }
        }
    }
    let (pw, pb) = (get("proj.weight"), get("proj.bias"));
    let project = |cond: &[f64], i: usize, o: usize| -> f64 {
        pb[o] + (0..cond_dim).map(|k| pw[o * cond_dim + k] * cond[i * cond_dim + k]).sum::<f64>()
    };
    let denorm = |cond: &[f64]| -> Vec<f64> {
        let mut a = vec![0.0; h.len()];
        for i in 0..n {
            for ch in 0..c {
                let (gamma, beta) = (project(cond, i, ch), project(cond, i, c + ch));
                for y in 0..hh {
                    for x in 0..ww {
                        a[at(i, ch, y, x)] = gamma * h_bar[at(i, ch, y, x)] + beta;
                    }
                }
            }
        }
        a
    };
    AadOracle { a1: denorm(c1), a2: denorm(c2), h_bar, mask }
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn criterion_2() -> Outcome {
    let (n, c, hh, ww, cond_dim) = (2, 3, 2, 2, 4);
    let mut worst: f64 = 0.0;
    for mode in [MaskMode::Literal, MaskMode::PassThrough] {
        for seed in 0..5u64 {
            let mut store = ParamStore::new(DType::F64);
            let mut init = rng::stream(seed, "aad");
            let layer = AadLayer::new(ParamBuilder::init(&mut store, &mut init), c, cond_dim, mode).map_err(err)?;
            let mut r = rng_for(100 + seed);
            let h = normal_vec(&mut r, n * c * hh * ww);
            let c1 = normal_vec(&mut r, n * cond_dim);
            let c2 = normal_vec(&mut r, n * cond_dim);
            let alphas = [r.random::<f64>(), r.random::<f64>()];
            let w = AlphaWeights::new(&alphas).map_err(err)?;
            let ht = tensor(h.clone(), &[n, c, hh, ww]);
            let (t1, t2) = (tensor(c1.clone(), &[n, cond_dim]), tensor(c2.clone(), &[n, cond_dim]));
            let io = layer.forward_io(&ht, &t1, &t2, &w, true).map_err(err)?;
            let o = aad_loop(&store, &h, [n, c, hh, ww], &c1, &c2, cond_dim);
            let mut expected = vec![0.0; h.len()];
            for i in 0..n {
                for ch in 0..c {
                    for p in 0..hh * ww {
                        let k = (i * c + ch) * hh * ww + p;
                        let m = o.mask[i * hh * ww + p];
                        let blend = w.w1[i] * o.a1[k] + w.w2[i] * o.a2[k];
                        expected[k] = match mode {
                            MaskMode::Literal => m * blend,
                            MaskMode::PassThrough => (1.0 - m) * o.h_bar[k] + m * blend,
                        };
                    }
                }
            }
            for (name, got, want) in [
                ("h_bar", vals(&io.h_bar), o.h_bar.clone()),
                ("mask", vals(&io.mask), o.mask.clone()),
                ("a1", vals(&io.a1), o.a1.clone()),
                ("a2", vals(&io.a2), o.a2.clone()),
                ("out", vals(&io.out), expected),
            ] {
                let e = max_rel(&got, &want);
                worst = worst.max(e);
                ensure!(e < 1e-6, "{mode:?} seed {seed}: {name} relative error {e:e}");
            }
        }
    }
    // α = 1 boundary: exactly M ⊙ A1.
    let mut store = ParamStore::new(DType::F64);
    let mut init = rng::stream(9, "aad");
    let layer = AadLayer::new(ParamBuilder::init(&mut store, &mut init), c, cond_dim, MaskMode::Literal).map_err(err)?;
    let mut r = rng_for(9);
    let ht = tensor(normal_vec(&mut r, n * c * hh * ww), &[n, c, hh, ww]);
    let t1 = tensor(normal_vec(&mut r, n * cond_dim), &[n, cond_dim]);
    let t2 = tensor(normal_vec(&mut r, n * cond_dim), &[n, cond_dim]);
    let io = layer.forward_io(&ht, &t1, &t2, &AlphaWeights::uniform(1.0, n).unwrap(), true).map_err(err)?;
    let direct = io.a1.broadcast_mul(&io.mask).unwrap();
    ensure!(vals(&io.out) == vals(&direct), "alpha = 1 output is not exactly M * A1");
    Ok(format!("loop oracle max relative error {worst:.1e}; alpha=1 gives M*A1 bitwise"))
}

// ---------------------------------------------------------------- 3

fn loop_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn loop_gram(f: &[f64], c: usize, s: usize) -> Vec<f64> {
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            g[i * c + j] = (0..s).map(|k| f[i * s + k] * f[j * s + k]).sum::<f64>() / (c * s) as f64;
        }
    }
    g
}

struct LossCase {
    n: usize,
    d: usize,
    maps: Vec<[usize; 3]>,
    alphas: Vec<f64>,
    fm: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    m1: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
    mm: Vec<Vec<f64>>,
    p: [Vec<f64>; 3],
}

impl LossCase {
    fn random(seed: u64) -> Self {
        let mut r = rng_for(seed);
        let n = 2;
        let d = 5;
        let maps = vec![[2, 2, 3], [3, 2, 2]];
        let m = |r: &mut ChaCha8Rng| maps.iter().map(|s| normal_vec(r, n * s[0] * s[1] * s[2])).collect::<Vec<_>>();
        let (m1, m2, mm) = (m(&mut r), m(&mut r), m(&mut r));
        let prob = |r: &mut ChaCha8Rng| (0..n).map(|_| r.random_range(0.05..0.95)).collect::<Vec<f64>>();
        let p = [prob(&mut r), prob(&mut r), prob(&mut r)];
        Self {
            n,
            d,
            alphas: (0..n).map(|_| r.random::<f64>()).collect(),
            fm: normal_vec(&mut r, n * d),
            f1: normal_vec(&mut r, n * d),
            f2: normal_vec(&mut r, n * d),
            maps,
            m1,
            m2,
            mm,
            p,
        }
    }

    fn map_tensors(&self, m: &[Vec<f64>]) -> Vec<Tensor> {
        m.iter().zip(&self.maps).map(|(v, s)| tensor(v.clone(), &[self.n, s[0], s[1], s[2]])).collect()
    }

    fn weights(&self) -> AlphaWeights {
        AlphaWeights::new(&self.alphas).unwrap()
    }

    fn oracle_identity(&self) -> f64 {
        let w = self.weights();
        (0..self.n)
            .map(|i| {
                let s = |v: &[f64]| v[i * self.d..(i + 1) * self.d].to_vec();
                w.w1[i] * loop_cos(&s(&self.fm), &s(&self.f1)) + w.w2[i] * loop_cos(&s(&self.fm), &s(&self.f2))
            })
            .sum::<f64>()
            / self.n as f64
    }

    fn oracle_maps(&self, per_tap: impl Fn(&[f64], &[f64], [usize; 3]) -> f64) -> f64 {
        let w = self.weights();
        let mut total = 0.0;
        for i in 0..self.n {
            for (t, s) in self.maps.iter().enumerate() {
                let len = s[0] * s[1] * s[2];
                let sl = |v: &Vec<Vec<f64>>| v[t][i * len..(i + 1) * len].to_vec();
                total += w.w1[i] * per_tap(&sl(&self.m1), &sl(&self.mm), *s) + w.w2[i] * per_tap(&sl(&self.m2), &sl(&self.mm), *s);
            }
        }
        total / self.n as f64
    }

    fn oracle_perceptual(&self) -> f64 {
        self.oracle_maps(|a, m, s| a.iter().zip(m).map(|(x, y)| (x - y).abs()).sum::<f64>() / (s[0] * s[1] * s[2]) as f64)
    }

    fn oracle_style(&self) -> f64 {
        self.oracle_maps(|a, m, s| {
            let (ga, gm) = (loop_gram(a, s[0], s[1] * s[2]), loop_gram(m, s[0], s[1] * s[2]));
            ga.iter().zip(&gm).map(|(x, y)| (x - y).powi(2)).sum()
        })
    }

    fn oracle_adv(&self) -> (f64, f64) {
        let n = self.n as f64;
        let g = self.p[0].iter().map(|p| -p.ln()).sum::<f64>() / n;
        let d = (0..self.n)
            .map(|i| -(1.0 - self.p[0][i]).ln() - 0.5 * (self.p[1][i].ln() + self.p[2][i].ln()))
            .sum::<f64>()
            / n;
        (g, d)
    }
}

/// Central finite differences of `f` w.r.t. every element of `x`.
fn finite_diff(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-4;
    (0..x.len())
        .map(|k| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[k] += h;
            dn[k] -= h;
            (f(&tensor(up, shape)) - f(&tensor(dn, shape))) / (2.0 * h)
        })
        .collect()
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

fn analytic_grad(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(&tensor(x.to_vec(), shape)).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    vals(grads.get(var.as_tensor()).expect("gradient"))
}

fn check_gradient(name: &str, x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> Result<f64, String> {
    let analytic = analytic_grad(x, shape, f);
    let numeric = finite_diff(x, shape, &|t| nn::scalar(&f(t)).unwrap());
    let e = norm_rel(&analytic, &numeric);
    ensure!(e < 1e-3, "{name}: gradient relative error {e:e}");
    Ok(e)
}

fn criterion_3() -> Outcome {
    let s = |t: Tensor| nn::scalar(&t).unwrap();
    // Hand examples.
    let half = tensor(vec![0.5], &[1]);
    ensure!((s(losses::adv_generator(&half).unwrap()) - 2f64.ln()).abs() < 1e-6, "adv_g(0.5)");
    ensure!((s(losses::adv_generator(&tensor(vec![(-1f64).exp()], &[1])).unwrap()) - 1.0).abs() < 1e-6, "adv_g(1/e)");
    ensure!((s(losses::adv_discriminator(&half, &half, &half).unwrap()) - 2.0 * 2f64.ln()).abs() < 1e-6, "adv_d(0.5)");
    let per = losses::perceptual(
        &[tensor(vec![0.0, 0.0], &[1, 2, 1, 1])],
        &[tensor(vec![2.0, 2.0], &[1, 2, 1, 1])],
        &[tensor(vec![1.0, 1.0], &[1, 2, 1, 1])],
        &AlphaWeights::uniform(0.5, 1).unwrap(),
    )
    .unwrap();
    ensure!((s(per) - 1.0).abs() < 1e-6, "perceptual hand example");
    let g = vals(&losses::gram(&Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap());
    ensure!(g.iter().all(|v| (v - 0.5).abs() < 1e-12), "gram of the constant map");

    let mut worst_value: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for seed in 0..10 {
        let c = LossCase::random(seed);
        let w = c.weights();
        let (fm, f1, f2) = (tensor(c.fm.clone(), &[c.n, c.d]), tensor(c.f1.clone(), &[c.n, c.d]), tensor(c.f2.clone(), &[c.n, c.d]));
        let (m1, m2, mm) = (c.map_tensors(&c.m1), c.map_tensors(&c.m2), c.map_tensors(&c.mm));
        let p: Vec<Tensor> = c.p.iter().map(|v| tensor(v.clone(), &[c.n])).collect();
        let (adv_g, adv_d) = c.oracle_adv();
        for (name, got, want) in [
            ("adv_g", s(losses::adv_generator(&p[0]).unwrap()), adv_g),
            ("adv_d", s(losses::adv_discriminator(&p[0], &p[1], &p[2]).unwrap()), adv_d),
            ("identity", s(losses::identity(&fm, &f1, &f2, &w).unwrap()), c.oracle_identity()),
            ("perceptual", s(losses::perceptual(&m1, &m2, &mm, &w).unwrap()), c.oracle_perceptual()),
            ("style", s(losses::style(&m1, &m2, &mm, &w).unwrap()), c.oracle_style()),
        ] {
            let e = rel_err(got, want);
            worst_value = worst_value.max(e);
            ensure!(e < 1e-6, "seed {seed}: {name} = {got}, oracle {want}");
        }

        let fm_shape = [c.n, c.d];
        let e1 = check_gradient("adv_g", &c.p[0], &[c.n], &|x| losses::adv_generator(x).unwrap())?;
        let e2 = check_gradient("adv_d", &c.p[0], &[c.n], &|x| losses::adv_discriminator(x, &p[1], &p[2]).unwrap())?;
        let e3 = check_gradient("identity", &c.fm, &fm_shape, &|x| losses::identity(x, &f1, &f2, &w).unwrap())?;
        let tap_shape = [c.n, c.maps[0][0], c.maps[0][1], c.maps[0][2]];
        let e4 = check_gradient("perceptual", &c.mm[0], &tap_shape, &|x| {
            losses::perceptual(&m1, &m2, &[x.clone(), mm[1].clone()], &w).unwrap()
        })?;
        let e5 = check_gradient("style", &c.mm[0], &tap_shape, &|x| {
            losses::style(&m1, &m2, &[x.clone(), mm[1].clone()], &w).unwrap()
        })?;
        worst_grad = [worst_grad, e1, e2, e3, e4, e5].into_iter().fold(0.0, f64::max);
    }
    Ok(format!("oracle max relative error {worst_value:.1e}; gradient max relative error {worst_grad:.1e} over 10 seeds"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let s = |t: Tensor| nn::scalar(&t).unwrap().to_bits();
    for seed in 0..100u64 {
        let c = LossCase::random(1000 + seed);
        let w = c.weights();
        let swapped_alphas: Vec<f64> = c.alphas.iter().map(|a| 1.0 - a).collect();
        let ws = AlphaWeights::new(&swapped_alphas).unwrap();
        let (fm, f1, f2) = (tensor(c.fm.clone(), &[c.n, c.d]), tensor(c.f1.clone(), &[c.n, c.d]), tensor(c.f2.clone(), &[c.n, c.d]));
        let (m1, m2, mm) = (c.map_tensors(&c.m1), c.map_tensors(&c.m2), c.map_tensors(&c.mm));
        ensure!(
            s(losses::identity(&fm, &f1, &f2, &w).unwrap()) == s(losses::identity(&fm, &f2, &f1, &ws).unwrap()),
            "identity loss not swap-symmetric (seed {seed})"
        );
        ensure!(
            s(losses::perceptual(&m1, &m2, &mm, &w).unwrap()) == s(losses::perceptual(&m2, &m1, &mm, &ws).unwrap()),
            "perceptual loss not swap-symmetric (seed {seed})"
        );
        ensure!(
            s(losses::style(&m1, &m2, &mm, &w).unwrap()) == s(losses::style(&m2, &m1, &mm, &ws).unwrap()),
            "style loss not swap-symmetric (seed {seed})"
        );
    }
    Ok("identity, perceptual and style losses bitwise equal on 100 inputs".into())
}

// ---------------------------------------------------------------- 5

fn blank_dataset(n_ids: usize, per: usize) -> FaceDataset {
    let index = DatasetIndex::from_pairs(
        (0..n_ids).flat_map(|i| (0..per).map(move |k| (format!("id_{i:03}"), format!("id_{i:03}/img_{k:03}.png")))),
    );
    let blank = FaceImage::new(Tensor::zeros((3, 112, 112), DType::F32, &Device::Cpu).unwrap()).unwrap();
    FaceDataset::from_images(index, vec![blank; n_ids * per]).unwrap()
}

fn criterion_5(work: &Path) -> Outcome {
    let enc_cfg = EncoderConfig::desk();
    let enc = EncoderHandle::init(&enc_cfg, 0, DType::F32).map_err(err)?;
    let desk = TrainConfig::desk(&enc_cfg, 16);
    let cfg = TrainConfig {
        pretrain_epochs: 3,
        finetune_epochs: 6,
        dry_run: true,
        generator: desk.generator,
        discriminator: desk.discriminator,
        ..TrainConfig::default()
    };
    let ds = blank_dataset(20, 4);
    let labels = ds.index.labels();
    let art = trainer::run_training(&cfg, &ds, &enc, &work.join("dry_run")).map_err(err)?;
    let log = trainer::read_log(&art.log_path).map_err(err)?;
    ensure!(!log.is_empty(), "empty log");
    let epochs: HashSet<usize> = log.iter().map(|r| r.epoch).collect();
    ensure!(epochs.len() == 9, "log covers {} epochs", epochs.len());
    let mut disc_steps = 0;
    for (k, r) in log.iter().enumerate() {
        ensure!(r.step == k as u64, "step numbering");
        let factor = 0.5f64.powi((r.epoch / 3) as i32);
        ensure!(r.gen_lr == 1e-4 * factor && r.disc_lr == 1e-5 * factor, "lr at epoch {}: {} / {}", r.epoch, r.gen_lr, r.disc_lr);
        ensure!((r.disc_updated == 1) == (r.step % 4 == 0), "discriminator update flag at step {}", r.step);
        disc_steps += r.disc_updated as usize;
        ensure!(r.n_face_slots == 32 && r.n_identities == 16, "step {}: {} faces from {} identities", r.step, r.n_face_slots, r.n_identities);
        match r.phase.as_str() {
            "pretrain" => ensure!(r.epoch < 3 && r.pairs_same_image == r.n_pairs, "pretrain pairs must repeat the image"),
            "finetune" => ensure!(r.epoch >= 3 && r.pairs_same_identity == 0, "finetune pairs must cross identities"),
            other => return Err(format!("unknown phase {other}")),
        }
    }
    // Cross-check the logged batch statistics against the sampler itself.
    let mut t = Trainer::new(cfg.clone(), &enc, &ds).map_err(err)?;
    for phase in [Phase::Pretrain, Phase::Finetune] {
        let b = t.next_batch(phase);
        let ids: HashSet<usize> = b.pairs.iter().flat_map(|&(a, c)| [labels[a], labels[c]]).collect();
        ensure!(b.face_slots() == 32 && ids.len() == 16, "{phase:?} batch composition");
    }
    Ok(format!("{} steps over 9 epochs, {disc_steps} discriminator updates, schedule matches 1e-4 * 0.5^floor(e/3)", log.len()))
}

// ---------------------------------------------------------------- 6

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

/// O(n²) maximum-accuracy threshold: every candidate scored by a full pass.
fn brute_threshold(d: &[f64], y: &[u8]) -> f64 {
    let mut s = d.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut cands = vec![s[0]];
    for w in s.windows(2) {
        let m = w[0] + (w[1] - w[0]) / 2.0;
        cands.push(if m > w[0] { m } else { w[1] });
    }
    cands.push(next_up(s[s.len() - 1]));
    let correct = |t: f64| {
        let mut k = 0;
        for i in 0..d.len() {
            if (y[i] == 1 && d[i] < t) || (y[i] == 0 && d[i] >= t) {
                k += 1;
            }
        }
        k
    };
    let mut best = (correct(cands[0]), cands[0]);
    for &t in &cands[1..] {
        let c = correct(t);
        if c > best.0 {
            best = (c, t);
        }
    }
    best.1
}

fn brute_far(d: &[f64], far: f64) -> f64 {
    let allowed = (far * d.len() as f64 + 1e-9).floor() as usize;
    let mut cands: Vec<f64> = d.to_vec();
    cands.push(next_up(d.iter().copied().fold(f64::MIN, f64::max)));
    let mut best = f64::NEG_INFINITY;
    for &t in &cands {
        let accepted = d.iter().filter(|&&x| x < t).count();
        if accepted <= allowed && t > best {
            best = t;
        }
    }
    best
}

fn random_rows(r: &mut ChaCha8Rng, n: usize) -> Vec<DistanceRow> {
    let grid = r.random_range(5..60) as f64;
    (0..n)
        .map(|k| {
            let y = u8::from(r.random::<bool>());
            let q = |r: &mut ChaCha8Rng| (r.random_range(0.0..1.2) * grid).round() / grid;
            DistanceRow { fold: k * NUM_FOLDS / n, y, d1: q(r), d2: q(r), ref_distance: q(r) }
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let d1 = [0.1, 0.1, 0.9, 0.9];
    let d2 = [0.1, 0.9, 0.1, 0.9];
    ensure!(protocol::acc_morph(&d1, &d2, 0.5).unwrap() == 75.0, "four-quintuple case");
    ensure!(protocol::compute_threshold(&[0.1, 0.9], &[1, 0]).unwrap() == 0.5, "midpoint example");
    let mut r = rng_for(6);
    let mut cases = 0;
    for trial in 0..150 {
        let n = r.random_range(NUM_FOLDS..=200);
        let rows = random_rows(&mut r, n);
        let far = [0.001, 0.01, 0.1, 0.5, 1.0][trial % 5];
        for rule in [ThresholdRule::MaxAccuracy, ThresholdRule::Far] {
            let point = match protocol::score(&rows, rule, far) {
                Ok(p) => p,
                // Folds whose training split lacks imposters cannot host a FAR threshold.
                Err(_) if rule == ThresholdRule::Far => continue,
                Err(e) => return Err(e.to_string()),
            };
            for y in [1u8, 0] {
                let (mut n_sub, mut both, mut s1, mut s2) = (0usize, 0usize, 0usize, 0usize);
                for (i, row) in rows.iter().enumerate() {
                    if row.y != y {
                        continue;
                    }
                    let mut td = Vec::new();
                    let mut ty = Vec::new();
                    for (j, other) in rows.iter().enumerate() {
                        if other.fold != row.fold && j != i {
                            td.push(other.ref_distance);
                            ty.push(other.y);
                        }
                    }
                    let t = match rule {
                        ThresholdRule::MaxAccuracy => brute_threshold(&td, &ty),
                        ThresholdRule::Far => {
                            let imp: Vec<f64> = td.iter().zip(&ty).filter(|(_, &l)| l == 0).map(|(&d, _)| d).collect();
                            brute_far(&imp, far)
                        }
                    };
                    ensure!(point.thresholds[row.fold] == t, "trial {trial} {rule:?}: fold {} threshold {} vs brute {t}", row.fold, point.thresholds[row.fold]);
                    n_sub += 1;
                    both += usize::from(row.d1 < t && row.d2 < t);
                    s1 += usize::from(row.d1 < t);
                    s2 += usize::from(row.d2 < t);
                }
                let m = if y == 1 { &point.same } else { &point.diff };
                match m {
                    None => ensure!(n_sub == 0, "missing subset"),
                    Some(m) => {
                        ensure!(
                            (m.n, m.attack_successes, m.side1_matches, m.side2_matches) == (n_sub, both, s1, s2),
                            "trial {trial} {rule:?} y={y}: counts {:?} vs brute {:?}",
                            (m.n, m.attack_successes, m.side1_matches, m.side2_matches),
                            (n_sub, both, s1, s2)
                        );
                        ensure!(m.acc_morph == 100.0 * (n_sub - both) as f64 / n_sub as f64, "acc_morph percentage");
                    }
                }
            }
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{cases} randomized protocols match brute force exactly in {:.1}s; 75% case holds", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 7

fn synthetic_index(r: &mut ChaCha8Rng) -> DatasetIndex {
    let mut pairs = Vec::new();
    for i in 0..12 {
        let n = if i % 4 == 0 { 1 } else { r.random_range(2..6) };
        for k in 0..n {
            pairs.push((format!("p{i:02}"), format!("p{i:02}/{k}.png")));
        }
    }
    DatasetIndex::from_pairs(pairs)
}

fn check_quintuples(q: &[Quintuple], t: &[Triplet], index: &DatasetIndex) -> Result<(), String> {
    let owner = index.identity_of();
    ensure!(q.len() == t.len(), "length changed");
    for (a, b) in q.iter().zip(t) {
        ensure!(a.fold == b.fold && a.y == b.y, "fold/label not preserved");
        ensure!(a.fold < NUM_FOLDS, "fold out of range");
        for (img, id) in [(&a.img1, &a.id1), (&a.img1p, &a.id1), (&a.img2, &a.id2), (&a.img2p, &a.id2)] {
            ensure!(owner.get(img.as_str()) == Some(&id.as_str()), "{img} does not belong to {id}");
        }
        ensure!(a.img1 != a.img1p && a.img2 != a.img2p, "reference equals morph input");
        match a.y {
            1 => ensure!(a.id1 == a.id2 && a.img1 != a.img2, "genuine constraints"),
            _ => ensure!(a.id1 != a.id2, "imposter constraints"),
        }
    }
    Ok(())
}

fn criterion_7() -> Outcome {
    let mut r = rng_for(7);
    let mut replaced_total = 0;
    for trial in 0..20u64 {
        let index = synthetic_index(&mut r);
        let ids: Vec<String> = index.groups().into_iter().map(|(k, _)| k).collect();
        // Triplets over every identity, including the single-image ones.
        let mut triplets = Vec::new();
        for k in 0..60 {
            let fold = k * NUM_FOLDS / 60;
            let i = r.random_range(0..ids.len());
            let imgs_i: Vec<&str> = index.entries().iter().filter(|e| e.identity_id == ids[i]).map(|e| e.image_path.as_str()).collect();
            if k % 2 == 0 && imgs_i.len() >= 2 {
                triplets.push(Triplet { fold, y: 1, id1: ids[i].clone(), img1: imgs_i[0].into(), id2: ids[i].clone(), img2: imgs_i[1].into() });
            } else {
                let j = (i + 1 + r.random_range(0..ids.len() - 1)) % ids.len();
                let img_j = index.entries().iter().find(|e| e.identity_id == ids[j]).unwrap().image_path.clone();
                triplets.push(Triplet { fold, y: 0, id1: ids[i].clone(), img1: imgs_i[0].into(), id2: ids[j].clone(), img2: img_j });
            }
        }
        let singles: HashSet<&str> = index.groups().iter().filter(|(_, g)| g.len() == 1).map(|(k, _)| k.as_str()).collect::<Vec<_>>().into_iter().map(|s| ids.iter().find(|x| x.as_str() == s).unwrap().as_str()).collect();
        let needs = triplets.iter().filter(|t| singles.contains(t.id1.as_str()) || singles.contains(t.id2.as_str())).count();
        let b = protocol::build_quintuples(&triplets, &index, trial).map_err(err)?;
        check_quintuples(&b.quintuples, &triplets, &index)?;
        ensure!(b.replaced == needs, "replaced {} of {needs} triplets touching single-image identities", b.replaced);
        replaced_total += b.replaced;
        let again = protocol::build_quintuples(&triplets, &index, trial).map_err(err)?;
        ensure!(
            protocol::protocol_hash(&again.quintuples).unwrap() == protocol::protocol_hash(&b.quintuples).unwrap(),
            "same seed gave a different protocol"
        );
        let mut fold_sizes = [0usize; NUM_FOLDS];
        for q in &b.quintuples {
            fold_sizes[q.fold] += 1;
        }
        ensure!(fold_sizes.iter().all(|&s| s == 6), "fold partition {fold_sizes:?}");
    }
    // Generated protocols: fold-contiguous and seeded.
    let index = synthetic_index(&mut r);
    let t = protocol::generate_triplets(&index, 50, 50, 3).map_err(err)?;
    ensure!(t == protocol::generate_triplets(&index, 50, 50, 3).unwrap(), "triplet generation not deterministic");
    let q = protocol::build_quintuples(&t, &index, 3).map_err(err)?;
    check_quintuples(&q.quintuples, &t, &index)?;
    for f in 0..NUM_FOLDS {
        let c = t.iter().filter(|x| x.fold == f).count();
        ensure!(c == 10, "generated fold {f} has {c} pairs");
    }
    // All single-image identities: documented protocol error.
    let singles = DatasetIndex::from_pairs((0..4).map(|i| (format!("s{i}"), format!("s{i}/0.png"))));
    let t = vec![Triplet { fold: 0, y: 0, id1: "s0".into(), img1: "s0/0.png".into(), id2: "s1".into(), img2: "s1/0.png".into() }];
    ensure!(
        matches!(protocol::build_quintuples(&t, &singles, 0), Err(facemorph::Error::Protocol(_))),
        "single-image identities must be a protocol error"
    );
    Ok(format!("constraints and fold partition hold on 21 protocols; {replaced_total} replacements; seeded hashes stable"))
}

// ---------------------------------------------------------------- desk pipeline

const DESK_SEED: u64 = 2024;
const DESK_SCALE: usize = 8;

fn cli(out: &Path, args: &[String]) -> Result<(), String> {
    let mut argv = vec![
        "facemorph".to_string(),
        "--seed".into(),
        DESK_SEED.to_string(),
        "--desk-scale".into(),
        DESK_SCALE.to_string(),
        "--out-dir".into(),
        out.display().to_string(),
    ];
    argv.extend(args.iter().cloned());
    let parsed = Cli::try_parse_from(&argv).map_err(err)?;
    facemorph::cli::run(parsed).map_err(|e| format!("{}: {e}", args[0]))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

struct DeskRun {
    root: PathBuf,
    train_time: Duration,
    total_time: Duration,
}

impl DeskRun {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn encoder(&self) -> PathBuf {
        self.root.join("encoder").join("encoder.fmck")
    }
    fn run(&self) -> PathBuf {
        self.root.join("run")
    }
    fn protocol(&self) -> PathBuf {
        self.root.join("protocol").join("protocol.csv")
    }
    fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// synth → index → train-encoder → train → build-protocol → evaluate.
fn desk_pipeline(root: &Path) -> Result<DeskRun, String> {
    let start = Instant::now();
    let data = root.join("data");
    cli(&data, &["synth".into()])?;
    cli(&root.join("index"), &["index".into(), "--data".into(), s(&data)])?;
    let index = root.join("index").join("index.csv");
    cli(&root.join("encoder"), &["train-encoder".into(), "--data".into(), s(&data), "--index".into(), s(&index)])?;
    let enc = root.join("encoder").join("encoder.fmck");
    let t = Instant::now();
    cli(&root.join("run"), &["train".into(), "--data".into(), s(&data), "--encoder".into(), s(&enc), "--index".into(), s(&index)])?;
    let train_time = t.elapsed();
    cli(&root.join("protocol"), &["build-protocol".into(), "--index".into(), s(&index)])?;
    let run = DeskRun { root: root.to_path_buf(), train_time, total_time: Duration::ZERO };
    cli(&run.eval(), &eval_args("evaluate", &run.run().join("generator.fmck"), &run))?;
    Ok(DeskRun { total_time: start.elapsed(), ..run })
}

fn eval_args(cmd: &str, generator: &Path, run: &DeskRun) -> Vec<String> {
    vec![
        cmd.into(),
        "--generator".into(),
        s(generator),
        "--encoder".into(),
        s(&run.encoder()),
        "--protocol".into(),
        s(&run.protocol()),
        "--data".into(),
        s(&run.data()),
    ]
}

fn read_report(path: &Path) -> Result<protocol::MorphReport, String> {
    serde_json::from_slice(&std::fs::read(path).map_err(err)?).map_err(err)
}

fn criterion_8(run: &DeskRun) -> Outcome {
    let log = trainer::read_log(&run.run().join("loss_log.csv")).map_err(err)?;
    let means = trainer::epoch_mean_totals(&log);
    let (first, last) = (means.first().ok_or("no losses")?.1, means.last().ok_or("no losses")?.1);
    let report = read_report(&run.eval().join("evaluation.json"))?;
    let same = report.max_accuracy.same.as_ref().ok_or("no genuine pairs")?.acc_morph;

    let sweep_dir = run.root.join("sweep");
    let mut args = eval_args("sweep-alpha", &run.run().join("generator.fmck"), run);
    args.extend(["--alphas".into(), "0,0.5,1".into()]);
    cli(&sweep_dir, &args)?;
    let mut rd = csv::Reader::from_path(sweep_dir.join("sweep.csv")).map_err(err)?;
    let sweep: Vec<protocol::SweepRow> = rd.deserialize().collect::<Result<_, _>>().map_err(err)?;
    let side1 = |a: f64| sweep.iter().find(|r| r.alpha == a).map(|r| r.acc_side1).ok_or("missing sweep row");
    let (s0, s1) = (side1(0.0)?, side1(1.0)?);

    let cfg: RunConfig = facemorph::cli::read_run_config(&run.run()).map_err(err)?;
    let untrained = Generator::init(&cfg.train.generator, 99, DType::F32).map_err(err)?;
    let g0 = run.root.join("untrained.fmck");
    facemorph::checkpoint::save_generator(&g0, &untrained).map_err(err)?;
    let u_dir = run.root.join("eval_untrained");
    cli(&u_dir, &eval_args("evaluate", &g0, run))?;
    let u = read_report(&u_dir.join("evaluation.json"))?;
    let u_diff = u.max_accuracy.diff.as_ref().ok_or("no imposter pairs")?.acc_morph;

    let detail = format!(
        "(a) loss {first:.3} -> {last:.3}; (b) acc_morph_same {same:.1}% (FAR rule {:.1}%); (c) side-1 {s0:.1}% at a=0 vs {s1:.1}% at a=1; \
         (d) untrained acc_morph_diff {u_diff:.1}%; train {:.0}s, pipeline {:.0}s",
        report.far_point.same.as_ref().map_or(f64::NAN, |m| m.acc_morph),
        run.train_time.as_secs_f64(),
        run.total_time.as_secs_f64()
    );
    let mut failed = Vec::new();
    if !(last < first) {
        failed.push("(a)");
    }
    if !(same < 50.0) {
        failed.push("(b)");
    }
    if !(s0 > s1) {
        failed.push("(c)");
    }
    if !(u_diff > 90.0) {
        failed.push("(d)");
    }
    if run.total_time > Duration::from_secs(15 * 60) {
        failed.push("(time)");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{} failed: {detail}", failed.join(" ")))
    }
}

fn criterion_9(run: &DeskRun) -> Outcome {
    let enc_bytes = std::fs::read(run.encoder()).map_err(err)?;
    let enc = facemorph::checkpoint::load_encoder(&run.encoder()).map_err(err)?;
    let before = enc.params().to_bytes().map_err(err)?;
    let index = DatasetIndex::read_csv(&run.root.join("index").join("index.csv")).map_err(err)?;
    let ds = FaceDataset::load(&run.data(), index).map_err(err)?;
    let cfg = facemorph::cli::read_run_config(&run.run()).map_err(err)?.train;
    let mut t = Trainer::new(cfg, &enc, &ds).map_err(err)?;
    let batch = t.next_batch(Phase::Finetune);
    let alphas = t.draw_alphas(Phase::Finetune, batch.pairs.len());
    t.train_step(&batch, &alphas).map_err(err)?;
    let batch = t.next_batch(Phase::Finetune);
    let alphas = t.draw_alphas(Phase::Finetune, batch.pairs.len());
    let (g, d) = t.inspect_gradients(&batch, &alphas).map_err(err)?;
    let mut checked = 0;
    for (store, grads, what) in [(t.generator.params(), &g, "generator"), (t.discriminator.params(), &d, "discriminator")] {
        for (name, var) in store.trainable() {
            let grad = grads.get(var.as_tensor()).ok_or_else(|| format!("{what} {name}: no gradient"))?;
            let norm = vals(grad).iter().map(|v| v * v).sum::<f64>();
            ensure!(norm > 0.0 && norm.is_finite(), "{what} {name}: gradient norm {norm}");
            checked += 1;
        }
    }
    ensure!(t.generator.params().get("z").is_some(), "latent Z is not a parameter");
    let enc_grad_free = enc.params().trainable().all(|(_, v)| g.get(v.as_tensor()).is_none());
    ensure!(enc_grad_free, "encoder weights received gradients");
    ensure!(enc.params().to_bytes().map_err(err)? == before, "encoder weights changed in memory");
    ensure!(std::fs::read(run.encoder()).map_err(err)? == enc_bytes, "encoder checkpoint changed");
    let hash_in_report = read_report(&run.eval().join("evaluation.json"))?.encoder_gen_hash;
    ensure!(hash_in_report == enc.hash().map_err(err)?, "encoder hash differs from the one used in evaluation");
    Ok(format!("{checked} trainable tensors (including Z) have nonzero gradients; encoder bytes unchanged"))
}

fn criterion_10(a: &DeskRun, b: &DeskRun) -> Outcome {
    let same = |rel: &[&str]| -> Result<(), String> {
        let pa = rel.iter().fold(a.root.clone(), |p, s| p.join(s));
        let pb = rel.iter().fold(b.root.clone(), |p, s| p.join(s));
        let (x, y) = (std::fs::read(&pa).map_err(err)?, std::fs::read(&pb).map_err(err)?);
        ensure!(x == y, "{} differs between runs", rel.join("/"));
        Ok(())
    };
    same(&["run", "loss_log.csv"])?;
    same(&["eval", "evaluation.json"])?;
    same(&["eval", "evaluation_triplet.json"])?;
    same(&["encoder", "encoder.fmck"])?;
    same(&["run", "generator.fmck"])?;
    same(&["protocol", "protocol.csv"])?;
    Ok("loss CSV, evaluation JSONs, encoder, generator and protocol byte-identical across two seeded runs".into())
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    // libtest flags such as `--list` arrive here too; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |k: usize, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {k}: PASS - {d}"),
            Err(d) => println!("criterion {k}: FAIL - {d}"),
        }
        results.push((k, r));
    };
    if want(1) {
        record(1, guarded(criterion_1));
    }
    if want(2) {
        record(2, guarded(criterion_2));
    }
    if want(3) {
        record(3, guarded(criterion_3));
    }
    if want(4) {
        record(4, guarded(criterion_4));
    }
    if want(5) {
        record(5, guarded(|| criterion_5(work.path())));
    }
    if want(6) {
        record(6, guarded(criterion_6));
    }
    if want(7) {
        record(7, guarded(criterion_7));
    }
    if want(8) || want(9) || want(10) {
        let mut run_a = None;
        let pipeline = guarded(|| {
            run_a = Some(desk_pipeline(&work.path().join("desk_a"))?);
            Ok(String::new())
        });
        match (pipeline, run_a) {
            (Ok(_), Some(a)) => {
                if want(8) {
                    record(8, guarded(|| criterion_8(&a)));
                }
                if want(9) {
                    record(9, guarded(|| criterion_9(&a)));
                }
                if want(10) {
                    let r = guarded(|| {
                        let b = desk_pipeline(&work.path().join("desk_b"))?;
                        criterion_10(&a, &b)
                    });
                    record(10, r);
                }
            }
            (r, _) => {
                let e = r.err().unwrap_or_else(|| "no run produced".into());
                for k in [8, 9, 10] {
                    if want(k) {
                        record(k, Err(format!("desk pipeline failed: {e}")));
                    }
                }
            }
        }
    }
    let failed: Vec<usize> = results.iter().filter(|(_, r)| r.is_err()).map(|(k, _)| *k).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
