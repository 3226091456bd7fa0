//! Procedural synthetic faces for desk-scale runs.
//!
//! Each identity is a fixed set of geometry and color parameters (face
//! ellipse, hair, eyes, mouth, a cheek mark, a striped background); every
//! image of that identity re-renders it under a random shift, scale,
//! brightness change, expression jitter and pixel noise.

use std::path::Path;

use image::RgbImage;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::face::FACE_SIZE;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    background: [f64; 3],
    stripe_angle: f64,
    stripe_freq: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    mark: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    hairline: f64,
    eye_gap: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_w: f64,
    mouth_y: f64,
    mouth_curve: f64,
    mark_pos: (f64, f64),
    mark_r: f64,
}

fn color(r: &mut Rng) -> [f64; 3] {
    [r.random_range(0.05..0.95), r.random_range(0.05..0.95), r.random_range(0.05..0.95)]
}

impl IdentityParams {
    pub fn sample(r: &mut Rng) -> Self {
        Self {
            background: color(r),
            stripe_angle: r.random_range(0.0..std::f64::consts::PI),
            stripe_freq: r.random_range(0.08..0.35),
            skin: [r.random_range(0.35..0.95), r.random_range(0.25..0.8), r.random_range(0.15..0.7)],
            hair: color(r),
            iris: color(r),
            lips: color(r),
            mark: color(r),
            face_rx: r.random_range(28.0..40.0),
            face_ry: r.random_range(36.0..48.0),
            hairline: r.random_range(-0.75..-0.35),
            eye_gap: r.random_range(10.0..20.0),
            eye_y: r.random_range(-14.0..-4.0),
            eye_r: r.random_range(3.0..7.0),
            mouth_w: r.random_range(8.0..16.0),
            mouth_y: r.random_range(14.0..26.0),
            mouth_curve: r.random_range(-0.04..0.04),
            mark_pos: (r.random_range(-22.0..22.0), r.random_range(-4.0..14.0)),
            mark_r: r.random_range(3.0..7.0),
        }
    }
}

/// Per-image nuisance parameters.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub brightness: f64,
    pub expression: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Perturbation {
    pub fn sample(r: &mut Rng) -> Self {
        Self {
            dx: r.random_range(-3.0..3.0),
            dy: r.random_range(-3.0..3.0),
            scale: r.random_range(0.94..1.06),
            brightness: r.random_range(0.88..1.12),
            expression: r.random_range(-0.02..0.02),
            noise_std: 0.03,
            noise_seed: r.random(),
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Soft coverage of a signed distance (negative inside).
fn cover(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

pub fn render(id: &IdentityParams, p: &Perturbation) -> RgbImage {
    let mut noise_rng = rng::stream(p.noise_seed, "pixel-noise");
    let noise = Normal::new(0.0, p.noise_std.max(1e-12)).expect("positive std");
    let (cx, cy) = (56.0 + p.dx, 60.0 + p.dy);
    let mut img = RgbImage::new(FACE_SIZE as u32, FACE_SIZE as u32);
    for y in 0..FACE_SIZE {
        for x in 0..FACE_SIZE {
            let (u, v) = ((x as f64 - cx) / p.scale, (y as f64 - cy) / p.scale);
            let (sa, ca) = id.stripe_angle.sin_cos();
            let stripe = 0.5 + 0.5 * ((u * ca + v * sa) * id.stripe_freq).sin();
            let mut c = mix(id.background, [id.background[0] * 0.6, id.background[1] * 0.6, id.background[2] * 0.6], stripe);

            let e = ((u / id.face_rx).powi(2) + (v / id.face_ry).powi(2)).sqrt();
            let face = cover((e - 1.0) * id.face_rx.min(id.face_ry));
            c = mix(c, id.skin, face);
            // hair covers the top of the head above the hairline
            let hair = cover((e - 1.12) * id.face_rx) * cover((v / id.face_ry - id.hairline) * id.face_ry);
            c = mix(c, id.hair, hair);

            for side in [-1.0, 1.0] {
                let (ex, ey) = (side * id.eye_gap, id.eye_y);
                let d = ((u - ex).powi(2) + (v - ey).powi(2)).sqrt();
                c = mix(c, [0.95, 0.95, 0.95], cover(d - id.eye_r * 1.6) * face);
                c = mix(c, id.iris, cover(d - id.eye_r) * face);
            }
            let curve = id.mouth_curve + p.expression;
            let mouth_line = id.mouth_y + curve * u * u;
            let in_mouth = cover((u.abs() - id.mouth_w).max((v - mouth_line).abs() - 2.5));
            c = mix(c, id.lips, in_mouth * face);
            let nose = cover((u.abs() - 1.5).max((v - (id.eye_y + id.mouth_y) * 0.5).abs() - 6.0));
            c = mix(c, mix(id.skin, [0.0, 0.0, 0.0], 0.35), nose * face);
            let dm = ((u - id.mark_pos.0).powi(2) + (v - id.mark_pos.1).powi(2)).sqrt();
            c = mix(c, id.mark, cover(dm - id.mark_r) * face);

            let px = c.map(|ch| ((ch * p.brightness + noise.sample(&mut noise_rng)).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// In-memory synthetic dataset: `(identity, image)` pairs in identity-major order.
pub fn synthesize(n_identities: usize, images_per_identity: usize, seed: u64) -> Result<Vec<(usize, RgbImage)>> {
    if n_identities < 2 {
        bail!(Config, "synthetic dataset needs at least 2 identities, got {n_identities}");
    }
    if images_per_identity == 0 {
        bail!(Config, "images per identity must be positive");
    }
    let mut out = Vec::with_capacity(n_identities * images_per_identity);
    for i in 0..n_identities {
        let mut r = rng::stream(seed, &format!("identity-{i}"));
        let params = IdentityParams::sample(&mut r);
        for _ in 0..images_per_identity {
            out.push((i, render(&params, &Perturbation::sample(&mut r))));
        }
    }
    Ok(out)
}

pub fn identity_dir_name(i: usize) -> String {
    format!("id_{i:03}")
}

/// Writes `root/id_XXX/img_YYY.png`; returns the number of images written.
pub fn generate_synthetic_faces(root: &Path, n_identities: usize, images_per_identity: usize, seed: u64) -> Result<usize> {
    let faces = synthesize(n_identities, images_per_identity, seed)?;
    let mut counters = vec![0usize; n_identities];
    for (id, img) in &faces {
        let dir = root.join(identity_dir_name(*id));
        std::fs::create_dir_all(&dir)?;
        img.save_with_format(dir.join(format!("img_{:03}.png", counters[*id])), image::ImageFormat::Png)?;
        counters[*id] += 1;
    }
    Ok(faces.len())
}
