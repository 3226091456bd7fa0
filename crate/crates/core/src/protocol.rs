//! Verification protocols and morph attack metrics.
//!
//! A triplet protocol lists `(img1, img2, y)` pairs split into 10 folds. The
//! quintuple extension adds a second image per identity (`img1p`, `img2p`)
//! which serves as the evaluation reference while the morph is still built
//! from `img1` and `img2`.
//!
//! For each held-out fold the decision threshold is fitted on the other
//! nine folds' reference distances. An attack on a quintuple succeeds when
//! the morph is accepted against both references (`d1 < t` and `d2 < t`);
//! `acc_morph` is the percentage of quintuples where it fails. Fold results
//! are pooled by summing integer counts.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetIndex, ImageStore};
use crate::encoder::{cosine_distance, EncoderHandle, FaceFeatures};
use crate::error::{bail, Result};
use crate::face::FaceImage;
use crate::morphnet::Generator;
use crate::alpha::AlphaWeights;
use crate::rng;

pub const NUM_FOLDS: usize = 10;
pub const DEFAULT_FAR: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub fold: usize,
    pub y: u8,
    pub id1: String,
    pub img1: String,
    pub id2: String,
    pub img2: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quintuple {
    pub fold: usize,
    pub y: u8,
    pub id1: String,
    pub img1: String,
    pub id2: String,
    pub img2: String,
    pub img1p: String,
    pub img2p: String,
}

impl Quintuple {
    pub fn triplet(&self) -> Triplet {
        Triplet {
            fold: self.fold,
            y: self.y,
            id1: self.id1.clone(),
            img1: self.img1.clone(),
            id2: self.id2.clone(),
            img2: self.img2.clone(),
        }
    }
}

fn check_record(fold: usize, y: u8, id1: &str, id2: &str) -> Result<()> {
    if fold >= NUM_FOLDS {
        bail!(Protocol, "fold {fold} outside 0..{NUM_FOLDS}");
    }
    match y {
        1 if id1 != id2 => bail!(Protocol, "genuine pair with identities {id1} and {id2}"),
        0 if id1 == id2 => bail!(Protocol, "imposter pair with a single identity {id1}"),
        0 | 1 => Ok(()),
        _ => bail!(Protocol, "label must be 0 or 1, got {y}"),
    }
}

pub fn validate_triplets(triplets: &[Triplet]) -> Result<()> {
    for t in triplets {
        check_record(t.fold, t.y, &t.id1, &t.id2)?;
    }
    Ok(())
}

pub fn validate_quintuples(quintuples: &[Quintuple]) -> Result<()> {
    for q in quintuples {
        check_record(q.fold, q.y, &q.id1, &q.id2)?;
        if q.img1 == q.img1p || q.img2 == q.img2p {
            bail!(Protocol, "reference image equals morph input in {q:?}");
        }
    }
    Ok(())
}

fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_triplets(path: &Path, rows: &[Triplet]) -> Result<()> {
    write_records(path, rows)
}

pub fn write_quintuples(path: &Path, rows: &[Quintuple]) -> Result<()> {
    write_records(path, rows)
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let rows = csv::Reader::from_path(path)?.deserialize().collect::<std::result::Result<Vec<Triplet>, _>>()?;
    validate_triplets(&rows)?;
    Ok(rows)
}

pub fn read_quintuples(path: &Path) -> Result<Vec<Quintuple>> {
    let rows = csv::Reader::from_path(path)?.deserialize().collect::<std::result::Result<Vec<Quintuple>, _>>()?;
    validate_quintuples(&rows)?;
    Ok(rows)
}

/// SHA-256 of the CSV serialization.
pub fn protocol_hash(quintuples: &[Quintuple]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for q in quintuples {
        w.serialize(q)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Protocol(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn images_by_identity(index: &DatasetIndex) -> BTreeMap<&str, Vec<&str>> {
    let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in index.entries() {
        map.entry(e.identity_id.as_str()).or_default().push(e.image_path.as_str());
    }
    map
}

/// Fold of the k-th of n records when assigned contiguously.
fn contiguous_fold(k: usize, n: usize) -> usize {
    k * NUM_FOLDS / n.max(1)
}

/// Samples a triplet protocol from an index: genuine pairs are two distinct
/// images of one identity, imposter pairs one image each of two identities.
/// Within every fold genuine pairs precede imposter pairs.
pub fn generate_triplets(index: &DatasetIndex, n_genuine: usize, n_imposter: usize, seed: u64) -> Result<Vec<Triplet>> {
    let by_id = images_by_identity(index);
    let multi: Vec<&str> = by_id.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| *k).collect();
    let ids: Vec<&str> = by_id.keys().copied().collect();
    if n_genuine > 0 && multi.is_empty() {
        bail!(Protocol, "no identity has two images for genuine pairs");
    }
    if n_imposter > 0 && ids.len() < 2 {
        bail!(Protocol, "imposter pairs need at least two identities");
    }
    let mut r = rng::stream(seed, "triplets");
    let mut genuine = Vec::with_capacity(n_genuine);
    for k in 0..n_genuine {
        let id = *multi.choose(&mut r).expect("non-empty");
        let imgs = &by_id[id];
        let a = r.random_range(0..imgs.len());
        let mut b = r.random_range(0..imgs.len() - 1);
        if b >= a {
            b += 1;
        }
        genuine.push(Triplet {
            fold: contiguous_fold(k, n_genuine),
            y: 1,
            id1: id.to_string(),
            img1: imgs[a].to_string(),
            id2: id.to_string(),
            img2: imgs[b].to_string(),
        });
    }
    let mut imposter = Vec::with_capacity(n_imposter);
    for k in 0..n_imposter {
        let i = r.random_range(0..ids.len());
        let mut j = r.random_range(0..ids.len() - 1);
        if j >= i {
            j += 1;
        }
        imposter.push(Triplet {
            fold: contiguous_fold(k, n_imposter),
            y: 0,
            id1: ids[i].to_string(),
            img1: by_id[ids[i]].choose(&mut r).expect("non-empty").to_string(),
            id2: ids[j].to_string(),
            img2: by_id[ids[j]].choose(&mut r).expect("non-empty").to_string(),
        });
    }
    let mut out: Vec<Triplet> = genuine.into_iter().chain(imposter).collect();
    out.sort_by_key(|t| (t.fold, 1 - t.y));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuintupleBuild {
    pub quintuples: Vec<Quintuple>,
    /// Number of triplets that had to be replaced by a resampled pair.
    pub replaced: usize,
}

fn other_image<'a>(imgs: &[&'a str], not: &str, r: &mut rng::Rng) -> &'a str {
    let choices: Vec<&str> = imgs.iter().copied().filter(|x| *x != not).collect();
    choices.choose(r).expect("identity has a second image")
}

/// Extends every triplet with a second image per identity.
///
/// Triplets whose identities lack a second image (or whose images are not
/// in the index) are replaced by a fresh pair with the same label and fold
/// drawn uniformly from identities that do have two images.
pub fn build_quintuples(triplets: &[Triplet], index: &DatasetIndex, seed: u64) -> Result<QuintupleBuild> {
    validate_triplets(triplets)?;
    let by_id = images_by_identity(index);
    let eligible: Vec<&str> = by_id.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| *k).collect();
    if eligible.is_empty() {
        bail!(Protocol, "no identity has at least two images; quintuples cannot be built");
    }
    let usable = |id: &str, img: &str| by_id.get(id).is_some_and(|v| v.len() >= 2 && v.contains(&img));
    let mut r = rng::stream(seed, "quintuples");
    let mut quintuples = Vec::with_capacity(triplets.len());
    let mut replaced = 0;
    for t in triplets {
        let q = if usable(&t.id1, &t.img1) && usable(&t.id2, &t.img2) {
            Quintuple {
                fold: t.fold,
                y: t.y,
                id1: t.id1.clone(),
                img1: t.img1.clone(),
                id2: t.id2.clone(),
                img2: t.img2.clone(),
                img1p: other_image(&by_id[t.id1.as_str()], &t.img1, &mut r).to_string(),
                img2p: other_image(&by_id[t.id2.as_str()], &t.img2, &mut r).to_string(),
            }
        } else {
            replaced += 1;
            let (id1, id2) = if t.y == 1 {
                let id = *eligible.choose(&mut r).expect("non-empty");
                (id, id)
            } else {
                if eligible.len() < 2 {
                    bail!(Protocol, "replacing an imposter pair needs two identities with two images each");
                }
                let i = r.random_range(0..eligible.len());
                let mut j = r.random_range(0..eligible.len() - 1);
                if j >= i {
                    j += 1;
                }
                (eligible[i], eligible[j])
            };
            let img1 = *by_id[id1].choose(&mut r).expect("non-empty");
            let img2 = if t.y == 1 { other_image(&by_id[id2], img1, &mut r) } else { *by_id[id2].choose(&mut r).expect("non-empty") };
            Quintuple {
                fold: t.fold,
                y: t.y,
                id1: id1.to_string(),
                img1: img1.to_string(),
                id2: id2.to_string(),
                img2: img2.to_string(),
                img1p: other_image(&by_id[id1], img1, &mut r).to_string(),
                img2p: other_image(&by_id[id2], img2, &mut r).to_string(),
            }
        };
        quintuples.push(q);
    }
    Ok(QuintupleBuild { quintuples, replaced })
}

/// Number of correct decisions at `t`: genuine pairs accepted (`d < t`)
/// plus imposter pairs rejected.
pub fn verification_correct(distances: &[f64], labels: &[u8], t: f64) -> usize {
    distances
        .iter()
        .zip(labels)
        .filter(|(&d, &y)| if y == 1 { d < t } else { d >= t })
        .count()
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn check_distances(distances: &[f64]) -> Result<()> {
    if distances.is_empty() {
        bail!(Validation, "threshold of an empty distance list");
    }
    if distances.iter().any(|d| !d.is_finite()) {
        bail!(Numeric, "non-finite distance");
    }
    Ok(())
}

/// Threshold maximizing verification accuracy.
///
/// Candidates are the smallest distance (accept nothing), midpoints of
/// consecutive distinct sorted distances, and the value just above the
/// largest distance (accept everything). Ties go to the smallest candidate.
pub fn compute_threshold(distances: &[f64], labels: &[u8]) -> Result<f64> {
    check_distances(distances)?;
    if distances.len() != labels.len() {
        bail!(Validation, "{} distances but {} labels", distances.len(), labels.len());
    }
    let mut order: Vec<(f64, u8)> = distances.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Accepting nothing: every imposter is correct.
    let mut correct = labels.iter().filter(|&&y| y == 0).count() as i64;
    let mut best = (correct, order[0].0);
    let mut i = 0;
    while i < order.len() {
        let d = order[i].0;
        while i < order.len() && order[i].0 == d {
            correct += if order[i].1 == 1 { 1 } else { -1 };
            i += 1;
        }
        let t = match order.get(i) {
            // Adjacent floats have no midpoint strictly between them.
            Some(&(next, _)) => Some(d + (next - d) / 2.0).filter(|&m| m > d).unwrap_or(next),
            None => next_up(d),
        };
        if correct > best.0 {
            best = (correct, t);
        }
    }
    Ok(best.1)
}

/// Largest threshold accepting at most a `far` fraction of imposters.
pub fn compute_far_threshold(imposter: &[f64], far: f64) -> Result<f64> {
    check_distances(imposter)?;
    if !(0.0..=1.0).contains(&far) {
        bail!(Domain, "false accept rate must lie in [0, 1], got {far}");
    }
    let mut s = imposter.to_vec();
    s.sort_by(f64::total_cmp);
    let allowed = (far * s.len() as f64 + 1e-9).floor() as usize;
    Ok(if allowed >= s.len() { next_up(s[s.len() - 1]) } else { s[allowed] })
}

/// Quintuples whose morph is accepted against both references.
pub fn count_double_matches(d1: &[f64], d2: &[f64], t: f64) -> usize {
    d1.iter().zip(d2).filter(|(&a, &b)| a < t && b < t).count()
}

pub fn count_matches(d: &[f64], t: f64) -> usize {
    d.iter().filter(|&&x| x < t).count()
}

fn percent_failed(successes: usize, n: usize) -> Result<f64> {
    if n == 0 {
        bail!(Validation, "accuracy over an empty subset");
    }
    Ok(100.0 * (n - successes) as f64 / n as f64)
}

/// `100 · (1 − |{d1 < t ∧ d2 < t}| / N)`.
pub fn acc_morph(d1: &[f64], d2: &[f64], t: f64) -> Result<f64> {
    if d1.len() != d2.len() {
        bail!(Validation, "distance lists differ in length");
    }
    percent_failed(count_double_matches(d1, d2, t), d1.len())
}

/// `100 · (1 − |{d_side < t}| / N)`.
pub fn acc_per_side(d_side: &[f64], t: f64) -> Result<f64> {
    percent_failed(count_matches(d_side, t), d_side.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    MaxAccuracy,
    Far,
}

/// Per-fold thresholds fitted on the other folds' reference distances.
/// Folds without members get `NaN`.
pub fn fold_thresholds(
    ref_distances: &[f64],
    labels: &[u8],
    folds: &[usize],
    rule: ThresholdRule,
    far: f64,
) -> Result<[f64; NUM_FOLDS]> {
    let mut out = [f64::NAN; NUM_FOLDS];
    for (k, slot) in out.iter_mut().enumerate() {
        if !folds.contains(&k) {
            continue;
        }
        let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != k).collect();
        if train.is_empty() {
            bail!(Protocol, "fold {k} has no training folds");
        }
        let d: Vec<f64> = train.iter().map(|&i| ref_distances[i]).collect();
        let y: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
        *slot = match rule {
            ThresholdRule::MaxAccuracy => compute_threshold(&d, &y)?,
            ThresholdRule::Far => {
                let imp: Vec<f64> = d.iter().zip(&y).filter(|(_, &l)| l == 0).map(|(&x, _)| x).collect();
                if imp.is_empty() {
                    bail!(Protocol, "fold {k}: no imposter pairs to fit a FAR threshold");
                }
                compute_far_threshold(&imp, far)?
            }
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub n: usize,
    pub attack_successes: usize,
    pub acc_morph: f64,
    pub side1_matches: usize,
    pub acc_side1: f64,
    pub side2_matches: usize,
    pub acc_side2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub rule: ThresholdRule,
    pub thresholds: Vec<f64>,
    /// Pooled verification accuracy of the reference pairs, in percent.
    pub verification_accuracy: f64,
    pub same: Option<SubsetMetrics>,
    pub diff: Option<SubsetMetrics>,
}

/// Morph and reference distances of one quintuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub fold: usize,
    pub y: u8,
    pub d1: f64,
    pub d2: f64,
    pub ref_distance: f64,
}

/// Applies per-fold thresholds and pools counts over folds.
pub fn score(rows: &[DistanceRow], rule: ThresholdRule, far: f64) -> Result<OperatingPoint> {
    if rows.is_empty() {
        bail!(Validation, "no distances to score");
    }
    let folds: Vec<usize> = rows.iter().map(|r| r.fold).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.y).collect();
    let refs: Vec<f64> = rows.iter().map(|r| r.ref_distance).collect();
    let thresholds = fold_thresholds(&refs, &labels, &folds, rule, far)?;
    let mut correct = 0;
    let subset = |y: u8| -> Result<Option<SubsetMetrics>> {
        let (mut n, mut both, mut s1, mut s2) = (0, 0, 0, 0);
        for r in rows.iter().filter(|r| r.y == y) {
            let t = thresholds[r.fold];
            n += 1;
            both += usize::from(r.d1 < t && r.d2 < t);
            s1 += usize::from(r.d1 < t);
            s2 += usize::from(r.d2 < t);
        }
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(SubsetMetrics {
            n,
            attack_successes: both,
            acc_morph: percent_failed(both, n)?,
            side1_matches: s1,
            acc_side1: percent_failed(s1, n)?,
            side2_matches: s2,
            acc_side2: percent_failed(s2, n)?,
        }))
    };
    let same = subset(1)?;
    let diff = subset(0)?;
    for r in rows {
        correct += usize::from(if r.y == 1 { r.ref_distance < thresholds[r.fold] } else { r.ref_distance >= thresholds[r.fold] });
    }
    Ok(OperatingPoint {
        rule,
        thresholds: thresholds.to_vec(),
        verification_accuracy: 100.0 * correct as f64 / rows.len() as f64,
        same,
        diff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Second images `img1p`, `img2p`.
    Quintuple,
    /// The morph inputs themselves.
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphReport {
    pub reference: Reference,
    pub alpha: f64,
    pub far: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub max_accuracy: OperatingPoint,
    pub far_point: OperatingPoint,
    pub generator_hash: String,
    pub encoder_gen_hash: String,
    pub encoder_test_hash: String,
    pub protocol_hash: String,
    pub distances: Vec<DistanceRow>,
}

/// Encoders and generator used for an evaluation.
pub struct Attack<'a> {
    pub generator: &'a Generator,
    pub enc_gen: &'a EncoderHandle,
    pub enc_test: &'a EncoderHandle,
}

/// Feature vectors per image path, computed once per encoder.
struct FeatureCache<'a> {
    encoder: &'a EncoderHandle,
    store: &'a dyn ImageStore,
    full: HashMap<String, FaceFeatures>,
}

impl<'a> FeatureCache<'a> {
    fn new(encoder: &'a EncoderHandle, store: &'a dyn ImageStore) -> Self {
        Self { encoder, store, full: HashMap::new() }
    }

    fn prefetch(&mut self, keys: &[&str]) -> Result<()> {
        let mut missing: Vec<&str> = keys.iter().copied().filter(|k| !self.full.contains_key(*k)).collect();
        missing.sort_unstable();
        missing.dedup();
        for chunk in missing.chunks(32) {
            let images = chunk.iter().map(|k| self.store.image(k)).collect::<Result<Vec<FaceImage>>>()?;
            let feats = self.encoder.encode_many(&images.iter().collect::<Vec<_>>(), 32)?.detach();
            for (i, k) in chunk.iter().enumerate() {
                self.full.insert(k.to_string(), feats.get(i)?);
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> &FaceFeatures {
        &self.full[key]
    }

    fn vector(&self, key: &str) -> Result<Vec<f64>> {
        Ok(self.get(key).vectors()?.remove(0))
    }
}

/// Morph distances keyed by generator, encoders, α and protocol. Optionally
/// persisted as JSON files in a directory.
#[derive(Debug, Default)]
pub struct DistanceCache {
    dir: Option<PathBuf>,
    mem: HashMap<String, Vec<(f64, f64)>>,
}

impl DistanceCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: Some(dir.to_path_buf()), mem: HashMap::new() })
    }

    fn key(parts: &[&str], alpha: f64, reference: Reference) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.as_bytes());
            h.update([0]);
        }
        h.update(alpha.to_bits().to_le_bytes());
        h.update([reference as u8]);
        hex::encode(h.finalize())
    }

    fn get(&mut self, key: &str) -> Result<Option<Vec<(f64, f64)>>> {
        if let Some(v) = self.mem.get(key) {
            return Ok(Some(v.clone()));
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            if path.exists() {
                let v: Vec<(f64, f64)> = serde_json::from_slice(&std::fs::read(path)?)?;
                self.mem.insert(key.to_string(), v.clone());
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    fn put(&mut self, key: &str, value: Vec<(f64, f64)>) -> Result<()> {
        if let Some(dir) = &self.dir {
            std::fs::write(dir.join(format!("{key}.json")), serde_json::to_vec(&value)?)?;
        }
        self.mem.insert(key.to_string(), value);
        Ok(())
    }
}

/// Evaluation context: protocol, image source and cached features.
pub struct Evaluator<'a> {
    attack: Attack<'a>,
    quintuples: &'a [Quintuple],
    gen_features: FeatureCache<'a>,
    test_features: FeatureCache<'a>,
    protocol_hash: String,
    hashes: [String; 3],
    morph_vectors: HashMap<u64, Vec<Vec<f64>>>,
    pub batch_size: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(attack: Attack<'a>, quintuples: &'a [Quintuple], store: &'a dyn ImageStore) -> Result<Self> {
        validate_quintuples(quintuples)?;
        if quintuples.is_empty() {
            bail!(Protocol, "empty protocol");
        }
        let hashes = [attack.generator.hash()?, attack.enc_gen.hash()?, attack.enc_test.hash()?];
        Ok(Self {
            gen_features: FeatureCache::new(attack.enc_gen, store),
            test_features: FeatureCache::new(attack.enc_test, store),
            attack,
            quintuples,
            protocol_hash: protocol_hash(quintuples)?,
            hashes,
            morph_vectors: HashMap::new(),
            batch_size: 16,
        })
    }

    fn refs(&self, q: &'a Quintuple, reference: Reference) -> (&'a str, &'a str) {
        match reference {
            Reference::Quintuple => (&q.img1p, &q.img2p),
            Reference::Triplet => (&q.img1, &q.img2),
        }
    }

    /// Reference pair distances under the test encoder.
    pub fn reference_distances(&mut self, reference: Reference) -> Result<Vec<f64>> {
        let keys: Vec<&str> = self.quintuples.iter().flat_map(|q| {
            let (a, b) = self.refs(q, reference);
            [a, b]
        }).collect();
        self.test_features.prefetch(&keys)?;
        self.quintuples
            .iter()
            .map(|q| {
                let (a, b) = self.refs(q, reference);
                cosine_distance(&self.test_features.vector(a)?, &self.test_features.vector(b)?)
            })
            .collect()
    }

    /// Test-encoder embeddings of every quintuple's morph at `alpha`.
    fn morph_vectors(&mut self, alpha: f64) -> Result<Vec<Vec<f64>>> {
        if let Some(v) = self.morph_vectors.get(&alpha.to_bits()) {
            return Ok(v.clone());
        }
        let inputs: Vec<&str> = self.quintuples.iter().flat_map(|q| [q.img1.as_str(), q.img2.as_str()]).collect();
        self.gen_features.prefetch(&inputs)?;
        let mut out = Vec::with_capacity(self.quintuples.len());
        for chunk in self.quintuples.chunks(self.batch_size.max(1)) {
            let f1 = FaceFeatures::cat(&chunk.iter().map(|q| self.gen_features.get(&q.img1)).collect::<Vec<_>>())?;
            let f2 = FaceFeatures::cat(&chunk.iter().map(|q| self.gen_features.get(&q.img2)).collect::<Vec<_>>())?;
            let w = AlphaWeights::uniform(alpha, chunk.len())?;
            let morphs = self.attack.generator.forward(&f1, &f2, &w, false)?.detach();
            out.extend(self.attack.enc_test.forward(&morphs)?.vectors()?);
        }
        self.morph_vectors.insert(alpha.to_bits(), out.clone());
        Ok(out)
    }

    /// `(d(f_m, f_ref1), d(f_m, f_ref2))` per quintuple at `alpha`.
    pub fn morph_distances(&mut self, alpha: f64, reference: Reference, cache: &mut DistanceCache) -> Result<Vec<(f64, f64)>> {
        crate::alpha::split(alpha)?;
        let key = DistanceCache::key(
            &[&self.hashes[0], &self.hashes[1], &self.hashes[2], &self.protocol_hash],
            alpha,
            reference,
        );
        if let Some(v) = cache.get(&key)? {
            return Ok(v);
        }
        let refs: Vec<&str> = self.quintuples.iter().flat_map(|q| {
            let (a, b) = self.refs(q, reference);
            [a, b]
        }).collect();
        self.test_features.prefetch(&refs)?;
        let morphs = self.morph_vectors(alpha)?;
        let mut out = Vec::with_capacity(self.quintuples.len());
        for (q, m) in self.quintuples.iter().zip(&morphs) {
            let (a, b) = self.refs(q, reference);
            out.push((
                cosine_distance(m, &self.test_features.vector(a)?)?,
                cosine_distance(m, &self.test_features.vector(b)?)?,
            ));
        }
        cache.put(&key, out.clone())?;
        Ok(out)
    }

    pub fn evaluate(&mut self, alpha: f64, reference: Reference, far: f64, cache: &mut DistanceCache) -> Result<MorphReport> {
        let refs = self.reference_distances(reference)?;
        let morph = self.morph_distances(alpha, reference, cache)?;
        let distances: Vec<DistanceRow> = self
            .quintuples
            .iter()
            .zip(refs.iter().zip(&morph))
            .map(|(q, (&r, &(d1, d2)))| DistanceRow { fold: q.fold, y: q.y, d1, d2, ref_distance: r })
            .collect();
        let n_same = distances.iter().filter(|r| r.y == 1).count();
        Ok(MorphReport {
            reference,
            alpha,
            far,
            n_same,
            n_diff: distances.len() - n_same,
            max_accuracy: score(&distances, ThresholdRule::MaxAccuracy, far)?,
            far_point: score(&distances, ThresholdRule::Far, far)?,
            generator_hash: self.hashes[0].clone(),
            encoder_gen_hash: self.hashes[1].clone(),
            encoder_test_hash: self.hashes[2].clone(),
            protocol_hash: self.protocol_hash.clone(),
            distances,
        })
    }

    /// Imposter-subset accuracies at the max-accuracy operating point for
    /// each α.
    pub fn sweep_alpha(&mut self, alphas: &[f64], reference: Reference, cache: &mut DistanceCache) -> Result<Vec<SweepRow>> {
        alphas
            .iter()
            .map(|&alpha| {
                let report = self.evaluate(alpha, reference, DEFAULT_FAR, cache)?;
                let point = &report.max_accuracy;
                let diff = point.diff.as_ref();
                Ok(SweepRow {
                    alpha,
                    acc_morph: diff.map_or(f64::NAN, |m| m.acc_morph),
                    acc_side1: diff.map_or(f64::NAN, |m| m.acc_side1),
                    acc_side2: diff.map_or(f64::NAN, |m| m.acc_side2),
                    acc_morph_same: point.same.as_ref().map_or(f64::NAN, |m| m.acc_morph),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub acc_morph: f64,
    pub acc_side1: f64,
    pub acc_side2: f64,
    pub acc_morph_same: f64,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_records(path, rows)
}

/// Scatter rows with the threshold that applied to each quintuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub fold: usize,
    pub y: u8,
    pub d1: f64,
    pub d2: f64,
    pub t_max_accuracy: f64,
    pub t_far: f64,
}

pub fn scatter_rows(report: &MorphReport) -> Vec<ScatterRow> {
    report
        .distances
        .iter()
        .map(|r| ScatterRow {
            fold: r.fold,
            y: r.y,
            d1: r.d1,
            d2: r.d2,
            t_max_accuracy: report.max_accuracy.thresholds[r.fold],
            t_far: report.far_point.thresholds[r.fold],
        })
        .collect()
}

pub fn write_scatter(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    write_records(path, rows)
}

pub fn read_scatter(path: &Path) -> Result<Vec<ScatterRow>> {
    Ok(csv::Reader::from_path(path)?.deserialize().collect::<std::result::Result<Vec<ScatterRow>, _>>()?)
}
