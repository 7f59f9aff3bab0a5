//! Procedural eye renders with exact annotations, and a hidden corruption
//! process that plays the part of unlabeled real data.
//!
//! Geometry for image `i` of a set comes from its own generator derived from
//! `(seed, i)`, so `simulate` and `realize` with the same seed render the
//! same eyes; only `realize` adds corruption.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const GEOMETRY_STREAM: u64 = 0x5eed_0000;
const CORRUPTION_STREAM: u64 = 0xc0de_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    /// Amplitude in pixels of the pupil-boundary wobble.
    pub jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            noise_sigma: 0.05,
            blur_radius: 1,
            gain: (0.85, 1.15),
            bias: (-0.05, 0.05),
            jitter: 0.5,
        }
    }
}

impl WorldConfig {
    /// Same geometry, corruption switched off.
    pub fn clean(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            blur_radius: 0,
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            jitter: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        let finite = [self.noise_sigma, self.gain.0, self.gain.1, self.bias.0, self.bias.1, self.jitter];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("corruption parameters must be finite"));
        }
        if self.noise_sigma < 0.0 || self.jitter < 0.0 {
            return Err(Error::invalid("noise and jitter must be non-negative"));
        }
        if self.gain.0 > self.gain.1 || self.bias.0 > self.bias.1 {
            return Err(Error::invalid("gain and bias ranges must be ordered (lo, hi)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Synthetic,
    Refined,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Pupil centre in pixel units; pixel `(x, y)` covers `[x, x+1) × [y, y+1)`.
    pub pupil: [f64; 2],
    /// Unit gaze direction in the image plane.
    pub gaze: [f64; 2],
}

impl Annotation {
    pub fn to_target(&self, width: usize, height: usize) -> [f64; 4] {
        [
            self.pupil[0] / width as f64,
            self.pupil[1] / height as f64,
            self.gaze[0],
            self.gaze[1],
        ]
    }
}

/// An image with its label, if it is allowed to have one. Real images are
/// constructed without a label and none can be attached afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pixels: Tensor,
    annotation: Option<Annotation>,
    role: Role,
}

impl AnnotatedImage {
    pub fn labeled(pixels: Tensor, annotation: Annotation, role: Role) -> Result<Self> {
        if role == Role::Real {
            return Err(Error::Unlabeled("real images cannot carry annotations".into()));
        }
        check_pixels(&pixels)?;
        Ok(Self {
            pixels,
            annotation: Some(annotation),
            role,
        })
    }

    pub fn unlabeled(pixels: Tensor) -> Result<Self> {
        check_pixels(&pixels)?;
        Ok(Self {
            pixels,
            annotation: None,
            role: Role::Real,
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn annotation(&self) -> Option<&Annotation> {
        self.annotation.as_ref()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Same label, new pixels: how refined images inherit annotations.
    pub fn with_pixels(&self, pixels: Tensor, role: Role) -> Result<Self> {
        match self.annotation {
            Some(a) => Self::labeled(pixels, a, role),
            None => Self::unlabeled(pixels),
        }
    }
}

fn check_pixels(t: &Tensor) -> Result<()> {
    if t.shape().len() != 3 || t.shape()[0] != 1 {
        return Err(Error::invalid(format!("expected a 1xHxW image, got {:?}", t.shape())));
    }
    Ok(())
}

/// Ground truth for a real split. Only evaluation code inside this crate can
/// read it.
#[derive(Clone, Debug)]
pub struct HeldOutTruth {
    pub(crate) annotations: Vec<Annotation>,
}

impl HeldOutTruth {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cx: f64,
    cy: f64,
    gaze: [f64; 2],
    rx: f64,
    ry: f64,
    iris_r: f64,
    sclera_peak: f64,
    sclera_falloff: f64,
    iris_level: f64,
    pupil_level: f64,
}

impl Geometry {
    fn sample(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.height.min(cfg.width) as f64 / 32.0;
        let theta = rng.random_range(0.0..2.0 * PI);
        let reach = rng.random_range(0.5 * s..6.5 * s);
        let gaze = [theta.cos(), theta.sin()];
        let rx = rng.random_range(2.2 * s..3.2 * s);
        let ry = rx * rng.random_range(0.85..1.15);
        Self {
            cx: cfg.width as f64 / 2.0 + reach * gaze[0],
            cy: cfg.height as f64 / 2.0 + reach * gaze[1],
            gaze,
            rx,
            ry,
            iris_r: 0.5 * (rx + ry) * rng.random_range(1.8..2.1),
            sclera_peak: rng.random_range(0.80..0.90),
            sclera_falloff: rng.random_range(0.10..0.15),
            iris_level: rng.random_range(0.35..0.45),
            pupil_level: rng.random_range(0.05..0.12),
        }
    }

    fn annotation(&self) -> Annotation {
        Annotation {
            pupil: [self.cx, self.cy],
            gaze: self.gaze,
        }
    }
}

/// Low-frequency radial wobble of the pupil outline.
struct Wobble {
    amp: f64,
    terms: [(f64, f64); 3],
}

impl Wobble {
    fn sample(amp: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut terms = [(0.0, 0.0); 3];
        for t in terms.iter_mut() {
            *t = (rng.random_range(0.0..1.0), rng.random_range(0.0..2.0 * PI));
        }
        Self { amp, terms }
    }

    fn at(&self, phi: f64) -> f64 {
        let norm: f64 = self.terms.iter().map(|t| t.0).sum::<f64>().max(1e-12);
        let s: f64 = self
            .terms
            .iter()
            .enumerate()
            .map(|(k, &(a, p))| a * ((k + 2) as f64 * phi + p).sin())
            .sum();
        self.amp * s / norm
    }
}

fn render(cfg: &WorldConfig, g: &Geometry, wobble: Option<&Wobble>) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let (mx, my) = (w as f64 / 2.0, h as f64 / 2.0);
    let r2 = mx.min(my).powi(2);
    let rmean = 0.5 * (g.rx + g.ry);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let sclera = g.sclera_peak - g.sclera_falloff * ((px - mx).powi(2) + (py - my).powi(2)) / r2;
            let (dx, dy) = (px - g.cx, py - g.cy);
            let d = (dx * dx + dy * dy).sqrt();
            let iris_cov = (g.iris_r - d + 0.5).clamp(0.0, 1.0);
            let iris = g.iris_level * (0.9 + 0.1 * (d / g.iris_r).min(1.0));
            let q = ((dx / g.rx).powi(2) + (dy / g.ry).powi(2)).sqrt();
            let edge = match wobble {
                Some(wb) => 1.0 + wb.at(dy.atan2(dx)) / rmean,
                None => 1.0,
            };
            let pupil_cov = (0.5 - (q - edge) * rmean).clamp(0.0, 1.0);
            let v = sclera * (1.0 - iris_cov) + iris * iris_cov;
            let v = v * (1.0 - pupil_cov) + g.pupil_level * pupil_cov;
            out.push(v as f32);
        }
    }
    out
}

fn image(cfg: &WorldConfig, data: Vec<f32>) -> Tensor {
    Tensor::new(vec![1, cfg.height, cfg.width], data).expect("render size matches config")
}

/// Clean labeled renders, deterministic per `(seed, index)`.
pub fn simulate(cfg: &WorldConfig, n: usize, seed: u64) -> Result<Vec<AnnotatedImage>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let mut r = rng::derive(seed, GEOMETRY_STREAM + i as u64);
            let g = Geometry::sample(cfg, &mut r);
            AnnotatedImage::labeled(image(cfg, render(cfg, &g, None)), g.annotation(), Role::Synthetic)
        })
        .collect()
}

fn corrupt(cfg: &WorldConfig, mut px: Vec<f32>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if cfg.blur_radius > 0 {
        px = box_blur(&px, cfg.height, cfg.width, cfg.blur_radius);
    }
    let gain = if cfg.gain.0 < cfg.gain.1 {
        rng.random_range(cfg.gain.0..=cfg.gain.1)
    } else {
        cfg.gain.0
    };
    let bias = if cfg.bias.0 < cfg.bias.1 {
        rng.random_range(cfg.bias.0..=cfg.bias.1)
    } else {
        cfg.bias.0
    };
    if gain != 1.0 || bias != 0.0 {
        for v in px.iter_mut() {
            *v = (gain * *v as f64 + bias) as f32;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        for v in px.iter_mut() {
            *v = (*v as f64 + noise.sample(rng)) as f32;
        }
    }
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    px
}

/// Separable box filter with replicated borders.
fn box_blur(px: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let norm = (2 * r + 1) as f64;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| px[y * w + clampi(x as isize + d, w)] as f64)
                .sum();
            tmp[y * w + x] = (s / norm) as f32;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| tmp[clampi(y as isize + d, h) * w + x] as f64)
                .sum();
            out[y * w + x] = (s / norm) as f32;
        }
    }
    out
}

/// Corrupted renders with their truth kept aside for evaluation.
pub fn realize_with_truth(cfg: &WorldConfig, n: usize, seed: u64) -> Result<(Vec<AnnotatedImage>, HeldOutTruth)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut images = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::derive(seed, GEOMETRY_STREAM + i as u64);
        let g = Geometry::sample(cfg, &mut r);
        let mut c = rng::derive(seed, CORRUPTION_STREAM + i as u64);
        let wobble = (cfg.jitter > 0.0).then(|| Wobble::sample(cfg.jitter, &mut c));
        let px = corrupt(cfg, render(cfg, &g, wobble.as_ref()), &mut c);
        images.push(AnnotatedImage::unlabeled(image(cfg, px))?);
        truth.push(g.annotation());
    }
    Ok((images, HeldOutTruth { annotations: truth }))
}

/// Corrupted renders without labels.
pub fn realize(cfg: &WorldConfig, n: usize, seed: u64) -> Result<Vec<AnnotatedImage>> {
    realize_with_truth(cfg, n, seed).map(|(images, _)| images)
}

/// Stacks images into an `N×1×H×W` batch.
pub fn stack_pixels(images: &[AnnotatedImage]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = images.iter().map(|i| i.pixels()).collect();
    Tensor::stack(&refs)
}

/// Intensity-weighted centroid of the darkest intensity class.
///
/// A three-class Otsu split separates pupil, iris and sclera; pixels below
/// the lower threshold contribute with weight `threshold - value`, which
/// keeps anti-aliased edge pixels in proportion to their coverage.
pub fn pupil_center_oracle(img: &Tensor) -> Result<(f64, f64)> {
    let s = img.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => return Err(Error::invalid(format!("oracle expects a single-channel image, got {s:?}"))),
    };
    let px = img.data();
    let t = dark_threshold(px).ok_or(Error::NoPupil)?;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = px[y * w + x] as f64;
            if v < t {
                let wt = t - v;
                sw += wt;
                sx += wt * (x as f64 + 0.5);
                sy += wt * (y as f64 + 0.5);
            }
        }
    }
    if sw <= 0.0 {
        return Err(Error::NoPupil);
    }
    Ok((sx / sw, sy / sw))
}

const BINS: usize = 128;

/// Lower threshold of a three-class Otsu split, or `None` for an image
/// without enough contrast to contain a pupil.
fn dark_threshold(px: &[f32]) -> Option<f64> {
    let (lo, hi) = px
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
    if !lo.is_finite() || hi - lo < 0.1 {
        return None;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0f64; BINS];
    for &v in px {
        let b = (((v as f64 - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1.0;
    }
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    // prefix sums of count and first moment
    let mut n = [0f64; BINS + 1];
    let mut m = [0f64; BINS + 1];
    for b in 0..BINS {
        n[b + 1] = n[b] + hist[b];
        m[b + 1] = m[b] + hist[b] * centre(b);
    }
    let class = |a: usize, b: usize| {
        let c = n[b] - n[a];
        if c > 0.0 {
            let mu = m[b] - m[a];
            mu * mu / c
        } else {
            0.0
        }
    };
    let mut best = (f64::NEG_INFINITY, 0usize);
    for t1 in 1..BINS - 1 {
        if n[t1] == 0.0 {
            continue;
        }
        for t2 in t1 + 1..BINS {
            if n[t2] == n[t1] || n[BINS] == n[t2] {
                continue;
            }
            let score = class(0, t1) + class(t1, t2) + class(t2, BINS);
            if score > best.0 {
                best = (score, t1);
            }
        }
    }
    if best.0.is_finite() {
        Some(lo + best.1 as f64 * width)
    } else {
        None
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    role: Role,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    world: WorldConfig,
}

const DATASET_VERSION: u32 = 1;

/// Writes `manifest.json`, `images.tns` and, for labeled sets,
/// `annotations.csv`.
pub fn save_dataset(dir: &Path, images: &[AnnotatedImage], world: &WorldConfig, seed: u64) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::invalid("empty dataset"))?;
    let role = first.role();
    if images.iter().any(|i| i.role() != role) {
        return Err(Error::invalid("a dataset must have a single role"));
    }
    fs::create_dir_all(dir)?;
    let stack = stack_pixels(images)?;
    stack.write_tns1(dir.join("images.tns"))?;
    if role != Role::Real {
        let mut wr = csv::Writer::from_path(dir.join("annotations.csv"))?;
        wr.write_record(["index", "pupil_x", "pupil_y", "gaze_x", "gaze_y"])?;
        for (i, img) in images.iter().enumerate() {
            let a = img.annotation().expect("labeled role");
            wr.write_record([
                i.to_string(),
                a.pupil[0].to_string(),
                a.pupil[1].to_string(),
                a.gaze[0].to_string(),
                a.gaze[1].to_string(),
            ])?;
        }
        wr.flush()?;
    }
    let s = stack.shape();
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        role,
        count: images.len(),
        height: s[2],
        width: s[3],
        seed,
        world: world.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub struct LoadedDataset {
    pub images: Vec<AnnotatedImage>,
    pub world: WorldConfig,
    pub seed: u64,
    pub role: Role,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let mpath = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Incompatible(format!("dataset version {}", manifest.version)));
    }
    let tpath = dir.join("images.tns");
    let stack = Tensor::read_tns1(&tpath)?;
    if stack.shape() != [manifest.count, 1, manifest.height, manifest.width] {
        return Err(Error::corrupt(
            tpath,
            format!("stack shape {:?} disagrees with manifest", stack.shape()),
        ));
    }
    let pixels = stack.unstack();
    let images = if manifest.role == Role::Real {
        pixels.into_iter().map(AnnotatedImage::unlabeled).collect::<Result<Vec<_>>>()?
    } else {
        let apath = dir.join("annotations.csv");
        let mut rd = csv::Reader::from_path(&apath)?;
        let mut anns = Vec::with_capacity(manifest.count);
        for rec in rd.deserialize() {
            let (_, px, py, gx, gy): (usize, f64, f64, f64, f64) = rec?;
            anns.push(Annotation {
                pupil: [px, py],
                gaze: [gx, gy],
            });
        }
        if anns.len() != manifest.count {
            return Err(Error::corrupt(apath, format!("{} rows for {} images", anns.len(), manifest.count)));
        }
        pixels
            .into_iter()
            .zip(anns)
            .map(|(p, a)| AnnotatedImage::labeled(p, a, manifest.role))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(LoadedDataset {
        images,
        world: manifest.world,
        seed: manifest.seed,
        role: manifest.role,
    })
}

/// Regenerates the truth for a real split from its manifest. The truth is
/// never written to disk.
pub(crate) fn regenerate_truth(data: &LoadedDataset) -> Result<HeldOutTruth> {
    if data.role != Role::Real {
        return Err(Error::invalid("held-out truth exists only for real splits"));
    }
    let (images, truth) = realize_with_truth(&data.world, data.images.len(), data.seed)?;
    let same = images.iter().zip(&data.images).all(|(a, b)| a.pixels().bits().eq(b.pixels().bits()));
    if !same {
        return Err(Error::Incompatible(
            "real split does not match its manifest; it was modified or produced elsewhere".into(),
        ));
    }
    Ok(truth)
}

#[cfg(test)]
mod tests;
