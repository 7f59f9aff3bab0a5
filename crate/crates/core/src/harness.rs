//! Downstream evaluation: a small pupil/gaze regressor trained on synthetic
//! or refined images and tested on the real split, annotation drift, the
//! realism probe, and the human-study exports.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{sgd_step, Tape};
use crate::nets::{build_discriminator, mean_channel0, save_checkpoint, ArchDescriptor, DiscArch, Refiner};
use crate::objectives::loss_discriminator;
use crate::params::{NetKind, NetParams};
use crate::rng;
use crate::tensor::Tensor;
use crate::toyworld::{pupil_center_oracle, regenerate_truth, AnnotatedImage, HeldOutTruth, LoadedDataset, Role};

mod gradsuite;
pub use gradsuite::{gradient_suite, GRAD_TOLERANCE};

pub const CURVE_THRESHOLDS: [f64; 7] = [0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub height: usize,
    pub width: usize,
    pub filters: [usize; 3],
    pub hidden: usize,
}

impl Default for PredictorArch {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            filters: [8, 16, 32],
            hidden: 64,
        }
    }
}

impl PredictorArch {
    fn flat_features(&self) -> usize {
        self.filters[2] * (self.height / 8) * (self.width / 8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub arch: PredictorArch,
    pub params: NetParams,
}

/// Conv3x3 → ReLU → MaxPool2 three times, then two fully connected layers.
pub fn build_predictor(arch: &PredictorArch, seed: u64) -> Result<Predictor> {
    if arch.height < 8 || arch.width < 8 || arch.filters.contains(&0) || arch.hidden == 0 {
        return Err(Error::invalid(format!("bad predictor architecture {arch:?}")));
    }
    let mut rng = rng::derive(seed, 3);
    let mut p = NetParams::new(NetKind::Predictor);
    let mut c = 1;
    for (i, &f) in arch.filters.iter().enumerate() {
        p.push(format!("conv{i}.w"), he(&mut rng, &[f, c, 3, 3]))?;
        p.push(format!("conv{i}.b"), Tensor::zeros(&[f]))?;
        c = f;
    }
    p.push("fc0.w", he(&mut rng, &[arch.hidden, arch.flat_features()]))?;
    p.push("fc0.b", Tensor::zeros(&[arch.hidden]))?;
    p.push("fc1.w", he(&mut rng, &[4, arch.hidden]))?;
    p.push("fc1.b", Tensor::zeros(&[4]))?;
    Ok(Predictor {
        arch: arch.clone(),
        params: p,
    })
}

fn he(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

impl Predictor {
    fn graph(&self, tape: &mut Tape, bound: &crate::grad::Bound, input: crate::grad::NodeId) -> Result<crate::grad::NodeId> {
        let s = tape.shape(input);
        if s.len() != 4 || s[1] != 1 || s[2] != self.arch.height || s[3] != self.arch.width {
            return Err(Error::ShapeMismatch {
                op: "predictor input",
                left: s.to_vec(),
                right: vec![1, self.arch.height, self.arch.width],
            });
        }
        let mut x = tape.affine(input, 2.0, -1.0);
        for i in 0..3 {
            x = tape.conv2d(x, bound.get(2 * i), Some(bound.get(2 * i + 1)), 1, 1)?;
            x = tape.relu(x);
            x = tape.maxpool(x, 2, 2)?;
        }
        let h = tape.linear(x, bound.get(6), Some(bound.get(7)))?;
        let h = tape.relu(h);
        tape.linear(h, bound.get(8), Some(bound.get(9)))
    }

    /// Raw outputs `(cx/W, cy/H, gx, gy)` for an `N×1×H×W` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<[f64; 4]>> {
        let mut out = Vec::with_capacity(batch.shape()[0]);
        for part in batch.unstack().chunks(128) {
            let refs: Vec<&Tensor> = part.iter().collect();
            let mut tape = Tape::new();
            let bound = tape.bind_frozen(&self.params);
            let x = tape.constant(Tensor::stack(&refs)?);
            let y = self.graph(&mut tape, &bound, x)?;
            out.extend(
                tape.value(y)
                    .data()
                    .chunks(4)
                    .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64]),
            );
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let arch = serde_json::to_value(&self.arch)?;
        save_checkpoint(dir, &self.params, &ArchDescriptor::Predictor(arch), None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = crate::nets::load_checkpoint(dir)?;
        match ck.arch {
            ArchDescriptor::Predictor(v) => {
                let arch: PredictorArch = serde_json::from_value(v)?;
                let expected = build_predictor(&arch, 0)?.params;
                crate::nets::check_layout(&ck.params, &expected)?;
                Ok(Self { arch, params: ck.params })
            }
            _ => Err(Error::Incompatible("not a predictor checkpoint".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// SGD steps over which the rate ramps linearly up to `lr`.
    pub warmup_steps: usize,
    pub batch: usize,
    pub arch: PredictorArch,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            lr: 1e-3,
            warmup_steps: 200,
            batch: 32,
            arch: PredictorArch::default(),
        }
    }
}

fn targets(images: &[AnnotatedImage], arch: &PredictorArch) -> Result<Vec<[f64; 4]>> {
    images
        .iter()
        .map(|img| {
            if img.role() == Role::Real {
                return Err(Error::Unlabeled(
                    "real images have no annotations; train on synthetic or refined images".into(),
                ));
            }
            let a = img
                .annotation()
                .ok_or_else(|| Error::Unlabeled("image without annotation".into()))?;
            Ok(a.to_target(arch.width, arch.height))
        })
        .collect()
}

/// SGD on the summed squared error of the 4-vector target. Refined images
/// carry the annotation of the synthetic image they came from. Returns the
/// predictor and the mean per-image loss of each epoch.
pub fn train_predictor(images: &[AnnotatedImage], cfg: &PredictorConfig) -> Result<(Predictor, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::invalid("predictor batch, epochs and lr must be positive"));
    }
    let ys = targets(images, &cfg.arch)?;
    let mut pred = build_predictor(&cfg.arch, cfg.seed)?;
    let mut rng = rng::derive(cfg.seed, 4);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| images[i].pixels()).collect();
            let target: Vec<f32> = chunk.iter().flat_map(|&i| ys[i].map(|v| v as f32)).collect();
            let mut tape = Tape::new();
            let bound = tape.bind(&pred.params);
            let x = tape.constant(Tensor::stack(&refs)?);
            let t = tape.constant(Tensor::new(vec![chunk.len(), 4], target)?);
            let y = pred.graph(&mut tape, &bound, x)?;
            let loss = tape.squared_diff(y, t)?;
            let v = tape.scalar(loss) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("predictor loss {v} in epoch {epoch}")));
            }
            total += v;
            tape.backward(loss)?;
            bound.store_grads(&tape, &mut pred.params)?;
            step += 1;
            let ramp = if step < cfg.warmup_steps { step as f64 / cfg.warmup_steps as f64 } else { 1.0 };
            sgd_step(&mut pred.params, cfg.lr * ramp)?;
        }
        history.push(total / images.len() as f64);
    }
    Ok((pred, history))
}

/// Fraction of errors at or below each threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    pub thresholds: Vec<f64>,
    pub fraction_within: Vec<f64>,
}

impl CumulativeCurve {
    pub fn from_errors(errors: &[f64], thresholds: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("no errors to summarise"));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("thresholds must be strictly ascending"));
        }
        let n = errors.len() as f64;
        let fraction_within = thresholds
            .iter()
            .map(|&d| errors.iter().filter(|&&e| e <= d).count() as f64 / n)
            .collect();
        Ok(Self {
            thresholds: thresholds.to_vec(),
            fraction_within,
        })
    }

    pub fn at(&self, d: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == d).map(|i| self.fraction_within[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_px: f64,
    pub median_px: f64,
    pub mean_deg: f64,
    pub px_curve: CumulativeCurve,
    pub deg_curve: CumulativeCurve,
}

impl EvalReport {
    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "fraction_within_px", "fraction_within_deg"])?;
        for (i, t) in self.px_curve.thresholds.iter().enumerate() {
            w.write_record([
                t.to_string(),
                self.px_curve.fraction_within[i].to_string(),
                self.deg_curve.fraction_within[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pupil error in pixels and gaze error in degrees of each prediction.
pub fn prediction_errors(outputs: &[[f64; 4]], truth: &[crate::toyworld::Annotation], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    outputs
        .iter()
        .zip(truth)
        .map(|(o, a)| {
            let px = ((o[0] * w as f64 - a.pupil[0]).powi(2) + (o[1] * h as f64 - a.pupil[1]).powi(2)).sqrt();
            let norm = (o[2] * o[2] + o[3] * o[3]).sqrt();
            let deg = if norm > 0.0 {
                ((o[2] * a.gaze[0] + o[3] * a.gaze[1]) / norm).clamp(-1.0, 1.0).acos().to_degrees()
            } else {
                90.0
            };
            (px, deg)
        })
        .unzip()
}

fn summarise(px: Vec<f64>, deg: Vec<f64>) -> Result<EvalReport> {
    if px.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let n = px.len() as f64;
    let mut sorted = px.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(EvalReport {
        mean_px: px.iter().sum::<f64>() / n,
        median_px: median,
        mean_deg: deg.iter().sum::<f64>() / n,
        px_curve: CumulativeCurve::from_errors(&px, &CURVE_THRESHOLDS)?,
        deg_curve: CumulativeCurve::from_errors(&deg, &CURVE_THRESHOLDS)?,
    })
}

/// Scores a predictor on a real split against its held-out truth.
pub fn eval_predictor(pred: &Predictor, real: &[AnnotatedImage], truth: &HeldOutTruth) -> Result<EvalReport> {
    if real.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if real.len() != truth.annotations.len() {
        return Err(Error::invalid("test images and held-out truth differ in length"));
    }
    let out = pred.predict(&crate::toyworld::stack_pixels(real)?)?;
    let (px, deg) = prediction_errors(&out, &truth.annotations, pred.arch.width, pred.arch.height);
    summarise(px, deg)
}

/// Scores a predictor on labeled (synthetic or refined) images.
pub fn eval_labeled(pred: &Predictor, images: &[AnnotatedImage]) -> Result<EvalReport> {
    let truth: Vec<_> = images
        .iter()
        .map(|i| i.annotation().copied().ok_or_else(|| Error::Unlabeled("image without annotation".into())))
        .collect::<Result<_>>()?;
    if truth.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let out = pred.predict(&crate::toyworld::stack_pixels(images)?)?;
    let (px, deg) = prediction_errors(&out, &truth, pred.arch.width, pred.arch.height);
    summarise(px, deg)
}

/// Scores a predictor on a real split saved with `save_dataset`, rebuilding
/// the truth from the generator rather than from disk.
pub fn eval_real_dataset(pred: &Predictor, data: &LoadedDataset) -> Result<EvalReport> {
    let truth = regenerate_truth(data)?;
    eval_predictor(pred, &data.images, &truth)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub mean_px: f64,
    pub std_px: f64,
    pub evaluated: usize,
    pub oracle_failures: usize,
}

pub const MIN_DRIFT_SET: usize = 100;

/// Pupil-centre displacement between each synthetic image and `refine(image)`.
/// Pairs where the oracle fails on either side are skipped; more than 5%
/// failures aborts.
pub fn annotation_drift_with<F>(synthetic: &[Tensor], mut refine: F) -> Result<DriftReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if synthetic.len() < MIN_DRIFT_SET {
        return Err(Error::invalid(format!(
            "drift needs at least {MIN_DRIFT_SET} images, got {}",
            synthetic.len()
        )));
    }
    let mut d = Vec::with_capacity(synthetic.len());
    let mut failures = 0;
    for (i, x) in synthetic.iter().enumerate() {
        let y = refine(x)?;
        match (pupil_center_oracle(x), pupil_center_oracle(&y)) {
            (Ok(a), Ok(b)) => d.push(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()),
            _ => {
                failures += 1;
                if failures * 20 > synthetic.len() {
                    return Err(Error::invalid(format!(
                        "pupil oracle failed on more than 5% of images (latest: image {i})"
                    )));
                }
            }
        }
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(DriftReport {
        mean_px: mean,
        std_px: var.sqrt(),
        evaluated: d.len(),
        oracle_failures: failures,
    })
}

/// [`annotation_drift_with`] for a trained refiner.
pub fn annotation_drift(refiner: &Refiner, synthetic: &[AnnotatedImage]) -> Result<DriftReport> {
    let pixels: Vec<Tensor> = synthetic.iter().map(|i| i.pixels().clone()).collect();
    let stack = crate::toyworld::stack_pixels(synthetic)?;
    let refined = refiner.refine_all(&stack, 64)?.unstack();
    let mut it = refined.into_iter();
    annotation_drift_with(&pixels, |_| Ok(it.next().expect("one output per input")))
}

/// Refines labeled images; each output keeps its source annotation.
pub fn refine_dataset(refiner: &Refiner, images: &[AnnotatedImage]) -> Result<Vec<AnnotatedImage>> {
    let stack = crate::toyworld::stack_pixels(images)?;
    let out = refiner.refine_all(&stack, 64)?.unstack();
    images
        .iter()
        .zip(out)
        .map(|(src, px)| src.with_pixels(px, Role::Refined))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub arch: DiscArch,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: crate::trainer::DESK_LR,
            seed: 0,
            arch: DiscArch::desk(),
        }
    }
}

/// Trains a fresh discriminator to tell `fake_train` from `real_train`,
/// then reports its mean P_fake on `fake_eval`. Lower means the fakes are
/// harder to tell from real images.
pub fn probe_realism(
    fake_train: &[Tensor],
    real_train: &[Tensor],
    fake_eval: &[Tensor],
    cfg: &ProbeConfig,
) -> Result<f64> {
    use rand::Rng;
    if fake_train.is_empty() || real_train.is_empty() || fake_eval.is_empty() {
        return Err(Error::invalid("probe needs non-empty sets"));
    }
    let mut d = build_discriminator(&cfg.arch, cfg.seed)?;
    let mut rng = rng::derive(cfg.seed, 5);
    let gather = |pool: &[Tensor], rng: &mut rand_chacha::ChaCha8Rng| {
        let refs: Vec<&Tensor> = (0..cfg.batch).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
        Tensor::stack(&refs)
    };
    for step in 0..cfg.steps {
        let f = gather(fake_train, &mut rng)?;
        let r = gather(real_train, &mut rng)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&d.params);
        let fi = tape.constant(f);
        let ri = tape.constant(r);
        let mf = d.graph(&mut tape, &bound, fi)?;
        let mr = d.graph(&mut tape, &bound, ri)?;
        let loss = loss_discriminator(&mut tape, mf, mr)?;
        let v = tape.scalar(loss) as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("probe loss {v} at step {step}")));
        }
        tape.backward(loss)?;
        bound.store_grads(&tape, &mut d.params)?;
        sgd_step(&mut d.params, cfg.lr)?;
    }
    let mut total = 0.0;
    for part in fake_eval.chunks(128) {
        let refs: Vec<&Tensor> = part.iter().collect();
        total += mean_channel0(&d.discriminate(&Tensor::stack(&refs)?)?) * part.len() as f64;
    }
    Ok(total / fake_eval.len() as f64)
}

/// Counts from a real-vs-refined forced-choice study. Rows are the ground
/// truth (real, synthetic); columns the answer (real, synthetic).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; 2]; 2]);

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("accuracy of an empty confusion matrix is undefined"));
        }
        Ok((self.0[0][0] + self.0[1][1]) as f64 / total as f64)
    }
}

/// Writes the matrix as CSV with fixed row and column labels, followed by
/// the accuracy.
pub fn export_confusion(m: &ConfusionMatrix, path: &Path) -> Result<f64> {
    let acc = m.accuracy()?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ground_truth", "selected_real", "selected_synthetic"])?;
    w.write_record(["real", &m.0[0][0].to_string(), &m.0[0][1].to_string()])?;
    w.write_record(["synthetic", &m.0[1][0].to_string(), &m.0[1][1].to_string()])?;
    w.write_record(["accuracy", &acc.to_string(), ""])?;
    w.flush()?;
    Ok(acc)
}

/// Writes single-channel images side by side as a binary PGM, `cols` per
/// row, with a one-pixel white gutter.
pub fn write_pgm_grid(images: &[Tensor], cols: usize, path: &Path) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::invalid("no images for the grid"))?;
    let s = first.shape();
    if s.len() != 3 || s[0] != 1 || images.iter().any(|t| t.shape() != s) {
        return Err(Error::invalid("grid images must all be 1×H×W"));
    }
    let (h, w) = (s[1], s[2]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![255u8; gw * gh];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let v = img.data()[y * w + x].clamp(0.0, 1.0);
                px[(oy + y) * gw + ox + x] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&px)?;
    Ok(())
}

#[cfg(test)]
mod tests;
