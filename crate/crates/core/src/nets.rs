//! Refiner and discriminator architectures, their forward graphs, and
//! checkpoint directories.
//!
//! The refiner is fully convolutional with "same" padding and no striding or
//! pooling, so its output has the input's spatial size. The discriminator is
//! a strided conv stack ending in a 2-channel map with a per-patch softmax:
//! channel 0 is the probability that a patch comes from a refined image.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Bound, NodeId, Tape};
use crate::params::{NetKind, NetParams};
use crate::rng::{self, RngState};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerArch {
    pub input_channels: usize,
    pub filters: usize,
    pub blocks: usize,
    pub kernel: usize,
}

impl RefinerArch {
    /// CPU-sized default.
    pub fn desk() -> Self {
        Self {
            input_channels: 1,
            filters: 16,
            blocks: 2,
            kernel: 3,
        }
    }

    /// 64 feature maps, 4 residual blocks, 3×3 kernels.
    pub fn paper_gaze() -> Self {
        Self {
            input_channels: 1,
            filters: 64,
            blocks: 4,
            kernel: 3,
        }
    }

    /// 64 feature maps, 10 residual blocks, 7×7 kernels.
    pub fn paper_hand() -> Self {
        Self {
            input_channels: 1,
            filters: 64,
            blocks: 10,
            kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.filters == 0 || self.blocks == 0 || self.kernel == 0 {
            return Err(Error::invalid(format!("refiner arch fields must be positive: {self:?}")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("refiner kernel must be odd for same padding"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, f, k) = (self.input_channels, self.filters, self.kernel * self.kernel);
        let stem = c * f * k + f;
        let block = 2 * (f * f * k + f);
        let head = f * c + c;
        stem + self.blocks * block + head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscLayer {
    Conv {
        kernel: usize,
        stride: usize,
        filters: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

/// How the 2-channel logit map is turned into probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvHead {
    /// Softmax at every patch: a `w×h` probability map.
    #[default]
    Local,
    /// Spatial average of the logits, then one softmax per image.
    Global,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscArch {
    pub input_channels: usize,
    pub layers: Vec<DiscLayer>,
    #[serde(default)]
    pub head: AdvHead,
}

impl DiscArch {
    /// Conv3x3 s2 f32 → Conv3x3 s2 f32 → Conv3x3 s1 f16 → Conv1x1 f16 → Conv1x1 f2.
    pub fn desk() -> Self {
        let conv = |kernel, stride, filters| DiscLayer::Conv {
            kernel,
            stride,
            filters,
        };
        Self {
            input_channels: 1,
            layers: vec![conv(3, 2, 32), conv(3, 2, 32), conv(3, 1, 16), conv(1, 1, 16), conv(1, 1, 2)],
            head: AdvHead::Local,
        }
    }

    /// The gaze discriminator: two strided convs, a 3×3 max-pool, then 3×3/1×1/1×1 convs.
    pub fn paper_gaze() -> Self {
        let conv = |kernel, stride, filters| DiscLayer::Conv {
            kernel,
            stride,
            filters,
        };
        Self {
            input_channels: 1,
            layers: vec![
                conv(3, 2, 96),
                conv(3, 2, 64),
                DiscLayer::MaxPool { kernel: 3, stride: 1 },
                conv(3, 1, 32),
                conv(1, 1, 32),
                conv(1, 1, 2),
            ],
            head: AdvHead::Local,
        }
    }

    pub fn with_head(mut self, head: AdvHead) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("discriminator needs at least one input channel"));
        }
        for l in &self.layers {
            let (k, s) = match *l {
                DiscLayer::Conv {
                    kernel,
                    stride,
                    filters,
                } => {
                    if filters == 0 {
                        return Err(Error::invalid("conv layer with zero filters"));
                    }
                    (kernel, stride)
                }
                DiscLayer::MaxPool { kernel, stride } => (kernel, stride),
            };
            if k == 0 || s == 0 {
                return Err(Error::invalid(format!("bad layer {l:?}")));
            }
        }
        match self.layers.last() {
            Some(DiscLayer::Conv { filters: 2, .. }) => Ok(()),
            _ => Err(Error::invalid("discriminator must end in a 2-filter conv")),
        }
    }

    /// Side length of the input region that influences one output patch.
    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1, 1);
        for l in &self.layers {
            let (k, s) = match *l {
                DiscLayer::Conv { kernel, stride, .. } => (kernel, stride),
                DiscLayer::MaxPool { kernel, stride } => (kernel, stride),
            };
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Spatial size of the probability map for an `h×w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let rf = self.receptive_field();
        if h < rf || w < rf {
            return Err(Error::invalid(format!(
                "input {h}×{w} is smaller than the discriminator receptive field {rf}"
            )));
        }
        let (mut h, mut w) = (h, w);
        for l in &self.layers {
            match *l {
                DiscLayer::Conv { kernel, stride, .. } => {
                    let pad = kernel / 2;
                    h = (h + 2 * pad - kernel) / stride + 1;
                    w = (w + 2 * pad - kernel) / stride + 1;
                }
                DiscLayer::MaxPool { kernel, stride } => {
                    if h < kernel || w < kernel {
                        return Err(Error::invalid("input too small for max-pool layer"));
                    }
                    h = (h - kernel) / stride + 1;
                    w = (w - kernel) / stride + 1;
                }
            }
        }
        Ok(match self.head {
            AdvHead::Local => (h, w),
            AdvHead::Global => (1, 1),
        })
    }

    /// Receptive field as a fraction of the larger image side.
    pub fn receptive_field_ratio(&self, h: usize, w: usize) -> f64 {
        self.receptive_field() as f64 / h.max(w) as f64
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn push_conv(
    params: &mut NetParams,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: [usize; 4],
    zero: bool,
) -> Result<()> {
    let w = if zero {
        Tensor::zeros(&shape)
    } else {
        he_normal(rng, &shape)
    };
    params.push(format!("{name}.w"), w)?;
    params.push(format!("{name}.b"), Tensor::zeros(&[shape[0]]))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    pub arch: RefinerArch,
    pub params: NetParams,
}

/// Builds refiner parameters deterministically from `seed`.
pub fn build_refiner(arch: &RefinerArch, seed: u64) -> Result<Refiner> {
    arch.validate()?;
    let mut rng = rng::derive(seed, 1);
    let mut p = NetParams::new(NetKind::Refiner);
    let (c, f, k) = (arch.input_channels, arch.filters, arch.kernel);
    push_conv(&mut p, &mut rng, "stem", [f, c, k, k], false)?;
    for b in 0..arch.blocks {
        push_conv(&mut p, &mut rng, &format!("block{b}.conv1"), [f, f, k, k], false)?;
        push_conv(&mut p, &mut rng, &format!("block{b}.conv2"), [f, f, k, k], false)?;
    }
    push_conv(&mut p, &mut rng, "head", [c, f, 1, 1], false)?;
    Ok(Refiner {
        arch: arch.clone(),
        params: p,
    })
}

/// Records the refiner on `tape`; `input` is `N×C×H×W`. Output values lie in
/// `[0, 1]` via `(tanh(z) + 1) / 2`.
pub fn refiner_graph<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &RefinerArch,
    params: &Bound,
    input: NodeId,
) -> Result<NodeId> {
    let s = tape.shape(input).to_vec();
    if s.len() != 4 || s[1] != arch.input_channels {
        return Err(Error::ShapeMismatch {
            op: "refine (channels)",
            left: s,
            right: vec![arch.input_channels],
        });
    }
    if s[2] < arch.kernel || s[3] < arch.kernel {
        return Err(Error::invalid(format!(
            "refiner input {}×{} smaller than kernel {}",
            s[2], s[3], arch.kernel
        )));
    }
    let pad = arch.kernel / 2;
    let mut i = 0;
    let mut next = || {
        let (w, b) = (params.get(i), params.get(i + 1));
        i += 2;
        (w, b)
    };
    let (w, b) = next();
    let centred = tape.affine(input, 2.0, -1.0);
    let x = tape.conv2d(centred, w, Some(b), 1, pad)?;
    let mut x = tape.relu(x);
    for _ in 0..arch.blocks {
        let (w1, b1) = next();
        let (w2, b2) = next();
        let h = tape.conv2d(x, w1, Some(b1), 1, pad)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, w2, Some(b2), 1, pad)?;
        let sum = tape.add(x, h)?;
        x = tape.relu(sum);
    }
    let (w, b) = next();
    let z = tape.conv2d(x, w, Some(b), 1, 0)?;
    let t = tape.tanh(z);
    Ok(tape.affine(t, 0.5, 0.5))
}

impl Refiner {
    pub fn graph<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, input: NodeId) -> Result<NodeId> {
        refiner_graph(tape, &self.arch, params, input)
    }

    /// Inference on an `N×C×H×W` batch.
    pub fn refine(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let x = tape.constant(batch.clone());
        let y = self.graph(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Refines in chunks to bound tape memory.
    pub fn refine_all(&self, batch: &Tensor, chunk: usize) -> Result<Tensor> {
        let items = batch.unstack();
        let mut out = Vec::with_capacity(items.len());
        for part in items.chunks(chunk.max(1)) {
            let refs: Vec<&Tensor> = part.iter().collect();
            out.extend(self.refine(&Tensor::stack(&refs)?)?.unstack());
        }
        let refs: Vec<&Tensor> = out.iter().collect();
        Tensor::stack(&refs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub arch: DiscArch,
    pub params: NetParams,
}

/// Builds discriminator parameters. Hidden convs get He init; the final
/// 2-filter conv starts at zero so every patch initially reads (0.5, 0.5).
pub fn build_discriminator(arch: &DiscArch, seed: u64) -> Result<Discriminator> {
    arch.validate()?;
    let mut rng = rng::derive(seed, 2);
    let mut p = NetParams::new(NetKind::Discriminator);
    let mut c = arch.input_channels;
    let last = arch.layers.len() - 1;
    for (i, l) in arch.layers.iter().enumerate() {
        if let DiscLayer::Conv { kernel, filters, .. } = *l {
            push_conv(&mut p, &mut rng, &format!("conv{i}"), [filters, c, kernel, kernel], i == last)?;
            c = filters;
        }
    }
    Ok(Discriminator {
        arch: arch.clone(),
        params: p,
    })
}

/// Records the discriminator; returns the `N×2×h×w` probability map
/// (`N×2×1×1` for the global head).
pub fn discriminator_graph<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &DiscArch,
    params: &Bound,
    input: NodeId,
) -> Result<NodeId> {
    let s = tape.shape(input).to_vec();
    if s.len() != 4 || s[1] != arch.input_channels {
        return Err(Error::ShapeMismatch {
            op: "discriminate (channels)",
            left: s,
            right: vec![arch.input_channels],
        });
    }
    arch.output_size(s[2], s[3])?;
    let last = arch.layers.len() - 1;
    let mut x = tape.affine(input, 2.0, -1.0);
    let mut i = 0;
    for (li, l) in arch.layers.iter().enumerate() {
        match *l {
            DiscLayer::Conv { kernel, stride, .. } => {
                let (w, b) = (params.get(i), params.get(i + 1));
                i += 2;
                x = tape.conv2d(x, w, Some(b), stride, kernel / 2)?;
                if li != last {
                    x = tape.relu(x);
                }
            }
            DiscLayer::MaxPool { kernel, stride } => {
                x = tape.maxpool(x, kernel, stride)?;
            }
        }
    }
    if arch.head == AdvHead::Global {
        x = tape.global_avg_pool(x)?;
    }
    tape.softmax2(x)
}

impl Discriminator {
    pub fn graph<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, input: NodeId) -> Result<NodeId> {
        discriminator_graph(tape, &self.arch, params, input)
    }

    pub fn discriminate(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let x = tape.constant(batch.clone());
        let y = self.graph(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Mean of channel 0 (probability of "refined") over all patches and images.
    pub fn mean_p_fake(&self, batch: &Tensor) -> Result<f64> {
        Ok(mean_channel0(&self.discriminate(batch)?))
    }
}

/// Mean of channel 0 of an `N×2×h×w` map.
pub fn mean_channel0<T: Scalar>(map: &Tensor<T>) -> f64 {
    let s = map.shape();
    let hw = s[2] * s[3];
    let d = map.data();
    let total: f64 = (0..s[0])
        .flat_map(|i| d[i * 2 * hw..i * 2 * hw + hw].iter())
        .map(|v| v.to_f64())
        .sum();
    total / (s[0] * hw) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "network", rename_all = "snake_case")]
pub enum ArchDescriptor {
    Refiner(RefinerArch),
    Discriminator(DiscArch),
    Predictor(serde_json::Value),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: NetKind,
    arch: ArchDescriptor,
    #[serde(default)]
    rng: Option<RngState>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams,
    pub arch: ArchDescriptor,
    pub rng: Option<RngState>,
}

/// Writes `manifest.json` plus one `TNS1` file per tensor into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &NetParams,
    arch: &ArchDescriptor,
    rng: Option<&RngState>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        let safe: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
            .collect();
        let file = format!("{i:03}_{safe}.tns");
        t.write_tns1(dir.join(&file))?;
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: params.kind(),
        arch: arch.clone(),
        rng: rng.cloned(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. Any missing, truncated
/// or mismatched tensor fails the whole load.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)
        .map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let mut params = NetParams::new(manifest.kind);
    for e in &manifest.tensors {
        let path = dir.join(&e.file);
        let t = Tensor::read_tns1(&path)?;
        if t.shape() != e.shape {
            return Err(Error::corrupt(
                &path,
                format!("shape {:?} does not match manifest {:?}", t.shape(), e.shape),
            ));
        }
        params.push(e.name.clone(), t)?;
    }
    Ok(Checkpoint {
        params,
        arch: manifest.arch,
        rng: manifest.rng,
    })
}

impl Refiner {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, &ArchDescriptor::Refiner(self.arch.clone()), None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        match load_checkpoint(dir)? {
            Checkpoint {
                params,
                arch: ArchDescriptor::Refiner(arch),
                ..
            } => {
                let expected = build_refiner(&arch, 0)?.params;
                check_layout(&params, &expected)?;
                Ok(Self { arch, params })
            }
            _ => Err(Error::Incompatible("not a refiner checkpoint".into())),
        }
    }
}

impl Discriminator {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, &ArchDescriptor::Discriminator(self.arch.clone()), None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        match load_checkpoint(dir)? {
            Checkpoint {
                params,
                arch: ArchDescriptor::Discriminator(arch),
                ..
            } => {
                let expected = build_discriminator(&arch, 0)?.params;
                check_layout(&params, &expected)?;
                Ok(Self { arch, params })
            }
            _ => Err(Error::Incompatible("not a discriminator checkpoint".into())),
        }
    }
}

/// Names and shapes of `got` must match what the architecture builds.
pub(crate) fn check_layout(got: &NetParams, expected: &NetParams) -> Result<()> {
    let same = got.len() == expected.len()
        && got
            .iter()
            .zip(expected.iter())
            .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Incompatible("parameter layout does not match architecture".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_head(r: &mut Refiner) {
        for name in ["head.w", "head.b"] {
            let t = r.params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
    }

    #[test]
    fn gaze_refiner_layer_shapes() {
        let r = build_refiner(&RefinerArch::paper_gaze(), 0).unwrap();
        let shapes: Vec<(String, Vec<usize>)> =
            r.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        assert_eq!(shapes[0], ("stem.w".into(), vec![64, 1, 3, 3]));
        for b in 0..4 {
            assert_eq!(r.params.get(&format!("block{b}.conv1.w")).unwrap().shape(), &[64, 64, 3, 3]);
            assert_eq!(r.params.get(&format!("block{b}.conv2.w")).unwrap().shape(), &[64, 64, 3, 3]);
        }
        assert_eq!(r.params.get("head.w").unwrap().shape(), &[1, 64, 1, 1]);
        assert_eq!(r.params.len(), 2 + 4 * 4 + 2);
        assert_eq!(r.params.count(), RefinerArch::paper_gaze().param_count());
    }

    #[test]
    fn desk_refiner_param_count_by_hand() {
        let arch = RefinerArch::desk();
        let by_hand = 16 * 9 + 16 + 2 * 2 * (16 * 16 * 9 + 16) + 16 + 1;
        assert_eq!(arch.param_count(), by_hand);
        assert_eq!(build_refiner(&arch, 3).unwrap().params.count(), by_hand);
    }

    #[test]
    fn refiner_build_is_seed_deterministic() {
        let a = build_refiner(&RefinerArch::desk(), 42).unwrap();
        let b = build_refiner(&RefinerArch::desk(), 42).unwrap();
        let c = build_refiner(&RefinerArch::desk(), 43).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn zero_head_gives_mid_gray() {
        let mut r = build_refiner(&RefinerArch::desk(), 1).unwrap();
        zero_head(&mut r);
        let x = Tensor::filled(&[2, 1, 9, 7], 0.3);
        let y = r.refine(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn refiner_rejects_wrong_channels() {
        let r = build_refiner(&RefinerArch::desk(), 1).unwrap();
        assert!(r.refine(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
        assert!(r.refine(&Tensor::zeros(&[1, 1, 2, 8])).is_err());
    }

    #[test]
    fn zeroed_resblock_is_identity() {
        // one block, all convs in the block zero; input to the block is post-ReLU
        let arch = RefinerArch {
            input_channels: 1,
            filters: 4,
            blocks: 1,
            kernel: 3,
        };
        let mut r = build_refiner(&arch, 5).unwrap();
        for n in ["block0.conv1.w", "block0.conv1.b", "block0.conv2.w", "block0.conv2.b"] {
            r.params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::new(vec![1, 1, 6, 6], (0..36).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let mut tape = Tape::<f32>::new();
        let b = tape.bind_frozen(&r.params);
        let xi = tape.constant(x);
        let stem = tape.conv2d(xi, b.get(0), Some(b.get(1)), 1, 1).unwrap();
        let stem = tape.relu(stem);
        let h = tape.conv2d(stem, b.get(2), Some(b.get(3)), 1, 1).unwrap();
        let h = tape.relu(h);
        let h = tape.conv2d(h, b.get(4), Some(b.get(5)), 1, 1).unwrap();
        let s = tape.add(stem, h).unwrap();
        let out = tape.relu(s);
        assert_eq!(tape.value(out).data(), tape.value(stem).data());
    }

    #[test]
    fn desk_disc_map_is_8x8_on_32x32() {
        let d = build_discriminator(&DiscArch::desk(), 0).unwrap();
        assert_eq!(DiscArch::desk().output_size(32, 32).unwrap(), (8, 8));
        let m = d.discriminate(&Tensor::filled(&[3, 1, 32, 32], 0.4)).unwrap();
        assert_eq!(m.shape(), &[3, 2, 8, 8]);
        // zero final layer: every patch (0.5, 0.5)
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn disc_receptive_field() {
        assert_eq!(DiscArch::desk().receptive_field(), 15);
        assert!(DiscArch::desk().receptive_field_ratio(32, 32) < 0.5);
        assert_eq!(DiscArch::paper_gaze().receptive_field(), 23);
        assert_eq!(DiscArch::paper_gaze().output_size(35, 55).unwrap(), (7, 12));
        assert!(DiscArch::desk().output_size(12, 32).is_err());
    }

    #[test]
    fn global_head_outputs_one_patch() {
        let arch = DiscArch::desk().with_head(AdvHead::Global);
        let mut d = build_discriminator(&arch, 2).unwrap();
        // non-zero final layer so the softmax is non-trivial
        for (_, t) in d.params.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f32 - 3.0);
            }
        }
        let x = Tensor::new(vec![2, 1, 16, 16], (0..512).map(|i| (i as f32 * 0.1).cos()).collect()).unwrap();
        let m = d.discriminate(&x).unwrap();
        assert_eq!(m.shape(), &[2, 2, 1, 1]);
        for i in 0..2 {
            let (a, b) = (m.data()[2 * i], m.data()[2 * i + 1]);
            assert!((a + b - 1.0).abs() <= 1e-6 && a > 0.0 && b > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_fresh_build() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_refiner(&RefinerArch::desk(), 77).unwrap();
        r.save(dir.path()).unwrap();
        let back = Refiner::load(dir.path()).unwrap();
        assert!(back.params.bit_eq(&r.params));
        assert_eq!(back.arch, r.arch);
        let fresh = build_refiner(&RefinerArch::desk(), 77).unwrap();
        assert!(back.params.bit_eq(&fresh.params));

        let d = build_discriminator(&DiscArch::desk(), 9).unwrap();
        let ddir = dir.path().join("d");
        d.save(&ddir).unwrap();
        assert!(Discriminator::load(&ddir).unwrap().params.bit_eq(&d.params));
        assert!(Refiner::load(&ddir).is_err());
    }

    #[test]
    fn checkpoint_keeps_rng_state() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_refiner(&RefinerArch::desk(), 1).unwrap();
        let state = RngState::capture(&rng::derive(5, 0));
        save_checkpoint(dir.path(), &r.params, &ArchDescriptor::Refiner(r.arch.clone()), Some(&state)).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap().rng, Some(state));
    }

    #[test]
    fn truncated_checkpoint_fails_whole_load() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_refiner(&RefinerArch::desk(), 2).unwrap();
        r.save(dir.path()).unwrap();
        let victim = dir.path().join("002_block0.conv1.w.tns");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Refiner::load(dir.path()), Err(Error::Corrupt { .. })));

        fs::write(&victim, b"XXXX").unwrap();
        assert!(Refiner::load(dir.path()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn refiner_preserves_spatial_shape(h in 3usize..20, w in 3usize..20, n in 1usize..3) {
            let arch = RefinerArch { input_channels: 1, filters: 4, blocks: 1, kernel: 3 };
            let r = build_refiner(&arch, 0).unwrap();
            let y = r.refine(&Tensor::filled(&[n, 1, h, w], 0.5)).unwrap();
            prop_assert_eq!(y.shape(), &[n, 1, h, w]);
            prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
