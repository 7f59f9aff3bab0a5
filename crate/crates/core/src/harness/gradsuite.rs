//! Gradient checks of the building blocks and the three training losses on
//! small randomized 2-image 16×16 batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grad::{grad_check, GradCheckReport};
use crate::nets::{build_discriminator, build_refiner, discriminator_graph, refiner_graph, DiscArch, DiscLayer, RefinerArch};
use crate::objectives::{loss_discriminator, loss_realism, loss_refiner, FeatureTransform};
use crate::params::{NetKind, NetParams};
use crate::rng;
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

fn small_refiner() -> RefinerArch {
    RefinerArch {
        input_channels: 1,
        filters: 3,
        blocks: 1,
        kernel: 3,
    }
}

fn small_disc() -> DiscArch {
    let conv = |kernel, stride, filters| DiscLayer::Conv {
        kernel,
        stride,
        filters,
    };
    DiscArch {
        input_channels: 1,
        layers: vec![conv(3, 2, 4), conv(3, 1, 4), conv(1, 1, 2)],
        head: Default::default(),
    }
}

/// Redraws every bias, and with `head` the last weight too. Zero biases over
/// dead ReLU regions put pre-activations exactly on the kink, where the
/// central difference averages the one-sided slopes.
fn generic_point(p: &mut NetParams<f64>, rng: &mut ChaCha8Rng, head: bool) {
    let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
    let last_w = names.iter().rposition(|n| n.ends_with(".w"));
    for (i, name) in names.iter().enumerate() {
        let (lo, hi) = if name.ends_with(".b") {
            (-0.1, 0.1)
        } else if head && Some(i) == last_w {
            (-0.5, 0.5)
        } else {
            continue;
        };
        let t = p.get_mut(name).expect("listed");
        let shape = t.shape().to_vec();
        *t = uniform(rng, &shape, lo, hi);
    }
}

/// Discriminator parameters with the zero-initialized head replaced by random
/// weights, so the patch map is not constant.
fn disc_params(rng: &mut ChaCha8Rng, seed: u64) -> Result<NetParams<f64>> {
    let mut p = build_discriminator(&small_disc(), seed)?.params.cast::<f64>();
    generic_point(&mut p, rng, true);
    Ok(p)
}

/// Runs every check for one seed and returns `(name, report)` pairs.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = rng::derive(seed, 0x6c6b);
    let mut out = Vec::new();

    let mut p = NetParams::<f64>::new(NetKind::Other);
    p.push("x", uniform(&mut rng, &[2, 1, 16, 16], 0.0, 1.0))?;
    p.push("w", uniform(&mut rng, &[4, 1, 3, 3], -1.0, 1.0))?;
    p.push("b", uniform(&mut rng, &[4], -0.5, 0.5))?;
    let target = uniform(&mut rng, &[2, 4, 16, 16], -1.0, 1.0);
    let target_s2 = uniform(&mut rng, &[2, 4, 8, 8], -1.0, 1.0);
    out.push((
        "conv2d",
        grad_check(&p, EPS, |t, b| {
            let y = t.conv2d(b.get(0), b.get(1), Some(b.get(2)), 1, 1)?;
            let c = t.constant(target.clone());
            t.squared_diff(y, c)
        })?,
    ));
    out.push((
        "conv2d_stride2",
        grad_check(&p, EPS, |t, b| {
            let y = t.conv2d(b.get(0), b.get(1), Some(b.get(2)), 2, 1)?;
            let c = t.constant(target_s2.clone());
            t.squared_diff(y, c)
        })?,
    ));

    let mut p = NetParams::<f64>::new(NetKind::Other);
    p.push("x", uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0))?;
    for name in ["conv1", "conv2"] {
        p.push(format!("{name}.w"), uniform(&mut rng, &[3, 3, 3, 3], -0.5, 0.5))?;
        p.push(format!("{name}.b"), uniform(&mut rng, &[3], -0.2, 0.2))?;
    }
    let target = uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0);
    out.push((
        "resblock",
        grad_check(&p, EPS, |t, b| {
            let h = t.conv2d(b.get(0), b.get(1), Some(b.get(2)), 1, 1)?;
            let h = t.relu(h);
            let h = t.conv2d(h, b.get(3), Some(b.get(4)), 1, 1)?;
            let s = t.add(b.get(0), h)?;
            let y = t.relu(s);
            let c = t.constant(target.clone());
            t.squared_diff(y, c)
        })?,
    ));

    let darch = small_disc();
    let rarch = small_refiner();
    let dp = disc_params(&mut rng, seed)?;
    let fake = uniform(&mut rng, &[2, 1, 16, 16], 0.0, 1.0);
    let real = uniform(&mut rng, &[2, 1, 16, 16], 0.0, 1.0);
    out.push((
        "loss_discriminator",
        grad_check(&dp, EPS, |t, b| {
            let f = t.constant(fake.clone());
            let r = t.constant(real.clone());
            let mf = discriminator_graph(t, &darch, b, f)?;
            let mr = discriminator_graph(t, &darch, b, r)?;
            loss_discriminator(t, mf, mr)
        })?,
    ));

    let mut rp = build_refiner(&rarch, seed)?.params.cast::<f64>();
    generic_point(&mut rp, &mut rng, false);
    let synthetic = uniform(&mut rng, &[2, 1, 16, 16], 0.0, 1.0);
    out.push((
        "loss_realism",
        grad_check(&rp, EPS, |t, b| {
            let d = t.bind_frozen(&dp);
            let x = t.constant(synthetic.clone());
            let y = refiner_graph(t, &rarch, b, x)?;
            let m = discriminator_graph(t, &darch, &d, y)?;
            loss_realism(t, m)
        })?,
    ));
    for (name, psi) in [
        ("loss_refiner", FeatureTransform::Identity),
        ("loss_refiner_derivatives", FeatureTransform::Derivatives),
    ] {
        out.push((
            name,
            grad_check(&rp, EPS, |t, b| {
                let d = t.bind_frozen(&dp);
                let x = t.constant(synthetic.clone());
                let y = refiner_graph(t, &rarch, b, x)?;
                let m = discriminator_graph(t, &darch, &d, y)?;
                Ok(loss_refiner(t, m, y, x, 0.5, psi)?.total)
            })?,
        ));
    }
    Ok(out)
}
