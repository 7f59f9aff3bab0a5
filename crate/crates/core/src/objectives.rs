//! Adversarial and self-regularization losses.
//!
//! Every loss is a sum over patches, pixels and batch entries, never a mean.
//! Patch maps are `N×2×h×w` softmax outputs whose channel 0 is the
//! probability that the patch is refined (fake).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{NodeId, Tape};
use crate::tensor::Scalar;

/// Map ψ from image space to the space where the L1 penalty is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    #[default]
    Identity,
    /// Per-pixel mean over channels (1 output channel).
    ChannelMean,
    /// Forward differences in x and y (2 output channels per input channel).
    Derivatives,
}

impl FeatureTransform {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        match self {
            FeatureTransform::Identity => Ok(x),
            FeatureTransform::ChannelMean => tape.avg_channel(x),
            FeatureTransform::Derivatives => tape.derivatives(x),
        }
    }
}

fn sum_log_channel<T: Scalar>(tape: &mut Tape<T>, map: NodeId, channel: usize) -> Result<NodeId> {
    let p = tape.select_channel(map, channel)?;
    let l = tape.log(p);
    Ok(tape.sum(l))
}

/// Cross-entropy with label "refined" on every patch of `map_refined` and
/// label "real" on every patch of `map_real`:
/// `−Σ log P_fake(x̃) − Σ log(1 − P_fake(y))`.
pub fn loss_discriminator<T: Scalar>(
    tape: &mut Tape<T>,
    map_refined: NodeId,
    map_real: NodeId,
) -> Result<NodeId> {
    let (a, b) = (tape.shape(map_refined), tape.shape(map_real));
    if a.len() != 4 || b.len() != 4 || a[1..] != b[1..] {
        return Err(Error::ShapeMismatch {
            op: "loss_discriminator",
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    let fake = sum_log_channel(tape, map_refined, 0)?;
    let real = sum_log_channel(tape, map_real, 1)?;
    let total = tape.add(fake, real)?;
    Ok(tape.scale(total, -1.0))
}

/// `−Σ log(1 − P_fake(x̃))` over every patch: small when the discriminator
/// calls refined patches real.
pub fn loss_realism<T: Scalar>(tape: &mut Tape<T>, map_refined: NodeId) -> Result<NodeId> {
    let s = sum_log_channel(tape, map_refined, 1)?;
    Ok(tape.scale(s, -1.0))
}

/// `Σ |ψ(refined) − ψ(synthetic)|`.
pub fn loss_self_reg<T: Scalar>(
    tape: &mut Tape<T>,
    refined: NodeId,
    synthetic: NodeId,
    psi: FeatureTransform,
) -> Result<NodeId> {
    let a = psi.apply(tape, refined)?;
    let b = psi.apply(tape, synthetic)?;
    tape.l1_diff(a, b)
}

/// Components of the refiner objective, all scalar nodes.
#[derive(Clone, Copy, Debug)]
pub struct RefinerLoss {
    pub total: NodeId,
    pub realism: NodeId,
    pub self_reg: NodeId,
}

/// `loss_realism + λ·loss_self_reg`.
pub fn loss_refiner<T: Scalar>(
    tape: &mut Tape<T>,
    map_refined: NodeId,
    refined: NodeId,
    synthetic: NodeId,
    lambda: f64,
    psi: FeatureTransform,
) -> Result<RefinerLoss> {
    if lambda.is_nan() || lambda < 0.0 || lambda.is_infinite() {
        return Err(Error::invalid(format!("lambda must be a finite value ≥ 0, got {lambda}")));
    }
    let realism = loss_realism(tape, map_refined)?;
    let self_reg = loss_self_reg(tape, refined, synthetic, psi)?;
    let weighted = tape.scale(self_reg, lambda);
    let total = tape.add(realism, weighted)?;
    Ok(RefinerLoss {
        total,
        realism,
        self_reg,
    })
}
