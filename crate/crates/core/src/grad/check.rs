//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::grad::tape::{Bound, NodeId, Tape};
use crate::params::NetParams;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
    /// Entries left unchecked because a branch flipped even at the smallest
    /// step.
    pub kinks_skipped: usize,
}

/// A step that changes a branch is retried at a tenth of its size, down to
/// `eps / MAX_SHRINK`.
const MAX_SHRINK: f64 = 1e3;

fn eval_loss<F>(params: &NetParams<f64>, build: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = build(&mut tape, &bound)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v} during gradient check")));
    }
    Ok((v, tape.branch_signature()))
}

/// Compares backward-pass gradients with central differences of step `eps`
/// for every parameter entry.
///
/// Where a perturbation moves a ReLU, max-pool, L1 or clamp across a kink the
/// step shrinks until both sides stay on the base point's smooth piece; the
/// central difference across a kink measures neither one-sided slope.
///
/// Runs in `f64` so the comparison measures the derivative rules rather than
/// single-precision roundoff; the builder is the same generic graph code the
/// `f32` path uses.
pub fn grad_check<F>(params: &NetParams<f64>, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<NodeId>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = build(&mut tape, &bound)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v} during gradient check")));
    }
    let base = tape.branch_signature();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .ids()
        .iter()
        .zip(params.iter())
        .map(|(&id, (_, t))| tape.grad(id).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
        kinks_skipped: 0,
    };
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (p, name) in names.iter().enumerate() {
        for (i, &a) in analytic[p].iter().enumerate() {
            let orig = work.get(name).unwrap().data()[i];
            let mut h = eps;
            let (up, down) = loop {
                work.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let up = eval_loss(&work, &build)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let down = eval_loss(&work, &build)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                if (up.1 == base && down.1 == base) || h <= eps / MAX_SHRINK {
                    break (up, down);
                }
                h /= 10.0;
            };
            if up.1 != base || down.1 != base {
                report.kinks_skipped += 1;
                continue;
            }

            let numeric = (up.0 - down.0) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
