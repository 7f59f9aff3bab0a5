use crate::error::{Error, Result};
use crate::params::NetParams;
use crate::tensor::Scalar;

/// Plain SGD: `p ← p − lr·grad(p)`, then clears every gradient.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn sgd_step<T: Scalar>(params: &mut NetParams<T>, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    for (_, t) in params.iter_mut() {
        let g = t.grad().expect("checked above").to_vec();
        for (p, g) in t.data_mut().iter_mut().zip(g) {
            *p = T::from_f64(p.to_f64() - lr * g.to_f64());
        }
        t.clear_grad();
    }
    Ok(())
}
