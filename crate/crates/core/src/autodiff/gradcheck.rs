use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central finite
/// differences. Returns the largest `|g_fd − g_ad| / max(1, |g_fd|, |g_ad|)`
/// over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&tape, &vars)?.item();
        if !y.is_finite() {
            return Err(Error::Numeric(format!("function value {y} is not finite")));
        }
        Ok(y)
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.item().is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let ad = grads.wrt(*v);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let g = ad.data()[i];
            if !g.is_finite() {
                return Err(Error::Numeric(format!("tape gradient {g} is not finite")));
            }
            let err = (fd - g).abs() / 1f64.max(fd.abs()).max(g.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
