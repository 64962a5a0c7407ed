//! Central-difference gradient verification. Always runs at f64; 32-bit
//! rounding drowns the finite-difference signal.

use crate::error::{CxvError, Result};
use crate::tensor::{Ctx, Tensor};

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` must build a scalar loss from `x` using the supplied context (the
/// context carries a fresh tape per evaluation, so `f` must be
/// deterministic). Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Ctx<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let eval_at = |values: &[f64]| -> Result<f64> {
        let ctx = Ctx::eval();
        let probe = Tensor::from_vec(values.to_vec(), x.shape())?;
        let loss = f(&ctx, &probe)?;
        if loss.numel() != 1 {
            return Err(CxvError::Usage(format!(
                "grad_check requires a scalar-valued function, got {:?}",
                loss.shape()
            )));
        }
        Ok(loss.item()?)
    };

    // analytic gradient
    let ctx = Ctx::with_tape();
    let tracked = Tensor::param(x.to_vec(), x.shape())?;
    let loss = f(&ctx, &tracked)?;
    if loss.numel() != 1 {
        return Err(CxvError::Usage(format!(
            "grad_check requires a scalar-valued function, got {:?}",
            loss.shape()
        )));
    }
    ctx.backward(&loss)?;
    let analytic = tracked
        .grad()
        .unwrap_or_else(|| vec![0.0; tracked.numel()]);

    // central differences, one coordinate at a time
    let base = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval_at(&plus)? - eval_at(&minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Default step size for [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn linear_functional_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[3, 4]);
        let err = grad_check(|ctx, x| Ok(ctx.sum_all(x)), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn cross_entropy_of_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[4, 6]);
        let gamma = Tensor::full(&[6], 1.1f64);
        let beta = Tensor::full(&[6], 0.1f64);
        let err = grad_check(
            move |ctx, x| {
                let y = ctx.layer_norm(x, &gamma, &beta, 1e-5)?;
                ctx.cross_entropy(&y, &[0, 3, 2, 5])
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
