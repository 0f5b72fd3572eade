use crate::element::Element;
use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Worst coordinate-wise disagreement between the autodiff gradient of `f`
/// at `x` and a central difference with the given step.
///
/// Error per coordinate is `|a − n| / (|a| + |n| + 1e-8)`.
pub fn fd_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let shape = x.shape().to_vec();
    let base = x.to_vec();

    let leaf = Tensor::param(&shape, base.clone())?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![T::zero(); base.len()]);

    let eval = |values: Vec<T>| -> Result<f64> {
        let t = Tensor::new(&shape, values)?;
        no_grad(|| f(&t))?.item().map(Element::to_f64)
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] = plus[i] + T::from_f64(step);
        minus[i] = minus[i] - T::from_f64(step);
        // divide by the perturbation actually represented in T
        let h = plus[i].to_f64() - minus[i].to_f64();
        let numeric = (eval(plus)? - eval(minus)?) / h;
        let a = analytic[i].to_f64();
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
