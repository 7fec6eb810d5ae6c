//! Central finite-difference audit of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        bail!(Contract, "checked function returned shape {:?}, not a scalar", v.shape());
    }
    Ok(v.data()[0])
}

/// Central-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, error `O(h^4)`.
    ///
    /// Its smaller truncation error admits a larger step, which keeps
    /// cancellation noise well below small derivatives of deep graphs.
    FivePoint,
}

impl Stencil {
    /// `(k, w)` pairs of the symmetric differences `w (f(x+kh) - f(x-kh))`.
    fn pairs(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::ThreePoint => &[(1.0, 0.5)],
            Stencil::FivePoint => &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)],
        }
    }
}

/// Compares analytic and three-point central-difference gradients of a scalar
/// function of several tensors, at the listed `(input, flat index)` coordinates.
///
/// Returns the maximum relative error over those coordinates.
pub fn finite_diff_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_stencil(f, inputs, coords, step, Stencil::ThreePoint)
}

/// [`finite_diff_check_coords`] with a choice of stencil.
pub fn finite_diff_check_stencil<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
    stencil: Stencil,
) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        bail!(Config, "finite-difference step must be positive, got {}", step);
    }
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&g, &vars)?;
    if g.value(out).len() != 1 {
        bail!(Contract, "checked function returned shape {:?}, not a scalar", g.shape(out));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for &(which, idx) in coords {
        let analytic = grads.get(vars[which]).map_or(0.0, |t| t.data()[idx]);
        let orig = inputs[which].data()[idx];
        let mut numeric = 0.0;
        for &(k, weight) in stencil.pairs() {
            probe[which].data_mut()[idx] = orig + k * step;
            let plus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[idx] = orig - k * step;
            let minus = eval_scalar(&f, &probe)?;
            numeric += weight * (plus - minus);
        }
        probe[which].data_mut()[idx] = orig;
        let numeric = numeric / step;
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Checks every coordinate of a single-input scalar function.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let coords: Vec<_> = (0..point.len()).map(|i| (0, i)).collect();
    finite_diff_check_coords(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        &coords,
        step,
    )
}

/// Every coordinate of every input.
pub fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let p = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let p = Tensor::new(&[2], vec![0.7, -1.3]).unwrap();
        let quartic = |g: &Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(g.mul(sq, sq)?))
        };
        let coords = all_coords(std::slice::from_ref(&p));
        let three = finite_diff_check_stencil(quartic, std::slice::from_ref(&p), &coords, 1e-2, Stencil::ThreePoint).unwrap();
        let five = finite_diff_check_stencil(quartic, std::slice::from_ref(&p), &coords, 1e-2, Stencil::FivePoint).unwrap();
        assert!(three > 1e-5, "{three}");
        assert!(five < 1e-10, "{five}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(&[2], vec![0.3, -0.1]).unwrap();
        let err = finite_diff_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_scalar_output() {
        let p = Tensor::zeros(&[2]);
        assert!(finite_diff_check(|_, x| Ok(x), &p, 1e-5).is_err());
        assert!(finite_diff_check(|g, x| Ok(g.sum(x)), &p, 0.0).is_err());
    }
}
