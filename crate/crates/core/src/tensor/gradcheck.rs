use super::{Graph, Tensor, Var};
use crate::{Error, Result};

fn eval<F>(f: &F, at: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(at);
    let y = f(&mut g, x)?;
    let v = g.scalar(y);
    if !v.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar function `f` against central
/// differences at every element of `at`.
///
/// Returns the worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn finite_difference_check<F>(f: F, at: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..at.len()).collect();
    finite_difference_check_at(f, at, h, &all)
}

/// [`finite_difference_check`] restricted to the listed flat indices.
pub fn finite_difference_check_at<F>(f: F, at: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    // Written negated so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(h > 0.0) {
        return Err(Error::invalid("finite_difference_check", "step must be positive"));
    }
    let mut g = Graph::new();
    let x = g.param(at);
    let y = f(&mut g, x)?;
    if !g.scalar(y).is_finite() {
        return Err(Error::NonFinite);
    }
    g.backward(y)?;
    let analytic = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; at.len()]);

    let mut probe = at.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        if i >= at.len() {
            return Err(Error::invalid("finite_difference_check", format!("index {i} out of range")));
        }
        let base = at.data()[i];
        probe.data_mut()[i] = base + h;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = base - h;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = base;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let at = Tensor::from_fn(vec![6], |i| i as f64 * 0.3 - 1.0);
        let err = finite_difference_check(|g, x| Ok(g.sum(x)), &at, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let at = Tensor::zeros(vec![5]);
        let err = finite_difference_check(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum(s))
            },
            &at,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_function_is_rejected() {
        // ln(x) at 0 diverges.
        let at = Tensor::zeros(vec![2]);
        let res = finite_difference_check(
            |g, x| {
                let l = g.ln(x);
                Ok(g.sum(l))
            },
            &at,
            1e-3,
        );
        assert!(matches!(res, Err(Error::NonFinite)));
    }
}
