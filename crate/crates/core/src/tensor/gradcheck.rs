use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error.
    pub max_rel_err: f64,
    /// Flat index where `max_rel_err` was observed.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Denominator floor for relative errors: gradients smaller than this are
/// compared in absolute terms scaled by the floor.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Checks the tape gradient of a scalar function `f` at `x` against
/// `(f(x+h) − f(x−h)) / 2h`, elementwise.
///
/// `f` receives a fresh tape and the leaf holding `x`; it must return a
/// scalar. Runs in `f64`.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut eval = |x: &Tensor<f64>, with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let leaf = tape.param(x.clone());
        let out = f(&mut tape, leaf)?;
        let value = tape.value(out).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        Ok((value, tape.grad_or_zeros(leaf).into_data()))
    };

    let (_, analytic) = eval(x, true)?;
    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig;
        *slot = (fp - fm) / (2.0 * h);
    }

    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97) as f64 / 31.0 - 1.3).collect();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn sum_has_exact_gradient() {
        let x = sample(6);
        let r = grad_check(|t, v| t.sum(v), &x, 1e-5, 1e-9).unwrap();
        assert!(r.analytic.iter().all(|&g| g == 1.0));
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let x = sample(6);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
            1e-9,
        )
        .unwrap();
        for (g, xv) in r.analytic.iter().zip(x.data()) {
            assert_eq!(*g, 2.0 * xv);
        }
        assert!(r.passed(), "{}", r.max_rel_err);
    }

    #[test]
    fn non_finite_function_errors() {
        let x = Tensor::new(vec![1], vec![f64::MAX / 4.0]).unwrap();
        assert!(grad_check(|t, v| t.scale(v, 1e10), &x, 1e-5, 1e-4).is_err());
    }
}
