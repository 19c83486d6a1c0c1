use super::{Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over checked coordinates of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::invalid("gradient check needs a scalar function"));
    }
    Ok(tape.value(y).item())
}

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// against central differences with step `step`, over every coordinate.
/// Always evaluates in 64-bit mode.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    gradient_check_coords(f, point, step, &coords)
}

/// [`gradient_check`] restricted to the listed flat coordinates.
pub fn gradient_check_coords<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let mut tape = Tape::new(Precision::F64);
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::invalid("gradient check needs a scalar function"));
    }
    if !tape.value(y).item().is_finite() {
        return Err(Error::NonFinite { index: usize::MAX });
    }
    let grads = tape.backward(y, &Tensor::scalar(1.0))?;
    let full = grads.wrt(x);

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut worst = (0.0f64, coords.first().copied().unwrap_or(0));
    for &i in coords {
        let mut p = point.clone();
        let x0 = p.data()[i];
        p.data_mut()[i] = x0 + step;
        let fp = eval(&f, &p)?;
        p.data_mut()[i] = x0 - step;
        let fm = eval(&f, &p)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let num = (fp - fm) / (2.0 * step);
        let ana = full.data()[i];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-12);
        if rel > worst.0 {
            worst = (rel, i);
        }
        analytic.push(ana);
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let p = Tensor::from_fn(vec![7], |i| (i as f64 * 0.37).sin() + 0.1);
        let r = gradient_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        for (a, x) in r.analytic.iter().zip(p.data()) {
            assert!((a - 2.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::from_vec(vec![1.0, 2.0]);
        let r = gradient_check(
            |t, x| {
                let z = t.scale(x, 0.0);
                Ok(t.sum(z))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.analytic.iter().chain(&r.numeric).all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let p = Tensor::from_vec(vec![1.0, 1e-6]);
        let err = gradient_check(
            |t, x| {
                let s = t.sqrt(x);
                Ok(t.sum(s))
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }), "{err:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::scalar(1.0);
        assert!(gradient_check(|t, x| Ok(t.sum(x)), &p, 0.0).is_err());
    }
}
