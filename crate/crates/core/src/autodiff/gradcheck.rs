use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Multiple of `eps * |f| / h`, the rounding error of a central difference,
/// below which an analytic/numeric disagreement cannot be resolved.
pub const FD_ROUNDOFF_ULPS: f64 = 4.0;

/// Worst relative error found in one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    /// Worst relative error over entries whose absolute disagreement exceeds
    /// the finite-difference roundoff bound.
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Worst relative error over all entries.
    pub max_raw_rel_error: f64,
    /// Entries above `tol` whose disagreement is within the roundoff bound.
    pub unresolved: usize,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn max_raw_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_raw_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn unresolved(&self) -> usize {
        self.params.iter().map(|p| p.unresolved).sum()
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Evaluates `f` on a constant-only tape.
pub fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "grad_check objective evaluated to {v}"
        )));
    }
    Ok(v)
}

/// Reverse-mode gradients of `f` at `params`.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "grad_check objective evaluated to {v}"
        )));
    }
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect())
}

/// Rounding error bound of a central difference with step `h` between
/// objective values `fp` and `fm`.
pub fn fd_roundoff(fp: f64, fm: f64, h: f64) -> f64 {
    FD_ROUNDOFF_ULPS * f64::EPSILON * fp.abs().max(fm.abs()) / h
}

/// Compares supplied analytic gradients against central differences
/// `(f(p+h) - f(p-h)) / 2h`, entry by entry. An entry fails when its relative
/// error exceeds `tol` and its absolute error exceeds [`fd_roundoff`].
pub fn compare_gradients<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || tol <= 0.0 {
        return Err(Error::Config(format!(
            "grad_check needs h > 0 and tol > 0 (h={h}, tol={tol})"
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = ParamCheck {
            param: pi,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_raw_rel_error: 0.0,
            unresolved: 0,
        };
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let fp = eval_scalar(f, &work)?;
            work[pi].data_mut()[j] = orig - h;
            let fm = eval_scalar(f, &work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            worst.max_raw_rel_error = worst.max_raw_rel_error.max(err);
            if (a - numeric).abs() <= fd_roundoff(fp, fm, h) {
                worst.unresolved += usize::from(err > tol);
            } else if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_entry = j;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        report.push(worst);
    }
    Ok(CheckReport {
        params: report,
        tol,
    })
}

/// Checks reverse-mode gradients of `f` against central finite differences.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(&f, params, &analytic, h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_passes() {
        let r = grad_check(|t, p| t.sigmoid(p[0]), &[Tensor::scalar(0.3)], 1e-6, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |t, p| {
                let z = t.scale(p[0], 0.0)?;
                t.mean_all(z)
            },
            &[Tensor::vector(vec![1.0, -2.0, 0.5])],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn roundoff_bound_matches_an_ulp_argument() {
        assert_eq!(fd_roundoff(1.0, 0.5, 1e-6), 4.0 * f64::EPSILON / 1e-6);
        // f(x) = 1e3 + 1e-7 x: the step changes f by far less than its ulp
        let f = |t: &mut Tape, p: &[Var]| {
            let small = t.scale(p[0], 1e-7)?;
            let offset = t.constant(Tensor::scalar(1e3));
            t.add(small, offset)
        };
        let r = grad_check(f, &[Tensor::scalar(0.3)], 1e-6, 1e-5).unwrap();
        assert!(r.max_raw_rel_error() > 1e-5, "{r:?}");
        assert_eq!(r.unresolved(), 1);
        assert!(r.passed());
    }

    #[test]
    fn negated_matmul_rule_fails() {
        // f(W) = mean(X·W); a correct rule gives Xᵀ·1/n, the faulty one its negation.
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0]]).unwrap();
        let xc = x.clone();
        let f = move |t: &mut Tape, p: &[Var]| {
            let xv = t.constant(xc.clone());
            let y = t.matmul(xv, p[0])?;
            t.mean_all(y)
        };
        let w = Tensor::from_rows(&[vec![0.2, -0.1], vec![0.4, 0.3]]).unwrap();
        let mut grads = analytic_gradients(&f, &[w.clone()]).unwrap();
        grads[0].data_mut().iter_mut().for_each(|v| *v = -*v);
        let r = compare_gradients(&f, &[w], &grads, 1e-6, 1e-6).unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error() - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_aborts() {
        let err = grad_check(
            |t, p| {
                let big = t.scale(p[0], 1e308)?;
                t.scale(big, 1e308)
            },
            &[Tensor::scalar(1.0)],
            1e-6,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
