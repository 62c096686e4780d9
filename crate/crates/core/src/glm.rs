//! Linear and logistic regression used by the predictor, the two-sided
//! baseline, propensity scores and covariate screening.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

fn design(x: &[Vec<f64>], p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

/// Solves the symmetric positive (semi)definite system, Cholesky first.
fn spd_solve(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let s = ch.solve(&b);
        if s.iter().all(|v| v.is_finite()) {
            return Some(s);
        }
    }
    a.lu().solve(&b).filter(|s| s.iter().all(|v| v.is_finite()))
}

/// Ridge regression with an unpenalized intercept.
pub fn ridge_linear(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<LinearModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument("ridge_linear: empty or mismatched input".into()));
    }
    let p = x[0].len();
    let xm = design(x, p);
    let mut a = xm.transpose() * &xm;
    for j in 1..=p {
        a[(j, j)] += lambda;
    }
    let b = xm.transpose() * DVector::from_column_slice(y);
    let s = spd_solve(a, b).ok_or_else(|| Error::Convergence("ridge system is singular".into()))?;
    Ok(LinearModel { intercept: s[0], coef: s.iter().skip(1).copied().collect() })
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Columns of the input that were kept (collinear ones are dropped).
    pub kept: Vec<usize>,
}

/// Ordinary least squares with two-sided t-test p-values per coefficient.
///
/// Columns that are (numerically) linear combinations of earlier columns are
/// dropped; their indices are absent from `kept`.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::InvalidArgument("ols: empty or mismatched input".into()));
    }
    let p = x[0].len();
    // Greedy column selection by Gram-Schmidt residual norm.
    let mut kept: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0 / (n as f64).sqrt())];
    for j in 0..p {
        let mut v = DVector::from_iterator(n, x.iter().map(|r| r[j]));
        let norm0 = v.norm();
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        let nv = v.norm();
        if norm0 > 0.0 && nv > 1e-8 * norm0.max(1.0) {
            basis.push(v / nv);
            kept.push(j);
        } else {
            log::warn!("ols: dropping collinear column {j}");
        }
    }
    let k = kept.len();
    let xm = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[i][kept[j - 1]] });
    let xtx = xm.transpose() * &xm;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::Convergence("ols: singular design".into()))?;
    let yv = DVector::from_column_slice(y);
    let beta = &inv * xm.transpose() * &yv;
    let resid = &yv - &xm * &beta;
    let dof = n as f64 - (k + 1) as f64;
    let sigma2 = if dof > 0.0 { resid.norm_squared() / dof } else { f64::NAN };
    let mut se = Vec::with_capacity(k);
    let mut pv = Vec::with_capacity(k);
    for j in 1..=k {
        let s = (sigma2 * inv[(j, j)]).sqrt();
        se.push(s);
        let t = beta[j] / s;
        let p = if dof > 0.0 && t.is_finite() {
            let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Convergence(e.to_string()))?;
            2.0 * (1.0 - dist.cdf(t.abs()))
        } else if t.is_infinite() {
            0.0
        } else {
            1.0
        };
        pv.push(p);
    }
    Ok(OlsFit {
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
        se,
        p_values: pv,
        kept,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub iterations: usize,
    /// Ridge penalty actually used.
    pub penalty: f64,
}

impl LogisticFit {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression by iteratively reweighted least squares.
///
/// `penalty` is a ridge penalty on the slopes (the intercept is free).
/// Labels are 0/1.
pub fn logistic_irls(x: &[Vec<f64>], y: &[f64], penalty: f64, max_iter: usize) -> Result<LogisticFit> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::InvalidArgument("logistic: empty or mismatched input".into()));
    }
    let p = x[0].len();
    let xm = design(x, p);
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p + 1);
    let ybar = y.iter().sum::<f64>() / n as f64;
    if ybar > 0.0 && ybar < 1.0 {
        beta[0] = (ybar / (1.0 - ybar)).ln();
    }
    let dev = |b: &DVector<f64>| -> f64 {
        let eta = &xm * b;
        let mut d = 0.0;
        for i in 0..n {
            let e = eta[i];
            // log(1 + exp(e)) - y e, computed stably
            let l1p = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            d += l1p - yv[i] * e;
        }
        d + 0.5 * penalty * b.iter().skip(1).map(|v| v * v).sum::<f64>()
    };
    let mut cur = dev(&beta);
    for it in 1..=max_iter {
        let eta = &xm * &beta;
        let mu: DVector<f64> = eta.map(sigmoid);
        let w: DVector<f64> = mu.map(|m| (m * (1.0 - m)).max(1e-10));
        // Newton step on the penalized log-likelihood.
        let mut grad = xm.transpose() * (&yv - &mu);
        for j in 1..=p {
            grad[j] -= penalty * beta[j];
        }
        let mut h = DMatrix::zeros(p + 1, p + 1);
        for i in 0..n {
            let row = xm.row(i);
            h += row.transpose() * row * w[i];
        }
        for j in 1..=p {
            h[(j, j)] += penalty;
        }
        let step = spd_solve(h, grad).ok_or_else(|| Error::Convergence("singular Hessian".into()))?;
        // Step halving keeps the objective monotone.
        let mut t = 1.0;
        let mut next = &beta + &step * t;
        let mut nd = dev(&next);
        while !(nd <= cur + 1e-12) && t > 1e-8 {
            t *= 0.5;
            next = &beta + &step * t;
            nd = dev(&next);
        }
        let change = (&next - &beta).amax();
        beta = next;
        let improved = cur - nd;
        cur = nd;
        if change < 1e-9 || improved.abs() < 1e-12 * (1.0 + cur.abs()) {
            return Ok(LogisticFit {
                intercept: beta[0],
                coef: beta.iter().skip(1).copied().collect(),
                iterations: it,
                penalty,
            });
        }
    }
    Err(Error::Convergence(format!("logistic regression did not converge in {max_iter} iterations")))
}
