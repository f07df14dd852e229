use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{Attribution, AttributionKind};
use crate::error::{FaithError, Result};

pub const DEFAULT_ALPHA: f64 = 0.01;

/// OLS fit of `p = beta0 + beta1 * lambda` with a two-sided t-test on beta1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub beta0: f64,
    pub beta1: f64,
    pub mse: f64,
    pub se_beta1: f64,
    /// Infinite for an exact non-flat fit; serialized as null then.
    #[serde(default)]
    pub t_stat: Option<f64>,
    pub p_value: f64,
    pub n: usize,
}

pub fn fit_linear(points: &[(f64, f64)]) -> Result<RegressionResult> {
    let n = points.len();
    if n < 3 {
        return Err(FaithError::invalid(format!("fit_linear needs at least 3 points, got {n}")));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(FaithError::invalid("non-finite regression point"));
    }
    let nf = n as f64;
    let x_bar = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - x_bar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FaithError::invalid("all lambda values identical"));
    }
    let df = nf - 2.0;

    let y0 = points[0].1;
    if points.iter().all(|p| p.1 == y0) {
        return Ok(RegressionResult {
            beta0: y0,
            beta1: 0.0,
            mse: 0.0,
            se_beta1: 0.0,
            t_stat: Some(0.0),
            p_value: 1.0,
            n,
        });
    }

    let y_bar = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxy: f64 = points.iter().map(|p| (p.0 - x_bar) * (p.1 - y_bar)).sum();
    let beta1 = sxy / sxx;
    let beta0 = y_bar - beta1 * x_bar;
    let sse: f64 = points.iter().map(|p| (p.1 - beta0 - beta1 * p.0).powi(2)).sum();
    let mse = sse / df;
    let se_beta1 = (mse / sxx).sqrt();

    // Residuals at rounding level count as an exact fit.
    let y_scale = points.iter().map(|p| p.1.abs()).fold(1.0_f64, f64::max);
    let rounding = 8.0 * f64::EPSILON * y_scale;
    if sse <= nf * rounding * rounding {
        let flat = beta1.abs() <= rounding;
        return Ok(RegressionResult {
            beta0,
            beta1: if flat { 0.0 } else { beta1 },
            mse,
            se_beta1,
            t_stat: if flat { Some(0.0) } else { None },
            p_value: if flat { 1.0 } else { 0.0 },
            n,
        });
    }

    let t = beta1 / se_beta1;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| FaithError::invalid(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(RegressionResult {
        beta0,
        beta1,
        mse,
        se_beta1,
        t_stat: Some(t),
        p_value,
        n,
    })
}

/// Score is the probability drop per unit erasure, `-beta1`, and is zeroed
/// unless the slope is significant at `alpha`.
pub fn importance_attribution(concept_id: &str, reg: &RegressionResult, alpha: f64) -> Attribution {
    let significant = reg.p_value <= alpha && reg.beta1 != 0.0;
    Attribution {
        concept_id: concept_id.to_string(),
        kind: AttributionKind::Importance,
        score: if significant { -reg.beta1 } else { 0.0 },
        significant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        (0..=10).map(|i| i as f64 / 10.0).map(|l| (l, f(l))).collect()
    }

    #[test]
    fn exact_line() {
        let r = fit_linear(&grid(|l| 0.5 - 0.3 * l)).unwrap();
        assert!((r.beta1 + 0.3).abs() < 1e-12);
        assert!((r.beta0 - 0.5).abs() < 1e-12);
        assert_eq!(r.p_value, 0.0);
        assert_eq!(r.n, 11);
    }

    #[test]
    fn constant() {
        let r = fit_linear(&grid(|_| 0.42)).unwrap();
        assert_eq!((r.beta1, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn errors() {
        assert!(fit_linear(&[(0.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(fit_linear(&[(0.5, 1.0), (0.5, 2.0), (0.5, 3.0)]).is_err());
    }

    #[test]
    fn textbook_t_test() {
        // y = 1, 3, 2, 5, 4 on x = 0..4: beta1 = 0.8, SSE = 3.6, MSE = 1.2,
        // se = sqrt(1.2 / 10), t = 2.3094, two-sided p(df=3) = 0.10411
        let pts: Vec<(f64, f64)> = [1.0, 3.0, 2.0, 5.0, 4.0].iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
        let r = fit_linear(&pts).unwrap();
        assert!((r.beta1 - 0.8).abs() < 1e-12);
        assert!((r.mse - 1.2).abs() < 1e-12);
        assert!((r.se_beta1 - 0.12f64.sqrt()).abs() < 1e-12);
        assert!((r.t_stat.unwrap() - 2.309_401_076_758_503).abs() < 1e-9);
        assert!((r.p_value - 0.104_088).abs() < 1e-5, "{}", r.p_value);
    }

    #[test]
    fn importance_gate_and_sign() {
        let mk = |beta1, p_value| RegressionResult {
            beta0: 0.5,
            beta1,
            mse: 0.0,
            se_beta1: 0.0,
            t_stat: None,
            p_value,
            n: 11,
        };
        let a = importance_attribution("c", &mk(-0.3, 1e-6), DEFAULT_ALPHA);
        assert!(a.significant && (a.score - 0.3).abs() < 1e-15);
        let a = importance_attribution("c", &mk(-0.3, 0.05), DEFAULT_ALPHA);
        assert_eq!((a.score, a.significant), (0.0, false));
        let a = importance_attribution("c", &mk(0.0, 1.0), DEFAULT_ALPHA);
        assert_eq!(a.score, 0.0);
    }
}
