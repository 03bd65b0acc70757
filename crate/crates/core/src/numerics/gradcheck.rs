//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Entries sampled per tensor; all entries when the tensor is smaller.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            max_samples: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry index, analytic, numeric of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(p+ε) − f(p−ε)) / 2ε` on a sampled subset
/// of the entries exposed by `access`.
///
/// `access` returns the parameter slice inside `state`; `f` evaluates the
/// scalar objective. The parameter is restored after each probe.
pub fn check_gradients<S, A, L>(
    name: &str,
    state: &mut S,
    analytic: &[f64],
    mut access: A,
    mut f: L,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    A: FnMut(&mut S) -> &mut [f64],
    L: FnMut(&S) -> f64,
{
    let len = access(state).len();
    if len != analytic.len() {
        return Err(Error::Contract(format!(
            "`{name}` has {len} entries but analytic gradient has {}",
            analytic.len()
        )));
    }
    let mut r = rng::stream(cfg.seed, name);
    let indices: Vec<usize> = if len <= cfg.max_samples {
        (0..len).collect()
    } else {
        let mut v = sample(&mut r, len, cfg.max_samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: indices.len(),
        max_rel_err: 0.0,
        worst: None,
    };
    for i in indices {
        let orig = access(state)[i];
        access(state)[i] = orig + cfg.eps;
        let plus = f(state);
        access(state)[i] = orig - cfg.eps;
        let minus = f(state);
        access(state)[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective probing `{name}`[{i}]"
            )));
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let err = relative_error(analytic[i], numeric);
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, analytic[i], numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let mut x = vec![3.0f64];
        let report = check_gradients(
            "x",
            &mut x,
            &[6.0],
            |s| s.as_mut_slice(),
            |s| s[0] * s[0],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut x = vec![1.0f64, 2.0, 3.0];
        let report = check_gradients(
            "c",
            &mut x,
            &[0.0, 0.0, 0.0],
            |s| s.as_mut_slice(),
            |_| 4.2,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut x = vec![1.0f64];
        let report = check_gradients(
            "w",
            &mut x,
            &[5.0],
            |s| s.as_mut_slice(),
            |s| s[0] * s[0],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed(1e-4));
    }

    #[test]
    fn non_finite_objective_errors() {
        let mut x = vec![1.0f64];
        let res = check_gradients(
            "n",
            &mut x,
            &[0.0],
            |s| s.as_mut_slice(),
            |_| f64::NAN,
            &GradCheckConfig::default(),
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn sampling_is_capped() {
        let mut x = vec![0.5f64; 500];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let report = check_gradients(
            "big",
            &mut x,
            &grad,
            |s| s.as_mut_slice(),
            |s| s.iter().map(|v| v * v).sum(),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 64);
    }
}
