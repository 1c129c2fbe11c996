//! Finite-difference verification of tape gradients.

use indexmap::IndexMap;

use super::{Matrix, NumError};

/// Ordered collection of named parameter matrices. Iteration order is
/// insertion order, which doubles as the checkpoint tensor order.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }
}

/// Gradients keyed by parameter name.
pub type ParamGrads = IndexMap<String, Matrix>;

/// Outcome of checking one named parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Full gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.per_param.iter().filter(|p| !p.passed)
    }
}

/// Compares analytic gradients against central finite differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)`, element by element.
///
/// `loss` evaluates the objective; `analytic` returns its gradients by
/// parameter name (typically by recording a tape and reading them off).
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<L, G>(
    loss: L,
    analytic: G,
    params: &ParamSet,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, NumError>
where
    L: Fn(&ParamSet) -> Result<f64, NumError>,
    G: Fn(&ParamSet) -> Result<ParamGrads, NumError>,
{
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(NumError::NonFinite { value: base });
    }
    let grads = analytic(params)?;

    let mut work = params.clone();
    let mut per_param = Vec::new();
    let mut overall_max = 0.0f64;

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let ana = grads
            .get(&name)
            .ok_or_else(|| NumError::MissingGradient { name: name.clone() })?
            .clone();
        let n = ana.len();
        let mut max_rel = 0.0f64;
        for idx in 0..n {
            let orig = work.get(&name).unwrap().data()[idx];

            work.get_mut(&name).unwrap().data_mut()[idx] = orig + eps;
            let plus = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = orig - eps;
            let minus = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumError::NonFinite {
                    value: if plus.is_finite() { minus } else { plus },
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = ana.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
        if max_rel > overall_max {
            overall_max = max_rel;
        }
        per_param.push(ParamCheck {
            name,
            max_rel_error: max_rel,
            passed: max_rel <= tol,
        });
    }

    Ok(GradCheckReport {
        passed: per_param.iter().all(|p| p.passed),
        per_param,
        max_rel_error: overall_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::GradTape;

    fn quadratic_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Matrix::filled(1, 1, 3.0));
        p
    }

    #[test]
    fn quadratic_passes() {
        // f(θ) = θ², analytic gradient 2θ
        let loss = |p: &ParamSet| Ok(p.get("theta").unwrap().get(0, 0).powi(2));
        let analytic = |p: &ParamSet| {
            let mut g = ParamGrads::new();
            let t = p.get("theta").unwrap().get(0, 0);
            g.insert("theta".to_string(), Matrix::filled(1, 1, 2.0 * t));
            Ok(g)
        };
        let report = grad_check(loss, analytic, &quadratic_params(), 1e-5, 1e-6).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn corrupted_gradient_fails_naming_parameter() {
        let loss = |p: &ParamSet| Ok(p.get("theta").unwrap().get(0, 0).powi(2));
        let analytic = |p: &ParamSet| {
            let mut g = ParamGrads::new();
            let t = p.get("theta").unwrap().get(0, 0);
            g.insert("theta".to_string(), Matrix::filled(1, 1, 2.0 * t + 1.0));
            Ok(g)
        };
        let report = grad_check(loss, analytic, &quadratic_params(), 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
        let failed: Vec<_> = report.failures().collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].name, "theta");
    }

    #[test]
    fn tape_matmul_chain_passes() {
        let mut params = ParamSet::new();
        params.insert(
            "w",
            Matrix::from_rows(&[vec![0.4, -0.7], vec![1.3, 0.2]]).unwrap(),
        );
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]]).unwrap();

        let build = |p: &ParamSet| -> Result<(GradTape, crate::numcore::ValueId, crate::numcore::ValueId), NumError> {
            let mut tape = GradTape::new();
            let ix = tape.leaf(x.clone());
            let iw = tape.leaf(p.get("w").unwrap().clone());
            let y = tape.matmul(ix, iw)?;
            let s = tape.sigmoid(y);
            let sq = tape.mul(s, s)?;
            let total = tape.sum_all(sq);
            Ok((tape, iw, total))
        };
        let loss = |p: &ParamSet| build(p).map(|(tape, _, total)| tape.scalar(total));
        let analytic = |p: &ParamSet| {
            let (tape, iw, total) = build(p)?;
            let grads = tape.backward(total)?;
            let mut out = ParamGrads::new();
            out.insert("w".to_string(), grads.wrt(iw).clone());
            Ok(out)
        };
        let report = grad_check(loss, analytic, &params, 1e-5, 1e-6).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut p = ParamSet::new();
        p.insert("theta", Matrix::filled(1, 1, 0.0));
        let loss = |_: &ParamSet| Ok(f64::NAN);
        let analytic = |_: &ParamSet| Ok(ParamGrads::new());
        assert!(grad_check(loss, analytic, &p, 1e-5, 1e-4).is_err());
    }
}
