use super::{Parameters, Result, Tape, Var};

/// Per-parameter outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Forward evaluation failed; the report is a failure.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error() <= self.tolerance
    }
}

/// Denominator floor for relative error; below it the comparison is
/// absolute. Central differences at step 1e-5 on an O(10) loss carry about
/// 1e-10 of f64 roundoff, so smaller gradients cannot be resolved relatively.
pub const REL_FLOOR: f64 = 1e-5;

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients against central finite differences.
///
/// `f` must register parameter `i` of `params.tensors()` on the tape under
/// key `i` and return a scalar loss.
pub fn check_gradients<P, F>(params: &mut P, step: f64, tol: f64, f: F) -> GradCheckReport
where
    P: Parameters,
    F: for<'a> Fn(&'a P, &mut Tape<'a>) -> Result<Var>,
{
    let eval = |p: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(p, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let grads = f(params, &mut tape).and_then(|loss| tape.backward(loss));
        match grads {
            Ok(g) => (0..params.tensors().len()).map(|k| g.param(k).map(<[f64]>::to_vec)).collect(),
            Err(e) => {
                return GradCheckReport { params: Vec::new(), tolerance: tol, error: Some(e.to_string()) };
            }
        }
    };

    let names: Vec<String> = params.tensors().iter().map(|p| p.name.clone()).collect();
    let mut checks = Vec::with_capacity(names.len());
    for (key, name) in names.into_iter().enumerate() {
        let len = params.tensors()[key].tensor.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..len {
            let orig = params.tensors()[key].tensor.values()[j];
            params.tensors_mut()[key].values_mut()[j] = orig + step;
            let plus = eval(params);
            params.tensors_mut()[key].values_mut()[j] = orig - step;
            let minus = eval(params);
            params.tensors_mut()[key].values_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return GradCheckReport { params: checks, tolerance: tol, error: Some(e.to_string()) };
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let auto = analytic[key].as_ref().map_or(0.0, |g| g[j]);
            max_rel = max_rel.max(rel_error(auto, numeric));
            max_abs = max_abs.max((auto - numeric).abs());
        }
        checks.push(ParamCheck { name, entries: len, max_rel_error: max_rel, max_abs_error: max_abs });
    }
    GradCheckReport { params: checks, tolerance: tol, error: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_tightly() {
        // f(x) = Σ c_i x_i²  with analytic gradient 2 c_i x_i
        let mut params = vec![Tensor::column(vec![0.3, -0.8, 0.5]), Tensor::column(vec![1.5, 2.0, -1.0])];
        let report = check_gradients(&mut params, 1e-5, 1e-7, |p, tape| {
            let x = tape.param(0, &p[0]);
            let c = tape.param(1, &p[1]);
            let sq = tape.mul(x, x)?;
            let w = tape.mul(sq, c)?;
            tape.sum(w)
        });
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() < 1e-7);
    }

    #[test]
    fn broken_backward_rule_fails() {
        let mut params = vec![Tensor::column(vec![0.3, -0.8, 0.5])];
        let report = check_gradients(&mut params, 1e-5, 1e-4, |p, tape| {
            let x = tape.param(0, &p[0]);
            // cube with a deliberately wrong derivative (2x instead of 3x²)
            let y = tape.map(x, |v| v * v * v, |v| 2.0 * v)?;
            tape.sum(y)
        });
        assert!(!report.passed());
    }
}
