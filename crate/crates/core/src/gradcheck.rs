//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative. Values
/// below `floor` in magnitude are compared absolutely against `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckReport {
    fn absorb(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self
            .max_rel_err
            .max(relative_error(analytic, numeric, FLOOR));
        self.checked += 1;
    }
}

/// Check gradients of a scalar function of plain input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, step: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = CheckReport::default();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            report.absorb(analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Check gradients of a scalar function with respect to the trainable
/// parameters in `store`. At most `per_param` randomly chosen entries of each
/// parameter are probed.
pub fn check_params<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    per_param: usize,
    rng: &mut SeededRng,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?.into_map(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut report = CheckReport::default();
    let ids: Vec<ParamId> = store.trainable().collect();
    let mut probe = store.clone();
    for id in ids {
        let n = store.value(id).len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        let analytic = grads.get(id).expect("trainable parameter").to_vec();
        for i in picks {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            report.absorb(analytic[i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx sum(x^2) computed correctly passes...
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let ok = check_inputs(
            std::slice::from_ref(&x),
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum_all(sq)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(ok.max_rel_err < 1e-8);
        assert_eq!(ok.checked, 3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-3), 0.0);
        assert!((relative_error(2e-6, 1e-6, 1e-3) - 1e-3).abs() < 1e-12);
    }
}
