//! Central finite-difference check of graph gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Smallest gradient magnitude used to normalise the error.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares autodiff gradients of a scalar function against central
/// differences with step `eps`, over every entry of every input.
///
/// `f` builds the function on a fresh graph from the bound inputs. The result
/// is `max |g_auto - g_fd| / max(max |g_fd|, max |g_auto|, GRAD_FLOOR)`, taken
/// per input tensor and maximized over inputs. The floor keeps inputs whose
/// true gradient is identically zero (such as an attention key bias) from
/// turning finite-difference roundoff into a large relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let auto: Vec<f64> = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        let mut probe: Vec<Tensor> = inputs.to_vec();
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            numeric[k] = (up - down) / (2.0 * eps);
        }
        let scale = numeric.iter().chain(&auto).fold(GRAD_FLOOR, |m, v| m.max(v.abs()));
        let err = auto
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err / scale);
    }
    Ok(worst)
}
