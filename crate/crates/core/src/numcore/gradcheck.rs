use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients with central finite differences.
///
/// `loss` builds a scalar from the bound inputs. Returns the largest
/// per-input relative error `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * eps));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        if !scale.is_finite() {
            return Err(Error::Training { step: 0, message: "non-finite gradient".into() });
        }
        if scale > 1e-12 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    Ok(worst)
}
