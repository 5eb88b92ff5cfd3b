use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares tape gradients with central differences.
///
/// `build` constructs a scalar from parameter nodes created for `inputs`.
/// Returns the largest error over all input entries, measured as
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<B>(build: B, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(*v).map_or(0.0, |t| t.data()[i]);
            let scale = 1f64.max(analytic.abs()).max(numeric.abs());
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
