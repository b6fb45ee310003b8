//! Central finite-difference gradient checking.

use rand::Rng;

use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Relative error of the analytic gradient of `sum(f(inputs) * r)` against
/// central differences, for a random projection `r`. Returns the worst
/// per-input error, measured as `|a - n|_2 / max(|a|_2, |n|_2)`.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, rng: &mut impl Rng, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.shape(out).to_vec();
    let proj = Tensor::from_fn(out_shape.clone(), |_| rng.random_range(-1.0..1.0));
    let r = g.constant(proj.clone());
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        let mut values = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            values[i].data_mut()[j] = x0 + eps;
            let up = eval(&values)?;
            values[i].data_mut()[j] = x0 - eps;
            let down = eval(&values)?;
            values[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
