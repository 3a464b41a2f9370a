//! Central finite-difference verification of backward rules.

use crate::error::Result;
use crate::{Graph, Real, Tensor, Var};

/// Fixed projection weights in `[-1, 1)` so vector-valued outputs reduce to a
/// scalar whose gradient exercises every output coordinate.
fn projection(n: usize) -> Vec<f64> {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn projected_loss<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let shape = g.shape(out).to_vec();
        let weights = Tensor::from_f64(shape, &projection(g.value(out).len()))?;
        let w = g.constant(weights);
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };
    Ok((g, vars, loss))
}

/// Maximum relative error between analytic and central-difference gradients
/// over every coordinate of every input:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = projected_loss(&f, inputs)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(g);

    let eval = |probe: &[Tensor<T>]| -> Result<f64> {
        let (g, _, loss) = projected_loss(&f, probe)?;
        Ok(g.value(loss).item().as_f64())
    };
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = T::lit(orig.as_f64() + step);
            let plus = eval(&probe)?;
            probe[i].data_mut()[k] = T::lit(orig.as_f64() - step);
            let minus = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[k].as_f64();
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
