use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::Result;

// Gradients smaller than this are compared in absolute terms.
const NORM_FLOOR: f64 = 1e-7;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with an absolute floor on the denominator.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(NORM_FLOOR)
}

/// Largest relative error between tape gradients and central differences
/// with respect to every leaf input of `f`.
pub fn input_gradient_error<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.input(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok((t, vs, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map_or(vec![0.0; x.len()], <[f64]>::to_vec);
        let mut numeric = vec![0.0; x.len()];
        let mut shifted = inputs.to_vec();
        for (i, n) in numeric.iter_mut().enumerate() {
            let x0 = x.data()[i];
            shifted[k].data_mut()[i] = x0 + h;
            let (tp, _, op) = eval(&shifted)?;
            shifted[k].data_mut()[i] = x0 - h;
            let (tm, _, om) = eval(&shifted)?;
            shifted[k].data_mut()[i] = x0;
            *n = (tp.value(op).item() - tm.value(om).item()) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Relative error between tape gradients and central differences over the
/// trainable parameters of `store` that `f` touches, taken over the joint
/// vector of sampled coordinates.
///
/// At most `coords` entries per parameter are sampled (all when the
/// tensor is smaller). Parameter values are restored afterwards.
pub fn param_gradient_error<F>(store: &mut ParamStore, f: F, h: f64, coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.is_frozen(id) || !store.has_grad(id) {
            continue;
        }
        let len = store.value(id).len();
        let picked: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            sample(&mut rng, len, coords).into_vec()
        };
        for &i in &picked {
            analytic.push(store.grad(id)[i]);
            let x0 = store.value(id).data()[i];
            let side = |delta: f64, store: &mut ParamStore| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = x0 + delta;
                let mut t = Tape::new();
                let l = f(&mut t, store)?;
                Ok(t.value(l).item())
            };
            let plus = side(h, store)?;
            let minus = side(-h, store)?;
            store.value_mut(id).data_mut()[i] = x0;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    store.zero_grad();
    Ok(relative_error(&analytic, &numeric))
}
