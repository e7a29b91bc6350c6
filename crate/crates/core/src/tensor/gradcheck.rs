//! Central finite-difference gradient checking.
//!
//! The numeric side only re-runs the forward pass under perturbed parameters,
//! so it stays independent of the analytic backward path it validates.

use super::ParamSet;
use crate::error::Result;

/// Numeric gradient of `f` w.r.t. every entry of every parameter in `set`,
/// by central differences with step `eps`. Returns one flat gradient vector
/// per parameter, in set order.
pub fn fd_grads(
    set: &mut ParamSet,
    eps: f64,
    f: &mut dyn FnMut(&ParamSet) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let n = set.tensor_at(i).numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = set.tensor_at(i).values()[j];
            set.tensor_at_mut(i).values_mut()[j] = orig + eps;
            let up = f(set)?;
            set.tensor_at_mut(i).values_mut()[j] = orig - eps;
            let down = f(set)?;
            set.tensor_at_mut(i).values_mut()[j] = orig;
            g[j] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max relative error between the analytic gradients stored on `set` and a
/// numeric gradient from [`fd_grads`]. Per component:
/// |a - n| / max(|a|, |n|, 1e-6).
pub fn max_rel_error(set: &ParamSet, numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, (_, t)) in set.iter().enumerate() {
        let a = t.grad().expect("analytic gradient missing");
        for (x, y) in a.iter().zip(&numeric[i]) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add_gru, add_linear, gru_cell, linear, GruRefs, Tape, Tensor};

    /// Two-layer MLP gradient vs finite differences on random inputs.
    #[test]
    fn mlp_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut set = ParamSet::new("mlp");
            add_linear(&mut set, "l1", 5, 7, seed);
            add_linear(&mut set, "l2", 7, 1, seed.wrapping_add(1000));
            let mut rng = crate::rng::Rng::seed(seed ^ 0xabc);
            let x = Tensor::new(vec![3, 5], (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();

            let forward = |set: &ParamSet, tape: &mut Tape| -> crate::error::Result<_> {
                let bound = tape.bind(set);
                let xr = tape.constant(&x);
                let h = linear(tape, &bound, "l1", xr)?;
                let h = tape.tanh(h)?;
                let y = linear(tape, &bound, "l2", h)?;
                let loss = tape.mean_all(y)?;
                Ok((bound, loss))
            };

            let mut tape = Tape::new();
            let (bound, loss) = forward(&set, &mut tape).unwrap();
            tape.backward(loss).unwrap();
            let mut analytic = set.clone();
            analytic.clear_grads();
            tape.harvest(&bound, &mut analytic).unwrap();

            let numeric = fd_grads(&mut set, 1e-4, &mut |s| {
                let mut t = Tape::new();
                let (_, l) = forward(s, &mut t)?;
                Ok(t.scalar_value(l))
            })
            .unwrap();
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    /// Gradient through three chained GRU cells vs finite differences.
    #[test]
    fn chained_gru_matches_finite_differences() {
        for seed in 0..20u64 {
            let d = 4;
            let mut set = ParamSet::new("gru");
            add_gru(&mut set, "g", d, d, seed);
            let mut rng = crate::rng::Rng::seed(seed ^ 0x77);
            let xs: Vec<Tensor> = (0..3)
                .map(|_| {
                    Tensor::new(vec![1, d], (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
                })
                .collect();

            let forward = |set: &ParamSet, tape: &mut Tape| -> crate::error::Result<_> {
                let bound = tape.bind(set);
                let refs = GruRefs::bind(&bound, "g")?;
                let mut h = tape.constant(&Tensor::zeros(vec![1, d]));
                for x in &xs {
                    let xr = tape.constant(x);
                    h = gru_cell(tape, xr, h, &refs)?;
                }
                let loss = tape.mean_all(h)?;
                Ok((bound, loss))
            };

            let mut tape = Tape::new();
            let (bound, loss) = forward(&set, &mut tape).unwrap();
            tape.backward(loss).unwrap();
            let mut analytic = set.clone();
            analytic.clear_grads();
            tape.harvest(&bound, &mut analytic).unwrap();

            let numeric = fd_grads(&mut set, 1e-4, &mut |s| {
                let mut t = Tape::new();
                let (_, l) = forward(s, &mut t)?;
                Ok(t.scalar_value(l))
            })
            .unwrap();
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }
}
