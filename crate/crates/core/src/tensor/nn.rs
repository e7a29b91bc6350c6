//! Layer helpers: parameter initialization, affine layers, and the GRU cell.

use super::tape::{BoundParams, Tape, TensorRef};
use super::{ParamSet, Tensor};
use crate::error::Result;
use crate::rng::{hash64, Rng};

/// Generator whose stream depends only on (seed, set name, param name), so a
/// parameter's initial values are independent of creation order.
pub fn param_rng(seed: u64, set_name: &str, param_name: &str) -> Rng {
    Rng::seed(hash64(seed, &[set_name, param_name]))
}

/// Weight matrix initialized uniform in ±1/sqrt(fan_in).
pub fn init_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(vec![rows, cols], values).expect("init shape")
}

/// Embedding table `[rows, d]`, scaled by 1/sqrt(d).
pub fn init_embedding(rows: usize, d: usize, rng: &mut Rng) -> Tensor {
    init_matrix(rows, d, d, rng)
}

pub fn init_bias(n: usize) -> Tensor {
    Tensor::vector(vec![0.0; n])
}

/// Add `prefix.w` `[d_in, d_out]` and `prefix.b` `[d_out]` to the set.
pub fn add_linear(set: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, seed: u64) {
    let wname = format!("{prefix}.w");
    let mut rng = param_rng(seed, set.name(), &wname);
    set.insert(wname, init_matrix(d_in, d_out, d_in, &mut rng));
    set.insert(format!("{prefix}.b"), init_bias(d_out));
}

/// x . W + b with the bias broadcast over rows.
pub fn linear(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: TensorRef) -> Result<TensorRef> {
    let w = bound.get(&format!("{prefix}.w"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Bound references to one GRU cell's parameters.
pub struct GruRefs {
    pub wz: TensorRef,
    pub uz: TensorRef,
    pub bz: TensorRef,
    pub wr: TensorRef,
    pub ur: TensorRef,
    pub br: TensorRef,
    pub wn: TensorRef,
    pub un: TensorRef,
    pub bn: TensorRef,
}

impl GruRefs {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<GruRefs> {
        Ok(GruRefs {
            wz: bound.get(&format!("{prefix}.wz"))?,
            uz: bound.get(&format!("{prefix}.uz"))?,
            bz: bound.get(&format!("{prefix}.bz"))?,
            wr: bound.get(&format!("{prefix}.wr"))?,
            ur: bound.get(&format!("{prefix}.ur"))?,
            br: bound.get(&format!("{prefix}.br"))?,
            wn: bound.get(&format!("{prefix}.wn"))?,
            un: bound.get(&format!("{prefix}.un"))?,
            bn: bound.get(&format!("{prefix}.bn"))?,
        })
    }
}

/// Add the nine GRU parameters for input dim `d_in` and hidden dim `d_h`.
pub fn add_gru(set: &mut ParamSet, prefix: &str, d_in: usize, d_h: usize, seed: u64) {
    for gate in ["z", "r", "n"] {
        let wname = format!("{prefix}.w{gate}");
        let mut rng = param_rng(seed, set.name(), &wname);
        set.insert(wname, init_matrix(d_in, d_h, d_in, &mut rng));
        let uname = format!("{prefix}.u{gate}");
        let mut rng = param_rng(seed, set.name(), &uname);
        set.insert(uname, init_matrix(d_h, d_h, d_h, &mut rng));
        set.insert(format!("{prefix}.b{gate}"), init_bias(d_h));
    }
}

/// One gated-recurrent-unit step over a batch of rows.
///
/// z = sigmoid(x Wz + h Uz + bz)
/// r = sigmoid(x Wr + h Ur + br)
/// n = tanh(x Wn + (r*h) Un + bn)
/// h' = (1 - z)*n + z*h
pub fn gru_cell(tape: &mut Tape, x: TensorRef, h: TensorRef, p: &GruRefs) -> Result<TensorRef> {
    let z = {
        let a = tape.matmul(x, p.wz)?;
        let b = tape.matmul(h, p.uz)?;
        let s = tape.add(a, b)?;
        let s = tape.add(s, p.bz)?;
        tape.sigmoid(s)?
    };
    let r = {
        let a = tape.matmul(x, p.wr)?;
        let b = tape.matmul(h, p.ur)?;
        let s = tape.add(a, b)?;
        let s = tape.add(s, p.br)?;
        tape.sigmoid(s)?
    };
    let n = {
        let a = tape.matmul(x, p.wn)?;
        let rh = tape.mul(r, h)?;
        let b = tape.matmul(rh, p.un)?;
        let s = tape.add(a, b)?;
        let s = tape.add(s, p.bn)?;
        tape.tanh(s)?
    };
    let one_minus_z = tape.affine(z, -1.0, 1.0)?;
    let a = tape.mul(one_minus_z, n)?;
    let b = tape.mul(z, h)?;
    tape.add(a, b)
}
