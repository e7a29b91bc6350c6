//! SGD and Adam over a [`ParamSet`].

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state bound to one param set. Adam keeps per-parameter moment
/// buffers and per-parameter step counts so that filtered steps (updating a
/// subset of the set) still apply the correct bias correction.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
    bound_uid: Option<u64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
            bound_uid: None,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Number of updates applied to the first parameter slot.
    pub fn step_count(&self) -> u64 {
        self.steps.first().copied().unwrap_or(0)
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_filtered(params, |_| true)
    }

    /// Update only parameters whose name satisfies the predicate. Every
    /// selected parameter must carry a gradient.
    pub fn step_filtered(&mut self, params: &mut ParamSet, select: impl Fn(&str) -> bool) -> Result<()> {
        match self.bound_uid {
            None => self.bound_uid = Some(params.uid()),
            Some(uid) if uid == params.uid() => {}
            Some(_) => return Err(Error::contract("optimizer used with a different param set")),
        }
        if self.m.len() < params.len() {
            for i in self.m.len()..params.len() {
                let n = params.tensor_at(i).numel();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
                self.steps.push(0);
            }
        }
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            if !select(name) {
                continue;
            }
            let grad = match params.tensor_at(i).grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(Error::contract(format!(
                        "param {}.{} has no gradient",
                        params.name(),
                        name
                    )))
                }
            };
            let lr = self.lr;
            match self.kind {
                OptimizerKind::Sgd => {
                    let t = params.tensor_at_mut(i);
                    for (p, g) in t.values_mut().iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    self.steps[i] += 1;
                    let t_step = self.steps[i] as i32;
                    let bc1 = 1.0 - self.beta1.powi(t_step);
                    let bc2 = 1.0 - self.beta2.powi(t_step);
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    let t = params.tensor_at_mut(i);
                    for (j, (p, g)) in t.values_mut().iter_mut().zip(&grad).enumerate() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g;
                        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            if params.tensor_at(i).values().iter().any(|x| !x.is_finite()) {
                return Err(Error::non_finite(format!(
                    "param {}.{} after optimizer step",
                    params.name(),
                    name
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set_with(v: Vec<f64>, g: Vec<f64>) -> ParamSet {
        let mut s = ParamSet::new("t");
        let mut t = Tensor::vector(v);
        t.set_grad(g);
        s.insert("p", t);
        s
    }

    #[test]
    fn sgd_basic_step() {
        // p=1, g=2, lr=0.1 -> 0.8
        let mut s = set_with(vec![1.0], vec![2.0]);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.get("p").unwrap().values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // First Adam step moves by ~lr regardless of gradient scale.
        for scale in [1.0, 100.0, 1e-4] {
            let mut s = set_with(vec![0.0, 0.0], vec![scale, scale]);
            let mut opt = Optimizer::adam(1e-3).unwrap();
            opt.step(&mut s).unwrap();
            for &p in s.get("p").unwrap().values() {
                assert!((p.abs() - 1e-3).abs() < 1e-6, "scale {scale} gave step {p}");
            }
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p-4)^2, grad = 2(p-4); lr=0.1 contracts the gap by 0.8 per step.
        let mut s = set_with(vec![0.0], vec![0.0]);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        // closed-form oracle: gap after k steps = 4 * 0.8^k
        let mut expected_gap = 4.0f64;
        for _ in 0..100 {
            let p = s.get("p").unwrap().values()[0];
            s.get_mut("p").unwrap().set_grad(vec![2.0 * (p - 4.0)]);
            opt.step(&mut s).unwrap();
            expected_gap *= 0.8;
        }
        let p = s.get("p").unwrap().values()[0];
        assert!((p - 4.0).abs() < 1e-3);
        assert!(((p - 4.0).abs() - expected_gap).abs() < 1e-9);
    }

    #[test]
    fn missing_grad_is_contract_violation() {
        let mut s = ParamSet::new("t");
        s.insert("p", Tensor::vector(vec![1.0]));
        let mut opt = Optimizer::sgd(0.1).unwrap();
        assert!(opt.step(&mut s).is_err());
    }

    #[test]
    fn filtered_step_leaves_others_untouched() {
        let mut s = ParamSet::new("t");
        let mut a = Tensor::vector(vec![1.0]);
        a.set_grad(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        b.set_grad(vec![1.0]);
        s.insert("actor.w", a);
        s.insert("critic.w", b);
        let mut opt = Optimizer::sgd(0.5).unwrap();
        opt.step_filtered(&mut s, |n| n.starts_with("actor.")).unwrap();
        assert_eq!(s.get("actor.w").unwrap().values()[0], 0.5);
        assert_eq!(s.get("critic.w").unwrap().values()[0], 1.0);
    }
}
