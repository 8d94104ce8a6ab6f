use crate::error::{Error, Result};

use super::params::ParamSet;
use super::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * param`, `param <- param - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ParamSet<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>, lr: f64) -> Result<()> {
        self.step_filtered(params, grads, lr, |_| true)
    }

    /// Updates only the tensors whose name passes `train`; the rest (and
    /// their velocities) are left untouched.
    pub fn step_filtered(
        &mut self,
        params: &mut ParamSet<S>,
        grads: &ParamSet<S>,
        lr: f64,
        train: impl Fn(&str) -> bool,
    ) -> Result<()> {
        params
            .check_same_shapes(grads)
            .map_err(|e| Error::Shape(format!("sgd_step: {e}")))?;
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        let (mu, wd, lr) = (S::of(self.momentum), S::of(self.weight_decay), S::of(lr));
        for i in 0..params.len() {
            if !train(&params.names()[i]) {
                continue;
            }
            let g = grads.at(i).data();
            let v = velocity.at_mut(i).data_mut();
            let p = params.at_mut(i).data_mut();
            for j in 0..p.len() {
                v[j] = mu * v[j] + g[j] + wd * p[j];
                p[j] -= lr * v[j];
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::Tensor;

    fn one(v: f64) -> ParamSet<f64> {
        ParamSet::new(vec![("w".into(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = one(1.5);
        Sgd::new(0.9, 0.1).step(&mut p, &one(3.0), 0.0).unwrap();
        assert_eq!(p, one(1.5));
    }

    #[test]
    fn plain_sgd() {
        let mut p = one(1.0);
        Sgd::new(0.0, 0.0).step(&mut p, &one(0.5), 0.1).unwrap();
        assert_eq!(p.at(0).data()[0], 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn momentum_unrolls() {
        let (lr, g) = (0.01, 2.0);
        let mut p = one(0.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut p, &one(g), lr).unwrap();
        opt.step(&mut p, &one(g), lr).unwrap();
        let moved = -p.at(0).data()[0];
        assert!((moved - lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = one(0.0);
        let bad = ParamSet::new(vec![("w".into(), Tensor::<f64>::zeros(&[2]))]);
        assert!(Sgd::new(0.9, 0.0).step(&mut p, &bad, 0.1).is_err());
    }
}
