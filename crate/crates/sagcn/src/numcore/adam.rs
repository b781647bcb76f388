//! Adam with bias correction. Defaults are lr 2e-4, beta1 0.5 (the usual
//! adversarial-training choice), beta2 0.999, eps 1e-8.

use crate::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        AdamState {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[(&str, &Tensor)]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|(_, t)| t.shape()).collect();
        AdamState::new(lr, &shapes)
    }

    /// One bias-corrected update applied in place. `params` and `grads`
    /// must be aligned with the state's parameter order.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params / {} grads vs {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, _), g) in params.iter().zip(grads) {
            if !g.all_finite() {
                return Err(Error::Divergence {
                    param: name.to_string(),
                    step: self.step + 1,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "adam: parameter `{name}` shape {:?} vs state {:?} / grad {:?}",
                    p.shape(),
                    self.m[i].shape(),
                    g.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0], &[2]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut adam = AdamState::new(0.01, &[&[2]]);
        adam.step(&mut [("w", &mut p)], &[g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_sign() {
        let lr = 0.003;
        for &g0 in &[2.5, -0.7, 1e-3] {
            let mut p = Tensor::from_vec(vec![1.0], &[1]).unwrap();
            let g = Tensor::from_vec(vec![g0], &[1]).unwrap();
            let mut adam = AdamState::new(lr, &[&[1]]);
            adam.step(&mut [("w", &mut p)], &[g]).unwrap();
            let delta = 1.0 - p.data()[0];
            assert!(delta.abs() >= 0.9 * lr && delta.abs() <= lr, "delta {delta}");
            assert_eq!(delta.signum(), g0.signum());
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3)
        let mut p = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        let mut adam = AdamState::new(0.05, &[&[1]]);
        for _ in 0..500 {
            let g = Tensor::from_vec(vec![2.0 * (p.data()[0] - 3.0)], &[1]).unwrap();
            adam.step(&mut [("w", &mut p)], &[g]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.01, "w = {}", p.data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::from_vec(vec![f64::NAN], &[1]).unwrap();
        let mut adam = AdamState::new(0.01, &[&[1]]);
        let err = adam.step(&mut [("gen.w_q", &mut p)], &[g]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gen.w_q"), "message was: {msg}");
    }
}
