use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::config::AdamConfig;

/// Adam with bias-corrected moments, one slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f64> {
    config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = |p: &&Tensor<T>| Tensor::zeros(p.shape());
        Adam {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Fails without touching anything when
    /// a gradient is not finite.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((x, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent `x ← x − lr·g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "sgd",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("sgd gradient {g}")));
        }
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        opt.step(vec![&mut p], &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let g = [0.5, -3.0, 1e-3];
        let mut p = Tensor::row(vec![0.0; 3]);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &[&p]);
        opt.step(vec![&mut p], &[Tensor::row(g.to_vec())]).unwrap();
        for (x, gi) in p.data().iter().zip(g) {
            let want = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = Tensor::row(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        assert!(opt.step(vec![&mut p], &[Tensor::row(vec![f64::NAN])]).is_err());
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(opt.step_count(), 0);
    }

    /// Scalar Adam written out independently, following the textbook form
    /// with explicit powers.
    fn reference_trace(a: &[f64], x0: &[f64], steps: usize, cfg: AdamConfig) -> Vec<f64> {
        let mut x = x0.to_vec();
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        for t in 1..=steps {
            for i in 0..x.len() {
                let g = 2.0 * a[i] * x[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / (1.0 - cfg.beta1.powi(t as i32));
                let vh = v[i] / (1.0 - cfg.beta2.powi(t as i32));
                x[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        x
    }

    #[test]
    fn matches_reference_on_quadratic() {
        let a = [1.0, 3.0, 0.2];
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut p = Tensor::row(vec![1.0, -1.0, 2.0]);
        let mut opt = Adam::new(cfg, &[&p]);
        for _ in 0..100 {
            let g = Tensor::row(p.data().iter().zip(&a).map(|(x, ai)| 2.0 * ai * x).collect());
            opt.step(vec![&mut p], &[g]).unwrap();
        }
        let want = reference_trace(&a, &[1.0, -1.0, 2.0], 100, cfg);
        for (x, w) in p.data().iter().zip(&want) {
            assert!((x - w).abs() < 1e-10);
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = [1.0, 2.0];
        Sgd { lr: 0.5 }.step(&mut p, &[2.0, -2.0]).unwrap();
        assert_eq!(p, [0.0, 3.0]);
        assert!(Sgd { lr: 0.5 }.step(&mut p, &[1.0]).is_err());
    }
}
