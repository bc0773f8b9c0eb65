//! First-order optimizers over a model's ordered parameter list.

use super::{Param, Scalar};

pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: Vec<&mut Param<T>>);
    fn set_lr(&mut self, lr: f64);
    fn lr(&self) -> f64;
}

/// SGD with classical momentum and optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            velocity: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let (lr, mu, wd) = (
            T::lit(self.lr),
            T::lit(self.momentum),
            T::lit(self.weight_decay),
        );
        for (p, vel) in params.into_iter().zip(&mut self.velocity) {
            for ((w, &g), v) in p.value.iter_mut().zip(p.grad.iter()).zip(vel.iter_mut()) {
                let g = g + wd * *w;
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
                .collect();
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (p, (m, v)) in params.into_iter().zip(&mut self.moments) {
            for (((w, &g), m), v) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: Vec<&mut Param<T>>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::lit(max_norm / norm);
        for p in params {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn quadratic_param() -> Param<f64> {
        Param::new(ArrayD::from_elem(ndarray::IxDyn(&[2]), 5.0))
    }

    fn minimize(opt: &mut dyn Optimizer<f64>, steps: usize) -> f64 {
        let mut p = quadratic_param();
        for _ in 0..steps {
            p.grad = p.value.mapv(|w| 2.0 * w);
            opt.step(vec![&mut p]);
        }
        p.value[[0]]
    }

    #[test]
    fn sgd_and_adam_descend_a_quadratic() {
        assert!(minimize(&mut Sgd::new(0.1, 0.9), 200).abs() < 1e-3);
        assert!(minimize(&mut Adam::new(0.1), 500).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = quadratic_param();
        a.grad.fill(30.0);
        let before = clip_grad_norm(vec![&mut a], 10.0);
        assert!((before - 30.0 * 2f64.sqrt()).abs() < 1e-9);
        let after: f64 = a.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 10.0).abs() < 1e-9);
    }
}
