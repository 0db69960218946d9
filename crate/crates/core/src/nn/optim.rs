use ndarray::Array2;

use super::Module;

/// `value -= lr * grad` for every parameter.
pub fn sgd_step<M: Module + ?Sized>(module: &mut M, lr: f64) {
    for p in module.params_mut() {
        p.value.scaled_add(-lr, &p.grad);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new<M: Module + ?Sized>(module: &M) -> Self {
        let zeros: Vec<Array2<f64>> = module
            .params()
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in module
            .params_mut()
            .into_iter()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|x, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
