use std::collections::BTreeMap;

use crate::tensor::Tensor;

const EPS: f64 = 1e-8;

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Starts a new step; call once before the `update`s that belong to it.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert!(self.t > 0, "begin_step must precede update");
        assert_eq!(param.shape(), grad.shape(), "gradient shape for `{name}`");
        let n = param.numel();
        let m = self.m.entry(name.to_owned()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_owned()).or_insert_with(|| vec![0.0; n]);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_closed_form_on_quadratic() {
        // f(x) = ½·Σ a_i x_i², gradient a_i x_i.
        let a = [0.5, 2.0, -1.0, 3.0];
        let mut x = Tensor::new(vec![4], vec![1.0, -2.0, 0.25, 4.0]).unwrap();
        let (lr, b1, b2) = (0.1, 0.9, 0.999);
        let mut opt = Adam::new(lr, b1, b2);
        let (mut m, mut v) = ([0.0f64; 4], [0.0f64; 4]);
        let mut expect = x.data().to_vec();
        for t in 1..=3 {
            let g = Tensor::from_fn(&[4], |i| a[i] * x.data()[i]);
            opt.begin_step();
            opt.update("x", &mut x, &g);
            for i in 0..4 {
                let gi = a[i] * expect[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                expect[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            for i in 0..4 {
                assert!((x.data()[i] - expect[i]).abs() < 1e-12);
            }
        }
        // First step moves every coordinate by ~lr against its gradient sign.
        let mut y = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut o = Adam::new(0.01, 0.0, 0.99);
        o.begin_step();
        o.update("y", &mut y, &Tensor::new(vec![1], vec![7.0]).unwrap());
        assert!((y.data()[0] - (2.0 - 0.01 * 7.0 / (7.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameter_bit_identical() {
        let mut x = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let before = x.clone();
        let mut o = Adam::new(2e-3, 0.0, 0.99);
        for _ in 0..5 {
            o.begin_step();
            o.update("x", &mut x, &Tensor::zeros(&[2]));
        }
        assert!(x.bit_eq(&before));
    }
}
