use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with classical momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Tensor<F>]) {
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        if self.velocity.is_empty() {
            self.velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        }
        let (lr, mom, wd) = (F::lit(self.lr), F::lit(self.momentum), F::lit(self.weight_decay));
        for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + wd * *pv;
                *vv = mom * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Adam (Kingma & Ba) with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Tensor<F>]) {
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let step = F::lit(self.lr * bc2.sqrt() / bc1);
        let eps = F::lit(self.eps * bc2.sqrt());
        let one = F::one();
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = F::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(ps: &ParamSet<f64>) -> Vec<Tensor<f64>> {
        // f(p) = 0.5 * ||p - 3||^2
        ps.tensors().iter().map(|t| t.map(|v| v - 3.0)).collect()
    }

    #[test]
    fn sgd_and_adam_minimise_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("p", Tensor::from_f64(&[3], &[0.0, 10.0, -4.0]));
        let mut ps2 = ps.clone();
        let mut sgd = Sgd::new(0.1, 0.9, 0.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = quadratic_grad(&ps);
            sgd.step(&mut ps, &g);
            let g2 = quadratic_grad(&ps2);
            adam.step(&mut ps2, &g2);
        }
        for v in ps.flatten().into_iter().chain(ps2.flatten()) {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
