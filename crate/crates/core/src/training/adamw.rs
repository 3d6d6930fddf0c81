use crate::autodiff::ParamSet;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(ps: &ParamSet, lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || ps.iter().map(|n| if n.frozen { Vec::new() } else { vec![0.0; n.value.len()] }).collect();
        Self {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the accumulated gradients, which are reset to zero.
    /// Frozen parameters are left untouched.
    pub fn step(&mut self, ps: &mut ParamSet) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step = self.lr / bc1;
        let decay = 1.0 - self.lr * self.weight_decay;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((node, m), v) in ps.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if node.frozen {
                continue;
            }
            let g = node.grad.get_mut().data_mut();
            let theta = node.value.data_mut();
            for i in 0..theta.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                theta[i] = theta[i] * decay - step * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
                g[i] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, Tape, Tensor};

    fn one(v: Vec<f64>) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::vector(v).unwrap()).unwrap();
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut ps = one(vec![1.5, -2.0]);
        let mut opt = AdamW::new(&ps, 1e-3, 0.0, 0.9, 0.999, 1e-8);
        opt.step(&mut ps);
        assert_eq!(ps.iter().next().unwrap().value.data(), [1.5, -2.0]);
    }

    #[test]
    fn zero_grad_decay_scales_exactly() {
        let mut ps = one(vec![1.5, -2.0]);
        let mut opt = AdamW::new(&ps, 1e-3, 0.1, 0.9, 0.999, 1e-8);
        opt.step(&mut ps);
        let f = 1.0 - 1e-3 * 0.1;
        assert_eq!(ps.iter().next().unwrap().value.data(), [1.5 * f, -2.0 * f]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = one(vec![0.0]);
        ps.iter_mut().next().unwrap().grad.get_mut().data_mut()[0] = 1.0;
        let mut opt = AdamW::new(&ps, 1e-4, 1e-4, 0.9, 0.999, 1e-8);
        opt.step(&mut ps);
        let v = ps.iter().next().unwrap().value.data()[0];
        assert!((v + 1e-4).abs() < 1e-12, "{v}");
        assert_eq!(ps.iter().next().unwrap().grad.borrow().data()[0], 0.0);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut ps = one(vec![1.0]);
        let id = ps.ids().next().unwrap();
        ps.set_frozen(id, true);
        let mut opt = AdamW::new(&ps, 1e-1, 1e-1, 0.9, 0.999, 1e-8);
        opt.step(&mut ps);
        assert_eq!(ps.value(id).data(), [1.0]);
    }

    #[test]
    fn reduces_convex_quadratic() {
        let mut ps = one(vec![3.0, -1.0]);
        let id = ps.ids().next().unwrap();
        let target = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let loss = |ps: &ParamSet| {
            let mut t = Tape::new(ps, Mode::Eval);
            let p = t.param(id);
            let y = t.input(target.clone());
            let l = t.mse(p, y).unwrap();
            (t.value(l).item(), t.backward(l))
        };
        let mut opt = AdamW::new(&ps, 1e-2, 0.0, 0.9, 0.999, 1e-8);
        let (before, r) = loss(&ps);
        r.unwrap();
        opt.step(&mut ps);
        let (after, _) = loss(&ps);
        assert!(after < before);
    }
}
