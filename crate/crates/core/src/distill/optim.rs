use std::f64::consts::PI;

use crate::encoder::Params;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params,
    v: Params,
    t: i32,
}

impl AdamW {
    pub fn new(like: &Params, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let it = params
            .scalars_mut()
            .zip(grads.scalars())
            .zip(self.m.scalars_mut().zip(self.v.scalars_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            *p -= lr * (update + wd * *p);
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Rescales all gradients jointly so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Params], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Tensor;

    fn p(v: &[f64]) -> Params {
        Params {
            tensors: vec![Tensor {
                name: "x".into(),
                shape: vec![v.len()],
                data: v.to_vec(),
            }],
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut x = p(&[1.0, -2.0]);
        let mut opt = AdamW::new(&x, 0.9, 0.999, 0.0);
        opt.step(&mut x, &p(&[0.3, -5.0]), 0.01);
        assert!((x.tensors[0].data[0] - 0.99).abs() < 1e-6);
        assert!((x.tensors[0].data[1] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut x = p(&[2.0]);
        let mut opt = AdamW::new(&x, 0.9, 0.999, 0.01);
        opt.step(&mut x, &p(&[0.0]), 0.1);
        assert!((x.tensors[0].data[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = p(&[3.0, -4.0]);
        let mut opt = AdamW::new(&x, 0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let g = p(&x.tensors[0].data.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
            opt.step(&mut x, &g, 0.01);
        }
        assert!(x.sq_norm() < 1e-4);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut a = p(&[3.0]);
        let mut b = p(&[4.0]);
        let n = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a.tensors[0].data[0] - 0.6).abs() < 1e-15);
        assert!((b.tensors[0].data[0] - 0.8).abs() < 1e-15);
        let mut c = p(&[0.1]);
        clip_grad_norm(&mut [&mut c], 3.0);
        assert_eq!(c.tensors[0].data[0], 0.1);
    }
}
