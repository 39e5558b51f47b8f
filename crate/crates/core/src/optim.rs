//! ADAM with coupled L2 weight decay.

use crate::autograd::Param;
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of completed steps.
    pub t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            t: 0,
        }
    }
}

impl Adam {
    /// One update over every parameter. If any gradient is non-finite nothing
    /// is modified, including the step counter.
    pub fn step<'a, T: Element>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>) -> Result<()> {
        let mut params: Vec<&mut Param<T>> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        let t = self.t + 1;
        let bc1 = 1.0 - self.beta1.powf(t as f64);
        let bc2 = 1.0 - self.beta2.powf(t as f64);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let (ibc1, ibc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps, wd) = (T::from_f64(self.lr), T::from_f64(self.eps), T::from_f64(self.weight_decay));

        for p in params.iter_mut() {
            let Param { value, grad, m, v, .. } = &mut **p;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &g), (m, v)) in it {
                let g = g + wd * *w;
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mh = *m * ibc1;
                let vh = *v * ibc2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    fn scalar(name: &str, w: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(name, Tensor4::scalar(w));
        p.grad = Tensor4::scalar(g);
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar("w", 0.0, 1.0);
        let mut opt = Adam {
            weight_decay: 0.0,
            ..Adam::default()
        };
        opt.step([&mut p]).unwrap();
        // m̂ = v̂ = 1 up to rounding in the bias correction
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut p = scalar("w", 0.7, 0.0);
        let mut opt = Adam {
            weight_decay: 0.0,
            ..Adam::default()
        };
        for _ in 0..10 {
            opt.step([&mut p]).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.7);
    }

    #[test]
    fn decay_alone_shrinks_weight() {
        let mut p = scalar("w", 0.5, 0.0);
        let mut opt = Adam::default();
        let mut prev = 0.5;
        for _ in 0..50 {
            opt.step([&mut p]).unwrap();
            let w = p.value.data()[0];
            assert!(w < prev && w > 0.0);
            prev = w;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut a = scalar("a", 1.0, 0.5);
        let mut b = scalar("b", 2.0, f64::NAN);
        let mut opt = Adam::default();
        let err = opt.step([&mut a, &mut b]).unwrap_err();
        assert!(err.to_string().contains("gradient of b"));
        assert_eq!(a.value.data()[0], 1.0);
        assert_eq!(a.m.data()[0], 0.0);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Param::new("w", Tensor4::from_fn([2, 3, 3, 3], |[a, b, c, d]| (a + 2 * b + 3 * c + d) as f32 * 0.01));
            let mut opt = Adam::default();
            for s in 0..5 {
                p.grad = p.value.map(|v| (v * 7.0 + s as f32).sin());
                opt.step([&mut p]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
