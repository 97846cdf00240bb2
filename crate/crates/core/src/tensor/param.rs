use super::{Real, Tensor};

/// A trainable tensor with its gradient and RMSprop accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub rms: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let rms = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad: None,
            rms,
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        debug_assert_eq!(g.shape(), self.value.shape());
        match &mut self.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &v)| *a += v),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// RMSprop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            decay: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// `acc ← decay·acc + (1−decay)·g²; p ← p − lr·g/(√acc + ε)`, then clears
/// gradients. Parameters without a gradient are left untouched.
pub fn rmsprop_step<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, opt: RmsProp) {
    let lr = T::from_f64(opt.lr);
    let decay = T::from_f64(opt.decay);
    let keep = T::ONE - decay;
    let eps = T::from_f64(opt.epsilon);
    for p in params {
        let Some(g) = p.grad.take() else { continue };
        let values = p.value.data_mut().iter_mut();
        for ((v, acc), &gi) in values.zip(p.rms.data_mut()).zip(g.data()) {
            *acc = decay * *acc + keep * gi * gi;
            *v -= lr * gi / (acc.sqrt() + eps);
        }
    }
}

/// Clamps every parameter value to `[-bound, bound]`.
pub fn clamp_parameters<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, bound: T) {
    for p in params {
        for v in p.value.data_mut() {
            *v = v.max(-bound).min(bound);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Parameter<f64> {
        Parameter::new("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = param(&[0.3, -0.2]);
        p.grad = Some(Tensor::zeros(vec![2]));
        rmsprop_step([&mut p], RmsProp::new(0.1));
        assert_eq!(p.value.data(), &[0.3, -0.2]);
        assert!(p.grad.is_none());
    }

    #[test]
    fn first_step_is_ten_lr_times_sign() {
        let lr = 5e-4;
        let mut p = param(&[1.0, 1.0]);
        p.grad = Some(Tensor::new(vec![2], vec![0.37, -2.5]).unwrap());
        rmsprop_step([&mut p], RmsProp::new(lr));
        // acc = 0.01 g², update = lr·g / (0.1|g| + eps)
        for (v, g) in p.value.data().iter().zip([0.37f64, -2.5]) {
            let expected = 1.0 - lr * g / ((0.01 * g * g).sqrt() + 1e-8);
            assert!((v - expected).abs() < 1e-12);
            assert!(((1.0 - v) - 10.0 * lr * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_computation() {
        // f(p) = (p - 3)², g = 2(p - 3); p0 = 1, lr = 0.1, decay 0.99, eps 1e-8.
        let opt = RmsProp::new(0.1);
        let mut p = param(&[1.0]);
        for _ in 0..2 {
            let g = 2.0 * (p.value.data()[0] - 3.0);
            p.grad = Some(Tensor::scalar(g));
            rmsprop_step([&mut p], opt);
        }
        // Step 1: g = -4, acc = 0.16, p = 1 + 0.4/(0.4 + 1e-8) ≈ 2
        let acc1 = 0.01 * 16.0;
        let p1 = 1.0 - 0.1 * -4.0 / (f64::sqrt(acc1) + 1e-8);
        let g2 = 2.0 * (p1 - 3.0);
        let acc2 = 0.99 * acc1 + 0.01 * g2 * g2;
        let p2 = p1 - 0.1 * g2 / (acc2.sqrt() + 1e-8);
        assert!((p.value.data()[0] - p2).abs() < 1e-12);
        assert!((p.rms.data()[0] - acc2).abs() < 1e-12);
        assert!((p1 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn clamp_examples() {
        let mut p = param(&[0.02, -0.5, 0.005, -0.01]);
        clamp_parameters([&mut p], 0.01);
        assert_eq!(p.value.data(), &[0.01, -0.01, 0.005, -0.01]);

        let mut q = param(&[0.001, -0.002]);
        clamp_parameters([&mut q], 0.01);
        assert_eq!(q.value.data(), &[0.001, -0.002]);
    }
}
