//! Learnable parameters and SGD with momentum and weight decay.

use rand::Rng;

use super::{Element, Tensor};

/// A named leaf tensor with its optimizer state.
///
/// `learnable = false` freezes the values for the lifetime of the
/// parameter; `sgd_step` never touches frozen parameters and the graph
/// never propagates gradients into them.
pub struct Parameter<T: Element> {
    pub name: String,
    tensor: Tensor<T>,
    momentum_buffer: Vec<T>,
    pub weight_decay: T,
    pub learnable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(
        name: impl Into<String>,
        values: Vec<T>,
        shape: Vec<usize>,
        weight_decay: T,
        learnable: bool,
    ) -> Self {
        let n = values.len();
        let tensor = Tensor::leaf(values, shape, learnable).expect("parameter shape");
        Parameter {
            name: name.into(),
            tensor,
            momentum_buffer: vec![T::zero(); n],
            weight_decay,
            learnable,
        }
    }

    /// Scaled-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn uniform_fan_in(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        weight_decay: T,
        learnable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = super::lit::<T>((6.0 / fan_in as f64).sqrt());
        let n = shape.iter().product();
        let values: Vec<T> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Parameter::new(name, values, shape, weight_decay, learnable)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn values(&self) -> Vec<T> {
        self.tensor.values()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor.shape()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    /// Overwrite values (checkpoint restore). Resets momentum.
    pub fn load_values(&mut self, values: &[T]) {
        self.tensor.set_values(values);
        self.momentum_buffer.iter_mut().for_each(|m| *m = T::zero());
    }
}

/// One SGD update: `v <- momentum*v + grad + weight_decay*w; w <- w - lr*v`.
///
/// Parameters that are frozen or received no gradient this step are left
/// bit-for-bit unchanged.
pub fn sgd_step<T: Element>(params: &mut [&mut Parameter<T>], lr: T, momentum: T) {
    for p in params.iter_mut() {
        if !p.learnable {
            continue;
        }
        let Some(grad) = p.tensor.grad() else {
            continue;
        };
        let wd = p.weight_decay;
        let mut values = p.tensor.values();
        for ((v, g), w) in p.momentum_buffer.iter_mut().zip(&grad).zip(values.iter()) {
            *v = momentum * *v + *g + wd * *w;
        }
        for (w, v) in values.iter_mut().zip(&p.momentum_buffer) {
            *w = *w - lr * *v;
        }
        p.tensor.set_values(&values);
    }
}

pub fn zero_grads<T: Element>(params: &mut [&mut Parameter<T>]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{scale, sum};

    fn param_with_grad(values: Vec<f32>, grad_seed: &[f32], wd: f32, learnable: bool) -> Parameter<f32> {
        let n = values.len();
        let p = Parameter::new("w", values, vec![n], wd, learnable);
        // Loss = sum(g .* w) gives dL/dw = g.
        let gt = Tensor::leaf(grad_seed.to_vec(), vec![n], false).unwrap();
        let loss = sum(&crate::tensor::mul(p.tensor(), &gt).unwrap());
        loss.backward().unwrap();
        p
    }

    #[test]
    fn vanilla_step_is_w_minus_lr_g() {
        let mut p = param_with_grad(vec![1.0, -2.0], &[0.5, 0.25], 0.0, true);
        sgd_step(&mut [&mut p], 0.1, 0.0);
        let v = p.values();
        assert!((v[0] - (1.0 - 0.05)).abs() < 1e-7);
        assert!((v[1] - (-2.0 - 0.025)).abs() < 1e-7);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut p = param_with_grad(vec![1.5, 2.5], &[1.0, 1.0], 0.1, false);
        let before = p.values();
        sgd_step(&mut [&mut p], 0.5, 0.9);
        assert_eq!(
            p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        let (w0, g1, g2, lr, mom, wd) = (0.8f32, 0.3f32, -0.2f32, 0.05f32, 0.9f32, 0.01f32);
        // Hand evaluation of the recurrence.
        let v1 = g1 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mom * v1 + g2 + wd * w1;
        let w2 = w1 - lr * v2;

        let mut p = Parameter::new("w", vec![w0], vec![1], wd, true);
        for g in [g1, g2] {
            p.zero_grad();
            let gt = Tensor::leaf(vec![g], vec![1], false).unwrap();
            let loss = sum(&crate::tensor::mul(p.tensor(), &gt).unwrap());
            loss.backward().unwrap();
            sgd_step(&mut [&mut p], lr, mom);
        }
        assert!((p.values()[0] - w2).abs() < 1e-7, "{} vs {}", p.values()[0], w2);
    }

    #[test]
    fn weight_decay_equals_explicit_l2_loss() {
        // decay wd on the gradient == adding 0.5*wd*||w||^2 to the loss.
        let w0 = vec![0.4f32, -1.2, 2.0];
        let wd = 0.05f32;

        let mut a = Parameter::new("a", w0.clone(), vec![3], wd, true);
        {
            let loss = scale(&sum(a.tensor()), 1.0); // dL/dw = 1
            loss.backward().unwrap();
            sgd_step(&mut [&mut a], 0.1, 0.0);
        }

        let mut b = Parameter::new("b", w0, vec![3], 0.0, true);
        {
            let l2 = scale(&sum(&crate::tensor::mul(b.tensor(), b.tensor()).unwrap()), 0.5 * wd);
            let loss = crate::tensor::add(&scale(&sum(b.tensor()), 1.0), &l2).unwrap();
            loss.backward().unwrap();
            sgd_step(&mut [&mut b], 0.1, 0.0);
        }

        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-7);
        }
    }
}
