//! Parameter update rules.

use crate::autodiff::Array;
use crate::nets::Params;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &[Array<T>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.values().iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, g), vel) in params.values_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &dw), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *v = mu * *v + dw + wd * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, first: Vec::new(), second: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Array<T>], lr: f64) {
        if self.first.is_empty() {
            self.first = params.values().iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &dw), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * dw;
                *vi = b2 * *vi + (T::one() - b2) * dw * dw;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Piecewise-constant learning rate divided by `gamma` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StepDecay {
    /// Milestones placed at fractions of the total epoch count.
    pub fn from_fractions(base_lr: f64, epochs: usize, fractions: &[f64], gamma: f64) -> Self {
        let milestones = fractions.iter().map(|f| (f * epochs as f64).round() as usize).collect();
        StepDecay { base_lr, milestones, gamma }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_mirrors_thirty_sixty_ninety() {
        let s = StepDecay::from_fractions(0.1, 8, &[0.625, 0.75, 0.875], 0.1);
        assert_eq!(s.milestones, vec![5, 6, 7]);
        assert_eq!(s.lr_at(4), 0.1);
        assert!((s.lr_at(5) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(7) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = Params::<f64>::default();
        p.push("w", Array::scalar(1.0));
        let mut opt = Sgd::new(0.9, 0.0);
        let g = [Array::scalar(1.0)];
        opt.step(&mut p, &g, 0.1);
        assert!((p.values()[0].item() - 0.9).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1);
        // v = 0.9 + 1 = 1.9
        assert!((p.values()[0].item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Params::<f64>::default();
        p.push("w", Array::scalar(0.0));
        let mut opt = Adam::default();
        opt.step(&mut p, &[Array::scalar(3.0)], 0.01);
        assert!((p.values()[0].item() + 0.01).abs() < 1e-9);
    }
}
