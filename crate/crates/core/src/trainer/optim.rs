/// First-order optimizer contract: one call per parameter update.
pub trait Optimizer: Send {
    fn step(&mut self, params: &mut [f64], grad: &[f64]);

    /// Learning rate the next call to `step` will use.
    fn current_lr(&self) -> f64;
}

/// Adam with a learning rate decaying linearly to zero over
/// `total_steps` updates.
#[derive(Debug, Clone)]
pub struct Adam {
    base_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    total_steps: usize,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: total_steps.max(1),
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    fn current_lr(&self) -> f64 {
        let remaining = 1.0 - self.t as f64 / self.total_steps as f64;
        self.base_lr * remaining.max(0.0)
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
/// Non-positive `max_norm` disables clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay() {
        let mut a = Adam::new(1, 0.1, 4);
        let mut p = [0.0];
        assert_eq!(a.current_lr(), 0.1);
        a.step(&mut p, &[1.0]);
        assert!((a.current_lr() - 0.075).abs() < 1e-15);
        for _ in 0..5 {
            a.step(&mut p, &[1.0]);
        }
        assert_eq!(a.current_lr(), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut a = Adam::new(2, 0.01, 100);
        let mut p = [1.0, 1.0];
        a.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(1, 0.1, 10_000);
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            a.step(&mut p, &g);
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = [3.0, 4.0];
        clip_grad_norm(&mut g, 0.0);
        assert_eq!(g, [3.0, 4.0]);
    }
}
