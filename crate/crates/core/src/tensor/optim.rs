//! SGD with classical momentum: `v <- mu*v - lr*g; w <- w + v`.

/// One parameter update; the velocity buffer persists across steps.
pub fn sgd_momentum_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, mu: f32) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    for i in 0..param.len() {
        velocity[i] = mu * velocity[i] - lr * grad[i];
        param[i] += velocity[i];
    }
}

/// Momentum state for a set of parameters, addressed by index.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    velocities: Vec<Vec<f32>>,
    pub momentum: f32,
}

impl SgdMomentum {
    pub fn new(param_lens: &[usize], momentum: f32) -> Self {
        SgdMomentum {
            velocities: param_lens.iter().map(|&n| vec![0f32; n]).collect(),
            momentum,
        }
    }

    pub fn step(&mut self, index: usize, param: &mut [f32], grad: &[f32], lr: f32) {
        sgd_momentum_step(param, grad, &mut self.velocities[index], lr, self.momentum);
    }

    pub fn velocity(&self, index: usize) -> &[f32] {
        &self.velocities[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut w = vec![1.0, 2.0];
        let g = vec![0.5, -1.0];
        let mut v = vec![0.0, 0.0];
        sgd_momentum_step(&mut w, &g, &mut v, 1.0, 0.0);
        assert_eq!(w, vec![0.5, 3.0]);
    }

    #[test]
    fn momentum_accumulates_velocity_over_steps() {
        // constant gradient, mu=0.99, lr=0.1:
        // step 1: v = -0.1g,             w = w0 - 0.1g
        // step 2: v = -0.099g - 0.1g,    w = w0 - 0.1g - 0.199g
        let g = vec![1.0f32];
        let mut w = vec![0.0f32];
        let mut v = vec![0.0f32];
        sgd_momentum_step(&mut w, &g, &mut v, 0.1, 0.99);
        assert!((w[0] + 0.1).abs() < 1e-7);
        sgd_momentum_step(&mut w, &g, &mut v, 0.1, 0.99);
        let expect = -0.1 - (0.099 + 0.1);
        assert!((w[0] - expect).abs() < 1e-6, "w = {}, expect {}", w[0], expect);
    }

    #[test]
    fn zero_grad_decays_velocity_by_mu() {
        let mut w = vec![0.0f32];
        let mut v = vec![1.0f32];
        sgd_momentum_step(&mut w, &[0.0], &mut v, 0.1, 0.9);
        assert!((v[0] - 0.9).abs() < 1e-7);
        assert!((w[0] - 0.9).abs() < 1e-7);
    }
}
