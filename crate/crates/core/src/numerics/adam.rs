use crate::error::{check_dim, Result};

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradients", self.m.len(), grads.len())?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
        }
        if self.lr == 0.0 {
            return Ok(());
        }
        for i in 0..params.len() {
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut p = vec![1.0, -0.0, 3.5];
        let before = p.clone();
        let mut adam = Adam::new(3, 0.0);
        for _ in 0..5 {
            adam.step(&mut p, &[0.3, -1.0, 2.0]).unwrap();
        }
        assert_eq!(
            p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            adam.step(&mut p, &g).unwrap();
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }
}
