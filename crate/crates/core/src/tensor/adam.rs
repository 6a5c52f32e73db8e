use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
///
/// Moment buffers are created on the first step from the parameter shapes and
/// must keep matching them afterwards.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub epsilon: Float,
    step_count: u64,
    first_moment: Vec<Vec<Float>>,
    second_moment: Vec<Vec<Float>>,
}

impl AdamState {
    pub fn new(learning_rate: Float) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update using each parameter's stored gradient. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.step_count == 0 {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::shape(
                "adam_step",
                "parameter list no longer matches the optimizer's moment buffers",
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let Some(g) = p.grad.take() else { continue };
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}
