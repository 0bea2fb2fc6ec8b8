use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed, ordered group of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[[usize; 2]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuilds a saved state. Both moment lists must have matching shapes.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Shape { context: "adam moments", expected: [m.len(), 1], found: [v.len(), 1] });
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(Error::Shape { context: "adam moments", expected: a.shape(), found: b.shape() });
            }
        }
        Ok(Self { config, step, m, v })
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update. `params` and `grads` must line up with the shapes
    /// the state was created for.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "adam_step group size",
                expected: [self.m.len(), 1],
                found: [params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Shape {
                    context: "adam_step parameter",
                    expected: m.shape(),
                    found: if p.shape() != m.shape() { p.shape() } else { g.shape() },
                });
            }
        }

        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_with_unit_gradient() {
        let cfg = AdamConfig { learning_rate: 1e-4, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &[[1, 1]]);
        let mut p = Tensor::scalar(0.5);
        st.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m_hat = v_hat = 1, so the move is lr / (1 + eps).
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut st = AdamState::new(AdamConfig::default(), &[[2, 2]]);
        let mut p = Tensor::from_vec(2, 2, alloc::vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        let before = p.clone();
        for _ in 0..10 {
            st.step(&mut [&mut p], &[Tensor::zeros(2, 2)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn defaults_match_the_usual_gan_constants() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.learning_rate), (0.5, 0.999, 1e-4));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut st = AdamState::new(AdamConfig::default(), &[[1, 2]]);
        let mut p = Tensor::zeros(1, 2);
        assert!(st.step(&mut [&mut p], &[Tensor::zeros(2, 1)]).is_err());
        assert_eq!(st.step, 0);
    }
}
