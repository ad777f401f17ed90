use super::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, cfg: &AdamConfig, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<(), TensorError> {
        if param.shape() != grad.shape() {
            return Err(TensorError::mismatch("adam_step", "numel", param.numel(), grad.numel()));
        }
        if self.m.len() != param.numel() {
            return Err(TensorError::mismatch("adam_step", "state length", param.numel(), self.m.len()));
        }
        self.t += 1;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let c1 = T::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let one = T::one();
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Adam {
            config,
            states: params.iter().map(|p| AdamState::new(p.numel())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(TensorError::mismatch("adam_step", "parameter count", self.states.len(), params.len()));
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(self.states.iter_mut()) {
            s.step(&self.config, p, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_the_gradient() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -2.0, 1e-3]).unwrap();
        let mut st = AdamState::new(3);
        st.step(&cfg, &mut p, &g).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expected = 1.0 - cfg.lr * gv / (gv.abs() + cfg.eps);
            assert!((pv - expected).abs() < 1e-12, "{pv} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let g = Tensor::scalar(3.0);
        let mut st = AdamState::new(1);
        for _ in 0..50 {
            st.step(&cfg, &mut p, &g).unwrap();
        }
        // every bias-corrected step is lr * g / |g|
        assert!((p.data()[0] + 50.0 * cfg.lr).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut st = AdamState::<f32>::new(2);
        let mut p = Tensor::zeros([1, 1, 1, 2]);
        let g = Tensor::zeros([1, 1, 2, 1]);
        assert!(st.step(&AdamConfig::default(), &mut p, &g).is_err());
    }
}
