use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be checkpointed alongside named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for `{name}`");
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Flattens the optimizer state into named tensors (`m/<name>`, `v/<name>`,
    /// plus a `step` scalar).
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("step".to_string(), Tensor::scalar(self.step as f64));
        for (k, t) in &self.first {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    pub fn load_state_tensors(&mut self, state: &BTreeMap<String, Tensor>) {
        self.step = state.get("step").map_or(0, |t| t.item() as u64);
        self.first.clear();
        self.second.clear();
        for (k, t) in state {
            if let Some(name) = k.strip_prefix("m/") {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                self.second.insert(name.to_string(), t.clone());
            }
        }
    }
}
