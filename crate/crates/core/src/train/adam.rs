use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient for parameter {0}")]
pub struct NonFiniteGradient(pub String);

/// Adam with bias correction. Moment buffers are indexed by [`ParamId`] and
/// created on first use, so one optimizer serves one parameter store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub settings: AdamSettings,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(settings: AdamSettings) -> Self {
        Self {
            settings,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &[T])]) -> Result<(), NonFiniteGradient> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(NonFiniteGradient(store.name(*id).to_string()));
        }
        self.step += 1;
        let s = self.settings;
        let t = self.step as i32;
        let (b1, b2) = (T::of(s.beta1), T::of(s.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(s.learning_rate), T::of(s.eps));
        for &(id, grad) in grads {
            let i = id.index();
            if i >= self.m.len() {
                self.m.resize(i + 1, Vec::new());
                self.v.resize(i + 1, Vec::new());
            }
            if self.m[i].is_empty() {
                self.m[i] = vec![T::zero(); grad.len()];
                self.v[i] = vec![T::zero(); grad.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for k in 0..grad.len() {
                let gk = grad[k];
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
