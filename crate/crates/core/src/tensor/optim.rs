use super::{Scalar, Tensor};
use crate::error::{Error, Result};

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that carries a gradient.
    /// Parameters are matched to moment buffers by position, so callers must
    /// pass them in the same order on every step.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        self.config.validate()?;
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters, state has {}", params.len(), self.m.len()),
            ));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.numel() != m.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter of {} elements, moment has {}",
                        p.numel(),
                        m.len()
                    ),
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (((w, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g)
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
