//! Adaptive moment estimation with per-group learning rates.

use std::collections::HashMap;

use crate::numerics::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters whose names start with `prefix` train at `lr` instead of the
/// base rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub prefix: String,
    pub lr: f64,
}

pub struct Adam<T> {
    config: AdamConfig,
    base_lr: f64,
    groups: Vec<ParamGroup>,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
    steps: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, base_lr: f64, groups: Vec<ParamGroup>) -> Self {
        Self {
            config,
            base_lr,
            groups,
            moments: HashMap::new(),
            steps: 0,
        }
    }

    /// Peak rate of the group `name` belongs to.
    pub fn peak_rate(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|g| name.starts_with(&g.prefix))
            .map_or(self.base_lr, |g| g.lr)
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    /// Applies one update. `rate_of(peak)` maps a group's peak rate to the
    /// scheduled rate for this step.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: impl IntoIterator<Item = (&'a str, &'a [T])>,
        rate_of: impl Fn(f64) -> f64,
    ) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps);
        let bc2 = 1.0 - c.beta2.powi(self.steps);
        for (name, g) in grads {
            let lr = rate_of(self.peak_rate(name));
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
            let step = T::of(lr / bc1);
            let sq = T::of(bc2).sqrt();
            let eps = T::of(c.eps);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() / sq + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig::default(), 0.0, vec![]);
        let g = [0.5, 0.5];
        opt.step(&mut store, [("w", &g[..])], |lr| lr);
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.insert("enc.w", Tensor::from_f64(&[1], &[1.0]).unwrap());
        store.insert("w", Tensor::from_f64(&[1], &[1.0]).unwrap());
        let groups = vec![ParamGroup {
            prefix: "enc.".into(),
            lr: 0.01,
        }];
        let mut opt = Adam::new(AdamConfig::default(), 0.1, groups);
        let g = [2.0];
        opt.step(&mut store, [("enc.w", &g[..]), ("w", &g[..])], |lr| lr);
        assert!((store.get("enc.w").unwrap().data()[0] - 0.99).abs() < 1e-6);
        assert!((store.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }
}
