use std::collections::HashMap;
use std::f64::consts::PI;

use crate::model::{Model, ParamKind};
use crate::numerics::Tensor;

/// Adam with decoupled weight decay. Decay applies to weight matrices and adapters only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter listed in `grads`.
    pub fn step(&mut self, model: &mut Model, grads: &[(String, Tensor)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = model.params.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let decay = matches!(p.kind, ParamKind::Weight | ParamKind::LoraA | ParamKind::LoraB);
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                if decay {
                    *w -= lr * self.weight_decay * *w;
                }
                *w -= lr * update;
            }
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at step `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step.min(total) as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut m = Model::new(EncoderConfig::tiny(), 0).unwrap();
        m.set_trainable(|n, _| n.starts_with("head."));
        let before = m.params.tensor("patch.proj.weight").unwrap().clone();
        let grads = vec![
            ("patch.proj.weight".to_string(), Tensor::full(before.shape(), 1.0)),
            ("head.classifier.bias".to_string(), Tensor::full(&[5], 1.0)),
        ];
        let mut opt = AdamW::new(0.01);
        opt.step(&mut m, &grads, 0.1);
        assert_eq!(m.params.tensor("patch.proj.weight").unwrap(), &before);
        // first Adam step moves each coordinate by lr·sign(g)
        for v in m.params.tensor("head.classifier.bias").unwrap().data() {
            assert!((v + 0.1).abs() < 1e-6);
        }
    }
}
