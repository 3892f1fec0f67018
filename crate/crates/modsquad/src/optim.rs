//! AdamW with decoupled weight decay, linear warmup + cosine decay schedule,
//! and global-norm gradient clipping.

use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Step counter (bias correction uses t starting at 1).
    pub t: u64,
    state: BTreeMap<String, MomentPair>,
}

#[derive(Debug, Clone)]
struct MomentPair {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, state: BTreeMap::new() }
    }

    /// Apply one update to `param` in place. Decay is decoupled: it scales
    /// the parameter directly by lr * wd and never enters the moments.
    /// Biases, norms, and other parameters the caller exempts should be
    /// passed with `decay = false`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64, decay: bool) {
        assert_eq!(param.len(), grad.len(), "grad length mismatch for {name}");
        let slot = self.state.entry(name.to_string()).or_insert_with(|| MomentPair {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        assert_eq!(slot.m.len(), param.len(), "moment shape changed for {name}");
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            if decay {
                param[i] -= lr * self.weight_decay * param[i];
            }
            param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Drop optimizer state for parameters not in `keep` (used when the
    /// trainable set changes, e.g. router fine-tuning).
    pub fn retain(&mut self, keep: &dyn Fn(&str) -> bool) {
        self.state.retain(|k, _| keep(k));
    }
}

/// Weight decay applies to weight matrices only, not biases/gains, embeddings,
/// or the log-variance weights. Embeddings are exempt so that rows whose
/// gradient is exactly zero (e.g. untouched tasks during fine-tuning) are never
/// moved by the decoupled decay term.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name.ends_with(".g")
        || name == "log_var"
        || name == "task_embed"
        || name == "pos_embed")
}

/// Linear warmup 0 -> base_lr over `warmup_steps`, then cosine decay to zero
/// at `total_steps`. `step` counts optimizer steps.
pub fn lr_at(step: u64, warmup_steps: u64, total_steps: u64, base_lr: f64) -> f64 {
    assert!(total_steps > warmup_steps, "schedule needs steps after warmup");
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
