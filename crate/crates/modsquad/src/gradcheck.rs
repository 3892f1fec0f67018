//! Finite-difference gradient verification for the full model.

use crate::config::RunConfig;
use crate::data::SyntheticBenchmark;
use crate::model::ModSquadModel;
use crate::train::{step_loss, MixedBatch};

/// Central finite differences of a scalar function at `point`.
pub fn finite_diff_grad<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + eps;
        let fp = f(&p);
        p[i] = point[i] - eps;
        let fm = f(&p);
        p[i] = point[i];
        grads.push((fp - fm) / (2.0 * eps));
    }
    grads
}

/// Worst relative error per parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
    pub worst: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst < tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Coarse parameter grouping for reporting: routers, experts, embeddings,
/// heads, log-variance weights, norms, frontend.
pub fn param_group(name: &str) -> &'static str {
    if name.contains("router") {
        "routers"
    } else if name.contains("expert") {
        "experts"
    } else if name.contains("task_embed") {
        "task_embeddings"
    } else if name.contains("head") {
        "heads"
    } else if name == "log_var" {
        "log_var"
    } else if name.contains("ln") {
        "layer_norms"
    } else {
        "frontend"
    }
}

/// Check the whole-step loss gradient of every parameter against central
/// finite differences (step 1e-5). Train-mode routing noise is frozen to a
/// fixed draw so the loss is a deterministic function of the parameters.
///
/// `inject_fault`, when set, perturbs the analytic gradient of the named
/// parameter before comparison (test hook for fault injection).
pub fn grad_check(config: &RunConfig, inject_fault: Option<&str>) -> GradCheckReport {
    let bench = SyntheticBenchmark::new(&config.data);
    let mut model = ModSquadModel::new(&config.model_config(&bench));
    model.init(config.seed);

    let batch = MixedBatch::sample(&bench, &config.train, config.seed, 0);
    let noise_seed = Some(config.seed ^ 0x9e3779b97f4a7c15);

    // Analytic gradients from one full-loss backward.
    let (_, grads) = step_loss(&model, &batch, &config.loss, noise_seed, true)
        .expect("grad-check forward failed");

    let names: Vec<String> = model.param_names();
    let mut groups: std::collections::BTreeMap<&'static str, f64> = Default::default();
    let mut worst = 0.0;
    let mut worst_param = String::new();

    for name in &names {
        let base = model.param(name).data.clone();
        let mut analytic = grads.get(name).cloned().unwrap_or_else(|| vec![0.0; base.len()]);
        if inject_fault == Some(name.as_str()) {
            for v in &mut analytic {
                *v += 1.0;
            }
        }
        // Probe a bounded number of coordinates per parameter to keep the
        // check under the runtime budget; coordinates are deterministic.
        let stride = (base.len() / 16).max(1);
        for i in (0..base.len()).step_by(stride) {
            let fd = {
                let eps = 1e-5;
                let mut m = model.clone();
                m.param_mut(name).data[i] = base[i] + eps;
                let (lp, _) = step_loss(&m, &batch, &config.loss, noise_seed, false).unwrap();
                m.param_mut(name).data[i] = base[i] - eps;
                let (lm, _) = step_loss(&m, &batch, &config.loss, noise_seed, false).unwrap();
                (lp.total - lm.total) / (2.0 * eps)
            };
            let e = rel_err(analytic[i], fd);
            let group = param_group(name);
            let slot = groups.entry(group).or_insert(0.0);
            if e > *slot {
                *slot = e;
            }
            if e > worst {
                worst = e;
                worst_param = format!("{name}[{i}]");
            }
        }
    }

    GradCheckReport {
        groups: groups.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        worst,
        worst_param,
    }
}
