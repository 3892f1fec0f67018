//! Task/expert mutual information: usage accounting, the MI quantities in
//! value space (two independent formulations), and the differentiable loss
//! term built from in-graph gate tensors.
//!
//! P(E|T) for a layer is the per-task gate mass over experts, normalized per
//! task row. P(T) is uniform, so the joint is P(E|T)/M and
//! I(T;E) = H(E) - H(E|T). Natural log throughout.

use crate::config::GateStats;
use crate::error::ModSquadError;
use crate::model::LayerGates;
use crate::tensor::{Graph, Tensor, TensorId};

/// Accumulated gate mass per (task, expert) for every layer.
#[derive(Debug, Clone)]
pub struct UsageAccumulator {
    pub n_tasks: usize,
    /// One [M x n_cols] mass table per layer, plus per-task token counts.
    pub layers: Vec<LayerUsage>,
    pub gate_stats: GateStats,
}

#[derive(Debug, Clone)]
pub struct LayerUsage {
    pub layer: usize,
    pub is_moe: bool,
    pub n_cols: usize,
    /// Unnormalized gate mass, row per task.
    pub mass: Tensor,
    /// Tokens contributing to each task row.
    pub tokens: Vec<f64>,
}

impl UsageAccumulator {
    pub fn new(n_tasks: usize, layer_meta: &[(usize, bool, usize)], gate_stats: GateStats) -> Self {
        let layers = layer_meta
            .iter()
            .map(|&(layer, is_moe, n_cols)| LayerUsage {
                layer,
                is_moe,
                n_cols,
                mass: Tensor::zeros(vec![n_tasks, n_cols]),
                tokens: vec![0.0; n_tasks],
            })
            .collect();
        UsageAccumulator { n_tasks, layers, gate_stats }
    }

    pub fn for_model(model: &crate::model::ModSquadModel, gate_stats: GateStats) -> Self {
        let meta: Vec<(usize, bool, usize)> = (0..model.n_layers())
            .map(|i| {
                let l = model.layer(i);
                (i, l.is_moe, l.n_cols)
            })
            .collect();
        UsageAccumulator::new(model.config.n_tasks, &meta, gate_stats)
    }

    /// Add one eval/train batch's gate log for `task`.
    pub fn add(&mut self, task: usize, gate_log: &[LayerGates]) {
        assert!(task < self.n_tasks);
        for lg in gate_log {
            let slot = self
                .layers
                .iter_mut()
                .find(|l| l.layer == lg.layer)
                .expect("gate log layer not tracked");
            let n = slot.n_cols;
            match self.gate_stats {
                GateStats::PostTopk => {
                    for gv in &lg.gates {
                        for (j, &w) in gv.weights.iter().enumerate() {
                            slot.mass.data[task * n + j] += w;
                        }
                        slot.tokens[task] += 1.0;
                    }
                }
                GateStats::PreTopk => {
                    let rows = lg.probs.rows();
                    for t in 0..rows {
                        for (j, &w) in lg.probs.row(t).iter().enumerate() {
                            slot.mass.data[task * n + j] += w;
                        }
                        slot.tokens[task] += 1.0;
                    }
                }
            }
        }
    }

    /// Additive merge of partial accumulations.
    pub fn merge(&mut self, other: &UsageAccumulator) {
        assert_eq!(self.n_tasks, other.n_tasks);
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            assert_eq!(a.layer, b.layer);
            for (x, &y) in a.mass.data.iter_mut().zip(&b.mass.data) {
                *x += y;
            }
            for (x, &y) in a.tokens.iter_mut().zip(&b.tokens) {
                *x += y;
            }
        }
    }

    /// P(E|T) for one layer: mass rows normalized to 1.
    pub fn conditional(&self, layer_pos: usize) -> Result<Tensor, ModSquadError> {
        let lu = &self.layers[layer_pos];
        conditional_from_mass(&lu.mass, lu.layer)
    }

    /// Joint P(T,E) under uniform P(T).
    pub fn joint(&self, layer_pos: usize) -> Result<Tensor, ModSquadError> {
        let cond = self.conditional(layer_pos)?;
        Ok(joint_from_conditional(&cond))
    }

    /// I(T;E) normalized by H(T) = ln M, averaged over the real MoE layers.
    pub fn mean_normalized_mi(&self) -> Result<f64, ModSquadError> {
        let h_t = (self.n_tasks as f64).ln();
        let mut total = 0.0;
        let mut count = 0;
        for (pos, lu) in self.layers.iter().enumerate() {
            if !lu.is_moe {
                continue;
            }
            total += mutual_information(&self.joint(pos)?) / h_t;
            count += 1;
        }
        assert!(count > 0, "no MoE layers to average over");
        Ok(total / count as f64)
    }
}

/// Row-normalize a mass table into P(E|T); a zero row is a degenerate task.
pub fn conditional_from_mass(mass: &Tensor, layer: usize) -> Result<Tensor, ModSquadError> {
    let (m, n) = (mass.rows(), mass.cols());
    let mut out = mass.clone();
    for t in 0..m {
        let s: f64 = mass.row(t).iter().sum();
        if s <= 0.0 {
            return Err(ModSquadError::DegenerateTask { task: t, layer });
        }
        for j in 0..n {
            out.data[t * n + j] /= s;
        }
    }
    Ok(out)
}

/// P(T,E) = P(E|T) / M (uniform task marginal).
pub fn joint_from_conditional(cond: &Tensor) -> Tensor {
    let m = cond.rows() as f64;
    let mut out = cond.clone();
    for v in &mut out.data {
        *v /= m;
    }
    out
}

/// I(T;E) by the direct double sum over the joint:
/// sum_te p(t,e) ln( p(t,e) / (p(t) p(e)) ), zero-probability cells skipped.
pub fn mutual_information(joint: &Tensor) -> f64 {
    let (m, n) = (joint.rows(), joint.cols());
    let mut p_t = vec![0.0; m];
    let mut p_e = vec![0.0; n];
    for t in 0..m {
        for e in 0..n {
            let p = joint.data[t * n + e];
            p_t[t] += p;
            p_e[e] += p;
        }
    }
    let mut mi = 0.0;
    for t in 0..m {
        for e in 0..n {
            let p = joint.data[t * n + e];
            if p > 0.0 {
                mi += p * (p / (p_t[t] * p_e[e])).ln();
            }
        }
    }
    mi
}

/// I(T;E) via the entropy decomposition H(T) + H(E) - H(T,E).
pub fn mi_via_decomposition(joint: &Tensor) -> f64 {
    let (m, n) = (joint.rows(), joint.cols());
    let mut p_t = vec![0.0; m];
    let mut p_e = vec![0.0; n];
    for t in 0..m {
        for e in 0..n {
            let p = joint.data[t * n + e];
            p_t[t] += p;
            p_e[e] += p;
        }
    }
    let h = |ps: &[f64]| -> f64 {
        ps.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    };
    let h_joint: f64 = joint.data.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h(&p_t) + h(&p_e) - h_joint
}

/// Build the differentiable MI value for one layer from per-task gate
/// tensors. Each entry of `task_gates` is that task's [tokens x N] gate
/// matrix in the current graph. Returns the in-graph I(T;E) scalar.
pub fn mi_layer_in_graph(
    g: &mut Graph,
    task_gates: &[TensorId],
    layer: usize,
) -> Result<TensorId, ModSquadError> {
    let rows: Vec<TensorId> = task_gates.iter().map(|&gid| g.sum_axis0(gid)).collect();
    let mass = g.concat_rows(&rows);
    // check for degenerate rows before the normalize op (it panics on them)
    {
        let t = g.value(mass);
        for task in 0..t.rows() {
            if t.row(task).iter().sum::<f64>() <= 0.0 {
                return Err(ModSquadError::DegenerateTask { task, layer });
            }
        }
    }
    let conds = g.normalize_rows(mass);
    Ok(g.mutual_info_uniform(conds))
}

/// Differentiable per-layer MI loss term: -I(T;E) built from one step's
/// batch-local gate tensors. The H(T) constant is gradient-free under the
/// uniform task marginal, so the returned loss is exactly the negated MI.
pub fn mi_loss_batch(
    g: &mut Graph,
    task_gates: &[TensorId],
    layer: usize,
) -> Result<TensorId, ModSquadError> {
    let mi = mi_layer_in_graph(g, task_gates, layer)?;
    Ok(g.scale(mi, -1.0))
}

/// Exponential moving average of usage tables for reporting.
#[derive(Debug, Clone)]
pub struct UsageEma {
    pub decay: f64,
    pub tables: Option<Vec<Tensor>>,
}

impl UsageEma {
    pub fn new(decay: f64) -> Self {
        UsageEma { decay, tables: None }
    }

    /// Fold in one step's conditionals (one [M x N] table per layer).
    pub fn update(&mut self, conds: &[Tensor]) {
        match &mut self.tables {
            None => self.tables = Some(conds.to_vec()),
            Some(tables) => {
                assert_eq!(tables.len(), conds.len());
                for (t, c) in tables.iter_mut().zip(conds) {
                    for (a, &b) in t.data.iter_mut().zip(&c.data) {
                        *a = self.decay * *a + (1.0 - self.decay) * b;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_joint_has_zero_mi() {
        // p(t,e) = p(t) p(e) exactly
        let p_t = [0.3, 0.7];
        let p_e = [0.1, 0.5, 0.4];
        let mut data = Vec::new();
        for t in &p_t {
            for e in &p_e {
                data.push(t * e);
            }
        }
        let joint = Tensor::new(vec![2, 3], data);
        assert!(mutual_information(&joint).abs() < 1e-15);
        assert!(mi_via_decomposition(&joint).abs() < 1e-15);
    }

    #[test]
    fn deterministic_assignment_has_mi_ln_m() {
        // each of 4 tasks uses its own expert exclusively: I = H(T) = ln 4
        let mut data = vec![0.0; 16];
        for t in 0..4 {
            data[t * 4 + t] = 0.25;
        }
        let joint = Tensor::new(vec![4, 4], data);
        let expected = 4f64.ln();
        assert!((mutual_information(&joint) - expected).abs() < 1e-12);
        assert!((mi_via_decomposition(&joint) - expected).abs() < 1e-12);
    }

    #[test]
    fn two_task_two_expert_hand_value() {
        // conds: task0 -> [1,0], task1 -> [0.5,0.5]; uniform tasks
        // p_e = [0.75, 0.25]
        // I = 0.5*ln(1/0.75) + 0.25*ln(0.5/0.75) + 0.25*ln(0.5/0.25)
        let joint = Tensor::new(vec![2, 2], vec![0.5, 0.0, 0.25, 0.25]);
        let expected = 0.5 * (1.0f64 / 0.75).ln()
            + 0.25 * (0.5f64 / 0.75).ln()
            + 0.25 * (0.5f64 / 0.25).ln();
        assert!((mutual_information(&joint) - expected).abs() < 1e-15);
        assert!((mi_via_decomposition(&joint) - expected).abs() < 1e-12);
    }

    #[test]
    fn conditional_normalizes_counts() {
        // the 30-of-100 tokens example: mass 30 on one expert out of 100
        let mass = Tensor::new(vec![1, 2], vec![30.0, 70.0]);
        let cond = conditional_from_mass(&mass, 0).unwrap();
        assert!((cond.data[0] - 0.3).abs() < 1e-15);
        assert!((cond.data[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn degenerate_task_detected() {
        let mass = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 0.0]);
        match conditional_from_mass(&mass, 3) {
            Err(ModSquadError::DegenerateTask { task: 1, layer: 3 }) => {}
            other => panic!("expected DegenerateTask, got {other:?}"),
        }
    }

    #[test]
    fn graph_mi_matches_value_mi() {
        let mut g = Graph::new();
        let g0 = g.constant(Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3]));
        let g1 = g.constant(Tensor::new(vec![3, 2], vec![0.2, 0.8, 0.1, 0.9, 0.3, 0.7]));
        let mi_id = mi_layer_in_graph(&mut g, &[g0, g1], 0).unwrap();
        let got = g.value(mi_id).data[0];

        let mass = Tensor::new(vec![2, 2], vec![2.4, 0.6, 0.6, 2.4]);
        let cond = conditional_from_mass(&mass, 0).unwrap();
        let expected = mutual_information(&joint_from_conditional(&cond));
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        let alt = mi_via_decomposition(&joint_from_conditional(&cond));
        assert!((got - alt).abs() < 1e-12);
    }

    #[test]
    fn graph_mi_degenerate_task_is_error() {
        let mut g = Graph::new();
        let g0 = g.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]));
        let g1 = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            mi_layer_in_graph(&mut g, &[g0, g1], 7),
            Err(ModSquadError::DegenerateTask { task: 1, layer: 7 })
        ));
    }

    #[test]
    fn random_joints_agree_between_formulations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let (m, n) = (rng.gen_range(2..6), rng.gen_range(2..9));
            let mut data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = data.iter().sum();
            for v in &mut data {
                *v /= s;
            }
            let joint = Tensor::new(vec![m, n], data);
            let a = mutual_information(&joint);
            let b = mi_via_decomposition(&joint);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            assert!(a >= -1e-12, "MI must be nonnegative: {a}");
        }
    }

    #[test]
    fn disjoint_routing_loss_is_negative_ln2() {
        // two tasks on disjoint experts with hard gates: I = ln 2
        let mut g = Graph::new();
        let g0 = g.constant(Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
        let g1 = g.constant(Tensor::new(vec![4, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]));
        let loss = mi_loss_batch(&mut g, &[g0, g1], 0).unwrap();
        assert!((g.value(loss).data[0] + 2f64.ln()).abs() < 1e-12);
        // identical routing: no dependence, loss ~ 0
        let mut g2 = Graph::new();
        let a = g2.constant(Tensor::new(vec![2, 2], vec![0.6, 0.4, 0.6, 0.4]));
        let b = g2.constant(Tensor::new(vec![2, 2], vec![0.6, 0.4, 0.6, 0.4]));
        let loss2 = mi_loss_batch(&mut g2, &[a, b], 0).unwrap();
        assert!(g2.value(loss2).data[0].abs() < 1e-12);
    }

    #[test]
    fn merge_equals_single_pass() {
        let meta = [(0, true, 3)];
        let mut a = UsageAccumulator::new(2, &meta, GateStats::PostTopk);
        let mut b = UsageAccumulator::new(2, &meta, GateStats::PostTopk);
        let mut whole = UsageAccumulator::new(2, &meta, GateStats::PostTopk);
        let log1 = vec![crate::model::LayerGates {
            layer: 0,
            is_moe: true,
            k: 1,
            n_cols: 3,
            gates: crate::routing::gates_to_vectors(&Tensor::new(vec![2, 3], vec![0.9, 0.0, 0.0, 0.0, 0.8, 0.0])),
            probs: Tensor::new(vec![2, 3], vec![0.9, 0.05, 0.05, 0.1, 0.8, 0.1]),
            per_token_eval_counts: vec![1, 1],
            dispatched: vec![0, 1],
        }];
        let log2 = vec![crate::model::LayerGates {
            layer: 0,
            is_moe: true,
            k: 1,
            n_cols: 3,
            gates: crate::routing::gates_to_vectors(&Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.7])),
            probs: Tensor::new(vec![1, 3], vec![0.2, 0.1, 0.7]),
            per_token_eval_counts: vec![1],
            dispatched: vec![2],
        }];
        a.add(0, &log1);
        b.add(1, &log2);
        whole.add(0, &log1);
        whole.add(1, &log2);
        a.merge(&b);
        assert_eq!(a.layers[0].mass.data, whole.layers[0].mass.data);
        assert_eq!(a.layers[0].tokens, whole.layers[0].tokens);
    }

    #[test]
    fn ema_decays_toward_new_tables() {
        let mut ema = UsageEma::new(0.5);
        ema.update(&[Tensor::new(vec![1, 2], vec![1.0, 0.0])]);
        ema.update(&[Tensor::new(vec![1, 2], vec![0.0, 1.0])]);
        let t = &ema.tables.as_ref().unwrap()[0];
        assert!((t.data[0] - 0.5).abs() < 1e-15);
        assert!((t.data[1] - 0.5).abs() < 1e-15);
    }
}
