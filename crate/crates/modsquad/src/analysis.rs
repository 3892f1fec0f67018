//! Analysis exports: task-similarity matrices, expert-usage heatmap CSVs,
//! and per-layer MI summaries.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, SyntheticBenchmark};
use crate::error::ModSquadError;
use crate::mi::{self, UsageAccumulator};
use crate::model::ModSquadModel;
use crate::tensor::Tensor;

/// Fixed probe set: `count` random sequences, independent of any task.
pub fn probe_inputs(bench: &SyntheticBenchmark, count: usize) -> Tensor {
    let (l, d_in) = (bench.section.seq_len, bench.section.d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(bench.seed, &[20]));
    let n = count * l * d_in;
    Tensor::new(
        vec![count * l, d_in],
        (0..n).map(|_| crate::routing::randn(&mut rng)).collect(),
    )
}

fn overlap(sa: &[usize], sb: &[usize], k: usize) -> f64 {
    let inter = sa.iter().filter(|i| sb.contains(i)).count();
    inter as f64 / k as f64
}

/// Mean fraction of co-selected experts between every task pair over the
/// probe inputs and the in-scope MoE layers. Diagonal is 1 by definition.
pub fn task_similarity(
    model: &ModSquadModel,
    bench: &SyntheticBenchmark,
    probe_count: usize,
    scope: Option<&[usize]>,
) -> Result<Tensor, ModSquadError> {
    let moe = model.moe_layer_indices();
    let in_scope: Vec<usize> = match scope {
        None => moe,
        Some(s) => moe.into_iter().filter(|i| s.contains(i)).collect(),
    };
    if in_scope.is_empty() {
        return Err(ModSquadError::Config("task_similarity: empty layer scope".into()));
    }
    if probe_count == 0 {
        return Err(ModSquadError::EmptyDataset);
    }
    let probe = probe_inputs(bench, probe_count);
    let m = model.config.n_tasks;
    // selections[task][layer_pos][token]
    let mut selections: Vec<Vec<Vec<Vec<usize>>>> = Vec::with_capacity(m);
    let mut ks: Vec<usize> = Vec::new();
    for task in 0..m {
        let (_, gate_log) = model.model_forward(&probe, task)?;
        let mut per_layer = Vec::new();
        for &layer in &in_scope {
            let lg = gate_log.iter().find(|lg| lg.layer == layer).unwrap();
            if task == 0 {
                ks.push(lg.k);
            }
            per_layer.push(lg.gates.iter().map(|gv| gv.selected.clone()).collect());
        }
        selections.push(per_layer);
    }
    let mut s = Tensor::zeros(vec![m, m]);
    for a in 0..m {
        for b in 0..m {
            if a == b {
                s.data[a * m + b] = 1.0;
                continue;
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for (lp, &k) in ks.iter().enumerate() {
                let sa = &selections[a][lp];
                let sb = &selections[b][lp];
                for (ta, tb) in sa.iter().zip(sb) {
                    total += overlap(ta, tb, k);
                    count += 1;
                }
            }
            s.data[a * m + b] = total / count as f64;
        }
    }
    Ok(s)
}

/// Mean within-group vs cross-group similarity (diagonal excluded).
pub fn group_similarity_summary(s: &Tensor, groups: &[usize]) -> (f64, f64) {
    let m = s.rows();
    assert_eq!(groups.len(), m);
    let (mut win, mut wn) = (0.0, 0usize);
    let (mut cross, mut cn) = (0.0, 0usize);
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            if groups[a] == groups[b] {
                win += s.data[a * m + b];
                wn += 1;
            } else {
                cross += s.data[a * m + b];
                cn += 1;
            }
        }
    }
    (win / wn.max(1) as f64, cross / cn.max(1) as f64)
}

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// CSV body for one layer's usage table: header `task,expert_0..`, one row
/// per task, floats at 9 significant digits, LF endings.
pub fn heatmap_csv(conds: &Tensor) -> String {
    let (m, n) = (conds.rows(), conds.cols());
    let mut out = String::from("task");
    for j in 0..n {
        out.push_str(&format!(",expert_{j}"));
    }
    out.push('\n');
    for t in 0..m {
        out.push_str(&format!("task{t}"));
        for &v in conds.row(t) {
            out.push(',');
            out.push_str(&fmt9(v));
        }
        out.push('\n');
    }
    out
}

/// One CSV file per MoE layer, named after the layer.
pub fn export_heatmaps(
    usage: &UsageAccumulator,
    model: &ModSquadModel,
    dir: &Path,
) -> Result<Vec<PathBuf>, ModSquadError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (pos, lu) in usage.layers.iter().enumerate() {
        if !lu.is_moe {
            continue;
        }
        let conds = usage.conditional(pos)?;
        let name = model.layer_name(lu.layer).replace('.', "_");
        let path = dir.join(format!("usage_{name}.csv"));
        std::fs::write(&path, heatmap_csv(&conds))?;
        written.push(path);
    }
    Ok(written)
}

/// Similarity matrix CSV with task-name header row and column.
pub fn similarity_csv(s: &Tensor) -> String {
    let m = s.rows();
    let mut out = String::from("task");
    for j in 0..m {
        out.push_str(&format!(",task{j}"));
    }
    out.push('\n');
    for a in 0..m {
        out.push_str(&format!("task{a}"));
        for &v in s.row(a) {
            out.push(',');
            out.push_str(&fmt9(v));
        }
        out.push('\n');
    }
    out
}

/// Validate the symmetry/diagonal/range invariants before exporting.
pub fn validate_similarity(s: &Tensor) -> Result<(), ModSquadError> {
    let m = s.rows();
    for a in 0..m {
        if (s.data[a * m + a] - 1.0).abs() > 1e-12 {
            return Err(ModSquadError::Config(format!("similarity diagonal not 1 at {a}")));
        }
        for b in 0..m {
            let v = s.data[a * m + b];
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(ModSquadError::Config(format!("similarity out of range at ({a},{b})")));
            }
            if (v - s.data[b * m + a]).abs() > 1e-12 {
                return Err(ModSquadError::Config(format!("similarity asymmetric at ({a},{b})")));
            }
        }
    }
    Ok(())
}

/// JSON-ready MI summary per MoE layer plus the normalized mean.
pub fn mi_report(
    usage: &UsageAccumulator,
    model: &ModSquadModel,
) -> Result<serde_json::Value, ModSquadError> {
    let h_t = (usage.n_tasks as f64).ln();
    let mut layers = Vec::new();
    for (pos, lu) in usage.layers.iter().enumerate() {
        if !lu.is_moe {
            continue;
        }
        let joint = usage.joint(pos)?;
        let i = mi::mutual_information(&joint);
        layers.push(serde_json::json!({
            "layer": lu.layer,
            "name": model.layer_name(lu.layer),
            "mi_nats": i,
            "normalized_mi": i / h_t,
        }));
    }
    Ok(serde_json::json!({
        "layers": layers,
        "mean_normalized_mi": usage.mean_normalized_mi()?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn small() -> (SyntheticBenchmark, ModSquadModel) {
        let mut c = RunConfig::grad_check_default();
        c.data.tasks_per_group = 3;
        let bench = SyntheticBenchmark::with_seed(&c.data, 21);
        let mut model = ModSquadModel::new(&c.model_config(&bench));
        model.init(21);
        (bench, model)
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap(&[0, 1], &[1, 2], 2), 0.5);
        assert_eq!(overlap(&[0, 1], &[0, 1], 2), 1.0);
        assert_eq!(overlap(&[0], &[1], 1), 0.0);
    }

    #[test]
    fn similarity_invariants_and_identical_routers() {
        let (bench, mut model) = small();
        // make task 2's routers identical to task 0's
        for i in 0..model.n_layers() {
            let layer = model.layer_mut(i);
            layer.routers[2] = layer.routers[0].clone();
        }
        let s = task_similarity(&model, &bench, 16, None).unwrap();
        validate_similarity(&s).unwrap();
        let m = s.rows();
        assert!((s.data[2] - 1.0).abs() < 1e-12, "identical routers must have similarity 1");
        assert_eq!(s.data[2], s.data[2 * m]);
    }

    #[test]
    fn similarity_is_permutation_equivariant() {
        let (bench, model) = small();
        let s = task_similarity(&model, &bench, 8, None).unwrap();
        // swap task 0 and 1 routers and expect swapped rows/columns
        let mut swapped = model.clone();
        for i in 0..swapped.n_layers() {
            let layer = swapped.layer_mut(i);
            layer.routers.swap(0, 1);
        }
        let s2 = task_similarity(&swapped, &bench, 8, None).unwrap();
        let m = s.rows();
        let perm = |i: usize| match i {
            0 => 1,
            1 => 0,
            other => other,
        };
        for a in 0..m {
            for b in 0..m {
                let lhs = s2.data[a * m + b];
                let rhs = s.data[perm(a) * m + perm(b)];
                assert!((lhs - rhs).abs() < 1e-12, "({a},{b}): {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn empty_scope_is_error() {
        let (bench, model) = small();
        assert!(task_similarity(&model, &bench, 8, Some(&[])).is_err());
    }

    #[test]
    fn heatmap_format_contract() {
        let conds = Tensor::new(vec![2, 3], vec![0.5, 0.25, 0.25, 0.1, 0.2, 0.7]);
        let csv = heatmap_csv(&conds);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "task,expert_0,expert_1,expert_2");
        assert!(lines[1].starts_with("task0,"));
        assert!(!csv.contains('\r'));
        // re-export identical
        assert_eq!(csv, heatmap_csv(&conds));
        // round-trip within 9-significant-digit precision
        for (i, line) in lines[1..].iter().enumerate() {
            for (j, field) in line.split(',').skip(1).enumerate() {
                let v: f64 = field.parse().unwrap();
                let orig = conds.data[i * 3 + j];
                assert!((v - orig).abs() <= orig.abs() * 1e-8 + 1e-12);
            }
        }
    }

    #[test]
    fn heatmap_rows_equal_usage_rows() {
        let (bench, model) = small();
        let report =
            crate::train::evaluate(&model, &bench, crate::data::Split::Test, crate::config::GateStats::PostTopk)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_heatmaps(&report.usage, &model, dir.path()).unwrap();
        assert_eq!(files.len(), model.moe_layer_indices().len());
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let pos = report
            .usage
            .layers
            .iter()
            .position(|l| l.layer == model.moe_layer_indices()[0])
            .unwrap();
        let conds = report.usage.conditional(pos).unwrap();
        assert_eq!(text, heatmap_csv(&conds));
        // rows are distributions
        for t in 0..conds.rows() {
            let s: f64 = conds.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mi_report_nonnegative() {
        let (bench, model) = small();
        let report =
            crate::train::evaluate(&model, &bench, crate::data::Split::Test, crate::config::GateStats::PostTopk)
                .unwrap();
        let json = mi_report(&report.usage, &model).unwrap();
        for layer in json["layers"].as_array().unwrap() {
            assert!(layer["mi_nats"].as_f64().unwrap() >= -1e-12);
        }
        assert!(json["mean_normalized_mi"].as_f64().unwrap() >= -1e-12);
    }
}
