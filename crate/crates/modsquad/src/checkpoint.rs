//! Checkpoint format: `manifest.json` describing every parameter (name,
//! shape, dtype, byte offset) plus a single little-endian float32 blob
//! `weights.bin`, both inside a checkpoint directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ModSquadError;
use crate::model::{ModelConfig, ModSquadModel};
use crate::prune::PrunedModelSpec;

pub const CKPT_VERSION: &str = "modsquad-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ModelConfig,
    /// Original task id when this is a pruned standalone sub-model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<usize>,
    /// Layer structure of a pruned sub-model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned: Option<PrunedModelSpec>,
    pub params: Vec<ParamEntry>,
}

/// Write `dir/manifest.json` and `dir/weights.bin`.
pub fn save_checkpoint(
    model: &ModSquadModel,
    dir: &Path,
    pruned: Option<&PrunedModelSpec>,
) -> Result<(), ModSquadError> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.visit_params(&mut |name, t| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            dtype: "f32".to_string(),
            offset: blob.len(),
        });
        for &v in &t.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        version: CKPT_VERSION.to_string(),
        config: model.config.clone(),
        task_id: pruned.map(|s| s.task),
        pruned: pruned.cloned(),
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

fn apply_pruned_layout(model: &mut ModSquadModel, spec: &PrunedModelSpec) {
    for lp in &spec.layers {
        let layer = model.layer_mut(lp.layer);
        let mut experts = Vec::with_capacity(lp.kept.len());
        let mut cols = Vec::with_capacity(lp.kept.len());
        for &c in &lp.kept {
            let slot = layer
                .expert_cols
                .iter()
                .position(|&x| x == c)
                .expect("pruned spec names an expert the layer does not have");
            experts.push(layer.experts[slot].clone());
            cols.push(c);
        }
        layer.experts = experts;
        layer.expert_cols = cols;
        layer.k = lp.k_adjusted;
    }
}

/// Load a checkpoint directory back into a model (weights as f32).
pub fn load_checkpoint(dir: &Path) -> Result<(ModSquadModel, Manifest), ModSquadError> {
    let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    if manifest.version != CKPT_VERSION {
        return Err(ModSquadError::Checkpoint(format!(
            "unsupported checkpoint version '{}' (expected {CKPT_VERSION})",
            manifest.version
        )));
    }
    let blob = fs::read(dir.join("weights.bin"))?;
    let mut model = ModSquadModel::new(&manifest.config);
    if let Some(spec) = &manifest.pruned {
        apply_pruned_layout(&mut model, spec);
    }
    let by_name: std::collections::BTreeMap<&str, &ParamEntry> =
        manifest.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, t| {
        let entry = match by_name.get(name) {
            Some(e) => e,
            None => {
                missing.push(name.to_string());
                return;
            }
        };
        let numel: usize = entry.shape.iter().product();
        if entry.shape != t.shape {
            missing.push(format!("{name}: shape {:?} vs {:?}", entry.shape, t.shape));
            return;
        }
        let end = entry.offset + 4 * numel;
        if end > blob.len() {
            missing.push(format!("{name}: blob overrun"));
            return;
        }
        for (i, chunk) in blob[entry.offset..end].chunks_exact(4).enumerate() {
            t.data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    });
    if !missing.is_empty() {
        return Err(ModSquadError::Checkpoint(format!(
            "checkpoint incomplete: {}",
            missing.join("; ")
        )));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GateStats, RunConfig};
    use crate::data::{Split, SyntheticBenchmark};
    use crate::prune::{prune_top_share, usage_frequency};

    fn small() -> (SyntheticBenchmark, ModSquadModel) {
        let mut c = RunConfig::grad_check_default();
        c.data.train_per_task = 6;
        c.data.test_per_task = 6;
        let bench = SyntheticBenchmark::with_seed(&c.data, 13);
        let mut model = ModSquadModel::new(&c.model_config(&bench));
        model.init(13);
        (bench, model)
    }

    #[test]
    fn round_trip_preserves_weights_at_f32_precision() {
        let (_, model) = small();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), None).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.version, CKPT_VERSION);
        assert!(manifest.task_id.is_none());
        for name in model.param_names() {
            let a = &model.param(&name).data;
            let b = &loaded.param(&name).data;
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= (x.abs() + 1.0) * 1e-6, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn save_is_deterministic() {
        let (_, model) = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(&model, d1.path(), None).unwrap();
        save_checkpoint(&model, d2.path(), None).unwrap();
        assert_eq!(
            std::fs::read(d1.path().join("weights.bin")).unwrap(),
            std::fs::read(d2.path().join("weights.bin")).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.path().join("manifest.json")).unwrap(),
            std::fs::read(d2.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn pruned_checkpoint_is_smaller_and_loads_back() {
        let (bench, model) = small();
        let usage = usage_frequency(&model, &bench, Split::Test).unwrap();
        let (spec, pruned) = prune_top_share(&model, &usage, 0, 50.0).unwrap();

        let full_dir = tempfile::tempdir().unwrap();
        let pruned_dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, full_dir.path(), None).unwrap();
        save_checkpoint(&pruned, pruned_dir.path(), Some(&spec)).unwrap();
        let full_bytes = std::fs::metadata(full_dir.path().join("weights.bin")).unwrap().len();
        let pruned_bytes = std::fs::metadata(pruned_dir.path().join("weights.bin")).unwrap().len();
        assert!(pruned_bytes < full_bytes);

        let (loaded, manifest) = load_checkpoint(pruned_dir.path()).unwrap();
        assert_eq!(manifest.task_id, Some(0));
        assert_eq!(loaded.config.n_tasks, 1);
        // reloaded sub-model matches the in-memory pruned model at f32 precision
        let ds = bench.generate(0, Split::Test);
        let (a, _) = pruned.model_forward(&ds.x, 0).unwrap();
        let (b, _) = loaded.model_forward(&ds.x, 0).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
        // usage-based stats still available on the loaded model
        let _ = crate::train::evaluate(&loaded, &bench, Split::Test, GateStats::PostTopk);
    }

    #[test]
    fn version_mismatch_rejected() {
        let (_, model) = small();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), None).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace(CKPT_VERSION, "modsquad-ckpt-v0");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(ModSquadError::Checkpoint(_))));
    }
}
