//! Synthetic multi-task benchmark with known group structure.
//!
//! Tasks in the same group share a latent projection exactly, so expert
//! cooperation within a group and specialization across groups are
//! verifiable by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_groups: usize,
    pub tasks_per_group: usize,
    pub d_in: usize,
    pub seq_len: usize,
    pub d_latent: usize,
    pub noise_std: f64,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub regression_dim: usize,
    pub n_classes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_groups: 2,
            tasks_per_group: 2,
            d_in: 16,
            seq_len: 4,
            d_latent: 8,
            noise_std: 0.05,
            train_per_task: 2000,
            test_per_task: 500,
            regression_dim: 2,
            n_classes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub group: usize,
    pub kind: TaskKind,
    /// [d_latent x out_dim] output transform.
    pub w_out: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub enum Target {
    /// [B x r] regression targets.
    Regression(Tensor),
    /// Integer class labels.
    Classification(Vec<usize>),
}

/// A generated per-task dataset: one [count*L x d_in] input block plus targets.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub x: Tensor,
    pub target: Target,
    pub count: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub section: DataSection,
    pub seed: u64,
    /// One shared latent projection [d_in x d_latent] per group.
    pub group_proj: Vec<Tensor>,
    pub tasks: Vec<TaskSpec>,
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    // splitmix64 over the tag stream
    let mut s = base;
    for &t in tags {
        s = s.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(t.wrapping_mul(0xbf58476d1ce4e5b9));
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        s = z ^ (z >> 31);
    }
    s
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| randn(rng) * std).collect())
}

impl SyntheticBenchmark {
    /// Benchmark is fully determined by (section, seed from the run config).
    pub fn new(section: &DataSection) -> Self {
        Self::with_seed(section, 0)
    }

    pub fn with_seed(section: &DataSection, seed: u64) -> Self {
        let mut group_proj = Vec::with_capacity(section.n_groups);
        for g in 0..section.n_groups {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, g as u64]));
            // unit column scaling keeps latent variance ~1
            let std = 1.0 / (section.d_in as f64).sqrt();
            group_proj.push(randn_tensor(&mut rng, vec![section.d_in, section.d_latent], std));
        }
        let mut tasks = Vec::new();
        for g in 0..section.n_groups {
            // task kind is a group property: tasks in a group share both the
            // latent projection and the output geometry, so group membership
            // is the dominant axis of functional similarity
            let kind = if g % 2 == 0 { TaskKind::Regression } else { TaskKind::Classification };
            for _ in 0..section.tasks_per_group {
                tasks.push(Self::make_task(section, seed, g, tasks.len(), kind));
            }
        }
        SyntheticBenchmark { section: section.clone(), seed, group_proj, tasks }
    }

    fn make_task(section: &DataSection, seed: u64, group: usize, task_id: usize, kind: TaskKind) -> TaskSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, task_id as u64]));
        let out = match kind {
            TaskKind::Regression => section.regression_dim,
            TaskKind::Classification => section.n_classes,
        };
        let w_out = randn_tensor(&mut rng, vec![section.d_latent, out], 1.0);
        TaskSpec { group, kind, w_out }
    }

    /// Add a fresh task to an existing group (held-out task for router
    /// fine-tuning experiments). Returns the new task id.
    pub fn add_task(&mut self, group: usize, kind: TaskKind, task_seed: u64) -> usize {
        assert!(group < self.section.n_groups, "group {group} out of range");
        let id = self.tasks.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[3, task_seed, id as u64]));
        let out = match kind {
            TaskKind::Regression => self.section.regression_dim,
            TaskKind::Classification => self.section.n_classes,
        };
        let w_out = randn_tensor(&mut rng, vec![self.section.d_latent, out], 1.0);
        self.tasks.push(TaskSpec { group, kind, w_out });
        id
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn head_dims(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Regression => self.section.regression_dim,
                TaskKind::Classification => self.section.n_classes,
            })
            .collect()
    }

    /// Generate `count` samples for one task starting at sample index
    /// `offset` within the split's deterministic stream.
    pub fn generate_range(&self, task: usize, split: Split, offset: usize, count: usize) -> TaskDataset {
        assert!(count > 0, "generate: count must be positive");
        let sec = &self.section;
        let spec = &self.tasks[task];
        let (l, d_in, d_lat) = (sec.seq_len, sec.d_in, sec.d_latent);
        let split_tag = match split {
            Split::Train => 10,
            Split::Test => 11,
        };
        let mut x = Vec::with_capacity(count * l * d_in);
        let mut reg_targets = Vec::new();
        let mut labels = Vec::new();
        for s in 0..count {
            let idx = (offset + s) as u64;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[split_tag, task as u64, idx]));
            let sample: Vec<f64> = (0..l * d_in).map(|_| randn(&mut rng)).collect();
            // latent features: mean over tokens of x . P_group
            let proj = &self.group_proj[spec.group];
            let mut z = vec![0.0; d_lat];
            for t in 0..l {
                let row = &sample[t * d_in..(t + 1) * d_in];
                for (p, &xv) in row.iter().enumerate() {
                    let prow = proj.row(p);
                    for (zj, &pv) in z.iter_mut().zip(prow) {
                        *zj += xv * pv;
                    }
                }
            }
            for zj in &mut z {
                *zj /= l as f64;
            }
            let out_dim = spec.w_out.cols();
            let mut y = vec![0.0; out_dim];
            for (p, &zv) in z.iter().enumerate() {
                for (yj, &wv) in y.iter_mut().zip(spec.w_out.row(p)) {
                    *yj += zv * wv;
                }
            }
            match spec.kind {
                TaskKind::Regression => {
                    for yj in &mut y {
                        *yj += sec.noise_std * randn(&mut rng);
                    }
                    reg_targets.extend_from_slice(&y);
                }
                TaskKind::Classification => {
                    for yj in &mut y {
                        *yj += sec.noise_std * randn(&mut rng);
                    }
                    let label = y
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    labels.push(label);
                }
            }
            x.extend_from_slice(&sample);
        }
        let target = match spec.kind {
            TaskKind::Regression => {
                Target::Regression(Tensor::new(vec![count, sec.regression_dim], reg_targets))
            }
            TaskKind::Classification => Target::Classification(labels),
        };
        TaskDataset { x: Tensor::new(vec![count * l, d_in], x), target, count, seq_len: l }
    }

    /// Full reproducible split for one task.
    pub fn generate(&self, task: usize, split: Split) -> TaskDataset {
        let count = match split {
            Split::Train => self.section.train_per_task,
            Split::Test => self.section.test_per_task,
        };
        self.generate_range(task, split, 0, count)
    }
}

impl TaskDataset {
    /// Row indices and target slice for a subset of samples.
    pub fn subset(&self, sample_idx: &[usize]) -> TaskDataset {
        let l = self.seq_len;
        let d_in = self.x.cols();
        let mut x = Vec::with_capacity(sample_idx.len() * l * d_in);
        for &s in sample_idx {
            x.extend_from_slice(&self.x.data[s * l * d_in..(s + 1) * l * d_in]);
        }
        let target = match &self.target {
            Target::Regression(t) => {
                let r = t.cols();
                let mut data = Vec::with_capacity(sample_idx.len() * r);
                for &s in sample_idx {
                    data.extend_from_slice(t.row(s));
                }
                Target::Regression(Tensor::new(vec![sample_idx.len(), r], data))
            }
            Target::Classification(labels) => {
                Target::Classification(sample_idx.iter().map(|&s| labels[s]).collect())
            }
        };
        TaskDataset {
            x: Tensor::new(vec![sample_idx.len() * l, d_in], x),
            target,
            count: sample_idx.len(),
            seq_len: l,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let sec = DataSection { train_per_task: 8, test_per_task: 4, ..Default::default() };
        let b1 = SyntheticBenchmark::with_seed(&sec, 42);
        let b2 = SyntheticBenchmark::with_seed(&sec, 42);
        let d1 = b1.generate(0, Split::Train);
        let d2 = b2.generate(0, Split::Train);
        assert_eq!(d1.x.data, d2.x.data);
        match (&d1.target, &d2.target) {
            (Target::Regression(a), Target::Regression(b)) => assert_eq!(a.data, b.data),
            _ => panic!("expected regression task 0"),
        }
        // different seed differs
        let b3 = SyntheticBenchmark::with_seed(&sec, 43);
        let d3 = b3.generate(0, Split::Train);
        assert_ne!(d1.x.data, d3.x.data);
    }

    #[test]
    fn within_group_tasks_share_projection_exactly() {
        let sec = DataSection::default();
        let b = SyntheticBenchmark::with_seed(&sec, 7);
        assert_eq!(b.tasks[0].group, b.tasks[1].group);
        assert_ne!(b.tasks[0].group, b.tasks[2].group);
        // same group -> identical projection; cross-group -> different
        assert_eq!(
            b.group_proj[b.tasks[0].group].data,
            b.group_proj[b.tasks[1].group].data
        );
        assert_ne!(
            b.group_proj[b.tasks[0].group].data,
            b.group_proj[b.tasks[2].group].data
        );
    }

    #[test]
    fn noise_free_targets_are_deterministic_functions_of_latents() {
        let sec = DataSection { noise_std: 0.0, train_per_task: 4, ..Default::default() };
        let b = SyntheticBenchmark::with_seed(&sec, 5);
        let d1 = b.generate(0, Split::Train);
        let d2 = b.generate(0, Split::Train);
        match (&d1.target, &d2.target) {
            (Target::Regression(a), Target::Regression(bb)) => assert_eq!(a.data, bb.data),
            _ => panic!(),
        }
    }

    #[test]
    fn train_and_test_splits_are_disjoint_streams() {
        let sec = DataSection { train_per_task: 4, test_per_task: 4, ..Default::default() };
        let b = SyntheticBenchmark::with_seed(&sec, 9);
        let tr = b.generate(0, Split::Train);
        let te = b.generate(0, Split::Test);
        assert_ne!(tr.x.data[..16], te.x.data[..16]);
    }
}
