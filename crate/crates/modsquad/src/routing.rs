//! Task-specific noisy top-K routers.
//!
//! Gate weights are TopK(Softmax(x W_g + eps * Softplus(x W_noise))): the
//! softmax is taken first and the K largest entries survive unrenormalized,
//! so a gate vector's mass is the softmax mass of the selected subset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::derive_seed;
use crate::error::ModSquadError;
use crate::tensor::{Graph, Tensor, TensorId};

/// Gating parameters of one (task, MoE layer) pair.
#[derive(Debug, Clone)]
pub struct RouterParams {
    /// [d_model x N]
    pub w_g: Tensor,
    /// [d_model x N]
    pub w_noise: Tensor,
}

/// Learnable per-task embeddings added to expert inputs.
#[derive(Debug, Clone)]
pub struct TaskEmbeddingTable {
    /// [M x d_model]
    pub embeddings: Tensor,
}

/// Per-token expert weights: nonnegative, at most K nonzeros, summing to at
/// most 1 (plus rounding).
#[derive(Debug, Clone)]
pub struct GateVector {
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    Train,
    Eval,
}

/// Select the k largest entries; ties broken toward the lowest index.
pub fn tie_break(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    let mut sel: Vec<usize> = order.into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

/// Standard-normal noise, one row per token, derived from per-token
/// substreams of `seed` so concurrent token evaluation stays reproducible.
pub fn sample_noise(seed: u64, tokens: usize, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(tokens * n);
    for t in 0..tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64]));
        for _ in 0..n {
            data.push(crate::routing::randn(&mut rng));
        }
    }
    Tensor::new(vec![tokens, n], data)
}

pub(crate) fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub struct RouteOut {
    /// Pre-TopK softmax weights [tokens x N].
    pub probs: TensorId,
    /// Post-TopK gate weights [tokens x N].
    pub gates: TensorId,
}

/// Graph-building route: logits = x W_g (+ eps * softplus(x W_noise) in
/// train mode), gate = TopK(softmax(logits), k). `allowed` restricts
/// selection to unmasked experts (pruned models); masked entries are zeroed
/// after the softmax so surviving gate values keep their full-model mass.
pub fn route_in_graph(
    g: &mut Graph,
    x: TensorId,
    w_g: TensorId,
    w_noise: TensorId,
    k: usize,
    allowed: Option<&[bool]>,
    renormalize: bool,
    noise: Option<&Tensor>,
) -> RouteOut {
    let mut logits = g.matmul(x, w_g);
    if let Some(eps) = noise {
        let eps_id = g.constant(eps.clone());
        let noise_mag = g.matmul(x, w_noise);
        let sp = g.softplus(noise_mag);
        let scaled = g.mul(eps_id, sp);
        logits = g.add(logits, scaled);
    }
    let probs = g.softmax(logits);
    let mut gates = g.topk_mask(probs, k, allowed);
    if renormalize {
        gates = g.normalize_rows(gates);
    }
    RouteOut { probs, gates }
}

/// Standalone route over a token batch. `rng_seed` is required in train
/// mode and drives the per-token noise substreams.
pub fn route(
    x: &Tensor,
    router: &RouterParams,
    k: usize,
    mode: RouteMode,
    rng_seed: Option<u64>,
) -> Result<Vec<GateVector>, ModSquadError> {
    let n = router.w_g.cols();
    if k < 1 || k > n {
        return Err(ModSquadError::Config(format!("route: k={k} out of range 1..={n}")));
    }
    let noise = match mode {
        RouteMode::Train => {
            let seed = rng_seed.ok_or_else(|| {
                ModSquadError::Config("route: train mode requires an rng seed".into())
            })?;
            Some(sample_noise(seed, x.rows(), n))
        }
        RouteMode::Eval => None,
    };
    let mut g = Graph::new();
    let xid = g.constant(x.clone());
    let wg = g.constant(router.w_g.clone());
    let wn = g.constant(router.w_noise.clone());
    let out = route_in_graph(&mut g, xid, wg, wn, k, None, false, noise.as_ref());
    Ok(gates_to_vectors(g.value(out.gates)))
}

pub fn gates_to_vectors(gates: &Tensor) -> Vec<GateVector> {
    let n = gates.cols();
    (0..gates.rows())
        .map(|t| {
            let weights = gates.row(t).to_vec();
            let selected = (0..n).filter(|&j| weights[j] > 0.0).collect();
            GateVector { weights, selected }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_router(d: usize, n: usize, seed: u64) -> RouterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(vec![d, n], (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        RouterParams { w_g: mk(&mut rng), w_noise: mk(&mut rng) }
    }

    #[test]
    fn k_equals_n_gates_sum_to_one() {
        let router = random_router(4, 3, 1);
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64) * 0.1 - 1.0).collect());
        let gates = route(&x, &router, 3, RouteMode::Eval, None).unwrap();
        for gv in gates {
            let s: f64 = gv.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(gv.selected.len(), 3);
        }
    }

    #[test]
    fn eval_route_matches_direct_softmax_topk() {
        // W_g = [[1,0,0],[0,1,0]], x = [2,1] -> softmax([2,1,0]) top-2
        let router = RouterParams {
            w_g: Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]),
            w_noise: Tensor::zeros(vec![2, 3]),
        };
        let x = Tensor::from_rows(&[vec![2.0, 1.0]]);
        let gates = route(&x, &router, 2, RouteMode::Eval, None).unwrap();
        let w = &gates[0].weights;
        assert!((w[0] - 0.66524096).abs() < 1e-7);
        assert!((w[1] - 0.24472847).abs() < 1e-7);
        assert_eq!(w[2], 0.0);
        assert_eq!(gates[0].selected, vec![0, 1]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let router = random_router(6, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![7, 6], (0..42).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let a = route(&x, &router, 2, RouteMode::Eval, None).unwrap();
        let b = route(&x, &router, 2, RouteMode::Eval, None).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            assert_eq!(ga.weights, gb.weights);
        }
    }

    #[test]
    fn train_mode_reproducible_with_fixed_seed() {
        let router = random_router(6, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(vec![7, 6], (0..42).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let a = route(&x, &router, 2, RouteMode::Train, Some(99)).unwrap();
        let b = route(&x, &router, 2, RouteMode::Train, Some(99)).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            for (wa, wb) in ga.weights.iter().zip(&gb.weights) {
                assert_eq!(wa.to_bits(), wb.to_bits());
            }
        }
        let c = route(&x, &router, 2, RouteMode::Train, Some(100)).unwrap();
        assert!(a.iter().zip(&c).any(|(ga, gc)| ga.weights != gc.weights));
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let router = random_router(4, 3, 6);
        let x = Tensor::zeros(vec![1, 4]);
        assert!(route(&x, &router, 4, RouteMode::Eval, None).is_err());
        assert!(route(&x, &router, 0, RouteMode::Eval, None).is_err());
    }

    #[test]
    fn train_mode_without_seed_is_error() {
        let router = random_router(4, 3, 6);
        let x = Tensor::zeros(vec![1, 4]);
        assert!(route(&x, &router, 2, RouteMode::Train, None).is_err());
    }

    #[test]
    fn tie_break_prefers_lowest_index() {
        assert_eq!(tie_break(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(tie_break(&[0.0, 5.0, 5.0], 1), vec![1]);
        assert_eq!(tie_break(&[3.0, 3.0, 3.0, 3.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn zeroed_positions_get_zero_gradient() {
        let router = random_router(5, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(vec![3, 5], (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mut g = Graph::new();
        let xid = g.constant(x);
        let wg = g.leaf(router.w_g.clone(), true);
        let wn = g.constant(router.w_noise.clone());
        let out = route_in_graph(&mut g, xid, wg, wn, 2, None, false, None);
        // scalar function of the gates
        let sq = g.mul(out.gates, out.gates);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        // probs grad must be exactly zero at masked positions
        let gate_vals = g.value(out.gates).clone();
        let probs_grad = g.grad(out.probs).unwrap();
        for (i, &gv) in gate_vals.data.iter().enumerate() {
            if gv == 0.0 {
                assert_eq!(probs_grad[i], 0.0, "masked position {i} leaked gradient");
            }
        }
    }

    #[test]
    fn gate_gradient_wrt_wg_matches_finite_differences_eval() {
        let d = 4;
        let n = 3;
        let router = random_router(d, n, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let eval = |wg: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xid = g.constant(x.clone());
            let wgid = g.constant(Tensor::new(vec![d, n], wg.to_vec()));
            let wnid = g.constant(router.w_noise.clone());
            let out = route_in_graph(&mut g, xid, wgid, wnid, 2, None, false, None);
            let sq = g.mul(out.gates, out.gates);
            let l = g.sum_all(sq);
            g.value(l).data[0]
        };
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let wgid = g.leaf(router.w_g.clone(), true);
        let wnid = g.constant(router.w_noise.clone());
        let out = route_in_graph(&mut g, xid, wgid, wnid, 2, None, false, None);
        let sq = g.mul(out.gates, out.gates);
        let l = g.sum_all(sq);
        g.backward(l).unwrap();
        let analytic = g.grad(wgid).unwrap().to_vec();
        let fd = finite_diff_grad(eval, &router.w_g.data, 1e-5);
        for (a, f) in analytic.iter().zip(&fd) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            assert!(rel < 1e-5, "router grad mismatch: {a} vs {f}");
        }
    }

    #[test]
    fn renormalized_gates_sum_to_one() {
        let router = random_router(4, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mut g = Graph::new();
        let xid = g.constant(x);
        let wg = g.constant(router.w_g.clone());
        let wn = g.constant(router.w_noise.clone());
        let out = route_in_graph(&mut g, xid, wg, wn, 2, None, true, None);
        for t in 0..3 {
            let s: f64 = g.value(out.gates).row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn gate_invariants_hold(seed in 0u64..10_000, k in 1usize..5, tokens in 1usize..8) {
            let n = 5;
            let router = random_router(6, n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x = Tensor::new(vec![tokens, 6],
                (0..tokens * 6).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let mode = if seed % 2 == 0 { RouteMode::Eval } else { RouteMode::Train };
            let gates = route(&x, &router, k, mode, Some(seed)).unwrap();
            for gv in gates {
                let nz = gv.weights.iter().filter(|&&w| w > 0.0).count();
                prop_assert!(nz <= k);
                prop_assert!(gv.weights.iter().all(|&w| w >= 0.0));
                let s: f64 = gv.weights.iter().sum();
                prop_assert!(s <= 1.0 + 1e-12);
                let from_weights: Vec<usize> =
                    (0..n).filter(|&j| gv.weights[j] > 0.0).collect();
                prop_assert_eq!(from_weights, gv.selected);
            }
        }
    }
}
