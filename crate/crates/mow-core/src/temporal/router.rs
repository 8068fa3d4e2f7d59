//! Task-level TopK routing over the expert Transformers, plus the softmax
//! temperature schedule.

use crate::numcore::{ops, ParamStore, Tape, Tensor, Var};
use crate::rng::MowRng;

/// Hidden width of the router MLP.
const ROUTER_HIDDEN: usize = 64;

/// Routing outcome for one task: full affinity scores, the activated expert
/// indices (largest scores first, ties toward the lower index), and the
/// weight vector renormalized to sum to one on the support and zero off it.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    pub scores: Vec<f64>,
    pub active: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RouterDecision {
    /// Build from raw affinity scores (already softmaxed).
    pub fn from_scores(scores: Vec<f64>, n_active: usize) -> Self {
        assert!(n_active >= 1 && n_active <= scores.len());
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let active: Vec<usize> = order[..n_active].to_vec();
        let mass: f64 = active.iter().map(|&j| scores[j]).sum();
        let mut weights = vec![0.0; scores.len()];
        for &j in &active {
            weights[j] = scores[j] / mass;
        }
        Self {
            scores,
            active,
            weights,
        }
    }

    /// Activated indices sorted ascending (the order experts are concatenated
    /// in downstream).
    pub fn active_sorted(&self) -> Vec<usize> {
        let mut a = self.active.clone();
        a.sort_unstable();
        a
    }
}

pub fn init_router_params(
    store: &mut ParamStore,
    embed_dim: usize,
    num_experts: usize,
    rng: &mut MowRng,
) {
    let b1 = 1.0 / (embed_dim as f64).sqrt();
    store.insert("router.l1.w", Tensor::uniform(&[embed_dim, ROUTER_HIDDEN], b1, rng));
    store.insert("router.l1.b", Tensor::uniform(&[ROUTER_HIDDEN], b1, rng));
    let b2 = 1.0 / (ROUTER_HIDDEN as f64).sqrt();
    store.insert("router.l2.w", Tensor::uniform(&[ROUTER_HIDDEN, num_experts], b2, rng));
    store.insert("router.l2.b", Tensor::uniform(&[num_experts], b2, rng));
}

fn router_logits(store: &ParamStore, embed_row: &Tensor) -> Tensor {
    let e = embed_row.numel();
    let x = embed_row.reshape(&[1, e]);
    let mut h = ops::matmul(&x, store.get("router.l1.w"));
    ops::add_bias_rows(h.data_mut(), store.get("router.l1.b").data());
    let h = h.map(|v| v.max(0.0));
    let mut out = ops::matmul(&h, store.get("router.l2.w"));
    ops::add_bias_rows(out.data_mut(), store.get("router.l2.b").data());
    out
}

/// S = softmax(MLP(e)/τ), TopK by score, weights renormalized on the support.
pub fn route(
    store: &ParamStore,
    embed_row: &Tensor,
    n_active: usize,
    temperature: f64,
) -> RouterDecision {
    assert!(temperature >= 1.0, "temperature must be >= 1");
    let logits = router_logits(store, embed_row).map(|v| v / temperature);
    let scores = ops::softmax_rows(&logits, logits.numel());
    RouterDecision::from_scores(scores.data().to_vec(), n_active)
}

/// Differentiable support weights for the balance loss: softmax(MLP(e)/τ)
/// masked to the activated set, renormalized to sum to one, scaled by n_k.
/// Shape `[1, num_experts]`.
pub fn route_weights_var(
    tape: &mut Tape,
    store: &ParamStore,
    embed: Var,
    active: &[usize],
    temperature: f64,
    num_experts: usize,
) -> Var {
    let w1 = tape.param(store, "router.l1.w");
    let b1 = tape.param(store, "router.l1.b");
    let w2 = tape.param(store, "router.l2.w");
    let b2 = tape.param(store, "router.l2.b");
    let h = tape.matmul(embed, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.relu(h);
    let logits = tape.matmul(h, w2);
    let logits = tape.add_bias(logits, b2);
    let scaled = tape.scale(logits, 1.0 / temperature);
    let scores = tape.softmax(scaled);
    let mask = {
        let mut m = vec![0.0; num_experts];
        for &j in active {
            m[j] = 1.0;
        }
        tape.constant(Tensor::new(&[1, num_experts], m))
    };
    let masked = tape.mul(scores, mask);
    let renorm = tape.normalize_sum(masked);
    tape.scale(renorm, active.len() as f64)
}

/// τ(step) = 1 + (τ0-1)·max(0, 1 - step/(0.5·total)); linear decay from τ0
/// to 1 over the first half of training.
pub fn anneal_temperature(step: usize, total_steps: usize, tau0: f64) -> f64 {
    assert!(step <= total_steps, "step beyond schedule");
    if total_steps == 0 {
        return 1.0;
    }
    let half = 0.5 * total_steps as f64;
    let frac = (1.0 - step as f64 / half).max(0.0);
    1.0 + (tau0 - 1.0) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn reference_decision_from_scores() {
        // logits [2,1,0] at tau=1, top-2: softmax = [0.6652, 0.2447, 0.0900]
        let logits = Tensor::new(&[1, 3], vec![2.0, 1.0, 0.0]);
        let scores = ops::softmax_rows(&logits, 3);
        let d = RouterDecision::from_scores(scores.data().to_vec(), 2);
        assert_eq!(d.active, vec![0, 1]);
        assert!((d.weights[0] - 0.7310585786300049).abs() < 1e-9);
        assert!((d.weights[1] - 0.2689414213699951).abs() < 1e-9);
        assert_eq!(d.weights[2], 0.0);
        assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_support_keeps_softmax_weights() {
        let scores = vec![0.5, 0.2, 0.3];
        let d = RouterDecision::from_scores(scores.clone(), 3);
        assert_eq!(d.active, vec![0, 2, 1]);
        for (w, s) in d.weights.iter().zip(&scores) {
            assert!((w - s).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let d = RouterDecision::from_scores(vec![0.25; 4], 2);
        assert_eq!(d.active, vec![0, 1]);
        assert!((d.weights[0] - 0.5).abs() < 1e-12);
        assert!((d.weights[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn topk_is_invariant_under_temperature() {
        let mut store = ParamStore::new();
        let mut rng = seeded(3, "router");
        init_router_params(&mut store, 16, 6, &mut rng);
        let e = Tensor::gaussian(&[16], 1.0, &mut rng);
        let d1 = route(&store, &e, 3, 1.0);
        for tau in [1.0, 2.5, 5.0, 10.0] {
            let d = route(&store, &e, 3, tau);
            assert_eq!(d.active, d1.active, "tau {tau} changed the TopK");
            assert_eq!(d.weights.iter().filter(|&&w| w > 0.0).count(), 3);
            assert!(
                (d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6,
                "support weights must renormalize"
            );
        }
    }

    #[test]
    fn annealing_schedule_endpoints() {
        assert_eq!(anneal_temperature(0, 1000, 5.0), 5.0);
        assert_eq!(anneal_temperature(500, 1000, 5.0), 1.0);
        assert_eq!(anneal_temperature(1000, 1000, 5.0), 1.0);
        let mut last = f64::INFINITY;
        for step in (0..=1000).step_by(50) {
            let tau = anneal_temperature(step, 1000, 5.0);
            assert!(tau <= last, "temperature increased at step {step}");
            assert!(tau >= 1.0);
            last = tau;
        }
    }

    #[test]
    fn tape_weights_match_plain_route() {
        let mut store = ParamStore::new();
        let mut rng = seeded(4, "routervar");
        init_router_params(&mut store, 8, 4, &mut rng);
        let e = Tensor::gaussian(&[8], 1.0, &mut rng);
        let d = route(&store, &e, 2, 2.0);

        let mut tape = Tape::new();
        let ev = tape.constant(e.reshape(&[1, 8]));
        let w = route_weights_var(&mut tape, &store, ev, &d.active, 2.0, 4);
        let wv = tape.value(w);
        for j in 0..4 {
            let expect = d.weights[j] * 2.0; // scaled by n_k
            assert!((wv.data()[j] - expect).abs() < 1e-9, "expert {j}");
        }
    }
}
