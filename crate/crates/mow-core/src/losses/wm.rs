//! World-model losses: per-task breakdown with free-bits KL terms, the
//! expert balance penalty, and cross-entropy helpers shared with the agent.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::perceptual::CategoricalDist;
use crate::temporal::RouterDecision;

/// Free-bits floor (1 nat) for the dynamics/representation KL terms.
pub const FREE_BITS: f64 = 1.0;

/// Per-task loss components; `total` combines them with β1 = 0.5 (dynamics)
/// and β2 = 0.1 (representation). Each component is the mean over batch and
/// time of the per-step loss, with the KL floor applied per step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLossBreakdown {
    pub rec: f64,
    pub rew: f64,
    pub con: f64,
    pub task: f64,
    pub dyn_: f64,
    pub rep: f64,
    pub total: f64,
}

impl TaskLossBreakdown {
    pub fn combine(rec: f64, rew: f64, con: f64, task: f64, dyn_: f64, rep: f64, beta_dyn: f64, beta_rep: f64) -> Self {
        Self {
            rec,
            rew,
            con,
            task,
            dyn_,
            rep,
            total: rec + rew + con + task + beta_dyn * dyn_ + beta_rep * rep,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("rec", self.rec),
            ("rew", self.rew),
            ("con", self.con),
            ("task", self.task),
            ("dyn", self.dyn_),
            ("rep", self.rep),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(name.to_string()));
            }
        }
        Ok(())
    }
}

/// KL(p || q) between stacks of categorical rows, summed over every row
/// (the convention: one sample's KL is the sum over its 32 variables).
/// Zero-probability rows follow the 0·ln 0 = 0 convention.
pub fn kl_categorical(p: &Tensor, q: &Tensor) -> f64 {
    assert_eq!(p.shape(), q.shape(), "kl shapes");
    let mut kl = 0.0;
    for (pi, qi) in p.data().iter().zip(q.data()) {
        if *pi > 0.0 {
            kl += pi * (pi.ln() - qi.ln());
        }
    }
    kl
}

/// Free-bits dynamics/representation pair for a single sample:
/// `dyn = max(1, KL[sg(post) || prior])`, `rep = max(1, KL[post || sg(prior)])`.
/// Stop-gradients only matter on the tape path; the values coincide.
pub fn kl_dyn_rep(posterior: &CategoricalDist, prior: &CategoricalDist) -> (f64, f64) {
    kl_dyn_rep_probs(posterior.probs(), prior.probs())
}

/// Same as [`kl_dyn_rep`] on raw probability rows of any `[.., classes]`
/// shape (e.g. a single two-class variable in the unit tests).
pub fn kl_dyn_rep_probs(posterior: &Tensor, prior: &Tensor) -> (f64, f64) {
    let kl = kl_categorical(posterior, prior);
    (kl.max(FREE_BITS), kl.max(FREE_BITS))
}

/// Tape form over aligned logits `[b, t, 32, 32]`: per-(b,t) KL summed over
/// the 32 variables, floored at one nat, then averaged. Returns
/// `(dyn, rep)` scalars with the stop-gradients placed as written.
pub fn kl_dyn_rep_vars(tape: &mut Tape, post_logits: Var, prior_logits: Var) -> (Var, Var) {
    let shape = tape.shape(post_logits).to_vec();
    assert_eq!(shape, tape.shape(prior_logits), "kl logit shapes");
    let (b, t, vars) = (shape[0], shape[1], shape[2]);

    let p = tape.softmax(post_logits);
    let lp = tape.log_softmax(post_logits);
    let lq = tape.log_softmax(prior_logits);

    // dyn: sg(post), live prior
    let p_sg = tape.stop_grad(p);
    let lp_sg = tape.stop_grad(lp);
    let diff_dyn = tape.sub(lp_sg, lq);
    let terms_dyn = tape.mul(p_sg, diff_dyn);
    // rep: live post, sg(prior)
    let lq_sg = tape.stop_grad(lq);
    let diff_rep = tape.sub(lp, lq_sg);
    let terms_rep = tape.mul(p, diff_rep);

    let reduce = |tape: &mut Tape, terms: Var| -> Var {
        let per_class = tape.sum_last(terms); // [b,t,32]
        let flat = tape.reshape(per_class, &[b * t, vars]);
        let per_step = tape.sum_last(flat); // [b*t]
        let floored = tape.max_scalar(per_step, FREE_BITS);
        tape.mean(floored)
    };
    (reduce(tape, terms_dyn), reduce(tape, terms_rep))
}

/// Mean cross-entropy of `logits [n, c]` against fixed target rows
/// (two-hot or one-hot), −mean_n Σ_c target·log_softmax(logits).
pub fn cross_entropy_mean(tape: &mut Tape, logits: Var, targets: Tensor) -> Var {
    assert_eq!(tape.shape(logits), targets.shape(), "ce shapes");
    let lsm = tape.log_softmax(logits);
    let tv = tape.constant(targets);
    let prod = tape.mul(tv, lsm);
    let per_row = tape.sum_last(prod);
    let mean = tape.mean(per_row);
    tape.scale(mean, -1.0)
}

/// Balance penalty over one step's routing: ‖Σ_k n_k·W_k − (K·n_k/N_e)·1‖².
/// `W_k` are the support-renormalized weights, so each task contributes total
/// mass n_k and the uniform target is the exact balanced fixed point.
pub fn balance_loss(decisions: &[RouterDecision], num_experts: usize) -> f64 {
    assert!(!decisions.is_empty());
    let n_k = decisions[0].active.len();
    let target = decisions.len() as f64 * n_k as f64 / num_experts as f64;
    let mut sums = vec![0.0; num_experts];
    for d in decisions {
        assert_eq!(d.active.len(), n_k, "uneven activation counts");
        assert_eq!(d.weights.len(), num_experts);
        for e in 0..num_experts {
            sums[e] += n_k as f64 * d.weights[e];
        }
    }
    sums.iter().map(|s| (s - target) * (s - target)).sum()
}

/// Tape form: `weight_vars[k]` is task k's `[1, N_e]` support-weight vector
/// already scaled by n_k (see `route_weights_var`).
pub fn balance_loss_var(
    tape: &mut Tape,
    weight_vars: &[Var],
    n_active: usize,
    num_experts: usize,
) -> Var {
    assert!(!weight_vars.is_empty());
    let mut total = weight_vars[0];
    for &w in &weight_vars[1..] {
        total = tape.add(total, w);
    }
    let target = weight_vars.len() as f64 * n_active as f64 / num_experts as f64;
    let t = tape.constant(Tensor::full(&[1, num_experts], target));
    let diff = tape.sub(total, t);
    let sq = tape.mul(diff, diff);
    tape.sum(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LATENT_CLASSES;
    use crate::numcore::ParamStore;

    #[test]
    fn identical_distributions_floor_to_one() {
        let d = CategoricalDist::uniform(&[]);
        let (dyn_, rep) = kl_dyn_rep(&d, &d);
        assert_eq!(dyn_, 1.0);
        assert_eq!(rep, 1.0);
    }

    #[test]
    fn two_class_reference_values() {
        // p=[1,0], q=[0.5,0.5]: KL = ln 2, floored to 1
        let p = Tensor::new(&[1, 2], vec![1.0, 0.0]);
        let q = Tensor::new(&[1, 2], vec![0.5, 0.5]);
        assert!((kl_categorical(&p, &q) - std::f64::consts::LN_2).abs() < 1e-12);
        let (dyn_, rep) = kl_dyn_rep_probs(&p, &q);
        assert_eq!(dyn_, 1.0);
        assert_eq!(rep, 1.0);

        // p=[0.9,0.1], q=[0.1,0.9]: KL = 0.8 ln 9 ≈ 1.7578, unfloored
        let p = Tensor::new(&[1, 2], vec![0.9, 0.1]);
        let q = Tensor::new(&[1, 2], vec![0.1, 0.9]);
        let expect = 0.8 * 9.0f64.ln();
        assert!((kl_categorical(&p, &q) - expect).abs() < 1e-12);
        let (dyn_, _) = kl_dyn_rep_probs(&p, &q);
        assert!((dyn_ - expect).abs() < 1e-12);
    }

    #[test]
    fn tape_kl_matches_plain_and_respects_stop_gradients() {
        use crate::rng::seeded;
        let mut rng = seeded(50, "kl");
        let post = Tensor::gaussian(&[1, 1, 32, LATENT_CLASSES], 0.5, &mut rng);
        let prior = Tensor::gaussian(&[1, 1, 32, LATENT_CLASSES], 0.5, &mut rng);

        let mut tape = Tape::new();
        let pv = tape.constant(post.clone());
        let qv = tape.constant(prior.clone());
        let (dyn_v, rep_v) = kl_dyn_rep_vars(&mut tape, pv, qv);

        let p_dist = CategoricalDist::from_logits(&post.reshape(&[32, LATENT_CLASSES]));
        let q_dist = CategoricalDist::from_logits(&prior.reshape(&[32, LATENT_CLASSES]));
        let (dyn_plain, rep_plain) = kl_dyn_rep(&p_dist, &q_dist);
        assert!((tape.value(dyn_v).item() - dyn_plain).abs() < 1e-9);
        assert!((tape.value(rep_v).item() - rep_plain).abs() < 1e-9);

        // dyn routes gradient to the prior only, rep to the posterior only
        let g_dyn_post = tape.grad_of(dyn_v, pv);
        let g_dyn_prior = tape.grad_of(dyn_v, qv).unwrap();
        assert!(g_dyn_post.is_none() || g_dyn_post.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g_dyn_prior.data().iter().any(|&v| v != 0.0));
        let g_rep_post = tape.grad_of(rep_v, pv).unwrap();
        let g_rep_prior = tape.grad_of(rep_v, qv);
        assert!(g_rep_post.data().iter().any(|&v| v != 0.0));
        assert!(g_rep_prior.is_none() || g_rep_prior.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn floored_kl_has_zero_gradient() {
        let mut tape = Tape::new();
        // identical logits -> KL 0 -> floored
        let logits = Tensor::zeros(&[1, 1, 32, LATENT_CLASSES]);
        let pv = tape.constant(logits.clone());
        let qv = tape.constant(logits);
        let (dyn_v, _) = kl_dyn_rep_vars(&mut tape, pv, qv);
        assert_eq!(tape.value(dyn_v).item(), 1.0);
        let g = tape.grad_of(dyn_v, qv);
        assert!(g.is_none() || g.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_reward_head_costs_ln_buckets() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[4, 255]));
        let target = {
            let mut t = vec![0.0; 4 * 255];
            for r in 0..4 {
                t[r * 255 + 10] = 0.25;
                t[r * 255 + 11] = 0.75;
            }
            Tensor::new(&[4, 255], t)
        };
        let ce = cross_entropy_mean(&mut tape, logits, target);
        assert!((tape.value(ce).item() - (255.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_has_zero_cross_entropy() {
        let mut tape = Tape::new();
        // near-certain logits on the target class
        let mut l = vec![0.0; 2 * 5];
        l[0] = 200.0;
        l[5 + 3] = 200.0;
        let logits = tape.constant(Tensor::new(&[2, 5], l));
        let mut t = vec![0.0; 2 * 5];
        t[0] = 1.0;
        t[5 + 3] = 1.0;
        let ce = cross_entropy_mean(&mut tape, logits, Tensor::new(&[2, 5], t));
        assert!(tape.value(ce).item().abs() < 1e-9);
    }

    #[test]
    fn degenerate_routing_balance_is_exactly_two() {
        // two tasks, two experts, one active each, both on expert 0
        let d = RouterDecision::from_scores(vec![0.9, 0.1], 1);
        assert_eq!(d.weights, vec![1.0, 0.0]);
        let loss = balance_loss(&[d.clone(), d], 2);
        assert_eq!(loss, 2.0);
    }

    #[test]
    fn balanced_routing_has_zero_loss() {
        let d0 = RouterDecision::from_scores(vec![0.9, 0.1], 1);
        let d1 = RouterDecision::from_scores(vec![0.1, 0.9], 1);
        assert_eq!(balance_loss(&[d0, d1], 2), 0.0);
    }

    #[test]
    fn balance_gradient_pushes_toward_uniform_usage() {
        // two tasks, two experts, both active (n_k = 2): over-used expert 0
        // must receive a negative pressure on its affinity, expert 1 positive.
        use crate::rng::seeded;
        use crate::temporal::router::{init_router_params, route, route_weights_var};
        let mut store = ParamStore::new();
        let mut rng = seeded(51, "bal");
        init_router_params(&mut store, 8, 2, &mut rng);
        // bias the router strongly toward expert 0
        store.get_mut("router.l2.b").data_mut()[0] = 3.0;

        let e0 = Tensor::gaussian(&[8], 1.0, &mut rng);
        let e1 = Tensor::gaussian(&[8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut wvars = Vec::new();
        for e in [&e0, &e1] {
            let ev = tape.constant(e.reshape(&[1, 8]));
            let d = route(&store, e, 2, 1.0);
            wvars.push(route_weights_var(&mut tape, &store, ev, &d.active_sorted(), 1.0, 2));
        }
        let loss = balance_loss_var(&mut tape, &wvars, 2, 2);
        assert!(tape.value(loss).item() > 0.0);
        let grads = tape.grads(loss);
        let gb = grads.get("router.l2.b").unwrap();
        assert!(gb.data()[0] > 0.0, "over-used expert bias should be pushed down");
        assert!(gb.data()[1] < 0.0, "under-used expert bias should be pushed up");
    }

    #[test]
    fn breakdown_combines_with_the_fixed_betas() {
        let b = TaskLossBreakdown::combine(1.0, 2.0, 0.5, 0.25, 1.5, 1.0, 0.5, 0.1);
        assert!((b.total - (1.0 + 2.0 + 0.5 + 0.25 + 0.75 + 0.1)).abs() < 1e-12);
        b.check_finite().unwrap();
        let bad = TaskLossBreakdown {
            rew: f64::NAN,
            ..Default::default()
        };
        let err = bad.check_finite().unwrap_err();
        assert!(err.to_string().contains("rew"));
    }
}
