//! Harmonious task weighting: per-task scales σ_k = exp(ρ_k) learned jointly
//! with the model through Σ_k L_k/σ_k + ln(1+σ_k).

use crate::numcore::{ParamStore, Tape, Tensor, Var};

/// Parameter name of the per-task log-scales ρ.
pub const RHO_PARAM: &str = "harmony.rho";

/// Per-task log-parameters; σ_k = exp(ρ_k) is positive by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmoniousState {
    rho: Vec<f64>,
}

impl HarmoniousState {
    /// σ_k = 1 at initialization.
    pub fn new(num_tasks: usize) -> Self {
        Self {
            rho: vec![0.0; num_tasks],
        }
    }

    pub fn from_rho(rho: Vec<f64>) -> Self {
        Self { rho }
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r.exp()).collect()
    }

    pub fn install(&self, store: &mut ParamStore) {
        store.insert(RHO_PARAM, Tensor::new(&[self.rho.len()], self.rho.clone()));
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            rho: store.get(RHO_PARAM).data().to_vec(),
        }
    }
}

/// Σ_k L_k/σ_k + ln(1+σ_k), plain evaluation.
pub fn harmonize_value(losses: &[f64], sigmas: &[f64]) -> f64 {
    assert_eq!(losses.len(), sigmas.len());
    losses
        .iter()
        .zip(sigmas)
        .map(|(l, s)| l / s + (1.0 + s).ln())
        .sum()
}

/// Gradient of the harmonized objective in ρ_k for a fixed loss value
/// (1-D oracle for the fixed-point tests).
pub fn harmonize_rho_grad(loss: f64, rho: f64) -> f64 {
    let sigma = rho.exp();
    -loss / sigma + sigma / (1.0 + sigma)
}

/// Closed-form optimum σ* = (L + sqrt(L² + 4L)) / 2.
pub fn sigma_star(mean_loss: f64) -> f64 {
    assert!(mean_loss >= 0.0, "mean loss must be non-negative");
    0.5 * (mean_loss + (mean_loss * mean_loss + 4.0 * mean_loss).sqrt())
}

/// The rectified scale E[L/σ*] = 2 / (1 + sqrt(1 + 4/L)).
pub fn rectified_scale(mean_loss: f64) -> f64 {
    2.0 / (1.0 + (1.0 + 4.0 / mean_loss).sqrt())
}

/// Tape form: `task_losses[k]` are scalar nodes, `rho` is the bound `[K]`
/// parameter. Gradients flow both into the model (through L_k/σ_k) and ρ.
/// Implemented as Σ L_k·exp(-ρ_k) + softplus(ρ_k), which is the same
/// function with σ = exp(ρ).
pub fn harmonize_var(tape: &mut Tape, task_losses: &[Var], rho: Var) -> Var {
    assert_eq!(tape.shape(rho), [task_losses.len()]);
    let mut total: Option<Var> = None;
    for (k, &loss_k) in task_losses.iter().enumerate() {
        let rho_k = tape.slice_rows(rho, k, 1);
        let neg = tape.scale(rho_k, -1.0);
        let inv_sigma = tape.exp(neg);
        let weighted = tape.mul(loss_k, inv_sigma);
        let reg = tape.softplus(rho_k);
        let term = tape.add(weighted, reg);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("at least one task")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_star_known_points() {
        assert_eq!(sigma_star(0.0), 0.0);
        // L = 4/3: sqrt(16/9 + 16/3) = 8/3, sigma* = 2 exactly
        assert!((sigma_star(4.0 / 3.0) - 2.0).abs() < 1e-12);
        let s12 = sigma_star(12.0);
        assert!((s12 - 12.928203230275509).abs() < 1e-9);
        assert!((12.0 / s12 - rectified_scale(12.0)).abs() < 1e-12);
    }

    #[test]
    fn sigma_star_satisfies_stationarity() {
        for l in [0.1, 0.5, 4.0 / 3.0, 2.0, 12.0, 100.0] {
            let s = sigma_star(l);
            let grad = -l / (s * s) + 1.0 / (1.0 + s);
            assert!(grad.abs() < 1e-10, "L={l}: stationarity residual {grad}");
        }
    }

    #[test]
    fn rectified_scale_is_below_one() {
        for l in [0.01, 1.0, 4.0 / 3.0, 50.0] {
            let s = rectified_scale(l);
            assert!(s < 1.0 && s > 0.0);
        }
        assert!((rectified_scale(4.0 / 3.0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_descent_on_rho_reaches_sigma_star() {
        // the 1-D optimization oracle: plain GD with fixed loss converges
        // within 1% in <= 5000 steps
        for l in [0.5, 4.0 / 3.0, 12.0] {
            let mut rho: f64 = 0.0;
            for _ in 0..5000 {
                rho -= 0.05 * harmonize_rho_grad(l, rho);
            }
            let sigma = rho.exp();
            let target = sigma_star(l);
            assert!(
                (sigma - target).abs() / target < 0.01,
                "L={l}: sigma {sigma} vs {target}"
            );
        }
    }

    #[test]
    fn harmonize_is_permutation_invariant() {
        let losses = [1.0, 2.0, 3.0];
        let sigmas = [0.5, 1.5, 2.5];
        let a = harmonize_value(&losses, &sigmas);
        let b = harmonize_value(&[3.0, 1.0, 2.0], &[2.5, 0.5, 1.5]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tape_harmonize_matches_plain_value_and_gradient() {
        let mut store = ParamStore::new();
        let state = HarmoniousState::from_rho(vec![0.3, -0.7]);
        state.install(&mut store);
        let losses = [2.0, 5.0];

        let mut tape = Tape::new();
        let rho = tape.param(&store, RHO_PARAM);
        let l0 = tape.scalar(losses[0]);
        let l1 = tape.scalar(losses[1]);
        let h = harmonize_var(&mut tape, &[l0, l1], rho);
        let value = tape.value(h).item();
        assert!((value - harmonize_value(&losses, &state.sigmas())).abs() < 1e-12);

        let grads = tape.grads(h);
        let g = grads.get(RHO_PARAM).unwrap();
        for k in 0..2 {
            let expect = harmonize_rho_grad(losses[k], state.rho()[k]);
            assert!((g.data()[k] - expect).abs() < 1e-12);
        }
    }
}
