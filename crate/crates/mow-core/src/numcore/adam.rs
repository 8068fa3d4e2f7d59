//! Adam optimizer and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::param::{GradMap, ParamStore};
use crate::numcore::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Snapshot for checkpointing: sorted `(name, m, v)` triples.
    pub fn entries(&self) -> Vec<(String, Tensor, Tensor)> {
        self.m
            .iter()
            .map(|(k, m)| (k.clone(), m.clone(), self.v[k].clone()))
            .collect()
    }

    pub fn restore(entries: Vec<(String, Tensor, Tensor)>, t: u64) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, mt, vt) in entries {
            m.insert(k.clone(), mt);
            v.insert(k, vt);
        }
        Self { m, v, t }
    }

    /// Deep-copy the moments of `src` under `dst` (used when replicating
    /// cluster modules so optimizer state moves with the parameters).
    pub fn copy_prefix(&mut self, src: &str, dst: &str) {
        let names: Vec<String> = self
            .m
            .keys()
            .filter(|k| k.starts_with(src))
            .cloned()
            .collect();
        for name in names {
            let renamed = format!("{dst}{}", &name[src.len()..]);
            let mt = self.m[&name].clone();
            let vt = self.v[&name].clone();
            self.m.insert(renamed.clone(), mt);
            self.v.insert(renamed, vt);
        }
    }
}

/// One Adam update with bias correction (β = 0.9/0.999). Rejects non-finite
/// gradients before touching any parameter, so the store stays finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    assert!(lr > 0.0, "adam lr must be positive");
    assert!(eps > 0.0, "adam eps must be positive");
    if let Some(name) = grads.non_finite_entry() {
        return Err(Error::NonFiniteGrad(name.to_string()));
    }
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for (name, g) in grads.iter() {
        assert!(
            params.is_trainable(name),
            "gradient for non-trainable parameter `{name}`"
        );
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        assert_eq!(m.shape(), g.shape(), "adam moment shape for `{name}`");
        let md = m.data_mut();
        let vd = v.data_mut();
        let p = params.get_mut(name);
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
            vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; otherwise leave them unchanged. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = vals.len();
        s.insert(name, Tensor::new(&[n], vals));
        s
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // w=1, g=1, lr=0.1: bias-corrected ratio is 1, so w' ≈ 0.9.
        let mut store = store_with("w", vec![1.0]);
        let mut grads = GradMap::new();
        grads.accumulate("w", Tensor::new(&[1], vec![1.0]));
        let mut st = AdamState::new();
        adam_step(&mut store, &grads, &mut st, 0.1, 1e-8).unwrap();
        let w = store.get("w").data()[0];
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged_and_decay_moments() {
        let mut store = store_with("w", vec![2.0]);
        let mut st = AdamState::new();
        let mut g1 = GradMap::new();
        g1.accumulate("w", Tensor::new(&[1], vec![1.0]));
        adam_step(&mut store, &g1, &mut st, 1e-4, 1e-8).unwrap();
        let w_after_one = store.get("w").data()[0];
        let m_before = st.moments("w").unwrap().0.data()[0];

        let mut g0 = GradMap::new();
        g0.accumulate("w", Tensor::new(&[1], vec![0.0]));
        adam_step(&mut store, &g0, &mut st, 1e-4, 1e-8).unwrap();
        let m_after = st.moments("w").unwrap().0.data()[0];
        assert!((m_after - 0.9 * m_before).abs() < 1e-15);
        // the decayed first moment still nudges w, but the direction follows it
        assert!(store.get("w").data()[0] < w_after_one);

        // with both moments exactly zero nothing moves
        let mut store2 = store_with("w", vec![2.0]);
        let mut st2 = AdamState::new();
        adam_step(&mut store2, &g0, &mut st2, 1e-4, 1e-8).unwrap();
        assert_eq!(store2.get("w").data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_name() {
        let mut store = store_with("layer.w", vec![1.0]);
        let mut grads = GradMap::new();
        grads.accumulate("layer.w", Tensor::new(&[1], vec![f64::NAN]));
        let mut st = AdamState::new();
        let err = adam_step(&mut store, &grads, &mut st, 0.1, 1e-8).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
        // parameter untouched, step counter unchanged
        assert_eq!(store.get("layer.w").data()[0], 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = store_with("w", vec![1.0, -0.5, 2.0]);
            let mut st = AdamState::new();
            for i in 0..10 {
                let mut g = GradMap::new();
                g.accumulate("w", Tensor::new(&[3], vec![0.1 * i as f64, -0.2, 0.3]));
                adam_step(&mut store, &g, &mut st, 1e-3, 1e-8).unwrap();
            }
            store.get("w").data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = GradMap::new();
        grads.accumulate("g", Tensor::new(&[2], vec![3.0, 4.0]));
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = grads.get("g").unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-12);
        assert!((g.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_is_idempotent_and_noop_below_threshold() {
        let mut grads = GradMap::new();
        grads.accumulate("g", Tensor::new(&[2], vec![3.0, 4.0]));
        clip_grad_norm(&mut grads, 1.0);
        let once = grads.get("g").unwrap().clone();
        clip_grad_norm(&mut grads, 1.0);
        assert_eq!(&once, grads.get("g").unwrap());

        let mut small = GradMap::new();
        small.accumulate("g", Tensor::new(&[2], vec![0.3, 0.4]));
        clip_grad_norm(&mut small, 1000.0);
        assert_eq!(small.get("g").unwrap().data(), &[0.3, 0.4]);
    }
}
