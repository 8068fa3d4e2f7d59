//! Finite-difference verification of analytic gradients — the gradient
//! contract every differentiable operation in the crate is held to.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::param::{GradMap, ParamStore};
use crate::rng::MowRng;

/// A deterministic scalar loss over a parameter store, with its analytic
/// gradient. Implementations must be pure: same store, same loss.
pub trait LossFn {
    fn loss(&self, params: &ParamStore) -> Result<f64>;
    fn grad(&self, params: &ParamStore) -> Result<GradMap>;
}

impl<L, G> LossFn for (L, G)
where
    L: Fn(&ParamStore) -> Result<f64>,
    G: Fn(&ParamStore) -> Result<GradMap>,
{
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        (self.0)(params)
    }
    fn grad(&self, params: &ParamStore) -> Result<GradMap> {
        (self.1)(params)
    }
}

/// Compare the analytic gradient against central finite differences on
/// `sample_count` randomly chosen trainable coordinates; returns the maximum
/// relative error. `eps` must lie in `[1e-6, 1e-3]`; the step is scaled by
/// the coordinate's magnitude. Relative error uses an absolute floor of 1e-6
/// so exactly-zero gradients (clipped/floored paths) compare cleanly.
pub fn finite_diff_check(
    f: &dyn LossFn,
    params: &ParamStore,
    eps: f64,
    sample_count: usize,
    rng: &mut MowRng,
) -> Result<f64> {
    assert!((1e-6..=1e-3).contains(&eps), "eps must be in [1e-6, 1e-3]");

    let l0 = f.loss(params)?;
    let l0_again = f.loss(params)?;
    if l0 != l0_again {
        return Err(Error::NonDeterministicLoss(l0, l0_again));
    }
    let analytic = f.grad(params)?;

    // flat list of (name, coordinate) over trainable tensors
    let names = params.trainable_names();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (ni, name) in names.iter().enumerate() {
        for i in 0..params.get(name).numel() {
            coords.push((ni, i));
        }
    }
    assert!(!coords.is_empty(), "no trainable coordinates");

    let mut max_rel = 0.0f64;
    for _ in 0..sample_count {
        let (ni, i) = coords[rng.gen_range(0..coords.len())];
        let name = &names[ni];
        let base = params.get(name).data()[i];
        let h = eps * (1.0 + base.abs());

        let mut plus = params.clone();
        plus.get_mut(name).data_mut()[i] = base + h;
        let lp = f.loss(&plus)?;

        let mut minus = params.clone();
        minus.get_mut(name).data_mut()[i] = base - h;
        let lm = f.loss(&minus)?;

        let fd = (lp - lm) / (2.0 * h);
        let an = analytic.get(name).map(|g| g.data()[i]).unwrap_or(0.0);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
