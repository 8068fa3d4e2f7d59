//! Symlog transform and the two-hot bucket codec shared by the reward head
//! and the critic.

use crate::config::NUM_BUCKETS;
use crate::numcore::Tensor;

/// `sign(x) * ln(|x| + 1)`.
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Exact inverse of [`symlog`].
pub fn symexp(y: f64) -> f64 {
    y.signum() * (y.abs().exp() - 1.0)
}

/// 255 bucket centers, uniform in symlog space over `[-20, 20]`.
#[derive(Clone, Debug)]
pub struct BucketGrid {
    centers: Vec<f64>,
}

impl Default for BucketGrid {
    fn default() -> Self {
        Self::new(NUM_BUCKETS, 20.0)
    }
}

impl BucketGrid {
    pub fn new(count: usize, limit: f64) -> Self {
        assert!(count >= 2 && count % 2 == 1, "grid wants an odd bucket count");
        let centers = (0..count)
            .map(|i| -limit + 2.0 * limit * i as f64 / (count - 1) as f64)
            .collect();
        Self { centers }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Split unit mass between the two buckets bracketing `symlog(v)`.
    pub fn encode(&self, v: f64) -> Vec<f64> {
        let n = self.centers.len();
        let lo = self.centers[0];
        let hi = self.centers[n - 1];
        let y = symlog(v).clamp(lo, hi);
        let step = (hi - lo) / (n - 1) as f64;
        let pos = (y - lo) / step;
        let i0 = (pos.floor() as usize).min(n - 2);
        let w1 = (pos - i0 as f64).clamp(0.0, 1.0);
        let mut out = vec![0.0; n];
        out[i0] = 1.0 - w1;
        out[i0 + 1] += w1;
        out
    }

    /// `symexp` of the weighted bucket sum.
    pub fn decode(&self, weights: &[f64]) -> f64 {
        assert_eq!(weights.len(), self.centers.len());
        let y: f64 = weights.iter().zip(&self.centers).map(|(w, c)| w * c).sum();
        symexp(y)
    }

    /// Decode a batch of softmax rows `[n, buckets]` to scalars.
    pub fn decode_rows(&self, probs: &Tensor) -> Vec<f64> {
        let n = self.centers.len();
        probs.data().chunks(n).map(|row| self.decode(row)).collect()
    }

    /// Two-hot targets for a batch of scalars, `[n, buckets]`.
    pub fn encode_rows(&self, values: &[f64]) -> Tensor {
        let n = self.centers.len();
        let mut data = Vec::with_capacity(values.len() * n);
        for &v in values {
            data.extend(self.encode(v));
        }
        Tensor::new(&[values.len(), n], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symlog_fixed_points() {
        assert_eq!(symlog(0.0), 0.0);
        assert!((symlog(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-12);
        for x in [-5.0, 0.3, 1000.0] {
            assert!((symexp(symlog(x)) - x).abs() < 1e-10, "roundtrip {x}");
        }
    }

    #[test]
    fn grid_is_increasing_and_symmetric() {
        let g = BucketGrid::default();
        assert_eq!(g.len(), 255);
        for w in g.centers().windows(2) {
            assert!(w[0] < w[1]);
        }
        for i in 0..g.len() {
            assert!((g.centers()[i] + g.centers()[g.len() - 1 - i]).abs() < 1e-12);
        }
        assert_eq!(g.centers()[127], 0.0);
    }

    #[test]
    fn exact_center_is_one_hot() {
        let g = BucketGrid::default();
        let v = symexp(g.centers()[100]);
        let w = g.encode(v);
        assert!((w[100] - 1.0).abs() < 1e-9);
        assert!(w.iter().enumerate().all(|(i, &x)| i == 100 || x.abs() < 1e-9));
    }

    #[test]
    fn midpoint_splits_evenly() {
        let g = BucketGrid::default();
        let y = 0.5 * (g.centers()[10] + g.centers()[11]);
        let w = g.encode(symexp(y));
        assert!((w[10] - 0.5).abs() < 1e-9);
        assert!((w[11] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn thousand_random_roundtrips() {
        use rand::Rng as _;
        let g = BucketGrid::default();
        let mut rng = crate::rng::seeded(0, "twohot");
        for _ in 0..1000 {
            // values within the representable range
            let y: f64 = rng.gen_range(-19.9..19.9);
            let v = symexp(y);
            let dec = g.decode(&g.encode(v));
            let rel = (dec - v).abs() / v.abs().max(1.0);
            assert!(rel < 1e-6, "v {v} decoded {dec}");
        }
    }

    #[test]
    fn out_of_range_values_clamp() {
        let g = BucketGrid::default();
        let w = g.encode(1e12);
        assert!((w[254] - 1.0).abs() < 1e-9);
    }
}
