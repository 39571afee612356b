//! Per-pixel depth prediction (a two-layer MLP) and its sparse L1 supervision.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::depth_to_unit;
use crate::error::{shape_check, Result};
use crate::geometry::BevGrid;
use crate::params::Parameters;

/// `logit = relu(f W1 + b1) . w2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: Array1<f64>,
}

impl DepthHeadParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((channels, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: Array1::zeros(1),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, hidden);
        let n1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        p.w1.mapv_inplace(|_| n1.sample(rng));
        p.w2.mapv_inplace(|_| n2.sample(rng));
        p
    }

    pub fn channels(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }
}

impl Parameters for DepthHeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("depth.w1", self.w1.as_slice().unwrap());
        f("depth.b1", self.b1.as_slice().unwrap());
        f("depth.w2", self.w2.as_slice().unwrap());
        f("depth.b2", self.b2.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("depth.w1", self.w1.as_slice_mut().unwrap());
        f("depth.b1", self.b1.as_slice_mut().unwrap());
        f("depth.w2", self.w2.as_slice_mut().unwrap());
        f("depth.b2", self.b2.as_slice_mut().unwrap());
    }
}

/// Saved activations of one depth-head evaluation.
#[derive(Debug, Clone)]
pub struct DepthForward {
    pub pre_activation: Array2<f64>,
    pub logits: Array1<f64>,
    /// The depth map after `depth_to_unit`, in `(0, 1)`.
    pub unit: Array1<f64>,
}

/// Runs the head on `features` (pixels x channels).
pub fn predict_depth(features: &Array2<f64>, params: &DepthHeadParams) -> Result<DepthForward> {
    shape_check(features.ncols() == params.channels(), || {
        format!("depth head expects {} channels, got {}", params.channels(), features.ncols())
    })?;
    let pre_activation = features.dot(&params.w1) + &params.b1;
    let hidden = pre_activation.mapv(|v| v.max(0.0));
    let logits = hidden.dot(&params.w2) + params.b2[0];
    let unit = logits.mapv(depth_to_unit);
    Ok(DepthForward { pre_activation, logits, unit })
}

/// Backpropagates `d_logits` through the head. Returns the parameter
/// gradient and the gradient with respect to the input features.
pub fn depth_head_backward(
    features: &Array2<f64>,
    params: &DepthHeadParams,
    fwd: &DepthForward,
    d_logits: &Array1<f64>,
) -> Result<(DepthHeadParams, Array2<f64>)> {
    shape_check(d_logits.len() == features.nrows(), || {
        format!("depth gradient has {} entries for {} pixels", d_logits.len(), features.nrows())
    })?;
    let hidden = fwd.pre_activation.mapv(|v| v.max(0.0));
    let mut grads = DepthHeadParams::zeros(params.channels(), params.hidden());
    grads.w2 = hidden.t().dot(d_logits);
    grads.b2[0] = d_logits.sum();
    let mut d_pre = Array2::zeros(fwd.pre_activation.raw_dim());
    for ((mut row, pre), &g) in d_pre.axis_iter_mut(Axis(0)).zip(fwd.pre_activation.axis_iter(Axis(0))).zip(d_logits) {
        for ((d, &p), &w) in row.iter_mut().zip(pre).zip(&params.w2) {
            if p > 0.0 {
                *d = g * w;
            }
        }
    }
    grads.w1 = features.t().dot(&d_pre);
    grads.b1 = d_pre.sum_axis(Axis(0));
    let d_features = d_pre.dot(&params.w1.t());
    Ok((grads, d_features))
}

/// Gradient through `depth_to_unit`: `d_logit = d_unit * u (1 - u)`.
pub fn unit_to_logit_grad(unit: &Array1<f64>, d_unit: &Array1<f64>) -> Array1<f64> {
    unit.iter().zip(d_unit).map(|(&u, &g)| g * u * (1.0 - u)).collect()
}

/// Sparse depth targets for one camera: meters plus a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDepthLabels {
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SparseDepthLabels {
    pub fn empty(pixels: usize) -> Self {
        Self { target: vec![0.0; pixels], mask: vec![false; pixels] }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone)]
pub struct DepthLoss {
    pub value: f64,
    pub d_logits: Array1<f64>,
}

/// Mean absolute error between `unit` and `target / d_max` over labelled
/// pixels, with its gradient with respect to the depth logits.
pub fn depth_loss(unit: &Array1<f64>, labels: &SparseDepthLabels, grid: &BevGrid) -> Result<DepthLoss> {
    shape_check(unit.len() == labels.mask.len() && labels.target.len() == labels.mask.len(), || {
        format!("depth prediction has {} pixels, labels {}", unit.len(), labels.mask.len())
    })?;
    let n = labels.valid_count();
    let mut d_logits = Array1::zeros(unit.len());
    if n == 0 {
        return Ok(DepthLoss { value: 0.0, d_logits });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for (i, (&u, (&t, &m))) in unit.iter().zip(labels.target.iter().zip(&labels.mask)).enumerate() {
        if !m {
            continue;
        }
        let diff = u - t / grid.d_max;
        value += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_logits[i] = sign * inv * u * (1.0 - u);
    }
    Ok(DepthLoss { value: value * inv, d_logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_network_predicts_half() {
        let p = DepthHeadParams::zeros(4, 4);
        let fwd = predict_depth(&Array2::zeros((9, 4)), &p).unwrap();
        assert!(fwd.logits.iter().all(|&l| l == 0.0));
        assert!(fwd.unit.iter().all(|&u| u == 0.5));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let p = DepthHeadParams::zeros(4, 4);
        assert!(predict_depth(&Array2::zeros((2, 3)), &p).is_err());
    }

    #[test]
    fn pixels_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DepthHeadParams::random(5, 5, &mut rng);
        let f = random_features(&mut rng, 7, 5);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let shuffled = Array2::from_shape_fn((7, 5), |(i, j)| f[[perm[i], j]]);
        let a = predict_depth(&f, &p).unwrap();
        let b = predict_depth(&shuffled, &p).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(b.logits[i], a.logits[src]);
        }
    }

    #[test]
    fn matches_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DepthHeadParams::random(6, 6, &mut rng);
        let f = random_features(&mut rng, 10, 6);
        let fwd = predict_depth(&f, &p).unwrap();
        for i in 0..10 {
            let mut logit = p.b2[0];
            for h in 0..6 {
                let mut z = p.b1[h];
                for c in 0..6 {
                    z += f[[i, c]] * p.w1[[c, h]];
                }
                logit += z.max(0.0) * p.w2[h];
            }
            assert!((fwd.logits[i] - logit).abs() < 1e-12);
            assert!((fwd.unit[i] - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let grid = BevGrid::default();
        let unit = Array1::from(vec![0.2, 0.5, 0.9]);
        let labels = SparseDepthLabels {
            target: vec![0.2 * grid.d_max, 0.0, 0.9 * grid.d_max],
            mask: vec![true, false, true],
        };
        let loss = depth_loss(&unit, &labels, &grid).unwrap();
        assert!(loss.value.abs() < 1e-15);

        let empty = depth_loss(&unit, &SparseDepthLabels::empty(3), &grid).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.d_logits.iter().all(|&g| g == 0.0));

        let one = SparseDepthLabels { target: vec![0.75 * grid.d_max], mask: vec![true] };
        let loss = depth_loss(&Array1::from(vec![0.5]), &one, &grid).unwrap();
        assert!((loss.value - 0.25).abs() < 1e-12);
        assert!(loss.d_logits[0] < 0.0);
        // Sign agrees with a finite difference on the logit.
        let h = 1e-6;
        let up = depth_loss(&Array1::from(vec![depth_to_unit(h)]), &one, &grid).unwrap().value;
        let down = depth_loss(&Array1::from(vec![depth_to_unit(-h)]), &one, &grid).unwrap().value;
        let fd = (up - down) / (2.0 * h);
        assert!(fd < 0.0 && (fd - loss.d_logits[0]).abs() < 1e-6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = BevGrid::default();
        for _ in 0..20 {
            let p = DepthHeadParams::random(4, 4, &mut rng);
            let f = random_features(&mut rng, 6, 4);
            let labels = SparseDepthLabels {
                target: (0..6).map(|_| rng.random::<f64>() * grid.d_max).collect(),
                mask: (0..6).map(|_| rng.random::<bool>()).collect(),
            };
            let objective = |p: &DepthHeadParams, f: &Array2<f64>| {
                let fwd = predict_depth(f, p).unwrap();
                depth_loss(&fwd.unit, &labels, &grid).unwrap().value
            };
            let fwd = predict_depth(&f, &p).unwrap();
            let loss = depth_loss(&fwd.unit, &labels, &grid).unwrap();
            let (grads, d_features) = depth_head_backward(&f, &p, &fwd, &loss.d_logits).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for j in 0..4 {
                    let mut hi = p.clone();
                    hi.w1[[i, j]] += h;
                    let mut lo = p.clone();
                    lo.w1[[i, j]] -= h;
                    let fd = (objective(&hi, &f) - objective(&lo, &f)) / (2.0 * h);
                    assert!((fd - grads.w1[[i, j]]).abs() <= 1e-6 + 1e-4 * fd.abs());
                }
            }
            for i in 0..6 {
                let mut hi = f.clone();
                hi[[i, 1]] += h;
                let mut lo = f.clone();
                lo[[i, 1]] -= h;
                let fd = (objective(&p, &hi) - objective(&p, &lo)) / (2.0 * h);
                assert!((fd - d_features[[i, 1]]).abs() <= 1e-6 + 1e-4 * fd.abs());
            }
        }
    }
}
