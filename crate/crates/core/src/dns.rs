//! Depth-aware negative suppression: positives at object centers, negatives
//! along the same object rays at wrong depths, and the auxiliary BCE loss
//! over a separate classification head.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    da_sca_forward_with, da_sca_vjp, AttentionConfig, BevQuery, DaScaGrads, DaScaParams, DaScaState, ImageFeatureMap,
    QueryGeometry,
};
use crate::encoding::depth_to_unit;
use crate::error::{shape_check, Error, Result};
use crate::geometry::{bev_cell_of, object_ray, BevGrid, CameraModel};
use crate::params::Parameters;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Attempts per negative before giving up on it.
const MAX_REJECTIONS: usize = 256;

/// Affine map from a BEV feature to per-class logits, read through a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsHeadParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClsHeadParams {
    pub fn zeros(channels: usize, classes: usize) -> Self {
        Self { weight: Array2::zeros((channels, classes)), bias: Array1::zeros(classes) }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).unwrap();
        let mut p = Self::zeros(channels, classes);
        p.weight.mapv_inplace(|_| normal.sample(rng));
        p
    }

    pub fn channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        shape_check(f.len() == self.channels(), || {
            format!("classifier expects {} channels, got {}", self.channels(), f.len())
        })?;
        let mut out = self.bias.to_vec();
        for (&x, row) in f.iter().zip(self.weight.axis_iter(Axis(0))) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        Ok(out)
    }
}

impl Parameters for ClsHeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("dns.weight", self.weight.as_slice().unwrap());
        f("dns.bias", self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("dns.weight", self.weight.as_slice_mut().unwrap());
        f("dns.bias", self.bias.as_slice_mut().unwrap());
    }
}

/// Independent per-class probabilities `sigmoid(f W + b)`.
pub fn cls_head(f: &[f64], params: &ClsHeadParams) -> Result<Vec<f64>> {
    Ok(params.logits(f)?.into_iter().map(depth_to_unit).collect())
}

/// Binary cross-entropy on a clamped probability.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -target * p.ln() - (1.0 - target) * (1.0 - p).ln()
}

/// Derivative of `bce(sigmoid(z), target)` with respect to `z`; zero where
/// the clamp is active.
pub fn bce_logit_grad(p: f64, target: f64) -> f64 {
    if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
        0.0
    } else {
        p - target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeScheme {
    /// Along the object ray, at wrong depths.
    #[default]
    DepthWise,
    /// Uniformly over the BEV plane.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnsSamplingConfig {
    pub positives: usize,
    pub negatives: usize,
    /// Total span of the positive jitter, as a fraction of a cell.
    pub jitter: f64,
    pub scheme: NegativeScheme,
}

impl Default for DnsSamplingConfig {
    fn default() -> Self {
        Self { positives: 3, negatives: 3, jitter: 0.5, scheme: NegativeScheme::DepthWise }
    }
}

/// A ground-truth object as seen by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DnsTarget {
    pub center: (f64, f64),
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedObject {
    pub class: usize,
    pub positives: Vec<(f64, f64)>,
    /// Position and, for depth-wise negatives, the ray parameter.
    pub negatives: Vec<((f64, f64), Option<f64>)>,
}

/// Sample positions for every usable object.
#[derive(Debug, Clone, PartialEq)]
pub struct DnsPlan {
    pub objects: Vec<PlannedObject>,
    /// Objects skipped because their center is at the ray origin.
    pub skipped_degenerate: usize,
}

impl DnsPlan {
    /// All positions, per object positives first, in loss order.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.objects
            .iter()
            .flat_map(|o| o.positives.iter().copied().chain(o.negatives.iter().map(|n| n.0)))
            .collect()
    }
}

/// Draws positive and negative positions for `targets`.
///
/// The first positive sits exactly on the center; further positives are
/// jittered inside the object's cell neighborhood. Negatives that would land
/// in the same cell as the object center are redrawn.
pub fn plan_dns_samples<R: Rng + ?Sized>(
    targets: &[DnsTarget],
    cfg: &DnsSamplingConfig,
    grid: &BevGrid,
    rng: &mut R,
) -> Result<DnsPlan> {
    let mut objects = Vec::with_capacity(targets.len());
    let mut skipped_degenerate = 0;
    let half_span = cfg.jitter * grid.cell_size() / 2.0;
    let inside = grid.extent * (1.0 - 1e-9);
    for t in targets {
        let ray = match object_ray(t.center) {
            Ok(r) => r,
            Err(Error::DegenerateRay) => {
                skipped_degenerate += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let home = bev_cell_of(t.center, grid)?;
        let positives = (0..cfg.positives.max(1))
            .map(|i| {
                if i == 0 || half_span == 0.0 {
                    t.center
                } else {
                    let jx = (rng.random::<f64>() * 2.0 - 1.0) * half_span;
                    let jy = (rng.random::<f64>() * 2.0 - 1.0) * half_span;
                    ((t.center.0 + jx).clamp(-inside, inside), (t.center.1 + jy).clamp(-inside, inside))
                }
            })
            .collect();
        let range = ray.negative_range(grid);
        let mut negatives = Vec::with_capacity(cfg.negatives);
        for _ in 0..cfg.negatives {
            for _ in 0..MAX_REJECTIONS {
                let (pos, lambda) = match cfg.scheme {
                    NegativeScheme::DepthWise => {
                        let lambda = range.sample(rng);
                        (ray.at(lambda), Some(lambda))
                    }
                    NegativeScheme::Random => {
                        let x = (rng.random::<f64>() * 2.0 - 1.0) * inside;
                        let y = (rng.random::<f64>() * 2.0 - 1.0) * inside;
                        ((x, y), None)
                    }
                };
                match bev_cell_of(pos, grid) {
                    Ok(cell) if cell != home => {
                        negatives.push((pos, lambda));
                        break;
                    }
                    _ => {}
                }
            }
        }
        objects.push(PlannedObject { class: t.class, positives, negatives });
    }
    Ok(DnsPlan { objects, skipped_degenerate })
}

/// Something that can produce a BEV feature at arbitrary BEV positions.
pub trait BevFeatureSource {
    fn channels(&self) -> usize;
    /// One row per position.
    fn features_at(&self, positions: &[(f64, f64)]) -> Result<Array2<f64>>;
}

/// A dense BEV feature map, one row per cell in row-major order, read by
/// nearest-cell lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBevMap {
    pub grid: BevGrid,
    pub features: Array2<f64>,
}

impl DenseBevMap {
    pub fn new(grid: BevGrid, features: Array2<f64>) -> Result<Self> {
        shape_check(features.nrows() == grid.num_cells(), || {
            format!("{} rows for {} BEV cells", features.nrows(), grid.num_cells())
        })?;
        Ok(Self { grid, features })
    }

    pub fn cell_of(&self, xy: (f64, f64)) -> Result<usize> {
        let (r, c) = bev_cell_of(xy, &self.grid)?;
        Ok(self.grid.cell_index(r, c))
    }
}

impl BevFeatureSource for DenseBevMap {
    fn channels(&self) -> usize {
        self.features.ncols()
    }

    fn features_at(&self, positions: &[(f64, f64)]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((positions.len(), self.channels()));
        for (i, &p) in positions.iter().enumerate() {
            out.row_mut(i).assign(&self.features.row(self.cell_of(p)?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnsSample {
    pub position: (f64, f64),
    pub lambda: Option<f64>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnsObjectSamples {
    pub class: usize,
    pub positives: Vec<DnsSample>,
    pub negatives: Vec<DnsSample>,
}

/// Sampled features for every object, ready for [`dns_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct DnsSampleSet {
    pub objects: Vec<DnsObjectSamples>,
    pub skipped_degenerate: usize,
}

impl DnsSampleSet {
    pub fn len(&self) -> usize {
        self.objects.iter().map(|o| o.positives.len() + o.negatives.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions in loss order.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.objects
            .iter()
            .flat_map(|o| o.positives.iter().chain(&o.negatives).map(|s| s.position))
            .collect()
    }

    /// Builds the sample set by reading `plan` from `source`.
    pub fn gather(plan: &DnsPlan, source: &dyn BevFeatureSource) -> Result<Self> {
        Ok(Self::from_rows(plan, &source.features_at(&plan.positions())?))
    }

    /// Pairs `plan` with features already read for its positions, in order.
    pub fn from_rows(plan: &DnsPlan, feats: &Array2<f64>) -> Self {
        let mut rows = feats.axis_iter(Axis(0));
        let mut take = |position, lambda| DnsSample { position, lambda, feature: rows.next().unwrap().to_vec() };
        let objects = plan
            .objects
            .iter()
            .map(|o| DnsObjectSamples {
                class: o.class,
                positives: o.positives.iter().map(|&p| take(p, Some(1.0))).collect(),
                negatives: o.negatives.iter().map(|&(p, l)| take(p, l)).collect(),
            })
            .collect();
        Self { objects, skipped_degenerate: plan.skipped_degenerate }
    }
}

/// Plans positions for `targets` and reads their features from `source`.
pub fn sample_dns_features<R: Rng + ?Sized>(
    source: &dyn BevFeatureSource,
    targets: &[DnsTarget],
    cfg: &DnsSamplingConfig,
    grid: &BevGrid,
    rng: &mut R,
) -> Result<DnsSampleSet> {
    let plan = plan_dns_samples(targets, cfg, grid, rng)?;
    DnsSampleSet::gather(&plan, source)
}

#[derive(Debug, Clone)]
pub struct DnsLoss {
    pub value: f64,
    pub grads: ClsHeadParams,
    /// Gradient with respect to each sampled feature, in loss order.
    pub d_features: Array2<f64>,
}

/// Sum over objects of the per-class BCE of every positive against its
/// one-hot class, plus the per-class BCE of every negative against zero.
pub fn dns_loss(samples: &DnsSampleSet, params: &ClsHeadParams) -> Result<DnsLoss> {
    let classes = params.classes();
    let mut grads = ClsHeadParams::zeros(params.channels(), classes);
    let mut d_features = Array2::zeros((samples.len(), params.channels()));
    let mut value = 0.0;
    let mut row = 0;
    for obj in &samples.objects {
        if obj.class >= classes {
            return Err(Error::ShapeMismatch(format!("class {} with {classes} classes", obj.class)));
        }
        let labelled = obj
            .positives
            .iter()
            .map(|s| (s, Some(obj.class)))
            .chain(obj.negatives.iter().map(|s| (s, None)));
        for (s, class) in labelled {
            let probs = cls_head(&s.feature, params)?;
            let mut d_logits = vec![0.0; classes];
            for (c, (&p, d)) in probs.iter().zip(d_logits.iter_mut()).enumerate() {
                let t = if class == Some(c) { 1.0 } else { 0.0 };
                value += bce(p, t);
                *d = bce_logit_grad(p, t);
            }
            for (i, &x) in s.feature.iter().enumerate() {
                let mut g = grads.weight.row_mut(i);
                for (gw, &d) in g.iter_mut().zip(&d_logits) {
                    *gw += x * d;
                }
                d_features[[row, i]] = params.weight.row(i).iter().zip(&d_logits).map(|(w, d)| w * d).sum();
            }
            for (gb, &d) in grads.bias.iter_mut().zip(&d_logits) {
                *gb += d;
            }
            row += 1;
        }
    }
    Ok(DnsLoss { value, grads, d_features })
}

/// A pseudo BEV query: the shared learnable embedding placed at `xy`.
pub fn make_pseudo_bev_query(
    xy: (f64, f64),
    embedding: &[f64],
    pillar_heights: &[f64],
    grid: &BevGrid,
) -> Result<BevQuery> {
    BevQuery::new(embedding.to_vec(), xy, pillar_heights.to_vec(), grid)
}

/// Reads BEV features by running pseudo queries through a DA-SCA layer, for
/// detectors without a dense BEV map.
pub struct PseudoQuerySource<'a> {
    pub embedding: &'a [f64],
    pub pillar_heights: &'a [f64],
    pub maps: &'a [ImageFeatureMap],
    pub cams: &'a [CameraModel],
    pub grid: &'a BevGrid,
    pub params: &'a DaScaParams,
    pub cfg: &'a AttentionConfig,
}

/// Forward state of a pseudo-query read, kept for the backward pass.
pub struct PseudoQueryState {
    pub geometry: QueryGeometry,
    pub state: DaScaState,
}

/// Gradients flowing out of a pseudo-query read.
pub struct PseudoQueryGrads {
    pub d_embedding: Vec<f64>,
    pub attention: DaScaGrads,
}

impl PseudoQuerySource<'_> {
    pub fn forward(&self, positions: &[(f64, f64)]) -> Result<PseudoQueryState> {
        let queries = positions
            .iter()
            .map(|&p| make_pseudo_bev_query(p, self.embedding, self.pillar_heights, self.grid))
            .collect::<Result<Vec<_>>>()?;
        let geometry = QueryGeometry::build(&queries, self.cams, self.grid, &self.cfg.encoder);
        let c = self.embedding.len();
        let contents = Array2::from_shape_fn((queries.len(), c), |(_, j)| self.embedding[j]);
        let state = da_sca_forward_with(&contents, &geometry, self.maps, self.params, self.cfg)?;
        Ok(PseudoQueryState { geometry, state })
    }

    /// Backpropagates feature gradients to the shared embedding and the layer.
    pub fn backward(&self, fwd: &PseudoQueryState, d_features: &Array2<f64>) -> Result<PseudoQueryGrads> {
        let attention = da_sca_vjp(d_features, &fwd.state, &fwd.geometry, self.maps, self.params, self.cfg)?;
        let d_embedding = attention.d_contents.sum_axis(Axis(0)).to_vec();
        Ok(PseudoQueryGrads { d_embedding, attention })
    }
}

impl BevFeatureSource for PseudoQuerySource<'_> {
    fn channels(&self) -> usize {
        self.embedding.len()
    }

    fn features_at(&self, positions: &[(f64, f64)]) -> Result<Array2<f64>> {
        Ok(self.forward(positions)?.state.output.features)
    }
}
