//! Depth-aware spatial cross-attention from BEV queries to image features.
//!
//! Each BEV query owns a pillar of 3D reference points. A pillar point that
//! projects into a camera gets a positional query from the sine encoding of
//! its `(u, v, d)`; every pixel of that camera becomes a key whose positional
//! part encodes `(u, v)` and the predicted depth. The keys of all cameras that
//! see the point share one softmax. Per-point outputs are averaged over the
//! visible points of the pillar.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{normalize_uvd, NormalizedUvd, PeMode, PosEncoding, SineEncoder};
use crate::error::{shape_check, Error, Result};
use crate::geometry::{ego_to_cam, BevGrid, CameraModel, EgoPoint};
use crate::params::Parameters;

/// Features and predicted depth of one camera, pixels in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    height: usize,
    width: usize,
    features: Array2<f64>,
    predicted_depth: Array1<f64>,
}

impl ImageFeatureMap {
    pub fn new(height: usize, width: usize, features: Array2<f64>, predicted_depth: Array1<f64>) -> Result<Self> {
        let pixels = height * width;
        shape_check(features.nrows() == pixels && predicted_depth.len() == pixels, || {
            format!(
                "{height}x{width} map needs {pixels} rows, got {} features and {} depths",
                features.nrows(),
                predicted_depth.len()
            )
        })?;
        if !predicted_depth.iter().all(|d| *d > 0.0 && *d < 1.0) {
            return Err(Error::ShapeMismatch("predicted depth must lie in (0, 1)".into()));
        }
        Ok(Self { height, width, features, predicted_depth })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.features.ncols()
    }
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
    pub fn predicted_depth(&self) -> &Array1<f64> {
        &self.predicted_depth
    }

    /// Normalized pixel-center coordinates of pixel `index` with its depth.
    pub fn pixel_uvd(&self, index: usize) -> NormalizedUvd {
        let (row, col) = (index / self.width, index % self.width);
        NormalizedUvd::new(
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
            self.predicted_depth[index],
        )
    }
}

/// A BEV query: content embedding plus a pillar of reference points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevQuery {
    pub content: Vec<f64>,
    pub ref_xy: (f64, f64),
    pub pillar_heights: Vec<f64>,
}

impl BevQuery {
    pub fn new(content: Vec<f64>, ref_xy: (f64, f64), pillar_heights: Vec<f64>, grid: &BevGrid) -> Result<Self> {
        if !grid.contains(ref_xy.0, ref_xy.1) {
            return Err(Error::OutOfBev { x: ref_xy.0, y: ref_xy.1, extent: grid.extent });
        }
        if pillar_heights.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("pillar heights must be strictly increasing".into()));
        }
        Ok(Self { content, ref_xy, pillar_heights })
    }

    pub fn pillar_points(&self) -> impl Iterator<Item = EgoPoint> + '_ {
        self.pillar_heights.iter().map(|&z| EgoPoint::new(self.ref_xy.0, self.ref_xy.1, z))
    }
}

/// Learnable projections (`channels x channels`, applied as `x W`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaScaParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl DaScaParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            w_q: Array2::zeros((channels, channels)),
            w_k: Array2::zeros((channels, channels)),
            w_v: Array2::zeros((channels, channels)),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).unwrap();
        let mut p = Self::zeros(channels);
        for m in [&mut p.w_q, &mut p.w_k, &mut p.w_v] {
            m.mapv_inplace(|_| normal.sample(rng));
        }
        p
    }

    /// `w_q = w_k = sqrt(gain) I` and `w_v = I`, each plus `N(0, noise^2 / c)`.
    /// Attention then starts out matching positional codes.
    pub fn aligned<R: Rng + ?Sized>(channels: usize, gain: f64, noise: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, noise / (channels as f64).sqrt()).unwrap();
        let mut p = Self::zeros(channels);
        for (m, diag) in [(&mut p.w_q, gain.sqrt()), (&mut p.w_k, gain.sqrt()), (&mut p.w_v, 1.0)] {
            m.mapv_inplace(|_| normal.sample(rng));
            m.diag_mut().mapv_inplace(|x| x + diag);
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }
}

impl Parameters for DaScaParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("attn.w_q", self.w_q.as_slice().unwrap());
        f("attn.w_k", self.w_k.as_slice().unwrap());
        f("attn.w_v", self.w_v.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("attn.w_q", self.w_q.as_slice_mut().unwrap());
        f("attn.w_k", self.w_k.as_slice_mut().unwrap());
        f("attn.w_v", self.w_v.as_slice_mut().unwrap());
    }
}

/// Head count and positional encoder of a DA-SCA layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub heads: usize,
    pub encoder: SineEncoder,
}

impl AttentionConfig {
    pub fn new(heads: usize, encoder: SineEncoder) -> Result<Self> {
        if heads == 0 || !encoder.dim().is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("{} channels cannot be split into {heads} heads", encoder.dim())));
        }
        Ok(Self { heads, encoder })
    }

    pub fn channels(&self) -> usize {
        self.encoder.dim()
    }

    fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// Positional query of every pillar point of `q` in `cam`; `None` marks
/// points that are behind the camera or outside its frustum.
pub fn build_positional_query(
    q: &BevQuery,
    cam: &CameraModel,
    grid: &BevGrid,
    encoder: &SineEncoder,
) -> Vec<Option<PosEncoding>> {
    q.pillar_points()
        .map(|p| {
            let c = ego_to_cam(p, cam).ok()?;
            let n = normalize_uvd(c, cam, grid).ok()?;
            Some(encoder.encode(n))
        })
        .collect()
}

/// Positional keys of every pixel (pixels x channels).
pub fn build_positional_keys(fm: &ImageFeatureMap, encoder: &SineEncoder) -> Array2<f64> {
    let mut keys = Array2::zeros((fm.pixels(), encoder.dim()));
    for (i, mut row) in keys.axis_iter_mut(Axis(0)).enumerate() {
        encoder.encode_into(fm.pixel_uvd(i), row.as_slice_mut().unwrap());
    }
    keys
}

#[derive(Debug, Clone, Copy)]
struct View {
    camera: usize,
    /// Row in that camera's [`CameraRows`].
    row: usize,
}

#[derive(Debug, Clone)]
struct PillarPoint {
    views: Vec<View>,
}

/// Every (query, pillar point) pair seen by one camera, stacked so a layer
/// can process them with matrix products.
#[derive(Debug, Clone)]
struct CameraRows {
    query: Vec<usize>,
    pos_query: Array2<f64>,
}

/// Camera visibility and positional queries of a query set. Depends only on
/// geometry, so it can be reused across steps.
#[derive(Debug, Clone)]
pub struct QueryGeometry {
    points: Vec<Vec<PillarPoint>>,
    rows: Vec<CameraRows>,
    cameras: usize,
}

impl QueryGeometry {
    pub fn build(queries: &[BevQuery], cams: &[CameraModel], grid: &BevGrid, encoder: &SineEncoder) -> Self {
        let per_query: Vec<Vec<Vec<Option<PosEncoding>>>> = queries
            .par_iter()
            .map(|q| cams.iter().map(|cam| build_positional_query(q, cam, grid, encoder)).collect())
            .collect();
        let c = encoder.dim();
        let mut row_query: Vec<Vec<usize>> = vec![Vec::new(); cams.len()];
        let mut row_pos: Vec<Vec<f64>> = vec![Vec::new(); cams.len()];
        let mut points = Vec::with_capacity(queries.len());
        for (qi, (q, per_cam)) in queries.iter().zip(&per_query).enumerate() {
            let mut pillar = Vec::new();
            for k in 0..q.pillar_heights.len() {
                let mut views = Vec::new();
                for (camera, pe) in per_cam.iter().enumerate() {
                    if let Some(pe) = &pe[k] {
                        views.push(View { camera, row: row_query[camera].len() });
                        row_query[camera].push(qi);
                        row_pos[camera].extend_from_slice(&pe.values);
                    }
                }
                if !views.is_empty() {
                    pillar.push(PillarPoint { views });
                }
            }
            points.push(pillar);
        }
        let rows = row_query
            .into_iter()
            .zip(row_pos)
            .map(|(query, pos)| CameraRows {
                pos_query: Array2::from_shape_vec((query.len(), c), pos).expect("row-major positional queries"),
                query,
            })
            .collect();
        Self { points, rows, cameras: cams.len() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of pillar points of query `q` seen by at least one camera.
    pub fn visible_points(&self, q: usize) -> usize {
        self.points[q].len()
    }

    /// Cameras that see pillar point `k` of query `q`.
    pub fn cameras_of(&self, q: usize, k: usize) -> Vec<usize> {
        self.points[q][k].views.iter().map(|v| v.camera).collect()
    }
}

/// Per-camera keys and values for one layer.
#[derive(Debug, Clone)]
pub struct KeyCache {
    key_input: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
}

impl KeyCache {
    pub fn build(fm: &ImageFeatureMap, params: &DaScaParams, encoder: &SineEncoder) -> Self {
        let key_input = fm.features() + &build_positional_keys(fm, encoder);
        let keys = key_input.dot(&params.w_k);
        let values = fm.features().dot(&params.w_v);
        Self { key_input, keys, values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Softmax weights of one pillar point over its keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PointWeights {
    /// Cameras contributing keys, in key order; each contributes all its pixels.
    pub cameras: Vec<usize>,
    /// `heads x keys`, row-major.
    pub weights: Vec<f64>,
}

/// Result of a DA-SCA forward pass.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub features: Array2<f64>,
    /// Per query, per visible pillar point.
    pub weights: Vec<Vec<PointWeights>>,
    /// Queries without a single visible key; their output is zero.
    pub no_visible_keys: Vec<bool>,
}

/// Per-camera intermediates of the stacked rows.
#[derive(Debug, Clone)]
struct SavedCamera {
    query_input: Array2<f64>,
    query: Array2<f64>,
    /// Softmax weights per head, rows x pixels.
    weights: Vec<Array2<f64>>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct DaScaState {
    pub output: AttentionOutput,
    saved: Vec<SavedCamera>,
    caches: Vec<KeyCache>,
}

impl DaScaState {
    pub fn caches(&self) -> &[KeyCache] {
        &self.caches
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_mat(x: &[f64], m: &Array2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; m.ncols()];
    for (&xi, row) in x.iter().zip(m.axis_iter(Axis(0))) {
        if xi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
    out
}

/// Forward pass with precomputed geometry. `contents` holds one row per query.
pub fn da_sca_forward_with(
    contents: &Array2<f64>,
    geometry: &QueryGeometry,
    maps: &[ImageFeatureMap],
    params: &DaScaParams,
    cfg: &AttentionConfig,
) -> Result<DaScaState> {
    let c = cfg.channels();
    shape_check(contents.nrows() == geometry.len() && contents.ncols() == c, || {
        format!("contents {:?} for {} queries of width {c}", contents.dim(), geometry.len())
    })?;
    shape_check(maps.len() == geometry.cameras, || {
        format!("{} feature maps for {} cameras", maps.len(), geometry.cameras)
    })?;
    shape_check(params.channels() == c, || format!("params width {} vs {c}", params.channels()))?;
    for fm in maps {
        shape_check(fm.channels() == c, || format!("feature map has {} channels, expected {c}", fm.channels()))?;
    }
    let caches: Vec<KeyCache> = maps.par_iter().map(|fm| KeyCache::build(fm, params, &cfg.encoder)).collect();
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut saved: Vec<SavedCamera> = geometry
        .rows
        .par_iter()
        .zip(&caches)
        .map(|(rows, cache)| {
            let mut query_input = rows.pos_query.clone();
            for (mut r, &qi) in query_input.axis_iter_mut(Axis(0)).zip(&rows.query) {
                r += &contents.row(qi);
            }
            let query = query_input.dot(&params.w_q);
            let weights = (0..heads)
                .map(|h| {
                    let hs = s![.., h * hd..(h + 1) * hd];
                    query.slice(hs).dot(&cache.keys.slice(hs).t()) * scale
                })
                .collect();
            SavedCamera { query_input, query, weights }
        })
        .collect();

    // Softmax over the keys of every camera that sees a point.
    for points in &geometry.points {
        for point in points {
            for h in 0..heads {
                let mut max = f64::NEG_INFINITY;
                for v in &point.views {
                    max = saved[v.camera].weights[h].row(v.row).iter().fold(max, |m, &x| m.max(x));
                }
                let mut sum = 0.0;
                for v in &point.views {
                    for x in saved[v.camera].weights[h].row_mut(v.row) {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                }
                for v in &point.views {
                    saved[v.camera].weights[h].row_mut(v.row).mapv_inplace(|x| x / sum);
                }
            }
        }
    }

    let per_camera: Vec<Array2<f64>> = saved
        .par_iter()
        .zip(&caches)
        .map(|(sc, cache)| {
            let mut out = Array2::zeros((sc.query.nrows(), c));
            for h in 0..heads {
                let hs = s![.., h * hd..(h + 1) * hd];
                out.slice_mut(hs).assign(&sc.weights[h].dot(&cache.values.slice(hs)));
            }
            out
        })
        .collect();

    let n = geometry.len();
    let mut features = Array2::zeros((n, c));
    let mut weights = Vec::with_capacity(n);
    let mut no_visible_keys = Vec::with_capacity(n);
    for (qi, points) in geometry.points.iter().enumerate() {
        let inv_points = if points.is_empty() { 0.0 } else { 1.0 / points.len() as f64 };
        let mut row = features.row_mut(qi);
        let mut point_weights = Vec::with_capacity(points.len());
        for point in points {
            for v in &point.views {
                row.scaled_add(inv_points, &per_camera[v.camera].row(v.row));
            }
            let mut w = Vec::new();
            for h in 0..heads {
                for v in &point.views {
                    w.extend(saved[v.camera].weights[h].row(v.row).iter());
                }
            }
            point_weights.push(PointWeights { cameras: point.views.iter().map(|v| v.camera).collect(), weights: w });
        }
        no_visible_keys.push(points.is_empty());
        weights.push(point_weights);
    }
    Ok(DaScaState {
        output: AttentionOutput { features, weights, no_visible_keys },
        saved,
        caches,
    })
}

/// Forward pass for an ad-hoc query list.
pub fn da_sca_forward(
    queries: &[BevQuery],
    maps: &[ImageFeatureMap],
    cams: &[CameraModel],
    grid: &BevGrid,
    params: &DaScaParams,
    cfg: &AttentionConfig,
) -> Result<DaScaState> {
    if queries.is_empty() {
        return Err(Error::InvalidConfig("at least one query is required".into()));
    }
    let c = cfg.channels();
    for q in queries {
        shape_check(q.content.len() == c, || format!("query content has {} entries, expected {c}", q.content.len()))?;
    }
    let geometry = QueryGeometry::build(queries, cams, grid, &cfg.encoder);
    let contents = Array2::from_shape_fn((queries.len(), c), |(i, j)| queries[i].content[j]);
    da_sca_forward_with(&contents, &geometry, maps, params, cfg)
}

/// Gradients of a DA-SCA layer.
#[derive(Debug, Clone)]
pub struct DaScaGrads {
    pub params: DaScaParams,
    pub d_contents: Array2<f64>,
    pub d_features: Vec<Array2<f64>>,
    /// With respect to the predicted depth in `(0, 1)`.
    pub d_depth: Vec<Array1<f64>>,
}

/// Vector-Jacobian product of [`da_sca_forward_with`] for upstream gradient
/// `d_out` (queries x channels).
pub fn da_sca_vjp(
    d_out: &Array2<f64>,
    state: &DaScaState,
    geometry: &QueryGeometry,
    maps: &[ImageFeatureMap],
    params: &DaScaParams,
    cfg: &AttentionConfig,
) -> Result<DaScaGrads> {
    let c = cfg.channels();
    let n = geometry.len();
    shape_check(d_out.dim() == (n, c), || format!("upstream gradient {:?}, expected ({n}, {c})", d_out.dim()))?;
    shape_check(
        state.output.features.nrows() == n && maps.len() == state.caches.len() && state.saved.len() == geometry.rows.len(),
        || "state does not match inputs".into(),
    )?;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let inv_points: Vec<f64> =
        geometry.points.iter().map(|p| if p.is_empty() { 0.0 } else { 1.0 / p.len() as f64 }).collect();

    // d(weight) = d_out . value, and its weighted row sums per head.
    let stage: Vec<(Array2<f64>, Vec<Array2<f64>>, Vec<Array1<f64>>)> = geometry
        .rows
        .par_iter()
        .zip(&state.saved)
        .zip(&state.caches)
        .map(|((rows, sc), cache)| {
            let mut d_rows = Array2::zeros((rows.query.len(), c));
            for (mut r, &qi) in d_rows.axis_iter_mut(Axis(0)).zip(&rows.query) {
                r.scaled_add(inv_points[qi], &d_out.row(qi));
            }
            let mut d_weights = Vec::with_capacity(heads);
            let mut row_sums = Vec::with_capacity(heads);
            for h in 0..heads {
                let hs = s![.., h * hd..(h + 1) * hd];
                let dw = d_rows.slice(hs).dot(&cache.values.slice(hs).t());
                row_sums.push((&dw * &sc.weights[h]).sum_axis(Axis(1)));
                d_weights.push(dw);
            }
            (d_rows, d_weights, row_sums)
        })
        .collect();

    // Softmax Jacobian: subtract each point's weighted mean over all its keys.
    let mut means: Vec<Vec<Array1<f64>>> =
        geometry.rows.iter().map(|r| (0..heads).map(|_| Array1::zeros(r.query.len())).collect()).collect();
    for points in &geometry.points {
        for point in points {
            for h in 0..heads {
                let total: f64 = point.views.iter().map(|v| stage[v.camera].2[h][v.row]).sum();
                for v in &point.views {
                    means[v.camera][h][v.row] = total;
                }
            }
        }
    }

    let partials: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> = stage
        .into_par_iter()
        .zip(&state.saved)
        .zip(&state.caches)
        .zip(&means)
        .map(|((((d_rows, d_weights, _), sc), cache), means)| {
            let pixels = cache.keys.nrows();
            let mut d_query = Array2::zeros(sc.query.raw_dim());
            let mut d_keys = Array2::zeros((pixels, c));
            let mut d_values = Array2::zeros((pixels, c));
            for h in 0..heads {
                let hs = s![.., h * hd..(h + 1) * hd];
                let a = &sc.weights[h];
                d_values.slice_mut(hs).assign(&a.t().dot(&d_rows.slice(hs)));
                let mut d_logits = &d_weights[h] - &means[h].view().insert_axis(Axis(1));
                d_logits *= a;
                d_logits *= scale;
                d_query.slice_mut(hs).assign(&d_logits.dot(&cache.keys.slice(hs)));
                d_keys.slice_mut(hs).assign(&d_logits.t().dot(&sc.query.slice(hs)));
            }
            let d_wq = sc.query_input.t().dot(&d_query);
            let d_query_input = d_query.dot(&params.w_q.t());
            (d_wq, d_query_input, d_keys, d_values)
        })
        .collect();

    let mut grads = DaScaParams::zeros(c);
    let mut d_contents = Array2::zeros((n, c));
    let mut d_keys = Vec::with_capacity(maps.len());
    let mut d_values = Vec::with_capacity(maps.len());
    for (rows, (d_wq, d_query_input, dk, dv)) in geometry.rows.iter().zip(partials) {
        grads.w_q += &d_wq;
        for (r, &qi) in d_query_input.axis_iter(Axis(0)).zip(&rows.query) {
            let mut row = d_contents.row_mut(qi);
            row += &r;
        }
        d_keys.push(dk);
        d_values.push(dv);
    }

    let mut d_features = Vec::with_capacity(maps.len());
    let mut d_depth = Vec::with_capacity(maps.len());
    let mut pe_grad = vec![0.0; c];
    for ((fm, cache), (dk, dv)) in maps.iter().zip(&state.caches).zip(d_keys.iter().zip(&d_values)) {
        grads.w_k += &cache.key_input.t().dot(dk);
        grads.w_v += &fm.features().t().dot(dv);
        let d_key_input = dk.dot(&params.w_k.t());
        let mut dd = Array1::zeros(fm.pixels());
        for (pix, row) in d_key_input.axis_iter(Axis(0)).enumerate() {
            cfg.encoder.depth_derivative_into(fm.predicted_depth()[pix], &mut pe_grad);
            dd[pix] = dot(row.as_slice().unwrap(), &pe_grad);
        }
        d_features.push(&d_key_input + &dv.dot(&params.w_v.t()));
        d_depth.push(dd);
    }
    Ok(DaScaGrads { params: grads, d_contents, d_features, d_depth })
}

/// Logit of one key as a query's depth coordinate sweeps, with and without
/// the depth block of the positional encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub sweep: Vec<f64>,
    pub full: Vec<f64>,
    pub uv_only: Vec<f64>,
}

impl DepthProfile {
    pub fn full_variance(&self) -> f64 {
        variance(&self.full)
    }

    pub fn uv_only_variance(&self) -> f64 {
        variance(&self.uv_only)
    }
}

/// Population variance; zero for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
}

/// A single key: raw feature and normalized position with its depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileKey {
    pub feature: Vec<f64>,
    pub uvd: NormalizedUvd,
}

/// Attention logits of `key` for a query at normalized `(un, vn)` as its depth
/// takes each value of `sweep`.
pub fn attention_depth_profile(
    content: &[f64],
    query_uv: (f64, f64),
    sweep: &[f64],
    key: &ProfileKey,
    params: &DaScaParams,
    encoder: &SineEncoder,
) -> Result<DepthProfile> {
    let c = encoder.dim();
    shape_check(content.len() == c && key.feature.len() == c && params.channels() == c, || {
        format!("profile inputs must have width {c}")
    })?;
    let curve = |enc: SineEncoder| -> Vec<f64> {
        let key_in: Vec<f64> = key.feature.iter().zip(enc.encode(key.uvd).values).map(|(a, b)| a + b).collect();
        let key_proj = vec_mat(&key_in, &params.w_k);
        sweep
            .iter()
            .map(|&dn| {
                let pe = enc.encode(NormalizedUvd::new(query_uv.0, query_uv.1, dn));
                let q_in: Vec<f64> = content.iter().zip(pe.values).map(|(a, b)| a + b).collect();
                dot(&vec_mat(&q_in, &params.w_q), &key_proj) / (c as f64).sqrt()
            })
            .collect()
    };
    Ok(DepthProfile {
        sweep: sweep.to_vec(),
        full: curve(encoder.with_mode(PeMode::Uvd)),
        uv_only: curve(encoder.with_mode(PeMode::UvOnly)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{sine_pe, DEFAULT_TEMPERATURE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn enc(dim: usize) -> SineEncoder {
        SineEncoder::new(dim, DEFAULT_TEMPERATURE, PeMode::Uvd).unwrap()
    }

    fn single_pixel_map(feature: Vec<f64>, depth: f64) -> ImageFeatureMap {
        let c = feature.len();
        ImageFeatureMap::new(1, 1, Array2::from_shape_vec((1, c), feature).unwrap(), Array1::from(vec![depth])).unwrap()
    }

    fn eye(c: usize) -> Array2<f64> {
        Array2::eye(c)
    }

    /// Camera at the origin looking along +x with a 2x1 image, so a point on
    /// the x axis lands in the middle of the image.
    fn forward_cam(w: usize, h: usize) -> CameraModel {
        CameraModel::looking_along(0.0, 1.0, 1.0, w, h).unwrap()
    }

    #[test]
    fn positional_query_composition() {
        let grid = BevGrid::default();
        let encoder = enc(12);
        let cam = forward_cam(16, 16);
        let d = grid.d_max / 2.0;
        let q = BevQuery::new(vec![0.0; 12], (d, 0.0), vec![0.0], &grid).unwrap();
        let pe = build_positional_query(&q, &cam, &grid, &encoder);
        let expected = sine_pe(NormalizedUvd::new(0.5, 0.5, 0.5), 12, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(pe[0].as_ref().unwrap(), &expected);

        let behind = BevQuery::new(vec![0.0; 12], (-10.0, 0.0), vec![0.0], &grid).unwrap();
        assert!(build_positional_query(&behind, &cam, &grid, &encoder)[0].is_none());

        // Stepwise composition, bit-exact.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let xy = (2.0 + rng.random::<f64>() * 40.0, rng.random::<f64>() * 20.0 - 10.0);
            let q = BevQuery::new(vec![0.0; 12], xy, vec![-1.0, 0.0, 1.0], &grid).unwrap();
            let got = build_positional_query(&q, &cam, &grid, &encoder);
            for (p, g) in q.pillar_points().zip(got) {
                let want = ego_to_cam(p, &cam)
                    .ok()
                    .and_then(|c| normalize_uvd(c, &cam, &grid).ok())
                    .map(|n| sine_pe(n, 12, DEFAULT_TEMPERATURE).unwrap());
                assert_eq!(g, want);
            }
        }
    }

    #[test]
    fn positional_keys() {
        let encoder = enc(6);
        let fm = single_pixel_map(vec![0.0; 6], 0.5);
        let keys = build_positional_keys(&fm, &encoder);
        let want = sine_pe(NormalizedUvd::new(0.5, 0.5, 0.5), 6, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(keys.row(0).to_vec(), want.values);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w, c) = (3, 5, 8);
        let features = Array2::from_shape_fn((h * w, c), |_| rng.sample::<f64, _>(StandardNormal));
        let depth = Array1::from_shape_fn(h * w, |_| 0.01 + 0.98 * rng.random::<f64>());
        let fm = ImageFeatureMap::new(h, w, features, depth.clone()).unwrap();
        let keys = build_positional_keys(&fm, &enc(c));
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let n = NormalizedUvd::new((col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64, depth[i]);
                assert_eq!(keys.row(i).to_vec(), sine_pe(n, c, DEFAULT_TEMPERATURE).unwrap().values);
            }
        }

        let uniform = ImageFeatureMap::new(2, 2, Array2::zeros((4, c)), Array1::from(vec![0.3; 4])).unwrap();
        let keys = build_positional_keys(&uniform, &enc(c));
        let depth_block = enc(c).depth_block();
        for i in 1..4 {
            assert_eq!(keys.row(i).to_vec()[depth_block.clone()], keys.row(0).to_vec()[depth_block.clone()]);
        }
    }

    fn one_query(c: usize, grid: &BevGrid) -> Vec<BevQuery> {
        vec![BevQuery::new(vec![0.1; c], (10.0, 0.0), vec![0.0], grid).unwrap()]
    }

    #[test]
    fn singleton_softmax_returns_projected_value() {
        let grid = BevGrid::default();
        let c = 6;
        let cfg = AttentionConfig::new(1, enc(c)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = DaScaParams::random(c, &mut rng);
        let feature: Vec<f64> = (0..c).map(|i| i as f64 - 2.0).collect();
        let fm = single_pixel_map(feature.clone(), 0.4);
        let state = da_sca_forward(&one_query(c, &grid), &[fm.clone()], &[forward_cam(1, 1)], &grid, &params, &cfg).unwrap();
        let want = vec_mat(&feature, &params.w_v);
        for (a, b) in state.output.features.row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // Logits cannot matter, so W_q and W_k get no gradient.
        let geometry = QueryGeometry::build(&one_query(c, &grid), &[forward_cam(1, 1)], &grid, &cfg.encoder);
        let d_out = Array2::from_elem((1, c), 1.0);
        let g = da_sca_vjp(&d_out, &state, &geometry, &[fm], &params, &cfg).unwrap();
        assert!(g.params.w_q.iter().all(|v| v.abs() < 1e-15));
        assert!(g.params.w_k.iter().all(|v| v.abs() < 1e-15));
    }

    /// Two pixels with values (1, 2, 0, ..) and (-1, 0, 4, ..); W_k is chosen
    /// so that the keys score `l0` and `l1` against the query.
    fn two_key_case(l0: f64, l1: f64) -> (Array2<f64>, Vec<f64>) {
        let c = 6;
        let grid = BevGrid::default();
        let cfg = AttentionConfig::new(1, enc(c)).unwrap();
        let cam = forward_cam(2, 1);
        let values = [[1.0, 2.0, 0.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 4.0, 0.0, 0.0, 0.0]];
        let features = Array2::from_shape_fn((2, c), |(p, j)| values[p][j]);
        let fm = ImageFeatureMap::new(1, 2, features, Array1::from(vec![0.5, 0.5])).unwrap();
        let key_pe = build_positional_keys(&fm, &cfg.encoder);
        let q = one_query(c, &grid);
        let geometry = QueryGeometry::build(&q, &[cam.clone()], &grid, &cfg.encoder);
        let q_in: Vec<f64> =
            q[0].content.iter().zip(geometry.rows[geometry.points[0][0].views[0].camera].pos_query.row(geometry.points[0][0].views[0].row)).map(|(a, b)| a + b).collect();
        let k0: Vec<f64> = key_pe.row(0).iter().zip(&values[0]).map(|(a, b)| a + b).collect();
        let k1: Vec<f64> = key_pe.row(1).iter().zip(&values[1]).map(|(a, b)| a + b).collect();
        let params = DaScaParams { w_q: eye(c), w_k: rank_one_logit_map(&k0, &k1, l0, l1, &q_in), w_v: eye(c) };
        let state = da_sca_forward(&q, &[fm], &[cam], &grid, &params, &cfg).unwrap();
        (state.output.features.clone(), state.output.weights[0][0].weights.clone())
    }

    /// W_k such that `(k_j W_k) . q / sqrt(c) = l_j` for two key inputs.
    fn rank_one_logit_map(k0: &[f64], k1: &[f64], l0: f64, l1: f64, q: &[f64]) -> Array2<f64> {
        let c = q.len();
        // Find a vector m with m.k0 = l0 and m.k1 = l1 in span{k0, k1}.
        let g00 = dot(k0, k0);
        let g01 = dot(k0, k1);
        let g11 = dot(k1, k1);
        let det = g00 * g11 - g01 * g01;
        let a = (l0 * g11 - l1 * g01) / det;
        let b = (l1 * g00 - l0 * g01) / det;
        let m: Vec<f64> = k0.iter().zip(k1).map(|(x, y)| a * x + b * y).collect();
        let qq = dot(q, q);
        Array2::from_shape_fn((c, c), |(i, j)| m[i] * q[j] / qq * (c as f64).sqrt())
    }

    #[test]
    fn two_keys_with_equal_logits_average() {
        let (out, w) = two_key_case(0.7, 0.7);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        let want = [0.0, 1.0, 2.0, 0.0, 0.0, 0.0];
        for (a, b) in out.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn two_keys_hand_softmax() {
        let (out, w) = two_key_case(3f64.ln(), 0.0);
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        let want = [0.75 * 1.0 + 0.25 * -1.0, 0.75 * 2.0, 0.25 * 4.0, 0.0, 0.0, 0.0];
        for (a, b) in out.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn invisible_query_outputs_zero() {
        let grid = BevGrid::default();
        let c = 6;
        let cfg = AttentionConfig::new(1, enc(c)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DaScaParams::random(c, &mut rng);
        let q = vec![BevQuery::new(vec![1.0; c], (-10.0, 0.0), vec![0.0], &grid).unwrap()];
        let fm = single_pixel_map(vec![1.0; c], 0.5);
        let state = da_sca_forward(&q, &[fm], &[forward_cam(1, 1)], &grid, &params, &cfg).unwrap();
        assert!(state.output.no_visible_keys[0]);
        assert!(state.output.features.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let grid = BevGrid::default();
        let c = 6;
        let cfg = AttentionConfig::new(1, enc(c)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = DaScaParams::random(c, &mut rng);
        let cam = forward_cam(3, 3);
        let fm = ImageFeatureMap::new(
            3,
            3,
            Array2::from_shape_fn((9, c), |_| rng.sample::<f64, _>(StandardNormal)),
            Array1::from_shape_fn(9, |_| 0.2 + 0.6 * rng.random::<f64>()),
        )
        .unwrap();
        let q = vec![BevQuery::new(vec![0.3; c], (12.0, 1.0), vec![-0.5, 0.5], &grid).unwrap()];
        let geometry = QueryGeometry::build(&q, &[cam.clone()], &grid, &cfg.encoder);
        let contents = Array2::from_elem((1, c), 0.3);
        let maps = [fm];
        let state = da_sca_forward_with(&contents, &geometry, &maps, &params, &cfg).unwrap();
        let g = da_sca_vjp(&Array2::zeros((1, c)), &state, &geometry, &maps, &params, &cfg).unwrap();
        assert!(g.params.w_q.iter().chain(g.params.w_k.iter()).chain(g.params.w_v.iter()).all(|v| *v == 0.0));
        assert!(g.d_contents.iter().all(|v| *v == 0.0));
        assert!(g.d_features[0].iter().all(|v| *v == 0.0) && g.d_depth[0].iter().all(|v| *v == 0.0));
        assert!(da_sca_vjp(&Array2::zeros((2, c)), &state, &geometry, &maps, &params, &cfg).is_err());
    }

    #[test]
    fn depth_profile_examples() {
        let c = 32;
        let encoder = enc(c);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = DaScaParams::random(c, &mut rng);
        let content: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        let key = ProfileKey {
            feature: (0..c).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect(),
            uvd: NormalizedUvd::new(0.5, 0.5, 0.5),
        };
        let sweep: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let profile = attention_depth_profile(&content, (0.5, 0.5), &sweep, &key, &params, &encoder).unwrap();
        assert!(profile.full_variance() > 0.0);
        assert_eq!(profile.uv_only_variance(), 0.0);
        let single = attention_depth_profile(&content, (0.5, 0.5), &[0.3], &key, &params, &encoder).unwrap();
        assert_eq!(single.full_variance(), 0.0);
    }
}
