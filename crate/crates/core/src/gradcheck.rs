//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each suite draws random problem instances, evaluates the analytic
//! gradient once and compares a sample of coordinates against
//! `(f(x + h) - f(x - h)) / 2h`. The relative error is
//! `|a - n| / max(|a|, |n|, floor)` with `floor = REL_FLOOR`; the
//! whole-model check scales the floor by the loss magnitude, since the
//! rounding noise of the difference quotient grows with it.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{da_sca_forward_with, da_sca_vjp, AttentionConfig, BevQuery, DaScaParams, ImageFeatureMap, QueryGeometry};
use crate::depth_head::{depth_head_backward, depth_loss, predict_depth, unit_to_logit_grad, DepthHeadParams, SparseDepthLabels};
use crate::dns::{dns_loss, ClsHeadParams, DnsObjectSamples, DnsSample, DnsSampleSet};
use crate::encoding::{PeMode, SineEncoder, DEFAULT_TEMPERATURE};
use crate::error::Result;
use crate::geometry::{BevGrid, CameraModel};
use crate::harness::detection::{detection_head, detection_head_backward, detection_loss, DetHeadParams, DetLossConfig, DetTarget};
use crate::harness::model::{loss_and_grad, ModelContext, ModelParams, SceneInput};
use crate::harness::RunConfig;
use crate::params::{scalar, scalar_mut, Parameters};
use crate::scene_sim::{generate_scene, SimConfig};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub configs: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: String,
    floor: f64,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self { name: name.into(), configs: 0, coordinates: 0, max_rel_err: 0.0, worst: String::new(), floor: REL_FLOOR }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor);
        self.coordinates += 1;
        if e > self.max_rel_err || e.is_nan() {
            self.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
            self.worst = format!("{}: analytic {analytic:e}, numeric {numeric:e}", what());
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.coordinates > 0 && self.max_rel_err <= tol
    }
}

fn central(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    Ok((f(x + STEP)? - f(x - STEP)?) / (2.0 * STEP))
}

/// Checks up to `per_group` random coordinates of every parameter group.
fn check_params<P: Parameters + Clone>(
    report: &mut SuiteReport,
    params: &P,
    analytic: &P,
    per_group: usize,
    rng: &mut ChaCha8Rng,
    loss: &dyn Fn(&P) -> Result<f64>,
) -> Result<()> {
    let names = params.group_names();
    let sizes = crate::params::group_sizes(params);
    for (g, (&n, name)) in sizes.iter().zip(&names).enumerate() {
        let picks: Vec<usize> = if n <= per_group { (0..n).collect() } else { (0..per_group).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let x0 = scalar(params, g, i);
            let numeric = central(
                |x| {
                    let mut p = params.clone();
                    scalar_mut(&mut p, g, i, |v| *v = x);
                    loss(&p)
                },
                x0,
            )?;
            report.record(|| format!("{name}[{i}]"), scalar(analytic, g, i), numeric);
        }
    }
    Ok(())
}

/// Checks up to `count` random entries of a plain array input.
fn check_array(
    report: &mut SuiteReport,
    label: &str,
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
    loss: &dyn Fn(&Array2<f64>) -> Result<f64>,
) -> Result<()> {
    let (r, c) = x.dim();
    for _ in 0..count.min(r * c) {
        let idx = (rng.random_range(0..r), rng.random_range(0..c));
        let numeric = central(
            |v| {
                let mut y = x.clone();
                y[idx] = v;
                loss(&y)
            },
            x[idx],
        )?;
        report.record(|| format!("{label}{idx:?}"), analytic[idx], numeric);
    }
    Ok(())
}

fn normal_array(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

struct AttentionProblem {
    geometry: QueryGeometry,
    contents: Array2<f64>,
    features: Vec<Array2<f64>>,
    depth_params: DepthHeadParams,
    params: DaScaParams,
    cfg: AttentionConfig,
    upstream: Array2<f64>,
    h: usize,
    w: usize,
}

impl AttentionProblem {
    fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let grid = BevGrid::default();
        let heads = [1usize, 2, 3][rng.random_range(0..3)];
        let c = 6 * heads * rng.random_range(1..=2);
        let mode = if rng.random_bool(0.8) { PeMode::Uvd } else { PeMode::UvOnly };
        let cfg = AttentionConfig::new(heads, SineEncoder::new(c, DEFAULT_TEMPERATURE, mode)?)?;
        let (w, h) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let n_cams = rng.random_range(1..=2);
        let base_yaw = rng.random::<f64>() * TAU;
        let cams = (0..n_cams)
            .map(|k| {
                let f = w as f64 / 2.0 / 35f64.to_radians().tan();
                CameraModel::looking_along(base_yaw + k as f64 * 0.8, f, f, w, h)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_q = rng.random_range(1..=4);
        let queries = (0..n_q)
            .map(|_| {
                let yaw = base_yaw + rng.random_range(-0.5..1.0);
                let r = rng.random_range(3.0..40.0);
                let heights: Vec<f64> = match rng.random_range(1..=3) {
                    1 => vec![0.0],
                    2 => vec![-0.5, 0.5],
                    _ => vec![-1.5, 0.0, 1.5],
                };
                BevQuery::new(vec![0.0; c], (r * yaw.cos(), r * yaw.sin()), heights, &grid)
            })
            .collect::<Result<Vec<_>>>()?;
        let geometry = QueryGeometry::build(&queries, &cams, &grid, &cfg.encoder);
        let features = (0..n_cams).map(|_| normal_array(rng, (w * h, c), 1.0)).collect();
        let mut depth_params = DepthHeadParams::random(c, 5, rng);
        depth_params.b1.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            contents: normal_array(rng, (n_q, c), 0.5),
            upstream: normal_array(rng, (n_q, c), 1.0),
            params: DaScaParams::random(c, rng),
            geometry,
            features,
            depth_params,
            cfg,
            h,
            w,
        })
    }

    fn maps_with(&self, features: &[Array2<f64>], depth: &DepthHeadParams) -> Result<Vec<ImageFeatureMap>> {
        features
            .iter()
            .map(|f| ImageFeatureMap::new(self.h, self.w, f.clone(), predict_depth(f, depth)?.unit))
            .collect()
    }

    fn loss(&self, contents: &Array2<f64>, maps: &[ImageFeatureMap], params: &DaScaParams) -> Result<f64> {
        let state = da_sca_forward_with(contents, &self.geometry, maps, params, &self.cfg)?;
        Ok((&state.output.features * &self.upstream).sum())
    }
}

/// DA-SCA vector-Jacobian product, including the chain into the depth head
/// that produces the key depths.
pub fn da_sca_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("da_sca_vjp");
    for _ in 0..configs {
        let p = AttentionProblem::random(&mut rng)?;
        let maps = p.maps_with(&p.features, &p.depth_params)?;
        let state = da_sca_forward_with(&p.contents, &p.geometry, &maps, &p.params, &p.cfg)?;
        let g = da_sca_vjp(&p.upstream, &state, &p.geometry, &maps, &p.params, &p.cfg)?;
        report.configs += 1;

        check_params(&mut report, &p.params, &g.params, 6, &mut rng, &|q| p.loss(&p.contents, &maps, q))?;
        check_array(&mut report, "contents", &p.contents, &g.d_contents, 6, &mut rng, &|x| p.loss(x, &maps, &p.params))?;
        for k in 0..maps.len() {
            // Feature gradient with the key depth held fixed.
            check_array(&mut report, &format!("features[{k}]"), &p.features[k], &g.d_features[k], 4, &mut rng, &|x| {
                let mut m = maps.clone();
                m[k] = ImageFeatureMap::new(p.h, p.w, x.clone(), maps[k].predicted_depth().clone())?;
                p.loss(&p.contents, &m, &p.params)
            })?;
            let depth_col = maps[k].predicted_depth().clone().insert_axis(ndarray::Axis(1));
            let d_col = g.d_depth[k].clone().insert_axis(ndarray::Axis(1));
            check_array(&mut report, &format!("depth[{k}]"), &depth_col, &d_col, 4, &mut rng, &|x| {
                let mut m = maps.clone();
                m[k] = ImageFeatureMap::new(p.h, p.w, p.features[k].clone(), x.column(0).to_owned())?;
                p.loss(&p.contents, &m, &p.params)
            })?;
        }
        // Through the depth head.
        let mut head_grads = DepthHeadParams::zeros(p.depth_params.channels(), p.depth_params.hidden());
        for (k, f) in p.features.iter().enumerate() {
            let fwd = predict_depth(f, &p.depth_params)?;
            let d_logits = unit_to_logit_grad(&fwd.unit, &g.d_depth[k]);
            let (gk, _) = depth_head_backward(f, &p.depth_params, &fwd, &d_logits)?;
            crate::params::add_scaled(&mut head_grads, 1.0, &gk);
        }
        check_params(&mut report, &p.depth_params, &head_grads, 3, &mut rng, &|d| {
            p.loss(&p.contents, &p.maps_with(&p.features, d)?, &p.params)
        })?;
    }
    Ok(report)
}

/// DNS loss with respect to the classifier and the sampled features.
pub fn dns_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("dns_loss");
    for _ in 0..configs {
        let c = rng.random_range(2..=8);
        let classes = rng.random_range(1..=4);
        let mut head = ClsHeadParams::random(c, classes, &mut rng);
        head.bias.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let sample = |rng: &mut ChaCha8Rng| DnsSample {
            position: (1.0, 1.0),
            lambda: None,
            feature: (0..c).map(|_| rng.sample(StandardNormal)).collect(),
        };
        let objects: Vec<DnsObjectSamples> = (0..rng.random_range(1..=3))
            .map(|_| DnsObjectSamples {
                class: rng.random_range(0..classes),
                positives: (0..rng.random_range(1..=2)).map(|_| sample(&mut rng)).collect(),
                negatives: (0..rng.random_range(0..=3)).map(|_| sample(&mut rng)).collect(),
            })
            .collect();
        let set = DnsSampleSet { objects, skipped_degenerate: 0 };
        let loss = dns_loss(&set, &head)?;
        report.configs += 1;
        check_params(&mut report, &head, &loss.grads, 8, &mut rng, &|h| Ok(dns_loss(&set, h)?.value))?;
        let rows: Vec<Vec<f64>> = set.objects.iter().flat_map(|o| o.positives.iter().chain(&o.negatives).map(|s| s.feature.clone())).collect();
        let feats = Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j]);
        let rebuild = |x: &Array2<f64>| {
            let mut s = set.clone();
            let mut i = 0;
            for o in &mut s.objects {
                for smp in o.positives.iter_mut().chain(o.negatives.iter_mut()) {
                    smp.feature = x.row(i).to_vec();
                    i += 1;
                }
            }
            s
        };
        check_array(&mut report, "features", &feats, &loss.d_features, 6, &mut rng, &|x| Ok(dns_loss(&rebuild(x), &head)?.value))?;
    }
    Ok(report)
}

/// Sparse L1 depth loss through the depth head.
pub fn depth_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("depth_loss");
    let grid = BevGrid::default();
    for _ in 0..configs {
        let c = rng.random_range(2..=8);
        let pixels = rng.random_range(2..=12);
        let mut head = DepthHeadParams::random(c, rng.random_range(2..=6), &mut rng);
        head.b1.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let feats = normal_array(&mut rng, (pixels, c), 1.0);
        let mut labels = SparseDepthLabels::empty(pixels);
        for i in 0..pixels {
            if rng.random_bool(0.6) {
                labels.mask[i] = true;
                labels.target[i] = rng.random_range(1.0..70.0);
            }
        }
        let loss_of = |h: &DepthHeadParams, f: &Array2<f64>| -> Result<f64> {
            Ok(depth_loss(&predict_depth(f, h)?.unit, &labels, &grid)?.value)
        };
        let fwd = predict_depth(&feats, &head)?;
        let dl = depth_loss(&fwd.unit, &labels, &grid)?;
        let (grads, d_feats) = depth_head_backward(&feats, &head, &fwd, &dl.d_logits)?;
        report.configs += 1;
        check_params(&mut report, &head, &grads, 6, &mut rng, &|h| loss_of(h, &feats))?;
        check_array(&mut report, "features", &feats, &d_feats, 4, &mut rng, &|x| loss_of(&head, x))?;
    }
    Ok(report)
}

/// Focal classification plus L1 offsets through the dense detection head.
pub fn detection_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("detection_loss");
    for _ in 0..configs {
        let c = rng.random_range(2..=8);
        let classes = rng.random_range(1..=3);
        let cells = rng.random_range(4..=16);
        let mut head = DetHeadParams::random(c, classes, 0.1, &mut rng);
        head.w_cls.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        head.w_off.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let feats = normal_array(&mut rng, (cells, c), 1.0);
        let targets: Vec<DetTarget> = (0..rng.random_range(0..=3))
            .map(|_| DetTarget {
                cell: rng.random_range(0..cells),
                class: rng.random_range(0..classes),
                offset: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            })
            .collect();
        let cfg = DetLossConfig {
            alpha: rng.random_range(0.1..0.9),
            gamma: [0.0, 1.0, 2.0][rng.random_range(0..3)],
            w_offset: rng.random_range(0.5..2.0),
        };
        let loss_of = |h: &DetHeadParams, f: &Array2<f64>| -> Result<f64> {
            Ok(detection_loss(&detection_head(f, h)?, &targets, &cfg)?.value)
        };
        let out = detection_head(&feats, &head)?;
        let loss = detection_loss(&out, &targets, &cfg)?;
        let (grads, d_feats) = detection_head_backward(&feats, &head, &loss.d_logits, &loss.d_offsets)?;
        report.configs += 1;
        check_params(&mut report, &head, &grads, 6, &mut rng, &|h| loss_of(h, &feats))?;
        check_array(&mut report, "features", &feats, &d_feats, 4, &mut rng, &|x| loss_of(&head, x))?;
    }
    Ok(report)
}

/// A small configuration exercising every path of the full model.
pub fn tiny_model_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.sim = SimConfig { image_width: 6, image_height: 6, feature_dim: 12, cameras: 4, fov_deg: 100.0, ..SimConfig::default() };
    cfg.model.channels = 12;
    cfg.model.heads = 2;
    cfg.model.layers = 2;
    cfg.model.depth_hidden = 6;
    cfg.model.resolution = 6;
    cfg.model.pillar_heights = vec![-1.0, 1.0];
    cfg.dns_layers = 2;
    cfg
}

/// Finite differences of the total training loss against the gradient of
/// every parameter group jointly, `per_group` coordinates each.
pub fn full_model_check(cfg: &RunConfig, per_group: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("full_model");
    let ctx = ModelContext::new(cfg)?;
    let mut params = ModelParams::init(cfg)?;
    // Move off the initialization so no group has a degenerate gradient.
    params.visit_mut(&mut |_, s| {
        for x in s.iter_mut() {
            *x += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    });
    let scene = generate_scene(&cfg.sim, seed)?;
    let input = SceneInput::render(&scene, &cfg.sim, &ctx)?;
    let dns_seed = seed ^ 0x5EED;
    let (loss, grads) = loss_and_grad(&ctx, &params, &input, dns_seed)?;
    report.configs = 1;
    report.floor = REL_FLOOR * loss.total.abs().max(1.0);
    check_params(&mut report, &params, &grads, per_group, &mut rng, &|p| Ok(loss_and_grad(&ctx, p, &input, dns_seed)?.0.total))?;
    Ok(report)
}
