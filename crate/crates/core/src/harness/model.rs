//! The desk-scale detector: learned BEV queries, a stack of DA-SCA layers
//! with residual updates, a depth head feeding the positional keys, a dense
//! detection head, and the auxiliary DNS classifier.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{DnsMode, DnsSource, RunConfig};
use super::detection::{
    decode_detections, detection_head, detection_head_backward, detection_loss, detection_targets, DetHeadParams,
    DetLossConfig, DetOutput,
};
use crate::attention::{
    da_sca_forward_with, da_sca_vjp, AttentionConfig, BevQuery, DaScaParams, DaScaState, ImageFeatureMap,
    QueryGeometry,
};
use crate::depth_head::{
    depth_head_backward, depth_loss, predict_depth, unit_to_logit_grad, DepthForward, DepthHeadParams,
};
use crate::dns::{dns_loss, plan_dns_samples, ClsHeadParams, DenseBevMap, DnsSampleSet, DnsTarget, PseudoQuerySource};
use crate::encoding::SineEncoder;
use crate::error::{shape_check, Error, Result};
use crate::geometry::{BevGrid, CameraModel};
use crate::metrics::Detection;
use crate::params::Parameters;
use crate::scene_sim::{render_scene, RenderedView, Scene, SimConfig};

const UNIT_DEPTH_FLOOR: f64 = 1e-12;

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// One content row per BEV cell, row-major.
    pub bev_queries: Array2<f64>,
    pub layers: Vec<DaScaParams>,
    pub depth: DepthHeadParams,
    pub dns_head: ClsHeadParams,
    pub det: DetHeadParams,
    pub pseudo_embedding: Array1<f64>,
}

impl ModelParams {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let c = m.channels;
        let cells = m.resolution * m.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
        let small = Normal::new(0.0, 0.1).unwrap();
        Ok(Self {
            bev_queries: Array2::from_shape_fn((cells, c), |_| small.sample(&mut rng)),
            layers: (0..m.layers).map(|_| DaScaParams::aligned(c, m.attention_init_gain, m.attention_init_noise, &mut rng)).collect(),
            depth: DepthHeadParams::random(c, m.depth_hidden, &mut rng),
            dns_head: ClsHeadParams::random(c, cfg.sim.classes, &mut rng),
            det: DetHeadParams::random(c, cfg.sim.classes, cfg.loss.prior, &mut rng),
            pseudo_embedding: Array1::from_shape_fn(c, |_| small.sample(&mut rng)),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("bev_queries", self.bev_queries.as_slice().unwrap());
        for (l, p) in self.layers.iter().enumerate() {
            p.visit(&mut |name, s| f(&format!("layer{l}.{name}"), s));
        }
        self.depth.visit(f);
        self.dns_head.visit(f);
        self.det.visit(f);
        f("pseudo_embedding", self.pseudo_embedding.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("bev_queries", self.bev_queries.as_slice_mut().unwrap());
        for (l, p) in self.layers.iter_mut().enumerate() {
            p.visit_mut(&mut |name, s| f(&format!("layer{l}.{name}"), s));
        }
        self.depth.visit_mut(f);
        self.dns_head.visit_mut(f);
        self.det.visit_mut(f);
        f("pseudo_embedding", self.pseudo_embedding.as_slice_mut().unwrap());
    }
}

/// Everything derived from the configuration alone: grid, camera rig and
/// the positional queries of the BEV cells.
pub struct ModelContext {
    pub cfg: RunConfig,
    pub grid: BevGrid,
    pub attention: AttentionConfig,
    pub cameras: Vec<CameraModel>,
    pub geometry: QueryGeometry,
}

impl ModelContext {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let encoder = SineEncoder::new(cfg.model.channels, cfg.model.pe_temperature, cfg.da_sca_pe)?;
        let attention = AttentionConfig::new(cfg.model.heads, encoder)?;
        let cameras = cfg.sim.rig()?;
        let c = cfg.model.channels;
        let queries = (0..grid.num_cells())
            .map(|i| BevQuery::new(vec![0.0; c], grid.cell_center_index(i), cfg.model.pillar_heights.clone(), &grid))
            .collect::<Result<Vec<_>>>()?;
        let geometry = QueryGeometry::build(&queries, &cameras, &grid, &attention.encoder);
        Ok(Self { cfg: cfg.clone(), grid, attention, cameras, geometry })
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let m = &self.cfg.model;
        shape_check(
            params.bev_queries.dim() == (self.grid.num_cells(), m.channels)
                && params.layers.len() == m.layers
                && params.det.classes() == self.cfg.sim.classes
                && params.det.channels() == m.channels,
            || "model parameters do not match the configuration".into(),
        )
    }
}

/// Rendered camera views plus ground-truth centers of one scene.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub seed: u64,
    pub views: Vec<RenderedView>,
    pub objects: Vec<((f64, f64), usize)>,
}

impl SceneInput {
    pub fn render(scene: &Scene, sim: &SimConfig, ctx: &ModelContext) -> Result<Self> {
        shape_check(scene.cameras == ctx.cameras, || "scene camera rig differs from the model's".into())?;
        Ok(Self {
            seed: scene.seed,
            views: render_scene(scene, sim)?,
            objects: scene.objects.iter().map(|o| ((o.center.x, o.center.y), o.class)).collect(),
        })
    }
}

/// Intermediate values of one forward pass.
pub struct Forward {
    pub depth: Vec<DepthForward>,
    pub maps: Vec<ImageFeatureMap>,
    pub states: Vec<DaScaState>,
    /// `B_0 ..= B_L`.
    pub bev: Vec<Array2<f64>>,
    pub det: DetOutput,
}

pub fn forward(ctx: &ModelContext, params: &ModelParams, input: &SceneInput) -> Result<Forward> {
    ctx.check_params(params)?;
    shape_check(input.views.len() == ctx.cameras.len(), || "one view per camera expected".into())?;
    let mut depth = Vec::with_capacity(input.views.len());
    let mut maps = Vec::with_capacity(input.views.len());
    for (view, cam) in input.views.iter().zip(&ctx.cameras) {
        let d = predict_depth(&view.features, &params.depth)?;
        let unit = d.unit.mapv(|u| u.clamp(UNIT_DEPTH_FLOOR, 1.0 - UNIT_DEPTH_FLOOR));
        maps.push(ImageFeatureMap::new(cam.height(), cam.width(), view.features.clone(), unit)?);
        depth.push(d);
    }
    let mut bev = vec![params.bev_queries.clone()];
    let mut states = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let state = da_sca_forward_with(bev.last().unwrap(), &ctx.geometry, &maps, layer, &ctx.attention)?;
        bev.push(bev.last().unwrap() + &state.output.features);
        states.push(state);
    }
    let det = detection_head(bev.last().unwrap(), &params.det)?;
    Ok(Forward { depth, maps, states, bev, det })
}

pub fn detect(ctx: &ModelContext, params: &ModelParams, input: &SceneInput) -> Result<Vec<Detection>> {
    let fwd = forward(ctx, params, input)?;
    decode_detections(&fwd.det, &ctx.grid, ctx.cfg.eval.score_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub detection: f64,
    pub dns: f64,
    pub depth: f64,
}

fn dns_targets(input: &SceneInput) -> Vec<DnsTarget> {
    input.objects.iter().map(|&(center, class)| DnsTarget { center, class }).collect()
}

/// Total loss and the gradient of every parameter for one scene. `dns_seed`
/// fixes the DNS sample positions.
pub fn loss_and_grad(
    ctx: &ModelContext,
    params: &ModelParams,
    input: &SceneInput,
    dns_seed: u64,
) -> Result<(LossBreakdown, ModelParams)> {
    let cfg = &ctx.cfg;
    let fwd = forward(ctx, params, input)?;
    let mut grads = params.zeros_like();
    let layers = params.layers.len();

    let det_cfg = DetLossConfig { alpha: cfg.loss.focal_alpha, gamma: cfg.loss.focal_gamma, w_offset: cfg.loss.w_offset };
    let det_loss = detection_loss(&fwd.det, &detection_targets(&input.objects, &ctx.grid), &det_cfg)?;
    let (det_grads, d_top) = detection_head_backward(&fwd.bev[layers], &params.det, &det_loss.d_logits, &det_loss.d_offsets)?;
    grads.det = det_grads;

    let mut d_bev: Vec<Array2<f64>> = fwd.bev.iter().map(|b| Array2::zeros(b.raw_dim())).collect();
    d_bev[layers] += &d_top;
    let mut d_unit: Vec<Array1<f64>> = fwd.maps.iter().map(|m| Array1::zeros(m.pixels())).collect();
    let mut dns_value = 0.0;
    let lambda = cfg.loss.lambda_dns;
    let dns_on = cfg.dns != DnsMode::Off && lambda > 0.0;

    let dns_head = if cfg.dns_shared_head {
        ClsHeadParams { weight: params.det.w_cls.clone(), bias: params.det.b_cls.clone() }
    } else {
        params.dns_head.clone()
    };
    let add_head_grad = |grads: &mut ModelParams, g: &ClsHeadParams| {
        if cfg.dns_shared_head {
            grads.det.w_cls.scaled_add(lambda, &g.weight);
            grads.det.b_cls.scaled_add(lambda, &g.bias);
        } else {
            crate::params::add_scaled(&mut grads.dns_head, lambda, g);
        }
    };

    let plan = if dns_on {
        let mut rng = ChaCha8Rng::seed_from_u64(dns_seed);
        Some(plan_dns_samples(&dns_targets(input), &cfg.dns_sampling_effective(), &ctx.grid, &mut rng)?)
    } else {
        None
    };

    // Pseudo-query reads have their own attention passes; their gradients
    // are added to the layer and the key inputs directly.
    if let (Some(plan), DnsSource::PseudoQuery) = (&plan, cfg.dns_source) {
        for l in 0..cfg.dns_layers {
            let src = PseudoQuerySource {
                embedding: params.pseudo_embedding.as_slice().unwrap(),
                pillar_heights: &cfg.model.pillar_heights,
                maps: &fwd.maps,
                cams: &ctx.cameras,
                grid: &ctx.grid,
                params: &params.layers[l],
                cfg: &ctx.attention,
            };
            let positions = plan.positions();
            if positions.is_empty() {
                continue;
            }
            let state = src.forward(&positions)?;
            let samples = DnsSampleSet::from_rows(plan, &state.state.output.features);
            let loss = dns_loss(&samples, &dns_head)?;
            dns_value += loss.value;
            add_head_grad(&mut grads, &loss.grads);
            let back = src.backward(&state, &(loss.d_features * lambda))?;
            for (g, d) in grads.pseudo_embedding.iter_mut().zip(&back.d_embedding) {
                *g += d;
            }
            crate::params::add_scaled(&mut grads.layers[l], 1.0, &back.attention.params);
            for (acc, d) in d_unit.iter_mut().zip(&back.attention.d_depth) {
                *acc += d;
            }
        }
    }

    for l in (1..=layers).rev() {
        if let (Some(plan), DnsSource::Dense) = (&plan, cfg.dns_source) {
            if l <= cfg.dns_layers {
                let map = DenseBevMap::new(ctx.grid, fwd.bev[l].clone())?;
                let samples = DnsSampleSet::gather(plan, &map)?;
                let loss = dns_loss(&samples, &dns_head)?;
                dns_value += loss.value;
                add_head_grad(&mut grads, &loss.grads);
                for (pos, row) in samples.positions().iter().zip(loss.d_features.axis_iter(Axis(0))) {
                    let cell = map.cell_of(*pos)?;
                    d_bev[l].row_mut(cell).scaled_add(lambda, &row);
                }
            }
        }
        let back = da_sca_vjp(&d_bev[l], &fwd.states[l - 1], &ctx.geometry, &fwd.maps, &params.layers[l - 1], &ctx.attention)?;
        crate::params::add_scaled(&mut grads.layers[l - 1], 1.0, &back.params);
        let carry = &d_bev[l] + &back.d_contents;
        d_bev[l - 1] += &carry;
        for (acc, d) in d_unit.iter_mut().zip(&back.d_depth) {
            *acc += d;
        }
    }
    grads.bev_queries = d_bev.swap_remove(0);

    let w_depth = cfg.loss.w_depth;
    let mut depth_value = 0.0;
    let labelled: Vec<usize> = (0..input.views.len()).filter(|&k| input.views[k].depth.valid_count() > 0).collect();
    let depth_scale = if labelled.is_empty() { 0.0 } else { w_depth / labelled.len() as f64 };
    for (k, (view, dfwd)) in input.views.iter().zip(&fwd.depth).enumerate() {
        let mut d_logits = Array1::zeros(view.features.nrows());
        if depth_scale > 0.0 && view.depth.valid_count() > 0 {
            let dl = depth_loss(&dfwd.unit, &view.depth, &ctx.grid)?;
            depth_value += dl.value / labelled.len() as f64;
            d_logits.scaled_add(depth_scale, &dl.d_logits);
        }
        if cfg.depth_grad_from_attention {
            d_logits += &unit_to_logit_grad(&dfwd.unit, &d_unit[k]);
        }
        let (g, _) = depth_head_backward(&view.features, &params.depth, dfwd, &d_logits)?;
        crate::params::add_scaled(&mut grads.depth, 1.0, &g);
    }

    let total = det_loss.value + lambda * dns_value + w_depth * depth_value;
    if !total.is_finite() {
        return Err(Error::DivergedLoss { step: 0, value: total });
    }
    Ok((LossBreakdown { total, detection: det_loss.value, dns: dns_value, depth: depth_value }, grads))
}
