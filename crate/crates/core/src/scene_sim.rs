//! Synthetic multi-camera scenes at backbone-feature granularity.
//!
//! Objects sit on the ground plane around the ego vehicle. Every camera has
//! its optical center at the BEV origin, so all points on an object ray land
//! on the same pixel; only the blob size and the optional depth-cue channels
//! tell near from far. Feature maps are never stored: they are re-rendered
//! from the scene seed.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::depth_head::SparseDepthLabels;
use crate::error::{Error, Result};
use crate::geometry::{ego_to_cam, BevGrid, CameraModel, EgoPoint};

/// Number of trailing feature channels carrying the monocular depth cue.
pub const DEPTH_CUE_CHANNELS: usize = 2;

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub objects_min: usize,
    pub objects_max: usize,
    pub classes: usize,
    pub cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub feature_dim: usize,
    /// Horizontal field of view of every camera, degrees.
    pub fov_deg: f64,
    pub extent: f64,
    pub min_radius: f64,
    /// Objects stay within this fraction of the extent from the origin.
    pub max_radius_fraction: f64,
    pub min_separation: f64,
    /// Fraction of scenes holding a pair of objects on one ray.
    pub colinear_fraction: f64,
    /// Minimum radial gap between the two objects of a colinear pair.
    pub colinear_min_gap: f64,
    /// Blob sigma in pixels is `blob_scale * fx * size / d`, clamped to [0.5, 4].
    pub blob_scale: f64,
    /// Amplitude of the depth-cue channels; zero gives pure ray ambiguity.
    pub depth_cue: f64,
    pub noise_std: f64,
    pub size_min: f64,
    pub size_max: f64,
    pub signature_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            objects_min: 2,
            objects_max: 4,
            classes: 3,
            cameras: 6,
            image_width: 16,
            image_height: 16,
            feature_dim: 32,
            fov_deg: 70.0,
            extent: 51.2,
            min_radius: 4.0,
            max_radius_fraction: 0.9,
            min_separation: 6.0,
            colinear_fraction: 0.5,
            colinear_min_gap: 10.0,
            blob_scale: 0.5,
            depth_cue: 1.0,
            noise_std: 0.1,
            size_min: 1.5,
            size_max: 4.5,
            signature_seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("sim: {m}")));
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max");
        }
        if self.classes == 0 || self.cameras == 0 {
            return bad("need at least one class and one camera");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive");
        }
        if self.feature_dim <= DEPTH_CUE_CHANNELS {
            return bad("feature_dim too small");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov_deg must be in (0, 180)");
        }
        let r_max = self.extent * self.max_radius_fraction;
        if !(self.min_radius > 0.0 && r_max > self.min_radius && self.max_radius_fraction < 1.0) {
            return bad("empty placement annulus");
        }
        if !(0.0..=1.0).contains(&self.colinear_fraction) {
            return bad("colinear_fraction must be in [0, 1]");
        }
        if self.colinear_min_gap >= r_max - self.min_radius {
            return bad("colinear_min_gap does not fit in the annulus");
        }
        if !(self.size_min > 0.0 && self.size_max >= self.size_min) {
            return bad("bad object size range");
        }
        if self.noise_std < 0.0 || self.depth_cue < 0.0 || self.blob_scale <= 0.0 {
            return bad("noise, cue and blob scale must be non-negative");
        }
        Ok(())
    }

    pub fn focal_length(&self) -> f64 {
        (self.image_width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn grid(&self, resolution: usize) -> Result<BevGrid> {
        BevGrid::new(self.extent, resolution)
    }

    /// The camera rig: evenly spaced headings, all centered at the origin.
    pub fn rig(&self) -> Result<Vec<CameraModel>> {
        let f = self.focal_length();
        (0..self.cameras)
            .map(|k| CameraModel::looking_along(TAU * k as f64 / self.cameras as f64, f, f, self.image_width, self.image_height))
            .collect()
    }

    /// Fixed per-class channel signatures (the depth-cue channels are zero).
    pub fn class_signatures(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.signature_seed);
        (0..self.classes)
            .map(|_| {
                let mut s: Vec<f64> = (0..self.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                s[self.feature_dim - DEPTH_CUE_CHANNELS..].fill(0.0);
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: EgoPoint,
    pub class: usize,
    /// Length and width, meters.
    pub size: [f64; 2],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<CameraModel>,
}

fn visible_somewhere(p: EgoPoint, cams: &[CameraModel]) -> bool {
    cams.iter().any(|cam| {
        ego_to_cam(p, cam)
            .map(|c| c.u >= 0.0 && c.u < cam.width() as f64 && c.v >= 0.0 && c.v < cam.height() as f64)
            .unwrap_or(false)
    })
}

/// Generates the scene for `seed`.
pub fn generate_scene(cfg: &SimConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let cameras = cfg.rig()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let colinear = n >= 2 && rng.random::<f64>() < cfg.colinear_fraction;
    let (r_min, r_max) = (cfg.min_radius, cfg.extent * cfg.max_radius_fraction);
    let radius = |rng: &mut ChaCha8Rng| (rng.random::<f64>() * (r_max * r_max - r_min * r_min) + r_min * r_min).sqrt();

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for i in 0..n {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (r, theta) = if colinear && i == 1 {
                let first = &objects[0].center;
                (radius(&mut rng), first.y.atan2(first.x))
            } else {
                (radius(&mut rng), rng.random::<f64>() * TAU)
            };
            if colinear && i == 1 {
                let r0 = objects[0].center.x.hypot(objects[0].center.y);
                if (r - r0).abs() < cfg.colinear_min_gap {
                    continue;
                }
            }
            let center = EgoPoint::new(r * theta.cos(), r * theta.sin(), 0.0);
            let crowded =
                objects.iter().any(|o| (o.center.x - center.x).hypot(o.center.y - center.y) < cfg.min_separation);
            if crowded || !visible_somewhere(center, &cameras) {
                continue;
            }
            placed = Some(center);
            break;
        }
        let center = placed.ok_or_else(|| Error::InvalidConfig("could not place objects; check camera coverage".into()))?;
        objects.push(SceneObject {
            center,
            class: rng.random_range(0..cfg.classes),
            size: [
                rng.random_range(cfg.size_min..=cfg.size_max),
                rng.random_range(cfg.size_min..=cfg.size_max),
            ],
            yaw: rng.random::<f64>() * TAU - PI,
        });
    }
    Ok(Scene { seed, objects, cameras })
}

/// Raw backbone-level features of one camera plus its sparse depth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub features: Array2<f64>,
    pub depth: SparseDepthLabels,
}

fn view_seed(scene_seed: u64, camera: usize) -> u64 {
    scene_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (camera as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Renders camera `camera` of `scene`.
pub fn render_features(scene: &Scene, camera: usize, cfg: &SimConfig) -> Result<RenderedView> {
    let cam = scene
        .cameras
        .get(camera)
        .ok_or_else(|| Error::InvalidConfig(format!("scene has no camera {camera}")))?;
    let (w, h, c) = (cam.width(), cam.height(), cfg.feature_dim);
    let grid = BevGrid::new(cfg.extent, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(scene.seed, camera));
    let mut features = if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).unwrap();
        Array2::from_shape_fn((w * h, c), |_| noise.sample(&mut rng))
    } else {
        Array2::zeros((w * h, c))
    };
    let mut depth = SparseDepthLabels::empty(w * h);
    let signatures = cfg.class_signatures();
    for obj in &scene.objects {
        let Ok(p) = ego_to_cam(obj.center, cam) else { continue };
        let size = 0.5 * (obj.size[0] + obj.size[1]);
        let sigma = (cfg.blob_scale * cam.fx() * size / p.d).clamp(0.5, 4.0);
        let reach = 3.0 * sigma;
        if p.u < -reach || p.u > w as f64 + reach || p.v < -reach || p.v > h as f64 + reach {
            continue;
        }
        let dn = (p.d / grid.d_max).min(1.0);
        let mut pattern = signatures[obj.class].clone();
        pattern[c - 2] = 2.0 * cfg.depth_cue * (2.0 * dn - 1.0);
        pattern[c - 1] = 2.0 * cfg.depth_cue;
        for row in 0..h {
            for col in 0..w {
                let du = col as f64 + 0.5 - p.u;
                let dv = row as f64 + 0.5 - p.v;
                let g = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
                if g < 1e-4 {
                    continue;
                }
                let mut f = features.row_mut(row * w + col);
                for (x, s) in f.iter_mut().zip(&pattern) {
                    *x += g * s;
                }
            }
        }
        if p.u >= 0.0 && p.u < w as f64 && p.v >= 0.0 && p.v < h as f64 && p.d <= grid.d_max {
            let pix = (p.v.floor() as usize) * w + p.u.floor() as usize;
            if !depth.mask[pix] || p.d < depth.target[pix] {
                depth.mask[pix] = true;
                depth.target[pix] = p.d;
            }
        }
    }
    Ok(RenderedView { features, depth })
}

/// Renders every camera of `scene`.
pub fn render_scene(scene: &Scene, cfg: &SimConfig) -> Result<Vec<RenderedView>> {
    (0..scene.cameras.len()).map(|k| render_features(scene, k, cfg)).collect()
}

/// On-disk form of a scene list. Feature maps are regenerated from the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub sim: SimConfig,
    pub scenes: Vec<Scene>,
}

impl SceneFile {
    pub fn generate(sim: &SimConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Self> {
        let scenes = seeds.into_iter().map(|s| generate_scene(sim, s)).collect::<Result<_>>()?;
        Ok(Self { sim: sim.clone(), scenes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        file.sim.validate()?;
        Ok(file)
    }
}
