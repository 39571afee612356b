use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use crate::attention::{attention_depth_profile, DepthProfile, ProfileKey};
use crate::depth_head::predict_depth;
use crate::encoding::NormalizedUvd;
use crate::geometry::{bev_cell_of, ego_to_cam};
use super::model::{detect, ModelContext, ModelParams, SceneInput};
use super::train::{train, ModelState};
use crate::error::Result;
use crate::metrics::{GroundTruth, MetricsReport, SceneEval};
use crate::scene_sim::{generate_scene, Scene, SimConfig};

/// The held-out scenes of `cfg`.
pub fn eval_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    let sim = cfg.eval_sim();
    cfg.eval_seeds().into_iter().map(|s| generate_scene(&sim, s)).collect()
}

/// Ground truth of a scene in metric form.
pub fn scene_ground_truth(scene: &Scene) -> Vec<GroundTruth> {
    scene.objects.iter().map(|o| GroundTruth::new(o.center.x, o.center.y, o.class)).collect()
}

/// Runs the model on every scene (in parallel, results in scene order).
pub fn predict_scenes(ctx: &ModelContext, params: &ModelParams, scenes: &[Scene], sim: &SimConfig) -> Result<Vec<SceneEval>> {
    scenes
        .par_iter()
        .map(|scene| {
            let input = SceneInput::render(scene, sim, ctx)?;
            Ok(SceneEval {
                id: scene.seed.to_string(),
                gts: scene_ground_truth(scene),
                dets: detect(ctx, params, &input)?,
            })
        })
        .collect()
}

/// Detections and metrics of `state` on `scenes`, rendered with `sim`.
pub fn evaluate(state: &ModelState, scenes: &[Scene], sim: &SimConfig) -> Result<(MetricsReport, Vec<SceneEval>)> {
    let ctx = ModelContext::new(&state.config)?;
    let evals = predict_scenes(&ctx, &state.params, scenes, sim)?;
    Ok((MetricsReport::compute(&evals, &state.config.eval.duplicates), evals))
}

/// Attention depth profile of one object seen by one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectProfile {
    pub scene: u64,
    pub object: usize,
    pub camera: usize,
    pub profile: DepthProfile,
}

/// For every object of `scenes` and every camera it projects into: the
/// first-layer logit of the key at the object's pixel (with its predicted
/// depth) as the object cell's query slides through `sweep` normalized depths.
pub fn object_depth_profiles(
    state: &ModelState,
    scenes: &[Scene],
    sim: &SimConfig,
    sweep: &[f64],
) -> Result<Vec<ObjectProfile>> {
    let ctx = ModelContext::new(&state.config)?;
    let layer = &state.params.layers[0];
    let mut out = Vec::new();
    for scene in scenes {
        let input = SceneInput::render(scene, sim, &ctx)?;
        for (k, cam) in ctx.cameras.iter().enumerate() {
            let (w, h) = (cam.width() as f64, cam.height() as f64);
            let features = &input.views[k].features;
            let depth = predict_depth(features, &state.params.depth)?;
            for (j, obj) in scene.objects.iter().enumerate() {
                let Ok(p) = ego_to_cam(obj.center, cam) else { continue };
                if !(p.u >= 0.0 && p.u < w && p.v >= 0.0 && p.v < h) {
                    continue;
                }
                let pix = p.v as usize * cam.width() + p.u as usize;
                let key = ProfileKey {
                    feature: features.row(pix).to_vec(),
                    uvd: NormalizedUvd::new((p.u.floor() + 0.5) / w, (p.v.floor() + 0.5) / h, depth.unit[pix]),
                };
                let (r, c) = bev_cell_of(obj.center.xy(), &ctx.grid)?;
                let content = state.params.bev_queries.row(ctx.grid.cell_index(r, c)).to_vec();
                let profile =
                    attention_depth_profile(&content, (p.u / w, p.v / h), sweep, &key, layer, &ctx.attention.encoder)?;
                out.push(ObjectProfile { scene: scene.seed, object: j, camera: k, profile });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: RunConfig,
    pub report: MetricsReport,
    pub final_loss: f64,
    /// Digest of the training scene seeds in visiting order.
    pub train_seed_digest: u64,
    pub eval_seed_digest: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Whether every row consumed the same training and evaluation scenes.
    pub fn same_data_streams(&self) -> bool {
        self.rows.windows(2).all(|w| {
            w[0].train_seed_digest == w[1].train_seed_digest && w[0].eval_seed_digest == w[1].eval_seed_digest
        })
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(7);
        writeln!(
            f,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>9}  {:>11}  {:>10}",
            "variant", "pe", "dns", "mAP", "NDS", "dup_rate", "depth_err"
        )?;
        for r in &self.rows {
            let pe = serde_json::to_value(r.config.da_sca_pe).unwrap();
            let dns = serde_json::to_value(r.config.dns).unwrap();
            writeln!(
                f,
                "{:<width$}  {:>8}  {:>8}  {:>8.4}  {:>9.4}  {:>11.4}  {:>10.4}",
                r.name,
                pe.as_str().unwrap_or("?"),
                dns.as_str().unwrap_or("?"),
                r.report.map,
                r.report.nds,
                r.report.duplicates.rate,
                r.report.depth_error,
            )?;
        }
        Ok(())
    }
}

fn digest(seeds: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for s in seeds {
        for b in s.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01B3);
        }
    }
    h
}

/// Trains and evaluates one model.
pub fn run_variant(name: &str, cfg: &RunConfig, out: Option<&Path>) -> Result<(AblationRow, ModelState)> {
    let trained = train(cfg, out)?;
    let scenes = eval_scenes(cfg)?;
    let (report, _) = evaluate(&trained.state, &scenes, &cfg.eval_sim())?;
    let row = AblationRow {
        name: name.to_string(),
        config: cfg.clone(),
        report,
        final_loss: trained.log.last().map_or(f64::NAN, |r| r.loss.total),
        train_seed_digest: digest(trained.log.iter().map(|r| r.scene_seed)),
        eval_seed_digest: digest(scenes.iter().map(|s| s.seed)),
    };
    Ok((row, trained.state))
}

/// The base run followed by one run per variant, all on the same seeds.
/// With `out`, each run's final checkpoint goes to `out/<name>.json`.
pub fn ablate(base: &RunConfig, variants: &[Variant], out: Option<&Path>) -> Result<AblationTable> {
    base.validate()?;
    let mut runs = vec![("base".to_string(), RunConfig { variants: None, ..base.clone() })];
    for v in variants {
        let cfg = v.apply(base);
        cfg.validate()?;
        runs.push((v.name.clone(), cfg));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (name, cfg) in runs {
        let (row, state) = run_variant(&name, &cfg, None)?;
        if let Some(dir) = out {
            state.save(&dir.join(format!("{name}.json")))?;
        }
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::DnsMode;
    use crate::harness::model::ModelParams;
    use crate::metrics::Detection;
    use crate::scene_sim::SimConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.sim = SimConfig { image_width: 8, image_height: 8, feature_dim: 12, ..SimConfig::default() };
        cfg.model.channels = 12;
        cfg.model.depth_hidden = 8;
        cfg.model.resolution = 8;
        cfg.optim.steps = 2;
        cfg.data.train_scenes = 2;
        cfg.data.eval_scenes = 3;
        cfg
    }

    #[test]
    fn evaluation_is_pure() {
        let cfg = tiny();
        let state = ModelState::init(&cfg).unwrap();
        let scenes = eval_scenes(&cfg).unwrap();
        let (a, da) = evaluate(&state, &scenes, &cfg.eval_sim()).unwrap();
        let (b, db) = evaluate(&state, &scenes, &cfg.eval_sim()).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert!(a.map < 0.2);
    }

    #[test]
    fn ground_truth_as_detections_is_perfect() {
        let cfg = RunConfig::default();
        let scenes = eval_scenes(&cfg).unwrap();
        let evals: Vec<SceneEval> = scenes
            .iter()
            .map(|s| {
                let gts = scene_ground_truth(s);
                let dets = gts.iter().map(|g| Detection::new(g.x, g.y, g.class, 1.0)).collect();
                SceneEval { id: s.seed.to_string(), gts, dets }
            })
            .collect();
        let r = MetricsReport::compute(&evals, &cfg.eval.duplicates);
        assert!((r.map - 1.0).abs() < 1e-12);
        assert_eq!(r.tp.mate, Some(0.0));
        assert_eq!(r.duplicates.rate, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_report() {
        let cfg = tiny();
        let trained = train(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        trained.state.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        let scenes = eval_scenes(&cfg).unwrap();
        assert_eq!(
            evaluate(&trained.state, &scenes, &cfg.eval_sim()).unwrap().0,
            evaluate(&loaded, &scenes, &cfg.eval_sim()).unwrap().0
        );
    }

    #[test]
    fn ablation_rows_share_data_streams() {
        let cfg = tiny();
        let table = ablate(&cfg, &[], None).unwrap();
        assert_eq!(table.rows.len(), 1);
        let variants = vec![
            Variant { name: "off".into(), da_sca_pe: None, dns: Some(DnsMode::Off), dns_layers: None },
            Variant { name: "random".into(), da_sca_pe: None, dns: Some(DnsMode::RandomNegatives), dns_layers: None },
        ];
        let table = ablate(&cfg, &variants, None).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.same_data_streams());
        assert_ne!(table.rows[0].final_loss, table.rows[1].final_loss);
        let text = table.to_string();
        assert!(text.contains("random") && text.contains("dup_rate"));
    }

    #[test]
    fn object_profiles_vary_only_with_the_depth_block() {
        let cfg = tiny();
        let state = ModelState::init(&cfg).unwrap();
        let scenes = eval_scenes(&cfg).unwrap();
        let sweep = [0.2, 0.5, 0.8];
        let profiles = object_depth_profiles(&state, &scenes, &cfg.eval_sim(), &sweep).unwrap();
        let objects: usize = scenes.iter().map(|s| s.objects.len()).sum();
        assert!(profiles.len() >= objects);
        for p in &profiles {
            assert_eq!(p.profile.full.len(), 3);
            assert!(p.profile.full_variance() > 0.0);
            assert!(p.profile.uv_only.windows(2).all(|w| w[0] == w[1]));
            assert!(p.profile.uv_only_variance() < 1e-20);
        }
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let cfg = tiny();
        let mut state = ModelState::init(&cfg).unwrap();
        let mut other = cfg.clone();
        other.model.resolution = 6;
        state.params = ModelParams::init(&other).unwrap();
        let scenes = eval_scenes(&cfg).unwrap();
        assert!(matches!(evaluate(&state, &scenes, &cfg.eval_sim()), Err(crate::Error::ShapeMismatch(_))));
    }
}
