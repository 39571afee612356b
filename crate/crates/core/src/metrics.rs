//! nuScenes-style detection metrics on BEV centers, plus two diagnostics for
//! depth confusion: duplicates along object rays and the along-ray part of
//! the translation error.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Center-distance thresholds of the mAP, meters.
pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching threshold of the true-positive error metrics, meters.
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    pub class: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<usize>,
}

impl Detection {
    pub fn new(x: f64, y: f64, class: usize, score: f64) -> Self {
        Self { x, y, z: None, class, score, size: None, yaw: None, velocity: None, attribute: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<usize>,
}

impl GroundTruth {
    pub fn new(x: f64, y: f64, class: usize) -> Self {
        Self { x, y, z: None, class, size: None, yaw: None, velocity: None, attribute: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub id: String,
    pub gts: Vec<GroundTruth>,
    pub dets: Vec<Detection>,
}

/// Detections and ground truth for a list of scenes, as read from a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDump {
    pub scenes: Vec<SceneEval>,
}

impl EvalDump {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn center_distance(d: &Detection, g: &GroundTruth) -> f64 {
    (d.x - g.x).hypot(d.y - g.y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub det: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    pub matches: Vec<Match>,
    pub unmatched_dets: Vec<usize>,
}

/// Indices of `dets` by descending score; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching in descending score order: each detection takes the
/// nearest unmatched ground truth of its class closer than `threshold`.
pub fn match_by_center_distance(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> Matching {
    let mut taken = vec![false; gts.len()];
    let mut out = Matching::default();
    for i in score_order(dets) {
        let d = &dets[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.class == d.class)
            .map(|(j, g)| (j, center_distance(d, g)))
            .filter(|&(_, dist)| dist < threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, distance)) => {
                taken[j] = true;
                out.matches.push(Match { det: i, gt: j, distance });
            }
            None => out.unmatched_dets.push(i),
        }
    }
    out
}

/// Linear interpolation with `numpy.interp` semantics: `xp` non-decreasing,
/// left of the range gives `fp[0]`, right of it gives `right`.
fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let n = xp.len();
    if x > xp[n - 1] {
        return right;
    }
    if x < xp[0] {
        return fp[0];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    if j == n - 1 {
        return fp[j];
    }
    fp[j] + (x - xp[j]) * (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j])
}

/// Area under the precision/recall curve of one class at one threshold,
/// 101-point interpolated, ignoring recall below [`MIN_RECALL`] and
/// precision below [`MIN_PRECISION`]. `None` if the class has no ground truth.
pub fn average_precision(scenes: &[SceneEval], class: usize, threshold: f64) -> Option<f64> {
    let npos: usize = scenes.iter().map(|s| s.gts.iter().filter(|g| g.class == class).count()).sum();
    if npos == 0 {
        return None;
    }
    let mut pool: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| sc.dets.iter().enumerate().filter(|(_, d)| d.class == class).map(move |(i, _)| (s, i)))
        .collect();
    if pool.is_empty() {
        return Some(0.0);
    }
    pool.sort_by(|a, b| scenes[b.0].dets[b.1].score.total_cmp(&scenes[a.0].dets[a.1].score));
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut rec, mut prec) = (Vec::with_capacity(pool.len()), Vec::with_capacity(pool.len()));
    for &(s, i) in &pool {
        let d = &scenes[s].dets[i];
        let best = scenes[s]
            .gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[s][*j] && g.class == class)
            .map(|(j, g)| (j, center_distance(d, g)))
            .filter(|&(_, dist)| dist < threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => {
                taken[s][j] = true;
                tp += 1.0;
            }
            None => fp += 1.0,
        }
        rec.push(tp / npos as f64);
        prec.push(tp / (tp + fp));
    }
    let first = (MIN_RECALL * 100.0).round() as usize + 1;
    let sum: f64 = (first..=100)
        .map(|k| (interp(k as f64 / 100.0, &rec, &prec, 0.0) - MIN_PRECISION).max(0.0))
        .sum();
    Some(sum / (101 - first) as f64 / (1.0 - MIN_PRECISION))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map: f64,
    /// Mean AP over thresholds per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean over classes present in the ground truth of the AP averaged over
/// `thresholds`. Zero when there is no ground truth at all.
pub fn compute_map(scenes: &[SceneEval], thresholds: &[f64]) -> MapSummary {
    let classes = scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| g.class + 1).chain(s.dets.iter().map(|d| d.class + 1)))
        .max()
        .unwrap_or(0);
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| average_precision(scenes, c, t)).collect();
            aps.map(|a| a.iter().sum::<f64>() / a.len() as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    MapSummary { map, per_class }
}

/// Mean true-positive errors at [`TP_THRESHOLD`]; `None` where no matched
/// pair carries the attribute.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TpMetrics {
    pub true_positives: usize,
    pub mate: Option<f64>,
    pub mase: Option<f64>,
    pub maoe: Option<f64>,
    pub mave: Option<f64>,
    pub maae: Option<f64>,
}

impl TpMetrics {
    pub fn as_array(&self) -> [Option<f64>; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }
}

fn scale_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    1.0 - inter / union
}

fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Matched (detection, ground truth) pairs at [`TP_THRESHOLD`], scene by scene.
pub fn true_positive_pairs(scenes: &[SceneEval]) -> Vec<(Detection, GroundTruth)> {
    scenes
        .iter()
        .flat_map(|s| {
            match_by_center_distance(&s.dets, &s.gts, TP_THRESHOLD)
                .matches
                .into_iter()
                .map(move |m| (s.dets[m.det].clone(), s.gts[m.gt].clone()))
        })
        .collect()
}

/// Averages each error over the matched pairs that carry the attribute.
pub fn compute_tp_metrics(pairs: &[(Detection, GroundTruth)]) -> TpMetrics {
    let (mut ate, mut ase, mut aoe, mut ave, mut aae) = (vec![], vec![], vec![], vec![], vec![]);
    for (d, g) in pairs {
        ate.push((d.x - g.x).hypot(d.y - g.y));
        if let (Some(a), Some(b)) = (d.size, g.size) {
            ase.push(scale_error(a, b));
        }
        if let (Some(a), Some(b)) = (d.yaw, g.yaw) {
            aoe.push(yaw_error(a, b));
        }
        if let (Some(a), Some(b)) = (d.velocity, g.velocity) {
            ave.push((a[0] - b[0]).hypot(a[1] - b[1]));
        }
        if let (Some(a), Some(b)) = (d.attribute, g.attribute) {
            aae.push(if a == b { 0.0 } else { 1.0 });
        }
    }
    TpMetrics {
        true_positives: ate.len(),
        mate: mean(&ate),
        mase: mean(&ase),
        maoe: mean(&aoe),
        mave: mean(&ave),
        maae: mean(&aae),
    }
}

/// `(5 mAP + sum(1 - min(1, e))) / 10`. Missing errors count as 1.
pub fn compute_nds(map: f64, tp_errors: [Option<f64>; 5]) -> f64 {
    let tp: f64 = tp_errors.iter().map(|e| 1.0 - e.unwrap_or(1.0).min(1.0)).sum();
    (5.0 * map + tp) / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DuplicateParams {
    /// Maximum bearing difference to a ground-truth ray, radians.
    pub angular_tolerance: f64,
    /// Detections this close to any ground-truth center are not duplicates.
    pub radial_exclusion: f64,
    /// Only detections scoring strictly above this are counted.
    pub score_threshold: f64,
}

impl Default for DuplicateParams {
    fn default() -> Self {
        Self { angular_tolerance: 2f64.to_radians(), radial_exclusion: 1.0, score_threshold: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DuplicateStats {
    pub duplicates: usize,
    pub ground_truths: usize,
    /// Duplicates per ground-truth object.
    pub rate: f64,
}

fn bearing_gap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let cross = a.0 * b.1 - a.1 * b.0;
    let dot = a.0 * b.0 + a.1 * b.1;
    cross.atan2(dot).abs()
}

/// Duplicates of each ground truth of one scene, in ground-truth order: the
/// confident detections of its class lying on its ray from the ego origin.
/// Detections within `radial_exclusion` of any ground-truth center are never
/// counted.
pub fn duplicates_per_ground_truth(scene: &SceneEval, params: &DuplicateParams) -> Vec<usize> {
    let stray: Vec<&Detection> = scene
        .dets
        .iter()
        .filter(|d| d.score > params.score_threshold)
        .filter(|d| scene.gts.iter().all(|g| (d.x - g.x).hypot(d.y - g.y) > params.radial_exclusion))
        .collect();
    scene
        .gts
        .iter()
        .map(|g| {
            stray
                .iter()
                .filter(|d| d.class == g.class && bearing_gap((d.x, d.y), (g.x, g.y)) <= params.angular_tolerance)
                .count()
        })
        .collect()
}

/// Total of [`duplicates_per_ground_truth`] over `scenes`, per ground truth.
pub fn duplicate_count_along_rays(scenes: &[SceneEval], params: &DuplicateParams) -> DuplicateStats {
    let mut duplicates = 0;
    let mut ground_truths = 0;
    for s in scenes {
        ground_truths += s.gts.len();
        duplicates += duplicates_per_ground_truth(s, params).iter().sum::<usize>();
    }
    let rate = if ground_truths == 0 { 0.0 } else { duplicates as f64 / ground_truths as f64 };
    DuplicateStats { duplicates, ground_truths, rate }
}

/// Splits the translation error of a detection into the components along
/// and across the ground truth's ray from the ego origin.
pub fn along_ray_error(det: (f64, f64), gt: (f64, f64)) -> (f64, f64) {
    let n = gt.0.hypot(gt.1);
    let (ex, ey) = (det.0 - gt.0, det.1 - gt.1);
    if n == 0.0 {
        return (0.0, ex.hypot(ey));
    }
    let (ux, uy) = (gt.0 / n, gt.1 / n);
    ((ex * ux + ey * uy).abs(), (ex * uy - ey * ux).abs())
}

/// Mean along-ray error over matched pairs; zero when there are none.
pub fn depth_translation_error(pairs: &[(Detection, GroundTruth)]) -> f64 {
    let errs: Vec<f64> = pairs.iter().map(|(d, g)| along_ray_error((d.x, d.y), (g.x, g.y)).0).collect();
    mean(&errs).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: usize,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub tp: TpMetrics,
    pub nds: f64,
    pub duplicates: DuplicateStats,
    pub depth_error: f64,
}

impl MetricsReport {
    pub fn compute(scenes: &[SceneEval], dup: &DuplicateParams) -> Self {
        let summary = compute_map(scenes, &DIST_THRESHOLDS);
        let pairs = true_positive_pairs(scenes);
        let tp = compute_tp_metrics(&pairs);
        Self {
            scenes: scenes.len(),
            nds: compute_nds(summary.map, tp.as_array()),
            map: summary.map,
            per_class_ap: summary.per_class,
            tp,
            duplicates: duplicate_count_along_rays(scenes, dup),
            depth_error: depth_translation_error(&pairs),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut rows = vec![
            ("scenes".to_string(), self.scenes.to_string()),
            ("mAP".into(), format!("{:.4}", self.map)),
            ("NDS".into(), format!("{:.4}", self.nds)),
            ("mATE".into(), opt(self.tp.mate)),
            ("mASE".into(), opt(self.tp.mase)),
            ("mAOE".into(), opt(self.tp.maoe)),
            ("mAVE".into(), opt(self.tp.mave)),
            ("mAAE".into(), opt(self.tp.maae)),
            ("true_positives".into(), self.tp.true_positives.to_string()),
            ("duplicates".into(), self.duplicates.duplicates.to_string()),
            ("duplicate_rate".into(), format!("{:.4}", self.duplicates.rate)),
            ("depth_error".into(), format!("{:.4}", self.depth_error)),
        ];
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            rows.push((format!("AP[class {c}]"), opt(*ap)));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<width$}  {v:>10}")?;
        }
        Ok(())
    }
}
