//! Dense per-cell detection head: class logits and center offsets for every
//! BEV cell, its training loss, decoding, and rescale-based query selection.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::depth_to_unit;
use crate::error::{shape_check, Error, Result};
use crate::geometry::{bev_cell_of, BevGrid};
use crate::metrics::Detection;
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetHeadParams {
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
    pub w_off: Array2<f64>,
    pub b_off: Array1<f64>,
}

impl DetHeadParams {
    pub fn zeros(channels: usize, classes: usize) -> Self {
        Self {
            w_cls: Array2::zeros((channels, classes)),
            b_cls: Array1::zeros(classes),
            w_off: Array2::zeros((channels, 2)),
            b_off: Array1::zeros(2),
        }
    }

    /// Small random weights; class biases start at the logit of `prior`.
    pub fn random<R: Rng + ?Sized>(channels: usize, classes: usize, prior: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.1 / (channels as f64).sqrt()).unwrap();
        let mut p = Self::zeros(channels, classes);
        p.w_cls.mapv_inplace(|_| normal.sample(rng));
        p.w_off.mapv_inplace(|_| normal.sample(rng));
        p.b_cls.fill((prior / (1.0 - prior)).ln());
        p
    }

    pub fn channels(&self) -> usize {
        self.w_cls.nrows()
    }

    pub fn classes(&self) -> usize {
        self.w_cls.ncols()
    }
}

impl Parameters for DetHeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("det.w_cls", self.w_cls.as_slice().unwrap());
        f("det.b_cls", self.b_cls.as_slice().unwrap());
        f("det.w_off", self.w_off.as_slice().unwrap());
        f("det.b_off", self.b_off.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("det.w_cls", self.w_cls.as_slice_mut().unwrap());
        f("det.b_cls", self.b_cls.as_slice_mut().unwrap());
        f("det.w_off", self.w_off.as_slice_mut().unwrap());
        f("det.b_off", self.b_off.as_slice_mut().unwrap());
    }
}

/// Per-cell outputs. Offsets are in cell units relative to the cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct DetOutput {
    pub logits: Array2<f64>,
    pub offsets: Array2<f64>,
}

pub fn detection_head(features: &Array2<f64>, params: &DetHeadParams) -> Result<DetOutput> {
    shape_check(features.ncols() == params.channels(), || {
        format!("detection head expects {} channels, got {}", params.channels(), features.ncols())
    })?;
    Ok(DetOutput {
        logits: features.dot(&params.w_cls) + &params.b_cls,
        offsets: features.dot(&params.w_off) + &params.b_off,
    })
}

/// Backpropagates output gradients into the head and its input features.
pub fn detection_head_backward(
    features: &Array2<f64>,
    params: &DetHeadParams,
    d_logits: &Array2<f64>,
    d_offsets: &Array2<f64>,
) -> Result<(DetHeadParams, Array2<f64>)> {
    shape_check(d_logits.nrows() == features.nrows() && d_offsets.nrows() == features.nrows(), || {
        "detection gradients do not match the feature rows".into()
    })?;
    let grads = DetHeadParams {
        w_cls: features.t().dot(d_logits),
        b_cls: d_logits.sum_axis(Axis(0)),
        w_off: features.t().dot(d_offsets),
        b_off: d_offsets.sum_axis(Axis(0)),
    };
    let d_features = d_logits.dot(&params.w_cls.t()) + d_offsets.dot(&params.w_off.t());
    Ok((grads, d_features))
}

/// One positive cell: its class and the object center offset in cell units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetTarget {
    pub cell: usize,
    pub class: usize,
    pub offset: [f64; 2],
}

/// Targets for objects given as `((x, y), class)`. Objects outside the grid
/// are dropped.
pub fn detection_targets(objects: &[((f64, f64), usize)], grid: &BevGrid) -> Vec<DetTarget> {
    let cell = grid.cell_size();
    objects
        .iter()
        .filter_map(|&(xy, class)| {
            let (r, c) = bev_cell_of(xy, grid).ok()?;
            let (cx, cy) = grid.cell_center(r, c);
            Some(DetTarget { cell: grid.cell_index(r, c), class, offset: [(xy.0 - cx) / cell, (xy.1 - cy) / cell] })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub w_offset: f64,
}

#[derive(Debug, Clone)]
pub struct DetLoss {
    pub value: f64,
    pub classification: f64,
    pub offset: f64,
    pub d_logits: Array2<f64>,
    pub d_offsets: Array2<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = depth_to_unit(z);
    if positive {
        let log_p = -softplus(-z);
        let m = (1.0 - p).powf(gamma);
        (-alpha * m * log_p, alpha * m * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(z);
        let m = p.powf(gamma);
        (-(1.0 - alpha) * m * log_q, (1.0 - alpha) * m * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Focal loss over every cell and class plus L1 on the offsets of positive
/// cells, both divided by the number of positive cells (at least one). When
/// two objects share a cell the first one sets the offset target.
pub fn detection_loss(out: &DetOutput, targets: &[DetTarget], cfg: &DetLossConfig) -> Result<DetLoss> {
    let (cells, classes) = out.logits.dim();
    shape_check(out.offsets.dim() == (cells, 2), || format!("offsets {:?} for {cells} cells", out.offsets.dim()))?;
    let mut positive = Array2::from_elem((cells, classes), false);
    let mut offset_target: Vec<Option<[f64; 2]>> = vec![None; cells];
    for t in targets {
        if t.cell >= cells || t.class >= classes {
            return Err(Error::ShapeMismatch(format!("target cell {} class {} out of range", t.cell, t.class)));
        }
        positive[[t.cell, t.class]] = true;
        offset_target[t.cell].get_or_insert(t.offset);
    }
    let n_pos = offset_target.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut d_logits = Array2::zeros((cells, classes));
    let mut classification = 0.0;
    for ((z, pos), d) in out.logits.iter().zip(positive.iter()).zip(d_logits.iter_mut()) {
        let (l, g) = focal(*z, *pos, cfg.alpha, cfg.gamma);
        classification += l;
        *d = g / n_pos;
    }
    classification /= n_pos;
    let mut d_offsets = Array2::zeros((cells, 2));
    let mut offset = 0.0;
    for (cell, t) in offset_target.iter().enumerate() {
        let Some(t) = t else { continue };
        for k in 0..2 {
            let diff = out.offsets[[cell, k]] - t[k];
            offset += diff.abs();
            d_offsets[[cell, k]] = cfg.w_offset * signum0(diff) / n_pos;
        }
    }
    offset /= n_pos;
    Ok(DetLoss { value: classification + cfg.w_offset * offset, classification, offset, d_logits, d_offsets })
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Best class and its probability for every cell.
pub fn cell_scores(out: &DetOutput) -> Vec<(usize, f64)> {
    out.logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (c, &z)| {
                let p = depth_to_unit(z);
                if p > best.1 {
                    (c, p)
                } else {
                    best
                }
            })
        })
        .collect()
}

/// Cells whose best probability exceeds `threshold` and that win their 3x3
/// neighborhood (on equal scores the lower cell index wins), placed at the
/// cell center plus the predicted offset.
pub fn decode_detections(out: &DetOutput, grid: &BevGrid, threshold: f64) -> Result<Vec<Detection>> {
    let n = grid.resolution;
    shape_check(out.logits.nrows() == n * n, || format!("{} cells for a {n}x{n} grid", out.logits.nrows()))?;
    let scores = cell_scores(out);
    let mut dets = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let idx = grid.cell_index(r, c);
            let (class, score) = scores[idx];
            if score <= threshold {
                continue;
            }
            let mut keep = true;
            for nr in r.saturating_sub(1)..=(r + 1).min(n - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(n - 1) {
                    let j = grid.cell_index(nr, nc);
                    if j != idx && (scores[j].1 > score || (scores[j].1 == score && j < idx)) {
                        keep = false;
                    }
                }
            }
            if keep {
                let (x, y) = grid.cell_center(r, c);
                let cell = grid.cell_size();
                dets.push(Detection::new(
                    x + out.offsets[[idx, 0]] * cell,
                    y + out.offsets[[idx, 1]] * cell,
                    class,
                    score,
                ));
            }
        }
    }
    Ok(dets)
}

/// Queries picked from a coarsened BEV map.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySelection {
    /// Row-major coarse cell indices, best first.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// One row per selected query.
    pub features: Array2<f64>,
    pub ref_points: Vec<(f64, f64)>,
}

/// Bilinear resize of a row-major `fine x fine` map to `coarse x coarse`,
/// sampling at coarse cell centers.
pub fn bilinear_resize(features: &Array2<f64>, fine: usize, coarse: usize) -> Result<Array2<f64>> {
    shape_check(features.nrows() == fine * fine, || format!("{} rows for a {fine}x{fine} map", features.nrows()))?;
    let axis = |i: usize| {
        let src = ((i as f64 + 0.5) * fine as f64 / coarse as f64 - 0.5).clamp(0.0, (fine - 1) as f64);
        let i0 = src.floor() as usize;
        (i0, (i0 + 1).min(fine - 1), src - i0 as f64)
    };
    let mut out = Array2::zeros((coarse * coarse, features.ncols()));
    for r in 0..coarse {
        let (r0, r1, fr) = axis(r);
        for c in 0..coarse {
            let (c0, c1, fc) = axis(c);
            let mut row = out.row_mut(r * coarse + c);
            for (rr, cc, w) in [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c1, (1.0 - fr) * fc),
                (r1, c0, fr * (1.0 - fc)),
                (r1, c1, fr * fc),
            ] {
                if w != 0.0 {
                    row.scaled_add(w, &features.row(rr * fine + cc));
                }
            }
        }
    }
    Ok(out)
}

/// Resizes the BEV map to `coarse x coarse`, scores every coarse cell by the
/// best class probability of the detection classifier and keeps the top `k`
/// (ties by row-major index). Reference points are coarse cell centers.
pub fn rescale_query_selection(
    features: &Array2<f64>,
    fine: usize,
    coarse: usize,
    k: usize,
    head: &DetHeadParams,
    extent: f64,
) -> Result<QuerySelection> {
    if coarse == 0 || coarse > fine {
        return Err(Error::InvalidConfig(format!("coarse size {coarse} must be in 1..={fine}")));
    }
    if k > coarse * coarse {
        return Err(Error::InvalidConfig(format!("cannot select {k} of {} cells", coarse * coarse)));
    }
    let small = bilinear_resize(features, fine, coarse)?;
    let logits = small.dot(&head.w_cls) + &head.b_cls;
    let scores: Vec<f64> =
        logits.axis_iter(Axis(0)).map(|r| r.iter().map(|&z| depth_to_unit(z)).fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    let grid = BevGrid::new(extent, coarse)?;
    Ok(QuerySelection {
        features: small.select(Axis(0), &order),
        scores: order.iter().map(|&i| scores[i]).collect(),
        ref_points: order.iter().map(|&i| grid.cell_center_index(i)).collect(),
        indices: order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid() -> BevGrid {
        BevGrid::new(51.2, 20).unwrap()
    }

    #[test]
    fn zero_head_detects_nothing_above_six_tenths() {
        let f = Array2::from_shape_fn((400, 8), |(i, j)| (i * j) as f64 * 0.01);
        let out = detection_head(&f, &DetHeadParams::zeros(8, 3)).unwrap();
        assert!(out.logits.iter().all(|&z| depth_to_unit(z) == 0.5));
        assert!(decode_detections(&out, &grid(), 0.6).unwrap().is_empty());
    }

    #[test]
    fn one_hot_cell_gives_one_detection() {
        let g = grid();
        let mut logits = Array2::from_elem((400, 3), -10.0);
        let mut offsets = Array2::zeros((400, 2));
        let idx = g.cell_index(4, 13);
        logits[[idx, 2]] = 5.0;
        offsets[[idx, 0]] = 0.25;
        offsets[[idx, 1]] = -0.5;
        let dets = decode_detections(&DetOutput { logits, offsets }, &g, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        let (cx, cy) = g.cell_center(4, 13);
        assert!((dets[0].x - (cx + 0.25 * 5.12)).abs() < 1e-12);
        assert!((dets[0].y - (cy - 0.5 * 5.12)).abs() < 1e-12);
        assert_eq!(dets[0].class, 2);
    }

    #[test]
    fn nms_keeps_local_maxima_only() {
        let g = grid();
        let mut logits = Array2::from_elem((400, 1), -10.0);
        logits[[g.cell_index(5, 5), 0]] = 3.0;
        logits[[g.cell_index(5, 6), 0]] = 2.0;
        logits[[g.cell_index(5, 8), 0]] = 1.0;
        // Equal neighbors: the lower index survives.
        logits[[g.cell_index(10, 10), 0]] = 1.5;
        logits[[g.cell_index(10, 11), 0]] = 1.5;
        let dets = decode_detections(&DetOutput { logits, offsets: Array2::zeros((400, 2)) }, &g, 0.5).unwrap();
        let cells: Vec<(f64, f64)> = dets.iter().map(|d| (d.x, d.y)).collect();
        assert_eq!(cells, vec![g.cell_center(5, 5), g.cell_center(5, 8), g.cell_center(10, 10)]);
    }

    #[test]
    fn focal_matches_definition() {
        for &z in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            let p: f64 = 1.0 / (1.0 + (-z as f64).exp());
            let (lp, _) = focal(z, true, 0.25, 2.0);
            let (ln, _) = focal(z, false, 0.25, 2.0);
            assert!((lp - (-0.25 * (1.0 - p).powi(2) * p.ln())).abs() < 1e-12);
            assert!((ln - (-0.75 * p.powi(2) * (1.0 - p).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_gradient_matches_differences() {
        for &z in &[-6.0, -1.3, 0.0, 0.4, 2.5, 9.0] {
            for pos in [true, false] {
                let h = 1e-6;
                let fd = (focal(z + h, pos, 0.25, 2.0).0 - focal(z - h, pos, 0.25, 2.0).0) / (2.0 * h);
                let g = focal(z, pos, 0.25, 2.0).1;
                assert!((fd - g).abs() <= 1e-7 + 1e-5 * g.abs(), "z={z} pos={pos}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn targets_use_cell_units() {
        let g = grid();
        let t = detection_targets(&[((5.12, -5.12), 1), ((99.0, 0.0), 0)], &g);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].cell, g.cell_index(9, 11));
        assert!((t[0].offset[0] + 0.5).abs() < 1e-12 && (t[0].offset[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rescale_selects_requested_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Array2::from_shape_fn((200 * 200, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let head = DetHeadParams::random(4, 3, 0.01, &mut rng);
        let sel = rescale_query_selection(&f, 200, 50, 900, &head, 51.2).unwrap();
        assert_eq!(sel.indices.len(), 900);
        assert_eq!(sel.features.nrows(), 900);
        assert!(sel.ref_points.iter().all(|&(x, y)| x.abs() < 51.2 && y.abs() < 51.2));
        assert!(matches!(rescale_query_selection(&f, 200, 50, 2501, &head, 51.2), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rescale_uniform_scores_take_row_major_prefix() {
        let f = Array2::zeros((200 * 200, 4));
        let sel = rescale_query_selection(&f, 200, 50, 900, &DetHeadParams::zeros(4, 2), 51.2).unwrap();
        assert_eq!(sel.indices, (0..900).collect::<Vec<_>>());
    }

    #[test]
    fn rescale_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let f = Array2::from_shape_fn((40 * 40, 6), |_| rng.sample::<f64, _>(StandardNormal));
            let head = DetHeadParams::random(6, 3, 0.01, &mut rng);
            let sel = rescale_query_selection(&f, 40, 10, 37, &head, 51.2).unwrap();
            let small = bilinear_resize(&f, 40, 10).unwrap();
            let mut scored: Vec<(f64, usize)> = (0..100)
                .map(|i| {
                    let best = (0..3)
                        .map(|k| {
                            let z: f64 = (0..6).map(|j| small[[i, j]] * head.w_cls[[j, k]]).sum::<f64>() + head.b_cls[k];
                            1.0 / (1.0 + (-z).exp())
                        })
                        .fold(f64::MIN, f64::max);
                    (best, i)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = scored[..37].iter().map(|s| s.1).collect();
            assert_eq!(sel.indices, expected);
        }
    }

    #[test]
    fn bilinear_identity_and_average() {
        let f = Array2::from_shape_fn((16, 2), |(i, j)| (i * 2 + j) as f64);
        assert_eq!(bilinear_resize(&f, 4, 4).unwrap(), f);
        // Halving averages each 2x2 block.
        let half = bilinear_resize(&f, 4, 2).unwrap();
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            for j in 0..2 {
                let block: f64 = [(2 * r, 2 * c), (2 * r, 2 * c + 1), (2 * r + 1, 2 * c), (2 * r + 1, 2 * c + 1)]
                    .iter()
                    .map(|&(a, b)| f[[a * 4 + b, j]])
                    .sum();
                assert!((half[[r * 2 + c, j]] - block / 4.0).abs() < 1e-12);
            }
        }
    }
}
