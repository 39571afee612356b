//! Normalization of `(u, v, d)` and the sine positional encoding built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CamPoint, CameraModel};

pub const DEFAULT_TEMPERATURE: f64 = 10_000.0;

/// `(u / w, v / h, d / d_max)`, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedUvd {
    pub un: f64,
    pub vn: f64,
    pub dn: f64,
}

impl NormalizedUvd {
    pub fn new(un: f64, vn: f64, dn: f64) -> Self {
        Self { un, vn, dn }
    }
}

pub fn normalize_uvd(c: CamPoint, cam: &CameraModel, grid: &BevGrid) -> Result<NormalizedUvd> {
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let inside = c.u >= 0.0 && c.u <= w && c.v >= 0.0 && c.v <= h && c.d > 0.0 && c.d <= grid.d_max;
    if !inside {
        return Err(Error::OutOfFrustum { u: c.u, v: c.v, d: c.d });
    }
    Ok(NormalizedUvd { un: c.u / w, vn: c.v / h, dn: c.d / grid.d_max })
}

/// Logistic squashing of a raw depth prediction into `(0, 1)`.
pub fn depth_to_unit(raw: f64) -> f64 {
    if raw >= 0.0 {
        1.0 / (1.0 + (-raw).exp())
    } else {
        let e = raw.exp();
        e / (1.0 + e)
    }
}

/// Whether the depth coordinate takes part in the encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    #[default]
    Uvd,
    UvOnly,
}

/// Output of the sine encoder; every entry lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosEncoding {
    pub values: Vec<f64>,
}

/// Sizes of the `(u, v, d)` blocks for an encoding of width `dim`.
pub fn block_sizes(dim: usize) -> Result<[usize; 3]> {
    if dim < 6 || !dim.is_multiple_of(2) {
        return Err(Error::BadDimension(dim));
    }
    let uv = (dim / 3) & !1;
    Ok([uv, uv, dim - 2 * uv])
}

/// Sine positional encoder over normalized `(u, v, d)`.
///
/// The output is split into contiguous u, v and d blocks. Inside a block of
/// size `B`, entries `2i` and `2i + 1` hold `sin` and `cos` of
/// `2 pi coord / temperature^(2i / B)`. In [`PeMode::UvOnly`] the d block is
/// zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineEncoder {
    dim: usize,
    blocks: [usize; 3],
    temperature: f64,
    mode: PeMode,
}

impl SineEncoder {
    pub fn new(dim: usize, temperature: f64, mode: PeMode) -> Result<Self> {
        let blocks = block_sizes(dim)?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { dim, blocks, temperature, mode })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> PeMode {
        self.mode
    }

    pub fn with_mode(self, mode: PeMode) -> Self {
        Self { mode, ..self }
    }

    /// Index range of the depth block.
    pub fn depth_block(&self) -> std::ops::Range<usize> {
        let start = self.blocks[0] + self.blocks[1];
        start..self.dim
    }

    fn angular_rate(&self, i: usize, block: usize) -> f64 {
        std::f64::consts::TAU / self.temperature.powf(2.0 * i as f64 / block as f64)
    }

    /// Writes the encoding into `out` (length `dim`).
    pub fn encode_into(&self, n: NormalizedUvd, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let coords = [n.un, n.vn, n.dn];
        let mut offset = 0;
        for (b, (&size, &coord)) in self.blocks.iter().zip(coords.iter()).enumerate() {
            let block = &mut out[offset..offset + size];
            if b == 2 && self.mode == PeMode::UvOnly {
                block.fill(0.0);
            } else {
                for i in 0..size / 2 {
                    let (s, c) = (coord * self.angular_rate(i, size)).sin_cos();
                    block[2 * i] = s;
                    block[2 * i + 1] = c;
                }
            }
            offset += size;
        }
    }

    pub fn encode(&self, n: NormalizedUvd) -> PosEncoding {
        let mut values = vec![0.0; self.dim];
        self.encode_into(n, &mut values);
        PosEncoding { values }
    }

    /// Derivative of the encoding with respect to `dn`, written into `out`.
    /// Only the depth block is nonzero.
    pub fn depth_derivative_into(&self, dn: f64, out: &mut [f64]) {
        out.fill(0.0);
        if self.mode == PeMode::UvOnly {
            return;
        }
        let size = self.blocks[2];
        let block = &mut out[self.depth_block()];
        for i in 0..size / 2 {
            let rate = self.angular_rate(i, size);
            let (s, c) = (dn * rate).sin_cos();
            block[2 * i] = rate * c;
            block[2 * i + 1] = -rate * s;
        }
    }
}

/// Sine encoding of `n` with width `dim`.
pub fn sine_pe(n: NormalizedUvd, dim: usize, temperature: f64) -> Result<PosEncoding> {
    Ok(SineEncoder::new(dim, temperature, PeMode::Uvd)?.encode(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eye_cam(w: usize, h: usize) -> CameraModel {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        CameraModel::new(1.0, 1.0, 0.0, 0.0, eye, [0.0; 3], w, h).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let grid = BevGrid::default().with_d_max(72.4).unwrap();
        let cam = eye_cam(640, 360);
        let n = normalize_uvd(CamPoint::new(320.0, 180.0, 36.2), &cam, &grid).unwrap();
        assert_eq!((n.un, n.vn, n.dn), (0.5, 0.5, 0.5));
        let n = normalize_uvd(CamPoint::new(0.0, 0.0, 72.4), &cam, &grid).unwrap();
        assert_eq!((n.un, n.vn, n.dn), (0.0, 0.0, 1.0));
        assert!(matches!(
            normalize_uvd(CamPoint::new(700.0, 100.0, 10.0), &cam, &grid),
            Err(Error::OutOfFrustum { .. })
        ));
        assert!(normalize_uvd(CamPoint::new(10.0, 10.0, 80.0), &cam, &grid).is_err());
        assert!(normalize_uvd(CamPoint::new(10.0, 10.0, 0.0), &cam, &grid).is_err());
    }

    #[test]
    fn block_split() {
        assert_eq!(block_sizes(6).unwrap(), [2, 2, 2]);
        assert_eq!(block_sizes(32).unwrap(), [10, 10, 12]);
        assert_eq!(block_sizes(256).unwrap(), [84, 84, 88]);
        assert!(matches!(block_sizes(4), Err(Error::BadDimension(4))));
        assert!(matches!(block_sizes(7), Err(Error::BadDimension(7))));
    }

    #[test]
    fn zero_input_gives_unit_cosines() {
        for dim in [6, 8, 32, 64] {
            let pe = sine_pe(NormalizedUvd::new(0.0, 0.0, 0.0), dim, DEFAULT_TEMPERATURE).unwrap();
            for pair in pe.values.chunks(2) {
                assert_eq!(pair, [0.0, 1.0]);
            }
        }
    }

    #[test]
    fn quarter_turn_in_first_block() {
        let pe = sine_pe(NormalizedUvd::new(0.25, 0.0, 0.0), 6, DEFAULT_TEMPERATURE).unwrap();
        assert!((pe.values[0] - 1.0).abs() < 1e-12);
        assert!(pe.values[1].abs() < 1e-12);
        assert_eq!(&pe.values[2..], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn depth_changes_encoding() {
        let a = sine_pe(NormalizedUvd::new(0.3, 0.6, 0.2), 32, DEFAULT_TEMPERATURE).unwrap();
        let b = sine_pe(NormalizedUvd::new(0.3, 0.6, 0.8), 32, DEFAULT_TEMPERATURE).unwrap();
        let dist: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(depth_to_unit(0.0), 0.5);
        for raw in [-30.0, -3.0, -0.1, 0.7, 2.0, 12.0] {
            assert!((depth_to_unit(raw) - (1.0 - depth_to_unit(-raw))).abs() <= 1e-15);
        }
        // e^{-2} from its Taylor series.
        let mut term = 1.0;
        let mut e_minus_two = 1.0;
        for k in 1..40 {
            term *= -2.0 / k as f64;
            e_minus_two += term;
        }
        assert!((depth_to_unit(2.0) - 1.0 / (1.0 + e_minus_two)).abs() < 1e-9);
        assert!((depth_to_unit(2.0) - 0.880_797_077_977_882_4).abs() < 1e-12);
    }

    #[test]
    fn depth_derivative_matches_finite_difference() {
        let enc = SineEncoder::new(32, DEFAULT_TEMPERATURE, PeMode::Uvd).unwrap();
        let n = NormalizedUvd::new(0.1, 0.7, 0.42);
        let mut grad = vec![0.0; 32];
        enc.depth_derivative_into(n.dn, &mut grad);
        let h = 1e-6;
        let hi = enc.encode(NormalizedUvd { dn: n.dn + h, ..n });
        let lo = enc.encode(NormalizedUvd { dn: n.dn - h, ..n });
        for k in 0..32 {
            let fd = (hi.values[k] - lo.values[k]) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "k={k}: {fd} vs {}", grad[k]);
        }
    }

    proptest! {
        #[test]
        fn entries_bounded(un in 0.0f64..=1.0, vn in 0.0f64..=1.0, dn in 0.0f64..=1.0, half in 3usize..64) {
            let pe = sine_pe(NormalizedUvd::new(un, vn, dn), 2 * half, DEFAULT_TEMPERATURE).unwrap();
            prop_assert!(pe.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn depth_only_touches_depth_block(un in 0.0f64..=1.0, vn in 0.0f64..=1.0, d0 in 0.0f64..=1.0, d1 in 0.0f64..=1.0) {
            let enc = SineEncoder::new(32, DEFAULT_TEMPERATURE, PeMode::Uvd).unwrap();
            let a = enc.encode(NormalizedUvd::new(un, vn, d0));
            let b = enc.encode(NormalizedUvd::new(un, vn, d1));
            let depth = enc.depth_block();
            prop_assert_eq!(&a.values[..depth.start], &b.values[..depth.start]);
            let uv_only = enc.with_mode(PeMode::UvOnly);
            prop_assert_eq!(uv_only.encode(NormalizedUvd::new(un, vn, d0)), uv_only.encode(NormalizedUvd::new(un, vn, d1)));
        }

        #[test]
        fn depth_steps_are_visible(un in 0.0f64..=1.0, vn in 0.0f64..=1.0, d0 in 0.0f64..=0.98) {
            let grid = BevGrid::default();
            let step = 1.0 / grid.d_max;
            let enc = SineEncoder::new(32, DEFAULT_TEMPERATURE, PeMode::Uvd).unwrap();
            let a = enc.encode(NormalizedUvd::new(un, vn, d0));
            let b = enc.encode(NormalizedUvd::new(un, vn, (d0 + step).min(1.0)));
            prop_assert!(a != b);
        }
    }
}
