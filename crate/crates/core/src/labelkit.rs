//! Image-plane lane labels: row-anchor resampling, rasterization, geometric
//! perturbation and pixel IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Sentinel used in row-anchor labels for rows a lane does not reach.
pub const MISSING: f64 = -2.0;

/// A lane as an ordered sequence of image points `(u, v)` with strictly
/// increasing `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane2D {
    points: Vec<(f64, f64)>,
}

impl Lane2D {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::ShapeMismatch("a lane needs at least two points".into()));
        }
        if points.windows(2).any(|w| w[1].1 <= w[0].1) {
            return Err(Error::ShapeMismatch("lane rows must strictly increase".into()));
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::ShapeMismatch("lane point is not finite".into()));
        }
        Ok(Self { points })
    }

    /// Sorts by row, averages points that share a row, and keeps the lane only
    /// if at least two distinct rows remain.
    pub fn from_unordered(mut points: Vec<(f64, f64)>) -> Option<Self> {
        points.retain(|p| p.0.is_finite() && p.1.is_finite());
        points.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        let mut run = 1.0;
        for p in points {
            match out.last_mut() {
                Some(last) if (p.1 - last.1).abs() < 1e-9 => {
                    last.0 = (last.0 * run + p.0) / (run + 1.0);
                    run += 1.0;
                }
                _ => {
                    out.push(p);
                    run = 1.0;
                }
            }
        }
        Self::new(out).ok()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn v_range(&self) -> (f64, f64) {
        (self.points[0].1, self.points[self.points.len() - 1].1)
    }

    /// Linear interpolation of `u` at row `v`; `None` outside the lane's rows.
    pub fn u_at(&self, v: f64) -> Option<f64> {
        let (lo, hi) = self.v_range();
        if v < lo || v > hi {
            return None;
        }
        let i = self.points.partition_point(|p| p.1 < v);
        if i == 0 {
            return Some(self.points[0].0);
        }
        let (u0, v0) = self.points[i - 1];
        let (u1, v1) = self.points[i];
        let t = (v - v0) / (v1 - v0);
        Some(u0 + t * (u1 - u0))
    }

    /// Maps every point through `f`, keeping the lane only if it is still valid.
    pub fn map_points(&self, f: impl Fn((f64, f64)) -> (f64, f64)) -> Option<Self> {
        Self::from_unordered(self.points.iter().copied().map(f).collect())
    }
}

/// Image size used for clipping and for the rotation pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

/// One frame's lanes sampled at fixed rows (TuSimple layout).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowAnchorLabel {
    pub h_samples: Vec<u32>,
    pub xs: Vec<Vec<f64>>,
}

impl RowAnchorLabel {
    /// Rows `start, start+step, ..., <= end`.
    pub fn rows(start: u32, end: u32, step: u32) -> Vec<u32> {
        (start..=end).step_by(step.max(1) as usize).collect()
    }

    /// Back to polylines, one point per valid anchor row.
    pub fn to_lanes(&self) -> Vec<Lane2D> {
        self.xs
            .iter()
            .filter_map(|xs| {
                let pts = xs
                    .iter()
                    .zip(&self.h_samples)
                    .filter(|(x, _)| **x >= 0.0)
                    .map(|(x, v)| (*x, *v as f64))
                    .collect();
                Lane2D::from_unordered(pts)
            })
            .collect()
    }
}

/// Samples each lane at the anchor rows. Lanes that reach none of the rows
/// are left out.
pub fn to_row_anchors(lanes: &[Lane2D], h_samples: &[u32]) -> RowAnchorLabel {
    let xs = lanes
        .iter()
        .map(|l| {
            h_samples.iter().map(|&v| l.u_at(v as f64).unwrap_or(MISSING)).collect::<Vec<_>>()
        })
        .filter(|xs| xs.iter().any(|x| *x >= 0.0))
        .collect();
    RowAnchorLabel { h_samples: h_samples.to_vec(), xs }
}

/// Binary H x W raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl LabelMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.bits[y * self.width + x] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// `self AND NOT other`.
    pub fn subtract(&mut self, other: &LabelMask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !*b;
        }
    }

    pub fn union_with(&mut self, other: &LabelMask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Draws every polyline with half-width `thickness` (pixel centers at integer
/// coordinates). Segments leaving the raster are clipped.
pub fn rasterize_mask(lanes: &[Lane2D], height: usize, width: usize, thickness: f64) -> LabelMask {
    let mut mask = LabelMask::zeros(width, height);
    if width == 0 || height == 0 {
        return mask;
    }
    for lane in lanes {
        for seg in lane.points().windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a.0.min(b.0) - thickness).floor().max(0.0);
            let x1 = (a.0.max(b.0) + thickness).ceil().min(width as f64 - 1.0);
            let y0 = (a.1.min(b.1) - thickness).floor().max(0.0);
            let y1 = (a.1.max(b.1) + thickness).ceil().min(height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for y in y0 as usize..=y1 as usize {
                for x in x0 as usize..=x1 as usize {
                    if segment_distance(x as f64, y as f64, a, b) <= thickness + 1e-9 {
                        mask.set(x, y);
                    }
                }
            }
        }
    }
    mask
}

/// Scales lane coordinates into another raster: `u' = u * su + ou`, `v' = v * sv + ov`.
pub fn scale_lanes(lanes: &[Lane2D], su: f64, sv: f64, ou: f64, ov: f64) -> Vec<Lane2D> {
    lanes.iter().filter_map(|l| l.map_points(|(u, v)| (u * su + ou, v * sv + ov))).collect()
}

/// `|a AND b| / |a OR b|`, 1.0 for two empty masks.
pub fn pixel_iou(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch { expected: a.bits.len(), actual: b.bits.len() });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Rotation about the image center followed by a pixel translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LaneTransform {
    pub rotation_deg: f64,
    pub translate_px: (f64, f64),
}

impl LaneTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply_point(&self, p: (f64, f64), size: ImageSize) -> (f64, f64) {
        let (cu, cv) = size.center();
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (du, dv) = (p.0 - cu, p.1 - cv);
        (cu + c * du - s * dv + self.translate_px.0, cv + s * du + c * dv + self.translate_px.1)
    }

    /// The transform undoing `self`: rotate by `-theta`, then translate by `-R^T d`.
    pub fn inverse(&self) -> Self {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (tu, tv) = self.translate_px;
        Self { rotation_deg: -self.rotation_deg, translate_px: (-(c * tu + s * tv), -(-s * tu + c * tv)) }
    }
}

/// Transforms every lane and drops points that leave the image. Lanes with
/// fewer than two surviving points disappear.
pub fn apply_transform(lanes: &[Lane2D], t: &LaneTransform, size: ImageSize) -> Vec<Lane2D> {
    lanes
        .iter()
        .filter_map(|l| {
            let pts = l
                .points()
                .iter()
                .map(|&p| t.apply_point(p, size))
                .filter(|&(u, v)| size.contains(u, v))
                .collect();
            Lane2D::from_unordered(pts)
        })
        .collect()
}

/// Label noise model: random rigid perturbation plus lane removal/injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub max_rot_deg: f64,
    pub max_trans_frac: f64,
    pub p_drop: f64,
    pub p_inject: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rot_deg: 5.0, max_trans_frac: 0.05, p_drop: 0.1, p_inject: 0.1 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { max_rot_deg: 0.0, max_trans_frac: 0.0, p_drop: 0.0, p_inject: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.p_drop) || !p_ok(self.p_inject) {
            return Err(Error::Config("augment probabilities must lie in [0, 1]".into()));
        }
        if !(self.max_rot_deg.is_finite() && self.max_trans_frac.is_finite()) {
            return Err(Error::Config("augment bounds must be finite".into()));
        }
        Ok(())
    }
}

/// Mean horizontal gap between two lanes over the rows both cover.
fn mean_gap(a: &Lane2D, b: &Lane2D) -> Option<f64> {
    let gaps: Vec<f64> = a.points().iter().filter_map(|&(u, v)| b.u_at(v).map(|ub| ub - u)).collect();
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// A copy of `lanes[idx]` moved one lane spacing away from its nearest
/// neighbour (mirror of the neighbour); with no neighbour, shifted by 15% of
/// the width to a random side.
fn injected_lane(lanes: &[Lane2D], idx: usize, size: ImageSize, rng: &mut SeededRng) -> Option<Lane2D> {
    let base = &lanes[idx];
    let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    let neighbour = lanes
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != idx)
        .filter_map(|(_, l)| mean_gap(base, l).map(|g| (l, g)))
        .min_by(|x, y| x.1.abs().total_cmp(&y.1.abs()));
    let shifted: Vec<(f64, f64)> = match neighbour {
        Some((nb, gap)) => base
            .points()
            .iter()
            .map(|&(u, v)| (2.0 * u - nb.u_at(v).unwrap_or(u + gap), v))
            .collect(),
        None => {
            let d = side * 0.15 * size.width as f64;
            base.points().iter().map(|&(u, v)| (u + d, v)).collect()
        }
    };
    Lane2D::from_unordered(shifted.into_iter().filter(|&(u, v)| size.contains(u, v)).collect())
}

/// Draw order: rotation, horizontal shift, vertical shift, one drop draw per
/// lane, the injection draw, then the injection choices.
pub fn perturb_labels(
    lanes: &[Lane2D],
    cfg: &AugmentConfig,
    size: ImageSize,
    rng: &mut SeededRng,
) -> (Vec<Lane2D>, LaneTransform) {
    let max_t = cfg.max_trans_frac * size.width as f64;
    let t = LaneTransform {
        rotation_deg: rng.range(-cfg.max_rot_deg, cfg.max_rot_deg),
        translate_px: (rng.range(-max_t, max_t), rng.range(-max_t, max_t)),
    };
    let mut kept: Vec<Lane2D> = lanes.iter().filter(|_| !rng.bernoulli(cfg.p_drop)).cloned().collect();
    if rng.bernoulli(cfg.p_inject) && !lanes.is_empty() {
        let idx = rng.index(lanes.len());
        if let Some(extra) = injected_lane(lanes, idx, size, rng) {
            kept.push(extra);
        }
    }
    (apply_transform(&kept, &t, size), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SIZE: ImageSize = ImageSize { width: 1280, height: 720 };

    fn lane(pts: &[(f64, f64)]) -> Lane2D {
        Lane2D::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn row_anchor_interpolation() {
        let l = lane(&[(100.0, 10.0), (200.0, 110.0)]);
        let r = to_row_anchors(&[l], &[5, 60]);
        assert_eq!(r.xs, vec![vec![MISSING, 150.0]]);
        assert!(to_row_anchors(&[], &[5, 60]).xs.is_empty());
    }

    #[test]
    fn lane_validation() {
        assert!(Lane2D::new(vec![(0.0, 0.0)]).is_err());
        assert!(Lane2D::new(vec![(0.0, 5.0), (1.0, 5.0)]).is_err());
        let l = Lane2D::from_unordered(vec![(2.0, 5.0), (1.0, 3.0), (4.0, 5.0)]).unwrap();
        assert_eq!(l.points(), &[(1.0, 3.0), (3.0, 5.0)]);
    }

    #[test]
    fn raster_vertical_band() {
        let m = rasterize_mask(&[lane(&[(320.0, 0.0), (320.0, 719.0)])], 720, 1280, 3.0);
        for y in [0usize, 100, 719] {
            let cols: Vec<usize> = (0..1280).filter(|&x| m.get(x, y)).collect();
            assert_eq!(cols, (317..=323).collect::<Vec<_>>());
        }
        assert!(rasterize_mask(&[], 720, 1280, 5.0).is_empty());
    }

    #[test]
    fn raster_duplicate_lane_is_idempotent() {
        let l = lane(&[(100.0, 50.0), (300.0, 700.0)]);
        let one = rasterize_mask(&[l.clone()], 720, 1280, 5.0);
        let two = rasterize_mask(&[l.clone(), l], 720, 1280, 5.0);
        assert_eq!(one, two);
    }

    #[test]
    fn raster_clips_out_of_bounds() {
        let m = rasterize_mask(&[lane(&[(-100.0, -100.0), (2000.0, 2000.0)])], 36, 64, 1.0);
        assert!(m.count() > 0);
    }

    #[test]
    fn transform_basics() {
        let l = vec![lane(&[(600.0, 100.0), (620.0, 400.0)])];
        assert_eq!(apply_transform(&l, &LaneTransform::identity(), SIZE), l);
        let t = LaneTransform { rotation_deg: 4.0, translate_px: (0.0, 0.0) };
        let c = t.apply_point((640.0, 360.0), SIZE);
        assert!((c.0 - 640.0).abs() < 1e-12 && (c.1 - 360.0).abs() < 1e-12);
        let shift = LaneTransform { rotation_deg: 0.0, translate_px: (64.0, 0.0) };
        assert_eq!(shift.apply_point((600.0, 200.0), SIZE), (664.0, 200.0));
    }

    #[test]
    fn iou_cases() {
        let mut a = LabelMask::zeros(4, 1);
        let mut b = LabelMask::zeros(4, 1);
        assert_eq!(pixel_iou(&a, &b).unwrap(), 1.0);
        a.set(0, 0);
        a.set(1, 0);
        b.set(2, 0);
        b.set(3, 0);
        assert_eq!(pixel_iou(&a, &b).unwrap(), 0.0);
        b.set(0, 0);
        b.set(1, 0);
        assert_eq!(pixel_iou(&a, &b).unwrap(), 0.5);
        assert_eq!(pixel_iou(&b, &b).unwrap(), 1.0);
        assert!(matches!(pixel_iou(&a, &LabelMask::zeros(2, 2)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn perturb_degenerate_configs() {
        let lanes = vec![lane(&[(300.0, 400.0), (100.0, 700.0)]), lane(&[(700.0, 400.0), (900.0, 700.0)])];
        let mut rng = SeededRng::new(3);
        let (out, t) = perturb_labels(&lanes, &AugmentConfig::none(), SIZE, &mut rng);
        assert_eq!(out, lanes);
        assert_eq!(t, LaneTransform::identity());
        let drop_all = AugmentConfig { p_drop: 1.0, ..AugmentConfig::none() };
        assert!(perturb_labels(&lanes, &drop_all, SIZE, &mut rng).0.is_empty());
        let cfg = AugmentConfig::default();
        let a = perturb_labels(&lanes, &cfg, SIZE, &mut SeededRng::new(9));
        let b = perturb_labels(&lanes, &cfg, SIZE, &mut SeededRng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn injection_mirrors_neighbour() {
        let lanes = vec![lane(&[(400.0, 400.0), (400.0, 700.0)]), lane(&[(600.0, 400.0), (600.0, 700.0)])];
        let cfg = AugmentConfig { p_inject: 1.0, ..AugmentConfig::none() };
        let (out, _) = perturb_labels(&lanes, &cfg, SIZE, &mut SeededRng::new(0));
        assert_eq!(out.len(), 3);
        let u = out[2].points()[0].0;
        assert!((u - 200.0).abs() < 1e-9 || (u - 800.0).abs() < 1e-9);
    }

    fn arb_lane() -> impl Strategy<Value = Lane2D> {
        (100.0f64..1100.0, -1.0f64..1.0, 380.0f64..500.0)
            .prop_map(|(u0, slope, v0)| {
                let pts = (0..10).map(|k| (u0 + slope * k as f64 * 20.0, v0 + k as f64 * 20.0)).collect();
                Lane2D::new(pts).unwrap()
            })
    }

    proptest! {
        #[test]
        fn transform_inverse_round_trip(l in arb_lane(), rot in -5.0f64..5.0, du in -64.0f64..64.0, dv in -64.0f64..64.0) {
            let t = LaneTransform { rotation_deg: rot, translate_px: (du, dv) };
            let inv = t.inverse();
            for &p in l.points() {
                let q = inv.apply_point(t.apply_point(p, SIZE), SIZE);
                prop_assert!((q.0 - p.0).abs() < 0.5 && (q.1 - p.1).abs() < 0.5);
            }
        }

        #[test]
        fn raster_monotone_and_iou_symmetric(a in arb_lane(), b in arb_lane()) {
            let ma = rasterize_mask(&[a.clone()], 72, 128, 1.0);
            let scaled = scale_lanes(&[a, b], 0.1, 0.1, 0.0, 0.0);
            let m1 = rasterize_mask(&scaled[..1], 72, 128, 1.0);
            let m2 = rasterize_mask(&scaled, 72, 128, 1.0);
            prop_assert!(m1.bits.iter().zip(&m2.bits).all(|(x, y)| !*x || *y));
            prop_assert_eq!(pixel_iou(&m1, &m2).unwrap(), pixel_iou(&m2, &m1).unwrap());
            if !ma.is_empty() {
                prop_assert_eq!(pixel_iou(&ma, &ma).unwrap(), 1.0);
            }
            if m1 != m2 && !m1.is_empty() {
                prop_assert!(pixel_iou(&m1, &m2).unwrap() < 1.0);
            }
        }
    }
}
