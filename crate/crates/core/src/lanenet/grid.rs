//! Anchor-grid lane encoding: per cell a lane-presence probability, `n`
//! horizontal offsets at fixed sub-rows, and the lane's starting row.

use crate::error::{Error, Result};
use crate::labelkit::Lane2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub w: usize,
    pub h: usize,
    /// Offsets per cell.
    pub n: usize,
    pub img_w: usize,
    pub img_h: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { w: 16, h: 9, n: 4, img_w: 1280, img_h: 720 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w * self.h == 0 || self.n == 0 || self.img_w == 0 || self.img_h == 0 {
            return Err(Error::Config("grid: w*h, n and the image size must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.w * self.h
    }

    pub fn cell_w(&self) -> f64 {
        self.img_w as f64 / self.w as f64
    }

    pub fn cell_h(&self) -> f64 {
        self.img_h as f64 / self.h as f64
    }

    /// Row-major cell index of column `i`, row `j`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.w + i
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.cell_w(), (j as f64 + 0.5) * self.cell_h())
    }

    /// Image row of sub-row `k` in grid row `j`.
    pub fn partition_row(&self, j: usize, k: usize) -> f64 {
        (j as f64 + (k as f64 + 0.5) / self.n as f64) * self.cell_h()
    }
}

/// Dense grid prediction or target. `obj` is only meaningful for targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLaneTensor {
    pub cfg: GridConfig,
    /// Lane-presence probability per cell.
    pub cls: Vec<f64>,
    /// `cells x n` horizontal offsets from the cell center (px).
    pub offsets: Vec<f64>,
    /// Starting row of the lane within the cell (px, image coordinates).
    pub start: Vec<f64>,
    pub obj: Vec<bool>,
}

impl GridLaneTensor {
    pub fn zeros(cfg: GridConfig) -> Self {
        let c = cfg.cells();
        Self { cfg, cls: vec![0.0; c], offsets: vec![0.0; c * cfg.n], start: vec![0.0; c], obj: vec![false; c] }
    }

    pub fn offset(&self, cell: usize, k: usize) -> f64 {
        self.offsets[cell * self.cfg.n + k]
    }

    pub fn obj_count(&self) -> usize {
        self.obj.iter().filter(|o| **o).count()
    }

    /// Soft target view of a prediction: presence probabilities kept as
    /// cross-entropy targets, regression supervised where presence is at
    /// least 0.5.
    pub fn detached(&self) -> Self {
        Self { obj: self.cls.iter().map(|&p| p >= 0.5).collect(), ..self.clone() }
    }

    /// Hard target view of a prediction: presence thresholded at 0.5,
    /// regression values copied.
    pub fn binarized(&self) -> Self {
        let obj: Vec<bool> = self.cls.iter().map(|&p| p >= 0.5).collect();
        Self { cls: obj.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(), obj, ..self.clone() }
    }
}

/// Gradient of a scalar loss with respect to a [`GridLaneTensor`]'s values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGrad {
    pub cls: Vec<f64>,
    pub offsets: Vec<f64>,
    pub start: Vec<f64>,
}

impl GridGrad {
    pub fn zeros(cfg: &GridConfig) -> Self {
        Self { cls: vec![0.0; cfg.cells()], offsets: vec![0.0; cfg.cells() * cfg.n], start: vec![0.0; cfg.cells()] }
    }

    pub fn add_scaled(&mut self, other: &GridGrad, s: f64) {
        for (a, b) in self.cls.iter_mut().zip(&other.cls) {
            *a += s * b;
        }
        for (a, b) in self.offsets.iter_mut().zip(&other.offsets) {
            *a += s * b;
        }
        for (a, b) in self.start.iter_mut().zip(&other.start) {
            *a += s * b;
        }
    }
}

/// Ground-truth grid for a set of lanes. A cell is occupied when a lane
/// crosses one of its sub-rows inside the cell's column span; with several
/// candidates the lane closest to the cell center wins. Sub-rows the lane
/// does not reach continue the covered offsets linearly, so a lane that
/// leaves through the image side keeps heading off-image.
pub fn encode_labels_to_grid(lanes: &[Lane2D], cfg: &GridConfig) -> GridLaneTensor {
    let mut t = GridLaneTensor::zeros(*cfg);
    let cw = cfg.cell_w();
    for j in 0..cfg.h {
        for i in 0..cfg.w {
            let (cu, _) = cfg.center(i, j);
            let (left, right) = (i as f64 * cw, (i + 1) as f64 * cw);
            let mut best: Option<(f64, Vec<Option<f64>>, f64)> = None;
            for lane in lanes {
                let us: Vec<Option<f64>> = (0..cfg.n).map(|k| lane.u_at(cfg.partition_row(j, k))).collect();
                let inside = us.iter().flatten().any(|&u| u >= left && u < right);
                if !inside {
                    continue;
                }
                let covered: Vec<f64> = us.iter().flatten().map(|u| u - cu).collect();
                let score = covered.iter().map(|d| d.abs()).sum::<f64>() / covered.len() as f64;
                let top = j as f64 * cfg.cell_h();
                let start = lane.v_range().0.max(top);
                if best.as_ref().is_none_or(|b| score < b.0) {
                    best = Some((score, us, start));
                }
            }
            let Some((_, us, start)) = best else { continue };
            let c = cfg.index(i, j);
            t.obj[c] = true;
            t.cls[c] = 1.0;
            t.start[c] = start;
            let known: Vec<(usize, f64)> = us.iter().enumerate().filter_map(|(k, u)| u.map(|u| (k, u - cu))).collect();
            for k in 0..cfg.n {
                t.offsets[c * cfg.n + k] = match us[k] {
                    Some(u) => u - cu,
                    None => extrapolate(&known, k),
                };
            }
        }
    }
    t
}

/// Offset at partition `k` continued linearly from the nearest two known
/// partitions on the same side (a copy when only one is known).
fn extrapolate(known: &[(usize, f64)], k: usize) -> f64 {
    let below: Vec<&(usize, f64)> = known.iter().filter(|(m, _)| *m > k).take(2).collect();
    let above: Vec<&(usize, f64)> = known.iter().rev().filter(|(m, _)| *m < k).take(2).collect();
    let side = if below.is_empty() { above } else { below };
    match side.as_slice() {
        [] => 0.0,
        [(_, o)] => *o,
        [(m0, o0), (m1, o1), ..] => o0 + (o1 - o0) / (*m1 as f64 - *m0 as f64) * (k as f64 - *m0 as f64),
    }
}

/// Multi-part lane loss: mean binary cross-entropy over all cells plus the
/// squared regression error (offsets and start) averaged over occupied
/// target cells. Probabilities are clamped to `[1e-7, 1 - 1e-7]`. Returns the
/// loss and its gradient with respect to `pred`.
pub fn lane_loss(pred: &GridLaneTensor, target: &GridLaneTensor) -> Result<(f64, GridGrad)> {
    if pred.cfg != target.cfg {
        return Err(Error::ConfigMismatch);
    }
    const EPS: f64 = 1e-7;
    let cfg = &pred.cfg;
    let n_cls = cfg.cells() as f64;
    let n_reg = target.obj_count();
    let mut g = GridGrad::zeros(cfg);
    let mut loss = 0.0;
    for c in 0..cfg.cells() {
        let y = target.cls[c];
        let raw = pred.cls[c];
        let p = raw.clamp(EPS, 1.0 - EPS);
        loss -= (y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / n_cls;
        if raw > EPS && raw < 1.0 - EPS {
            g.cls[c] = (-y / p + (1.0 - y) / (1.0 - p)) / n_cls;
        }
    }
    if n_reg > 0 {
        let nr = n_reg as f64;
        for c in (0..cfg.cells()).filter(|&c| target.obj[c]) {
            for k in 0..cfg.n {
                let d = pred.offsets[c * cfg.n + k] - target.offsets[c * cfg.n + k];
                loss += d * d / nr;
                g.offsets[c * cfg.n + k] = 2.0 * d / nr;
            }
            let d = pred.start[c] - target.start[c];
            loss += d * d / nr;
            g.start[c] = 2.0 * d / nr;
        }
    }
    Ok((loss, g))
}

/// Decoded lanes need at least this many sub-row points.
pub const MIN_DECODED_POINTS: usize = 4;

/// Turns a grid prediction back into lanes.
///
/// Cells at or above `conf_thresh` emit one point per sub-row at or below
/// their start row whose offset stays within one cell width. Points on the
/// same sub-row closer than half a cell width are fused (presence-weighted
/// mean), since steep lanes cross several cells per grid row. Rows are then
/// linked bottom-up: points and live lanes are matched greedily by distance
/// to each lane's linear extrapolation (less than one cell width, gaps up to
/// three grid rows); unmatched points open new lanes. Finally lanes shorter
/// than [`MIN_DECODED_POINTS`] are dropped, as is any lane that runs within
/// half a cell width of a longer one over most of its rows.
pub fn decode_grid(pred: &GridLaneTensor, conf_thresh: f64) -> Vec<Lane2D> {
    let cfg = &pred.cfg;
    let (cw, ch) = (cfg.cell_w(), cfg.cell_h());
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for j in 0..cfg.h {
        for k in 0..cfg.n {
            let v = cfg.partition_row(j, k);
            let mut cand: Vec<(f64, f64)> = Vec::new();
            for i in 0..cfg.w {
                let c = cfg.index(i, j);
                if pred.cls[c] < conf_thresh || v < pred.start[c] - 1e-6 {
                    continue;
                }
                let off = pred.offset(c, k);
                let u = cfg.center(i, j).0 + off;
                if off.abs() <= cw && u >= 0.0 && u < cfg.img_w as f64 {
                    cand.push((u, pred.cls[c]));
                }
            }
            if cand.is_empty() {
                continue;
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut fused: Vec<f64> = Vec::new();
            let (mut su, mut sw, mut last) = (0.0, 0.0, f64::NEG_INFINITY);
            for (u, w) in cand {
                if sw > 0.0 && u - last >= cw / 2.0 {
                    fused.push(su / sw);
                    su = 0.0;
                    sw = 0.0;
                }
                su += u * w;
                sw += w;
                last = u;
            }
            fused.push(su / sw);
            rows.push((v, fused));
        }
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));

    let predict = |pts: &[(f64, f64)], v: f64| {
        let n = pts.len();
        let (u1, v1) = pts[n - 1];
        if n < 2 {
            return u1;
        }
        let (u0, v0) = pts[n - 2];
        u1 + (u1 - u0) / (v1 - v0) * (v - v1)
    };
    let max_gap = 3.0 * ch;
    let mut tracks: Vec<Vec<(f64, f64)>> = Vec::new();
    for (v, us) in rows {
        let live: Vec<usize> = (0..tracks.len()).filter(|&t| tracks[t].last().unwrap().1 - v <= max_gap).collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (p, &u) in us.iter().enumerate() {
            for &t in &live {
                let d = (predict(&tracks[t], v) - u).abs();
                if d < cw {
                    pairs.push((d, p, t));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut point_used = vec![false; us.len()];
        let mut track_used = vec![false; tracks.len()];
        for (_, p, t) in pairs {
            if point_used[p] || track_used[t] {
                continue;
            }
            point_used[p] = true;
            track_used[t] = true;
            tracks[t].push((us[p], v));
        }
        for (p, &u) in us.iter().enumerate() {
            if !point_used[p] {
                tracks.push(vec![(u, v)]);
            }
        }
    }

    tracks.retain(|t| t.len() >= MIN_DECODED_POINTS);
    // Longest first; ties keep discovery order.
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by(|&a, &b| tracks[b].len().cmp(&tracks[a].len()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for t in order {
        let dup = kept.iter().any(|&k| {
            let close = tracks[t]
                .iter()
                .filter(|(u, v)| tracks[k].iter().any(|(uk, vk)| vk == v && (uk - u).abs() < cw / 2.0))
                .count();
            2 * close > tracks[t].len()
        });
        if !dup {
            kept.push(t);
        }
    }
    kept.sort_unstable();
    kept.into_iter().filter_map(|t| Lane2D::from_unordered(tracks[t].clone())).collect()
}

/// Residual beyond which a point is dropped before the second smoothing fit,
/// as a fraction of the cell width.
const SMOOTH_OUTLIER_CELLS: f64 = 0.25;

/// Replaces every lane's columns with a least-squares curve u(v) through its
/// points: quadratic when the lane spans at least two cell rows, a line
/// otherwise. Points far from the first fit are dropped before refitting.
/// Decoded columns wobble from cell to cell while painted lanes are smooth.
pub fn smooth_lanes(lanes: &[Lane2D], cfg: &GridConfig) -> Vec<Lane2D> {
    let cutoff = SMOOTH_OUTLIER_CELLS * cfg.cell_w();
    let fit = |pts: &[(f64, f64)]| -> Option<[f64; 3]> {
        let vu: Vec<(f64, f64)> = pts.iter().map(|p| (p.1, p.0)).collect();
        let span = vu.iter().map(|p| p.0).fold(f64::MIN, f64::max) - vu.iter().map(|p| p.0).fold(f64::MAX, f64::min);
        if span >= 2.0 * cfg.cell_h() {
            crate::extract::least_squares_quadratic(&vu)
        } else {
            let m = vu.len() as f64;
            let (mv, mu) = vu.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / m, a.1 + p.1 / m));
            let svv: f64 = vu.iter().map(|p| (p.0 - mv).powi(2)).sum();
            let suv: f64 = vu.iter().map(|p| (p.0 - mv) * (p.1 - mu)).sum();
            let b = if svv > 0.0 { suv / svv } else { 0.0 };
            Some([mu - b * mv, b, 0.0])
        }
    };
    let eval = |c: &[f64; 3], v: f64| c[0] + c[1] * v + c[2] * v * v;
    lanes
        .iter()
        .map(|lane| {
            let pts = lane.points();
            if pts.len() < 3 {
                return lane.clone();
            }
            let Some(first) = fit(pts) else { return lane.clone() };
            let kept: Vec<(f64, f64)> = pts.iter().copied().filter(|p| (p.0 - eval(&first, p.1)).abs() <= cutoff).collect();
            let c = if kept.len() >= 3 && kept.len() < pts.len() { fit(&kept).unwrap_or(first) } else { first };
            let out: Vec<(f64, f64)> = pts.iter().map(|p| (eval(&c, p.1), p.1)).collect();
            Lane2D::new(out).unwrap_or_else(|_| lane.clone())
        })
        .collect()
}

/// Smoothing followed by extension to the image border: the post-processing
/// applied to every decoded prediction.
pub fn finish_lanes(lanes: &[Lane2D], cfg: &GridConfig) -> Vec<Lane2D> {
    extend_to_border(&smooth_lanes(lanes, cfg), cfg)
}

/// Points of a lane's lower end used to fit its downward extension.
const EXTEND_FIT_POINTS: usize = 6;

/// Continues every lane straight down from its lowest end, along the line
/// fitted to its last few points, in steps of one sub-row until it leaves
/// the image. Lane markings run to the image border, while grid predictions
/// stop wherever the paint does (dash gaps, occlusion).
pub fn extend_to_border(lanes: &[Lane2D], cfg: &GridConfig) -> Vec<Lane2D> {
    let step = cfg.cell_h() / cfg.n as f64;
    let (w, h) = (cfg.img_w as f64, cfg.img_h as f64);
    lanes
        .iter()
        .map(|lane| {
            let pts = lane.points();
            let tail = &pts[pts.len().saturating_sub(EXTEND_FIT_POINTS)..];
            let m = tail.len() as f64;
            let (mu, mv) = tail.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / m, a.1 + p.1 / m));
            let svv: f64 = tail.iter().map(|p| (p.1 - mv).powi(2)).sum();
            let suv: f64 = tail.iter().map(|p| (p.0 - mu) * (p.1 - mv)).sum();
            let slope = if svv > 0.0 { suv / svv } else { 0.0 };
            let mut out = pts.to_vec();
            let (u_end, v_end) = pts[pts.len() - 1];
            let mut v = v_end + step;
            while v < h {
                let u = u_end + slope * (v - v_end);
                if !(0.0..w).contains(&u) {
                    break;
                }
                out.push((u, v));
                v += step;
            }
            Lane2D::new(out).unwrap_or_else(|_| lane.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cell() -> GridConfig {
        GridConfig { w: 1, h: 1, n: 2, img_w: 80, img_h: 80 }
    }

    #[test]
    fn empty_labels_encode_to_nothing() {
        let t = encode_labels_to_grid(&[], &GridConfig::default());
        assert_eq!(t.obj_count(), 0);
    }

    #[test]
    fn vertical_lane_through_centers() {
        let cfg = GridConfig::default();
        let (cu, _) = cfg.center(5, 0);
        let lane = Lane2D::new(vec![(cu, 0.0), (cu, 719.0)]).unwrap();
        let t = encode_labels_to_grid(&[lane.clone()], &cfg);
        for j in 0..cfg.h {
            let c = cfg.index(5, j);
            assert!(t.obj[c]);
            assert!((0..cfg.n).all(|k| t.offset(c, k) == 0.0));
        }
        let shifted = Lane2D::new(vec![(cu + 7.0, 0.0), (cu + 7.0, 719.0)]).unwrap();
        let t = encode_labels_to_grid(&[shifted], &cfg);
        assert!((t.offset(cfg.index(5, 3), 2) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let cfg = one_cell();
        let mut target = GridLaneTensor::zeros(cfg);
        target.cls[0] = 1.0;
        let mut pred = target.clone();
        pred.cls[0] = 0.5;
        let (l, _) = lane_loss(&pred, &target).unwrap();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-12);

        target.obj[0] = true;
        let mut pred = target.clone();
        pred.cls[0] = 1.0 - 1e-7;
        pred.offsets = vec![1.0, 2.0];
        let (l, g) = lane_loss(&pred, &target).unwrap();
        assert!((l - 5.0).abs() < 1e-6);
        assert_eq!(g.offsets, vec![2.0, 4.0]);

        let mut sat = target.clone();
        sat.cls[0] = 1.0 - 1e-7;
        assert!(lane_loss(&sat, &target).unwrap().0 < 1e-6);
        let other = GridLaneTensor::zeros(GridConfig::default());
        assert!(matches!(lane_loss(&other, &target), Err(Error::ConfigMismatch)));
    }

    #[test]
    fn decode_empty_and_single_column() {
        let cfg = GridConfig::default();
        assert!(decode_grid(&GridLaneTensor::zeros(cfg), 0.5).is_empty());
        let mut t = GridLaneTensor::zeros(cfg);
        for j in 0..cfg.h {
            let c = cfg.index(7, j);
            t.cls[c] = 1.0;
            t.start[c] = j as f64 * cfg.cell_h();
        }
        let lanes = decode_grid(&t, 0.5);
        assert_eq!(lanes.len(), 1);
        let cu = cfg.center(7, 0).0;
        assert!(lanes[0].points().iter().all(|p| p.0 == cu));
        assert_eq!(lanes[0].points().len(), cfg.h * cfg.n);
    }

    #[test]
    fn extension_follows_the_lower_end() {
        let cfg = GridConfig::default();
        // u = 100 + 0.5 v, stopping at v = 400; steps of 20 px down to 710.
        let lane = Lane2D::new((0..5).map(|i| (100.0 + 0.5 * (320.0 + 20.0 * i as f64), 320.0 + 20.0 * i as f64)).collect()).unwrap();
        let out = &extend_to_border(&[lane], &cfg)[0];
        let last = *out.points().last().unwrap();
        assert_eq!(last.1, 700.0);
        assert!((last.0 - 450.0).abs() < 1e-9);
        // Leaving through the side stops the extension.
        let steep = Lane2D::new(vec![(1200.0, 600.0), (1260.0, 620.0)]).unwrap();
        let out = &extend_to_border(&[steep], &cfg)[0];
        assert!(out.points().iter().all(|p| p.0 < 1280.0));
        assert_eq!(out.points().len(), 2);
    }

    #[test]
    fn smoothing_removes_wobble_and_outliers() {
        let cfg = GridConfig::default();
        // u = 300 + 0.4 v + 2e-4 v^2 with +-6 px alternating wobble and one 60 px outlier.
        let curve = |v: f64| 300.0 + 0.4 * v + 2e-4 * v * v;
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|i| {
                let v = 320.0 + 20.0 * i as f64;
                let wobble = if i % 2 == 0 { 6.0 } else { -6.0 };
                let spike = if i == 9 { 60.0 } else { 0.0 };
                (curve(v) + wobble + spike, v)
            })
            .collect();
        let out = &smooth_lanes(&[Lane2D::new(pts.clone()).unwrap()], &cfg)[0];
        assert_eq!(out.points().len(), pts.len());
        for p in out.points() {
            assert!((p.0 - curve(p.1)).abs() < 2.0, "{p:?} vs {}", curve(p.1));
        }
        // A short lane gets a line, and two points are left alone.
        let short = Lane2D::new(vec![(100.0, 600.0), (104.0, 620.0), (102.0, 640.0)]).unwrap();
        let out = &smooth_lanes(&[short], &cfg)[0];
        assert!((out.points()[1].0 - 102.0).abs() < 1e-9);
        let pair = Lane2D::new(vec![(100.0, 600.0), (110.0, 620.0)]).unwrap();
        assert_eq!(smooth_lanes(&[pair.clone()], &cfg)[0], pair);
    }
}
