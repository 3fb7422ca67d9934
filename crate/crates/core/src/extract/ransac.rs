//! Robust quadratic fitting of lane clusters and projection to the image.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::cloud::PointCloud;
use super::dbscan::Cluster;
use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraModel};
use crate::labelkit::Lane2D;
use crate::rng::SeededRng;

/// A fitted lane marking on a level ground plane: `across = c0 + c1*along + c2*along^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneInstance3D {
    pub coeffs: [f64; 3],
    /// `[along_min, along_max]` (m).
    pub range: (f64, f64),
    /// Ground plane height `z = plane_z` (m).
    pub plane_z: f64,
    /// Sampling interval used when projecting (m).
    pub sample_step: f64,
}

impl LaneInstance3D {
    pub fn across_at(&self, along: f64) -> f64 {
        poly(&self.coeffs, along)
    }

    /// Samples every `sample_step` from `along_min`, always including `along_max`.
    pub fn samples(&self) -> Vec<Vector3<f64>> {
        let (lo, hi) = self.range;
        let step = if self.sample_step > 0.0 { self.sample_step } else { 0.5 };
        let n = ((hi - lo) / step).floor() as usize;
        let mut out: Vec<Vector3<f64>> =
            (0..=n).map(|k| lo + k as f64 * step).map(|s| Vector3::new(s, self.across_at(s), self.plane_z)).collect();
        if hi - (lo + n as f64 * step) > 1e-9 {
            out.push(Vector3::new(hi, self.across_at(hi), self.plane_z));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iters: usize,
    /// Max lateral residual of an inlier (m).
    pub inlier_dist: f64,
    pub sample_step: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iters: 200, inlier_dist: 0.15, sample_step: 0.5, seed: 0 }
    }
}

pub(crate) fn poly(c: &[f64; 3], x: f64) -> f64 {
    c[0] + c[1] * x + c[2] * x * x
}

/// Result of a robust fit on `(along, across)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadFit {
    pub coeffs: [f64; 3],
    /// Indices (into the fitted samples) within `inlier_dist` of `coeffs`.
    pub inliers: Vec<usize>,
}

fn exact_quadratic(p: [(f64, f64); 3]) -> Option<[f64; 3]> {
    for i in 0..3 {
        for j in i + 1..3 {
            if (p[i].0 - p[j].0).abs() < 1e-6 {
                return None;
            }
        }
    }
    let m = Matrix3::new(1.0, p[0].0, p[0].0 * p[0].0, 1.0, p[1].0, p[1].0 * p[1].0, 1.0, p[2].0, p[2].0 * p[2].0);
    let s = m.lu().solve(&Vector3::new(p[0].1, p[1].1, p[2].1))?;
    s.iter().all(|v| v.is_finite()).then(|| [s[0], s[1], s[2]])
}

/// Least squares on centered, scaled abscissae, mapped back to raw coefficients.
pub fn least_squares_quadratic(pts: &[(f64, f64)]) -> Option<[f64; 3]> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let m = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let s = pts.iter().map(|p| (p.0 - m).abs()).fold(0.0, f64::max).max(1e-12);
    let a = DMatrix::from_fn(pts.len(), 3, |r, c| ((pts[r].0 - m) / s).powi(c as i32));
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let d = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let (d0, d1, d2) = (d[0], d[1], d[2]);
    let c = [d0 - d1 * m / s + d2 * m * m / (s * s), d1 / s - 2.0 * d2 * m / (s * s), d2 / (s * s)];
    c.iter().all(|v| v.is_finite()).then_some(c)
}

fn inliers_of(pts: &[(f64, f64)], c: &[f64; 3], dist: f64) -> Vec<usize> {
    pts.iter().enumerate().filter(|(_, p)| (p.1 - poly(c, p.0)).abs() < dist).map(|(i, _)| i).collect()
}

/// RANSAC over quadratics: exact 3-point hypotheses scored by inlier count,
/// then least-squares refits until the inlier set is stable. Every reported
/// inlier lies within `inlier_dist` of the returned curve.
pub fn ransac_quadratic(pts: &[(f64, f64)], iters: usize, inlier_dist: f64, rng: &mut SeededRng) -> Result<QuadFit> {
    let n = pts.len();
    if n < 3 {
        return Err(Error::InsufficientPoints(n));
    }
    let mut best: Option<([f64; 3], usize)> = None;
    for _ in 0..iters {
        let i = rng.index(n);
        let mut j = rng.index(n);
        while j == i {
            j = rng.index(n);
        }
        let mut k = rng.index(n);
        while k == i || k == j {
            k = rng.index(n);
        }
        let Some(c) = exact_quadratic([pts[i], pts[j], pts[k]]) else { continue };
        let score = inliers_of(pts, &c, inlier_dist).len();
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((c, score));
        }
    }
    let mut coeffs = match best {
        Some((c, _)) => c,
        None => least_squares_quadratic(pts).ok_or(Error::InsufficientPoints(n))?,
    };
    let mut inliers = inliers_of(pts, &coeffs, inlier_dist);
    for _ in 0..10 {
        if inliers.len() < 3 {
            break;
        }
        let sub: Vec<(f64, f64)> = inliers.iter().map(|&i| pts[i]).collect();
        let Some(refit) = least_squares_quadratic(&sub) else { break };
        let next = inliers_of(pts, &refit, inlier_dist);
        if next.len() < 3 {
            break;
        }
        let stable = next == inliers;
        coeffs = refit;
        inliers = next;
        if stable {
            break;
        }
    }
    if inliers.len() < 3 {
        return Err(Error::InsufficientPoints(inliers.len()));
    }
    Ok(QuadFit { coeffs, inliers })
}

/// Fits one cluster of `cloud` into a 3D lane instance.
pub fn fit_lane_ransac(cluster: &Cluster, cloud: &PointCloud, cfg: &RansacConfig, rng: &mut SeededRng) -> Result<LaneInstance3D> {
    if cluster.len() < 3 {
        return Err(Error::InsufficientPoints(cluster.len()));
    }
    let pts: Vec<(f64, f64)> = cluster
        .member_indices
        .iter()
        .map(|&i| {
            let (a, l) = cloud.points[i].ground_coords();
            (l, a)
        })
        .collect();
    let fit = ransac_quadratic(&pts, cfg.iters, cfg.inlier_dist, rng)?;
    let (lo, hi) = fit.inliers.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(pts[i].0), hi.max(pts[i].0)));
    if !(hi > lo) {
        return Err(Error::InsufficientPoints(fit.inliers.len()));
    }
    let plane_z = fit.inliers.iter().map(|&i| cloud.points[cluster.member_indices[i]].z).sum::<f64>() / fit.inliers.len() as f64;
    Ok(LaneInstance3D { coeffs: fit.coeffs, range: (lo, hi), plane_z, sample_step: cfg.sample_step })
}

/// Projects the sampled curve, dropping samples outside the view.
pub fn project_lane(lane: &LaneInstance3D, cam: &CameraModel) -> Result<Lane2D> {
    let pts: Vec<(f64, f64)> = lane.samples().iter().filter_map(|p| project_point(p, cam)).collect();
    Lane2D::from_unordered(pts).ok_or(Error::EmptyProjection)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_samples_recover_coefficients() {
        let c = [0.3, -0.02, 0.004];
        let pts: Vec<(f64, f64)> = (0..30).map(|k| k as f64 * 1.7 + 2.0).map(|x| (x, poly(&c, x))).collect();
        let fit = ransac_quadratic(&pts, 50, 0.05, &mut SeededRng::new(0)).unwrap();
        for (a, b) in fit.coeffs.iter().zip(c) {
            assert!((a - b).abs() < 1e-9, "{:?}", fit.coeffs);
        }
        assert_eq!(fit.inliers.len(), 30);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(ransac_quadratic(&[(0.0, 0.0), (1.0, 1.0)], 10, 0.1, &mut SeededRng::new(0)), Err(Error::InsufficientPoints(2))));
        let cl = Cluster { member_indices: vec![0, 1], center: (0.0, 0.0) };
        let cloud = PointCloud::default();
        assert!(matches!(fit_lane_ransac(&cl, &cloud, &RansacConfig::default(), &mut SeededRng::new(0)), Err(Error::InsufficientPoints(2))));
    }

    #[test]
    fn straight_lane_projects_to_center_column() {
        let cam = CameraModel::default();
        let lane = LaneInstance3D { coeffs: [0.0; 3], range: (5.0, 40.0), plane_z: -1.5, sample_step: 0.5 };
        let l = project_lane(&lane, &cam).unwrap();
        assert!(l.points().iter().all(|p| (p.0 - 640.0).abs() < 1e-9));
        assert!(l.points().iter().any(|p| (p.1 - 510.0).abs() < 1e-9));
    }

    #[test]
    fn lane_behind_camera_is_empty() {
        let lane = LaneInstance3D { coeffs: [0.0; 3], range: (-40.0, -5.0), plane_z: -1.5, sample_step: 0.5 };
        assert!(matches!(project_lane(&lane, &CameraModel::default()), Err(Error::EmptyProjection)));
    }
}
