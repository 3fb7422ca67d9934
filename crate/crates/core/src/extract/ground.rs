//! Grid-seeded region growing over local ground planes.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{Matrix3, Vector3};

use super::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundSegConfig {
    /// Grid cell edge (m).
    pub cell_size: f64,
    /// Max point-to-plane distance for ground membership (m).
    pub plane_inlier_dist: f64,
    /// Max angle between a cell's plane normal and vertical (deg).
    pub normal_max_tilt: f64,
    /// Max plane height jump between connected cells (m).
    pub height_step: f64,
    /// Occupied cells within this Chebyshev distance (in cells) are neighbours.
    pub neighbour_cells: i64,
    /// Intensity threshold for lane candidates.
    pub tau: f64,
    /// When set, `tau` is replaced by this percentile (0-100) of ground intensities.
    pub tau_percentile: Option<f64>,
}

impl Default for GroundSegConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            plane_inlier_dist: 0.1,
            normal_max_tilt: 10.0,
            height_step: 0.25,
            neighbour_cells: 2,
            tau: 0.45,
            tau_percentile: None,
        }
    }
}

impl GroundSegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("ground: cell_size must be > 0 and tau in [0, 1]".into()));
        }
        if let Some(q) = self.tau_percentile {
            if !(0.0..=100.0).contains(&q) {
                return Err(Error::Config("ground: tau_percentile must lie in [0, 100]".into()));
            }
        }
        Ok(())
    }
}

/// `z = a x + b y + c`.
#[derive(Debug, Clone, Copy)]
struct LocalPlane {
    a: f64,
    b: f64,
    c: f64,
}

impl LocalPlane {
    fn height(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }

    fn tilt_deg(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt().atan().to_degrees()
    }
}

fn fit_plane(cloud: &PointCloud, idx: &[usize]) -> LocalPlane {
    let n = idx.len() as f64;
    let (mx, my, mz) = idx.iter().fold((0.0, 0.0, 0.0), |acc, &i| {
        let p = &cloud.points[i];
        (acc.0 + p.x / n, acc.1 + p.y / n, acc.2 + p.z / n)
    });
    if idx.len() >= 3 {
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for &i in idx {
            let p = &cloud.points[i];
            let r = Vector3::new(p.x - mx, p.y - my, 1.0);
            ata += r * r.transpose();
            atb += r * (p.z - mz);
        }
        // Collinear or tiny supports give a singular system; fall back to level.
        if ata.determinant().abs() > 1e-9 {
            if let Some(inv) = ata.try_inverse() {
                let s = inv * atb;
                return LocalPlane { a: s[0], b: s[1], c: mz + s[2] - s[0] * mx - s[1] * my };
            }
        }
    }
    LocalPlane { a: 0.0, b: 0.0, c: mz }
}

/// Returns the indices of ground points (`P_G`) in input order.
pub fn segment_ground_indices(cloud: &PointCloud, cfg: &GroundSegConfig) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let key = |x: f64, y: f64| ((x / cfg.cell_size).floor() as i64, (y / cfg.cell_size).floor() as i64);
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        cells.entry(key(p.x, p.y)).or_default().push(i);
    }

    // Seed each cell from its lowest point and fit a plane to the points
    // just above it.
    let band = 2.0 * cfg.plane_inlier_dist;
    let planes: BTreeMap<(i64, i64), LocalPlane> = cells
        .iter()
        .map(|(k, idx)| {
            let z0 = idx.iter().map(|&i| cloud.points[i].z).fold(f64::INFINITY, f64::min);
            let support: Vec<usize> = idx.iter().copied().filter(|&i| cloud.points[i].z <= z0 + band).collect();
            (*k, fit_plane(cloud, &support))
        })
        .collect();
    let flat_enough = |k: &(i64, i64)| planes[k].tilt_deg() < cfg.normal_max_tilt;

    let center = |k: &(i64, i64)| ((k.0 as f64 + 0.5) * cfg.cell_size, (k.1 as f64 + 0.5) * cfg.cell_size);
    let seed = planes
        .keys()
        .filter(|k| flat_enough(k))
        .min_by(|a, b| {
            let (ax, ay) = center(a);
            let (bx, by) = center(b);
            (ax * ax + ay * ay).total_cmp(&(bx * bx + by * by))
        });
    let Some(seed) = seed.copied() else {
        return Ok(Vec::new());
    };

    let mut grown: BTreeMap<(i64, i64), bool> = BTreeMap::new();
    grown.insert(seed, true);
    let mut queue = VecDeque::from([seed]);
    let r = cfg.neighbour_cells.max(1);
    while let Some(k) = queue.pop_front() {
        let (kx, ky) = center(&k);
        for dx in -r..=r {
            for dy in -r..=r {
                let n = (k.0 + dx, k.1 + dy);
                if grown.contains_key(&n) || !planes.contains_key(&n) || !flat_enough(&n) {
                    continue;
                }
                let (nx, ny) = center(&n);
                let (mx, my) = ((kx + nx) / 2.0, (ky + ny) / 2.0);
                let step = (planes[&k].height(mx, my) - planes[&n].height(mx, my)).abs();
                if step < cfg.height_step {
                    grown.insert(n, true);
                    queue.push_back(n);
                }
            }
        }
    }

    let mut out: Vec<usize> = grown
        .keys()
        .flat_map(|k| {
            let plane = planes[k];
            cells[k].iter().copied().filter(move |&i| {
                let p = &cloud.points[i];
                (p.z - plane.height(p.x, p.y)).abs() <= cfg.plane_inlier_dist
            })
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn segment_ground(cloud: &PointCloud, cfg: &GroundSegConfig) -> Result<PointCloud> {
    Ok(cloud.subset(&segment_ground_indices(cloud, cfg)?))
}

/// Keeps exactly the points with intensity `>= tau`.
pub fn filter_by_intensity(ground: &PointCloud, tau: f64) -> PointCloud {
    PointCloud { points: ground.points.iter().copied().filter(|p| p.intensity >= tau).collect() }
}

/// Nearest-rank percentile (`q` in 0..=100) of the intensities.
pub fn intensity_percentile(cloud: &PointCloud, q: f64) -> Option<f64> {
    if cloud.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = cloud.points.iter().map(|p| p.intensity).collect();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::cloud::CloudPoint;

    fn plane_cloud() -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..20 {
                pts.push(CloudPoint::new(2.0 + i as f64 * 0.37, -4.0 + j as f64 * 0.41, -1.5, 0.3));
            }
        }
        PointCloud { points: pts }
    }

    #[test]
    fn single_plane_is_all_ground() {
        let c = plane_cloud();
        let g = segment_ground(&c, &GroundSegConfig::default()).unwrap();
        assert_eq!(g.len(), c.len());
    }

    #[test]
    fn elevated_point_is_rejected() {
        let mut c = plane_cloud();
        c.points.push(CloudPoint::new(5.1, 0.2, 0.5, 0.9));
        let g = segment_ground_indices(&c, &GroundSegConfig::default()).unwrap();
        assert_eq!(g.len(), c.len() - 1);
        assert!(!g.contains(&(c.len() - 1)));
    }

    #[test]
    fn box_on_plane_is_rejected() {
        let mut c = plane_cloud();
        let n0 = c.len();
        for k in 0..50 {
            c.points.push(CloudPoint::new(6.0 + (k % 10) as f64 * 0.1, (k / 10) as f64 * 0.1, -0.3, 1.0));
        }
        let g = segment_ground_indices(&c, &GroundSegConfig::default()).unwrap();
        assert_eq!(g.len(), n0);
    }

    #[test]
    fn empty_cloud_errors() {
        assert!(matches!(segment_ground(&PointCloud::default(), &GroundSegConfig::default()), Err(Error::EmptyCloud)));
    }

    #[test]
    fn intensity_threshold_semantics() {
        let c = PointCloud {
            points: vec![CloudPoint::new(0.0, 0.0, 0.0, 0.1), CloudPoint::new(1.0, 0.0, 0.0, 0.9)],
        };
        assert_eq!(filter_by_intensity(&c, 0.5).points, vec![c.points[1]]);
        assert_eq!(filter_by_intensity(&c, 0.0).len(), 2);
        assert!(filter_by_intensity(&c, 1.0).is_empty());
        assert_eq!(intensity_percentile(&c, 50.0), Some(0.1));
        assert_eq!(intensity_percentile(&c, 100.0), Some(0.9));
    }
}
