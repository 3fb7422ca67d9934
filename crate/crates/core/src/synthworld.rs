//! Deterministic synthetic road scenes.
//!
//! A scene is a flat road with painted lane markings, a handful of raised
//! obstacles, a LiDAR-like sweep whose intensities separate paint from
//! asphalt, and a camera image rendered by casting each pixel onto the road.
//! Random streams (see [`crate::rng`]): 0 = ground points, 1 = obstacles,
//! 2 = image noise.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extract::{project_lane, CloudPoint, LaneInstance3D, PointCloud};
use crate::geometry::CameraModel;
use crate::labelkit::{to_row_anchors, Lane2D, RowAnchorLabel};
use crate::raster::RgbImage;
use crate::rng::SeededRng;

/// One painted marking, `lateral(s) = a0 + a1*s + a2*s^2` (m, left positive)
/// over forward distance `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneSpec {
    pub coeffs: [f64; 3],
    pub range: (f64, f64),
    pub dashed: bool,
    pub dash_on: f64,
    pub dash_off: f64,
}

impl LaneSpec {
    pub fn solid(a0: f64, range: (f64, f64)) -> Self {
        Self { coeffs: [a0, 0.0, 0.0], range, dashed: false, dash_on: 3.0, dash_off: 6.0 }
    }

    pub fn lateral(&self, s: f64) -> f64 {
        self.coeffs[0] + self.coeffs[1] * s + self.coeffs[2] * s * s
    }

    /// Whether forward distance `s` falls on paint (inside the range and,
    /// for dashed lines, inside a dash).
    pub fn painted_at(&self, s: f64) -> bool {
        if s < self.range.0 || s > self.range.1 {
            return false;
        }
        !self.dashed || (s - self.range.0).rem_euclid(self.dash_on + self.dash_off) < self.dash_on
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub lanes: Vec<LaneSpec>,
    pub ground_z: f64,
    pub paint_mu: f64,
    pub asphalt_mu: f64,
    pub intensity_sigma: f64,
    /// Ground returns per square meter.
    pub point_density: f64,
    pub seed: u64,
    /// Forward extent of the sweep (m).
    pub along_extent: (f64, f64),
    pub road_half_width: f64,
    /// Points within this lateral distance of a dash carry paint intensity (m).
    pub paint_half_width: f64,
    pub ground_noise: f64,
    pub obstacles: usize,
    pub image_noise: f64,
}

impl Default for SceneSpec {
    /// The easy scene: three straight solid markings.
    fn default() -> Self {
        let range = (3.0, 50.0);
        Self {
            lanes: vec![LaneSpec::solid(-1.75, range), LaneSpec::solid(1.75, range), LaneSpec::solid(5.25, range)],
            ground_z: -1.5,
            paint_mu: 0.8,
            asphalt_mu: 0.2,
            intensity_sigma: 0.05,
            point_density: 40.0,
            seed: 0,
            along_extent: range,
            road_half_width: 9.0,
            paint_half_width: 0.1,
            ground_noise: 0.01,
            obstacles: 3,
            image_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(0.0 <= self.asphalt_mu && self.asphalt_mu < self.paint_mu && self.paint_mu <= 1.0) {
            return bad("need 0 <= asphalt_mu < paint_mu <= 1");
        }
        if !(self.point_density > 0.0) {
            return bad("point_density must be positive");
        }
        if !(self.intensity_sigma >= 0.0 && self.image_noise >= 0.0 && self.ground_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(self.along_extent.0 < self.along_extent.1 && self.road_half_width > 0.0) {
            return bad("empty road extent");
        }
        for l in &self.lanes {
            if !(l.range.0 < l.range.1) {
                return bad("lane range must satisfy s_min < s_max");
            }
            if l.dashed && !(l.dash_on > 0.0 && l.dash_off > 0.0) {
                return bad("dash lengths must be positive");
            }
            if !l.coeffs.iter().all(|c| c.is_finite()) {
                return bad("lane coefficients must be finite");
            }
        }
        Ok(())
    }

    /// Whether ground position `(x, y)` lies on paint.
    pub fn is_paint(&self, x: f64, y: f64) -> bool {
        self.lanes.iter().any(|l| l.painted_at(x) && (y - l.lateral(x)).abs() <= self.paint_half_width)
    }

    pub fn lane_instances(&self) -> Vec<LaneInstance3D> {
        self.lanes
            .iter()
            .map(|l| LaneInstance3D { coeffs: l.coeffs, range: l.range, plane_z: self.ground_z, sample_step: 0.5 })
            .collect()
    }
}

/// Paired sensor data and ground truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub cloud: PointCloud,
    pub image: RgbImage,
    pub camera: CameraModel,
    pub gt_lanes_2d: Vec<Lane2D>,
    pub gt_lanes_3d: Vec<LaneInstance3D>,
}

const SKY: [f64; 3] = [0.55, 0.65, 0.80];
const GRASS: [f64; 3] = [0.22, 0.38, 0.18];
const ASPHALT: [f64; 3] = [0.28, 0.28, 0.30];
const PAINT: [f64; 3] = [0.92, 0.92, 0.88];

fn sample_cloud(spec: &SceneSpec) -> PointCloud {
    let mut rng = SeededRng::with_stream(spec.seed, 0);
    let (x0, x1) = spec.along_extent;
    let w = spec.road_half_width;
    let n = (spec.point_density * (x1 - x0) * 2.0 * w).round() as usize;
    let mut points = Vec::with_capacity(n + spec.obstacles * 200);
    for _ in 0..n {
        let x = rng.range(x0, x1);
        let y = rng.range(-w, w);
        let z = spec.ground_z + rng.normal(0.0, spec.ground_noise);
        let mu = if spec.is_paint(x, y) { spec.paint_mu } else { spec.asphalt_mu };
        let i = rng.normal(mu, spec.intensity_sigma).clamp(0.0, 1.0);
        points.push(CloudPoint::new(x, y, z, i));
    }
    // Vehicle-sized boxes of returns above the road.
    let mut orng = SeededRng::with_stream(spec.seed, 1);
    for _ in 0..spec.obstacles {
        let cx = orng.range(x0 + 5.0, x1);
        let cy = orng.range(-w + 1.0, w - 1.0);
        for _ in 0..200 {
            let x = cx + orng.range(-2.0, 2.0);
            let y = cy + orng.range(-0.9, 0.9);
            let z = spec.ground_z + orng.range(0.3, 1.5);
            points.push(CloudPoint::new(x, y, z, orng.uniform()));
        }
    }
    PointCloud { points }
}

fn render(spec: &SceneSpec, cam: &CameraModel) -> RgbImage {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut img = RgbImage::new(w, h);
    let mut rng = SeededRng::with_stream(spec.seed, 2);
    let inv = cam.extrinsic.inverse();
    let origin = inv.translation;
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let d_cam = Vector3::new((x as f64 + sx - cam.cx) / cam.fx, (y as f64 + sy - cam.cy) / cam.fy, 1.0);
                    let d = inv.rotation * d_cam;
                    let t = if d.z.abs() > 1e-12 { (spec.ground_z - origin.z) / d.z } else { -1.0 };
                    let c = if t <= 0.0 {
                        SKY
                    } else {
                        let g = origin + d * t;
                        if g.y.abs() > spec.road_half_width {
                            GRASS
                        } else if spec.is_paint(g.x, g.y) {
                            PAINT
                        } else {
                            ASPHALT
                        }
                    };
                    for k in 0..3 {
                        acc[k] += c[k] / 4.0;
                    }
                }
            }
            let noise = if spec.image_noise > 0.0 { rng.normal(0.0, spec.image_noise) } else { 0.0 };
            let rgb = acc.map(|c| ((c + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put(x, y, rgb);
        }
    }
    img
}

/// Builds the frame for `spec` seen by `cam`. Bit-identical for equal inputs.
pub fn generate_scene(spec: &SceneSpec, cam: &CameraModel) -> Result<FrameSample> {
    spec.validate()?;
    cam.validate()?;
    let gt_lanes_3d = spec.lane_instances();
    let gt_lanes_2d = gt_lanes_3d.iter().filter_map(|l| project_lane(l, cam).ok()).collect();
    Ok(FrameSample { cloud: sample_cloud(spec), image: render(spec, cam), camera: *cam, gt_lanes_2d, gt_lanes_3d })
}

/// Ground-truth lanes at the given anchor rows.
pub fn ground_truth_labels(frame: &FrameSample, h_samples: &[u32]) -> RowAnchorLabel {
    to_row_anchors(&frame.gt_lanes_2d, h_samples)
}

/// Draws random road layouts: parallel markings sharing one heading and
/// curvature, each independently dashed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSampler {
    pub base: SceneSpec,
    /// Nominal lateral positions of the markings (m).
    pub lateral_positions: Vec<f64>,
    pub lateral_jitter: f64,
    pub max_heading: f64,
    /// Bound on the quadratic coefficient `a2` (1/m).
    pub max_curvature: f64,
    pub dashed_prob: f64,
    pub dash_on: f64,
    pub dash_off: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            base: SceneSpec::default(),
            lateral_positions: vec![-5.25, -1.75, 1.75, 5.25],
            lateral_jitter: 0.4,
            max_heading: 0.0,
            max_curvature: 0.0,
            dashed_prob: 0.0,
            dash_on: 3.0,
            dash_off: 6.0,
        }
    }
}

impl SceneSampler {
    /// Scene `index` of the set seeded by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> SceneSpec {
        let mut rng = SeededRng::with_stream(seed, crate::rng::stream_id(index, 0x5CE_7E));
        let shift = rng.range(-self.lateral_jitter, self.lateral_jitter);
        let a1 = rng.range(-self.max_heading, self.max_heading);
        let a2 = rng.range(-self.max_curvature, self.max_curvature);
        let range = self.base.along_extent;
        let lanes = self
            .lateral_positions
            .iter()
            .map(|&p| {
                let dashed = rng.bernoulli(self.dashed_prob);
                let phase = rng.range(0.0, self.dash_on + self.dash_off);
                LaneSpec {
                    coeffs: [p + shift, a1, a2],
                    range: if dashed { (range.0 - phase, range.1) } else { range },
                    dashed,
                    dash_on: self.dash_on,
                    dash_off: self.dash_off,
                }
            })
            .collect();
        SceneSpec { lanes, seed: rng.next_u64(), ..self.base.clone() }
    }
}

/// Generates scenes `first..first + count` of the sampler's set `seed`.
pub fn sample_frames(sampler: &SceneSampler, seed: u64, first: u64, count: u64, cam: &CameraModel) -> Result<Vec<FrameSample>> {
    (first..first + count).into_par_iter().map(|i| generate_scene(&sampler.sample(seed, i), cam)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::segment_ground_indices;

    fn small_cam() -> CameraModel {
        CameraModel { fx: 250.0, fy: 250.0, cx: 160.0, cy: 90.0, width: 320, height: 180, ..Default::default() }
    }

    #[test]
    fn deterministic_and_counts_lanes() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, &small_cam()).unwrap();
        let b = generate_scene(&spec, &small_cam()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gt_lanes_3d.len(), 3);
    }

    #[test]
    fn paint_is_brighter() {
        let spec = SceneSpec { obstacles: 0, ..SceneSpec::default() };
        let f = generate_scene(&spec, &small_cam()).unwrap();
        let (mut sp, mut np, mut so, mut no) = (0.0, 0, 0.0, 0);
        for p in &f.cloud.points {
            if spec.is_paint(p.x, p.y) {
                sp += p.intensity;
                np += 1;
            } else {
                so += p.intensity;
                no += 1;
            }
        }
        assert!(np > 0 && no > 0);
        assert!(sp / np as f64 - so / no as f64 > 0.4);
    }

    #[test]
    fn midpoint_threshold_separates() {
        let spec = SceneSpec { intensity_sigma: 0.15, obstacles: 0, ..SceneSpec::default() };
        let f = generate_scene(&spec, &small_cam()).unwrap();
        let tau = (spec.paint_mu + spec.asphalt_mu) / 2.0;
        let ok = f.cloud.points.iter().filter(|p| (p.intensity >= tau) == spec.is_paint(p.x, p.y)).count();
        assert!(ok as f64 / f.cloud.len() as f64 >= 0.95);
    }

    #[test]
    fn obstacles_are_off_ground() {
        let spec = SceneSpec::default();
        let f = generate_scene(&spec, &small_cam()).unwrap();
        let g = segment_ground_indices(&f.cloud, &Default::default()).unwrap();
        assert!(g.iter().all(|&i| f.cloud.points[i].z < spec.ground_z + 0.1));
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = SceneSpec { paint_mu: 0.1, ..SceneSpec::default() };
        assert!(matches!(generate_scene(&s, &small_cam()), Err(Error::InvalidSpec(_))));
        let mut s = SceneSpec::default();
        s.lanes[0].range = (10.0, 5.0);
        assert!(generate_scene(&s, &small_cam()).is_err());
    }

    #[test]
    fn labels_from_straight_center_lane() {
        let spec = SceneSpec { lanes: vec![LaneSpec::solid(0.3, (3.0, 50.0))], ..SceneSpec::default() };
        let f = generate_scene(&spec, &CameraModel::default()).unwrap();
        let rows: Vec<u32> = RowAnchorLabel::rows(160, 710, 10);
        let lab = ground_truth_labels(&f, &rows);
        assert_eq!(lab.xs.len(), 1);
        let valid: Vec<f64> = lab.xs[0].iter().copied().filter(|x| *x >= 0.0).collect();
        assert!(valid.windows(2).all(|w| w[1] < w[0]));
        // Far end at 50 m sits at v = 390: rows above it are missing.
        assert_eq!(lab.xs[0][22], crate::labelkit::MISSING);
        assert!(lab.xs[0][24] >= 0.0);
        assert!(ground_truth_labels(&FrameSample { gt_lanes_2d: vec![], ..f }, &rows).xs.is_empty());
    }
}
