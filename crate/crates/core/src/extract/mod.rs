//! Unsupervised lane extraction from a LiDAR sweep: ground segmentation,
//! intensity filtering, density clustering, lane-instance merging, robust
//! curve fitting and projection into the camera.

mod cloud;
mod dbscan;
mod ground;
mod merge;
mod ransac;

pub use cloud::{CloudPoint, PointCloud};
pub use dbscan::{dbscan, Cluster};
pub use ground::{filter_by_intensity, intensity_percentile, segment_ground, segment_ground_indices, GroundSegConfig};
pub use merge::{merge_lane_clusters, ClusterConfig};
pub use ransac::{fit_lane_ransac, least_squares_quadratic, project_lane, ransac_quadratic, LaneInstance3D, QuadFit, RansacConfig};

use crate::error::Result;
use crate::geometry::CameraModel;
use crate::labelkit::Lane2D;
use crate::rng::SeededRng;
use crate::synthworld::FrameSample;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtractConfig {
    pub ground: GroundSegConfig,
    pub cluster: ClusterConfig,
    pub ransac: RansacConfig,
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        self.ground.validate()?;
        self.cluster.validate()
    }
}

/// Every intermediate product of one extraction run.
#[derive(Debug, Clone, Default)]
pub struct ExtractReport {
    pub input_count: usize,
    pub ground_count: usize,
    pub candidate_count: usize,
    pub tau: f64,
    pub initial_clusters: Vec<Cluster>,
    pub lane_clusters: Vec<Cluster>,
    pub lanes_3d: Vec<LaneInstance3D>,
    pub lanes_2d: Vec<Lane2D>,
}

/// Runs the full chain on one cloud. Clusters that cannot be fitted or do
/// not project into the image are skipped.
pub fn extract_from_cloud(cloud: &PointCloud, cam: &CameraModel, cfg: &ExtractConfig) -> Result<ExtractReport> {
    let ground = segment_ground(cloud, &cfg.ground)?;
    let tau = match cfg.ground.tau_percentile {
        Some(q) => intensity_percentile(&ground, q).unwrap_or(cfg.ground.tau),
        None => cfg.ground.tau,
    };
    let candidates = filter_by_intensity(&ground, tau);
    let initial = dbscan(&candidates, cfg.cluster.eps1, cfg.cluster.min_pts);
    let merged = merge_lane_clusters(&initial, &cfg.cluster);
    let mut lanes_3d = Vec::new();
    let mut lanes_2d = Vec::new();
    for (k, c) in merged.iter().enumerate() {
        let mut rng = SeededRng::with_stream(cfg.ransac.seed, k as u64);
        let Ok(lane) = fit_lane_ransac(c, &candidates, &cfg.ransac, &mut rng) else { continue };
        if let Ok(l2) = project_lane(&lane, cam) {
            lanes_3d.push(lane);
            lanes_2d.push(l2);
        }
    }
    Ok(ExtractReport {
        input_count: cloud.len(),
        ground_count: ground.len(),
        candidate_count: candidates.len(),
        tau,
        initial_clusters: initial,
        lane_clusters: merged,
        lanes_3d,
        lanes_2d,
    })
}

/// Pseudo labels for one frame.
pub fn extract_pipeline(frame: &FrameSample, cfg: &ExtractConfig) -> Result<Vec<Lane2D>> {
    Ok(extract_from_cloud(&frame.cloud, &frame.camera, cfg)?.lanes_2d)
}
