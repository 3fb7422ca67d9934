//! Lane-instance merging of density clusters.

use super::dbscan::Cluster;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    /// DBSCAN radius (m).
    pub eps1: f64,
    /// DBSCAN core threshold (points, self included).
    pub min_pts: usize,
    /// Max across-lane center gap for merging (m).
    pub eps2: f64,
    /// Min along-lane center gap for merging (m).
    pub eps3: f64,
    /// Merged instances smaller than this are discarded.
    pub min_cluster_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { eps1: 0.6, min_pts: 8, eps2: 0.5, eps3: 3.0, min_cluster_size: 20 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps1 > 0.0 && self.min_pts > 0 && self.eps2 > 0.0 && self.eps3 > 0.0 && self.min_cluster_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("cluster parameters must all be positive".into()))
        }
    }
}

/// Walks the initial clusters in order. Each one is folded into the first
/// output cluster lying within `eps2` across and more than `eps3` along it
/// (dashes of one marking), otherwise it opens a new instance. Instances
/// with fewer than `min_cluster_size` points are dropped at the end.
pub fn merge_lane_clusters(initial: &[Cluster], cfg: &ClusterConfig) -> Vec<Cluster> {
    let mut out: Vec<Cluster> = Vec::new();
    for c in initial {
        let (ai, li) = c.center;
        let target = out.iter_mut().find(|o| (ai - o.center.0).abs() < cfg.eps2 && (li - o.center.1).abs() > cfg.eps3);
        match target {
            Some(o) => {
                let (n0, n1) = (o.len() as f64, c.len() as f64);
                o.center = ((o.center.0 * n0 + ai * n1) / (n0 + n1), (o.center.1 * n0 + li * n1) / (n0 + n1));
                o.member_indices.extend_from_slice(&c.member_indices);
                o.member_indices.sort_unstable();
            }
            None => out.push(c.clone()),
        }
    }
    out.retain(|c| c.len() >= cfg.min_cluster_size);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cl(start: usize, n: usize, across: f64, along: f64) -> Cluster {
        Cluster { member_indices: (start..start + n).collect(), center: (across, along) }
    }

    fn cfg(min: usize) -> ClusterConfig {
        ClusterConfig { min_cluster_size: min, ..ClusterConfig::default() }
    }

    #[test]
    fn dashes_of_one_line_merge() {
        let out = merge_lane_clusters(&[cl(0, 10, 0.10, 5.0), cl(10, 10, 0.25, 17.0)], &cfg(1));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 20);
        assert!((out[0].center.0 - 0.175).abs() < 1e-12 && (out[0].center.1 - 11.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_lines_stay_apart() {
        let out = merge_lane_clusters(&[cl(0, 10, 0.10, 5.0), cl(10, 10, 3.50, 5.2)], &cfg(1));
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn small_instances_removed() {
        assert!(merge_lane_clusters(&[cl(0, 4, 0.0, 1.0)], &cfg(5)).is_empty());
    }

    #[test]
    fn four_dashes_become_one_instance() {
        let dashes: Vec<Cluster> = (0..4).map(|k| cl(k * 25, 25, 1.75 + 0.02 * k as f64, 4.5 + 9.0 * k as f64)).collect();
        let out = merge_lane_clusters(&dashes, &ClusterConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 100);
    }
}
