//! Density-based clustering on ground-plane coordinates.

use std::collections::HashMap;

use super::cloud::PointCloud;

/// A group of candidate points with its mean ground-plane position.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Sorted indices into the clustered cloud.
    pub member_indices: Vec<usize>,
    /// Mean `(across, along)` of the members (m).
    pub center: (f64, f64),
}

impl Cluster {
    pub fn from_members(cloud: &PointCloud, mut member_indices: Vec<usize>) -> Self {
        member_indices.sort_unstable();
        let n = member_indices.len() as f64;
        let (sa, sl) = member_indices.iter().fold((0.0, 0.0), |acc, &i| {
            let (a, l) = cloud.points[i].ground_coords();
            (acc.0 + a, acc.1 + l)
        });
        Self { member_indices, center: (sa / n, sl / n) }
    }

    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

/// Sorts clusters by along-coordinate of their centers (ties: across, then
/// first member).
pub(crate) fn sort_clusters(clusters: &mut [Cluster]) {
    clusters.sort_by(|a, b| {
        a.center
            .1
            .total_cmp(&b.center.1)
            .then(a.center.0.total_cmp(&b.center.0))
            .then(a.member_indices[0].cmp(&b.member_indices[0]))
    });
}

struct GridIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn new(coords: &[(f64, f64)], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &(a, l)) in coords.iter().enumerate() {
            buckets.entry(((a / cell).floor() as i64, (l / cell).floor() as i64)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    /// All points within `eps` of point `i` (itself included), ascending.
    fn neighbours(&self, coords: &[(f64, f64)], i: usize, eps: f64, out: &mut Vec<usize>) {
        out.clear();
        let (a, l) = coords[i];
        let (ka, kl) = ((a / self.cell).floor() as i64, (l / self.cell).floor() as i64);
        for da in -1..=1 {
            for dl in -1..=1 {
                if let Some(b) = self.buckets.get(&(ka + da, kl + dl)) {
                    for &j in b {
                        let (dx, dy) = (coords[j].0 - a, coords[j].1 - l);
                        if dx * dx + dy * dy <= eps * eps {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Standard DBSCAN: a core point has at least `min_pts` points (itself
/// included) within `eps`; clusters are seeded in index order and border
/// points join the first cluster that reaches them. Noise is discarded.
pub fn dbscan(candidates: &PointCloud, eps: f64, min_pts: usize) -> Vec<Cluster> {
    let coords: Vec<(f64, f64)> = candidates.points.iter().map(|p| p.ground_coords()).collect();
    let n = coords.len();
    if n == 0 || !(eps > 0.0) {
        return Vec::new();
    }
    let index = GridIndex::new(&coords, eps);
    const UNSEEN: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let mut label = vec![UNSEEN; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut nb = Vec::new();
    let mut nb2 = Vec::new();
    for i in 0..n {
        if label[i] != UNSEEN {
            continue;
        }
        index.neighbours(&coords, i, eps, &mut nb);
        if nb.len() < min_pts {
            label[i] = NOISE;
            continue;
        }
        let c = members.len();
        members.push(vec![i]);
        label[i] = c;
        let mut queue: Vec<usize> = nb.iter().copied().filter(|&j| j != i).collect();
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            if label[q] == NOISE {
                label[q] = c;
                members[c].push(q);
                continue;
            }
            if label[q] != UNSEEN {
                continue;
            }
            label[q] = c;
            members[c].push(q);
            index.neighbours(&coords, q, eps, &mut nb2);
            if nb2.len() >= min_pts {
                queue.extend(nb2.iter().copied().filter(|&j| label[j] == UNSEEN || label[j] == NOISE));
            }
        }
    }
    let mut clusters: Vec<Cluster> = members.into_iter().map(|m| Cluster::from_members(candidates, m)).collect();
    sort_clusters(&mut clusters);
    clusters
}
