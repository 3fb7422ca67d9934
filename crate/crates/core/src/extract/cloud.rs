use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl CloudPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    /// Ground-plane coordinates `(across, along)`: sensor `y` (left) and `x` (forward).
    pub fn ground_coords(&self) -> (f64, f64) {
        (self.y, self.x)
    }
}

/// LiDAR-like sweep: sensor-frame points (x forward, y left, z up) with
/// intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<CloudPoint>) -> Result<Self> {
        let cloud = Self { points };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Format("non-finite point coordinate".into()));
            }
            if !(0.0..=1.0).contains(&p.intensity) {
                return Err(Error::Format(format!("intensity {} outside [0, 1]", p.intensity)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud { points: indices.iter().map(|&i| self.points[i]).collect() }
    }
}
