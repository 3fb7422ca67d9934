//! 8-bit RGB images and the low-resolution float rasters fed to the networks.

use crate::labelkit::Lane2D;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Box-filtered luma in `[0, 1]` at `out_w x out_h`.
    pub fn downsample_gray(&self, out_w: usize, out_h: usize) -> Raster {
        let mut sum = vec![0.0f64; out_w * out_h];
        let mut cnt = vec![0u32; out_w * out_h];
        for y in 0..self.height {
            let oy = y * out_h / self.height;
            for x in 0..self.width {
                let ox = x * out_w / self.width;
                let [r, g, b] = self.pixel(x, y);
                let luma = (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0;
                sum[oy * out_w + ox] += luma;
                cnt[oy * out_w + ox] += 1;
            }
        }
        let data = sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        Raster { width: out_w, height: out_h, data }
    }
}

/// Draws each lane as a polyline of the given colour, `radius` px thick on
/// either side. Parts outside the image are clipped.
pub fn draw_lanes(img: &mut RgbImage, lanes: &[Lane2D], rgb: [u8; 3], radius: f64) {
    let r = radius.max(0.0);
    let ri = r.ceil() as i64;
    let mut dot = |u: f64, v: f64| {
        let (cu, cv) = (u.round() as i64, v.round() as i64);
        for y in cv - ri..=cv + ri {
            for x in cu - ri..=cu + ri {
                let inside = ((x as f64 - u).powi(2) + (y as f64 - v).powi(2)).sqrt() <= r + 0.5;
                if inside && x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                    img.put(x as usize, y as usize, rgb);
                }
            }
        }
    };
    for lane in lanes {
        let pts = lane.points();
        if let [only] = pts {
            dot(only.0, only.1);
        }
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let steps = ((b.0 - a.0).hypot(b.1 - a.1) * 2.0).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                dot(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            }
        }
    }
}

/// Single-channel float raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}
