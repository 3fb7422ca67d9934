//! The corrector / detector network.
//!
//! Every grid cell runs the same two small MLPs on its own patch of the
//! low-resolution input (image luma and label-clue coverage, plus context
//! cells on each side) and its normalized position: a presence branch and a
//! regression branch. Keeping the branches apart stops the pixel-scale
//! regression gradient from swamping the presence term.
//!
//! For each partition row the regression branch scores every column of the
//! patch; the offset is the softmax-weighted mean of the column centers. Two
//! learned gains add the image and clue values of the matching patch row
//! straight onto those scores, so a bright column can win before the hidden
//! layers have learned anything. The last regression output places the
//! lane start. The regression branch's
//! second hidden layer is the per-cell feature vector, so the stacked
//! features form a `feat x grid_h x grid_w` map. Contrasting lanes with the
//! positions just beside them is a localization cue, and the presence
//! branch's small averaged cross-entropy gradient would be drowned by it.

use crate::error::{Error, Result};
use crate::labelkit::{rasterize_mask, Lane2D};
use crate::lanenet::grid::{GridConfig, GridGrad, GridLaneTensor};
use crate::raster::{Raster, RgbImage};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub in_w: usize,
    pub in_h: usize,
    /// Neighbouring cells included on each side of a cell's patch.
    pub ctx_x: usize,
    pub ctx_y: usize,
    pub hidden: usize,
    pub feat: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { grid: GridConfig::default(), in_w: 128, in_h: 72, ctx_x: 1, ctx_y: 0, hidden: 32, feat: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.in_w == 0 || self.in_h == 0 || self.in_w % self.grid.w != 0 || self.in_h % self.grid.h != 0 {
            return Err(Error::Config("model input size must be a positive multiple of the grid size".into()));
        }
        if self.hidden == 0 || self.feat == 0 {
            return Err(Error::Config("model layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Input pixels per cell, (x, y).
    pub fn block(&self) -> (usize, usize) {
        (self.in_w / self.grid.w, self.in_h / self.grid.h)
    }

    pub fn patch_w(&self) -> usize {
        self.block().0 * (1 + 2 * self.ctx_x)
    }

    pub fn patch_h(&self) -> usize {
        self.block().1 * (1 + 2 * self.ctx_y)
    }

    /// Two channels per patch pixel plus two position inputs.
    pub fn in_dim(&self) -> usize {
        2 * self.patch_w() * self.patch_h() + 2
    }

    /// Regression outputs: one logit per patch column and partition row,
    /// plus the start.
    pub fn reg_outputs(&self) -> usize {
        self.grid.n * self.patch_w() + 1
    }

    /// Two branches of `in -> hidden -> feat -> out` with one presence
    /// output and [`Self::reg_outputs`] regression outputs, then the two
    /// row gains.
    pub fn param_count(&self) -> usize {
        let (i, h, f) = (self.in_dim(), self.hidden, self.feat);
        let out = 1 + self.reg_outputs();
        2 * (h * i + h + f * h + f) + f * out + out + 2
    }

    /// Patch row (within the gathered patch) that partition `k` falls on.
    fn partition_patch_row(&self, k: usize) -> usize {
        let by = self.block().1;
        self.ctx_y * by + (2 * k + 1) * by / (2 * self.grid.n)
    }

    /// Horizontal position of each patch column's center relative to the
    /// cell center, in image pixels.
    pub fn column_offsets(&self) -> Vec<f64> {
        let (bx, _) = self.block();
        let scale = self.grid.img_w as f64 / self.in_w as f64;
        let mid = (self.ctx_x * bx) as f64 + bx as f64 / 2.0;
        (0..self.patch_w()).map(|c| (c as f64 + 0.5 - mid) * scale).collect()
    }
}

/// Low-resolution network input: image luma and clue coverage in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub image: Raster,
    pub clue: Raster,
}

impl ModelInput {
    pub fn new(image: Raster, clue: Raster) -> Self {
        Self { image, clue }
    }

    /// Image input with an all-zero clue, as used by image-only detectors.
    pub fn image_only(image: &RgbImage, cfg: &ModelConfig) -> Self {
        Self { image: image.downsample_gray(cfg.in_w, cfg.in_h), clue: Raster::zeros(cfg.in_w, cfg.in_h) }
    }

    pub fn with_clue(&self, lanes: &[Lane2D], cfg: &ModelConfig, thickness: f64) -> Self {
        Self { image: self.image.clone(), clue: clue_raster(lanes, cfg, thickness) }
    }
}

/// Rasterizes lanes at full resolution and box-averages the mask down to the
/// model input size.
pub fn clue_raster(lanes: &[Lane2D], cfg: &ModelConfig, thickness: f64) -> Raster {
    let (w, h) = (cfg.grid.img_w, cfg.grid.img_h);
    let mask = rasterize_mask(lanes, h, w, thickness);
    let mut out = Raster::zeros(cfg.in_w, cfg.in_h);
    let mut cnt = vec![0u32; cfg.in_w * cfg.in_h];
    for y in 0..h {
        let oy = y * cfg.in_h / h;
        for x in 0..w {
            let o = oy * cfg.in_w + x * cfg.in_w / w;
            cnt[o] += 1;
            if mask.bits[y * w + x] {
                out.data[o] += 1.0;
            }
        }
    }
    for (v, c) in out.data.iter_mut().zip(cnt) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    out
}

/// Per-cell features, laid out `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pred: GridLaneTensor,
    /// Second hidden layer of the regression branch.
    pub features: FeatureMap,
    inputs: Vec<f64>,
    /// Per branch: first hidden layer, cells x hidden.
    h1: [Vec<f64>; 2],
    /// Second hidden layer of the presence branch, cells x feat.
    f_cls: Vec<f64>,
    /// Column weights, cells x n x patch_w.
    weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorModel {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
}

/// Offsets of one branch's tensors in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Branch {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    out: usize,
}

impl Branch {
    fn new(start: usize, cfg: &ModelConfig, out: usize) -> Self {
        let (i, h, f) = (cfg.in_dim(), cfg.hidden, cfg.feat);
        let w1 = start;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + f * h;
        let w3 = b2 + f;
        let b3 = w3 + out * f;
        Self { w1, b1, w2, b2, w3, b3, out }
    }

    fn end(&self) -> usize {
        self.b3 + self.out
    }

    fn forward(&self, p: &[f64], cfg: &ModelConfig, x: &[f64], h: &mut [f64], f: &mut [f64], o: &mut [f64]) {
        let (id, hd, fd) = (cfg.in_dim(), cfg.hidden, cfg.feat);
        for (r, hv) in h.iter_mut().enumerate() {
            *hv = (p[self.b1 + r] + dot(&p[self.w1 + r * id..self.w1 + (r + 1) * id], x)).tanh();
        }
        for (r, fv) in f.iter_mut().enumerate() {
            *fv = (p[self.b2 + r] + dot(&p[self.w2 + r * hd..self.w2 + (r + 1) * hd], h)).tanh();
        }
        for (r, ov) in o.iter_mut().enumerate() {
            *ov = p[self.b3 + r] + dot(&p[self.w3 + r * fd..self.w3 + (r + 1) * fd], f);
        }
    }

    /// Accumulates parameter gradients for one cell given the output
    /// gradient `go` and an extra gradient `gf` on the second hidden layer.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        p: &[f64],
        cfg: &ModelConfig,
        x: &[f64],
        h: &[f64],
        f: &[f64],
        go: &[f64],
        gf: &mut [f64],
        grad: &mut [f64],
    ) {
        let (id, hd, fd) = (cfg.in_dim(), cfg.hidden, cfg.feat);
        for (r, &g) in go.iter().enumerate() {
            grad[self.b3 + r] += g;
            if g == 0.0 {
                continue;
            }
            for q in 0..fd {
                grad[self.w3 + r * fd + q] += g * f[q];
                gf[q] += g * p[self.w3 + r * fd + q];
            }
        }
        let mut gh = vec![0.0; hd];
        for q in 0..fd {
            let gz = gf[q] * (1.0 - f[q] * f[q]);
            if gz == 0.0 {
                continue;
            }
            grad[self.b2 + q] += gz;
            let row = self.w2 + q * hd;
            for r in 0..hd {
                grad[row + r] += gz * h[r];
                gh[r] += gz * p[row + r];
            }
        }
        for r in 0..hd {
            let gz = gh[r] * (1.0 - h[r] * h[r]);
            if gz == 0.0 {
                continue;
            }
            grad[self.b1 + r] += gz;
            let row = self.w1 + r * id;
            for (gw, xv) in grad[row..row + id].iter_mut().zip(x) {
                *gw += gz * xv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multiplier on the row gains, so that gains of order one give sharp
/// column weights.
const ROW_GAIN_SCALE: f64 = 10.0;

/// Logit of the presence bias at initialization; keeps the untrained
/// network from predicting lanes everywhere.
const CLS_PRIOR_BIAS: f64 = -2.0;

/// Initial clue row gain (before scaling): column weights start out peaked
/// on the clue, so a correction network begins close to copying its input
/// label. Image-only detectors see an all-zero clue and are unaffected.
const CLUE_GAIN_INIT: f64 = 0.5;

impl CorrectorModel {
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params: vec![0.0; cfg.param_count()] })
    }

    /// Xavier-uniform weights, zero biases except the presence bias, and the
    /// clue row gain set to [`CLUE_GAIN_INIT`].
    pub fn init(cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut m = Self::zeros(cfg)?;
        let (i, h, f) = (cfg.in_dim(), cfg.hidden, cfg.feat);
        for b in m.branches() {
            for (start, fan_out, fan_in) in [(b.w1, h, i), (b.w2, f, h), (b.w3, b.out, f)] {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for p in &mut m.params[start..start + fan_in * fan_out] {
                    *p = rng.range(-a, a);
                }
            }
        }
        let b3 = m.branches()[0].b3;
        m.params[b3] = CLS_PRIOR_BIAS;
        let gains = m.branches()[1].end();
        m.params[gains + 1] = CLUE_GAIN_INIT;
        Ok(m)
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if params.len() != cfg.param_count() {
            return Err(Error::DimensionMismatch { expected: cfg.param_count(), actual: params.len() });
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::Format("non-finite model parameter".into()));
        }
        Ok(Self { cfg, params })
    }

    /// Presence branch, then regression branch.
    fn branches(&self) -> [Branch; 2] {
        let cls = Branch::new(0, &self.cfg, 1);
        let reg = Branch::new(cls.end(), &self.cfg, self.cfg.reg_outputs());
        [cls, reg]
    }

    fn gather(&self, input: &ModelInput, ci: usize, cj: usize, out: &mut [f64]) {
        let c = &self.cfg;
        let (bx, by) = c.block();
        let x0 = ci as isize * bx as isize - (c.ctx_x * bx) as isize;
        let y0 = cj as isize * by as isize - (c.ctx_y * by) as isize;
        let mut k = 0;
        for dy in 0..c.patch_h() as isize {
            let y = y0 + dy;
            for dx in 0..c.patch_w() as isize {
                let x = x0 + dx;
                let inside = x >= 0 && y >= 0 && (x as usize) < c.in_w && (y as usize) < c.in_h;
                if inside {
                    let idx = y as usize * c.in_w + x as usize;
                    out[k] = input.image.data[idx];
                    out[k + 1] = input.clue.data[idx];
                } else {
                    out[k] = 0.0;
                    out[k + 1] = 0.0;
                }
                k += 2;
            }
        }
        out[k] = (ci as f64 + 0.5) / c.grid.w as f64 * 2.0 - 1.0;
        out[k + 1] = (cj as f64 + 0.5) / c.grid.h as f64 * 2.0 - 1.0;
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ForwardOutput> {
        let c = &self.cfg;
        for r in [&input.image, &input.clue] {
            if r.width != c.in_w || r.height != c.in_h || r.data.len() != c.in_w * c.in_h {
                return Err(Error::ShapeMismatch(format!(
                    "input raster {}x{}, model expects {}x{}",
                    r.width, r.height, c.in_w, c.in_h
                )));
            }
        }
        let g = c.grid;
        let cells = g.cells();
        let (id, hd, fd) = (c.in_dim(), c.hidden, c.feat);
        let [cls, reg] = self.branches();
        let p = &self.params;
        let mut inputs = vec![0.0; cells * id];
        let mut h_cls = vec![0.0; cells * hd];
        let mut h_reg = vec![0.0; cells * hd];
        let mut f_cls = vec![0.0; cells * fd];
        let mut features = FeatureMap::zeros(fd, g.h, g.w);
        let mut pred = GridLaneTensor::zeros(g);
        let mut f = vec![0.0; fd];
        let mut o_cls = [0.0];
        let pw = c.patch_w();
        let cols = c.column_offsets();
        let mut o_reg = vec![0.0; c.reg_outputs()];
        let mut weights = vec![0.0; cells * g.n * pw];
        let gains = reg.end();
        for cj in 0..g.h {
            for ci in 0..g.w {
                let cell = g.index(ci, cj);
                let x = &mut inputs[cell * id..(cell + 1) * id];
                self.gather(input, ci, cj, x);
                cls.forward(p, c, x, &mut h_cls[cell * hd..(cell + 1) * hd], &mut f_cls[cell * fd..(cell + 1) * fd], &mut o_cls);
                reg.forward(p, c, x, &mut h_reg[cell * hd..(cell + 1) * hd], &mut f, &mut o_reg);
                for (q, fv) in f.iter().enumerate() {
                    features.data[q * cells + cell] = *fv;
                }
                pred.cls[cell] = sigmoid(o_cls[0]);
                let (ga, gb) = (ROW_GAIN_SCALE * p[gains], ROW_GAIN_SCALE * p[gains + 1]);
                for k in 0..g.n {
                    let row = 2 * c.partition_patch_row(k) * pw;
                    for q in 0..pw {
                        o_reg[k * pw + q] += ga * x[row + 2 * q] + gb * x[row + 2 * q + 1];
                    }
                    let w = &mut weights[(cell * g.n + k) * pw..(cell * g.n + k + 1) * pw];
                    softmax(&o_reg[k * pw..(k + 1) * pw], w);
                    pred.offsets[cell * g.n + k] = dot(w, &cols);
                }
                pred.start[cell] = g.center(ci, cj).1 + g.cell_h() * o_reg[g.n * pw];
            }
        }
        Ok(ForwardOutput { pred, features, inputs, h1: [h_cls, h_reg], f_cls, weights })
    }

    /// Parameter gradient given the loss gradient with respect to the
    /// prediction and, optionally, the feature map (same layout as
    /// [`FeatureMap::data`]).
    pub fn backward(&self, out: &ForwardOutput, g_pred: &GridGrad, g_feat: Option<&[f64]>) -> Vec<f64> {
        let c = &self.cfg;
        let g = c.grid;
        let cells = g.cells();
        let (id, hd, fd) = (c.in_dim(), c.hidden, c.feat);
        let [cls, reg] = self.branches();
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let pw = c.patch_w();
        let cols = c.column_offsets();
        let mut go_reg = vec![0.0; c.reg_outputs()];
        let gains = reg.end();
        let mut f = vec![0.0; fd];
        let mut gf = vec![0.0; fd];
        for cell in 0..cells {
            let x = &out.inputs[cell * id..(cell + 1) * id];
            let pc = out.pred.cls[cell];
            let go_cls = [g_pred.cls[cell] * pc * (1.0 - pc)];
            gf.iter_mut().for_each(|v| *v = 0.0);
            let fc = &out.f_cls[cell * fd..(cell + 1) * fd];
            cls.backward(p, c, x, &out.h1[0][cell * hd..(cell + 1) * hd], fc, &go_cls, &mut gf, &mut grad);
            for k in 0..g.n {
                let go = g_pred.offsets[cell * g.n + k];
                let off = out.pred.offsets[cell * g.n + k];
                let w = &out.weights[(cell * g.n + k) * pw..(cell * g.n + k + 1) * pw];
                let row = 2 * c.partition_patch_row(k) * pw;
                for q in 0..pw {
                    let gl = go * w[q] * (cols[q] - off);
                    go_reg[k * pw + q] = gl;
                    grad[gains] += ROW_GAIN_SCALE * gl * x[row + 2 * q];
                    grad[gains + 1] += ROW_GAIN_SCALE * gl * x[row + 2 * q + 1];
                }
            }
            go_reg[g.n * pw] = g_pred.start[cell] * g.cell_h();
            for q in 0..fd {
                f[q] = out.features.data[q * cells + cell];
                gf[q] = g_feat.map_or(0.0, |gx| gx[q * cells + cell]);
            }
            reg.backward(p, c, x, &out.h1[1][cell * hd..(cell + 1) * hd], &f, &go_reg, &mut gf, &mut grad);
        }
        grad
    }
}

fn softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanenet::grid::{encode_labels_to_grid, lane_loss};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            grid: GridConfig { w: 4, h: 3, n: 2, img_w: 160, img_h: 120 },
            in_w: 8,
            in_h: 6,
            ctx_x: 1,
            ctx_y: 0,
            hidden: 5,
            feat: 3,
        }
    }

    fn random_input(cfg: &ModelConfig, rng: &mut SeededRng) -> ModelInput {
        let mut a = Raster::zeros(cfg.in_w, cfg.in_h);
        let mut b = Raster::zeros(cfg.in_w, cfg.in_h);
        a.data.iter_mut().for_each(|v| *v = rng.uniform());
        b.data.iter_mut().for_each(|v| *v = rng.uniform());
        ModelInput::new(a, b)
    }

    #[test]
    fn zero_params_give_half_probability() {
        let cfg = ModelConfig::default();
        let m = CorrectorModel::zeros(cfg).unwrap();
        let input = ModelInput::new(Raster::zeros(cfg.in_w, cfg.in_h), Raster::zeros(cfg.in_w, cfg.in_h));
        let out = m.forward(&input).unwrap();
        assert!(out.pred.cls.iter().all(|&p| p == 0.5));
        assert_eq!((out.features.c, out.features.h, out.features.w), (16, 9, 16));
        assert_eq!(out.pred.offsets.len(), 16 * 9 * 4);
        // Uniform column weights over a centered patch average to zero.
        assert!(out.pred.offsets.iter().all(|o| o.abs() < 1e-9));
    }

    #[test]
    fn column_centers() {
        let cols = tiny_cfg().column_offsets();
        // Cells are 40 px wide, input pixels 20 px; the patch spans three cells.
        assert_eq!(cols, vec![-50.0, -30.0, -10.0, 10.0, 30.0, 50.0]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(3);
        let m = CorrectorModel::init(cfg, &mut rng).unwrap();
        let input = random_input(&cfg, &mut rng);
        let a = m.forward(&input).unwrap();
        let b = m.forward(&input).unwrap();
        assert_eq!(a.pred, b.pred);
        let bad = ModelInput::new(Raster::zeros(7, 6), Raster::zeros(7, 6));
        assert!(matches!(m.forward(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let m = CorrectorModel::init(cfg, &mut rng).unwrap();
            let input = random_input(&cfg, &mut rng);
            let lane = Lane2D::new(vec![(rng.range(20.0, 140.0), 0.0), (rng.range(20.0, 140.0), 119.0)]).unwrap();
            let target = encode_labels_to_grid(&[lane], &cfg.grid);
            let gfeat: Vec<f64> = (0..cfg.feat * cfg.grid.cells()).map(|_| rng.normal(0.0, 1.0)).collect();
            let eval = |params: &[f64]| {
                let mm = CorrectorModel { cfg, params: params.to_vec() };
                let out = mm.forward(&input).unwrap();
                let extra: f64 = out.features.data.iter().zip(&gfeat).map(|(a, b)| a * b).sum();
                lane_loss(&out.pred, &target).unwrap().0 + extra
            };
            let out = m.forward(&input).unwrap();
            let (_, g) = lane_loss(&out.pred, &target).unwrap();
            let grad = m.backward(&out, &g, Some(&gfeat));
            let h = 1e-4;
            for i in 0..m.params.len() {
                let mut p = m.params.clone();
                p[i] += h;
                let up = eval(&p);
                p[i] -= 2.0 * h;
                let down = eval(&p);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err < 1e-3 || (fd - grad[i]).abs() < 1e-7, "param {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn clue_coverage() {
        let cfg = ModelConfig::default();
        assert!(clue_raster(&[], &cfg, 5.0).data.iter().all(|&v| v == 0.0));
        let lane = Lane2D::new(vec![(650.0, 0.0), (650.0, 719.0)]).unwrap();
        let r = clue_raster(&[lane], &cfg, 5.0);
        // Pixels 645..=655 are covered: 6 of the 10 columns in input column 65.
        assert!((r.get(65, 10) - 6.0 / 10.0).abs() < 1e-12);
        assert_eq!(r.get(10, 10), 0.0);
    }
}
