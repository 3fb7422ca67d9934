//! Loss terms of the correction objective and the masks they pool over.

use crate::error::{Error, Result};
use crate::labelkit::{pixel_iou, rasterize_mask, scale_lanes, Lane2D, LabelMask};
use crate::lanenet::{lane_loss, FeatureMap, GridConfig, GridGrad, GridLaneTensor};

/// `lane_loss(y1, y2)` against `y2` as a constant: its probabilities are
/// kept as soft targets and its objectness is `cls >= 0.5`.
pub fn consistency_loss(y1: &GridLaneTensor, y2: &GridLaneTensor) -> Result<(f64, GridGrad)> {
    lane_loss(y1, &y2.detached())
}

/// `lane_loss(y1, pseudo)` against an encoded pseudo label.
pub fn reconstruction_loss(y1: &GridLaneTensor, pseudo: &GridLaneTensor) -> Result<(f64, GridGrad)> {
    lane_loss(y1, pseudo)
}

/// Reconstruction-weight schedule and the raster its IoU is measured on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    /// Epochs (1-based, inclusive) during which the weight is forced to 1.
    pub epsilon_epochs: u32,
    pub iou_thresh: f64,
    pub width: usize,
    pub height: usize,
    /// Half-width of the drawn lanes in gate pixels.
    pub thickness: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { epsilon_epochs: 10, iou_thresh: 0.5, width: 64, height: 36, thickness: 2.0 }
    }
}

/// The reconstruction weight given the smaller of the two IoUs: 1 during the
/// first `epsilon_epochs` epochs, afterwards 0 when the IoU is at most
/// `iou_thresh` and 1 otherwise.
pub fn gate_from_iou(min_iou: f64, epoch: u32, gate: &GateConfig) -> f64 {
    if epoch <= gate.epsilon_epochs || min_iou > gate.iou_thresh {
        1.0
    } else {
        0.0
    }
}

/// Reconstruction weight for one sample, comparing both branch predictions
/// with the pseudo label on the gate raster.
pub fn lambda_r_gate(
    y1: &[Lane2D],
    y2: &[Lane2D],
    pseudo: &[Lane2D],
    epoch: u32,
    grid: &GridConfig,
    gate: &GateConfig,
) -> f64 {
    if epoch <= gate.epsilon_epochs {
        return 1.0;
    }
    let su = gate.width as f64 / grid.img_w as f64;
    let sv = gate.height as f64 / grid.img_h as f64;
    let mask = |l: &[Lane2D]| {
        let scaled = scale_lanes(l, su, sv, su / 2.0 - 0.5, sv / 2.0 - 0.5);
        rasterize_mask(&scaled, gate.height, gate.width, gate.thickness)
    };
    let mp = mask(pseudo);
    let iou1 = pixel_iou(&mask(y1), &mp).expect("same raster");
    let iou2 = pixel_iou(&mask(y2), &mp).expect("same raster");
    gate_from_iou(iou1.min(iou2), epoch, gate)
}

/// Per-channel mean of `f` over the set positions of `mask`.
pub fn mask_pool(f: &FeatureMap, mask: &LabelMask) -> Result<Vec<f64>> {
    if mask.width != f.w || mask.height != f.h {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs feature map {}x{}",
            mask.width, mask.height, f.w, f.h
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let plane = f.w * f.h;
    Ok((0..f.c)
        .map(|ch| {
            let s: f64 = (0..plane).filter(|&i| mask.bits[i]).map(|i| f.data[ch * plane + i]).sum();
            s / count as f64
        })
        .collect())
}

/// Adds the feature-map gradient of [`mask_pool`] given `gv`, the gradient
/// with respect to the pooled vector.
pub fn mask_pool_backward(mask: &LabelMask, gv: &[f64], g_feat: &mut [f64]) {
    let plane = mask.width * mask.height;
    let count = mask.count() as f64;
    for (ch, g) in gv.iter().enumerate() {
        for i in (0..plane).filter(|&i| mask.bits[i]) {
            g_feat[ch * plane + i] += g / count;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrad {
    pub p1: Vec<f64>,
    pub p2: Vec<Vec<f64>>,
    pub n: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + sum_{p2, n} exp(z_p1 . z_n - z_p1 . z_p2))` with gradients
/// for every input vector. Evaluated with a shifted log-sum-exp.
pub fn embedding_loss(z_p1: &[f64], z_p2: &[Vec<f64>], z_n: &[Vec<f64>]) -> Result<(f64, EmbeddingGrad)> {
    if z_p2.is_empty() || z_n.is_empty() {
        return Err(Error::EmptySet);
    }
    let d = z_p1.len();
    if let Some(bad) = z_p2.iter().chain(z_n).find(|z| z.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, actual: bad.len() });
    }
    let pos: Vec<f64> = z_p2.iter().map(|z| dot(z_p1, z)).collect();
    let neg: Vec<f64> = z_n.iter().map(|z| dot(z_p1, z)).collect();
    let mut m = 0.0f64;
    for &a in &neg {
        for &b in &pos {
            m = m.max(a - b);
        }
    }
    let mut total = (-m).exp();
    let mut w = vec![vec![0.0; pos.len()]; neg.len()];
    for (i, &a) in neg.iter().enumerate() {
        for (j, &b) in pos.iter().enumerate() {
            w[i][j] = (a - b - m).exp();
            total += w[i][j];
        }
    }
    let loss = m + total.ln();
    let mut g = EmbeddingGrad { p1: vec![0.0; d], p2: vec![vec![0.0; d]; pos.len()], n: vec![vec![0.0; d]; neg.len()] };
    for i in 0..neg.len() {
        for j in 0..pos.len() {
            let wij = w[i][j] / total;
            for k in 0..d {
                g.p1[k] += wij * (z_n[i][k] - z_p2[j][k]);
                g.n[i][k] += wij * z_p1[k];
                g.p2[j][k] -= wij * z_p1[k];
            }
        }
    }
    Ok((loss, g))
}

/// Positive and negative pooling masks on the feature grid.
///
/// Lanes are mapped to feature coordinates (cell centers at integers) and
/// drawn with half-width `thickness`. Every lane gives one positive mask and
/// two negatives, the lane shifted by `+-neg_offset` cells with all positive
/// pixels removed. Empty masks are dropped.
pub fn build_pos_neg_masks(
    lanes: &[Lane2D],
    grid: &GridConfig,
    thickness: f64,
    neg_offset: f64,
) -> (Vec<LabelMask>, Vec<LabelMask>) {
    let su = 1.0 / grid.cell_w();
    let sv = 1.0 / grid.cell_h();
    let draw = |l: &Lane2D, shift: f64| {
        let s = scale_lanes(std::slice::from_ref(l), su, sv, shift - 0.5, -0.5);
        rasterize_mask(&s, grid.h, grid.w, thickness)
    };
    let pos: Vec<LabelMask> = lanes.iter().map(|l| draw(l, 0.0)).filter(|m| !m.is_empty()).collect();
    let mut all_pos = LabelMask::zeros(grid.w, grid.h);
    for p in &pos {
        all_pos.union_with(p);
    }
    let mut neg = Vec::new();
    for l in lanes {
        for shift in [-neg_offset, neg_offset] {
            let mut m = draw(l, shift);
            m.subtract(&all_pos);
            if !m.is_empty() {
                neg.push(m);
            }
        }
    }
    (pos, neg)
}

/// `target = momentum * target + (1 - momentum) * online`, element-wise.
pub fn ema_update(target: &mut [f64], online: &[f64], momentum: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), actual: online.len() });
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = momentum * *t + (1.0 - momentum) * o;
    }
    Ok(())
}

/// `(l_c + lambda_r * l_r) + lambda_embed * l_embed`.
pub fn total_loss(l_c: f64, l_r: f64, lambda_r: f64, l_embed: f64, lambda_embed: f64) -> f64 {
    (l_c + lambda_r * l_r) + lambda_embed * l_embed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_examples() {
        let z = vec![0.0; 3];
        let (l, _) = embedding_loss(&z, &[z.clone()], &[z.clone()]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let p1 = vec![1.0, 1.0];
        let (l, _) = embedding_loss(&p1, &[vec![1.0, 1.0]], &[vec![1.0, -1.0]]).unwrap();
        assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        let (l, _) = embedding_loss(&z, &[z.clone()], &[z.clone(), z.clone()]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(embedding_loss(&z, &[], &[z.clone()]), Err(Error::EmptySet)));
    }

    #[test]
    fn embedding_gradient_and_monotonicity() {
        let p1 = vec![0.3, -0.7, 1.1];
        let p2 = vec![vec![0.5, 0.2, -0.4], vec![-1.0, 0.4, 0.9]];
        let n = vec![vec![0.1, 0.1, 0.1], vec![2.0, -0.3, 0.0], vec![-0.6, 0.8, 0.2]];
        let (l0, g) = embedding_loss(&p1, &p2, &n).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut q = p1.clone();
            q[k] += eps;
            let up = embedding_loss(&q, &p2, &n).unwrap().0;
            q[k] -= 2.0 * eps;
            let fd = (up - embedding_loss(&q, &p2, &n).unwrap().0) / (2.0 * eps);
            assert!((fd - g.p1[k]).abs() < 1e-8);
            let mut q = n.clone();
            q[1][k] += eps;
            let up = embedding_loss(&p1, &p2, &q).unwrap().0;
            q[1][k] -= 2.0 * eps;
            let fd = (up - embedding_loss(&p1, &p2, &q).unwrap().0) / (2.0 * eps);
            assert!((fd - g.n[1][k]).abs() < 1e-8);
            let mut q = p2.clone();
            q[0][k] += eps;
            let up = embedding_loss(&p1, &q, &n).unwrap().0;
            q[0][k] -= 2.0 * eps;
            let fd = (up - embedding_loss(&p1, &q, &n).unwrap().0) / (2.0 * eps);
            assert!((fd - g.p2[0][k]).abs() < 1e-8);
        }
        // Moving p2 towards p1 raises p1 . p2 and must lower the loss.
        let mut q = p2.clone();
        for k in 0..3 {
            q[0][k] += 0.1 * p1[k];
        }
        assert!(embedding_loss(&p1, &q, &n).unwrap().0 < l0);
        assert!(l0 > 0.0);
    }

    #[test]
    fn pooling_examples() {
        let mut f = FeatureMap::zeros(2, 2, 3);
        f.data.iter_mut().for_each(|v| *v = 3.0);
        let mut m = LabelMask::zeros(3, 2);
        m.set(1, 1);
        m.set(2, 0);
        assert_eq!(mask_pool(&f, &m).unwrap(), vec![3.0, 3.0]);
        f.data[5] = 1.0; // channel 0, (x 2, y 1)
        f.data[2] = 5.0; // channel 0, (x 2, y 0)
        let mut single = LabelMask::zeros(3, 2);
        single.set(2, 0);
        assert_eq!(mask_pool(&f, &single).unwrap(), vec![5.0, 3.0]);
        let mut two = LabelMask::zeros(3, 2);
        two.set(2, 1);
        two.set(1, 1);
        assert_eq!(mask_pool(&f, &two).unwrap()[0], 2.0);
        assert!(matches!(mask_pool(&f, &LabelMask::zeros(3, 2)), Err(Error::EmptyMask)));
    }

    #[test]
    fn mask_construction() {
        let grid = GridConfig::default();
        assert_eq!(build_pos_neg_masks(&[], &grid, 1.0, 2.0), (vec![], vec![]));
        let lane = Lane2D::new(vec![(640.0, 200.0), (640.0, 719.0)]).unwrap();
        let (pos, neg) = build_pos_neg_masks(&[lane.clone()], &grid, 1.0, 2.0);
        assert_eq!((pos.len(), neg.len()), (1, 2));
        for n in &neg {
            assert!(n.bits.iter().zip(&pos[0].bits).all(|(a, b)| !(*a && *b)));
        }
        let near = Lane2D::new(vec![(760.0, 200.0), (760.0, 719.0)]).unwrap();
        let (pos, neg) = build_pos_neg_masks(&[lane, near], &grid, 1.0, 2.0);
        for n in &neg {
            for p in &pos {
                assert!(n.bits.iter().zip(&p.bits).all(|(a, b)| !(*a && *b)));
            }
        }
    }

    #[test]
    fn gate_table_and_arithmetic() {
        let gate = GateConfig::default();
        assert_eq!(gate_from_iou(0.4, 11, &gate), 0.0);
        assert_eq!(gate_from_iou(0.6, 11, &gate), 1.0);
        assert_eq!(gate_from_iou(0.0, 3, &gate), 1.0);
        assert_eq!(total_loss(1.0, 0.2, 0.0, 0.5, 5.0), 3.5);
        let mut t = vec![0.0];
        ema_update(&mut t, &[1.0], 0.99).unwrap();
        assert!((t[0] - 0.01).abs() < 1e-15);
    }
}
