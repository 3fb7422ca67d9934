//! Self-supervised lane correction.
//!
//! An online network and its moving-average target each see the image with
//! a differently perturbed copy of the pseudo label as clue. The online
//! branch is trained to agree with the (thresholded) target prediction, to
//! reconstruct the pseudo label while the gate allows it, and to separate
//! pooled lane features from features just beside the lanes.

mod head;
mod losses;

use rayon::prelude::*;

pub use head::ProjectionHead;
pub use losses::{
    build_pos_neg_masks, consistency_loss, ema_update, embedding_loss, gate_from_iou, lambda_r_gate, mask_pool,
    mask_pool_backward, reconstruction_loss, total_loss, EmbeddingGrad, GateConfig,
};

use crate::error::{Error, Result};
use crate::labelkit::{perturb_labels, AugmentConfig, ImageSize, LabelMask, Lane2D};
use crate::lanenet::{
    clue_raster, decode_grid, encode_labels_to_grid, lane_loss, CorrectorModel, ForwardOutput, GridGrad,
    GridLaneTensor, ModelConfig, ModelInput, Optimizer, OptimizerKind,
};
use crate::raster::Raster;
use crate::rng::{stream_id, SeededRng};

/// How the reconstruction weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionMode {
    /// Epoch warm-up followed by the IoU gate.
    Gated,
    Always,
    Never,
}

impl std::str::FromStr for ReconstructionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Self::Gated),
            "always" => Ok(Self::Always),
            "never" => Ok(Self::Never),
            _ => Err(Error::Config(format!("unknown reconstruction mode '{s}' (expected gated, always or never)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlcConfig {
    pub model: ModelConfig,
    pub lambda_embed: f64,
    pub gate: GateConfig,
    pub reconstruction: ReconstructionMode,
    pub ema_momentum: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub embed_dim: usize,
    /// Half-width of pooling masks, in feature cells.
    pub feature_thickness: f64,
    /// Horizontal shift of the negative masks, in feature cells.
    pub neg_offset: f64,
    /// Half-width of the clue lanes, in image pixels.
    pub clue_thickness: f64,
    pub conf_thresh: f64,
    pub augment: AugmentConfig,
}

impl Default for SlcConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda_embed: 5.0,
            gate: GateConfig::default(),
            reconstruction: ReconstructionMode::Gated,
            ema_momentum: 0.99,
            optimizer: OptimizerKind::Adam,
            lr: 3e-3,
            epochs: 180,
            batch_size: 1,
            embed_dim: 8,
            feature_thickness: 1.0,
            neg_offset: 2.0,
            clue_thickness: 5.0,
            conf_thresh: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

impl SlcConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if !(self.lambda_embed >= 0.0) {
            return Err(Error::Config("slc.lambda_embed must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("slc.ema_momentum must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("slc.batch_size and slc.embed_dim must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.clue_thickness >= 1.0) || !(self.feature_thickness > 0.0) {
            return Err(Error::Config("slc: lr must be >= 0, thicknesses positive (clue >= 1 px)".into()));
        }
        Ok(())
    }

    fn image_size(&self) -> ImageSize {
        ImageSize { width: self.model.grid.img_w as u32, height: self.model.grid.img_h as u32 }
    }
}

/// Online and target networks with their projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub online: CorrectorModel,
    pub online_head: ProjectionHead,
    pub target: CorrectorModel,
    pub target_head: ProjectionHead,
    /// Completed epochs.
    pub epoch: u32,
}

impl TrainState {
    /// Randomly initialized online branch; the target starts as a copy.
    pub fn new(cfg: &SlcConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::with_stream(seed, stream_id(u64::MAX, 0));
        let online = CorrectorModel::init(cfg.model, &mut rng)?;
        let online_head = ProjectionHead::init(cfg.model.feat, cfg.embed_dim, &mut rng);
        Ok(Self { target: online.clone(), target_head: online_head.clone(), online, online_head, epoch: 0 })
    }

    /// Moves the target branch towards the online branch.
    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        if self.online.cfg != self.target.cfg {
            return Err(Error::ConfigMismatch);
        }
        ema_update(&mut self.target.params, &self.online.params, momentum)?;
        ema_update(&mut self.target_head.params, &self.online_head.params, momentum)
    }
}

/// One training frame: the low-resolution image and its pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct SlcSample {
    pub image: Raster,
    pub pseudo: Vec<Lane2D>,
}

#[derive(Debug, Clone)]
struct SamplePlan {
    input: ModelInput,
    y2: GridLaneTensor,
    pseudo: GridLaneTensor,
    lambda_r: f64,
    pos: Vec<LabelMask>,
    neg: Vec<LabelMask>,
}

/// Everything about a batch that the online parameters are not
/// differentiated through: perturbed clues, thresholded target predictions,
/// gate values, pooling masks and target-branch embeddings.
#[derive(Debug, Clone)]
pub struct SlcBatch {
    plans: Vec<SamplePlan>,
    z_p2: Vec<Vec<f64>>,
    anchors: usize,
}

/// Mean loss terms of a batch and the online gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub consistency: f64,
    /// Ungated reconstruction loss.
    pub reconstruction: f64,
    /// Mean reconstruction weight over the batch.
    pub lambda_r: f64,
    pub embedding: f64,
    pub grad_model: Vec<f64>,
    pub grad_head: Vec<f64>,
}

impl SlcBatch {
    /// Plans a batch. `streams[i]` selects the perturbation stream of
    /// `samples[i]`; `epoch` is 1-based. Returns the plan and the online
    /// forward passes it was built from.
    pub fn prepare(
        state: &TrainState,
        samples: &[&SlcSample],
        streams: &[u64],
        seed: u64,
        epoch: u32,
        cfg: &SlcConfig,
    ) -> Result<(Self, Vec<ForwardOutput>)> {
        let size = cfg.image_size();
        let planned: Vec<Result<(SamplePlan, ForwardOutput, Vec<Vec<f64>>)>> = samples
            .par_iter()
            .zip(streams.par_iter())
            .map(|(s, &stream)| {
                let mut rng = SeededRng::with_stream(seed, stream);
                let (m1, _) = perturb_labels(&s.pseudo, &cfg.augment, size, &mut rng);
                let (m2, _) = perturb_labels(&s.pseudo, &cfg.augment, size, &mut rng);
                let input1 = ModelInput::new(s.image.clone(), clue_raster(&m1, &cfg.model, cfg.clue_thickness));
                let input2 = ModelInput::new(s.image.clone(), clue_raster(&m2, &cfg.model, cfg.clue_thickness));
                let out1 = state.online.forward(&input1)?;
                let out2 = state.target.forward(&input2)?;
                let lanes1 = decode_grid(&out1.pred, cfg.conf_thresh);
                let lanes2 = decode_grid(&out2.pred, cfg.conf_thresh);
                let lambda_r = match cfg.reconstruction {
                    ReconstructionMode::Always => 1.0,
                    ReconstructionMode::Never => 0.0,
                    ReconstructionMode::Gated => {
                        lambda_r_gate(&lanes1, &lanes2, &s.pseudo, epoch, &cfg.model.grid, &cfg.gate)
                    }
                };
                let (pos, neg) = build_pos_neg_masks(&lanes1, &cfg.model.grid, cfg.feature_thickness, cfg.neg_offset);
                let mut z2 = Vec::with_capacity(pos.len());
                for p in &pos {
                    z2.push(state.target_head.forward(&mask_pool(&out2.features, p)?).0);
                }
                let plan = SamplePlan {
                    input: input1,
                    y2: out2.pred.detached(),
                    pseudo: encode_labels_to_grid(&s.pseudo, &cfg.model.grid),
                    lambda_r,
                    pos,
                    neg,
                };
                Ok((plan, out1, z2))
            })
            .collect();
        let mut plans = Vec::with_capacity(samples.len());
        let mut outs = Vec::with_capacity(samples.len());
        let mut z_p2 = Vec::new();
        for r in planned {
            let (p, o, z) = r?;
            plans.push(p);
            outs.push(o);
            z_p2.extend(z);
        }
        let anchors = if z_p2.is_empty() {
            0
        } else {
            plans.iter().filter(|p| !p.neg.is_empty()).map(|p| p.pos.len()).sum()
        };
        Ok((Self { plans, z_p2, anchors }, outs))
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    /// Batch objective and its gradient with respect to the online model and
    /// head. `cached` may hold the online forward passes for the current
    /// parameters to skip recomputing them.
    pub fn objective(
        &self,
        online: &CorrectorModel,
        head: &ProjectionHead,
        lambda_embed: f64,
        cached: Option<&[ForwardOutput]>,
    ) -> Result<BatchLoss> {
        let b = self.plans.len() as f64;
        let a = self.anchors as f64;
        let parts: Vec<Result<(f64, f64, f64, f64, Vec<f64>, Vec<f64>)>> = self
            .plans
            .par_iter()
            .enumerate()
            .map(|(i, plan)| {
                let fresh;
                let out = match cached {
                    Some(c) => &c[i],
                    None => {
                        fresh = online.forward(&plan.input)?;
                        &fresh
                    }
                };
                let (lc, gc) = lane_loss(&out.pred, &plan.y2)?;
                let (lr, gr) = lane_loss(&out.pred, &plan.pseudo)?;
                let mut g_pred = GridGrad::zeros(&online.cfg.grid);
                g_pred.add_scaled(&gc, 1.0 / b);
                g_pred.add_scaled(&gr, plan.lambda_r / b);
                let mut g_head = vec![0.0; head.params.len()];
                let mut g_feat = vec![0.0; out.features.data.len()];
                let mut le_sum = 0.0;
                if self.anchors > 0 && !plan.neg.is_empty() && lambda_embed != 0.0 {
                    let scale = lambda_embed / a;
                    let mut negs = Vec::with_capacity(plan.neg.len());
                    for m in &plan.neg {
                        let v = mask_pool(&out.features, m)?;
                        let (z, h) = head.forward(&v);
                        negs.push((v, z, h));
                    }
                    let z_n: Vec<Vec<f64>> = negs.iter().map(|n| n.1.clone()).collect();
                    let mut g_zn = vec![vec![0.0; head.d]; negs.len()];
                    for m in &plan.pos {
                        let v = mask_pool(&out.features, m)?;
                        let (z, h) = head.forward(&v);
                        let (le, eg) = embedding_loss(&z, &self.z_p2, &z_n)?;
                        le_sum += le;
                        let gz: Vec<f64> = eg.p1.iter().map(|g| g * scale).collect();
                        let gv = head.backward(&v, &h, &gz, &mut g_head);
                        mask_pool_backward(m, &gv, &mut g_feat);
                        for (acc, g) in g_zn.iter_mut().zip(&eg.n) {
                            acc.iter_mut().zip(g).for_each(|(x, y)| *x += y * scale);
                        }
                    }
                    for ((m, (v, _, h)), gz) in plan.neg.iter().zip(&negs).zip(&g_zn) {
                        let gv = head.backward(v, h, gz, &mut g_head);
                        mask_pool_backward(m, &gv, &mut g_feat);
                    }
                }
                let g_model = online.backward(out, &g_pred, Some(&g_feat));
                Ok((lc, lr, plan.lambda_r, le_sum, g_model, g_head))
            })
            .collect();
        let mut loss = BatchLoss {
            total: 0.0,
            consistency: 0.0,
            reconstruction: 0.0,
            lambda_r: 0.0,
            embedding: 0.0,
            grad_model: vec![0.0; online.params.len()],
            grad_head: vec![0.0; head.params.len()],
        };
        let mut gated = 0.0;
        for part in parts {
            let (lc, lr, lam, le, gm, gh) = part?;
            loss.consistency += lc / b;
            loss.reconstruction += lr / b;
            loss.lambda_r += lam / b;
            gated += lam * lr / b;
            if self.anchors > 0 {
                loss.embedding += le / a;
            }
            loss.grad_model.iter_mut().zip(&gm).for_each(|(x, y)| *x += y);
            loss.grad_head.iter_mut().zip(&gh).for_each(|(x, y)| *x += y);
        }
        loss.total = total_loss(loss.consistency, gated, 1.0, loss.embedding, lambda_embed);
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub total: f64,
    pub consistency: f64,
    pub reconstruction: f64,
    pub embedding: f64,
    /// Fraction of samples with the reconstruction term switched on.
    pub lambda_r: f64,
}

/// Trains a fresh state for `cfg.epochs` epochs.
pub fn train_slc(samples: &[SlcSample], cfg: &SlcConfig, seed: u64) -> Result<(TrainState, Vec<EpochStats>)> {
    let mut state = TrainState::new(cfg, seed)?;
    let stats = continue_slc(&mut state, samples, cfg, seed, cfg.epochs)?;
    Ok((state, stats))
}

/// Runs `epochs` more epochs on an existing state.
pub fn continue_slc(
    state: &mut TrainState,
    samples: &[SlcSample],
    cfg: &SlcConfig,
    seed: u64,
    epochs: u32,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if state.online.cfg != cfg.model {
        return Err(Error::ConfigMismatch);
    }
    let mut opt_model = Optimizer::new(cfg.optimizer, cfg.lr, state.online.params.len());
    let mut opt_head = Optimizer::new(cfg.optimizer, cfg.lr, state.online_head.params.len());
    let mut stats = Vec::new();
    for _ in 0..epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle = SeededRng::with_stream(seed, stream_id(u64::MAX - 1, epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.index(i + 1));
        }
        let mut acc = EpochStats { epoch, total: 0.0, consistency: 0.0, reconstruction: 0.0, embedding: 0.0, lambda_r: 0.0 };
        let batches = order.chunks(cfg.batch_size).count() as f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SlcSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let streams: Vec<u64> = chunk.iter().map(|&i| stream_id(epoch as u64, i as u64)).collect();
            let (plan, outs) = SlcBatch::prepare(state, &batch, &streams, seed, epoch, cfg)?;
            let loss = plan.objective(&state.online, &state.online_head, cfg.lambda_embed, Some(&outs))?;
            opt_model.step(&mut state.online.params, &loss.grad_model)?;
            opt_head.step(&mut state.online_head.params, &loss.grad_head)?;
            state.ema_update(cfg.ema_momentum)?;
            acc.total += loss.total / batches;
            acc.consistency += loss.consistency / batches;
            acc.reconstruction += loss.reconstruction / batches;
            acc.embedding += loss.embedding / batches;
            acc.lambda_r += loss.lambda_r / batches;
        }
        state.epoch = epoch;
        stats.push(acc);
    }
    Ok(stats)
}

/// Online prediction for `image` with `noisy` as clue, decoded to lanes.
pub fn correct_labels(state: &TrainState, image: &Raster, noisy: &[Lane2D], cfg: &SlcConfig) -> Result<Vec<Lane2D>> {
    let input = ModelInput::new(image.clone(), clue_raster(noisy, &cfg.model, cfg.clue_thickness));
    Ok(decode_grid(&state.online.forward(&input)?.pred, cfg.conf_thresh))
}

/// Reconstruction loss of the online branch given the unperturbed pseudo
/// label as clue; deterministic, for monitoring.
pub fn validation_loss(state: &TrainState, sample: &SlcSample, cfg: &SlcConfig) -> Result<f64> {
    let input = ModelInput::new(sample.image.clone(), clue_raster(&sample.pseudo, &cfg.model, cfg.clue_thickness));
    let out = state.online.forward(&input)?;
    Ok(reconstruction_loss(&out.pred, &encode_labels_to_grid(&sample.pseudo, &cfg.model.grid))?.0)
}
