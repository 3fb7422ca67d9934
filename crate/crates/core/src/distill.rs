//! Naive detector, label refinement and student distillation.
//!
//! Only the first step of [`run_adaptation`] looks at point clouds; every
//! later stage works from images and labels alone.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extract::{extract_from_cloud, ExtractConfig, PointCloud};
use crate::geometry::CameraModel;
use crate::labelkit::{to_row_anchors, Lane2D, RowAnchorLabel};
use crate::lanenet::{
    decode_grid, encode_labels_to_grid, finish_lanes, lane_loss, CorrectorModel, GridGrad, ModelConfig, ModelInput, Optimizer,
    OptimizerKind,
};
use crate::metrics::{tusimple_eval, EvalConfig, EvalResult};
use crate::raster::Raster;
use crate::rng::{stream_id, SeededRng};
use crate::slc::{correct_labels, train_slc, SlcConfig, SlcSample, TrainState};

/// Image-only detector training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub conf_thresh: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::Adam,
            lr: 3e-3,
            epochs: 300,
            batch_size: 4,
            conf_thresh: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config("detector: batch_size must be positive and lr >= 0".into()));
        }
        Ok(())
    }
}

fn image_input(image: &Raster, cfg: &ModelConfig) -> ModelInput {
    ModelInput::new(image.clone(), Raster::zeros(cfg.in_w, cfg.in_h))
}

/// Supervised training on `(image, lanes)` pairs with an all-zero clue.
/// Returns the model and the mean training loss of every epoch.
pub fn train_detector(
    images: &[Raster],
    labels: &[Vec<Lane2D>],
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(CorrectorModel, Vec<f64>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: images.len(), actual: labels.len() });
    }
    let mut rng = SeededRng::with_stream(seed, stream_id(u64::MAX, 1));
    let mut model = CorrectorModel::init(cfg.model, &mut rng)?;
    let targets: Vec<_> = labels.iter().map(|l| encode_labels_to_grid(l, &cfg.model.grid)).collect();
    let inputs: Vec<_> = images.iter().map(|im| image_input(im, &cfg.model)).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.params.len());
    let mut history = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle = SeededRng::with_stream(seed, stream_id(u64::MAX - 2, epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.index(i + 1));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len() as f64;
            let parts: Vec<Result<(f64, Vec<f64>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let out = model.forward(&inputs[i])?;
                    let (l, g) = lane_loss(&out.pred, &targets[i])?;
                    let mut scaled = GridGrad::zeros(&cfg.model.grid);
                    scaled.add_scaled(&g, 1.0 / b);
                    Ok((l, model.backward(&out, &scaled, None)))
                })
                .collect();
            let mut grad = vec![0.0; model.params.len()];
            for part in parts {
                let (l, g) = part?;
                epoch_loss += l / images.len() as f64;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            opt.step(&mut model.params, &grad)?;
        }
        history.push(epoch_loss);
    }
    Ok((model, history))
}

/// The naive detector: trained directly on noisy pseudo labels.
pub fn train_naive_detector(
    images: &[Raster],
    pseudo: &[Vec<Lane2D>],
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(CorrectorModel, Vec<f64>)> {
    train_detector(images, pseudo, cfg, seed)
}

/// The student: trained on refined labels, needs only an image afterwards.
pub fn train_student(
    images: &[Raster],
    refined: &[Vec<Lane2D>],
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(CorrectorModel, Vec<f64>)> {
    train_detector(images, refined, cfg, seed)
}

/// Decoded grid prediction, without post-processing: the form used as
/// training labels. Smoothing and border extension invent lane cells where
/// the image shows no paint, and a detector trained on them learns those as
/// false positives.
pub fn label_from(model: &CorrectorModel, image: &Raster, conf_thresh: f64) -> Result<Vec<Lane2D>> {
    Ok(decode_grid(&model.forward(&image_input(image, &model.cfg))?.pred, conf_thresh))
}

/// Final lane prediction: the decoded grid, smoothed and extended to the
/// image border.
pub fn detect(model: &CorrectorModel, image: &Raster, conf_thresh: f64) -> Result<Vec<Lane2D>> {
    Ok(finish_lanes(&label_from(model, image, conf_thresh)?, &model.cfg.grid))
}

pub fn detect_all(model: &CorrectorModel, images: &[Raster], conf_thresh: f64) -> Result<Vec<Vec<Lane2D>>> {
    images.par_iter().map(|im| detect(model, im, conf_thresh)).collect()
}

/// Naive predictions and their corrections for a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub noisy: Vec<Vec<Lane2D>>,
    pub refined: Vec<Vec<Lane2D>>,
}

/// Labels every image with the frozen naive detector, then corrects each
/// decoded prediction with the frozen online correction network.
pub fn refine_labels(
    naive: &CorrectorModel,
    det_cfg: &DetectorConfig,
    slc: &TrainState,
    slc_cfg: &SlcConfig,
    images: &[Raster],
) -> Result<Refinement> {
    let noisy = images.par_iter().map(|im| label_from(naive, im, det_cfg.conf_thresh)).collect::<Result<Vec<_>>>()?;
    let refined = images
        .par_iter()
        .zip(noisy.par_iter())
        .map(|(im, n)| correct_labels(slc, im, n, slc_cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Refinement { noisy, refined })
}

/// Scores per-frame lane lists at the given anchor rows.
pub fn evaluate_lanes(
    preds: &[Vec<Lane2D>],
    gts: &[Vec<Lane2D>],
    h_samples: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let rows = |ls: &[Vec<Lane2D>]| -> Vec<RowAnchorLabel> { ls.iter().map(|l| to_row_anchors(l, h_samples)).collect() };
    tusimple_eval(&rows(preds), &rows(gts), cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub extract: ExtractConfig,
    pub detector: DetectorConfig,
    pub slc: SlcConfig,
    pub eval: EvalConfig,
    pub h_samples: Vec<u32>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            extract: ExtractConfig::default(),
            detector: DetectorConfig::default(),
            slc: SlcConfig::default(),
            eval: EvalConfig::default(),
            h_samples: RowAnchorLabel::rows(160, 710, 10),
        }
    }
}

/// A source-domain frame: sensor data for pseudo labelling plus the image.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFrame {
    pub cloud: PointCloud,
    pub camera: CameraModel,
    pub image: Raster,
}

/// A target-domain frame with ground truth, used only for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub image: Raster,
    pub gt: Vec<Lane2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationReport {
    /// Source-trained naive detector applied to the target test frames.
    pub naive_transfer: EvalResult,
    /// Naive predictions corrected by the source-trained correction network.
    pub refined: EvalResult,
    /// Student trained on refined target labels.
    pub student: EvalResult,
    pub source_frames: usize,
    pub target_train_frames: usize,
    pub target_test_frames: usize,
}

pub struct Adaptation {
    pub naive: CorrectorModel,
    pub slc: TrainState,
    pub student: CorrectorModel,
    pub report: AdaptationReport,
}

/// Source pseudo labels from LiDAR, then naive detector and correction
/// network on the source; refinement of the unlabeled target training
/// images; a student trained from scratch on them; scores on the target
/// test frames. The correction network is applied to the target as is.
pub fn run_adaptation(
    source: &[SourceFrame],
    target_train: &[Raster],
    target_test: &[EvalFrame],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Adaptation> {
    if source.is_empty() || target_train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pseudo = source
        .par_iter()
        .map(|f| Ok(extract_from_cloud(&f.cloud, &f.camera, &cfg.extract)?.lanes_2d))
        .collect::<Result<Vec<_>>>()?;
    let src_images: Vec<Raster> = source.iter().map(|f| f.image.clone()).collect();
    let (naive, _) = train_naive_detector(&src_images, &pseudo, &cfg.detector, stream_id(seed, 1))?;
    let samples: Vec<SlcSample> =
        src_images.iter().zip(&pseudo).map(|(im, p)| SlcSample { image: im.clone(), pseudo: p.clone() }).collect();
    let (slc, _) = train_slc(&samples, &cfg.slc, stream_id(seed, 2))?;
    let refinement = refine_labels(&naive, &cfg.detector, &slc, &cfg.slc, target_train)?;
    let (student, _) = train_student(target_train, &refinement.refined, &cfg.detector, stream_id(seed, 3))?;

    let test_images: Vec<Raster> = target_test.iter().map(|f| f.image.clone()).collect();
    let gts: Vec<Vec<Lane2D>> = target_test.iter().map(|f| f.gt.clone()).collect();
    let test_ref = refine_labels(&naive, &cfg.detector, &slc, &cfg.slc, &test_images)?;
    let naive_pred = detect_all(&naive, &test_images, cfg.detector.conf_thresh)?;
    let student_pred = detect_all(&student, &test_images, cfg.detector.conf_thresh)?;
    let score = |p: &[Vec<Lane2D>]| evaluate_lanes(p, &gts, &cfg.h_samples, &cfg.eval);
    let report = AdaptationReport {
        naive_transfer: score(&naive_pred)?,
        refined: score(&test_ref.refined)?,
        student: score(&student_pred)?,
        source_frames: source.len(),
        target_train_frames: target_train.len(),
        target_test_frames: target_test.len(),
    };
    Ok(Adaptation { naive, slc, student, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = DetectorConfig { epochs: 0, ..Default::default() };
        let images = vec![Raster::zeros(64, 36)];
        let (m, h) = train_detector(&images, &[vec![]], &cfg, 4).unwrap();
        let mut rng = SeededRng::with_stream(4, stream_id(u64::MAX, 1));
        assert_eq!(m, CorrectorModel::init(cfg.model, &mut rng).unwrap());
        assert!(h.is_empty());
        assert!(matches!(train_detector(&[], &[], &cfg, 0), Err(Error::EmptyDataset)));
    }
}
