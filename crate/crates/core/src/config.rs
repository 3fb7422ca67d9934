//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Every key listed by
//! [`Settings::keys`] must appear exactly once and no other key is accepted.
//! Lists are comma separated. A camera file uses the same syntax restricted
//! to the `cam.*` keys.

use crate::distill::{DetectorConfig, DistillConfig};
use crate::error::{Error, Result};
use crate::extract::ExtractConfig;
use crate::geometry::{CameraModel, RigidTransform};
use crate::labelkit::{AugmentConfig, RowAnchorLabel};
use crate::lanenet::{ModelConfig, OptimizerKind};
use crate::metrics::EvalConfig;
use crate::slc::{ReconstructionMode, SlcConfig};
use crate::synthworld::SceneSampler;

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub camera: CameraModel,
    pub scene: SceneSampler,
    pub frames: usize,
    pub extract: ExtractConfig,
    /// First row, last row and step of the label anchor rows.
    pub rows: (u32, u32, u32),
    pub augment: AugmentConfig,
    /// Grid and network shape; the image size always follows the camera.
    pub model: ModelConfig,
    pub detector: DetectorConfig,
    pub slc: SlcConfig,
    pub eval: EvalConfig,
}

impl Default for Settings {
    /// The easy scene: three straight solid markings at fixed positions.
    fn default() -> Self {
        let scene = SceneSampler { lateral_positions: vec![-1.75, 1.75, 5.25], lateral_jitter: 0.0, ..Default::default() };
        Self {
            camera: CameraModel::default(),
            scene,
            frames: 8,
            extract: ExtractConfig::default(),
            rows: (160, 710, 10),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            detector: DetectorConfig::default(),
            slc: SlcConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

trait Value: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> Option<Self>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}

plain_value!(f64, u32, u64, usize, i64);

impl Value for Option<f64> {
    fn show(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
    fn read(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
}

impl Value for Vec<f64> {
    fn show(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    }
    fn read(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|v| v.trim().parse().ok()).collect()
    }
}

impl Value for OptimizerKind {
    fn show(&self) -> String {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
        .into()
    }
    fn read(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Value for ReconstructionMode {
    fn show(&self) -> String {
        match self {
            ReconstructionMode::Gated => "gated",
            ReconstructionMode::Always => "always",
            ReconstructionMode::Never => "never",
        }
        .into()
    }
    fn read(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Value for RigidTransform {
    fn show(&self) -> String {
        self.to_row_major().to_vec().show()
    }
    fn read(s: &str) -> Option<Self> {
        RigidTransform::from_row_major(&Vec::<f64>::read(s)?).ok()
    }
}

struct Field {
    key: &'static str,
    get: fn(&Settings) -> String,
    set: fn(&mut Settings, &str) -> Option<()>,
}

macro_rules! fields {
    ($($key:literal => [$($path:tt)+]),* $(,)?) => {
        &[$(Field {
            key: $key,
            get: |s| Value::show(&s.$($path)+),
            set: |s, v| {
                s.$($path)+ = Value::read(v)?;
                Some(())
            },
        }),*]
    };
}

const FIELDS: &[Field] = fields! {
    "cam.fx" => [camera.fx],
    "cam.fy" => [camera.fy],
    "cam.cx" => [camera.cx],
    "cam.cy" => [camera.cy],
    "cam.width" => [camera.width],
    "cam.height" => [camera.height],
    "cam.extrinsic" => [camera.extrinsic],
    "scene.lanes" => [scene.lateral_positions],
    "scene.lateral_jitter" => [scene.lateral_jitter],
    "scene.max_heading" => [scene.max_heading],
    "scene.max_curvature" => [scene.max_curvature],
    "scene.dashed_prob" => [scene.dashed_prob],
    "scene.dash_on" => [scene.dash_on],
    "scene.dash_off" => [scene.dash_off],
    "scene.s_min" => [scene.base.along_extent.0],
    "scene.s_max" => [scene.base.along_extent.1],
    "scene.ground_z" => [scene.base.ground_z],
    "scene.paint_mu" => [scene.base.paint_mu],
    "scene.asphalt_mu" => [scene.base.asphalt_mu],
    "scene.intensity_sigma" => [scene.base.intensity_sigma],
    "scene.point_density" => [scene.base.point_density],
    "scene.road_half_width" => [scene.base.road_half_width],
    "scene.paint_half_width" => [scene.base.paint_half_width],
    "scene.ground_noise" => [scene.base.ground_noise],
    "scene.obstacles" => [scene.base.obstacles],
    "scene.image_noise" => [scene.base.image_noise],
    "synth.frames" => [frames],
    "ground.cell_size" => [extract.ground.cell_size],
    "ground.plane_inlier_dist" => [extract.ground.plane_inlier_dist],
    "ground.normal_max_tilt" => [extract.ground.normal_max_tilt],
    "ground.height_step" => [extract.ground.height_step],
    "ground.neighbour_cells" => [extract.ground.neighbour_cells],
    "ground.tau" => [extract.ground.tau],
    "ground.tau_percentile" => [extract.ground.tau_percentile],
    "cluster.eps1" => [extract.cluster.eps1],
    "cluster.min_pts" => [extract.cluster.min_pts],
    "cluster.eps2" => [extract.cluster.eps2],
    "cluster.eps3" => [extract.cluster.eps3],
    "cluster.min_cluster_size" => [extract.cluster.min_cluster_size],
    "ransac.iters" => [extract.ransac.iters],
    "ransac.inlier_dist" => [extract.ransac.inlier_dist],
    "ransac.sample_step" => [extract.ransac.sample_step],
    "label.h_start" => [rows.0],
    "label.h_end" => [rows.1],
    "label.h_step" => [rows.2],
    "augment.max_rot_deg" => [augment.max_rot_deg],
    "augment.max_trans_frac" => [augment.max_trans_frac],
    "augment.p_drop" => [augment.p_drop],
    "augment.p_inject" => [augment.p_inject],
    "grid.w" => [model.grid.w],
    "grid.h" => [model.grid.h],
    "grid.n" => [model.grid.n],
    "model.in_w" => [model.in_w],
    "model.in_h" => [model.in_h],
    "model.ctx_x" => [model.ctx_x],
    "model.ctx_y" => [model.ctx_y],
    "model.hidden" => [model.hidden],
    "model.feat" => [model.feat],
    "detector.optimizer" => [detector.optimizer],
    "detector.lr" => [detector.lr],
    "detector.epochs" => [detector.epochs],
    "detector.batch" => [detector.batch_size],
    "detector.conf" => [detector.conf_thresh],
    "slc.lambda_embed" => [slc.lambda_embed],
    "slc.epsilon" => [slc.gate.epsilon_epochs],
    "slc.iou_thresh" => [slc.gate.iou_thresh],
    "slc.gate_width" => [slc.gate.width],
    "slc.gate_height" => [slc.gate.height],
    "slc.gate_thickness" => [slc.gate.thickness],
    "slc.reconstruction" => [slc.reconstruction],
    "slc.momentum" => [slc.ema_momentum],
    "slc.optimizer" => [slc.optimizer],
    "slc.lr" => [slc.lr],
    "slc.epochs" => [slc.epochs],
    "slc.batch" => [slc.batch_size],
    "slc.embed_dim" => [slc.embed_dim],
    "slc.feature_thickness" => [slc.feature_thickness],
    "slc.neg_offset" => [slc.neg_offset],
    "slc.clue_thickness" => [slc.clue_thickness],
    "slc.conf" => [slc.conf_thresh],
    "eval.pt_thresh" => [eval.pt_thresh],
    "eval.lane_acc_thresh" => [eval.lane_acc_thresh],
};

fn is_camera_key(key: &str) -> bool {
    key.starts_with("cam.")
}

/// Splits `text` into `(line number, key, value)` triples.
fn parse_pairs(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

fn apply(settings: &mut Settings, text: &str, wanted: impl Fn(&str) -> bool) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (line, key, value) in parse_pairs(text)? {
        let field = FIELDS
            .iter()
            .find(|f| f.key == key && wanted(f.key))
            .ok_or_else(|| Error::Config(format!("line {line}: unknown key `{key}`")))?;
        if !seen.insert(key) {
            return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
        }
        (field.set)(settings, value)
            .ok_or_else(|| Error::Config(format!("line {line}: bad value `{value}` for `{key}`")))?;
    }
    if let Some(f) = FIELDS.iter().find(|f| wanted(f.key) && !seen.contains(f.key)) {
        return Err(Error::Config(format!("missing key `{}`", f.key)));
    }
    Ok(())
}

fn emit(settings: &Settings, wanted: impl Fn(&str) -> bool) -> String {
    let mut out = String::new();
    let mut section = "";
    for f in FIELDS.iter().filter(|f| wanted(f.key)) {
        let sec = f.key.split('.').next().unwrap_or("");
        if sec != section && !section.is_empty() {
            out.push('\n');
        }
        section = sec;
        out.push_str(&format!("{} = {}\n", f.key, (f.get)(settings)));
    }
    out
}

impl Settings {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        FIELDS.iter().map(|f| f.key)
    }

    /// Parses a full configuration and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        apply(&mut s, text, |_| true)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        emit(self, |_| true)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.scene.base.validate()?;
        self.extract.validate()?;
        self.augment.validate()?;
        self.model_config().validate()?;
        self.detector_config().validate()?;
        self.slc_config().validate()?;
        let (a, b, step) = self.rows;
        if step == 0 || a > b || b >= self.camera.height {
            return Err(Error::Config("label rows must satisfy h_start <= h_end < cam.height, h_step > 0".into()));
        }
        if !(self.scene.dash_on > 0.0 && self.scene.dash_off > 0.0) {
            return Err(Error::Config("dash lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn h_samples(&self) -> Vec<u32> {
        RowAnchorLabel::rows(self.rows.0, self.rows.1, self.rows.2)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model;
        m.grid.img_w = self.camera.width as usize;
        m.grid.img_h = self.camera.height as usize;
        m
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig { model: self.model_config(), ..self.detector }
    }

    pub fn slc_config(&self) -> SlcConfig {
        SlcConfig { model: self.model_config(), augment: self.augment, ..self.slc }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            extract: self.extract,
            detector: self.detector_config(),
            slc: self.slc_config(),
            eval: self.eval,
            h_samples: self.h_samples(),
        }
    }
}

/// Reads a camera file (`cam.*` keys only).
pub fn parse_camera(text: &str) -> Result<CameraModel> {
    let mut s = Settings::default();
    apply(&mut s, text, is_camera_key)?;
    s.camera.validate()?;
    Ok(s.camera)
}

pub fn camera_to_text(cam: &CameraModel) -> String {
    emit(&Settings { camera: *cam, ..Settings::default() }, is_camera_key)
}
