//! `lanekit` command-line front end.
//!
//! Exit status: 0 on success, 2 when the configuration cannot be read or is
//! invalid, 1 for any other failure. Failures print one JSON line
//! `{"error": <kind>, "message": <text>}` on standard error; progress logs
//! also go to standard error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lanekit::config::{camera_to_text, parse_camera, Settings};
use lanekit::distill::{detect_all, refine_labels, train_naive_detector, train_student};
use lanekit::extract::extract_from_cloud;
use lanekit::formats;
use lanekit::labelkit::{to_row_anchors, Lane2D, RowAnchorLabel};
use lanekit::metrics::tusimple_eval;
use lanekit::raster::{draw_lanes, Raster};
use lanekit::rng::stream_id;
use lanekit::slc::{continue_slc, train_slc, SlcSample};
use lanekit::synthworld::{ground_truth_labels, sample_frames};
use lanekit::Error;

/// Overlay colours used by `render`.
const GT_RGB: [u8; 3] = [0, 255, 0];
const NOISY_RGB: [u8; 3] = [255, 0, 0];
const REFINED_RGB: [u8; 3] = [0, 0, 255];

#[derive(Parser)]
#[command(name = "lanekit", version, about = "LiDAR pseudo labels, lane correction and distillation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic frames: clouds, images, ground-truth labels.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract pseudo labels from one cloud file or every cloud in a directory.
    Extract {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Full configuration for the extraction and label rows; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the lane-correction network on images and pseudo labels.
    TrainSlc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pseudo labels; defaults to `<data>/pseudo.json`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Continue from a saved state for another `slc.epochs` epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Naive detector, label refinement and student training.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pseudo labels; defaults to `<data>/pseudo.json`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Use this correction state instead of training one.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Ground truth for the report; `<data>/gt.json` is used when present.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predicted labels against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Overlay labels on a frame: ground truth green, noisy red, refined blue.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        noisy: Option<PathBuf>,
        #[arg(long)]
        refined: Option<PathBuf>,
        /// `raw_file` entry to draw; defaults to the image file name.
        #[arg(long)]
        frame: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_settings(path: &Path) -> std::result::Result<Settings, Failure> {
    Settings::load(path).map_err(Failure::Config)
}

fn read_labels(path: &Path) -> lanekit::Result<Vec<(String, RowAnchorLabel)>> {
    formats::read_labels(&std::fs::read_to_string(path)?)
}

fn write_labels(path: &Path, labels: &[(String, RowAnchorLabel)]) -> lanekit::Result<()> {
    formats::write_file(path, formats::write_labels(labels)?.as_bytes())
}

fn load_image(dir: &Path, name: &str, s: &Settings) -> lanekit::Result<Raster> {
    let img = formats::read_ppm(&std::fs::read(dir.join(name))?)?;
    Ok(img.downsample_gray(s.model.in_w, s.model.in_h))
}

/// Images and lanes of every labelled frame under `data`.
fn load_dataset(data: &Path, labels: &Path, s: &Settings) -> lanekit::Result<(Vec<String>, Vec<Raster>, Vec<Vec<Lane2D>>)> {
    let entries = read_labels(labels)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut names = Vec::new();
    let mut images = Vec::new();
    let mut lanes = Vec::new();
    for (name, label) in entries {
        images.push(load_image(data, &name, s)?);
        lanes.push(label.to_lanes());
        names.push(name);
    }
    Ok((names, images, lanes))
}

fn anchored(names: &[String], lanes: &[Vec<Lane2D>], h: &[u32]) -> Vec<(String, RowAnchorLabel)> {
    names.iter().zip(lanes).map(|(n, l)| (n.clone(), to_row_anchors(l, h))).collect()
}

fn synth(config: &Path, out: &Path, seed: u64) -> CmdResult {
    let s = load_settings(config)?;
    let frames = sample_frames(&s.scene, seed, 0, s.frames as u64, &s.camera)?;
    std::fs::create_dir_all(out)?;
    let h = s.h_samples();
    let mut gt = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let stem = format!("frame_{i:04}");
        formats::write_file(&out.join(format!("{stem}.bin")), &formats::write_cloud_bin(&f.cloud))?;
        formats::write_file(&out.join(format!("{stem}.ppm")), &formats::write_ppm(&f.image))?;
        gt.push((format!("{stem}.ppm"), ground_truth_labels(f, &h)));
    }
    write_labels(&out.join("gt.json"), &gt)?;
    formats::write_file(&out.join("camera.cfg"), camera_to_text(&s.camera).as_bytes())?;
    eprintln!("synth: {} frames in {}", frames.len(), out.display());
    Ok(())
}

fn cloud_files(path: &Path) -> lanekit::Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("bin" | "csv")))
        .collect();
    files.sort();
    Ok(files)
}

fn extract(cloud: &Path, camera: &Path, out: &Path, config: Option<&Path>, seed: u64) -> CmdResult {
    let mut s = match config {
        Some(p) => load_settings(p)?,
        None => Settings::default(),
    };
    let cam_text = std::fs::read_to_string(camera).map_err(|e| Failure::Config(e.into()))?;
    s.camera = parse_camera(&cam_text).map_err(Failure::Config)?;
    s.extract.ransac.seed = seed;
    let h = s.h_samples();
    let mut labels = Vec::new();
    for file in cloud_files(cloud)? {
        let pc = formats::read_cloud(&std::fs::read(&file)?)?;
        let report = extract_from_cloud(&pc, &s.camera, &s.extract)?;
        eprintln!("extract: {} -> {} lanes", file.display(), report.lanes_2d.len());
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        labels.push((format!("{stem}.ppm"), to_row_anchors(&report.lanes_2d, &h)));
    }
    write_labels(out, &labels)?;
    Ok(())
}

fn train(data: &Path, config: &Path, out: &Path, labels: Option<&Path>, resume: Option<&Path>, seed: u64) -> CmdResult {
    let s = load_settings(config)?;
    let cfg = s.slc_config();
    let labels = labels.map_or_else(|| data.join("pseudo.json"), Path::to_path_buf);
    let (_, images, lanes) = load_dataset(data, &labels, &s)?;
    let samples: Vec<SlcSample> =
        images.into_iter().zip(lanes).map(|(image, pseudo)| SlcSample { image, pseudo }).collect();
    let (state, stats) = match resume {
        Some(p) => {
            let mut state = formats::read_state(&std::fs::read(p)?)?;
            let stats = continue_slc(&mut state, &samples, &cfg, seed, cfg.epochs)?;
            (state, stats)
        }
        None => train_slc(&samples, &cfg, seed)?,
    };
    for st in &stats {
        eprintln!(
            "epoch {} total {:.4} consistency {:.4} reconstruction {:.4} lambda_r {} embedding {:.4}",
            st.epoch, st.total, st.consistency, st.reconstruction, st.lambda_r, st.embedding
        );
    }
    formats::write_file(out, &formats::write_state(&state))?;
    Ok(())
}

fn distill(
    data: &Path,
    config: &Path,
    out: &Path,
    labels: Option<&Path>,
    state: Option<&Path>,
    gt: Option<&Path>,
    seed: u64,
) -> CmdResult {
    let s = load_settings(config)?;
    let (det, slc_cfg, h) = (s.detector_config(), s.slc_config(), s.h_samples());
    let labels = labels.map_or_else(|| data.join("pseudo.json"), Path::to_path_buf);
    let (names, images, pseudo) = load_dataset(data, &labels, &s)?;
    eprintln!("distill: naive detector on {} frames", images.len());
    let (naive, _) = train_naive_detector(&images, &pseudo, &det, stream_id(seed, 1))?;
    let slc = match state {
        Some(p) => formats::read_state(&std::fs::read(p)?)?,
        None => {
            eprintln!("distill: correction network");
            let samples: Vec<SlcSample> =
                images.iter().zip(&pseudo).map(|(im, p)| SlcSample { image: im.clone(), pseudo: p.clone() }).collect();
            train_slc(&samples, &slc_cfg, stream_id(seed, 2))?.0
        }
    };
    let refinement = refine_labels(&naive, &det, &slc, &slc_cfg, &images)?;
    eprintln!("distill: student");
    let (student, _) = train_student(&images, &refinement.refined, &det, stream_id(seed, 3))?;
    let student_pred = detect_all(&student, &images, det.conf_thresh)?;

    std::fs::create_dir_all(out)?;
    formats::write_file(&out.join("naive.net"), &formats::write_model(&naive))?;
    formats::write_file(&out.join("student.net"), &formats::write_model(&student))?;
    formats::write_file(&out.join("slc.ckpt"), &formats::write_state(&slc))?;
    write_labels(&out.join("noisy.json"), &anchored(&names, &refinement.noisy, &h))?;
    write_labels(&out.join("refined.json"), &anchored(&names, &refinement.refined, &h))?;
    write_labels(&out.join("student.json"), &anchored(&names, &student_pred, &h))?;

    let gt = gt.map(Path::to_path_buf).or_else(|| Some(data.join("gt.json")).filter(|p| p.exists()));
    if let Some(gt) = gt {
        let gts = read_labels(&gt)?;
        let mut report = serde_json::Map::new();
        for (key, lanes) in
            [("pseudo", &pseudo), ("noisy", &refinement.noisy), ("refined", &refinement.refined), ("student", &student_pred)]
        {
            let r = score(&anchored(&names, lanes, &h), &gts, &s)?;
            eprintln!("distill: {key} F1 {:.4}", r.f1);
            report.insert(key.into(), metrics_json(&r));
        }
        formats::write_file(&out.join("report.json"), to_json_bytes(&serde_json::Value::Object(report))?.as_slice())?;
    }
    Ok(())
}

/// Scores predictions against ground truth, pairing frames by `raw_file`.
fn score(
    preds: &[(String, RowAnchorLabel)],
    gts: &[(String, RowAnchorLabel)],
    s: &Settings,
) -> lanekit::Result<lanekit::metrics::EvalResult> {
    let mut p = Vec::with_capacity(gts.len());
    for (name, _) in gts {
        let found = preds.iter().find(|(n, _)| n == name);
        let (_, label) = found.ok_or_else(|| Error::AnchorMismatch(format!("no prediction for {name}")))?;
        p.push(label.clone());
    }
    let g: Vec<RowAnchorLabel> = gts.iter().map(|(_, l)| l.clone()).collect();
    tusimple_eval(&p, &g, &s.eval)
}

fn metrics_json(r: &lanekit::metrics::EvalResult) -> serde_json::Value {
    serde_json::json!({
        "f1": r.f1,
        "accuracy": r.accuracy,
        "fpr": r.fpr,
        "fnr": r.fnr,
        "precision": r.precision,
        "recall": r.recall,
        "tp": r.tp,
        "fp": r.fp,
        "fn": r.fn_,
    })
}

fn to_json_bytes(v: &serde_json::Value) -> lanekit::Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn eval(pred: &Path, gt: &Path, out: &Path) -> CmdResult {
    let r = score(&read_labels(pred)?, &read_labels(gt)?, &Settings::default())?;
    eprintln!("eval: F1 {:.4} accuracy {:.4}", r.f1, r.accuracy);
    formats::write_file(out, &to_json_bytes(&metrics_json(&r))?)?;
    Ok(())
}

fn render(image: &Path, out: &Path, layers: [(Option<&Path>, [u8; 3]); 3], frame: Option<&str>) -> CmdResult {
    let mut img = formats::read_ppm(&std::fs::read(image)?)?;
    let default_name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let name = frame.map_or(default_name, str::to_string);
    for (path, rgb) in layers {
        let Some(path) = path else { continue };
        let labels = read_labels(path)?;
        let (_, label) = labels
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::AnchorMismatch(format!("{} has no entry for {name}", path.display())))?;
        draw_lanes(&mut img, &label.to_lanes(), rgb, 2.0);
    }
    formats::write_file(out, &formats::write_ppm(&img))?;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.cmd {
        Command::Synth { config, out, seed } => synth(&config, &out, seed),
        Command::Extract { cloud, camera, out, config, seed } => extract(&cloud, &camera, &out, config.as_deref(), seed),
        Command::TrainSlc { data, config, out, labels, resume, seed } => {
            train(&data, &config, &out, labels.as_deref(), resume.as_deref(), seed)
        }
        Command::Distill { data, config, out, labels, state, gt, seed } => {
            distill(&data, &config, &out, labels.as_deref(), state.as_deref(), gt.as_deref(), seed)
        }
        // Scoring and drawing use no randomness; the seed is accepted for a uniform interface.
        Command::Eval { pred, gt, out, seed: _ } => eval(&pred, &gt, &out),
        Command::Render { image, out, gt, noisy, refined, frame, seed: _ } => render(
            &image,
            &out,
            [(gt.as_deref(), GT_RGB), (noisy.as_deref(), NOISY_RGB), (refined.as_deref(), REFINED_RGB)],
            frame.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, e) = match f {
                Failure::Config(e) => (2, e),
                Failure::Run(e) => (1, e),
            };
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
