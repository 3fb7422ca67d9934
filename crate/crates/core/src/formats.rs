//! On-disk formats.
//!
//! * Point clouds, binary: the 8 bytes `LKPC0001`, then one record per point
//!   of four little-endian `f32` values `x, y, z, intensity`.
//! * Point clouds, text: one `x,y,z,intensity` line per point. Blank lines,
//!   `#` comments and a non-numeric header line are skipped on input.
//! * Lane labels: one JSON object per line with the keys `h_samples`,
//!   `lanes` and `raw_file` in that order; lane positions are integer pixels
//!   with `-2` for rows a lane does not reach.
//! * Images: binary PPM (`P6`, maxval 255).
//! * Networks: `LKNET001`, a `u32` header length `m`, `m` `u32` header
//!   values (`grid_w, grid_h, n, img_w, img_h, in_w, in_h, ctx_x, ctx_y,
//!   hidden, feat`), a `u32` parameter count and the parameters as `f32`.
//!   All integers and floats little-endian.
//! * Correction state: `LKSL0001`, `u32` completed epochs, `u32` embedding
//!   size, then the online network, online head, target network and target
//!   head. A head is `u32 c, u32 d, u32 count` followed by `f32` values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{CloudPoint, PointCloud};
use crate::labelkit::{RowAnchorLabel, MISSING};
use crate::lanenet::{CorrectorModel, GridConfig, ModelConfig};
use crate::raster::RgbImage;
use crate::slc::{ProjectionHead, TrainState};

pub const CLOUD_MAGIC: &[u8; 8] = b"LKPC0001";
pub const MODEL_MAGIC: &[u8; 8] = b"LKNET001";
pub const STATE_MAGIC: &[u8; 8] = b"LKSL0001";

pub fn write_cloud_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 * cloud.len());
    out.extend_from_slice(CLOUD_MAGIC);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_cloud_bin(bytes: &[u8]) -> Result<PointCloud> {
    let body = bytes
        .strip_prefix(CLOUD_MAGIC.as_slice())
        .ok_or_else(|| Error::Format("missing LKPC0001 header".into()))?;
    if body.len() % 16 != 0 {
        return Err(Error::Format(format!("cloud body of {} bytes is not a whole number of records", body.len())));
    }
    let points = body
        .chunks_exact(16)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            CloudPoint::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    let cloud = PointCloud { points };
    cloud.validate()?;
    Ok(cloud)
}

pub fn write_cloud_csv(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for p in &cloud.points {
        s.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.z, p.intensity));
    }
    s
}

pub fn read_cloud_csv(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match vals {
            Ok(v) if v.len() == 4 => points.push(CloudPoint::new(v[0], v[1], v[2], v[3])),
            Err(_) if points.is_empty() && n == 0 => continue,
            _ => return Err(Error::Format(format!("line {}: expected x,y,z,intensity", n + 1))),
        }
    }
    let cloud = PointCloud { points };
    cloud.validate()?;
    Ok(cloud)
}

/// Reads either cloud format, telling them apart by the binary header.
pub fn read_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.starts_with(CLOUD_MAGIC) {
        read_cloud_bin(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("cloud is neither binary nor UTF-8 text".into()))?;
        read_cloud_csv(text)
    }
}

#[derive(Serialize)]
struct LabelOut<'a> {
    h_samples: &'a [u32],
    lanes: Vec<Vec<i64>>,
    raw_file: &'a str,
}

#[derive(Deserialize)]
struct LabelIn {
    h_samples: Vec<f64>,
    lanes: Vec<Vec<f64>>,
    raw_file: String,
}

/// One labels line (no trailing newline). Positions are rounded to whole
/// pixels; anything negative is written as the `-2` sentinel.
pub fn label_to_json_line(label: &RowAnchorLabel, raw_file: &str) -> Result<String> {
    let lanes = label
        .xs
        .iter()
        .map(|l| l.iter().map(|&u| if u < 0.0 { MISSING as i64 } else { u.round() as i64 }).collect())
        .collect();
    Ok(serde_json::to_string(&LabelOut { h_samples: &label.h_samples, lanes, raw_file })?)
}

pub fn label_from_json_line(line: &str) -> Result<(String, RowAnchorLabel)> {
    let rec: LabelIn = serde_json::from_str(line)?;
    if rec.h_samples.iter().any(|h| *h < 0.0 || h.fract() != 0.0) {
        return Err(Error::Format("h_samples must be non-negative integers".into()));
    }
    let h_samples: Vec<u32> = rec.h_samples.iter().map(|h| *h as u32).collect();
    if let Some(l) = rec.lanes.iter().find(|l| l.len() != h_samples.len()) {
        return Err(Error::AnchorMismatch(format!(
            "{}: lane has {} values for {} rows",
            rec.raw_file,
            l.len(),
            h_samples.len()
        )));
    }
    let xs = rec.lanes.into_iter().map(|l| l.into_iter().map(|u| if u < 0.0 { MISSING } else { u }).collect()).collect();
    Ok((rec.raw_file, RowAnchorLabel { h_samples, xs }))
}

pub fn write_labels(labels: &[(String, RowAnchorLabel)]) -> Result<String> {
    let mut s = String::new();
    for (name, l) in labels {
        s.push_str(&label_to_json_line(l, name)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_labels(text: &str) -> Result<Vec<(String, RowAnchorLabel)>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(label_from_json_line).collect()
}

pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let s = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if s == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[s..i]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let data = bytes.get(i + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h * 3 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * 3, data.len())));
    }
    Ok(RgbImage { width: w, height: h, data: data.to_vec() })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 8]) -> Result<()> {
        if self.take(8)? != m {
            return Err(Error::Format(format!("expected {} header", String::from_utf8_lossy(m))));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("bad length".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

fn model_header(c: &ModelConfig) -> [usize; 11] {
    let g = &c.grid;
    [g.w, g.h, g.n, g.img_w, g.img_h, c.in_w, c.in_h, c.ctx_x, c.ctx_y, c.hidden, c.feat]
}

fn put_model(out: &mut Vec<u8>, m: &CorrectorModel) {
    out.extend_from_slice(MODEL_MAGIC);
    let h = model_header(&m.cfg);
    put_u32(out, h.len());
    for v in h {
        put_u32(out, v);
    }
    put_u32(out, m.params.len());
    put_f32s(out, &m.params);
}

fn get_model(r: &mut Reader) -> Result<CorrectorModel> {
    r.magic(MODEL_MAGIC)?;
    let len = r.u32()?;
    if len != 11 {
        return Err(Error::Format(format!("model header has {len} fields, expected 11")));
    }
    let mut h = [0usize; 11];
    for v in &mut h {
        *v = r.u32()?;
    }
    let cfg = ModelConfig {
        grid: GridConfig { w: h[0], h: h[1], n: h[2], img_w: h[3], img_h: h[4] },
        in_w: h[5],
        in_h: h[6],
        ctx_x: h[7],
        ctx_y: h[8],
        hidden: h[9],
        feat: h[10],
    };
    cfg.validate()?;
    let count = r.u32()?;
    if count != cfg.param_count() {
        return Err(Error::DimensionMismatch { expected: cfg.param_count(), actual: count });
    }
    CorrectorModel::from_params(cfg, r.f32s(count)?)
}

fn put_head(out: &mut Vec<u8>, h: &ProjectionHead) {
    put_u32(out, h.c);
    put_u32(out, h.d);
    put_u32(out, h.params.len());
    put_f32s(out, &h.params);
}

fn get_head(r: &mut Reader) -> Result<ProjectionHead> {
    let (c, d, count) = (r.u32()?, r.u32()?, r.u32()?);
    if count != ProjectionHead::param_count(c, d) {
        return Err(Error::DimensionMismatch { expected: ProjectionHead::param_count(c, d), actual: count });
    }
    ProjectionHead::from_params(c, d, r.f32s(count)?)
}

fn finish<T>(r: &Reader, v: T) -> Result<T> {
    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", r.bytes.len() - r.pos)));
    }
    Ok(v)
}

pub fn write_model(m: &CorrectorModel) -> Vec<u8> {
    let mut out = Vec::new();
    put_model(&mut out, m);
    out
}

pub fn read_model(bytes: &[u8]) -> Result<CorrectorModel> {
    let mut r = Reader::new(bytes);
    let m = get_model(&mut r)?;
    finish(&r, m)
}

pub fn write_state(s: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    put_u32(&mut out, s.epoch as usize);
    put_u32(&mut out, s.online_head.d);
    put_model(&mut out, &s.online);
    put_head(&mut out, &s.online_head);
    put_model(&mut out, &s.target);
    put_head(&mut out, &s.target_head);
    out
}

pub fn read_state(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    r.magic(STATE_MAGIC)?;
    let epoch = r.u32()? as u32;
    let d = r.u32()?;
    let online = get_model(&mut r)?;
    let online_head = get_head(&mut r)?;
    let target = get_model(&mut r)?;
    let target_head = get_head(&mut r)?;
    if online.cfg != target.cfg || online_head.d != d || target_head.d != d || online_head.c != online.cfg.feat {
        return Err(Error::Format("online and target branches disagree".into()));
    }
    finish(&r, TrainState { online, online_head, target, target_head, epoch })
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::slc::SlcConfig;

    #[test]
    fn cloud_formats() {
        let cloud = PointCloud { points: vec![CloudPoint::new(1.5, -2.25, -1.5, 0.75)] };
        let bin = write_cloud_bin(&cloud);
        assert_eq!(bin.len(), 8 + 16);
        assert_eq!(&bin[8..12], &1.5f32.to_le_bytes());
        assert_eq!(read_cloud(&bin).unwrap(), cloud);
        let csv = write_cloud_csv(&cloud);
        assert_eq!(csv, "1.5,-2.25,-1.5,0.75\n");
        assert_eq!(read_cloud(format!("x,y,z,intensity\n{csv}").as_bytes()).unwrap(), cloud);
        assert!(read_cloud_bin(&bin[..20]).is_err());
        assert!(read_cloud(b"1,2,3\n").is_err());
    }

    #[test]
    fn label_line_layout() {
        let l = RowAnchorLabel { h_samples: vec![160, 170], xs: vec![vec![-2.0, 100.4]] };
        let line = label_to_json_line(&l, "frame_0000.ppm").unwrap();
        assert_eq!(line, r#"{"h_samples":[160,170],"lanes":[[-2,100]],"raw_file":"frame_0000.ppm"}"#);
        let (name, back) = label_from_json_line(&line).unwrap();
        assert_eq!(name, "frame_0000.ppm");
        assert_eq!(back.xs, vec![vec![-2.0, 100.0]]);
        assert!(label_from_json_line(r#"{"h_samples":[1],"lanes":[[1,2]],"raw_file":"a"}"#).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.put(2, 1, [1, 2, 3]);
        let bytes = write_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(read_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn checkpoints_round_trip() {
        let cfg = SlcConfig::default();
        let mut s = TrainState::new(&cfg, 3).unwrap();
        s.epoch = 7;
        let bytes = write_state(&s);
        let back = read_state(&bytes).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(write_state(&back), bytes);
        let mut rng = SeededRng::new(1);
        let m = CorrectorModel::init(cfg.model, &mut rng).unwrap();
        let mb = write_model(&m);
        assert_eq!(write_model(&read_model(&mb).unwrap()), mb);
        assert!(read_model(&mb[..mb.len() - 1]).is_err());
        assert!(read_state(&mb).is_err());
    }
}
