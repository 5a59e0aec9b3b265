//! Sequence directories, box logs, loss and metrics files.
//!
//! A sequence directory holds frames `00000.ppm`, `00001.ppm`, ... and
//! `groundtruth.txt`. Box logs have one `x0,y0,x1,y1` line per frame.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ocean_core::geometry::BBox;
use ocean_core::harness::{LossRecord, MetricsReport, Sequence};
use ocean_core::{Real, Tensor};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const GROUNDTRUTH: &str = "groundtruth.txt";

pub fn frame_name(t: usize) -> String {
    format!("{:05}.ppm", t)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// `[3, H, W]` frame in `[0, 1]` to 8-bit RGB.
pub fn frame_to_image(frame: &Tensor) -> CliResult<RgbImage> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(CliError::Config(format!("expected a 3-channel frame, got {}", c)));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |ch| (frame.at3(ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    }))
}

pub fn image_to_frame(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.get_pixel((p % w) as u32, (p / w) as u32)[c] as Real / 255.0
    })
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        writeln!(s, "{},{},{},{}", b.x0, b.y0, b.x1, b.y1).expect("write to string");
    }
    s
}

pub fn parse_boxes(text: &str, origin: &str) -> CliResult<Vec<BBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<Real> = line
            .split(',')
            .map(|f| f.trim().parse::<Real>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Config(format!("{} line {}: cannot parse {:?}", origin, n + 1, line)))?;
        let b = match v.as_slice() {
            [x0, y0, x1, y1] => BBox::new(*x0, *y0, *x1, *y1),
            _ => return Err(CliError::Config(format!("{} line {}: expected x0,y0,x1,y1", origin, n + 1))),
        };
        if !b.is_valid() {
            return Err(CliError::Config(format!("{} line {}: invalid box {:?}", origin, n + 1, line)));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> CliResult<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_boxes(&text, &path.display().to_string())
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> CliResult<()> {
    write_file(path, format_boxes(boxes))
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> CliResult<()> {
    create_dir(dir)?;
    for (t, f) in seq.frames.iter().enumerate() {
        let path = dir.join(frame_name(t));
        frame_to_image(f)?
            .save_with_format(&path, image::ImageFormat::Pnm)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
    }
    write_boxes(&dir.join(GROUNDTRUTH), &seq.gt)
}

pub fn read_sequence(dir: &Path) -> CliResult<Sequence> {
    let gt = read_boxes(&dir.join(GROUNDTRUTH))?;
    if gt.is_empty() {
        return Err(CliError::Config(format!("{}: no groundtruth boxes", dir.join(GROUNDTRUTH).display())));
    }
    let frames = (0..gt.len())
        .map(|t| {
            let path = dir.join(frame_name(t));
            let img = image::open(&path).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
            Ok(image_to_frame(&img.to_rgb8()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if dir.join(frame_name(gt.len())).exists() {
        return Err(CliError::Config(format!("{}: more frames than groundtruth boxes", dir.display())));
    }
    Ok(Sequence::new(frames, gt)?)
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> CliResult<()> {
    let mut s = String::from("step,lr,l_reg,l_o,l_r,total\n");
    for r in history {
        writeln!(s, "{},{},{},{},{},{}", r.step, r.lr, r.l_reg, r.l_o, r.l_r, r.total).expect("write to string");
    }
    write_file(path, s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsFile {
    pub ao: Real,
    pub sr50: Real,
    pub auc: Real,
    pub precision20: Real,
    pub failures: usize,
    pub frames: usize,
    pub sequences: usize,
}

impl From<&MetricsReport> for MetricsFile {
    fn from(m: &MetricsReport) -> Self {
        Self {
            ao: m.ao,
            sr50: m.sr50,
            auc: m.auc,
            precision20: m.precision20,
            failures: m.failures,
            frames: m.frames,
            sequences: m.sequences,
        }
    }
}

pub fn format_metrics(m: &MetricsReport) -> String {
    format!(
        "ao={}\nsr50={}\nauc={}\nprecision20={}\nfailures={}\nframes={}\nsequences={}\n",
        m.ao, m.sr50, m.auc, m.precision20, m.failures, m.frames, m.sequences
    )
}

/// Writes `metrics.txt` and `metrics.json` into `dir`.
pub fn write_metrics(dir: &Path, m: &MetricsReport) -> CliResult<()> {
    write_file(&dir.join("metrics.txt"), format_metrics(m))?;
    let json = serde_json::to_string_pretty(&MetricsFile::from(m)).expect("metrics serialize");
    write_file(&dir.join("metrics.json"), json + "\n")
}

/// Score map as CSV rows.
pub fn write_score_map(path: &Path, scores: &Tensor) -> CliResult<()> {
    let (h, w) = scores.dims2()?;
    let mut s = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| scores.at2(y, x).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_file(path, s)
}

pub fn scores_dir(out: &Path) -> PathBuf {
    out.join("scores")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ocean_core::harness::{gen_sequence, SyntheticSceneConfig};

    #[test]
    fn boxes_round_trip() {
        let b = vec![BBox::new(0.1, 2.0, 30.333333333333332, 41.5), BBox::new(1.0, 1.0, 2.0, 2.0)];
        assert_eq!(parse_boxes(&format_boxes(&b), "t").unwrap(), b);
        assert!(parse_boxes("1,2,3", "t").is_err());
        assert!(parse_boxes("5,5,1,1", "t").is_err());
    }

    #[test]
    fn sequence_round_trip_quantizes_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticSceneConfig { num_frames: 3, ..SyntheticSceneConfig::easy(1) };
        let seq = gen_sequence(&cfg).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back.gt, seq.gt);
        for (a, b) in seq.frames.iter().zip(&back.frames) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.zip_map(b, |x, y| (x - y).abs()).unwrap().max_abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
