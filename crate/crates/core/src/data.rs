//! File formats and synthetic scene generation.
//!
//! NTF tensor files: magic `NTEN`, version u8 = 1, dtype u8 (1 = f32,
//! 2 = f64), rank u8 in 1..=4, reserved u8 = 0, then `rank` u64 dims and the
//! row-major payload, all little-endian. Total length is
//! `8 + 8*rank + payload` bytes.
//!
//! Annotations are JSONL, one object per line:
//! `{"image": str, "boxes": [[x1,y1,x2,y2,cls], ...]}`; detections carry an
//! extra trailing score per box.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{DetBox, GtBox};
use crate::tensor::{Scalar, Shape, Tensor};

pub const NTF_MAGIC: [u8; 4] = *b"NTEN";
pub const NTF_VERSION: u8 = 1;

// ---------------------------------------------------------------------------
// NTF tensor files
// ---------------------------------------------------------------------------

fn dtype_size(code: u8) -> Result<usize> {
    match code {
        1 => Ok(4),
        2 => Ok(8),
        other => Err(Error::Format {
            offset: 5,
            msg: format!("unknown dtype code {other} (1 = f32, 2 = f64)"),
        }),
    }
}

/// Writes raw dims + scalar payload. `dims` must have 1..=4 entries.
pub fn ntf_write_raw<T: Scalar>(path: &Path, dims: &[u64], data: &[T]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::contract(format!("NTF rank must be in 1..=4, got {}", dims.len())));
    }
    let numel: u64 = dims.iter().product();
    if numel != data.len() as u64 {
        return Err(Error::contract(format!(
            "dims {dims:?} imply {numel} values, got {}",
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(8 + 8 * dims.len() + data.len() * 8);
    bytes.extend_from_slice(&NTF_MAGIC);
    bytes.push(NTF_VERSION);
    bytes.push(T::DTYPE_CODE);
    bytes.push(dims.len() as u8);
    bytes.push(0); // reserved
    for &d in dims {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        match T::DTYPE_CODE {
            1 => bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            _ => bytes.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads raw dims + payload, validating magic, version, dtype, and length.
pub fn ntf_read_raw<T: Scalar>(path: &Path) -> Result<(Vec<u64>, Vec<T>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("header truncated: {} of 8 bytes", bytes.len()),
        });
    }
    if bytes[0..4] != NTF_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {:?}", &bytes[0..4]) });
    }
    if bytes[4] != NTF_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {}", bytes[4]),
        });
    }
    let dtype = bytes[5];
    let elem = dtype_size(dtype)?;
    if dtype != T::DTYPE_CODE {
        return Err(Error::Format {
            offset: 5,
            msg: format!("dtype code {dtype} does not match requested element type"),
        });
    }
    let rank = bytes[6] as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Format { offset: 6, msg: format!("rank {rank} outside 1..=4") });
    }
    if bytes[7] != 0 {
        return Err(Error::Format { offset: 7, msg: format!("reserved byte is {}", bytes[7]) });
    }
    let dims_end = 8 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("dims truncated: {} of {dims_end} bytes", bytes.len()),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let start = 8 + 8 * i;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[start..start + 8]);
        let d = u64::from_le_bytes(buf);
        if d == 0 {
            return Err(Error::Format {
                offset: start as u64,
                msg: "zero dimension".to_string(),
            });
        }
        dims.push(d);
    }
    let numel: u64 = dims.iter().product();
    let expected = dims_end as u64 + numel * elem as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            offset: dims_end as u64,
            msg: format!("payload length {} != expected {expected} bytes", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(numel as usize);
    for i in 0..numel as usize {
        let start = dims_end + i * elem;
        let v = match dtype {
            1 => {
                let mut buf = [0u8; 4];
                buf.copy_from_slice(&bytes[start..start + 4]);
                f32::from_le_bytes(buf) as f64
            }
            _ => {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bytes[start..start + 8]);
                f64::from_le_bytes(buf)
            }
        };
        data.push(T::fl(v));
    }
    Ok((dims, data))
}

/// Writes a rank-4 tensor.
pub fn ntf_write<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let s = t.shape();
    let dims: Vec<u64> = s.0.iter().map(|&d| d as u64).collect();
    ntf_write_raw(path, &dims, &t.data())
}

/// Reads a tensor; files of rank < 4 are left-padded with singleton dims.
pub fn ntf_read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (dims, data) = ntf_read_raw::<T>(path)?;
    let mut padded = [1usize; 4];
    for (i, &d) in dims.iter().enumerate() {
        padded[4 - dims.len() + i] = d as usize;
    }
    Tensor::from_vec(Shape(padded), data)
}

// ---------------------------------------------------------------------------
// Annotations and detections (JSONL)
// ---------------------------------------------------------------------------

/// One labeled box: pixel-unit corners with `x2 > x1`, `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub cls: usize,
}

impl AnnBox {
    pub fn to_gt(&self) -> GtBox {
        GtBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2, cls: self.cls }
    }
}

#[derive(Clone, Debug)]
pub struct AnnotationRecord {
    pub image: String,
    pub boxes: Vec<AnnBox>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    image: String,
    boxes: Vec<Vec<f64>>,
}

/// Loads JSONL annotations; malformed lines and inverted boxes are hard
/// errors naming the line (and box index).
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnnotation = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let mut boxes = Vec::with_capacity(raw.boxes.len());
        for (bi, b) in raw.boxes.iter().enumerate() {
            if b.len() != 5 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("box {bi} has {} fields, expected 5", b.len()),
                });
            }
            if b[4] < 0.0 || b[4].fract() != 0.0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("box {bi} class id {} is not a nonnegative integer", b[4]),
                });
            }
            if b[2] <= b[0] || b[3] <= b[1] {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("box {bi} rejected: requires x2 > x1 and y2 > y1, got {b:?}"),
                });
            }
            boxes.push(AnnBox { x1: b[0], y1: b[1], x2: b[2], y2: b[3], cls: b[4] as usize });
        }
        out.push(AnnotationRecord { image: raw.image, boxes });
    }
    Ok(out)
}

pub fn save_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        let raw = RawAnnotation {
            image: rec.image.clone(),
            boxes: rec
                .boxes
                .iter()
                .map(|b| vec![b.x1, b.y1, b.x2, b.y2, b.cls as f64])
                .collect(),
        };
        text.push_str(&serde_json::to_string(&raw).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Clone, Debug)]
pub struct DetectionRecord {
    pub image: String,
    pub boxes: Vec<DetBox>,
}

#[derive(Serialize, Deserialize)]
struct RawDetection {
    image: String,
    boxes: Vec<Vec<f64>>,
}

/// Detections JSONL: `{"image": str, "boxes": [[x1,y1,x2,y2,cls,score], ...]}`.
pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDetection = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let mut boxes = Vec::with_capacity(raw.boxes.len());
        for (bi, b) in raw.boxes.iter().enumerate() {
            if b.len() != 6 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("detection {bi} has {} fields, expected 6", b.len()),
                });
            }
            boxes.push(DetBox {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
                cls: b[4] as usize,
                score: b[5],
            });
        }
        out.push(DetectionRecord { image: raw.image, boxes });
    }
    Ok(out)
}

pub fn save_detections(records: &[DetectionRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        let raw = RawDetection {
            image: rec.image.clone(),
            boxes: rec
                .boxes
                .iter()
                .map(|b| vec![b.x1, b.y1, b.x2, b.y2, b.cls as f64, b.score])
                .collect(),
        };
        text.push_str(&serde_json::to_string(&raw).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// PGM (P5) reader
// ---------------------------------------------------------------------------

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() && (bytes[*pos] as char).is_whitespace() {
        *pos += 1;
    }
    if *pos < bytes.len() && bytes[*pos] == b'#' {
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
    }
    while *pos < bytes.len() && (bytes[*pos] as char).is_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !(bytes[*pos] as char).is_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format { offset: *pos as u64, msg: "truncated header".into() });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let at = *pos as u64;
    pgm_token(bytes, pos)?
        .parse()
        .map_err(|_| Error::Format { offset: at, msg: format!("bad {what}") })
}

/// Reads a binary PGM (P5, maxval 255) into a `(1,1,H,W)` tensor in [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let magic = pgm_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Format { offset: 0, msg: format!("expected P5, got {magic}") });
    }
    let w = pgm_number(&bytes, &mut pos, "width")?;
    let h = pgm_number(&bytes, &mut pos, "height")?;
    let maxval = pgm_number(&bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("only maxval 255 supported, got {maxval}"),
        });
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("pixel data truncated: need {} bytes", w * h),
        });
    }
    let data: Vec<f32> = bytes[pos..pos + w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(Shape([1, 1, h, w]), data)
}

// ---------------------------------------------------------------------------
// Synthetic SAR-like scenes
// ---------------------------------------------------------------------------

/// Recipe for one synthetic scene: speckled background plus oriented bright
/// targets whose class id derives from (length bucket x aspect bucket).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Image side length; must be divisible by 32.
    pub size: usize,
    /// Speckle looks L of the mean-1 gamma noise.
    pub looks: f64,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Target long-side range in pixels.
    pub len_range: (f64, f64),
    /// Target short-side range in pixels.
    pub width_range: (f64, f64),
    /// Required margin between mean target and mean background intensity.
    pub contrast: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::for_size(256)
    }
}

impl SceneSpec {
    /// Desk-scale defaults proportional to the image size.
    pub fn for_size(size: usize) -> Self {
        let s = size as f64;
        SceneSpec {
            size,
            looks: 4.0,
            min_targets: 1,
            max_targets: (size / 32).clamp(2, 6),
            len_range: (s * 0.15, s * 0.32),
            width_range: (s * 0.05, s * 0.12),
            contrast: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::config(format!("scene size {} must be divisible by 32", self.size)));
        }
        if self.min_targets > self.max_targets {
            return Err(Error::config("min_targets > max_targets"));
        }
        if self.looks <= 0.0 {
            return Err(Error::config("speckle looks must be > 0"));
        }
        Ok(())
    }

    /// Length buckets (3) x aspect buckets (2).
    pub const NUM_CLASSES: usize = 6;

    fn classify(&self, length: f64, width: f64) -> usize {
        let (lo, hi) = self.len_range;
        let third = (hi - lo) / 3.0;
        let len_bucket = if length < lo + third {
            0
        } else if length < lo + 2.0 * third {
            1
        } else {
            2
        };
        let aspect_bucket = if length / width < 2.4 { 0 } else { 1 };
        len_bucket * 2 + aspect_bucket
    }
}

/// A generated scene plus the target mask used for hull checks.
pub struct Scene {
    pub image: Tensor<f32>,
    pub annotation: AnnotationRecord,
    pub target_mask: Vec<bool>,
}

/// Deterministic scene synthesis: multiplicative speckle (gamma, mean 1,
/// `looks` shape) over a smooth low-frequency background, plus oriented
/// bright rectangles/ellipses with boosted edge contours. The gt box of a
/// target is the axis-aligned hull of its painted mask. Targets that would
/// exceed the bounds are resampled up to 100 times, then skipped.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Smooth background field around 1.0.
    let mut field = vec![1.0f64; n * n];
    for _ in 0..3 {
        let fx = rng.random_range(0.5..2.0) / n as f64;
        let fy = rng.random_range(0.5..2.0) / n as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.05..0.15);
        for y in 0..n {
            for x in 0..n {
                field[y * n + x] += amp
                    * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            }
        }
    }

    // Mean-1 speckle.
    let gamma = Gamma::new(spec.looks, 1.0 / spec.looks)
        .map_err(|e| Error::config(format!("speckle parameters: {e}")))?;
    let bg_level = 0.28;
    let mut img = vec![0.0f64; n * n];
    for i in 0..n * n {
        img[i] = bg_level * field[i].max(0.2) * gamma.sample(&mut rng);
    }

    // Targets.
    let count = rng.random_range(spec.min_targets..=spec.max_targets);
    let mut target_mask = vec![false; n * n];
    let mut boxes = Vec::new();
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..100 {
            let length = rng.random_range(spec.len_range.0..spec.len_range.1);
            let width = rng.random_range(spec.width_range.0..spec.width_range.1);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let cx = rng.random_range(0.0..n as f64);
            let cy = rng.random_range(0.0..n as f64);
            let (sin_t, cos_t) = theta.sin_cos();
            // Corner extents of the rotated box.
            let ex = (length / 2.0 * cos_t).abs() + (width / 2.0 * sin_t).abs();
            let ey = (length / 2.0 * sin_t).abs() + (width / 2.0 * cos_t).abs();
            if cx - ex < 1.0 || cx + ex > n as f64 - 1.0 || cy - ey < 1.0 || cy + ey > n as f64 - 1.0
            {
                continue;
            }
            let ellipse = rng.random_range(0.0..1.0) < 0.5;
            let brightness = rng.random_range(0.85..1.0);
            let x_lo = (cx - ex).floor().max(0.0) as usize;
            let x_hi = (cx + ex).ceil().min(n as f64 - 1.0) as usize;
            let y_lo = (cy - ey).floor().max(0.0) as usize;
            let y_hi = (cy + ey).ceil().min(n as f64 - 1.0) as usize;
            let mut min_x = usize::MAX;
            let mut max_x = 0usize;
            let mut min_y = usize::MAX;
            let mut max_y = 0usize;
            for py in y_lo..=y_hi {
                for px in x_lo..=x_hi {
                    // Pixel center in target-local coordinates.
                    let dx = px as f64 + 0.5 - cx;
                    let dy = py as f64 + 0.5 - cy;
                    let u = dx * cos_t + dy * sin_t; // along length
                    let v = -dx * sin_t + dy * cos_t; // along width
                    let (hu, hv) = (length / 2.0, width / 2.0);
                    let inside = if ellipse {
                        (u / hu).powi(2) + (v / hv).powi(2) <= 1.0
                    } else {
                        u.abs() <= hu && v.abs() <= hv
                    };
                    if inside {
                        let edge = if ellipse {
                            (u / hu).powi(2) + (v / hv).powi(2) > 0.55
                        } else {
                            hu - u.abs() < 1.2 || hv - v.abs() < 1.2
                        };
                        let boost = if edge { 1.25 } else { 1.0 };
                        let speckle = gamma.sample(&mut rng);
                        // Mild target speckle keeps the contrast margin.
                        let value = brightness * boost * (0.7 + 0.3 * speckle);
                        let i = py * n + px;
                        img[i] = img[i].max(value);
                        target_mask[i] = true;
                        min_x = min_x.min(px);
                        max_x = max_x.max(px);
                        min_y = min_y.min(py);
                        max_y = max_y.max(py);
                    }
                }
            }
            if min_x == usize::MAX {
                continue;
            }
            boxes.push(AnnBox {
                x1: min_x as f64,
                y1: min_y as f64,
                x2: (max_x + 1) as f64,
                y2: (max_y + 1) as f64,
                cls: spec.classify(length, width),
            });
            placed = true;
            break;
        }
        let _ = placed; // targets that never fit are skipped
    }

    let data: Vec<f32> = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let image = Tensor::from_vec(Shape([1, 1, n, n]), data)?;
    Ok(Scene {
        image,
        annotation: AnnotationRecord { image: String::new(), boxes },
        target_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ntf_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ntf");
        let mut s = 5u64;
        let data: Vec<f32> = (0..2 * 3 * 4 * 5)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((s >> 33) as f32 / (1u64 << 31) as f32) - 1.0
            })
            .collect();
        let t = Tensor::from_vec(Shape([2, 3, 4, 5]), data.clone()).unwrap();
        ntf_write(&t, &path).unwrap();
        let back = ntf_read::<f32>(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn ntf_rank1_file_length() {
        // 8 header + 8*rank dims + payload bytes.
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.ntf");
        ntf_write_raw::<f32>(&path, &[1], &[2.5f32]).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 8 + 8 + 4);
        let (dims, data) = ntf_read_raw::<f32>(&path).unwrap();
        assert_eq!(dims, vec![1]);
        assert_eq!(data, vec![2.5f32]);
        let t = ntf_read::<f32>(&path).unwrap();
        assert_eq!(t.shape(), Shape([1, 1, 1, 1]));
    }

    #[test]
    fn ntf_truncation_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ntf");
        let t = Tensor::<f32>::full(Shape([1, 1, 2, 2]), 1.0);
        ntf_write(&t, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match ntf_read::<f32>(&path).unwrap_err() {
            Error::Format { offset, msg } => {
                assert_eq!(offset, 8 + 8 * 4);
                assert!(msg.contains("payload length"));
            }
            e => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn ntf_bad_magic_at_offset_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ntf");
        fs::write(&path, b"NOPE\x01\x01\x01\x00").unwrap();
        match ntf_read::<f32>(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn annotations_roundtrip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_annotations(&path).unwrap().is_empty());

        fs::write(&path, r#"{"image": "a.ntf", "boxes": [[1.0, 2.0, 5.0, 9.0, 3]]}"#).unwrap();
        let recs = load_annotations(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].boxes[0], AnnBox { x1: 1.0, y1: 2.0, x2: 5.0, y2: 9.0, cls: 3 });

        fs::write(&path, r#"{"image": "a.ntf", "boxes": [[5.0, 2.0, 1.0, 9.0, 3]]}"#).unwrap();
        match load_annotations(&path).unwrap_err() {
            Error::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("box 0"));
            }
            e => panic!("unexpected error {e:?}"),
        }

        fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_annotations(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn scene_determinism_and_seed_diversity() {
        let spec = SceneSpec::for_size(64);
        let a = generate_scene(7, &spec).unwrap();
        let b = generate_scene(7, &spec).unwrap();
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        assert_eq!(a.annotation.boxes, b.annotation.boxes);
        // Distinct seeds differ (hash inequality over many seeds).
        let mut hashes = std::collections::BTreeSet::new();
        for seed in 0..100u64 {
            let s = generate_scene(seed, &spec).unwrap();
            let mut h = 1469598103934665603u64;
            for v in s.image.data().iter() {
                h = (h ^ v.to_bits() as u64).wrapping_mul(1099511628211);
            }
            hashes.insert(h);
        }
        assert_eq!(hashes.len(), 100);
    }

    #[test]
    fn zero_targets_pure_speckle() {
        let spec = SceneSpec { min_targets: 0, max_targets: 0, ..SceneSpec::for_size(64) };
        let s = generate_scene(3, &spec).unwrap();
        assert!(s.annotation.boxes.is_empty());
        assert!(s.target_mask.iter().all(|&m| !m));
    }

    #[test]
    fn contrast_margin_holds_per_scene() {
        let spec = SceneSpec::for_size(64);
        for seed in 0..20u64 {
            let s = generate_scene(seed, &spec).unwrap();
            if s.annotation.boxes.is_empty() {
                continue;
            }
            let data = s.image.data();
            let (mut t_sum, mut t_n, mut b_sum, mut b_n) = (0.0f64, 0usize, 0.0f64, 0usize);
            for (i, &m) in s.target_mask.iter().enumerate() {
                if m {
                    t_sum += data[i] as f64;
                    t_n += 1;
                } else {
                    b_sum += data[i] as f64;
                    b_n += 1;
                }
            }
            let margin = t_sum / t_n as f64 - b_sum / b_n as f64;
            assert!(margin >= spec.contrast, "seed {seed}: margin {margin}");
        }
    }

    #[test]
    fn gt_boxes_are_tight_hulls_of_masks() {
        let spec = SceneSpec::for_size(64);
        for seed in 0..10u64 {
            let s = generate_scene(seed, &spec).unwrap();
            let n = spec.size;
            // Every masked pixel lies inside some box.
            for y in 0..n {
                for x in 0..n {
                    if s.target_mask[y * n + x] {
                        let inside = s.annotation.boxes.iter().any(|b| {
                            (x as f64) >= b.x1
                                && (x as f64) < b.x2
                                && (y as f64) >= b.y1
                                && (y as f64) < b.y2
                        });
                        assert!(inside, "seed {seed}: mask pixel ({x},{y}) outside all boxes");
                    }
                }
            }
            // Boxes touch the mask on every side (tightness).
            for b in &s.annotation.boxes {
                let (x1, y1, x2, y2) =
                    (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
                let col_hit = |x: usize| (y1..y2).any(|y| s.target_mask[y * n + x]);
                let row_hit = |y: usize| (x1..x2).any(|x| s.target_mask[y * n + x]);
                assert!(col_hit(x1) && col_hit(x2 - 1) && row_hit(y1) && row_hit(y2 - 1));
            }
        }
    }

    #[test]
    fn pgm_reader_parses_p5() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 64, 32, 16]);
        fs::write(&path, bytes).unwrap();
        let t = read_pgm(&path).unwrap();
        assert_eq!(t.shape(), Shape([1, 1, 2, 3]));
        assert!((t.at(0, 0, 0, 1) - 128.0 / 255.0).abs() < 1e-6);
        assert!((t.at(0, 0, 1, 2) - 16.0 / 255.0).abs() < 1e-6);
    }
}
