//! Raster and score-file ingestion.
//!
//! Depth rasters arrive either as 16-bit grayscale PNG holding millimeter
//! values (0 = invalid) or as raw little-endian f32 rows in meters with a
//! `<file>.hdr` sidecar of `key=value` lines (`width`, `height`, `unit`
//! of `meters` or `millimeters`). Masks are 8-bit PNG where the raw
//! channel value — palette index or gray level — is the object id, 0
//! meaning background. Writers for all three exist so corpora and
//! fixtures can be produced from the same code paths that read them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{DepthMap, GeometryError, SegmentationMask};
use crate::view::{LumaImage, ViewError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("bad sidecar header {path}: {reason}")]
    Header { path: String, reason: String },
    #[error("{path}: {source}")]
    Geometry {
        path: String,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: {source}")]
    View {
        path: String,
        #[source]
        source: ViewError,
    },
    #[error("score file {path} line {line}: {reason}")]
    ScoreLine { path: String, line: usize, reason: String },
}

fn read_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Read { path: path.display().to_string(), source }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Write { path: path.display().to_string(), source }
}

fn decode_err(path: &Path, reason: impl ToString) -> IoError {
    IoError::Decode { path: path.display().to_string(), reason: reason.to_string() }
}

struct RawPng {
    width: u32,
    height: u32,
    bit_depth: png::BitDepth,
    color_type: png::ColorType,
    data: Vec<u8>,
}

/// Decodes a PNG without palette expansion so indexed rasters keep their
/// raw indices.
fn read_png(path: &Path) -> Result<RawPng, IoError> {
    let file = File::open(path).map_err(read_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| decode_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok(RawPng {
        width: info.width,
        height: info.height,
        bit_depth: info.bit_depth,
        color_type: info.color_type,
        data: buf,
    })
}

/// Reads a depth raster by extension: `.png` as 16-bit grayscale
/// millimeters, anything else as raw f32 with a sidecar header.
pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        read_depth_png16(path)
    } else {
        read_depth_raw(path)
    }
}

/// 16-bit grayscale PNG, value in millimeters, 0 = invalid.
pub fn read_depth_png16(path: &Path) -> Result<DepthMap, IoError> {
    let png = read_png(path)?;
    if png.color_type != png::ColorType::Grayscale || png.bit_depth != png::BitDepth::Sixteen {
        return Err(decode_err(
            path,
            format!("expected 16-bit grayscale, got {:?}/{:?}", png.color_type, png.bit_depth),
        ));
    }
    let n = png.width as usize * png.height as usize;
    let mut values = Vec::with_capacity(n);
    let mut validity = Vec::with_capacity(n);
    for chunk in png.data.chunks_exact(2) {
        let mm = u16::from_be_bytes([chunk[0], chunk[1]]);
        values.push(mm as f64 / 1000.0);
        validity.push(mm != 0);
    }
    DepthMap::new(png.width, png.height, values, validity)
        .map_err(|source| IoError::Geometry { path: path.display().to_string(), source })
}

/// Raw little-endian f32 rows plus `<file>.hdr` sidecar. Non-finite or
/// non-positive samples are invalid pixels.
pub fn read_depth_raw(path: &Path) -> Result<DepthMap, IoError> {
    let header_path = sidecar_path(path);
    let header = std::fs::read_to_string(&header_path).map_err(read_err(&header_path))?;
    let (width, height, scale) = parse_header(&header_path, &header)?;

    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(read_err(path))?;
    let expected = width as usize * height as usize * 4;
    if bytes.len() != expected {
        return Err(decode_err(
            path,
            format!("raw depth holds {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(expected / 4);
    let mut validity = Vec::with_capacity(expected / 4);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64 * scale;
        let ok = v.is_finite() && v > 0.0;
        values.push(if ok { v } else { 0.0 });
        validity.push(ok);
    }
    DepthMap::new(width, height, values, validity)
        .map_err(|source| IoError::Geometry { path: path.display().to_string(), source })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".hdr");
    os.into()
}

fn parse_header(path: &Path, content: &str) -> Result<(u32, u32, f64), IoError> {
    let mut width = None;
    let mut height = None;
    let mut scale = None;
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(IoError::Header {
                path: path.display().to_string(),
                reason: format!("expected key=value, got '{line}'"),
            });
        };
        match (key.trim(), value.trim()) {
            ("width", v) => width = v.parse::<u32>().ok(),
            ("height", v) => height = v.parse::<u32>().ok(),
            ("unit", "meters") => scale = Some(1.0),
            ("unit", "millimeters") => scale = Some(0.001),
            ("unit", other) => {
                return Err(IoError::Header {
                    path: path.display().to_string(),
                    reason: format!("unknown unit '{other}'"),
                })
            }
            _ => {}
        }
    }
    match (width, height, scale) {
        (Some(w), Some(h), Some(s)) => Ok((w, h, s)),
        _ => Err(IoError::Header {
            path: path.display().to_string(),
            reason: "need width, height and unit".into(),
        }),
    }
}

/// 8-bit PNG mask; the raw channel value is the object id.
pub fn read_mask(
    path: &Path,
    descriptions: BTreeMap<u32, String>,
) -> Result<SegmentationMask, IoError> {
    let png = read_png(path)?;
    let ok_color = matches!(png.color_type, png::ColorType::Grayscale | png::ColorType::Indexed);
    if !ok_color || png.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(
            path,
            format!("expected 8-bit gray or indexed, got {:?}/{:?}", png.color_type, png.bit_depth),
        ));
    }
    let labels = png.data.iter().map(|&b| b as u32).collect();
    SegmentationMask::new(png.width, png.height, labels, descriptions)
        .map_err(|source| IoError::Geometry { path: path.display().to_string(), source })
}

/// Loads any 8/16-bit gray, indexed, or RGB(A) PNG as luminance in [0, 1].
pub fn read_luma(path: &Path) -> Result<LumaImage, IoError> {
    let png = read_png(path)?;
    let n = png.width as usize * png.height as usize;
    let pixels: Vec<f64> = match (png.color_type, png.bit_depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
            png.data.iter().map(|&b| b as f64 / 255.0).collect()
        }
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => png
            .data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        (png::ColorType::Rgb, png::BitDepth::Eight) => png
            .data
            .chunks_exact(3)
            .map(|c| luminance(c[0], c[1], c[2]))
            .collect(),
        (png::ColorType::Rgba, png::BitDepth::Eight) => png
            .data
            .chunks_exact(4)
            .map(|c| luminance(c[0], c[1], c[2]))
            .collect(),
        (ct, bd) => return Err(decode_err(path, format!("unsupported PNG layout {ct:?}/{bd:?}"))),
    };
    if pixels.len() != n {
        return Err(decode_err(path, "pixel count does not match dimensions"));
    }
    LumaImage::new(png.width, png.height, pixels)
        .map_err(|source| IoError::View { path: path.display().to_string(), source })
}

fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

fn png_encoder(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
) -> Result<png::Writer<BufWriter<File>>, IoError> {
    let file = File::create(path).map_err(write_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(color);
    encoder.set_depth(depth);
    encoder.write_header().map_err(|e| decode_err(path, e))
}

/// Writes a depth map as 16-bit grayscale millimeter PNG; invalid pixels
/// become 0. Depths above the u16 millimeter range saturate.
pub fn write_depth_png16(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let mut data = Vec::with_capacity(depth.values().len() * 2);
    for (&v, &ok) in depth.values().iter().zip(depth.validity()) {
        let mm = if ok { ((v * 1000.0).round() as u64).clamp(1, u16::MAX as u64) as u16 } else { 0 };
        data.extend_from_slice(&mm.to_be_bytes());
    }
    let mut writer = png_encoder(
        path,
        depth.width(),
        depth.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
    )?;
    writer.write_image_data(&data).map_err(|e| decode_err(path, e))
}

/// Writes raw little-endian f32 meters plus the `.hdr` sidecar.
pub fn write_depth_raw(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(depth.values().len() * 4);
    for (&v, &ok) in depth.values().iter().zip(depth.validity()) {
        let sample = if ok { v as f32 } else { 0.0 };
        bytes.extend_from_slice(&sample.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(write_err(path))?;
    let header_path = sidecar_path(path);
    let header =
        format!("width={}\nheight={}\nunit=meters\n", depth.width(), depth.height());
    std::fs::write(&header_path, header).map_err(write_err(&header_path))
}

/// Writes a mask as 8-bit grayscale PNG; ids above 255 are rejected.
pub fn write_mask_png8(path: &Path, mask: &SegmentationMask) -> Result<(), IoError> {
    let mut data = Vec::with_capacity((mask.width() * mask.height()) as usize);
    for v in 0..mask.height() {
        for u in 0..mask.width() {
            let label = mask.label_at(u, v).expect("in range");
            if label > 255 {
                return Err(decode_err(path, format!("label {label} exceeds 8-bit mask range")));
            }
            data.push(label as u8);
        }
    }
    let mut writer = png_encoder(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
    )?;
    writer.write_image_data(&data).map_err(|e| decode_err(path, e))
}

/// Writes a luminance raster as 8-bit grayscale PNG.
pub fn write_luma_png8(path: &Path, image: &LumaImage) -> Result<(), IoError> {
    let data: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = png_encoder(
        path,
        image.width(),
        image.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
    )?;
    writer.write_image_data(&data).map_err(|e| decode_err(path, e))
}

/// Reads `(frame_a, frame_b, score)` whitespace-separated triples; blank
/// lines and '#' comments are skipped.
pub fn read_pair_scores(path: &Path) -> Result<Vec<(String, String, f64)>, IoError> {
    let content = std::fs::read_to_string(path).map_err(read_err(path))?;
    let mut triples = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [a, b, s] = fields.as_slice() else {
            return Err(IoError::ScoreLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: "expected '<frame_a> <frame_b> <score>'".into(),
            });
        };
        let score: f64 = s.parse().map_err(|_| IoError::ScoreLine {
            path: path.display().to_string(),
            line: i + 1,
            reason: format!("bad score '{s}'"),
        })?;
        triples.push((a.to_string(), b.to_string(), score));
    }
    Ok(triples)
}

/// Reads per-image label score vectors: `<image_id> <s1> <s2> ...`, one
/// record per line, scores in label-set order.
pub fn read_label_scores(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, IoError> {
    let content = std::fs::read_to_string(path).map_err(read_err(path))?;
    let mut out = BTreeMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("nonempty line").to_string();
        let mut scores = Vec::new();
        for s in fields {
            scores.push(s.parse::<f64>().map_err(|_| IoError::ScoreLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("bad score '{s}'"),
            })?);
        }
        if scores.is_empty() {
            return Err(IoError::ScoreLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: "record has no scores".into(),
            });
        }
        out.insert(id, scores);
    }
    Ok(out)
}
