//! File formats.
//!
//! - `DAMF`: dense flow. Magic `DAMF`, height and width as `u32` LE, then
//!   `H·W·2` `f32` LE values, row-major, `x` then `y` per pixel.
//! - `DAMM`: mask stack. Magic `DAMM`, channel count, height, width as `u32`
//!   LE, then the `f32` LE weights channel-major.
//! - Binary PGM (P5) / PPM (P6) images with maxval 255.
//! - JSON documents for anchor sets, joints, manifests and reports.

use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};
use crate::flow::{AnchorSet, FlowField, LatentAnchor, MaskStack, MotionAnchor};
use crate::geometry::{GridSpec, Mat2, Point2};
use crate::warp::ImageGrid;

const FLOW_MAGIC: &[u8; 4] = b"DAMF";
const MASK_MAGIC: &[u8; 4] = b"DAMM";

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DamError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DamError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DamError::format(self.path, "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.take(4)? != expected {
            return Err(DamError::format(
                self.path,
                format!("missing {} magic", String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(DamError::format(self.path, "trailing bytes"));
        }
        Ok(())
    }

    fn spec(&mut self) -> Result<GridSpec> {
        let h = self.u32()?;
        let w = self.u32()?;
        GridSpec::new(h, w).map_err(|e| DamError::format(self.path, e.to_string()))
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let spec = flow.spec();
    let mut out = Vec::with_capacity(12 + 8 * spec.len());
    out.extend_from_slice(FLOW_MAGIC);
    push_u32(&mut out, spec.height);
    push_u32(&mut out, spec.width);
    for v in flow.vectors() {
        push_f32(&mut out, v.x);
        push_f32(&mut out, v.y);
    }
    out
}

pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    r.magic(FLOW_MAGIC)?;
    let spec = r.spec()?;
    let mut vectors = Vec::with_capacity(spec.len());
    for _ in 0..spec.len() {
        let x = r.f32()?;
        let y = r.f32()?;
        vectors.push(Point2::new(x, y));
    }
    r.finish()?;
    FlowField::new(spec, vectors)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write_file(path, &encode_flow(flow))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    decode_flow(&read_file(path)?, path)
}

pub fn encode_masks(masks: &MaskStack) -> Vec<u8> {
    let spec = masks.spec();
    let mut out = Vec::with_capacity(16 + 4 * masks.weights().len());
    out.extend_from_slice(MASK_MAGIC);
    push_u32(&mut out, masks.channels());
    push_u32(&mut out, spec.height);
    push_u32(&mut out, spec.width);
    for &w in masks.weights() {
        push_f32(&mut out, w);
    }
    out
}

pub fn decode_masks(bytes: &[u8], path: &Path) -> Result<MaskStack> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    r.magic(MASK_MAGIC)?;
    let channels = r.u32()?;
    let spec = r.spec()?;
    let mut weights = Vec::with_capacity(channels * spec.len());
    for _ in 0..channels * spec.len() {
        weights.push(r.f32()?);
    }
    r.finish()?;
    MaskStack::new(spec, channels, weights)
}

pub fn write_masks(path: &Path, masks: &MaskStack) -> Result<()> {
    write_file(path, &encode_masks(masks))
}

pub fn read_masks(path: &Path) -> Result<MaskStack> {
    decode_masks(&read_file(path)?, path)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1-channel image as P5 or a 3-channel image as P6.
pub fn encode_pnm(img: &ImageGrid) -> Result<Vec<u8>> {
    let spec = img.spec();
    let (subtype, color) = match img.channels() {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ColorType::L8),
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ColorType::Rgb8),
        c => {
            return Err(DamError::DimensionMismatch(format!(
                "PNM output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut data = Vec::with_capacity(img.values().len());
    for i in 0..spec.len() {
        for c in 0..img.channels() {
            data.push(quantize(img.channel(c)[i]));
        }
    }
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&data, spec.width as u32, spec.height as u32, color)
        .map_err(|e| DamError::format("<memory>", e.to_string()))?;
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<ImageGrid> {
    let dynamic = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| DamError::format(path, e.to_string()))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let spec = GridSpec::new(h, w).map_err(|e| DamError::format(path, e.to_string()))?;
    let (channels, data) = match dynamic.color() {
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
            (1, dynamic.to_luma8().into_raw())
        }
        _ => (3, dynamic.to_rgb8().into_raw()),
    };
    let n = spec.len();
    let mut values = vec![0.0; channels * n];
    for i in 0..n {
        for c in 0..channels {
            values[c * n + i] = data[i * channels + c] as f64 / 255.0;
        }
    }
    ImageGrid::new(spec, channels, values)
}

pub fn write_pnm(path: &Path, img: &ImageGrid) -> Result<()> {
    let bytes = encode_pnm(img).map_err(|e| match e {
        DamError::Format { message, .. } => DamError::format(path, message),
        other => other,
    })?;
    write_file(path, &bytes)
}

pub fn read_pnm(path: &Path) -> Result<ImageGrid> {
    decode_pnm(&read_file(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MotionAnchorDoc {
    pos_d: [f64; 2],
    pos_s: [f64; 2],
    theta: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatentAnchorDoc {
    pos_d: [f64; 2],
    flow_at: [f64; 2],
    theta: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorDoc {
    motion_anchors: Vec<MotionAnchorDoc>,
    root: Option<LatentAnchorDoc>,
    intermediates: Vec<LatentAnchorDoc>,
    attention_logits: Vec<Vec<f64>>,
}

fn latent_to_doc(a: &LatentAnchor) -> LatentAnchorDoc {
    LatentAnchorDoc {
        pos_d: a.pos_d.to_array(),
        flow_at: a.flow_at.to_array(),
        theta: a.theta.m,
    }
}

fn latent_from_doc(d: &LatentAnchorDoc) -> LatentAnchor {
    LatentAnchor {
        pos_d: d.pos_d.into(),
        flow_at: d.flow_at.into(),
        theta: Mat2 { m: d.theta },
    }
}

/// Serializes an anchor set with its attention logits. Floats use the
/// shortest representation that parses back to the same `f64`.
pub fn anchor_document(anchors: &AnchorSet, attention_logits: &[Vec<f64>]) -> String {
    let doc = AnchorDoc {
        motion_anchors: anchors
            .motion
            .iter()
            .map(|m| MotionAnchorDoc {
                pos_d: m.pos_d.to_array(),
                pos_s: m.pos_s.to_array(),
                theta: m.theta.m,
            })
            .collect(),
        root: anchors.root.as_ref().map(latent_to_doc),
        intermediates: anchors.intermediates.iter().map(latent_to_doc).collect(),
        attention_logits: attention_logits.to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("anchor document serializes")
}

pub fn parse_anchor_document(text: &str, path: &Path) -> Result<(AnchorSet, Vec<Vec<f64>>)> {
    let doc: AnchorDoc =
        serde_json::from_str(text).map_err(|e| DamError::format(path, e.to_string()))?;
    let anchors = AnchorSet {
        motion: doc
            .motion_anchors
            .iter()
            .map(|m| MotionAnchor {
                pos_d: m.pos_d.into(),
                pos_s: m.pos_s.into(),
                theta: Mat2 { m: m.theta },
            })
            .collect(),
        root: doc.root.as_ref().map(latent_from_doc),
        intermediates: doc.intermediates.iter().map(latent_from_doc).collect(),
    };
    anchors
        .validate()
        .map_err(|e| DamError::format(path, e.to_string()))?;
    Ok((anchors, doc.attention_logits))
}

pub fn read_anchor_document(path: &Path) -> Result<(AnchorSet, Vec<Vec<f64>>)> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| DamError::format(path, e.to_string()))?;
    parse_anchor_document(&text, path)
}

/// Joint positions in both frames plus the evaluation foreground, as written
/// next to synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointsDoc {
    pub source: Vec<[f64; 2]>,
    pub driving: Vec<[f64; 2]>,
    /// One string per row, `'1'` for foreground pixels.
    pub foreground: Vec<String>,
}

impl JointsDoc {
    pub fn new(source: &[Point2], driving: &[Point2], spec: GridSpec, foreground: &[bool]) -> Self {
        let foreground = (0..spec.height)
            .map(|r| {
                foreground[r * spec.width..(r + 1) * spec.width]
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect()
            })
            .collect();
        JointsDoc {
            source: source.iter().map(|p| p.to_array()).collect(),
            driving: driving.iter().map(|p| p.to_array()).collect(),
            foreground,
        }
    }

    pub fn source_points(&self) -> Vec<Point2> {
        self.source.iter().map(|&p| p.into()).collect()
    }

    pub fn driving_points(&self) -> Vec<Point2> {
        self.driving.iter().map(|&p| p.into()).collect()
    }

    pub fn foreground_mask(&self, spec: GridSpec, path: &Path) -> Result<Vec<bool>> {
        if self.foreground.len() != spec.height
            || self.foreground.iter().any(|r| r.len() != spec.width)
        {
            return Err(DamError::DimensionMismatch(format!(
                "{}: foreground rows do not match a {}x{} grid",
                path.display(),
                spec.height,
                spec.width
            )));
        }
        Ok(self
            .foreground
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '1'))
            .collect())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("document serializes");
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| DamError::format(path, e.to_string()))
}
