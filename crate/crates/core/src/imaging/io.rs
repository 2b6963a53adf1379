//! Binary PGM/PPM images, `FLOW2` flow files and one-line intrinsics files.

use std::fs;
use std::path::Path;

use super::{FlowField, ImageBuffer, ImagingError, Intrinsics};
use crate::fsutil::write_atomic;

/// Reads an 8-bit binary PGM (P5) or PPM (P6); intensities are divided by 255.
pub fn read_pnm(path: &Path) -> Result<ImageBuffer, ImagingError> {
    let bytes = fs::read(path).map_err(|e| ImagingError::io(path, e))?;
    decode_pnm(&bytes).map_err(|reason| ImagingError::Format {
        format: "pnm",
        reason: format!("{}: {reason}", path.display()),
    })
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer, String> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let (width, height, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return Err(format!("only 8-bit rasters are supported, maxval {maxval}"));
    }
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format!("expected {n} raster bytes"))?;
    let data = raster.iter().map(|b| *b as f64 / 255.0).collect();
    ImageBuffer::new(height, width, channels, data).map_err(|e| e.to_string())
}

/// 8-bit quantisation used by [`write_pnm`].
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| quantize(*v)));
    out
}

pub fn write_pnm(path: &Path, img: &ImageBuffer) -> Result<(), ImagingError> {
    write_atomic(path, &encode_pnm(img)).map_err(|e| ImagingError::io(path, e))
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = format!("FLOW2 {} {}\n", flow.height(), flow.width()).into_bytes();
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField, ImagingError> {
    let bad = |reason: String| ImagingError::Format {
        format: "flow",
        reason,
    };
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "FLOW2" {
        return Err(bad(format!("bad header {header:?}")));
    }
    let h: usize = parts[1].parse().map_err(|_| bad(format!("bad height {:?}", parts[1])))?;
    let w: usize = parts[2].parse().map_err(|_| bad(format!("bad width {:?}", parts[2])))?;
    let body = &bytes[nl + 1..];
    if body.len() != 8 * h * w {
        return Err(bad(format!("expected {} payload bytes, got {}", 8 * h * w, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FlowField::new(h, w, data)
}

pub fn read_flow(path: &Path) -> Result<FlowField, ImagingError> {
    let bytes = fs::read(path).map_err(|e| ImagingError::io(path, e))?;
    decode_flow(&bytes)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), ImagingError> {
    write_atomic(path, &encode_flow(flow)).map_err(|e| ImagingError::io(path, e))
}

/// Parses `f_u f_v c_u c_v H W`.
pub fn parse_intrinsics(text: &str) -> Result<Intrinsics, ImagingError> {
    let bad = |reason: String| ImagingError::Format {
        format: "intrinsics",
        reason,
    };
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| bad("empty file".into()))?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 6 {
        return Err(bad(format!("expected 6 fields, got {}", parts.len())));
    }
    let f = |i: usize| -> Result<f64, ImagingError> {
        parts[i]
            .parse::<f64>()
            .map_err(|_| bad(format!("bad number {:?}", parts[i])))
    };
    let u = |i: usize| -> Result<usize, ImagingError> {
        parts[i]
            .parse::<usize>()
            .map_err(|_| bad(format!("bad size {:?}", parts[i])))
    };
    Intrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?)
}

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.fu, k.fv, k.cu, k.cv, k.height, k.width)
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, ImagingError> {
    let text = fs::read_to_string(path).map_err(|e| ImagingError::io(path, e))?;
    parse_intrinsics(&text)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), ImagingError> {
    write_atomic(path, format_intrinsics(k).as_bytes()).map_err(|e| ImagingError::io(path, e))
}
