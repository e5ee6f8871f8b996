//! Image file codecs: 8-bit binary PGM/PPM and the lossless `FIMG` float format.
//!
//! Every `decode_*` function accepts arbitrary bytes and must reject malformed
//! input with [`Error::Format`] rather than panic.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Writes `bytes` to `path` by writing a sibling temp file and renaming it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads one whitespace-delimited ASCII token, skipping `#` comments.
fn pnm_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PNM header".into()));
    }
    Ok(&buf[start..*pos])
}

fn pnm_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pnm_token(buf, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Format(format!("bad PNM {what}")))
}

/// Decodes a binary 8-bit PGM (`P5`) or PPM (`P6`), mapping samples linearly
/// from `[0, maxval]` to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::Format("missing PNM magic".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::Format("expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let width = pnm_number(bytes, &mut pos, "width")?;
    let height = pnm_number(bytes, &mut pos, "height")?;
    let maxval = pnm_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing raster separator".into())),
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("PNM dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < n {
        return Err(Error::Format(format!(
            "PNM raster truncated: need {n} bytes, have {}",
            raster.len()
        )));
    }
    if height < 2 || width < 2 {
        return Err(Error::Format(format!("PNM too small: {width}x{height}")));
    }
    let plane = width * height;
    let scale = maxval as f64;
    let mut data = vec![0.0; n];
    for (idx, &b) in raster[..n].iter().enumerate() {
        if b as usize > maxval {
            return Err(Error::Format(format!("sample {b} exceeds maxval {maxval}")));
        }
        let (px, c) = (idx / channels, idx % channels);
        data[c * plane + px] = b as f64 / scale;
    }
    Image::new(height, width, channels, data)
}

/// Encodes as `P5` (one channel) or `P6` (three channels), clamping to `[0, 1]`
/// and rounding to the nearest 8-bit level.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    let plane = image.plane_len();
    let data = image.data();
    out.reserve(data.len());
    for px in 0..plane {
        for c in 0..image.channels() {
            let v = data[c * plane + px].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

fn header_line(bytes: &[u8], max_len: usize) -> Result<(&str, &[u8])> {
    let end = bytes
        .iter()
        .take(max_len)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let line = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    Ok((line, &bytes[end + 1..]))
}

/// Parses a header of the form `<MAGIC> <n1> <n2> ...\n` and returns the
/// numeric fields plus the remaining payload.
pub(crate) fn parse_numeric_header<'a>(
    bytes: &'a [u8],
    magic: &str,
    fields: usize,
) -> Result<(Vec<usize>, &'a [u8])> {
    let (line, rest) = header_line(bytes, 256)?;
    let mut parts = line.split(' ');
    if parts.next() != Some(magic) {
        return Err(Error::Format(format!("expected {magic} header")));
    }
    let nums = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad {magic} header field {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if nums.len() != fields {
        return Err(Error::Format(format!(
            "{magic} header needs {fields} fields, got {}",
            nums.len()
        )));
    }
    Ok((nums, rest))
}

pub(crate) fn decode_f32_payload(payload: &[u8], count: usize) -> Result<Vec<f64>> {
    let need = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflow".into()))?;
    if payload.len() != need {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {need}",
            payload.len()
        )));
    }
    payload
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(Error::Format("non-finite float in payload".into()))
            }
        })
        .collect()
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// `FIMG <H> <W> <C>\n` followed by planar little-endian `f32` samples.
pub fn encode_fimg(image: &Image) -> Vec<u8> {
    let mut out = format!(
        "FIMG {} {} {}\n",
        image.height(),
        image.width(),
        image.channels()
    )
    .into_bytes();
    push_f32s(&mut out, image.data());
    out
}

pub fn decode_fimg(bytes: &[u8]) -> Result<Image> {
    let (dims, payload) = parse_numeric_header(bytes, "FIMG", 3)?;
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("FIMG dimensions overflow".into()))?;
    let data = decode_f32_payload(payload, count)?;
    Image::new(h, w, c, data).map_err(|e| Error::Format(e.to_string()))
}

/// Loads `.pgm`/`.ppm`/`.pnm` as PNM and anything else as FIMG.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let is_pnm = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pgm" | "ppm" | "pnm")
    );
    let decoded = if is_pnm {
        decode_pnm(&bytes)
    } else {
        decode_fimg(&bytes)
    };
    decoded.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_pnm(image: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pnm(image))
}

pub fn save_fimg(image: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_fimg(image))
}
