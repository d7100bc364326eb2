//! File formats: the raw float tensor container, 8-bit PNG images and
//! atomic (write-then-rename) file output.
//!
//! Tensor container layout, all integers little-endian:
//!
//! | bytes        | content                        |
//! |--------------|--------------------------------|
//! | 8            | magic `FSDTNSR\0`              |
//! | 4            | format version (`u32`, = 1)    |
//! | 4            | rank (`u32`)                   |
//! | 8 · rank     | dims (`u64`)                   |
//! | 4 · Π dims   | row-major `f32` data           |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 8] = *b"FSDTNSR\0";
pub const TENSOR_VERSION: u32 = 1;
/// Extension of raw float sidecars.
pub const TENSOR_EXT: &str = "f32t";

/// Serialises a tensor into the container format.
pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the container format; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 16 || bytes[..8] != TENSOR_MAGIC {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(bad(&format!("unsupported tensor format version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header = 16 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut n: usize = 1;
    for i in 0..rank {
        let o = 16 + 8 * i;
        let d = u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| bad("dimension overflows usize"))?;
        n = n.checked_mul(d).ok_or_else(|| bad("element count overflows"))?;
        shape.push(d);
    }
    let body = &bytes[header..];
    if Some(body.len()) != n.checked_mul(4) {
        return Err(bad(&format!(
            "expected {n} floats, found {} bytes of data",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_sibling(path);
    let write = || -> std::io::Result<()> {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// 8-bit code of a value in `[-1, 1]`.
pub fn to_u8(v: f32) -> u8 {
    (((v as f64 + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

pub fn from_u8(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// PNG bytes of a `[1|3, H, W]` image with values in `[-1, 1]` (clipped).
pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Contract(format!("PNG needs 1 or 3 channels, got {c}"))),
    };
    let d = img.data();
    let mut pixels = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            pixels.push(to_u8(d[ch * h * w + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc
            .write_header()
            .map_err(|e| Error::Contract(format!("png header: {e}")))?;
        wr.write_image_data(&pixels)
            .map_err(|e| Error::Contract(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

/// Decodes an 8-bit gray / gray-alpha / RGB / RGBA PNG into `[C, H, W]`
/// with `C ∈ {1, 3}` and values in `[-1, 1]`; alpha is dropped.
pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |e: png::DecodingError| Error::format(path, format!("png: {e}"));
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::format(path, format!("unsupported PNG colour type {other:?}"))),
    };
    let mut data = vec![0f32; c * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for ch in 0..c {
                data[ch * h * w + y * w + x] = from_u8(row[x * stride + ch]);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

/// Reads a tensor container when the extension is `f32t`, a PNG otherwise.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    if path.extension().is_some_and(|e| e == TENSOR_EXT) {
        let t = read_tensor(path)?;
        t.dims3().map_err(|_| Error::format(path, format!("expected [C,H,W], got {:?}", t.shape())))?;
        Ok(t)
    } else {
        read_png(path)
    }
}

/// `path` with its extension replaced by the sidecar extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension(TENSOR_EXT)
}
