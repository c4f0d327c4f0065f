//! PNG/JPEG images, masks and the binary tensor dump.
//!
//! Images are `[3, H, W]` tensors in `[0, 1]`. Mask files are grayscale:
//! 255 marks context to keep, 0 marks the region to inpaint; anything at or
//! above 128 counts as context.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use digress_core::masking::InpaintMask;
use digress_core::Tensor;
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{AppError, Result};

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => AppError::input(path, io),
        other => AppError::format(path, other),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = *t.shape() else {
        return Err(AppError::Usage(format!("expected a [3, h, w] image, got {:?}", t.shape())));
    };
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + c] = to_u8(d[c * h * w + p]);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape"))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds pixels to the 8-bit grid, as writing and re-reading a PNG would.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    ensure_parent(path)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| AppError::output(path, std::io::Error::other(e)))
}

pub fn read_mask(path: &Path, factor: usize) -> Result<InpaintMask> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => AppError::input(path, io),
        other => AppError::format(path, other),
    })?;
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let px = Tensor::from_fn(&[h, w], |i| if g.as_raw()[i] >= 128 { 1.0 } else { 0.0 });
    InpaintMask::from_pixels(&px, factor).map_err(|e| AppError::format(path, e))
}

pub fn write_mask(path: &Path, mask: &InpaintMask) -> Result<()> {
    let grid = mask.pixel_grid();
    let [_, h, w] = *grid.shape() else { unreachable!("pixel grid is [1, h, w]") };
    let raw = grid.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    ensure_parent(path)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| AppError::output(path, std::io::Error::other(e)))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::output(dir, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| AppError::output(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AppError::input(path, e))
}

const MAGIC: &[u8; 8] = b"DGTENS01";

/// Named tensors as little-endian binary:
/// magic, count (u64), then per tensor: name length (u64), UTF-8 name,
/// rank (u64), dims (u64 each), data (f64 each).
pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| "truncated header")?;
    if &magic != MAGIC {
        return Err("not a tensor dump".into());
    }
    let u64_at = |r: &mut &[u8]| -> std::result::Result<u64, String> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| "truncated tensor dump".to_string())?;
        Ok(u64::from_le_bytes(b))
    };
    let n = u64_at(&mut r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = u64_at(&mut r)? as usize;
        if len > r.len() {
            return Err("truncated tensor name".into());
        }
        let name = std::str::from_utf8(&r[..len]).map_err(|_| "tensor name is not UTF-8")?.to_string();
        r = &r[len..];
        let rank = u64_at(&mut r)? as usize;
        if rank > 8 {
            return Err(format!("tensor {name}: rank {rank} too large"));
        }
        let shape = (0..rank).map(|_| u64_at(&mut r).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        if count.checked_mul(8).is_none_or(|b| b > r.len()) {
            return Err(format!("tensor {name}: truncated data"));
        }
        let data = r[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        r = &r[count * 8..];
        out.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if !r.is_empty() {
        return Err("trailing bytes after tensor dump".into());
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_bytes(path, &encode_tensors(tensors))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = read_bytes(path)?;
    decode_tensors(&bytes).map_err(|e| AppError::format(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Writes JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable value");
    s.write_all(b"\n").expect("write to vec");
    write_bytes(path, &s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_dump_round_trip() {
        let t = vec![
            ("a".to_string(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0)),
            ("b.c".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
        ];
        let bytes = encode_tensors(&t);
        assert_eq!(decode_tensors(&bytes).unwrap(), t);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tensors(b"nope").is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64 / 11.3);
        let q = quantize(&t);
        assert_eq!(quantize(&q), q);
        assert!(q.sub(&t).unwrap().max_abs() <= 0.5 / 255.0 + 1e-12);
    }
}
