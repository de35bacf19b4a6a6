//! File formats: checkpoints, images, masks, and key=value manifests.
//!
//! Checkpoint layout (version 1, all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "CTCK"
//! version u32      1
//! count   u32      number of parameter tensors
//! entry   repeated, sorted by name:
//!   name_len u32, name utf-8 bytes,
//!   ndim u32, dims u32 * ndim,
//!   data f64 * product(dims)
//! ```
//!
//! Images are written as binary PPM (P6) and masks as binary PGM (P5);
//! reading goes through the `image` crate and accepts PNG as well.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{ColorImage, GrayMap, Mask};
use crate::error::{Error, Result};
use crate::params::ParamSet;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CTCK";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::data(format!("truncated checkpoint {}", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };

    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::data(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32_at(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_at(&mut pos)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::data("checkpoint name is not utf-8".to_string()))?;
        let ndim = u32_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        params.insert(name, &shape, data);
    }
    Ok(params)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(path: &Path, image: &ColorImage) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", image.w, image.h).into_bytes();
    let hw = image.h * image.w;
    for i in 0..hw {
        for c in 0..3 {
            buf.push(to_byte(image.data[c * hw + i]));
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5), 8 bits.
pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    buf.extend(mask.data().iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5) of a [0,1] float map.
pub fn write_pgm_gray(path: &Path, map: &GrayMap) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    buf.extend(map.data.iter().map(|&v| to_byte(v)));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Write a [0,1] float map as an 8-bit grayscale file; PNG when the path
/// ends in .png, PGM otherwise.
pub fn write_gray(path: &Path, map: &GrayMap) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let bytes: Vec<u8> = map.data.iter().map(|&v| to_byte(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            map.w as u32,
            map.h as u32,
            image::ColorType::L8,
        )
        .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
    } else {
        write_pgm_gray(path, map)
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// Any 8-bit image as RGB in [0,1].
pub fn read_color(path: &Path) -> Result<ColorImage> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    ColorImage::new(h, w, data)
}

/// 8-bit grayscale prediction map scaled to [0,1].
pub fn read_gray(path: &Path) -> Result<GrayMap> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    GrayMap::new(h, w, data)
}

/// 8-bit grayscale mask, binarized at 128.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::data(format!("{}: empty image", path.display())));
    }
    let data = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    Mask::new(h, w, data)
}

/// Plain-text key=value file ('#' starts a comment). Later keys win.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::data(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
