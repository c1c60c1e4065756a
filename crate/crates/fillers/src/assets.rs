//! Asset file format.
//!
//! Magic `RPMA`, then little-endian u32 fields (version=1, count, height,
//! width), then count*height*width bytes, one unsigned byte per pixel
//! (0-255, mapped to [0,1] by /255). Explicitly little-endian so the bytes
//! are identical regardless of host endianness.

use crate::{FillerBank, FillerError, Result, BANK_SIZE, IMAGE_PIXELS, IMAGE_SIDE};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RPMA";
const VERSION: u32 = 1;

pub fn write_assets(images: &[Vec<f32>], path: &Path) -> Result<()> {
    if images.len() != BANK_SIZE {
        return Err(FillerError::BadAssets(format!(
            "asset banks hold exactly {BANK_SIZE} images, got {}",
            images.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    for field in [VERSION, BANK_SIZE as u32, IMAGE_SIDE as u32, IMAGE_SIDE as u32] {
        f.write_all(&field.to_le_bytes())?;
    }
    for img in images {
        if img.len() != IMAGE_PIXELS {
            return Err(FillerError::BadAssets("image with wrong pixel count".into()));
        }
        let bytes: Vec<u8> = img
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_assets(path: &Path) -> Result<FillerBank> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| FillerError::BadAssets("file shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(FillerError::BadAssets(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut fields = [0u32; 4];
    for field in fields.iter_mut() {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf)
            .map_err(|_| FillerError::BadAssets("truncated header".into()))?;
        *field = u32::from_le_bytes(buf);
    }
    let [version, count, height, width] = fields;
    if version != VERSION {
        return Err(FillerError::BadAssets(format!(
            "unsupported version {version}"
        )));
    }
    if count as usize != BANK_SIZE {
        return Err(FillerError::BadAssets(format!(
            "bank declares {count} images, expected {BANK_SIZE}"
        )));
    }
    if height as usize != IMAGE_SIDE || width as usize != IMAGE_SIDE {
        return Err(FillerError::BadAssets(format!(
            "bank declares {height}x{width} images, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }
    let expected = BANK_SIZE * IMAGE_PIXELS;
    let mut payload = Vec::with_capacity(expected);
    f.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(FillerError::BadAssets(format!(
            "payload holds {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    let images: Vec<Vec<f32>> = payload
        .chunks_exact(IMAGE_PIXELS)
        .map(|chunk| chunk.iter().map(|&b| b as f32 / 255.0).collect())
        .collect();
    FillerBank::image(images)
}
