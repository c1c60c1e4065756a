//! Glyph bank construction: font rasterization and the procedural fallback.

use crate::{
    assets::write_assets, FillerBank, FillerError, Result, BANK_SIZE, IMAGE_PIXELS, IMAGE_SIDE,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Default bank: 100 visually distinct glyphs (geometric shapes, arrows,
/// mathematical operators, miscellaneous symbols), all covered by common
/// sans fonts such as DejaVu Sans.
pub const DEFAULT_CODEPOINTS: [u32; 100] = [
    0x25A0, 0x25A1, 0x25B2, 0x25B3, 0x25BC, 0x25BD, 0x25C6, 0x25C7, 0x25CF, 0x25CB, //
    0x25D0, 0x25D1, 0x25E2, 0x25E3, 0x25E4, 0x25E5, 0x25C9, 0x25CE, 0x25A3, 0x25C4, //
    0x2190, 0x2191, 0x2192, 0x2193, 0x2194, 0x2195, 0x2196, 0x2197, 0x2198, 0x2199, //
    0x21D0, 0x21D1, 0x21D2, 0x21D3, 0x21D4, 0x21A9, 0x21AA, 0x21BB, 0x21C4, 0x21C6, //
    0x2200, 0x2202, 0x2203, 0x2205, 0x2207, 0x2208, 0x220B, 0x220F, 0x2211, 0x221A, //
    0x221D, 0x221E, 0x2220, 0x2227, 0x2228, 0x2229, 0x222A, 0x222B, 0x222E, 0x2234, //
    0x2248, 0x2260, 0x2261, 0x2264, 0x2265, 0x226A, 0x226B, 0x2282, 0x2283, 0x2295, //
    0x2296, 0x2297, 0x2298, 0x2299, 0x22A2, 0x22A5, 0x22C8, 0x2240, 0x2243, 0x2250, //
    0x2605, 0x2606, 0x260E, 0x2618, 0x261B, 0x262F, 0x2639, 0x263A, 0x2660, 0x2663, //
    0x2665, 0x2666, 0x266A, 0x266B, 0x266F, 0x2691, 0x2693, 0x26A0, 0x2702, 0x2706,
];

#[derive(Clone, Debug)]
pub enum GlyphSource {
    /// Rasterize codepoints from a TTF/OTF file.
    Font { path: std::path::PathBuf },
    /// Deterministic procedural patterns; no font required.
    Procedural { seed: u64 },
}

/// Rasterize a 100-glyph bank into an asset file.
///
/// With a font source, each codepoint is rendered anti-aliased, centered in
/// a 32x32 raster and min-max normalized to [0,1]. The procedural source
/// ignores `codepoints` and generates patterns from the seed.
pub fn rasterize_glyph_assets(
    codepoints: &[u32],
    source: &GlyphSource,
    out: &Path,
) -> Result<FillerBank> {
    let bank = match source {
        GlyphSource::Font { path } => {
            let images = rasterize_font_bank(codepoints, path)?;
            FillerBank::image(images)?
        }
        GlyphSource::Procedural { seed } => procedural_bank(*seed),
    };
    let images = match &bank {
        FillerBank::Image { images } => images,
        _ => unreachable!(),
    };
    write_assets(images, out)?;
    Ok(bank)
}

fn rasterize_font_bank(codepoints: &[u32], font_path: &Path) -> Result<Vec<Vec<f32>>> {
    if codepoints.len() != BANK_SIZE {
        return Err(FillerError::WrongCodepointCount {
            expected: BANK_SIZE,
            got: codepoints.len(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for &cp in codepoints {
        if !seen.insert(cp) {
            return Err(FillerError::DuplicateCodepoint(cp));
        }
    }
    let bytes = std::fs::read(font_path)?;
    let font = fontdue::Font::from_bytes(bytes, fontdue::FontSettings::default())
        .map_err(|e| FillerError::Font(e.to_string()))?;

    let mut images = Vec::with_capacity(BANK_SIZE);
    for &cp in codepoints {
        let ch = char::from_u32(cp).ok_or(FillerError::UnrenderableCodepoint(cp))?;
        // Render at 26 px so ascenders/descenders fit the 32 px box.
        let (metrics, bitmap) = font.rasterize(ch, 26.0);
        if metrics.width == 0 || metrics.height == 0 || bitmap.iter().all(|&b| b == 0) {
            return Err(FillerError::UnrenderableCodepoint(cp));
        }
        if metrics.width > IMAGE_SIDE || metrics.height > IMAGE_SIDE {
            // Retry smaller rather than clipping.
            let (m2, b2) = font.rasterize(ch, 20.0);
            if m2.width == 0 || m2.width > IMAGE_SIDE || m2.height > IMAGE_SIDE {
                return Err(FillerError::UnrenderableCodepoint(cp));
            }
            images.push(center_and_normalize(&b2, m2.width, m2.height));
        } else {
            images.push(center_and_normalize(&bitmap, metrics.width, metrics.height));
        }
    }
    Ok(images)
}

fn center_and_normalize(coverage: &[u8], w: usize, h: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; IMAGE_PIXELS];
    let x0 = (IMAGE_SIDE - w) / 2;
    let y0 = (IMAGE_SIDE - h) / 2;
    for y in 0..h {
        for x in 0..w {
            img[(y0 + y) * IMAGE_SIDE + x0 + x] = coverage[y * w + x] as f32;
        }
    }
    let max = img.iter().cloned().fold(0.0f32, f32::max);
    let min = img.iter().cloned().fold(f32::INFINITY, f32::min);
    if max > min {
        for p in img.iter_mut() {
            *p = (*p - min) / (max - min);
        }
    }
    img
}

/// Deterministic fallback bank: 100 pairwise-distinct blob patterns.
///
/// Each pattern is an 8x8 random bit grid (mass kept between 20 and 44 set
/// cells), upsampled 4x and box-blurred once for soft edges, then min-max
/// normalized and quantized to the asset format's u8 levels. Patterns whose
/// MSE distance to an earlier one falls under 0.02 are redrawn.
pub fn procedural_bank(seed: u64) -> FillerBank {
    const COARSE: usize = 8;
    const SCALE: usize = IMAGE_SIDE / COARSE;
    const MIN_MSE: f64 = 0.02;

    let mut images: Vec<Vec<f32>> = Vec::with_capacity(BANK_SIZE);
    for idx in 0..BANK_SIZE as u64 {
        let mut retry = 0u64;
        loop {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ retry);
            let mut grid = [false; COARSE * COARSE];
            let mut mass = 0;
            for cell in grid.iter_mut() {
                *cell = rng.gen_bool(0.5);
                mass += *cell as usize;
            }
            if !(20..=44).contains(&mass) {
                retry += 1;
                continue;
            }
            // nearest upsample
            let mut up = vec![0.0f32; IMAGE_PIXELS];
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    if grid[(y / SCALE) * COARSE + x / SCALE] {
                        up[y * IMAGE_SIDE + x] = 1.0;
                    }
                }
            }
            // one 3x3 box blur pass
            let mut blurred = vec![0.0f32; IMAGE_PIXELS];
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let mut acc = 0.0f32;
                    let mut count = 0.0f32;
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let ny = y as i32 + dy;
                            let nx = x as i32 + dx;
                            if (0..IMAGE_SIDE as i32).contains(&ny)
                                && (0..IMAGE_SIDE as i32).contains(&nx)
                            {
                                acc += up[ny as usize * IMAGE_SIDE + nx as usize];
                                count += 1.0;
                            }
                        }
                    }
                    blurred[y * IMAGE_SIDE + x] = acc / count;
                }
            }
            let max = blurred.iter().cloned().fold(0.0f32, f32::max);
            let min = blurred.iter().cloned().fold(f32::INFINITY, f32::min);
            for p in blurred.iter_mut() {
                *p = if max > min { (*p - min) / (max - min) } else { 0.0 };
                // quantize to the asset format's representable levels
                *p = (*p * 255.0).round() / 255.0;
            }
            let distinct = images.iter().all(|prev| {
                let mse: f64 = prev
                    .iter()
                    .zip(blurred.iter())
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / IMAGE_PIXELS as f64;
                mse >= MIN_MSE
            });
            if distinct {
                images.push(blurred);
                break;
            }
            retry += 1;
        }
    }
    FillerBank::image(images).expect("procedural bank satisfies invariants by construction")
}
