//! Synthetic manuscript pages with exact ground truth: a main block of large
//! glyph blobs and margin blocks of small ones, on a noisy paper background.
//!
//! Glyphs are filled ellipses, not script; the segmentation method only
//! consumes component statistics and texture, so blobs exercise the whole
//! pipeline while keeping the generator self-contained.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, DocumentImage};
use crate::segment::PageSegmentation;
use crate::Prng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub page_width: usize,
    pub page_height: usize,
    pub main_block: BBox,
    pub side_blocks: Vec<BBox>,
    pub main_glyph_height: usize,
    pub side_glyph_height: usize,
    /// Mean horizontal gap between glyphs, as a fraction of glyph height.
    pub glyph_spacing: f64,
    /// Line pitch as a multiple of glyph height.
    pub line_spacing_factor: f64,
    pub ink_min: f64,
    pub ink_max: f64,
    pub background_level: f64,
    /// Amplitude of uniform per-pixel background noise.
    pub noise: f64,
    /// Per-page random shift applied to each block, for corpus variety.
    pub geometry_jitter: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            page_width: 640,
            page_height: 880,
            main_block: BBox { x: 176, y: 96, w: 368, h: 688 },
            side_blocks: vec![BBox { x: 32, y: 128, w: 112, h: 560 }],
            main_glyph_height: 28,
            side_glyph_height: 10,
            glyph_spacing: 0.35,
            line_spacing_factor: 1.6,
            ink_min: 0.05,
            ink_max: 0.35,
            background_level: 0.92,
            noise: 0.03,
            geometry_jitter: 12,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.main_glyph_height <= self.side_glyph_height {
            return Err(Error::Config(format!(
                "main glyphs ({}) must be taller than side glyphs ({})",
                self.main_glyph_height, self.side_glyph_height
            )));
        }
        if self.side_glyph_height < 4 {
            return Err(Error::Config("side glyphs must be at least 4px".to_string()));
        }
        if !(0.0 <= self.ink_min && self.ink_min < self.ink_max && self.ink_max < 0.5) {
            return Err(Error::Config(format!(
                "ink range [{}, {}] must sit inside [0, 0.5)",
                self.ink_min, self.ink_max
            )));
        }
        if self.background_level < 0.6 || self.background_level > 1.0 {
            return Err(Error::Config(
                "background level must be in [0.6, 1]".to_string(),
            ));
        }
        let j = self.geometry_jitter;
        let blocks = self.all_blocks();
        for (i, b) in blocks.iter().enumerate() {
            if b.x < j
                || b.y < j
                || b.x + b.w + j > self.page_width
                || b.y + b.h + j > self.page_height
            {
                return Err(Error::Config(format!(
                    "block {i} leaves the page under jitter {j}"
                )));
            }
            for (k, other) in blocks.iter().enumerate().skip(i + 1) {
                // expanded by jitter on both sides, the blocks must stay apart
                let sep_x = b.x + b.w + 2 * j <= other.x
                    || other.x + other.w + 2 * j <= b.x;
                let sep_y = b.y + b.h + 2 * j <= other.y
                    || other.y + other.h + 2 * j <= b.y;
                if !(sep_x || sep_y) {
                    return Err(Error::Config(format!(
                        "blocks {i} and {k} overlap (or may under jitter {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn all_blocks(&self) -> Vec<BBox> {
        let mut v = vec![self.main_block];
        v.extend(self.side_blocks.iter().copied());
        v
    }
}

/// A generated page and its exact per-pixel ground truth.
#[derive(Debug, Clone)]
pub struct SynthPage {
    pub image: DocumentImage,
    pub labels: PageSegmentation,
}

fn jitter_block(b: BBox, j: usize, rng: &mut Prng) -> BBox {
    if j == 0 {
        return b;
    }
    let j = j as i64;
    let dx = rng.random_range(-j..=j);
    let dy = rng.random_range(-j..=j);
    BBox {
        x: (b.x as i64 + dx) as usize,
        y: (b.y as i64 + dy) as usize,
        w: b.w,
        h: b.h,
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_glyph(
    pixels: &mut Array2<f64>,
    labels: &mut Array2<u8>,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    ink: f64,
    label: u8,
    rng: &mut Prng,
) {
    let cx = x0 as f64 + w as f64 / 2.0;
    let cy = y0 as f64 + h as f64 / 2.0;
    let a = w as f64 / 2.0;
    let b = h as f64 / 2.0;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let dx = (x as f64 + 0.5 - cx) / a;
            let dy = (y as f64 + 0.5 - cy) / b;
            if dx * dx + dy * dy <= 1.0 {
                let v = (ink + rng.random_range(-0.03..0.03)).clamp(0.0, 0.45);
                pixels[[y, x]] = v;
                labels[[y, x]] = label;
            }
        }
    }
}

fn render_block(
    pixels: &mut Array2<f64>,
    labels: &mut Array2<u8>,
    block: BBox,
    glyph_h: usize,
    label: u8,
    cfg: &SynthConfig,
    rng: &mut Prng,
) {
    let pitch = ((glyph_h as f64 * cfg.line_spacing_factor).round() as usize).max(glyph_h + 4);
    let mut y = block.y;
    while y + glyph_h <= block.y + block.h {
        let mut x = block.x;
        loop {
            let gh = ((glyph_h as f64 * rng.random_range(0.85..1.15)).round() as usize)
                .clamp(3, pitch.saturating_sub(4));
            let gw = ((gh as f64 * rng.random_range(0.55..1.15)).round() as usize).max(3);
            if x + gw > block.x + block.w {
                break;
            }
            let jy_room = (block.y + block.h).saturating_sub(y + gh);
            let jy = rng.random_range(0..=2usize.min(jy_room).min(pitch - gh - 2));
            let ink = rng.random_range(cfg.ink_min..cfg.ink_max);
            draw_glyph(pixels, labels, x, y + jy, gw, gh, ink, label, rng);
            let gap_scale = rng.random_range(0.6..1.4) * cfg.glyph_spacing;
            let gap = ((gh as f64 * gap_scale).round() as usize).max(2);
            x += gw + gap;
        }
        y += pitch;
    }
}

/// Renders one page: noisy paper, the main block in large glyphs, each side
/// block in small ones. Deterministic for a given RNG state.
pub fn generate_page(cfg: &SynthConfig, id: &str, rng: &mut Prng) -> Result<SynthPage> {
    cfg.validate()?;
    let (w, h) = (cfg.page_width, cfg.page_height);
    let mut pixels = Array2::<f64>::zeros((h, w));
    for v in pixels.iter_mut() {
        *v = (cfg.background_level + rng.random_range(-cfg.noise..=cfg.noise))
            .clamp(0.0, 1.0);
    }
    let mut labels = Array2::<u8>::zeros((h, w));

    let main = jitter_block(cfg.main_block, cfg.geometry_jitter, rng);
    render_block(
        &mut pixels,
        &mut labels,
        main,
        cfg.main_glyph_height,
        1,
        cfg,
        rng,
    );
    for &side in &cfg.side_blocks {
        let side = jitter_block(side, cfg.geometry_jitter, rng);
        render_block(
            &mut pixels,
            &mut labels,
            side,
            cfg.side_glyph_height,
            2,
            cfg,
            rng,
        );
    }

    Ok(SynthPage {
        image: DocumentImage::new(pixels, id)?,
        labels: PageSegmentation::from_labels(labels)?,
    })
}

/// Generates `n_pages` pages with per-page block jitter, ids `page_000`
/// onward.
pub fn generate_corpus(cfg: &SynthConfig, n_pages: usize, rng: &mut Prng) -> Result<Vec<SynthPage>> {
    if n_pages == 0 {
        return Err(Error::Config("corpus needs at least one page".to_string()));
    }
    (0..n_pages)
        .map(|i| generate_page(cfg, &format!("page_{i:03}"), rng))
        .collect()
}

/// Writes pages under the standard dataset layout (`images/`, `labels/`).
pub fn write_corpus(root: &std::path::Path, pages: &[SynthPage]) -> Result<()> {
    for page in pages {
        crate::dataset::write_document(root, &page.image)?;
        crate::dataset::write_labels(root, page.image.source_id(), page.labels.labels())?;
    }
    Ok(())
}
