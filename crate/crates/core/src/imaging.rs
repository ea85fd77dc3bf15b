//! Image loading, binarization, connected components, and the per-region
//! statistics that drive pair generation.
//!
//! Intensities are kept as `f64` in `[0, 1]` throughout; binarization marks
//! ink (dark) pixels as foreground.

use std::path::Path;

use image::DynamicImage;
use ndarray::{Array2, ArrayView2, s};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum component area in pixels. Suppresses salt noise that would
/// otherwise distort the average height/width statistics.
pub const DEFAULT_MIN_AREA: usize = 4;

/// A grayscale page image with intensities in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DocumentImage {
    pixels: Array2<f64>,
    source_id: String,
}

impl DocumentImage {
    /// Wraps an intensity grid. Fails on empty dimensions or out-of-range values.
    pub fn new(pixels: Array2<f64>, source_id: impl Into<String>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if w == 0 || h == 0 {
            return Err(Error::ImageFormat(format!(
                "zero-dimension image ({w}x{h})"
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ImageFormat(
                "intensity outside [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Row-major intensity grid, shape `(height, width)`.
    pub fn pixels(&self) -> ArrayView2<'_, f64> {
        self.pixels.view()
    }
}

/// Foreground mask of a document image (true = ink).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    mask: Array2<bool>,
}

impl BinaryImage {
    pub fn from_mask(mask: Array2<bool>) -> Self {
        Self { mask }
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn mask(&self) -> ArrayView2<'_, bool> {
        self.mask.view()
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Axis-aligned bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One maximal 8-connected set of foreground pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectedComponent {
    pub bbox: BBox,
    pub area: usize,
    pub centroid: (f64, f64),
}

/// Average component geometry plus raw ink count for one region.
///
/// `avg_height`/`avg_width` are the arithmetic means of the component bounding
/// boxes; `foreground_count` always counts raw foreground pixels, even when no
/// component survives the `min_area` filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub avg_height: f64,
    pub avg_width: f64,
    pub component_count: usize,
    pub foreground_count: usize,
}

/// Square crop location: top-left corner plus side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PatchGeometry {
    pub fn new(x: usize, y: usize, size: usize) -> Self {
        Self { x, y, size }
    }

    /// Checks that the patch rectangle lies fully inside a `width`x`height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Bounds("patch size must be positive".to_string()));
        }
        if self.x + self.size > width || self.y + self.size > height {
            return Err(Error::Bounds(format!(
                "patch ({}, {}) size {} exceeds {}x{} image",
                self.x, self.y, self.size, width, height
            )));
        }
        Ok(())
    }
}

/// A square intensity crop, together with where it came from.
#[derive(Debug, Clone)]
pub struct Patch {
    pub pixels: Array2<f64>,
    pub source_id: String,
    pub geometry: PatchGeometry,
}

/// Loads a raster image (PNG/TIFF/JPEG) as grayscale intensities in `[0, 1]`.
///
/// Color inputs are reduced with Rec. 601 luminance (0.299 R + 0.587 G + 0.114 B);
/// grayscale inputs are scaled directly.
pub fn load_image(path: impl AsRef<Path>) -> Result<DocumentImage> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageDecode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    document_from_dynamic(dynimg, source_id)
}

pub(crate) fn document_from_dynamic(
    dynimg: DynamicImage,
    source_id: String,
) -> Result<DocumentImage> {
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ImageFormat(format!(
            "zero-dimension image ({w}x{h})"
        )));
    }
    let mut pixels = Array2::<f64>::zeros((h, w));
    match dynimg {
        DynamicImage::ImageLuma8(img) => {
            for (x, y, p) in img.enumerate_pixels() {
                pixels[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
        }
        DynamicImage::ImageLumaA8(img) => {
            for (x, y, p) in img.enumerate_pixels() {
                pixels[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
        }
        DynamicImage::ImageLuma16(img) => {
            for (x, y, p) in img.enumerate_pixels() {
                pixels[[y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
            }
        }
        other => {
            let rgb = other.to_rgb32f();
            for (x, y, p) in rgb.enumerate_pixels() {
                let [r, g, b] = p.0;
                let v = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                pixels[[y as usize, x as usize]] = v.clamp(0.0, 1.0);
            }
        }
    }
    DocumentImage::new(pixels, source_id)
}

/// Binarization backend selector. Otsu is the default; Sauvola is available
/// for badly degraded scans with uneven illumination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BinarizationMethod {
    Otsu,
    Sauvola { window: usize, k: f64 },
}

impl Default for BinarizationMethod {
    fn default() -> Self {
        BinarizationMethod::Otsu
    }
}

const OTSU_BINS: usize = 256;

fn intensity_bin(v: f64) -> usize {
    ((v * 255.0).round() as usize).min(OTSU_BINS - 1)
}

/// Picks the split index `t` (1..=255) maximizing between-class variance over a
/// 256-bin histogram. Pixels in bins `< t` form the lower class. Returns `None`
/// when every split has zero between-class variance (constant input).
pub(crate) fn otsu_bin_index(hist: &[f64; OTSU_BINS]) -> Option<usize> {
    let total: f64 = hist.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let weighted_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &c)| b as f64 * c)
        .sum();
    let mut best: Option<(usize, f64)> = None;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 1..OTSU_BINS {
        w0 += hist[t - 1];
        sum0 += (t - 1) as f64 * hist[t - 1];
        let w1 = total - w0;
        if w0 <= 0.0 || w1 <= 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (weighted_total - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.map_or(0.0, |(_, v)| v) {
            best = Some((t, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Global Otsu threshold of an image. `None` means the histogram is degenerate
/// (constant image) and nothing should be marked foreground.
///
/// Foreground is `intensity < threshold`, so ink must be darker than paper.
pub fn otsu_threshold(img: &DocumentImage) -> Option<f64> {
    let mut hist = [0.0f64; OTSU_BINS];
    for &v in img.pixels().iter() {
        hist[intensity_bin(v)] += 1.0;
    }
    otsu_bin_index(&hist).map(|t| (t as f64 - 0.5) / 255.0)
}

/// Otsu split over arbitrary real values (used for principal-component maps).
/// Values are min-max binned into 256 levels; the returned threshold `T`
/// assigns the lower mode to `v < T`. `None` for constant input.
pub(crate) fn otsu_split_values<'a>(values: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let values: Vec<f64> = values.copied().collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() || max <= min {
        return None;
    }
    let scale = 255.0 / (max - min);
    let mut hist = [0.0f64; OTSU_BINS];
    for v in &values {
        let b = (((v - min) * scale).round() as usize).min(OTSU_BINS - 1);
        hist[b] += 1.0;
    }
    otsu_bin_index(&hist).map(|t| min + (t as f64 - 0.5) / scale)
}

/// Thresholds a page into an ink mask with global Otsu.
///
/// A constant-intensity page yields an all-background mask rather than an error.
pub fn binarize(img: &DocumentImage) -> BinaryImage {
    binarize_with(img, BinarizationMethod::Otsu)
}

pub fn binarize_with(img: &DocumentImage, method: BinarizationMethod) -> BinaryImage {
    match method {
        BinarizationMethod::Otsu => {
            let mask = match otsu_threshold(img) {
                Some(t) => img.pixels().mapv(|v| v < t),
                None => Array2::from_elem((img.height(), img.width()), false),
            };
            BinaryImage::from_mask(mask)
        }
        BinarizationMethod::Sauvola { window, k } => binarize_sauvola(img, window, k),
    }
}

/// Sauvola local thresholding: T = m * (1 + k * (s / R - 1)) with R = 0.5 on
/// the unit intensity scale.
fn binarize_sauvola(img: &DocumentImage, window: usize, k: f64) -> BinaryImage {
    let (h, w) = (img.height(), img.width());
    let px = img.pixels();
    // integral images of v and v^2, one row/col of zero padding
    let mut int = Array2::<f64>::zeros((h + 1, w + 1));
    let mut int2 = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        let mut row2 = 0.0;
        for x in 0..w {
            let v = px[[y, x]];
            row += v;
            row2 += v * v;
            int[[y + 1, x + 1]] = int[[y, x + 1]] + row;
            int2[[y + 1, x + 1]] = int2[[y, x + 1]] + row2;
        }
    }
    let r = window.max(3) / 2;
    let mut mask = Array2::from_elem((h, w), false);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let sum = int[[y1, x1]] - int[[y0, x1]] - int[[y1, x0]] + int[[y0, x0]];
            let sum2 = int2[[y1, x1]] - int2[[y0, x1]] - int2[[y1, x0]] + int2[[y0, x0]];
            let mean = sum / n;
            let var = (sum2 / n - mean * mean).max(0.0);
            let t = mean * (1.0 + k * (var.sqrt() / 0.5 - 1.0));
            mask[[y, x]] = px[[y, x]] < t;
        }
    }
    BinaryImage::from_mask(mask)
}

/// Labels 8-connected foreground components, dropping those with
/// `area < min_area`. Components are reported in row-major discovery order.
pub fn connected_components(bin: &BinaryImage, min_area: usize) -> Vec<ConnectedComponent> {
    components_on_view(bin.mask(), min_area)
}

pub(crate) fn components_on_view(
    mask: ArrayView2<'_, bool>,
    min_area: usize,
) -> Vec<ConnectedComponent> {
    let (h, w) = mask.dim();
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[[sy, sx]] || visited[sy * w + sx] {
                continue;
            }
            visited[sy * w + sx] = true;
            stack.push((sx, sy));
            let (mut min_x, mut max_x, mut min_y, mut max_y) = (sx, sx, sy, sy);
            let mut area = 0usize;
            let (mut cx, mut cy) = (0.0f64, 0.0f64);
            while let Some((x, y)) = stack.pop() {
                area += 1;
                cx += x as f64;
                cy += y as f64;
                min_x = min_x.min(x);
                max_x = max_x.max(x);
                min_y = min_y.min(y);
                max_y = max_y.max(y);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask[[ny, nx]] && !visited[ny * w + nx] {
                            visited[ny * w + nx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if area >= min_area {
                components.push(ConnectedComponent {
                    bbox: BBox {
                        x: min_x,
                        y: min_y,
                        w: max_x - min_x + 1,
                        h: max_y - min_y + 1,
                    },
                    area,
                    centroid: (cx / area as f64, cy / area as f64),
                });
            }
        }
    }
    components
}

/// Component statistics of one square region of the mask.
///
/// Components are computed on the cropped region only, so anything clipped at
/// the patch border counts with its clipped extent. Panics if the region falls
/// outside the mask.
pub fn component_stats(
    bin: &BinaryImage,
    region: PatchGeometry,
    min_area: usize,
) -> ComponentStats {
    let view = bin.mask().slice_move(s![
        region.y..region.y + region.size,
        region.x..region.x + region.size
    ]);
    let foreground_count = view.iter().filter(|&&m| m).count();
    let comps = components_on_view(view, min_area);
    if comps.is_empty() {
        return ComponentStats {
            avg_height: 0.0,
            avg_width: 0.0,
            component_count: 0,
            foreground_count,
        };
    }
    let n = comps.len() as f64;
    ComponentStats {
        avg_height: comps.iter().map(|c| c.bbox.h as f64).sum::<f64>() / n,
        avg_width: comps.iter().map(|c| c.bbox.w as f64).sum::<f64>() / n,
        component_count: comps.len(),
        foreground_count,
    }
}

/// Suggests a patch side length as four times the average component height
/// pooled over all documents.
pub fn estimate_patch_size(docs: &[DocumentImage], min_area: usize) -> Result<usize> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for doc in docs {
        let bin = binarize(doc);
        for comp in connected_components(&bin, min_area) {
            total += comp.bbox.h as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config(
            "no connected components found in any document; pass an explicit patch size"
                .to_string(),
        ));
    }
    Ok((4.0 * total / count as f64).round() as usize)
}

/// Copies the `size`x`size` intensity sub-grid at `geom` out of the image.
pub fn crop_patch(img: &DocumentImage, geom: PatchGeometry) -> Result<Patch> {
    geom.validate(img.width(), img.height())?;
    let pixels = img
        .pixels()
        .slice(s![geom.y..geom.y + geom.size, geom.x..geom.x + geom.size])
        .to_owned();
    Ok(Patch {
        pixels,
        source_id: img.source_id().to_string(),
        geometry: geom,
    })
}
