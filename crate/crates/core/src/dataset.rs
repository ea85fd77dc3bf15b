//! Dataset directory conventions and label I/O.
//!
//! A dataset root holds `images/<id>.<ext>` rasters and optional
//! `labels/<id>.png` ground truth, where the label PNG is indexed with
//! 0 = background, 1 = main text, 2 = side text.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::imaging::{load_image, DocumentImage};

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";

/// Display palette for indexed label PNGs: background, main text, side text.
pub const LABEL_PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [0, 180, 0], [220, 40, 40]];

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

/// In-memory set of documents keyed by source id.
#[derive(Debug, Clone, Default)]
pub struct DocumentSet {
    map: BTreeMap<String, DocumentImage>,
}

impl DocumentSet {
    pub fn from_docs(docs: impl IntoIterator<Item = DocumentImage>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for doc in docs {
            let id = doc.source_id().to_string();
            if map.insert(id.clone(), doc).is_some() {
                return Err(Error::Config(format!("duplicate document id {id}")));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, id: &str) -> Option<&DocumentImage> {
        self.map.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&DocumentImage> {
        self.get(id)
            .ok_or_else(|| Error::Config(format!("unknown document id {id}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &DocumentImage> {
        self.map.values()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Finds `images/<id>.<ext>` under the dataset root.
pub fn image_path(root: &Path, id: &str) -> Result<PathBuf> {
    for ext in IMAGE_EXTENSIONS {
        let p = root.join(IMAGES_DIR).join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "no image for id {id} under {}",
        root.join(IMAGES_DIR).display()
    )))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join(LABELS_DIR).join(format!("{id}.png"))
}

/// Ids of every raster in `images/`, sorted.
pub fn list_document_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(IMAGES_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if is_image {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads the listed documents from the dataset root.
pub fn load_documents(root: &Path, ids: &[String]) -> Result<Vec<DocumentImage>> {
    ids.iter()
        .map(|id| load_image(image_path(root, id)?))
        .collect()
}

/// Writes a grayscale page as an 8-bit PNG under `images/`.
pub fn write_document(root: &Path, doc: &DocumentImage) -> Result<PathBuf> {
    let dir = root.join(IMAGES_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}.png", doc.source_id()));
    let mut img = image::GrayImage::new(doc.width() as u32, doc.height() as u32);
    for ((y, x), &v) in doc.pixels().indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
    }
    img.save(&path).map_err(|e| Error::ImageDecode {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok(path)
}

/// Writes per-pixel labels as an indexed PNG under `labels/`.
pub fn write_labels(root: &Path, id: &str, labels: ArrayView2<'_, u8>) -> Result<PathBuf> {
    let dir = root.join(LABELS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{id}.png"));
    write_indexed_png(&path, labels)?;
    Ok(path)
}

/// Writes an indexed 8-bit PNG with the label palette.
pub fn write_indexed_png(path: &Path, labels: ArrayView2<'_, u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = LABEL_PALETTE.iter().flatten().copied().collect();
    encoder.set_palette(palette);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::ImageFormat(format!("png header for {}: {e}", path.display())))?;
    let data: Vec<u8> = labels.iter().copied().collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::ImageFormat(format!("png data for {}: {e}", path.display())))?;
    Ok(())
}

/// Reads a label PNG back as raw index values. Accepts 8-bit indexed or
/// 8-bit grayscale files whose pixel values are the labels themselves.
pub fn read_indexed_png(path: &Path) -> Result<Array2<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::ImageFormat(format!("png info for {}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::ImageFormat(format!("png frame for {}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::ImageFormat(format!(
            "label png {} must be 8-bit, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => {
            return Err(Error::ImageFormat(format!(
                "label png {} must be indexed or grayscale, got {other:?}",
                path.display()
            )));
        }
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    Array2::from_shape_vec((h, w), buf)
        .map_err(|e| Error::ImageFormat(format!("label png {}: {e}", path.display())))
}

/// Reads `labels/<id>.png` for a document.
pub fn load_labels(root: &Path, id: &str) -> Result<Array2<u8>> {
    read_indexed_png(&label_path(root, id))
}
