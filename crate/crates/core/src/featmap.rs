//! Dense per-page feature maps: strided sliding-window extraction followed by
//! bilinear upsampling to image resolution.
//!
//! Grid cells are anchored at window centers (`x + window/2`); positions past
//! the last full stride are covered by one extra window clamped to the image
//! edge, so no border strip goes unanalyzed.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3, ArrayView2, s};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::DocumentImage;
use crate::model::FeatureExtractor;

/// Anything that can embed a fixed-size patch into a feature vector.
pub trait PatchEmbedder: Sync {
    fn input_size(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn embed(&self, patch: ArrayView2<'_, f64>) -> Result<Array1<f64>>;
}

impl PatchEmbedder for FeatureExtractor {
    fn input_size(&self) -> usize {
        FeatureExtractor::input_size(self)
    }

    fn embedding_dim(&self) -> usize {
        FeatureExtractor::embedding_dim(self)
    }

    fn embed(&self, patch: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        FeatureExtractor::embed(self, patch)
    }
}

/// Sliding-window settings. `batch` only chunks work for parallel extraction;
/// it never changes the produced values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlidingConfig {
    pub window: usize,
    pub stride: usize,
    pub batch: usize,
}

impl Default for SlidingConfig {
    fn default() -> Self {
        Self {
            window: 200,
            stride: 50,
            batch: 64,
        }
    }
}

impl SlidingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "stride must satisfy 1 <= stride ({}) <= window ({})",
                self.stride, self.window
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Window top-left positions along one axis: every full stride step plus one
/// clamped position when the extent is not a multiple of the stride.
fn axis_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut pos: Vec<usize> = (0..=last).step_by(stride).collect();
    if *pos.last().expect("at least one window") != last {
        pos.push(last);
    }
    pos
}

/// Per-position embedding grid with enough metadata to interpolate back to
/// image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: Array3<f64>, // (grid_h, grid_w, channels)
    window: usize,
    stride: usize,
    target: (usize, usize), // source image (width, height)
}

impl FeatureMap {
    /// Wraps a grid, checking that its dimensions match the sliding geometry.
    pub fn new(
        grid: Array3<f64>,
        window: usize,
        stride: usize,
        target: (usize, usize),
    ) -> Result<Self> {
        let (tw, th) = target;
        if window == 0 || stride == 0 || stride > window || tw < window || th < window {
            return Err(Error::Config(format!(
                "invalid feature map geometry: window {window}, stride {stride}, target {tw}x{th}"
            )));
        }
        let expect_w = axis_positions(tw, window, stride).len();
        let expect_h = axis_positions(th, window, stride).len();
        let (gh, gw, _) = grid.dim();
        if (gh, gw) != (expect_h, expect_w) {
            return Err(Error::Shape(format!(
                "grid {gw}x{gh} does not match expected {expect_w}x{expect_h} for target {tw}x{th}"
            )));
        }
        Ok(Self {
            grid,
            window,
            stride,
            target,
        })
    }

    pub fn grid(&self) -> &Array3<f64> {
        &self.grid
    }

    /// (grid_w, grid_h)
    pub fn grid_dims(&self) -> (usize, usize) {
        let (h, w, _) = self.grid.dim();
        (w, h)
    }

    pub fn channels(&self) -> usize {
        self.grid.dim().2
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Source image (width, height); also the size of the densified map.
    pub fn target_size(&self) -> (usize, usize) {
        self.target
    }

    pub fn positions_x(&self) -> Vec<usize> {
        axis_positions(self.target.0, self.window, self.stride)
    }

    pub fn positions_y(&self) -> Vec<usize> {
        axis_positions(self.target.1, self.window, self.stride)
    }

    /// Anchor coordinates: window top-left plus half a window.
    pub fn centers_x(&self) -> Vec<f64> {
        self.positions_x()
            .into_iter()
            .map(|p| (p + self.window / 2) as f64)
            .collect()
    }

    pub fn centers_y(&self) -> Vec<f64> {
        self.positions_y()
            .into_iter()
            .map(|p| (p + self.window / 2) as f64)
            .collect()
    }

    /// One channel as a (grid_h, grid_w) scalar view.
    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.grid.slice(s![.., .., c])
    }

    /// Bilinear sample at image coordinates; outside the anchor hull the
    /// nearest edge value applies.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) {
        let cx = self.centers_x();
        let cy = self.centers_y();
        let (kx, tx) = axis_locate(&cx, u);
        let (ky, ty) = axis_locate(&cy, v);
        blend_into(&self.grid, kx, tx, ky, ty, out);
    }

    pub fn sample_at(&self, u: f64, v: f64) -> Array1<f64> {
        let mut out = vec![0.0; self.channels()];
        self.sample_into(u, v, &mut out);
        Array1::from_vec(out)
    }

    /// Interpolates every channel to full image resolution. The result is a
    /// stride-1, window-1 map whose grid dimensions equal the source image.
    pub fn densify(&self) -> FeatureMap {
        let (w, h) = self.target;
        let c = self.channels();
        let cx = self.centers_x();
        let cy = self.centers_y();
        let x_loc: Vec<(usize, f64)> = (0..w).map(|x| axis_locate(&cx, x as f64)).collect();
        let y_loc: Vec<(usize, f64)> = (0..h).map(|y| axis_locate(&cy, y as f64)).collect();
        let mut dense = Array3::<f64>::zeros((h, w, c));
        for (y, &(ky, ty)) in y_loc.iter().enumerate() {
            for (x, &(kx, tx)) in x_loc.iter().enumerate() {
                let mut row = dense.slice_mut(s![y, x, ..]);
                blend_into(
                    &self.grid,
                    kx,
                    tx,
                    ky,
                    ty,
                    row.as_slice_mut().expect("contiguous"),
                );
            }
        }
        FeatureMap {
            grid: dense,
            window: 1,
            stride: 1,
            target: self.target,
        }
    }

    /// Serializes the map as a small header plus little-endian f64 data.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let io = |e| Error::io(path, e);
        let (gh, gw, c) = self.grid.dim();
        w.write_all(FEATMAP_MAGIC).map_err(io)?;
        w.write_all(&FEATMAP_VERSION.to_le_bytes()).map_err(io)?;
        for dim in [
            gh as u64,
            gw as u64,
            c as u64,
            self.window as u64,
            self.stride as u64,
            self.target.0 as u64,
            self.target.1 as u64,
        ] {
            w.write_all(&dim.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&[0u8]).map_err(io)?; // dtype tag: f64
        for v in self.grid.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FeatureMap> {
        let path = path.as_ref();
        let mut r = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::ImageFormat("feature map file too short".to_string()))?;
        if &magic != FEATMAP_MAGIC {
            return Err(Error::ImageFormat("bad feature map magic".to_string()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::ImageFormat("missing feature map version".to_string()))?;
        let version = u32::from_le_bytes(u32buf);
        if version != FEATMAP_VERSION {
            return Err(Error::ImageFormat(format!(
                "feature map version {version} unsupported"
            )));
        }
        let mut dims = [0u64; 7];
        let mut u64buf = [0u8; 8];
        for d in dims.iter_mut() {
            r.read_exact(&mut u64buf)
                .map_err(|_| Error::ImageFormat("truncated feature map header".to_string()))?;
            *d = u64::from_le_bytes(u64buf);
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)
            .map_err(|_| Error::ImageFormat("missing dtype tag".to_string()))?;
        if dtype[0] != 0 {
            return Err(Error::ImageFormat(format!("unknown dtype tag {}", dtype[0])));
        }
        let (gh, gw, c) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        let mut data = vec![0.0f64; gh * gw * c];
        for v in data.iter_mut() {
            r.read_exact(&mut u64buf)
                .map_err(|_| Error::ImageFormat("truncated feature map data".to_string()))?;
            *v = f64::from_le_bytes(u64buf);
        }
        let grid = Array3::from_shape_vec((gh, gw, c), data)
            .map_err(|e| Error::ImageFormat(format!("feature map shape: {e}")))?;
        FeatureMap::new(
            grid,
            dims[3] as usize,
            dims[4] as usize,
            (dims[5] as usize, dims[6] as usize),
        )
    }
}

const FEATMAP_MAGIC: &[u8; 8] = b"PSEGFMAP";
const FEATMAP_VERSION: u32 = 1;

/// Finds the interpolation cell and fraction for coordinate `u` along sorted
/// anchor centers, clamping outside the hull.
fn axis_locate(centers: &[f64], u: f64) -> (usize, f64) {
    let last = centers.len() - 1;
    if u <= centers[0] || last == 0 {
        return (0, 0.0);
    }
    if u >= centers[last] {
        return (last, 0.0);
    }
    // centers are strictly increasing; find the segment containing u
    let mut k = match centers.binary_search_by(|c| c.partial_cmp(&u).expect("finite")) {
        Ok(exact) => return (exact, 0.0),
        Err(insert) => insert - 1,
    };
    if k >= last {
        k = last - 1;
    }
    let t = (u - centers[k]) / (centers[k + 1] - centers[k]);
    (k, t)
}

fn blend_into(grid: &Array3<f64>, kx: usize, tx: f64, ky: usize, ty: f64, out: &mut [f64]) {
    let (gh, gw, _) = grid.dim();
    let kx1 = (kx + 1).min(gw - 1);
    let ky1 = (ky + 1).min(gh - 1);
    let g00 = grid.slice(s![ky, kx, ..]);
    let g01 = grid.slice(s![ky, kx1, ..]);
    let g10 = grid.slice(s![ky1, kx, ..]);
    let g11 = grid.slice(s![ky1, kx1, ..]);
    let (w00, w01, w10, w11) = (
        (1.0 - ty) * (1.0 - tx),
        (1.0 - ty) * tx,
        ty * (1.0 - tx),
        ty * tx,
    );
    for (i, o) in out.iter_mut().enumerate() {
        *o = w00 * g00[i] + w01 * g01[i] + w10 * g10[i] + w11 * g11[i];
    }
}

/// Slides the extractor over the page and collects one embedding per window
/// position. Windows are processed independently, so the `batch` knob and
/// parallelism cannot change the values.
pub fn extract_feature_map(
    embedder: &impl PatchEmbedder,
    img: &DocumentImage,
    cfg: &SlidingConfig,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    if w < cfg.window || h < cfg.window {
        return Err(Error::Shape(format!(
            "image {w}x{h} is smaller than the {0}px window; pad the image to at least \
             {0}x{0} before extraction",
            cfg.window
        )));
    }
    if embedder.input_size() != cfg.window {
        return Err(Error::Shape(format!(
            "extractor expects {}px patches but the window is {}px",
            embedder.input_size(),
            cfg.window
        )));
    }
    let xs = axis_positions(w, cfg.window, cfg.stride);
    let ys = axis_positions(h, cfg.window, cfg.stride);
    let dim = embedder.embedding_dim();
    let cells: Vec<(usize, usize)> = ys
        .iter()
        .enumerate()
        .flat_map(|(iy, _)| xs.iter().enumerate().map(move |(ix, _)| (iy, ix)))
        .collect();
    let pixels = img.pixels();
    let results: Vec<Result<Vec<(usize, usize, Array1<f64>)>>> = cells
        .par_chunks(cfg.batch)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&(iy, ix)| {
                    let (px, py) = (xs[ix], ys[iy]);
                    let view =
                        pixels.slice(s![py..py + cfg.window, px..px + cfg.window]);
                    Ok((iy, ix, embedder.embed(view)?))
                })
                .collect()
        })
        .collect();
    let mut grid = Array3::<f64>::zeros((ys.len(), xs.len(), dim));
    for chunk in results {
        for (iy, ix, emb) in chunk? {
            grid.slice_mut(s![iy, ix, ..]).assign(&emb);
        }
    }
    FeatureMap::new(grid, cfg.window, cfg.stride, (w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// Embeds a patch as [mean intensity, top-left pixel].
    struct MeanEmbedder {
        size: usize,
    }

    impl PatchEmbedder for MeanEmbedder {
        fn input_size(&self) -> usize {
            self.size
        }

        fn embedding_dim(&self) -> usize {
            2
        }

        fn embed(&self, patch: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
            let mean = patch.sum() / (patch.len() as f64);
            Ok(ndarray::array![mean, patch[[0, 0]]])
        }
    }

    fn doc(pixels: Array2<f64>) -> DocumentImage {
        DocumentImage::new(pixels, "test").unwrap()
    }

    fn toy_map(values: Array3<f64>, window: usize, stride: usize, tw: usize, th: usize) -> FeatureMap {
        FeatureMap::new(values, window, stride, (tw, th)).unwrap()
    }

    #[test]
    fn grid_dims_follow_floor_law() {
        let img = doc(Array2::from_elem((500, 500), 0.5));
        let cfg = SlidingConfig { window: 200, stride: 50, batch: 16 };
        let map = extract_feature_map(&MeanEmbedder { size: 200 }, &img, &cfg).unwrap();
        assert_eq!(map.grid_dims(), (7, 7));
    }

    #[test]
    fn single_window_equals_whole_image_embedding() {
        let img = doc(Array2::from_shape_fn((200, 200), |(y, x)| {
            ((x + y) % 7) as f64 / 7.0
        }));
        let cfg = SlidingConfig { window: 200, stride: 50, batch: 4 };
        let emb = MeanEmbedder { size: 200 };
        let map = extract_feature_map(&emb, &img, &cfg).unwrap();
        assert_eq!(map.grid_dims(), (1, 1));
        let whole = emb.embed(img.pixels()).unwrap();
        assert_eq!(map.sample_at(0.0, 0.0), whole);
    }

    #[test]
    fn disjoint_tiling_produces_quadrant_features() {
        let img = doc(Array2::from_shape_fn((400, 400), |(y, x)| {
            match (y < 200, x < 200) {
                (true, true) => 0.1,
                (true, false) => 0.3,
                (false, true) => 0.6,
                (false, false) => 0.9,
            }
        }));
        let cfg = SlidingConfig { window: 200, stride: 200, batch: 4 };
        let map = extract_feature_map(&MeanEmbedder { size: 200 }, &img, &cfg).unwrap();
        assert_eq!(map.grid_dims(), (2, 2));
        assert!((map.grid()[[0, 0, 0]] - 0.1).abs() < 1e-12);
        assert!((map.grid()[[0, 1, 0]] - 0.3).abs() < 1e-12);
        assert!((map.grid()[[1, 0, 0]] - 0.6).abs() < 1e-12);
        assert!((map.grid()[[1, 1, 0]] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn remainder_adds_one_clamped_window() {
        let img = doc(Array2::from_elem((500, 530), 0.5));
        let cfg = SlidingConfig { window: 200, stride: 50, batch: 8 };
        let map = extract_feature_map(&MeanEmbedder { size: 200 }, &img, &cfg).unwrap();
        // x extent 330 is not a stride multiple: 7 regular + 1 clamped column
        assert_eq!(map.grid_dims(), (8, 7));
        assert_eq!(*map.positions_x().last().unwrap(), 330);
    }

    #[test]
    fn undersized_image_suggests_padding() {
        let img = doc(Array2::from_elem((100, 100), 0.5));
        let cfg = SlidingConfig::default();
        let err = extract_feature_map(&MeanEmbedder { size: 200 }, &img, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad"), "unhelpful message: {msg}");
    }

    #[test]
    fn batch_knob_does_not_change_values() {
        let img = doc(Array2::from_shape_fn((300, 300), |(y, x)| {
            ((x * 31 + y * 17) % 101) as f64 / 101.0
        }));
        let emb = MeanEmbedder { size: 100 };
        let base = SlidingConfig { window: 100, stride: 40, batch: 1 };
        let wide = SlidingConfig { batch: 64, ..base };
        let a = extract_feature_map(&emb, &img, &base).unwrap();
        let b = extract_feature_map(&emb, &img, &wide).unwrap();
        assert_eq!(a.grid(), b.grid());
    }

    #[test]
    fn densify_preserves_constants() {
        let map = toy_map(Array3::from_elem((3, 3, 2), 0.7), 4, 4, 12, 12);
        let dense = map.densify();
        assert_eq!(dense.grid_dims(), (12, 12));
        assert!(dense.grid().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn densify_linear_midpoint() {
        // two anchors valued 0 and 1 -> midpoint 0.5
        let mut grid = Array3::<f64>::zeros((1, 2, 1));
        grid[[0, 1, 0]] = 1.0;
        let map = toy_map(grid, 2, 2, 4, 2);
        // centers at x = 1 and x = 3; midpoint x = 2
        assert!((map.sample_at(2.0, 0.0)[0] - 0.5).abs() < 1e-12);
        let dense = map.densify();
        assert!((dense.grid()[[0, 2, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn densify_bilinear_center_of_four_anchors() {
        // 2x2 grid [[0,0],[1,1]]: center of the four anchors averages to 0.5
        let mut grid = Array3::<f64>::zeros((2, 2, 1));
        grid[[1, 0, 0]] = 1.0;
        grid[[1, 1, 0]] = 1.0;
        let map = toy_map(grid, 2, 2, 4, 4);
        // anchors at (1,1), (3,1), (1,3), (3,3); center (2,2)
        assert!((map.sample_at(2.0, 2.0)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dense_map_reproduces_grid_at_anchors() {
        let grid = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| {
            ((x * 7 + y * 13 + c * 29) % 17) as f64 / 17.0
        });
        let map = toy_map(grid.clone(), 10, 10, 50, 40);
        let dense = map.densify();
        let cx = map.centers_x();
        let cy = map.centers_y();
        for (iy, &vy) in cy.iter().enumerate() {
            for (ix, &vx) in cx.iter().enumerate() {
                for c in 0..3 {
                    let got = dense.grid()[[vy as usize, vx as usize, c]];
                    assert!(
                        (got - grid[[iy, ix, c]]).abs() < 1e-6,
                        "anchor ({ix},{iy}) channel {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn densify_matches_per_channel_densify() {
        let grid = Array3::from_shape_fn((3, 4, 2), |(y, x, c)| {
            ((x * 5 + y * 3 + c * 11) % 13) as f64
        });
        let map = toy_map(grid.clone(), 8, 8, 32, 24);
        let dense = map.densify();
        for c in 0..2 {
            let single = toy_map(
                grid.slice(s![.., .., c..c + 1]).to_owned(),
                8,
                8,
                32,
                24,
            );
            let dense_single = single.densify();
            assert_eq!(
                dense.grid().slice(s![.., .., c..c + 1]).to_owned(),
                dense_single.grid().to_owned()
            );
        }
    }

    #[test]
    fn file_roundtrip() {
        let grid = Array3::from_shape_fn((3, 4, 5), |(y, x, c)| {
            (x as f64) + 10.0 * (y as f64) + 100.0 * (c as f64)
        });
        let map = toy_map(grid, 6, 6, 24, 18);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        map.save(&path).unwrap();
        let back = FeatureMap::load(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"definitely not a feature map").unwrap();
        assert!(FeatureMap::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn densified_values_stay_within_channel_bounds(
            values in proptest::collection::vec(-100.0f64..100.0, 12)
        ) {
            let grid = Array3::from_shape_vec((2, 3, 2), values).unwrap();
            let map = FeatureMap::new(grid, 4, 4, (12, 8)).unwrap();
            let dense = map.densify();
            for c in 0..2 {
                let ch = map.channel(c);
                let min = ch.iter().copied().fold(f64::INFINITY, f64::min);
                let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for &v in dense.channel(c).iter() {
                    prop_assert!(v >= min - 1e-9 && v <= max + 1e-9);
                }
            }
        }

        #[test]
        fn dense_shape_equals_target(w in 8usize..40, h in 8usize..40) {
            let window = 4;
            let stride = 3;
            prop_assume!(w >= window && h >= window);
            let gw = axis_positions(w, window, stride).len();
            let gh = axis_positions(h, window, stride).len();
            let map = FeatureMap::new(
                Array3::from_elem((gh, gw, 1), 1.0), window, stride, (w, h),
            ).unwrap();
            let dense = map.densify();
            prop_assert_eq!(dense.grid_dims(), (w, h));
        }
    }
}
