//! Page segmentation from a feature map: PCA, ink-anchored sign
//! canonicalization, two-component thresholding, and label assignment.
//!
//! Eigenvector signs are arbitrary, so before thresholding each component is
//! oriented to score low-ink windows at least as high as ink-dense ones.
//! After that, `PC < T` selects text-dense regions and the main-text rule
//! `PC1 < T1 and PC2 < T2` is well defined.

use ndarray::{Array1, Array2, Array3, ArrayView2, s};
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{extract_feature_map, FeatureMap, PatchEmbedder, SlidingConfig};
use crate::imaging::{binarize, otsu_split_values, BinaryImage, DocumentImage};
use crate::Prng;

/// Fitted principal axes of a feature distribution.
#[derive(Debug, Clone)]
pub struct PCAModel {
    pub mean: Array1<f64>,
    /// (k, channels); rows are orthonormal, ordered by explained variance.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    /// Fewer than k directions carried variance; trailing components span an
    /// arbitrary (but deterministic) orthonormal completion.
    pub degenerate: bool,
    /// True once sign canonicalization had both ink-dense and low-ink windows
    /// to anchor against.
    pub anchored: bool,
}

impl PCAModel {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn channels(&self) -> usize {
        self.components.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ThresholdMode {
    /// Otsu split on each component's value histogram.
    Auto,
    /// Reproduce a tuned run with pinned thresholds in PC units.
    Fixed { t1: f64, t2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Components retained (at least 2; 3 enables RGB visualization).
    pub k: usize,
    pub threshold_mode: ThresholdMode,
    /// PCA fitting subsamples at most this many dense positions.
    pub max_fit_samples: usize,
    pub fit_seed: u64,
    /// Windows with ink ratio below this anchor the sign convention.
    pub low_ink_ratio: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            k: 3,
            threshold_mode: ThresholdMode::Auto,
            max_fit_samples: 100_000,
            fit_seed: 0,
            low_ink_ratio: 0.01,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!(
                "segmentation needs at least 2 components, got {}",
                self.k
            )));
        }
        if self.max_fit_samples == 0 {
            return Err(Error::Config("max_fit_samples must be positive".to_string()));
        }
        Ok(())
    }
}

/// Boolean main-text region estimate at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MainTextMask {
    mask: Array2<bool>,
}

impl MainTextMask {
    pub fn from_mask(mask: Array2<bool>) -> Self {
        Self { mask }
    }

    pub fn mask(&self) -> ArrayView2<'_, bool> {
        self.mask.view()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-pixel labels: 0 background, 1 main text, 2 side text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageSegmentation {
    labels: Array2<u8>,
}

impl PageSegmentation {
    pub fn from_labels(labels: Array2<u8>) -> Result<Self> {
        if labels.iter().any(|&l| l > 2) {
            return Err(Error::ImageFormat(
                "segmentation labels must be 0, 1, or 2".to_string(),
            ));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.labels.view()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn count_of(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Fits PCA to the map's dense feature distribution, subsampling uniformly
/// (seeded, with replacement) past `max_fit_samples` positions. When the data
/// has fewer than k non-degenerate directions, the model is flagged and the
/// trailing rows come from the eigendecomposition's orthonormal completion.
pub fn fit_pca(map: &FeatureMap, cfg: &SegmentationConfig) -> Result<PCAModel> {
    cfg.validate()?;
    let c = map.channels();
    let (w, h) = map.target_size();
    let total = w * h;
    if c < cfg.k {
        return Err(Error::Config(format!(
            "cannot keep {} components of {c}-channel features",
            cfg.k
        )));
    }
    if total < cfg.k.max(2) {
        return Err(Error::Config(format!(
            "{total} feature vectors are too few to fit {} components",
            cfg.k
        )));
    }

    let coords: Vec<(f64, f64)> = if total <= cfg.max_fit_samples {
        (0..total)
            .map(|i| ((i % w) as f64, (i / w) as f64))
            .collect()
    } else {
        let mut rng = Prng::seed_from_u64(cfg.fit_seed);
        (0..cfg.max_fit_samples)
            .map(|_| {
                (
                    rng.random_range(0..w) as f64,
                    rng.random_range(0..h) as f64,
                )
            })
            .collect()
    };

    let n = coords.len();
    let mut sum = Array1::<f64>::zeros(c);
    let mut cov_acc = Array2::<f64>::zeros((c, c));
    const CHUNK: usize = 4096;
    let mut buf = Array2::<f64>::zeros((CHUNK, c));
    for chunk in coords.chunks(CHUNK) {
        let rows = chunk.len();
        for (r, &(u, v)) in chunk.iter().enumerate() {
            let mut row = buf.slice_mut(s![r, ..]);
            map.sample_into(u, v, row.as_slice_mut().expect("contiguous"));
        }
        let x = buf.slice(s![..rows, ..]);
        sum += &x.sum_axis(ndarray::Axis(0));
        cov_acc += &x.t().dot(&x);
    }
    let mean = &sum / n as f64;
    // covariance = (X'X - n mu mu') / (n - 1)
    let mut cov = cov_acc;
    for i in 0..c {
        for j in 0..c {
            cov[[i, j]] = (cov[[i, j]] - n as f64 * mean[i] * mean[j]) / (n as f64 - 1.0);
        }
    }

    let m = nalgebra::DMatrix::from_fn(c, c, |i, j| cov[[i, j]]);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let mut components = Array2::<f64>::zeros((cfg.k, c));
    let mut explained = Vec::with_capacity(cfg.k);
    for (row, &col) in order.iter().take(cfg.k).enumerate() {
        for i in 0..c {
            components[[row, i]] = eig.eigenvectors[(i, col)];
        }
        explained.push(eig.eigenvalues[col].max(0.0));
    }
    let top = explained.first().copied().unwrap_or(0.0);
    let tol = top * 1e-9;
    let effective = explained.iter().filter(|&&v| v > tol).count();
    Ok(PCAModel {
        mean,
        components,
        explained_variance: explained,
        degenerate: top <= 0.0 || effective < cfg.k,
        anchored: false,
    })
}

/// Orients every component so low-ink windows project at least as high as
/// ink-dense ones: after this, smaller PC values mean denser text and the
/// `<` threshold rule selects text regions. With no low-ink (or no ink-dense)
/// windows to compare, signs are left untouched and `anchored` stays false.
pub fn canonicalize_signs(
    pca: &PCAModel,
    map: &FeatureMap,
    bin: &BinaryImage,
    low_ink_ratio: f64,
) -> PCAModel {
    let k = pca.k();
    let xs = map.positions_x();
    let ys = map.positions_y();
    let window = map.window();
    let mask = bin.mask();
    let mut sum_low = vec![0.0f64; k];
    let mut sum_high = vec![0.0f64; k];
    let (mut n_low, mut n_high) = (0usize, 0usize);
    let area = (window * window) as f64;
    for (iy, &py) in ys.iter().enumerate() {
        for (ix, &px) in xs.iter().enumerate() {
            let ink = mask
                .slice(s![py..py + window, px..px + window])
                .iter()
                .filter(|&&m| m)
                .count() as f64;
            let feature = map.grid().slice(s![iy, ix, ..]);
            let low = ink / area < low_ink_ratio;
            for i in 0..k {
                let proj = pca
                    .components
                    .row(i)
                    .iter()
                    .zip(feature.iter().zip(pca.mean.iter()))
                    .map(|(&c, (&f, &m))| c * (f - m))
                    .sum::<f64>();
                if low {
                    sum_low[i] += proj;
                } else {
                    sum_high[i] += proj;
                }
            }
            if low {
                n_low += 1;
            } else {
                n_high += 1;
            }
        }
    }
    let mut out = pca.clone();
    if n_low == 0 || n_high == 0 {
        out.anchored = false;
        return out;
    }
    for i in 0..k {
        if sum_low[i] / (n_low as f64) < sum_high[i] / (n_high as f64) {
            let mut row = out.components.row_mut(i);
            row.mapv_inplace(|v| -v);
        }
    }
    out.anchored = true;
    out
}

/// Projects every grid cell onto the k principal axes. The result is a
/// k-channel feature map with the same sliding geometry, so it densifies like
/// any other map.
pub fn project(pca: &PCAModel, map: &FeatureMap) -> Result<FeatureMap> {
    let c = map.channels();
    if c != pca.channels() {
        return Err(Error::Shape(format!(
            "map has {c} channels but the PCA model expects {}",
            pca.channels()
        )));
    }
    let (gh, gw, _) = map.grid().dim();
    let flat = map
        .grid()
        .view()
        .into_shape_with_order((gh * gw, c))
        .expect("grid is contiguous");
    let centered = &flat - &pca.mean.view().insert_axis(ndarray::Axis(0));
    let proj = centered.dot(&pca.components.t());
    let grid = proj
        .into_shape_with_order((gh, gw, pca.k()))
        .expect("projection reshapes");
    FeatureMap::new(grid, map.window(), map.stride(), map.target_size())
}

/// Resolves the (T1, T2) thresholds for the given mode. Auto runs Otsu on
/// each component's histogram; a constant component yields -inf so that the
/// `<` test selects nothing from it.
pub fn resolve_thresholds(
    pc1: ArrayView2<'_, f64>,
    pc2: ArrayView2<'_, f64>,
    cfg: &SegmentationConfig,
) -> (f64, f64) {
    match cfg.threshold_mode {
        ThresholdMode::Fixed { t1, t2 } => (t1, t2),
        ThresholdMode::Auto => (
            otsu_split_values(pc1.iter()).unwrap_or(f64::NEG_INFINITY),
            otsu_split_values(pc2.iter()).unwrap_or(f64::NEG_INFINITY),
        ),
    }
}

/// Marks pixels where both leading components fall below their thresholds.
pub fn threshold_main_text(
    pc1: ArrayView2<'_, f64>,
    pc2: ArrayView2<'_, f64>,
    cfg: &SegmentationConfig,
) -> Result<MainTextMask> {
    if pc1.dim() != pc2.dim() {
        return Err(Error::Shape(format!(
            "component grids disagree: {:?} vs {:?}",
            pc1.dim(),
            pc2.dim()
        )));
    }
    let (t1, t2) = resolve_thresholds(pc1, pc2, cfg);
    let mut mask = Array2::from_elem(pc1.dim(), false);
    for ((idx, &a), &b) in pc1.indexed_iter().zip(pc2.iter()) {
        mask[idx] = a < t1 && b < t2;
    }
    Ok(MainTextMask::from_mask(mask))
}

/// Foreground pixels inside the mask become main text (1); foreground outside
/// becomes side text (2); background stays 0.
pub fn assign_labels(mask: &MainTextMask, bin: &BinaryImage) -> Result<PageSegmentation> {
    if (mask.width(), mask.height()) != (bin.width(), bin.height()) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match binary image {}x{}",
            mask.width(),
            mask.height(),
            bin.width(),
            bin.height()
        )));
    }
    let m = mask.mask();
    let labels = Array2::from_shape_fn((bin.height(), bin.width()), |(y, x)| {
        if !bin.mask()[[y, x]] {
            0
        } else if m[[y, x]] {
            1
        } else {
            2
        }
    });
    Ok(PageSegmentation { labels })
}

/// Renders the first three projected components as R, G, B with independent
/// min-max scaling; constant components render mid-gray.
pub fn visualize_pca_rgb(pca: &PCAModel, map: &FeatureMap) -> Result<image::RgbImage> {
    if pca.k() < 3 {
        return Err(Error::Config(format!(
            "RGB visualization needs k >= 3 components, got {}",
            pca.k()
        )));
    }
    let comp = project(pca, map)?;
    components_to_rgb(&comp)
}

/// Maps the first three channels of a component map to RGB.
pub fn components_to_rgb(comp: &FeatureMap) -> Result<image::RgbImage> {
    if comp.channels() < 3 {
        return Err(Error::Config(format!(
            "RGB rendering needs 3 channels, got {}",
            comp.channels()
        )));
    }
    let (gw, gh) = comp.grid_dims();
    let mut img = image::RgbImage::new(gw as u32, gh as u32);
    let mut scaled = Vec::with_capacity(3);
    for c in 0..3 {
        let ch = comp.channel(c);
        let min = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let bytes: Array2<u8> = if range <= f64::EPSILON {
            Array2::from_elem(ch.dim(), 128)
        } else {
            ch.mapv(|v| ((v - min) / range * 255.0).round() as u8)
        };
        scaled.push(bytes);
    }
    for y in 0..gh {
        for x in 0..gw {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([scaled[0][[y, x]], scaled[1][[y, x]], scaled[2][[y, x]]]),
            );
        }
    }
    Ok(img)
}

/// Everything a segmented page produces.
#[derive(Debug)]
pub struct PageArtifacts {
    pub segmentation: PageSegmentation,
    pub mask: MainTextMask,
    pub pca: PCAModel,
    /// k-channel component map at full image resolution.
    pub dense_components: FeatureMap,
    pub thresholds: (f64, f64),
    /// The strided feature map the page was analyzed from.
    pub feature_map: FeatureMap,
}

/// Full per-page flow: binarize, slide the extractor, fit and orient PCA,
/// project, densify, threshold the first two components, label foreground.
pub fn segment_page(
    embedder: &impl PatchEmbedder,
    img: &DocumentImage,
    sliding: &SlidingConfig,
    cfg: &SegmentationConfig,
) -> Result<PageArtifacts> {
    cfg.validate()?;
    let bin = binarize(img);
    let feature_map = extract_feature_map(embedder, img, sliding)?;
    let pca = fit_pca(&feature_map, cfg)?;
    let pca = canonicalize_signs(&pca, &feature_map, &bin, cfg.low_ink_ratio);
    let components = project(&pca, &feature_map)?;
    let dense = components.densify();
    let thresholds = resolve_thresholds(dense.channel(0), dense.channel(1), cfg);
    let fixed = SegmentationConfig {
        threshold_mode: ThresholdMode::Fixed {
            t1: thresholds.0,
            t2: thresholds.1,
        },
        ..*cfg
    };
    let mask = threshold_main_text(dense.channel(0), dense.channel(1), &fixed)?;
    let segmentation = assign_labels(&mask, &bin)?;
    Ok(PageArtifacts {
        segmentation,
        mask,
        pca,
        dense_components: dense,
        thresholds,
        feature_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn line_map(points: &[(f64, f64)]) -> FeatureMap {
        let n = points.len();
        let mut grid = Array3::<f64>::zeros((n, 1, 2));
        for (i, &(a, b)) in points.iter().enumerate() {
            grid[[i, 0, 0]] = a;
            grid[[i, 0, 1]] = b;
        }
        FeatureMap::new(grid, 1, 1, (1, n)).unwrap()
    }

    fn fit_cfg(k: usize) -> SegmentationConfig {
        SegmentationConfig {
            k,
            ..SegmentationConfig::default()
        }
    }

    #[test]
    fn collinear_data_recovers_the_line() {
        let points: Vec<(f64, f64)> = (0..40).map(|i| {
            let t = i as f64 / 4.0 - 5.0;
            (t, 2.0 * t)
        }).collect();
        let pca = fit_pca(&line_map(&points), &fit_cfg(2)).unwrap();
        let expected = [1.0 / 5.0f64.sqrt(), 2.0 / 5.0f64.sqrt()];
        let dot: f64 = pca.components.row(0).iter().zip(expected).map(|(&c, e)| c * e).sum();
        assert!(dot.abs() > 1.0 - 1e-9, "PC1 not along the line: {:?}", pca.components.row(0));
        assert!(pca.explained_variance[1].abs() < 1e-9);
        assert!(pca.degenerate);
    }

    #[test]
    fn isotropic_cloud_has_balanced_variances() {
        use rand_distr::{Distribution, Normal};
        let mut rng = Prng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut grid = Array3::<f64>::zeros((1000, 1, 3));
        for i in 0..1000 {
            for c in 0..3 {
                grid[[i, 0, c]] = normal.sample(&mut rng);
            }
        }
        let map = FeatureMap::new(grid, 1, 1, (1, 1000)).unwrap();
        let pca = fit_pca(&map, &fit_cfg(3)).unwrap();
        let v = &pca.explained_variance;
        assert!(v[0] / v[2] < 1.5, "variances too spread: {v:?}");
        assert!(!pca.degenerate);
    }

    #[test]
    fn components_are_orthonormal() {
        let points: Vec<(f64, f64)> = (0..50)
            .map(|i| ((i * 13 % 17) as f64, (i * 7 % 11) as f64))
            .collect();
        let pca = fit_pca(&line_map(&points), &fit_cfg(2)).unwrap();
        let gram = pca.components.dot(&pca.components.t());
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_centering_and_axes() {
        let points: Vec<(f64, f64)> = (0..50)
            .map(|i| ((i * 13 % 17) as f64, (i * 7 % 11) as f64))
            .collect();
        let pca = fit_pca(&line_map(&points), &fit_cfg(2)).unwrap();

        // projecting the mean itself gives zero in every component
        let mean_map = line_map(&[(pca.mean[0], pca.mean[1])]);
        let proj = project(&pca, &mean_map).unwrap();
        assert!(proj.grid()[[0, 0, 0]].abs() < 1e-9);
        assert!(proj.grid()[[0, 0, 1]].abs() < 1e-9);

        // mean + component_i projects to the i-th unit vector
        let shifted = line_map(&[(
            pca.mean[0] + pca.components[[0, 0]],
            pca.mean[1] + pca.components[[0, 1]],
        )]);
        let proj = project(&pca, &shifted).unwrap();
        assert!((proj.grid()[[0, 0, 0]] - 1.0).abs() < 1e-9);
        assert!(proj.grid()[[0, 0, 1]].abs() < 1e-9);

        // variance ordering holds on the training data
        let full = project(&pca, &line_map(&points)).unwrap();
        let var = |c: usize| {
            let vals: Vec<f64> = full.channel(c).iter().copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64
        };
        assert!(var(0) >= var(1));
    }

    /// 8x8 page, ink on the left half; 4px windows at positions [0, 4].
    fn ink_fixture() -> (FeatureMap, BinaryImage) {
        let mut grid = Array3::<f64>::zeros((2, 2, 2));
        // left cells (ink) score low in channel 0 before canonicalization
        grid[[0, 0, 0]] = -3.0;
        grid[[1, 0, 0]] = -2.8;
        grid[[0, 1, 0]] = 3.0;
        grid[[1, 1, 0]] = 2.9;
        grid[[0, 0, 1]] = 1.0;
        grid[[1, 0, 1]] = -1.0;
        grid[[0, 1, 1]] = 0.5;
        grid[[1, 1, 1]] = -0.5;
        let map = FeatureMap::new(grid, 4, 4, (8, 8)).unwrap();
        let mask = Array2::from_shape_fn((8, 8), |(_, x)| x < 4);
        (map, BinaryImage::from_mask(mask))
    }

    #[test]
    fn canonicalization_is_idempotent_and_flip_invariant() {
        let (map, bin) = ink_fixture();
        let pca = fit_pca(&map, &fit_cfg(2)).unwrap();
        let once = canonicalize_signs(&pca, &map, &bin, 0.01);
        assert!(once.anchored);
        let twice = canonicalize_signs(&once, &map, &bin, 0.01);
        assert_eq!(once.components, twice.components);

        // flipping any component pre-canonicalization lands on the same model
        let mut flipped = pca.clone();
        flipped.components.row_mut(0).mapv_inplace(|v| -v);
        let from_flipped = canonicalize_signs(&flipped, &map, &bin, 0.01);
        assert_eq!(once.components, from_flipped.components);
    }

    #[test]
    fn canonicalization_without_background_sets_warning() {
        let (map, _) = ink_fixture();
        let all_ink = BinaryImage::from_mask(Array2::from_elem((8, 8), true));
        let pca = fit_pca(&map, &fit_cfg(2)).unwrap();
        let out = canonicalize_signs(&pca, &map, &all_ink, 0.01);
        assert!(!out.anchored);
        assert_eq!(out.components, pca.components);
    }

    #[test]
    fn canonical_orientation_scores_ink_lower() {
        let (map, bin) = ink_fixture();
        let pca = fit_pca(&map, &fit_cfg(2)).unwrap();
        let pca = canonicalize_signs(&pca, &map, &bin, 0.01);
        let proj = project(&pca, &map).unwrap();
        // ink column (x=0) must sit below the blank column (x=1) on PC1
        let ink_mean = (proj.grid()[[0, 0, 0]] + proj.grid()[[1, 0, 0]]) / 2.0;
        let blank_mean = (proj.grid()[[0, 1, 0]] + proj.grid()[[1, 1, 0]]) / 2.0;
        assert!(ink_mean < blank_mean);
    }

    #[test]
    fn thresholds_vacuous_and_empty() {
        let pc = array![[0.0, 1.0], [2.0, 3.0]];
        let all = threshold_main_text(
            pc.view(),
            pc.view(),
            &SegmentationConfig {
                threshold_mode: ThresholdMode::Fixed {
                    t1: f64::INFINITY,
                    t2: f64::INFINITY,
                },
                ..SegmentationConfig::default()
            },
        )
        .unwrap();
        assert_eq!(all.covered(), 4);

        let none = threshold_main_text(
            pc.view(),
            pc.view(),
            &SegmentationConfig {
                threshold_mode: ThresholdMode::Fixed {
                    t1: f64::NEG_INFINITY,
                    t2: f64::INFINITY,
                },
                ..SegmentationConfig::default()
            },
        )
        .unwrap();
        assert_eq!(none.covered(), 0);
    }

    #[test]
    fn auto_thresholds_split_bimodal_components() {
        // low mode in the left half, high mode right
        let pc1 = Array2::from_shape_fn((20, 20), |(_, x)| {
            if x < 10 { -5.0 + (x as f64) * 0.01 } else { 5.0 + (x as f64) * 0.01 }
        });
        let pc2 = pc1.clone();
        let mask = threshold_main_text(pc1.view(), pc2.view(), &fit_cfg(2)).unwrap();
        for ((_, x), &m) in mask.mask().indexed_iter() {
            assert_eq!(m, x < 10);
        }
    }

    #[test]
    fn label_assignment_cases() {
        let bin = BinaryImage::from_mask(Array2::from_shape_fn((4, 4), |(y, _)| y < 2));
        // mask covers the left half
        let mask = MainTextMask::from_mask(Array2::from_shape_fn((4, 4), |(_, x)| x < 2));
        let seg = assign_labels(&mask, &bin).unwrap();
        assert_eq!(seg.labels()[[0, 0]], 1); // ink inside mask
        assert_eq!(seg.labels()[[0, 3]], 2); // ink outside mask
        assert_eq!(seg.labels()[[3, 0]], 0); // background stays 0

        let empty = BinaryImage::from_mask(Array2::from_elem((4, 4), false));
        let seg = assign_labels(&mask, &empty).unwrap();
        assert_eq!(seg.count_of(0), 16);

        let full_mask = MainTextMask::from_mask(Array2::from_elem((4, 4), true));
        let seg = assign_labels(&full_mask, &bin).unwrap();
        assert_eq!(seg.count_of(1), 8);
        assert_eq!(seg.count_of(2), 0);
    }

    #[test]
    fn mismatched_dims_error() {
        let bin = BinaryImage::from_mask(Array2::from_elem((4, 4), true));
        let mask = MainTextMask::from_mask(Array2::from_elem((5, 4), true));
        assert!(matches!(
            assign_labels(&mask, &bin),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rgb_visualization_degenerate_and_ranges() {
        let grid = Array3::from_elem((2, 2, 3), 1.5);
        let comp = FeatureMap::new(grid, 2, 2, (4, 4)).unwrap();
        let img = components_to_rgb(&comp).unwrap();
        assert_eq!(img.dimensions(), (2, 2));
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));

        let mut grid = Array3::<f64>::zeros((2, 2, 3));
        grid[[0, 0, 0]] = -1.0;
        grid[[1, 1, 0]] = 1.0;
        grid[[0, 1, 1]] = 4.0;
        grid[[1, 0, 2]] = -2.0;
        let comp = FeatureMap::new(grid, 2, 2, (4, 4)).unwrap();
        let img = components_to_rgb(&comp).unwrap();
        let reds: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        assert_eq!(*reds.iter().min().unwrap(), 0);
        assert_eq!(*reds.iter().max().unwrap(), 255);
    }

    #[test]
    fn orientation_invariance_of_final_mask() {
        let (map, bin) = ink_fixture();
        let run = |m: &FeatureMap| {
            let pca = fit_pca(m, &fit_cfg(2)).unwrap();
            let pca = canonicalize_signs(&pca, m, &bin, 0.01);
            let comp = project(&pca, m).unwrap();
            let dense = comp.densify();
            threshold_main_text(dense.channel(0), dense.channel(1), &fit_cfg(2)).unwrap()
        };
        let base = run(&map);
        let negated = FeatureMap::new(
            map.grid().mapv(|v| -v),
            map.window(),
            map.stride(),
            map.target_size(),
        )
        .unwrap();
        let flipped = run(&negated);
        assert_eq!(base, flipped);
    }

    proptest! {
        #[test]
        fn raising_thresholds_never_shrinks_the_mask(
            values in proptest::collection::vec(-10.0f64..10.0, 36),
            t1 in -5.0f64..5.0,
            t2 in -5.0f64..5.0,
            bump in 0.0f64..5.0,
        ) {
            let pc1 = Array2::from_shape_vec((6, 6), values[..36].to_vec()).unwrap();
            let pc2 = pc1.mapv(|v| v * 0.5);
            let small = threshold_main_text(pc1.view(), pc2.view(), &SegmentationConfig {
                threshold_mode: ThresholdMode::Fixed { t1, t2 },
                ..SegmentationConfig::default()
            }).unwrap();
            let large = threshold_main_text(pc1.view(), pc2.view(), &SegmentationConfig {
                threshold_mode: ThresholdMode::Fixed { t1: t1 + bump, t2: t2 + bump },
                ..SegmentationConfig::default()
            }).unwrap();
            for (s, l) in small.mask().iter().zip(large.mask().iter()) {
                prop_assert!(!s || *l);
            }
        }

        #[test]
        fn labels_partition_foreground(bits in proptest::collection::vec(any::<bool>(), 64),
                                       mask_bits in proptest::collection::vec(any::<bool>(), 64)) {
            let bin = BinaryImage::from_mask(Array2::from_shape_vec((8, 8), bits).unwrap());
            let mask = MainTextMask::from_mask(Array2::from_shape_vec((8, 8), mask_bits).unwrap());
            let seg = assign_labels(&mask, &bin).unwrap();
            let fg = bin.foreground_count();
            prop_assert_eq!(seg.count_of(1) + seg.count_of(2), fg);
            for ((y, x), &l) in seg.labels().indexed_iter() {
                prop_assert_eq!(l != 0, bin.mask()[[y, x]]);
            }
        }
    }
}
