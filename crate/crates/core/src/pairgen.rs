//! Self-labeled training pairs: similar pairs from spatial proximity,
//! different pairs from component-size, ink-count, and background contrasts.
//!
//! Every sampler is a capped rejection loop over a deterministic RNG, so a
//! fixed seed reproduces the exact pair set.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::imaging::Patch;
use crate::imaging::{
    binarize, component_stats, crop_patch, BinaryImage, ComponentStats, DocumentImage,
    PatchGeometry, DEFAULT_MIN_AREA,
};
use crate::error::{Error, Result};
use crate::Prng;

/// 0 = similar, 1 = different (labels follow the distance analogy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PairLabel {
    Similar,
    Different,
}

impl PairLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            PairLabel::Similar => 0.0,
            PairLabel::Different => 1.0,
        }
    }
}

impl From<PairLabel> for u8 {
    fn from(l: PairLabel) -> u8 {
        match l {
            PairLabel::Similar => 0,
            PairLabel::Different => 1,
        }
    }
}

impl TryFrom<u8> for PairLabel {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(PairLabel::Similar),
            1 => Ok(PairLabel::Different),
            other => Err(format!("invalid pair label {other}")),
        }
    }
}

/// Which generation strategy produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    Proximity,
    ComponentSize,
    ForegroundCount,
    Background,
}

impl PairStrategy {
    pub fn label(self) -> PairLabel {
        match self {
            PairStrategy::Proximity => PairLabel::Similar,
            _ => PairLabel::Different,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairStrategy::Proximity => "proximity",
            PairStrategy::ComponentSize => "component_size",
            PairStrategy::ForegroundCount => "foreground_count",
            PairStrategy::Background => "background",
        }
    }
}

/// A labeled pair of patches.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub patch_a: Patch,
    pub patch_b: Patch,
    pub label: PairLabel,
    pub strategy: PairStrategy,
}

/// Knobs for the pair samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch_size: usize,
    /// Similarity cutoff shared by the s1 and s2 strategies.
    pub s_threshold: f64,
    /// A patch is "background" when its ink ratio falls below this.
    pub bg_foreground_ratio: f64,
    /// Perturbation budget for proximity pairs, as a fraction of patch size.
    pub perturb_fraction: f64,
    pub max_rejections: u32,
    pub min_area: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch_size: 200,
            s_threshold: 0.5,
            bg_foreground_ratio: 0.01,
            perturb_fraction: 0.25,
            max_rejections: 10_000,
            min_area: DEFAULT_MIN_AREA,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_threshold > 0.0 && self.s_threshold < 1.0) {
            return Err(Error::Config(format!(
                "s_threshold must be in (0, 1), got {}",
                self.s_threshold
            )));
        }
        if !(0.0..0.5).contains(&self.bg_foreground_ratio) {
            return Err(Error::Config(format!(
                "bg_foreground_ratio must be in [0, 0.5), got {}",
                self.bg_foreground_ratio
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".to_string()));
        }
        Ok(())
    }

    fn perturb_px(&self) -> i64 {
        (self.patch_size as f64 * self.perturb_fraction).floor() as i64
    }
}

/// A document with its ink mask, precomputed once so the samplers don't
/// re-binarize on every rejection.
#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub image: DocumentImage,
    pub binary: BinaryImage,
}

impl PreparedDoc {
    pub fn new(image: DocumentImage) -> Self {
        let binary = binarize(&image);
        Self { image, binary }
    }
}

/// Similarity of two patches by average component extent (score s1): the
/// ratio of the smaller avg-height*avg-width product to the larger. 1 means
/// identical statistics; values below the threshold mark the pair different.
pub fn similarity_s1(stats1: &ComponentStats, stats2: &ComponentStats) -> Result<f64> {
    let p1 = stats1.avg_height * stats1.avg_width;
    let p2 = stats2.avg_height * stats2.avg_width;
    if stats1.component_count == 0 || stats2.component_count == 0 || p1 <= 0.0 || p2 <= 0.0 {
        return Err(Error::UndefinedStatistic(
            "s1 requires both patches to contain components".to_string(),
        ));
    }
    Ok(p1.min(p2) / p1.max(p2))
}

/// Similarity of two patches by foreground pixel count (score s2).
pub fn similarity_s2(a1: usize, a2: usize) -> Result<f64> {
    if a1 == 0 || a2 == 0 {
        return Err(Error::UndefinedStatistic(
            "s2 requires both patches to contain foreground pixels".to_string(),
        ));
    }
    let (a1, a2) = (a1 as f64, a2 as f64);
    Ok(a1.min(a2) / a1.max(a2))
}

/// The eight neighboring placements of a second patch around a first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborOffset {
    East,
    West,
    North,
    South,
    NorthEast,
    NorthWest,
    SouthEast,
    SouthWest,
}

pub const NEIGHBOR_OFFSETS: [NeighborOffset; 8] = [
    NeighborOffset::East,
    NeighborOffset::West,
    NeighborOffset::North,
    NeighborOffset::South,
    NeighborOffset::NorthEast,
    NeighborOffset::NorthWest,
    NeighborOffset::SouthEast,
    NeighborOffset::SouthWest,
];

impl NeighborOffset {
    /// Unit offset in patch-size steps, x right / y down.
    pub fn delta(self) -> (i64, i64) {
        match self {
            NeighborOffset::East => (1, 0),
            NeighborOffset::West => (-1, 0),
            NeighborOffset::North => (0, -1),
            NeighborOffset::South => (0, 1),
            NeighborOffset::NorthEast => (1, -1),
            NeighborOffset::NorthWest => (-1, -1),
            NeighborOffset::SouthEast => (1, 1),
            NeighborOffset::SouthWest => (-1, 1),
        }
    }

    /// Top-left corner of the unperturbed neighboring patch.
    pub fn base_position(self, p1: PatchGeometry) -> (i64, i64) {
        let (dx, dy) = self.delta();
        (
            p1.x as i64 + dx * p1.size as i64,
            p1.y as i64 + dy * p1.size as i64,
        )
    }
}

fn random_geometry(rng: &mut Prng, w: usize, h: usize, size: usize) -> PatchGeometry {
    PatchGeometry::new(
        rng.random_range(0..=w - size),
        rng.random_range(0..=h - size),
        size,
    )
}

/// Samples a similar pair: a random patch and a perturbed copy of one of its
/// eight neighbors. Both patches stay in bounds; the perturbation magnitude is
/// at most `patch_size * perturb_fraction` per axis.
pub fn sample_neighbor_pair(
    doc: &PreparedDoc,
    cfg: &SamplerConfig,
    rng: &mut Prng,
) -> Result<PatchPair> {
    cfg.validate()?;
    let (w, h) = (doc.image.width(), doc.image.height());
    let size = cfg.patch_size;
    let perturb = cfg.perturb_px();
    let reach = 2 * size as i64 - perturb;
    if w < size || h < size || ((w as i64) < reach && (h as i64) < reach) {
        return Err(Error::Config(format!(
            "document {}x{} too small to host two neighboring {size}px patches",
            w, h
        )));
    }
    for _ in 0..cfg.max_rejections {
        let p1 = random_geometry(rng, w, h, size);
        let offset = NEIGHBOR_OFFSETS[rng.random_range(0..NEIGHBOR_OFFSETS.len())];
        let (bx, by) = offset.base_position(p1);
        let dx = rng.random_range(-perturb..=perturb);
        let dy = rng.random_range(-perturb..=perturb);
        let (x2, y2) = (bx + dx, by + dy);
        if x2 < 0 || y2 < 0 || x2 + size as i64 > w as i64 || y2 + size as i64 > h as i64 {
            continue;
        }
        let p2 = PatchGeometry::new(x2 as usize, y2 as usize, size);
        return Ok(PatchPair {
            patch_a: crop_patch(&doc.image, p1)?,
            patch_b: crop_patch(&doc.image, p2)?,
            label: PairLabel::Similar,
            strategy: PairStrategy::Proximity,
        });
    }
    Err(Error::SamplingExhausted {
        strategy: PairStrategy::Proximity.name().to_string(),
        attempts: cfg.max_rejections,
    })
}

/// True when the region's ink ratio is below the configured background cutoff.
pub fn is_background_region(
    bin: &BinaryImage,
    geom: PatchGeometry,
    cfg: &SamplerConfig,
) -> bool {
    let stats = component_stats(bin, geom, usize::MAX); // only the raw count matters
    (stats.foreground_count as f64) < cfg.bg_foreground_ratio * (geom.size * geom.size) as f64
}

/// Patch-level wrapper over [`is_background_region`].
pub fn is_background_patch(patch: &Patch, bin: &BinaryImage, cfg: &SamplerConfig) -> bool {
    is_background_region(bin, patch.geometry, cfg)
}

fn pick_doc<'a>(docs: &'a [PreparedDoc], rng: &mut Prng) -> &'a PreparedDoc {
    &docs[rng.random_range(0..docs.len())]
}

fn docs_usable(docs: &[PreparedDoc], size: usize) -> Result<()> {
    if docs.is_empty() {
        return Err(Error::Config("no documents to sample from".to_string()));
    }
    if docs
        .iter()
        .any(|d| d.image.width() < size || d.image.height() < size)
    {
        return Err(Error::Config(format!(
            "a document is smaller than the {size}px patch size"
        )));
    }
    Ok(())
}

/// Rejection-samples a pair of text patches until their average component
/// sizes disagree (s1 below threshold). Both patches come from one document.
pub fn sample_component_size_pair(
    docs: &[PreparedDoc],
    cfg: &SamplerConfig,
    rng: &mut Prng,
) -> Result<PatchPair> {
    cfg.validate()?;
    docs_usable(docs, cfg.patch_size)?;
    for _ in 0..cfg.max_rejections {
        let doc = pick_doc(docs, rng);
        let (w, h) = (doc.image.width(), doc.image.height());
        let g1 = random_geometry(rng, w, h, cfg.patch_size);
        let g2 = random_geometry(rng, w, h, cfg.patch_size);
        if is_background_region(&doc.binary, g1, cfg) || is_background_region(&doc.binary, g2, cfg)
        {
            continue;
        }
        let s1 = component_stats(&doc.binary, g1, cfg.min_area);
        let s2 = component_stats(&doc.binary, g2, cfg.min_area);
        match similarity_s1(&s1, &s2) {
            Ok(s) if s < cfg.s_threshold => {
                return Ok(PatchPair {
                    patch_a: crop_patch(&doc.image, g1)?,
                    patch_b: crop_patch(&doc.image, g2)?,
                    label: PairLabel::Different,
                    strategy: PairStrategy::ComponentSize,
                });
            }
            _ => continue,
        }
    }
    Err(Error::SamplingExhausted {
        strategy: PairStrategy::ComponentSize.name().to_string(),
        attempts: cfg.max_rejections,
    })
}

/// Rejection-samples a pair of text patches until their ink counts disagree
/// (s2 below threshold).
pub fn sample_foreground_pair(
    docs: &[PreparedDoc],
    cfg: &SamplerConfig,
    rng: &mut Prng,
) -> Result<PatchPair> {
    cfg.validate()?;
    docs_usable(docs, cfg.patch_size)?;
    for _ in 0..cfg.max_rejections {
        let doc = pick_doc(docs, rng);
        let (w, h) = (doc.image.width(), doc.image.height());
        let g1 = random_geometry(rng, w, h, cfg.patch_size);
        let g2 = random_geometry(rng, w, h, cfg.patch_size);
        if is_background_region(&doc.binary, g1, cfg) || is_background_region(&doc.binary, g2, cfg)
        {
            continue;
        }
        let a1 = component_stats(&doc.binary, g1, cfg.min_area).foreground_count;
        let a2 = component_stats(&doc.binary, g2, cfg.min_area).foreground_count;
        match similarity_s2(a1, a2) {
            Ok(s) if s < cfg.s_threshold => {
                return Ok(PatchPair {
                    patch_a: crop_patch(&doc.image, g1)?,
                    patch_b: crop_patch(&doc.image, g2)?,
                    label: PairLabel::Different,
                    strategy: PairStrategy::ForegroundCount,
                });
            }
            _ => continue,
        }
    }
    Err(Error::SamplingExhausted {
        strategy: PairStrategy::ForegroundCount.name().to_string(),
        attempts: cfg.max_rejections,
    })
}

/// Rejection-samples until exactly one of the two patches is background.
pub fn sample_background_pair(
    docs: &[PreparedDoc],
    cfg: &SamplerConfig,
    rng: &mut Prng,
) -> Result<PatchPair> {
    cfg.validate()?;
    docs_usable(docs, cfg.patch_size)?;
    for _ in 0..cfg.max_rejections {
        let doc = pick_doc(docs, rng);
        let (w, h) = (doc.image.width(), doc.image.height());
        let g1 = random_geometry(rng, w, h, cfg.patch_size);
        let g2 = random_geometry(rng, w, h, cfg.patch_size);
        let bg1 = is_background_region(&doc.binary, g1, cfg);
        let bg2 = is_background_region(&doc.binary, g2, cfg);
        if bg1 != bg2 {
            return Ok(PatchPair {
                patch_a: crop_patch(&doc.image, g1)?,
                patch_b: crop_patch(&doc.image, g2)?,
                label: PairLabel::Different,
                strategy: PairStrategy::Background,
            });
        }
    }
    Err(Error::SamplingExhausted {
        strategy: PairStrategy::Background.name().to_string(),
        attempts: cfg.max_rejections,
    })
}

/// One manifest row: everything needed to re-crop the pair and re-verify its
/// strategy condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: u64,
    pub label: PairLabel,
    pub strategy: PairStrategy,
    pub source_id_a: String,
    pub source_id_b: String,
    pub geometry_a: PatchGeometry,
    pub geometry_b: PatchGeometry,
    pub stats_a: ComponentStats,
    pub stats_b: ComponentStats,
}

/// Pair dataset description: entries plus per-strategy counts and the sampler
/// config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDatasetManifest {
    pub config: SamplerConfig,
    pub counts: BTreeMap<PairStrategy, usize>,
    pub entries: Vec<PairRecord>,
}

impl PairDatasetManifest {
    pub fn count(&self, strategy: PairStrategy) -> usize {
        self.counts.get(&strategy).copied().unwrap_or(0)
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let similar = self
            .entries
            .iter()
            .filter(|e| e.label == PairLabel::Similar)
            .count();
        (similar, self.entries.len() - similar)
    }

    /// Distinct source document ids referenced by the entries.
    pub fn source_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .entries
            .iter()
            .flat_map(|e| [e.source_id_a.clone(), e.source_id_b.clone()])
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Writes the manifest as JSON lines: a header record followed by one
    /// record per pair.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = ManifestHeader {
            kind: "pair_manifest".to_string(),
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            counts: self.counts.clone(),
        };
        let mut line = serde_json::to_string(&header)
            .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        for entry in &self.entries {
            let mut line = serde_json::to_string(entry)
                .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Config("empty manifest file".to_string()))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Config(format!("bad manifest header: {e}")))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                header.version
            )));
        }
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Config(format!("bad manifest record: {e}")))?,
            );
        }
        Ok(Self {
            config: header.config,
            counts: header.counts,
            entries,
        })
    }
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    kind: String,
    version: u32,
    config: SamplerConfig,
    counts: BTreeMap<PairStrategy, usize>,
}

/// Per-strategy pair budget for a balanced dataset of `total` pairs: half
/// proximity, the other half split as evenly as possible across the three
/// different-pair strategies.
pub fn strategy_budget(total: usize) -> BTreeMap<PairStrategy, usize> {
    let n_diff = total / 2;
    let base = n_diff / 3;
    let rem = n_diff % 3;
    let mut counts = BTreeMap::new();
    counts.insert(PairStrategy::Proximity, total - n_diff);
    counts.insert(PairStrategy::ComponentSize, base + usize::from(rem > 0));
    counts.insert(PairStrategy::ForegroundCount, base + usize::from(rem > 1));
    counts.insert(PairStrategy::Background, base);
    counts
}

/// Builds a balanced pair dataset from the given documents. Deterministic for
/// a fixed `cfg.rng_seed`; fails with the offending strategy when a sampler
/// exhausts its rejection budget.
pub fn build_pair_dataset(
    docs: &[PreparedDoc],
    total: usize,
    cfg: &SamplerConfig,
    rng: &mut Prng,
) -> Result<PairDatasetManifest> {
    cfg.validate()?;
    if total % 2 != 0 {
        return Err(Error::Config(format!(
            "total pair count must be even for balanced classes, got {total}"
        )));
    }
    docs_usable(docs, cfg.patch_size)?;
    let budget = strategy_budget(total);
    let mut entries = Vec::with_capacity(total);
    let order = [
        PairStrategy::Proximity,
        PairStrategy::ComponentSize,
        PairStrategy::ForegroundCount,
        PairStrategy::Background,
    ];
    let mut pair_id = 0u64;
    for strategy in order {
        for _ in 0..budget[&strategy] {
            let pair = match strategy {
                PairStrategy::Proximity => sample_neighbor_pair(pick_doc(docs, rng), cfg, rng)?,
                PairStrategy::ComponentSize => sample_component_size_pair(docs, cfg, rng)?,
                PairStrategy::ForegroundCount => sample_foreground_pair(docs, cfg, rng)?,
                PairStrategy::Background => sample_background_pair(docs, cfg, rng)?,
            };
            let doc = docs
                .iter()
                .find(|d| d.image.source_id() == pair.patch_a.source_id)
                .expect("sampled pair references a known document");
            entries.push(PairRecord {
                pair_id,
                label: pair.label,
                strategy,
                source_id_a: pair.patch_a.source_id.clone(),
                source_id_b: pair.patch_b.source_id.clone(),
                geometry_a: pair.patch_a.geometry,
                geometry_b: pair.patch_b.geometry,
                stats_a: component_stats(&doc.binary, pair.patch_a.geometry, cfg.min_area),
                stats_b: component_stats(&doc.binary, pair.patch_b.geometry, cfg.min_area),
            });
            pair_id += 1;
        }
    }
    Ok(PairDatasetManifest {
        config: cfg.clone(),
        counts: budget,
        entries,
    })
}

/// Re-checks every manifest entry against its strategy's defining condition,
/// recomputing the statistics from the stored geometries.
pub fn audit_manifest(manifest: &PairDatasetManifest, docs: &[PreparedDoc]) -> Result<()> {
    let cfg = &manifest.config;
    let by_id: BTreeMap<&str, &PreparedDoc> = docs
        .iter()
        .map(|d| (d.image.source_id(), d))
        .collect();
    for entry in &manifest.entries {
        let doc = by_id.get(entry.source_id_a.as_str()).ok_or_else(|| {
            Error::Config(format!(
                "manifest references unknown doc {}",
                entry.source_id_a
            ))
        })?;
        if entry.source_id_a != entry.source_id_b {
            return Err(Error::Config(format!(
                "pair {} spans documents {} and {}",
                entry.pair_id, entry.source_id_a, entry.source_id_b
            )));
        }
        if entry.label != entry.strategy.label() {
            return Err(Error::Config(format!(
                "pair {} label disagrees with strategy {}",
                entry.pair_id,
                entry.strategy.name()
            )));
        }
        let fail = |what: String| {
            Err(Error::Config(format!(
                "pair {} violates {}: {what}",
                entry.pair_id,
                entry.strategy.name()
            )))
        };
        match entry.strategy {
            PairStrategy::Proximity => {
                let s = cfg.patch_size as i64;
                let p = cfg.perturb_px();
                let dx = (entry.geometry_b.x as i64 - entry.geometry_a.x as i64).abs();
                let dy = (entry.geometry_b.y as i64 - entry.geometry_a.y as i64).abs();
                let near = |d: i64| d <= p;
                let far = |d: i64| (s - p..=s + p).contains(&d);
                if !((near(dx) || far(dx)) && (near(dy) || far(dy)) && (far(dx) || far(dy))) {
                    return fail(format!("offset ({dx}, {dy}) outside neighbor ranges"));
                }
            }
            PairStrategy::ComponentSize => {
                let sa = component_stats(&doc.binary, entry.geometry_a, cfg.min_area);
                let sb = component_stats(&doc.binary, entry.geometry_b, cfg.min_area);
                if is_background_region(&doc.binary, entry.geometry_a, cfg)
                    || is_background_region(&doc.binary, entry.geometry_b, cfg)
                {
                    return fail("background patch in a component-size pair".to_string());
                }
                match similarity_s1(&sa, &sb) {
                    Ok(s) if s < cfg.s_threshold => {}
                    Ok(s) => return fail(format!("s1 = {s} not below {}", cfg.s_threshold)),
                    Err(_) => return fail("s1 undefined".to_string()),
                }
            }
            PairStrategy::ForegroundCount => {
                let aa = component_stats(&doc.binary, entry.geometry_a, cfg.min_area)
                    .foreground_count;
                let ab = component_stats(&doc.binary, entry.geometry_b, cfg.min_area)
                    .foreground_count;
                if is_background_region(&doc.binary, entry.geometry_a, cfg)
                    || is_background_region(&doc.binary, entry.geometry_b, cfg)
                {
                    return fail("background patch in a foreground-count pair".to_string());
                }
                match similarity_s2(aa, ab) {
                    Ok(s) if s < cfg.s_threshold => {}
                    Ok(s) => return fail(format!("s2 = {s} not below {}", cfg.s_threshold)),
                    Err(_) => return fail("s2 undefined".to_string()),
                }
            }
            PairStrategy::Background => {
                let bg_a = is_background_region(&doc.binary, entry.geometry_a, cfg);
                let bg_b = is_background_region(&doc.binary, entry.geometry_b, cfg);
                if bg_a == bg_b {
                    return fail("not exactly one background patch".to_string());
                }
            }
        }
    }
    let (similar, different) = manifest.label_counts();
    if similar != different {
        return Err(Error::Config(format!(
            "unbalanced manifest: {similar} similar vs {different} different"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn stats(h: f64, w: f64) -> ComponentStats {
        ComponentStats {
            avg_height: h,
            avg_width: w,
            component_count: 1,
            foreground_count: 1,
        }
    }

    /// Page with two glyph sizes: tall bars in a central block, short bars in
    /// the left margin, and blank strips top and bottom wide enough to host
    /// whole background patches.
    fn two_font_page(id: &str) -> PreparedDoc {
        let mut px = Array2::from_elem((384, 384), 1.0);
        // main block: 24px-tall bars on a grid
        for by in 0..5 {
            for bx in 0..6 {
                let y0 = 90 + by * 44;
                let x0 = 128 + bx * 36;
                for y in y0..y0 + 24 {
                    for x in x0..x0 + 18 {
                        px[[y, x]] = 0.1;
                    }
                }
            }
        }
        // margin block: 8px-tall bars
        for by in 0..12 {
            for bx in 0..4 {
                let y0 = 90 + by * 18;
                let x0 = 16 + bx * 20;
                for y in y0..y0 + 8 {
                    for x in x0..x0 + 7 {
                        px[[y, x]] = 0.1;
                    }
                }
            }
        }
        PreparedDoc::new(DocumentImage::new(px, id).unwrap())
    }

    /// Page covered edge to edge in identical glyphs.
    fn uniform_page(id: &str) -> PreparedDoc {
        let mut px = Array2::from_elem((320, 320), 1.0);
        for by in 0..16 {
            for bx in 0..16 {
                let y0 = by * 20;
                let x0 = bx * 20;
                for y in y0..y0 + 12 {
                    for x in x0..x0 + 12 {
                        px[[y, x]] = 0.1;
                    }
                }
            }
        }
        PreparedDoc::new(DocumentImage::new(px, id).unwrap())
    }

    fn small_cfg() -> SamplerConfig {
        SamplerConfig {
            patch_size: 64,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn s1_direct_arithmetic() {
        assert!(
            (similarity_s1(&stats(20.0, 10.0), &stats(10.0, 5.0)).unwrap() - 0.25).abs() < 1e-12
        );
        assert_eq!(similarity_s1(&stats(7.0, 3.0), &stats(7.0, 3.0)).unwrap(), 1.0);
        let s = similarity_s1(&stats(30.0, 10.0), &stats(10.0, 10.0)).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn s1_zero_product_is_error() {
        let empty = ComponentStats {
            avg_height: 0.0,
            avg_width: 0.0,
            component_count: 0,
            foreground_count: 5,
        };
        assert!(matches!(
            similarity_s1(&empty, &stats(10.0, 10.0)),
            Err(Error::UndefinedStatistic(_))
        ));
    }

    #[test]
    fn s2_direct_arithmetic() {
        assert!((similarity_s2(100, 500).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(similarity_s2(123, 123).unwrap(), 1.0);
        assert!((similarity_s2(499, 500).unwrap() - 0.998).abs() < 1e-12);
        assert!(matches!(
            similarity_s2(0, 10),
            Err(Error::UndefinedStatistic(_))
        ));
    }

    #[test]
    fn neighbor_base_position_east() {
        let p1 = PatchGeometry::new(300, 300, 200);
        assert_eq!(NeighborOffset::East.base_position(p1), (500, 300));
        assert_eq!(NeighborOffset::NorthWest.base_position(p1), (100, 100));
    }

    #[test]
    fn neighbor_pairs_respect_perturbation_bound() {
        let doc = two_font_page("p0");
        let cfg = small_cfg();
        let mut rng = Prng::seed_from_u64(11);
        let p = cfg.perturb_px();
        let s = cfg.patch_size as i64;
        let mut seen_far_x = 0;
        for _ in 0..500 {
            let pair = sample_neighbor_pair(&doc, &cfg, &mut rng).unwrap();
            assert_eq!(pair.label, PairLabel::Similar);
            let dx = (pair.patch_b.geometry.x as i64 - pair.patch_a.geometry.x as i64).abs();
            let dy = (pair.patch_b.geometry.y as i64 - pair.patch_a.geometry.y as i64).abs();
            for d in [dx, dy] {
                assert!(d <= p || (s - p..=s + p).contains(&d), "delta {d} out of range");
            }
            assert!(dx > p || dy > p, "at least one axis must be a full step");
            if dx > p {
                seen_far_x += 1;
            }
        }
        assert!(seen_far_x > 0);
    }

    #[test]
    fn neighbor_pairs_cover_all_eight_offsets() {
        let doc = two_font_page("p0");
        let cfg = small_cfg();
        let mut rng = Prng::seed_from_u64(3);
        let p = cfg.perturb_px();
        let mut counts = [0usize; 8];
        let n = 10_000;
        for _ in 0..n {
            let pair = sample_neighbor_pair(&doc, &cfg, &mut rng).unwrap();
            let dx = pair.patch_b.geometry.x as i64 - pair.patch_a.geometry.x as i64;
            let dy = pair.patch_b.geometry.y as i64 - pair.patch_a.geometry.y as i64;
            let sx = if dx.abs() > p { dx.signum() } else { 0 };
            let sy = if dy.abs() > p { dy.signum() } else { 0 };
            let idx = NEIGHBOR_OFFSETS
                .iter()
                .position(|o| o.delta() == (sx, sy))
                .expect("recovered offset must be one of the eight");
            counts[idx] += 1;
        }
        // crude chi-square sanity: every offset occurs with roughly uniform mass
        for &c in &counts {
            assert!(c > n / 8 / 2, "offset badly underrepresented: {counts:?}");
        }
    }

    #[test]
    fn component_size_pairs_satisfy_s1() {
        let docs = vec![two_font_page("p0"), two_font_page("p1")];
        let cfg = small_cfg();
        let mut rng = Prng::seed_from_u64(5);
        for _ in 0..50 {
            let pair = sample_component_size_pair(&docs, &cfg, &mut rng).unwrap();
            assert_eq!(pair.strategy, PairStrategy::ComponentSize);
            let doc = docs
                .iter()
                .find(|d| d.image.source_id() == pair.patch_a.source_id)
                .unwrap();
            let sa = component_stats(&doc.binary, pair.patch_a.geometry, cfg.min_area);
            let sb = component_stats(&doc.binary, pair.patch_b.geometry, cfg.min_area);
            assert!(similarity_s1(&sa, &sb).unwrap() < cfg.s_threshold);
        }
    }

    #[test]
    fn component_size_exhausts_on_uniform_font() {
        let docs = vec![uniform_page("u0")];
        let cfg = SamplerConfig {
            patch_size: 64,
            max_rejections: 300,
            ..SamplerConfig::default()
        };
        let mut rng = Prng::seed_from_u64(1);
        assert!(matches!(
            sample_component_size_pair(&docs, &cfg, &mut rng),
            Err(Error::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn foreground_pairs_satisfy_s2() {
        let docs = vec![two_font_page("p0")];
        let cfg = small_cfg();
        let mut rng = Prng::seed_from_u64(9);
        for _ in 0..50 {
            let pair = sample_foreground_pair(&docs, &cfg, &mut rng).unwrap();
            let doc = &docs[0];
            let aa = component_stats(&doc.binary, pair.patch_a.geometry, cfg.min_area)
                .foreground_count;
            let ab = component_stats(&doc.binary, pair.patch_b.geometry, cfg.min_area)
                .foreground_count;
            assert!(similarity_s2(aa, ab).unwrap() < cfg.s_threshold);
        }
    }

    #[test]
    fn foreground_exhausts_on_uniform_density() {
        let docs = vec![uniform_page("u0")];
        let cfg = SamplerConfig {
            patch_size: 64,
            max_rejections: 300,
            ..SamplerConfig::default()
        };
        let mut rng = Prng::seed_from_u64(1);
        assert!(matches!(
            sample_foreground_pair(&docs, &cfg, &mut rng),
            Err(Error::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn background_predicate_cases() {
        let cfg = small_cfg();
        let blank = PreparedDoc::new(
            DocumentImage::new(Array2::from_elem((64, 64), 1.0), "blank").unwrap(),
        );
        // a constant page binarizes to an empty mask, so the whole page is background
        let patch = crop_patch(&blank.image, PatchGeometry::new(0, 0, 64)).unwrap();
        assert!(is_background_patch(&patch, &blank.binary, &cfg));

        // solid ink patch: ratio 1
        let solid = PreparedDoc::new(
            DocumentImage::new(
                Array2::from_shape_fn((128, 128), |(y, _)| if y < 64 { 0.0 } else { 1.0 }),
                "solid",
            )
            .unwrap(),
        );
        let patch = crop_patch(&solid.image, PatchGeometry::new(0, 0, 64)).unwrap();
        assert!(!is_background_patch(&patch, &solid.binary, &cfg));
    }

    #[test]
    fn background_ratio_boundary() {
        // 300 foreground pixels in a 200x200 patch: 0.0075 < 0.01
        let mut mask = Array2::from_elem((200, 200), false);
        for i in 0..300 {
            mask[[40 + i / 50, 60 + (i % 50) * 2]] = true;
        }
        let bin = BinaryImage::from_mask(mask);
        let cfg = SamplerConfig::default();
        assert!(is_background_region(&bin, PatchGeometry::new(0, 0, 200), &cfg));
    }

    #[test]
    fn background_pairs_have_exactly_one_background_side() {
        let docs = vec![two_font_page("p0")];
        let cfg = small_cfg();
        let mut rng = Prng::seed_from_u64(13);
        for _ in 0..50 {
            let pair = sample_background_pair(&docs, &cfg, &mut rng).unwrap();
            let bg_a = is_background_patch(&pair.patch_a, &docs[0].binary, &cfg);
            let bg_b = is_background_patch(&pair.patch_b, &docs[0].binary, &cfg);
            assert!(bg_a != bg_b);
        }
    }

    #[test]
    fn background_exhausts_on_blank_corpus() {
        let blank = PreparedDoc::new(
            DocumentImage::new(Array2::from_elem((128, 128), 1.0), "blank").unwrap(),
        );
        let cfg = SamplerConfig {
            patch_size: 64,
            max_rejections: 300,
            ..SamplerConfig::default()
        };
        let mut rng = Prng::seed_from_u64(1);
        assert!(matches!(
            sample_background_pair(&[blank], &cfg, &mut rng),
            Err(Error::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn budget_smallest_balanced_set() {
        let counts = strategy_budget(6);
        assert_eq!(counts[&PairStrategy::Proximity], 3);
        assert_eq!(counts[&PairStrategy::ComponentSize], 1);
        assert_eq!(counts[&PairStrategy::ForegroundCount], 1);
        assert_eq!(counts[&PairStrategy::Background], 1);

        let counts = strategy_budget(60_000);
        assert_eq!(counts[&PairStrategy::Proximity], 30_000);
        assert_eq!(
            counts[&PairStrategy::ComponentSize]
                + counts[&PairStrategy::ForegroundCount]
                + counts[&PairStrategy::Background],
            30_000
        );
    }

    #[test]
    fn build_dataset_balanced_and_audited() {
        let docs = vec![two_font_page("p0"), two_font_page("p1")];
        let cfg = small_cfg();
        let mut rng = Prng::seed_from_u64(21);
        let manifest = build_pair_dataset(&docs, 24, &cfg, &mut rng).unwrap();
        assert_eq!(manifest.entries.len(), 24);
        let (sim, diff) = manifest.label_counts();
        assert_eq!((sim, diff), (12, 12));
        audit_manifest(&manifest, &docs).unwrap();
    }

    #[test]
    fn build_dataset_rejects_odd_total() {
        let docs = vec![two_font_page("p0")];
        let mut rng = Prng::seed_from_u64(2);
        assert!(matches!(
            build_pair_dataset(&docs, 7, &small_cfg(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn build_dataset_deterministic_per_seed() {
        let docs = vec![two_font_page("p0")];
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        for path in [&p1, &p2] {
            let mut rng = Prng::seed_from_u64(cfg.rng_seed);
            let manifest = build_pair_dataset(&docs, 12, &cfg, &mut rng).unwrap();
            manifest.write_jsonl(path).unwrap();
        }
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn manifest_roundtrip() {
        let docs = vec![two_font_page("p0")];
        let cfg = small_cfg();
        let mut rng = Prng::seed_from_u64(17);
        let manifest = build_pair_dataset(&docs, 12, &cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        manifest.write_jsonl(&path).unwrap();
        let back = PairDatasetManifest::read_jsonl(&path).unwrap();
        assert_eq!(manifest, back);
    }

    proptest! {
        #[test]
        fn s1_symmetric_bounded(h1 in 1.0f64..100.0, w1 in 1.0f64..100.0,
                                h2 in 1.0f64..100.0, w2 in 1.0f64..100.0) {
            let a = stats(h1, w1);
            let b = stats(h2, w2);
            let s_ab = similarity_s1(&a, &b).unwrap();
            let s_ba = similarity_s1(&b, &a).unwrap();
            prop_assert_eq!(s_ab, s_ba);
            prop_assert!(s_ab > 0.0 && s_ab <= 1.0);
            if (h1 * w1 - h2 * w2).abs() > 1e-9 {
                prop_assert!(s_ab < 1.0);
            }
        }

        #[test]
        fn s2_symmetric_bounded(a1 in 1usize..100_000, a2 in 1usize..100_000) {
            let s_ab = similarity_s2(a1, a2).unwrap();
            let s_ba = similarity_s2(a2, a1).unwrap();
            prop_assert_eq!(s_ab, s_ba);
            prop_assert!(s_ab > 0.0 && s_ab <= 1.0);
            prop_assert_eq!(s_ab == 1.0, a1 == a2);
        }

        #[test]
        fn budget_sums_to_total(total in (1usize..5000).prop_map(|n| n * 2)) {
            let counts = strategy_budget(total);
            prop_assert_eq!(counts.values().sum::<usize>(), total);
            prop_assert_eq!(counts[&PairStrategy::Proximity], total / 2);
            let diffs = [
                counts[&PairStrategy::ComponentSize],
                counts[&PairStrategy::ForegroundCount],
                counts[&PairStrategy::Background],
            ];
            let max = diffs.iter().max().unwrap();
            let min = diffs.iter().min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
