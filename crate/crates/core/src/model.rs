//! The siamese pair classifier: twin weight-tied branches, a sigmoid head,
//! ADAM training with early stopping, and checkpoint serialization.
//!
//! There is exactly one physical parameter set; both branch applications run
//! through it, so weight tying is structural rather than enforced by sync.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::DocumentSet;
use crate::error::{Error, Result};
use crate::imaging::{crop_patch, PatchGeometry};
use crate::nn::{
    bce_with_logits, branch_backward_batch, branch_forward_batch, head_backward_batch,
    head_forward_batch, sigmoid, stack_patches, AdamState, ModelSpec, ParamSet,
};
use crate::pairgen::{PairDatasetManifest, PairRecord, PatchPair};
use crate::Prng;

// Probabilities are clamped into the open interval so downstream log-space
// work never sees an exact 0 or 1.
const PROB_EPS: f64 = 1e-12;

/// Weight-tied siamese network: branch (patch -> embedding) plus a
/// pair-classification head over the concatenated embeddings.
#[derive(Debug, Clone)]
pub struct SiameseModel {
    spec: ModelSpec,
    params: ParamSet,
}

impl SiameseModel {
    /// Fresh He-initialized model. Deterministic per seed.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = ParamSet::init(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_size(&self) -> usize {
        self.spec.branch.input_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    fn check_patch(&self, patch: &ArrayView2<f64>) -> Result<()> {
        let s = self.input_size();
        if patch.dim() != (s, s) {
            return Err(Error::Shape(format!(
                "patch shape {:?} does not match model input {s}x{s}",
                patch.dim()
            )));
        }
        Ok(())
    }

    /// Embeds one patch through the shared branch.
    pub fn branch_forward(&self, patch: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_patch(&patch)?;
        let x = stack_patches(&[patch])?;
        let (emb, _) = branch_forward_batch(&self.params, &x);
        Ok(emb.row(0).to_owned())
    }

    /// Embeds a batch (n, s, s, 1).
    pub fn branch_forward_batch(&self, batch: &Array4<f64>) -> Result<Array2<f64>> {
        let s = self.input_size();
        let (_, h, w, c) = batch.dim();
        if (h, w, c) != (s, s, 1) {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match model input ({s}, {s}, 1)",
                batch.dim()
            )));
        }
        Ok(branch_forward_batch(&self.params, batch).0)
    }

    /// Probability that the pair is different (label 1), strictly inside (0, 1).
    pub fn pair_forward(&self, pair: &PatchPair) -> Result<f64> {
        self.pair_forward_views(pair.patch_a.pixels.view(), pair.patch_b.pixels.view())
    }

    pub fn pair_forward_views(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
        let probs = self.pair_forward_batch(&stack_patches(&[a])?, &stack_patches(&[b])?)?;
        Ok(probs[0])
    }

    pub fn pair_forward_batch(
        &self,
        xa: &Array4<f64>,
        xb: &Array4<f64>,
    ) -> Result<Array1<f64>> {
        let logits = self.pair_logits(xa, xb)?;
        Ok(logits.mapv(|z| sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS)))
    }

    fn pair_logits(&self, xa: &Array4<f64>, xb: &Array4<f64>) -> Result<Array1<f64>> {
        if xa.dim() != xb.dim() {
            return Err(Error::Shape(format!(
                "pair batch shapes differ: {:?} vs {:?}",
                xa.dim(),
                xb.dim()
            )));
        }
        let (emb_a, _) = branch_forward_batch(&self.params, xa);
        let (emb_b, _) = branch_forward_batch(&self.params, xb);
        let (logits, _) = head_forward_batch(&self.params, &emb_a, &emb_b);
        Ok(logits)
    }

    /// Mean pair loss on a batch (no gradient work).
    pub fn loss_batch(
        &self,
        xa: &Array4<f64>,
        xb: &Array4<f64>,
        labels: &Array1<f64>,
    ) -> Result<f64> {
        let logits = self.pair_logits(xa, xb)?;
        Ok(bce_with_logits(&logits, labels).0)
    }

    /// Mean pair loss and the gradient over the flattened parameter vector.
    /// Gradients from both branch applications accumulate into the single
    /// shared parameter set.
    pub fn loss_and_grad(
        &self,
        xa: &Array4<f64>,
        xb: &Array4<f64>,
        labels: &Array1<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        if xa.dim() != xb.dim() {
            return Err(Error::Shape(format!(
                "pair batch shapes differ: {:?} vs {:?}",
                xa.dim(),
                xb.dim()
            )));
        }
        let (emb_a, cache_a) = branch_forward_batch(&self.params, xa);
        let (emb_b, cache_b) = branch_forward_batch(&self.params, xb);
        let (logits, head_cache) = head_forward_batch(&self.params, &emb_a, &emb_b);
        let (loss, d_logits) = bce_with_logits(&logits, labels);
        let mut grads = self.params.zeros_like();
        let (d_emb_a, d_emb_b) =
            head_backward_batch(&self.params, &head_cache, &d_logits, &mut grads);
        branch_backward_batch(&self.params, &cache_a, &d_emb_a, &mut grads);
        branch_backward_batch(&self.params, &cache_b, &d_emb_b, &mut grads);
        Ok((loss, grads.flatten()))
    }

    /// Detaches the branch as a standalone feature extractor; the head is
    /// dropped and outputs are bit-identical to `branch_forward`.
    pub fn extract_branch(&self) -> FeatureExtractor {
        FeatureExtractor {
            spec: self.spec.clone(),
            params: ParamSet {
                conv: self.params.conv.clone(),
                branch_fcs: self.params.branch_fcs.clone(),
                head_fcs: Vec::new(),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params.flatten()
    }

    pub fn load_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.params.load_flat(flat)
    }

    pub fn get_param(&self, index: usize) -> f64 {
        self.params.flatten()[index]
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let mut flat = self.params.flatten();
        flat[index] = value;
        self.params.load_flat(&flat).expect("same length");
    }
}

/// Branch-only network used for feature extraction.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    spec: ModelSpec,
    params: ParamSet,
}

impl FeatureExtractor {
    pub fn input_size(&self) -> usize {
        self.spec.branch.input_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    pub fn embed(&self, patch: ArrayView2<f64>) -> Result<Array1<f64>> {
        let s = self.input_size();
        if patch.dim() != (s, s) {
            return Err(Error::Shape(format!(
                "patch shape {:?} does not match extractor input {s}x{s}",
                patch.dim()
            )));
        }
        let x = stack_patches(&[patch])?;
        let (emb, _) = branch_forward_batch(&self.params, &x);
        Ok(emb.row(0).to_owned())
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping.
    pub early_stop_patience: usize,
    pub rng_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 5,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SiameseModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn crop_for(
    docs: &DocumentSet,
    id: &str,
    geom: PatchGeometry,
) -> Result<ndarray::Array2<f64>> {
    let doc = docs.require(id)?;
    Ok(crop_patch(doc, geom)?.pixels)
}

fn batch_tensors(
    entries: &[&PairRecord],
    docs: &DocumentSet,
) -> Result<(Array4<f64>, Array4<f64>, Array1<f64>)> {
    let mut patches_a = Vec::with_capacity(entries.len());
    let mut patches_b = Vec::with_capacity(entries.len());
    let mut labels = Array1::<f64>::zeros(entries.len());
    for (i, e) in entries.iter().enumerate() {
        patches_a.push(crop_for(docs, &e.source_id_a, e.geometry_a)?);
        patches_b.push(crop_for(docs, &e.source_id_b, e.geometry_b)?);
        labels[i] = e.label.as_f64();
    }
    let views_a: Vec<ArrayView2<f64>> = patches_a.iter().map(|p| p.view()).collect();
    let views_b: Vec<ArrayView2<f64>> = patches_b.iter().map(|p| p.view()).collect();
    Ok((stack_patches(&views_a)?, stack_patches(&views_b)?, labels))
}

fn mean_loss_over(
    model: &SiameseModel,
    entries: &[PairRecord],
    docs: &DocumentSet,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in entries.chunks(batch_size) {
        let refs: Vec<&PairRecord> = chunk.iter().collect();
        let (xa, xb, labels) = batch_tensors(&refs, docs)?;
        total += model.loss_batch(&xa, &xb, &labels)? * chunk.len() as f64;
    }
    Ok(total / entries.len() as f64)
}

/// Trains on the manifest pairs with ADAM, tracking validation loss per epoch
/// and returning the parameters of the best validation epoch.
///
/// Train and validation manifests must reference disjoint document sets.
pub fn train(
    mut model: SiameseModel,
    train_pairs: &PairDatasetManifest,
    val_pairs: &PairDatasetManifest,
    docs: &DocumentSet,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    if train_pairs.entries.is_empty() || val_pairs.entries.is_empty() {
        return Err(Error::Config(
            "train and validation manifests must be non-empty".to_string(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".to_string()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::Config("learning_rate must be positive".to_string()));
    }
    let train_ids = train_pairs.source_ids();
    let val_ids = val_pairs.source_ids();
    if let Some(shared) = train_ids.iter().find(|id| val_ids.contains(id)) {
        return Err(Error::Config(format!(
            "document {shared} appears in both train and validation pairs"
        )));
    }
    if train_pairs.config.patch_size != model.input_size() {
        return Err(Error::Config(format!(
            "manifest patch size {} does not match model input {}",
            train_pairs.config.patch_size,
            model.input_size()
        )));
    }

    let mut history = Vec::new();
    let mut adam = AdamState::new(model.param_count());
    let mut rng = Prng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_pairs.entries.len()).collect();
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&PairRecord> =
                chunk.iter().map(|&i| &train_pairs.entries[i]).collect();
            let (xa, xb, labels) = batch_tensors(&refs, docs)?;
            let (loss, grads) = model.loss_and_grad(&xa, &xb, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite training loss {loss}"),
                });
            }
            let mut flat = model.params_flat();
            adam.step(&mut flat, &grads, cfg.learning_rate);
            model.load_params_flat(&flat)?;
            train_total += loss * chunk.len() as f64;
        }
        let train_loss = train_total / train_pairs.entries.len() as f64;
        let val_loss = mean_loss_over(&model, &val_pairs.entries, docs, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("non-finite validation loss {val_loss}"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = best.as_ref().map_or(true, |(_, v, _)| val_loss < *v);
        if improved {
            best = Some((epoch, val_loss, model.params_flat()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss) = match best {
        Some((epoch, val, params)) => {
            model.load_params_flat(&params)?;
            (epoch, val)
        }
        None => (0, f64::NAN), // zero epochs requested: model untouched
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss,
    })
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSEGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    history: Vec<EpochStats>,
    training_config: Option<TrainingConfig>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: SiameseModel,
    pub history: Vec<EpochStats>,
    pub training_config: Option<TrainingConfig>,
}

/// Writes the model, its architecture descriptor, and the training history to
/// a single versioned binary file.
pub fn save_checkpoint(
    model: &SiameseModel,
    history: &[EpochStats],
    training_config: Option<&TrainingConfig>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let meta = CheckpointMeta {
        spec: model.spec.clone(),
        history: history.to_vec(),
        training_config: training_config.cloned(),
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
    let params = model.params_flat();
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
    for v in &params {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a checkpoint, verifying magic, version, and parameter count.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".to_string()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Checkpoint("missing version".to_string()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| Error::Checkpoint("missing meta length".to_string()))?;
    let meta_len = u64::from_le_bytes(u64buf) as usize;
    if meta_len > 256 * 1024 * 1024 {
        return Err(Error::Checkpoint(format!("implausible meta length {meta_len}")));
    }
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json)
        .map_err(|_| Error::Checkpoint("truncated meta block".to_string()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;
    r.read_exact(&mut u64buf)
        .map_err(|_| Error::Checkpoint("missing parameter count".to_string()))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut params = ParamSet::init(&meta.spec, 0)?;
    if count != params.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match architecture ({})",
            params.param_count()
        )));
    }
    let mut flat = vec![0.0f64; count];
    let mut f64buf = [0u8; 8];
    for v in flat.iter_mut() {
        r.read_exact(&mut f64buf)
            .map_err(|_| Error::Checkpoint("truncated parameter block".to_string()))?;
        *v = f64::from_le_bytes(f64buf);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".to_string()));
    }
    params.load_flat(&flat)?;
    Ok(LoadedCheckpoint {
        model: SiameseModel {
            spec: meta.spec,
            params,
        },
        history: meta.history,
        training_config: meta.training_config,
    })
}

/// Writes the per-epoch loss curve as `epoch,train_loss,val_loss`.
pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for row in history {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, row.val_loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
