//! The embedding network and its auxiliary thickness-classification
//! training.
//!
//! A shared convolutional trunk maps a bbox crop to a 128-dim embedding;
//! two dense heads classify slice thickness (K = 5) and remaining-piece
//! thickness (K = 4). Role separation lives in the heads and in which
//! observations are fed, so slices and remaining pieces share one
//! embedding space.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model_io::{self, ModelFile, FORMAT_VERSION};
use crate::nn::adam::AdamState;
use crate::nn::loss::{softmax, softmax_cross_entropy_batch};
use crate::nn::network::{LayerSpec, Network, ParamMap};
use crate::nn::tensor::Tensor;
use crate::rng::derive_seed;
use crate::sim::dataset::{Dataset, Transition};
use crate::sim::render::{Observation, IMG_SIZE};
use crate::sim::veg::{classify_thickness, ObsRole, VegKind};

/// Embedding dimensionality.
pub const EMBED_DIM: usize = 128;

const TRUNK: &str = "trunk";
const SLICE_HEAD: &str = "slice_head";
const REMAINING_HEAD: &str = "remaining_head";

/// Embedding extractor with thickness-classification heads.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    pub veg: VegKind,
    pub trunk: Network,
    pub slice_head: Network,
    pub remaining_head: Network,
}

pub fn trunk_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_channels: 1, out_channels: 8, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 8 * 16 * 16, out_dim: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: 256, out_dim: EMBED_DIM },
    ]
}

impl EmbeddingModel {
    pub fn new(veg: VegKind, seed: u64) -> Result<Self> {
        Ok(Self {
            veg,
            trunk: Network::with_init(trunk_spec(), derive_seed(seed, 1))?,
            slice_head: Network::with_init(
                vec![LayerSpec::Dense { in_dim: EMBED_DIM, out_dim: 5 }],
                derive_seed(seed, 2),
            )?,
            remaining_head: Network::with_init(
                vec![LayerSpec::Dense { in_dim: EMBED_DIM, out_dim: 4 }],
                derive_seed(seed, 3),
            )?,
        })
    }

    fn head(&self, role: ObsRole) -> &Network {
        match role {
            ObsRole::Slice => &self.slice_head,
            ObsRole::WholeVegetable => &self.remaining_head,
        }
    }

    /// Embed one observation: crop the bbox, resize, run the trunk.
    pub fn embed(&self, obs: &Observation) -> Result<Vec<f64>> {
        let crop = obs.crop_resized()?;
        let input = Tensor::new(vec![1, 1, IMG_SIZE, IMG_SIZE], crop)?;
        let z = self.trunk.infer(&input)?;
        z.ensure_finite("embedding")?;
        Ok(z.into_data())
    }

    /// Embed a batch of pre-cropped images; returns `[N, 128]`.
    pub fn embed_crops(&self, crops: &[Vec<f64>]) -> Result<Tensor> {
        let n = crops.len();
        let mut data = Vec::with_capacity(n * IMG_SIZE * IMG_SIZE);
        for c in crops {
            data.extend_from_slice(c);
        }
        let input = Tensor::new(vec![n, 1, IMG_SIZE, IMG_SIZE], data)?;
        self.trunk.infer(&input)
    }

    /// Class probabilities for an embedding under the role's head.
    pub fn predict_class(&self, z: &[f64], role: ObsRole) -> Result<Vec<f64>> {
        if z.len() != EMBED_DIM {
            return Err(Error::DataLength { expected: EMBED_DIM, got: z.len() });
        }
        let input = Tensor::new(vec![1, EMBED_DIM], z.to_vec())?;
        let logits = self.head(role).infer(&input)?;
        Ok(softmax(logits.data()))
    }

    /// Argmax class for an embedding under the role's head.
    pub fn classify(&self, z: &[f64], role: ObsRole) -> Result<usize> {
        let probs = self.predict_class(z, role)?;
        Ok(argmax(&probs))
    }

    /// Batched head logits for `[N, 128]` embeddings.
    pub fn head_logits(&self, z: &Tensor, role: ObsRole) -> Result<Tensor> {
        self.head(role).infer(z)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut arch = self.trunk.layers.clone();
        arch.extend(self.slice_head.layers.clone());
        arch.extend(self.remaining_head.layers.clone());
        let mut params = model_io::prefixed(TRUNK, &self.trunk.params);
        params.extend(model_io::prefixed(SLICE_HEAD, &self.slice_head.params));
        params.extend(model_io::prefixed(REMAINING_HEAD, &self.remaining_head.params));
        ModelFile {
            format_version: FORMAT_VERSION,
            kind: "embedding".to_string(),
            veg_type: self.veg.name().to_string(),
            arch,
            params,
            stop_embedding: None,
            stop_threshold: None,
        }
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let veg = VegKind::parse(&file.veg_type)?;
        let n = file.arch.len();
        if n < 3 {
            return Err(Error::Config("embedding arch too short".to_string()));
        }
        let init = crate::nn::network::ParamInit { seed: 0, scheme: "loaded".to_string() };
        let trunk = Network::from_parts(
            file.arch[..n - 2].to_vec(),
            model_io::strip_prefix(TRUNK, &file.params),
            init.clone(),
        )?;
        let slice_head = Network::from_parts(
            vec![file.arch[n - 2].clone()],
            model_io::strip_prefix(SLICE_HEAD, &file.params),
            init.clone(),
        )?;
        let remaining_head = Network::from_parts(
            vec![file.arch[n - 1].clone()],
            model_io::strip_prefix(REMAINING_HEAD, &file.params),
            init,
        )?;
        Ok(Self { veg, trunk, slice_head, remaining_head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        model_io::save_model_file(path, &self.to_model_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(&model_io::load_model_file(path, "embedding")?)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One labeled crop.
#[derive(Clone, Debug)]
pub struct SampleEntry {
    pub crop: usize,
    pub role: ObsRole,
    pub label: usize,
}

/// Crops plus labeled entries drawn from a dataset split.
#[derive(Clone, Debug, Default)]
pub struct EmbedSamples {
    pub crops: Vec<Vec<f64>>,
    pub entries: Vec<SampleEntry>,
}

impl EmbedSamples {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Collect labeled crops from the given transitions.
///
/// Every slice render is a slice-head sample; every after render is a
/// remaining-head sample; each episode's first before render is added so
/// the fresh vegetable (usually the "full" class) is represented.
pub fn collect_samples(ds: &Dataset, transitions: &[&Transition]) -> Result<EmbedSamples> {
    let mut out = EmbedSamples::default();
    let mut crop_of_path: BTreeMap<String, usize> = BTreeMap::new();
    let add = |out: &mut EmbedSamples,
                   crop_of_path: &mut BTreeMap<String, usize>,
                   path: &str,
                   role: ObsRole,
                   label: usize|
     -> Result<()> {
        let crop = match crop_of_path.get(path) {
            Some(&idx) => idx,
            None => {
                let obs = ds.observation(path, role)?;
                out.crops.push(obs.crop_resized()?);
                let idx = out.crops.len() - 1;
                crop_of_path.insert(path.to_string(), idx);
                idx
            }
        };
        out.entries.push(SampleEntry { crop, role, label });
        Ok(())
    };

    for tr in transitions {
        let kind = tr.veg_kind()?;
        let l = kind.profile().nominal_length;
        if tr.t == 0 {
            let before = tr.remaining_after + tr.slice_thickness.unwrap_or(0.0);
            let label = classify_thickness(before, l, ObsRole::WholeVegetable)?;
            add(&mut out, &mut crop_of_path, &tr.obs_before, ObsRole::WholeVegetable, label)?;
        }
        add(&mut out, &mut crop_of_path, &tr.obs_after, ObsRole::WholeVegetable, tr.remaining_class)?;
        if let (Some(path), Some(class)) = (tr.slice_obs.as_ref(), tr.slice_class) {
            add(&mut out, &mut crop_of_path, path, ObsRole::Slice, class)?;
        }
    }
    Ok(out)
}

/// Training settings for the embedding network.
#[derive(Clone, Debug)]
pub struct EmbedTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Optional cap on training samples per epoch (seeded subsample).
    pub max_train_samples: Option<usize>,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self { batch_size: 16, epochs: 6, lr: 1e-3, seed: 0, max_train_samples: None }
    }
}

/// Per-epoch training metrics; a row of the metrics CSV.
#[derive(Clone, Debug)]
pub struct EmbedEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub slice_acc: f64,
    pub remaining_acc: f64,
}

pub fn write_embed_metrics_csv(path: &Path, rows: &[EmbedEpochMetrics]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_loss,slice_acc,remaining_acc\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.slice_acc, r.remaining_acc
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Mean loss and per-role accuracies plus raw label pairs for confusion
/// analysis.
#[derive(Clone, Debug, Default)]
pub struct EvalStats {
    pub mean_loss: f64,
    pub slice_acc: f64,
    pub remaining_acc: f64,
    pub slice_true: Vec<usize>,
    pub slice_pred: Vec<usize>,
    pub remaining_true: Vec<usize>,
    pub remaining_pred: Vec<usize>,
}

/// Evaluate the two classification heads over a sample set.
pub fn evaluate_model(model: &EmbeddingModel, samples: &EmbedSamples) -> Result<EvalStats> {
    let mut stats = EvalStats::default();
    if samples.entries.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    let mut total_loss = 0.0;
    for chunk in samples.entries.chunks(256) {
        let crops: Vec<Vec<f64>> =
            chunk.iter().map(|e| samples.crops[e.crop].clone()).collect();
        let z = model.embed_crops(&crops)?;
        for (row, entry) in chunk.iter().enumerate() {
            let zrow = &z.data()[row * EMBED_DIM..(row + 1) * EMBED_DIM];
            let probs = model.predict_class(zrow, entry.role)?;
            total_loss -= probs[entry.label].max(f64::MIN_POSITIVE).ln();
            let pred = argmax(&probs);
            match entry.role {
                ObsRole::Slice => {
                    stats.slice_true.push(entry.label);
                    stats.slice_pred.push(pred);
                }
                ObsRole::WholeVegetable => {
                    stats.remaining_true.push(entry.label);
                    stats.remaining_pred.push(pred);
                }
            }
        }
    }
    stats.mean_loss = total_loss / samples.entries.len() as f64;
    stats.slice_acc = accuracy(&stats.slice_true, &stats.slice_pred);
    stats.remaining_acc = accuracy(&stats.remaining_true, &stats.remaining_pred);
    Ok(stats)
}

fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth.iter().zip(pred.iter()).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Train the embedding network on a dataset.
///
/// Minimizes the summed cross-entropy of both heads over shuffled
/// mini-batches with Adam; the 80/20 split is by episode. Deterministic
/// per seed.
pub fn train_embedding(
    dataset: &Dataset,
    cfg: &EmbedTrainConfig,
) -> Result<(EmbeddingModel, Vec<EmbedEpochMetrics>)> {
    let kind = dataset.transitions[0].veg_kind()?;
    let (train_tr, val_tr) = dataset.split_by_episode();
    let mut train = collect_samples(dataset, &train_tr)?;
    let val = collect_samples(dataset, &val_tr)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    let has_slice = train.entries.iter().any(|e| e.role == ObsRole::Slice);
    let has_remaining = train.entries.iter().any(|e| e.role == ObsRole::WholeVegetable);
    if !has_slice || !has_remaining {
        return Err(Error::EmptyInput("dataset must contain both slice and remaining samples"));
    }
    if let Some(cap) = cfg.max_train_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5ab));
        train.entries.shuffle(&mut rng);
        train.entries.truncate(cap);
    }

    let mut model = EmbeddingModel::new(kind, cfg.seed)?;
    let mut params = merged_params(&model);
    let mut opt = AdamState::new(&params, cfg.lr);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..train.entries.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xe90c + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            let entries: Vec<&SampleEntry> =
                batch_ids.iter().map(|&i| &train.entries[i]).collect();
            let loss = train_batch(&mut model, &mut params, &mut opt, &train.crops, &entries)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { context: "embedding training loss" });
            }
            epoch_loss += loss;
        }
        let val_stats = if val.is_empty() {
            EvalStats::default()
        } else {
            evaluate_model(&model, &val)?
        };
        metrics.push(EmbedEpochMetrics {
            epoch,
            train_loss: epoch_loss / train.entries.len() as f64,
            val_loss: val_stats.mean_loss,
            slice_acc: val_stats.slice_acc,
            remaining_acc: val_stats.remaining_acc,
        });
    }
    Ok((model, metrics))
}

fn merged_params(model: &EmbeddingModel) -> ParamMap {
    let mut params = model_io::prefixed(TRUNK, &model.trunk.params);
    params.extend(model_io::prefixed(SLICE_HEAD, &model.slice_head.params));
    params.extend(model_io::prefixed(REMAINING_HEAD, &model.remaining_head.params));
    params
}

fn apply_params(model: &mut EmbeddingModel, params: &ParamMap) {
    model.trunk.params = model_io::strip_prefix(TRUNK, params);
    model.slice_head.params = model_io::strip_prefix(SLICE_HEAD, params);
    model.remaining_head.params = model_io::strip_prefix(REMAINING_HEAD, params);
}

/// One optimizer step over a mixed-role mini-batch. Returns the summed
/// cross-entropy over the batch.
fn train_batch(
    model: &mut EmbeddingModel,
    params: &mut ParamMap,
    opt: &mut AdamState,
    crops: &[Vec<f64>],
    entries: &[&SampleEntry],
) -> Result<f64> {
    let n = entries.len();
    let mut data = Vec::with_capacity(n * IMG_SIZE * IMG_SIZE);
    for e in entries {
        data.extend_from_slice(&crops[e.crop]);
    }
    let input = Tensor::new(vec![n, 1, IMG_SIZE, IMG_SIZE], data)?;
    let (z, trunk_tape) = model.trunk.forward(&input)?;

    let mut dz = vec![0.0; n * EMBED_DIM];
    let mut total_loss = 0.0;
    let mut grads = ParamMap::new();
    let scale = 1.0 / n as f64;

    for (role, prefix) in [(ObsRole::Slice, SLICE_HEAD), (ObsRole::WholeVegetable, REMAINING_HEAD)] {
        let rows: Vec<usize> =
            (0..n).filter(|&i| entries[i].role == role).collect();
        if rows.is_empty() {
            continue;
        }
        let mut sub = Vec::with_capacity(rows.len() * EMBED_DIM);
        for &r in &rows {
            sub.extend_from_slice(&z.data()[r * EMBED_DIM..(r + 1) * EMBED_DIM]);
        }
        let sub = Tensor::new(vec![rows.len(), EMBED_DIM], sub)?;
        let labels: Vec<usize> = rows.iter().map(|&r| entries[r].label).collect();
        let head = match role {
            ObsRole::Slice => &model.slice_head,
            ObsRole::WholeVegetable => &model.remaining_head,
        };
        let (logits, head_tape) = head.forward(&sub)?;
        let (loss, mut dlogits) = softmax_cross_entropy_batch(&logits, &labels)?;
        total_loss += loss;
        for g in dlogits.data_mut() {
            *g *= scale;
        }
        let head_grads = head.backward(&head_tape, &dlogits)?;
        for (name, grad) in model_io::prefixed(prefix, &head_grads.params) {
            grads.insert(name, grad);
        }
        for (i, &r) in rows.iter().enumerate() {
            let src = &head_grads.input.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            dz[r * EMBED_DIM..(r + 1) * EMBED_DIM].copy_from_slice(src);
        }
    }

    let dz = Tensor::new(vec![n, EMBED_DIM], dz)?;
    let trunk_grads = model.trunk.backward(&trunk_tape, &dz)?;
    for (name, grad) in model_io::prefixed(TRUNK, &trunk_grads.params) {
        grads.insert(name, grad);
    }
    opt.step(params, &grads)?;
    apply_params(model, params);
    Ok(total_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::dataset::{generate_dataset, GenConfig};
    use crate::sim::render::render_slice;
    use tempfile::TempDir;

    #[test]
    fn embedding_has_dimension_128_and_is_deterministic() {
        let model = EmbeddingModel::new(VegKind::Cucumber, 1).unwrap();
        let obs = render_slice(2.0, VegKind::Cucumber, 3).unwrap();
        let a = model.embed(&obs).unwrap();
        let b = model.embed(&obs).unwrap();
        assert_eq!(a.len(), EMBED_DIM);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn all_zero_image_embeds_finite() {
        let model = EmbeddingModel::new(VegKind::Cucumber, 2).unwrap();
        let crop = vec![0.0; IMG_SIZE * IMG_SIZE];
        let z = model.embed_crops(&[crop]).unwrap();
        assert_eq!(z.shape(), &[1, EMBED_DIM]);
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn probabilities_sum_to_one_and_zero_head_is_uniform() {
        let mut model = EmbeddingModel::new(VegKind::Cucumber, 3).unwrap();
        let z: Vec<f64> = (0..EMBED_DIM).map(|i| (i as f64 * 0.1).sin()).collect();
        let probs = model.predict_class(&z, ObsRole::Slice).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Zero the slice head: uniform 1/5 output.
        for t in model.slice_head.params.values_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let probs = model.predict_class(&z, ObsRole::Slice).unwrap();
        for p in probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_ignores_pixels_outside_bbox() {
        let model = EmbeddingModel::new(VegKind::Cucumber, 4).unwrap();
        let obs = render_slice(3.0, VegKind::Cucumber, 7).unwrap();
        let z = model.embed(&obs).unwrap();
        let mut tampered = obs.clone();
        for y in 0..IMG_SIZE {
            for x in 0..IMG_SIZE {
                let inside = x >= obs.bbox.x
                    && x < obs.bbox.x + obs.bbox.w
                    && y >= obs.bbox.y
                    && y < obs.bbox.y + obs.bbox.h;
                if !inside {
                    tampered.pixels[y * IMG_SIZE + x] = 0.77;
                }
            }
        }
        assert_eq!(model.embed(&tampered).unwrap(), z);
    }

    fn tiny_dataset() -> (TempDir, Dataset) {
        let dir = TempDir::new().unwrap();
        let cfg = GenConfig { kind: VegKind::Cucumber, episodes: 10, master_seed: 5, noise_sigma: 0.1 };
        generate_dataset(dir.path(), &cfg).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let (_dir, ds) = tiny_dataset();
        let all: Vec<&Transition> = ds.transitions.iter().collect();
        let mut samples = collect_samples(&ds, &all).unwrap();
        samples.entries.truncate(16);
        let fresh = EmbeddingModel::new(VegKind::Cucumber, 9).unwrap();
        let before = evaluate_model(&fresh, &samples).unwrap().mean_loss;

        let cfg = EmbedTrainConfig {
            epochs: 1,
            seed: 9,
            max_train_samples: Some(16),
            ..Default::default()
        };
        let (model, metrics) = train_embedding(&ds, &cfg).unwrap();
        assert_eq!(metrics.len(), 1);
        let after = evaluate_model(&model, &samples).unwrap().mean_loss;
        assert!(after < before, "loss {after} !< {before}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (_dir, ds) = tiny_dataset();
        let cfg = EmbedTrainConfig {
            epochs: 1,
            seed: 31,
            max_train_samples: Some(48),
            ..Default::default()
        };
        let (m1, _) = train_embedding(&ds, &cfg).unwrap();
        let (m2, _) = train_embedding(&ds, &cfg).unwrap();
        let d1 = TempDir::new().unwrap();
        let p1 = d1.path().join("a.json");
        let p2 = d1.path().join("b.json");
        m1.save(&p1).unwrap();
        m2.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn model_file_round_trip() {
        let model = EmbeddingModel::new(VegKind::Tomato, 8).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("embed.json");
        model.save(&path).unwrap();
        let loaded = EmbeddingModel::load(&path).unwrap();
        assert_eq!(loaded.veg, VegKind::Tomato);
        assert_eq!(loaded.trunk.params, model.trunk.params);
        assert_eq!(loaded.slice_head.params, model.slice_head.params);
        let obs = render_slice(1.0, VegKind::Tomato, 2).unwrap();
        assert_eq!(loaded.embed(&obs).unwrap(), model.embed(&obs).unwrap());
    }
}
