//! Latent forward model: predicts the next vegetable embedding and the
//! new-slice embedding from the current embedding plus a normalized
//! action, with a trainable STOP embedding standing in for "no slice was
//! created".
//!
//! Multi-step training follows a curriculum: the unroll horizon starts at
//! one step and grows by one after every `horizon_epoch_step` epochs up to
//! `max_horizon`; beyond the first step the model consumes its own
//! predictions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{EmbeddingModel, EMBED_DIM};
use crate::error::{Error, Result};
use crate::model_io::{self, ModelFile, FORMAT_VERSION};
use crate::nn::adam::AdamState;
use crate::nn::loss::mse_loss;
use crate::nn::network::{LayerSpec, Network, ParamMap};
use crate::nn::tensor::Tensor;
use crate::rng::derive_seed;
use crate::sim::dataset::{Dataset, Transition};
use crate::sim::render::IMG_SIZE;
use crate::sim::veg::{CutAction, VegKind};

const NET: &str = "net";
const STOP_KEY: &str = "stop_embedding";
const PSI: &str = "psi";

/// Forward dynamics model in embedding space.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    pub veg: VegKind,
    /// 129 -> 256 -> 256 -> 256; the output splits into predicted object
    /// embedding (first 128) and predicted slice embedding (last 128).
    pub net: Network,
    pub stop_embedding: Tensor,
    pub stop_threshold: Option<f64>,
}

pub fn forward_net_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { in_dim: EMBED_DIM + 1, out_dim: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: 256, out_dim: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: 256, out_dim: 2 * EMBED_DIM },
    ]
}

impl ForwardModel {
    pub fn new(veg: VegKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5709));
        let stop: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Ok(Self {
            veg,
            net: Network::with_init(forward_net_spec(), derive_seed(seed, 0xf0))?,
            stop_embedding: Tensor::from_vec(stop),
            stop_threshold: None,
        })
    }

    /// Normalize a commanded thickness to [0, 1] by the action-range max.
    pub fn normalize_action(&self, d: f64) -> f64 {
        d / self.veg.profile().action_range.1
    }

    /// One latent step for a batch: `[N, 128]` embeddings and per-row
    /// normalized actions in, `([N,128], [N,128])` out.
    pub fn predict_batch(&self, z: &Tensor, a_norm: &[f64]) -> Result<(Tensor, Tensor)> {
        let n = z.shape()[0];
        if z.shape() != [n, EMBED_DIM] || a_norm.len() != n {
            return Err(Error::ShapeMismatch {
                context: "predict_batch",
                left: z.shape().to_vec(),
                right: vec![n, EMBED_DIM],
            });
        }
        let input = concat_action(z, a_norm)?;
        let out = self.net.infer(&input)?;
        split_output(&out)
    }

    /// Predict the next object and slice embeddings for one state-action
    /// pair.
    pub fn predict_step(&self, z_o: &[f64], action: CutAction) -> Result<(Vec<f64>, Vec<f64>)> {
        if z_o.len() != EMBED_DIM {
            return Err(Error::DataLength { expected: EMBED_DIM, got: z_o.len() });
        }
        if z_o.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "predict_step input" });
        }
        let z = Tensor::new(vec![1, EMBED_DIM], z_o.to_vec())?;
        let (zo, zs) = self.predict_batch(&z, &[self.normalize_action(action.d)])?;
        Ok((zo.into_data(), zs.into_data()))
    }

    /// Euclidean distance from a predicted slice embedding to the STOP
    /// embedding.
    pub fn stop_distance(&self, z_s: &[f64]) -> f64 {
        z_s.iter()
            .zip(self.stop_embedding.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// True iff the predicted slice embedding is closer to the STOP
    /// embedding than the calibrated threshold.
    pub fn detect_stop(&self, z_s: &[f64]) -> Result<bool> {
        let tau = self.stop_threshold.ok_or(Error::Uncalibrated)?;
        Ok(self.stop_distance(z_s) < tau)
    }

    /// Autoregressive latent rollout, truncated at the first detected STOP.
    pub fn rollout_latent(
        &self,
        z0: &[f64],
        actions: &[CutAction],
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut out = Vec::with_capacity(actions.len());
        let mut z = z0.to_vec();
        for &a in actions {
            let (zo, zs) = self.predict_step(&z, a)?;
            let stopped = self.stop_threshold.is_some() && self.detect_stop(&zs)?;
            out.push((zo.clone(), zs));
            if stopped {
                break;
            }
            z = zo;
        }
        Ok(out)
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            format_version: FORMAT_VERSION,
            kind: "forward".to_string(),
            veg_type: self.veg.name().to_string(),
            arch: self.net.layers.clone(),
            params: model_io::prefixed(NET, &self.net.params),
            stop_embedding: Some(self.stop_embedding.data().to_vec()),
            stop_threshold: self.stop_threshold,
        }
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let veg = VegKind::parse(&file.veg_type)?;
        let init = crate::nn::network::ParamInit { seed: 0, scheme: "loaded".to_string() };
        let net = Network::from_parts(
            file.arch.clone(),
            model_io::strip_prefix(NET, &file.params),
            init,
        )?;
        let stop = file
            .stop_embedding
            .as_ref()
            .ok_or(Error::Config("forward model missing stop_embedding".to_string()))?;
        Ok(Self {
            veg,
            net,
            stop_embedding: Tensor::from_vec(stop.clone()),
            stop_threshold: file.stop_threshold,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        model_io::save_model_file(path, &self.to_model_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(&model_io::load_model_file(path, "forward")?)
    }
}

fn concat_action(z: &Tensor, a_norm: &[f64]) -> Result<Tensor> {
    let n = z.shape()[0];
    let mut data = Vec::with_capacity(n * (EMBED_DIM + 1));
    for (row, &a) in z.data().chunks_exact(EMBED_DIM).zip(a_norm.iter()) {
        data.extend_from_slice(row);
        data.push(a);
    }
    Tensor::new(vec![n, EMBED_DIM + 1], data)
}

fn split_output(out: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = out.shape()[0];
    let mut zo = Vec::with_capacity(n * EMBED_DIM);
    let mut zs = Vec::with_capacity(n * EMBED_DIM);
    for row in out.data().chunks_exact(2 * EMBED_DIM) {
        zo.extend_from_slice(&row[..EMBED_DIM]);
        zs.extend_from_slice(&row[EMBED_DIM..]);
    }
    Ok((Tensor::new(vec![n, EMBED_DIM], zo)?, Tensor::new(vec![n, EMBED_DIM], zs)?))
}

/// Training configuration for the forward model.
#[derive(Clone, Debug)]
pub struct ForwardTrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_horizon: usize,
    pub horizon_epoch_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub fine_tune_embedding: bool,
}

impl Default for ForwardTrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            max_horizon: 5,
            horizon_epoch_step: 5,
            epochs: 25,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            fine_tune_embedding: false,
        }
    }
}

/// Curriculum horizon: `min(max_horizon, 1 + floor(epoch / step))`.
pub fn horizon_for_epoch(epoch: usize, cfg: &ForwardTrainConfig) -> usize {
    (1 + epoch / cfg.horizon_epoch_step).min(cfg.max_horizon)
}

/// Per-epoch forward-model metrics; a row of the metrics CSV.
#[derive(Clone, Debug)]
pub struct ForwardEpochMetrics {
    pub epoch: usize,
    pub horizon: usize,
    pub train_mse_o: f64,
    pub train_mse_s: f64,
    pub val_mse_o: f64,
    pub val_mse_s: f64,
}

pub fn write_forward_metrics_csv(path: &Path, rows: &[ForwardEpochMetrics]) -> Result<()> {
    let mut text = String::from("epoch,horizon,train_mse_o,train_mse_s,val_mse_o,val_mse_s\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.horizon, r.train_mse_o, r.train_mse_s, r.val_mse_o, r.val_mse_s
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One transition of an episode, resolved to crop indices.
#[derive(Clone, Debug)]
pub struct LatentStep {
    pub action_d: f64,
    pub a_norm: f64,
    pub before: usize,
    pub after: usize,
    pub slice: Option<usize>,
    pub stop: bool,
    pub slice_class: Option<usize>,
    pub remaining_class: usize,
}

/// Episodes resolved into unique crops with cached embeddings.
#[derive(Clone, Debug)]
pub struct LatentEpisodes {
    /// Unique bbox crops, referenced by index. Empty unless kept.
    pub crops: Vec<Vec<f64>>,
    /// Embedding per crop under the embedding network used to prepare.
    pub z: Vec<Vec<f64>>,
    pub episodes: Vec<Vec<LatentStep>>,
}

/// Resolve transitions into per-episode step tables and embed every
/// unique referenced image once.
pub fn prepare_latent(
    ds: &Dataset,
    transitions: &[&Transition],
    embed: &EmbeddingModel,
    keep_crops: bool,
) -> Result<LatentEpisodes> {
    use crate::sim::veg::ObsRole;
    let mut crops: Vec<Vec<f64>> = Vec::new();
    let mut index: std::collections::BTreeMap<String, usize> = Default::default();
    let mut crop_of = |ds: &Dataset, crops: &mut Vec<Vec<f64>>, path: &str, role: ObsRole| -> Result<usize> {
        if let Some(&i) = index.get(path) {
            return Ok(i);
        }
        let obs = ds.observation(path, role)?;
        crops.push(obs.crop_resized()?);
        index.insert(path.to_string(), crops.len() - 1);
        Ok(crops.len() - 1)
    };

    let max_norm = transitions
        .first()
        .map(|t| t.veg_kind())
        .transpose()?
        .map(|k| k.profile().action_range.1)
        .ok_or(Error::EmptyInput("transitions"))?;

    let mut episodes: Vec<Vec<LatentStep>> = Vec::new();
    let mut current_ep: Option<u64> = None;
    for tr in transitions {
        let before = crop_of(ds, &mut crops, &tr.obs_before, ObsRole::WholeVegetable)?;
        let after = crop_of(ds, &mut crops, &tr.obs_after, ObsRole::WholeVegetable)?;
        let slice = match &tr.slice_obs {
            Some(p) => Some(crop_of(ds, &mut crops, p, ObsRole::Slice)?),
            None => None,
        };
        let step = LatentStep {
            action_d: tr.action_d,
            a_norm: tr.action_d / max_norm,
            before,
            after,
            slice,
            stop: tr.stop,
            slice_class: tr.slice_class,
            remaining_class: tr.remaining_class,
        };
        if current_ep != Some(tr.episode_id) {
            episodes.push(Vec::new());
            current_ep = Some(tr.episode_id);
        }
        episodes.last_mut().unwrap().push(step);
    }

    let z = embed_all(embed, &crops)?;
    Ok(LatentEpisodes { crops: if keep_crops { crops } else { Vec::new() }, z, episodes })
}

fn embed_all(embed: &EmbeddingModel, crops: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut z = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(256) {
        let zt = embed.embed_crops(chunk)?;
        for row in zt.data().chunks_exact(EMBED_DIM) {
            z.push(row.to_vec());
        }
    }
    Ok(z)
}

/// An unroll window: episode index, start step, length.
type Window = (usize, usize, usize);

fn unroll_windows(table: &LatentEpisodes, horizon: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (ep, steps) in table.episodes.iter().enumerate() {
        for t in 0..steps.len() {
            out.push((ep, t, horizon.min(steps.len() - t)));
        }
    }
    out
}

/// Train the forward model; with `fine_tune_embedding` the embedding trunk
/// receives the forward loss gradients too.
pub fn train_forward(
    mut fm: ForwardModel,
    dataset: &Dataset,
    embed: &mut EmbeddingModel,
    cfg: &ForwardTrainConfig,
) -> Result<(ForwardModel, Vec<ForwardEpochMetrics>)> {
    if cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0 || (cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0) {
        return Err(Error::Config("loss weights must be nonnegative and not both zero".into()));
    }
    if cfg.max_horizon < 1 {
        return Err(Error::Config("max_horizon must be at least 1".into()));
    }
    let (train_tr, val_tr) = dataset.split_by_episode();
    let mut table = prepare_latent(dataset, &train_tr, embed, cfg.fine_tune_embedding)?;
    let val_table = prepare_latent(dataset, &val_tr, embed, false)?;

    let mut params = model_io::prefixed(NET, &fm.net.params);
    params.insert(STOP_KEY.to_string(), fm.stop_embedding.clone());
    if cfg.fine_tune_embedding {
        params.extend(model_io::prefixed(PSI, &embed.trunk.params));
    }
    let mut opt = AdamState::new(&params, cfg.lr);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let horizon = horizon_for_epoch(epoch, cfg);
        if cfg.fine_tune_embedding && epoch > 0 {
            // The trunk moved; refresh cached embeddings for the targets.
            table.z = embed_all(embed, &table.crops)?;
        }
        let mut windows = unroll_windows(&table, horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xf0a0 + epoch as u64));
        windows.shuffle(&mut rng);
        // Uniform-length batches: group shuffled windows by unroll length.
        let mut sum_o = 0.0;
        let mut sum_s = 0.0;
        let mut terms = 0usize;
        for len in 1..=horizon {
            let group: Vec<Window> =
                windows.iter().copied().filter(|&(_, _, l)| l == len).collect();
            for batch in group.chunks(cfg.batch_size) {
                let (lo, ls, n) =
                    train_unroll_batch(&mut fm, embed, &mut params, &mut opt, &table, batch, cfg)?;
                if !(lo + ls).is_finite() {
                    return Err(Error::NonFinite { context: "forward training loss" });
                }
                sum_o += lo;
                sum_s += ls;
                terms += n;
            }
        }
        let (val_mse_o, val_mse_s) = one_step_mse(&fm, &val_table)?;
        metrics.push(ForwardEpochMetrics {
            epoch,
            horizon,
            train_mse_o: sum_o / terms.max(1) as f64,
            train_mse_s: sum_s / terms.max(1) as f64,
            val_mse_o,
            val_mse_s,
        });
    }
    Ok((fm, metrics))
}

/// Mean one-step MSE over a prepared table (validation metric).
pub fn one_step_mse(fm: &ForwardModel, table: &LatentEpisodes) -> Result<(f64, f64)> {
    let mut sum_o = 0.0;
    let mut sum_s = 0.0;
    let mut n = 0usize;
    for steps in &table.episodes {
        for step in steps {
            let z = Tensor::new(vec![1, EMBED_DIM], table.z[step.before].clone())?;
            let (zo, zs) = fm.predict_batch(&z, &[step.a_norm])?;
            let to = Tensor::new(vec![1, EMBED_DIM], table.z[step.after].clone())?;
            let ts = match step.slice {
                Some(i) => Tensor::new(vec![1, EMBED_DIM], table.z[i].clone())?,
                None => fm.stop_embedding.clone().reshape(vec![1, EMBED_DIM])?,
            };
            sum_o += mse_loss(&zo, &to)?.0;
            sum_s += mse_loss(&zs, &ts)?.0;
            n += 1;
        }
    }
    Ok((sum_o / n.max(1) as f64, sum_s / n.max(1) as f64))
}

/// One optimizer step over a batch of equal-length unroll windows.
///
/// Returns the summed per-step object/slice losses and the number of loss
/// terms. Backpropagation runs through the whole unroll; beyond step one
/// the inputs are the model's own predictions.
#[allow(clippy::too_many_arguments)]
fn train_unroll_batch(
    fm: &mut ForwardModel,
    embed: &mut EmbeddingModel,
    params: &mut ParamMap,
    opt: &mut AdamState,
    table: &LatentEpisodes,
    batch: &[Window],
    cfg: &ForwardTrainConfig,
) -> Result<(f64, f64, usize)> {
    let b = batch.len();
    let len = batch[0].2;
    let fine_tune = cfg.fine_tune_embedding;

    // For fine-tuning, every referenced crop goes through one taped trunk
    // forward; target and input embeddings are rows of that pass so the
    // loss gradients can flow back into the trunk.
    let mut crop_rows: Vec<usize> = Vec::new();
    let mut row_of_crop: std::collections::BTreeMap<usize, usize> = Default::default();
    let need = |crop: usize, crop_rows: &mut Vec<usize>, row_of_crop: &mut std::collections::BTreeMap<usize, usize>| {
        if !row_of_crop.contains_key(&crop) {
            row_of_crop.insert(crop, crop_rows.len());
            crop_rows.push(crop);
        }
    };
    if fine_tune {
        for &(ep, t, _) in batch {
            need(table.episodes[ep][t].before, &mut crop_rows, &mut row_of_crop);
            for k in 0..len {
                let step = &table.episodes[ep][t + k];
                need(step.after, &mut crop_rows, &mut row_of_crop);
                if let Some(s) = step.slice {
                    need(s, &mut crop_rows, &mut row_of_crop);
                }
            }
        }
    }
    let (z_rows, trunk_tape) = if fine_tune {
        let mut data = Vec::with_capacity(crop_rows.len() * IMG_SIZE * IMG_SIZE);
        for &c in &crop_rows {
            data.extend_from_slice(&table.crops[c]);
        }
        let input = Tensor::new(vec![crop_rows.len(), 1, IMG_SIZE, IMG_SIZE], data)?;
        let (z, tape) = embed.trunk.forward(&input)?;
        (Some(z), Some(tape))
    } else {
        (None, None)
    };
    let z_of = |crop: usize| -> &[f64] {
        match (&z_rows, row_of_crop.get(&crop)) {
            (Some(z), Some(&row)) => &z.data()[row * EMBED_DIM..(row + 1) * EMBED_DIM],
            _ => &table.z[crop],
        }
    };

    // Forward unroll.
    let mut z_cur = {
        let mut data = Vec::with_capacity(b * EMBED_DIM);
        for &(ep, t, _) in batch {
            data.extend_from_slice(z_of(table.episodes[ep][t].before));
        }
        Tensor::new(vec![b, EMBED_DIM], data)?
    };
    let norm = 1.0 / (b * EMBED_DIM) as f64;
    let mut tapes = Vec::with_capacity(len);
    let mut douts: Vec<Tensor> = Vec::with_capacity(len);
    let mut stop_grad = vec![0.0; EMBED_DIM];
    let mut dz_crops = vec![0.0; crop_rows.len() * EMBED_DIM];
    let mut sum_o = 0.0;
    let mut sum_s = 0.0;

    for k in 0..len {
        let a_norm: Vec<f64> =
            batch.iter().map(|&(ep, t, _)| table.episodes[ep][t + k].a_norm).collect();
        let input = concat_action(&z_cur, &a_norm)?;
        let (out, tape) = fm.net.forward(&input)?;

        let mut dout = vec![0.0; b * 2 * EMBED_DIM];
        let mut next_z = vec![0.0; b * EMBED_DIM];
        for (row, &(ep, t, _)) in batch.iter().enumerate() {
            let step = &table.episodes[ep][t + k];
            let orow = &out.data()[row * 2 * EMBED_DIM..(row + 1) * 2 * EMBED_DIM];
            let (zo, zs) = orow.split_at(EMBED_DIM);
            next_z[row * EMBED_DIM..(row + 1) * EMBED_DIM].copy_from_slice(zo);

            let to = z_of(step.after);
            let mut lo = 0.0;
            for i in 0..EMBED_DIM {
                let d = zo[i] - to[i];
                lo += d * d;
                dout[row * 2 * EMBED_DIM + i] = cfg.lambda1 * 2.0 * d * norm;
                if fine_tune {
                    let crow = row_of_crop[&step.after];
                    dz_crops[crow * EMBED_DIM + i] -= cfg.lambda1 * 2.0 * d * norm;
                }
            }
            sum_o += lo * norm;

            let ts: &[f64] = match step.slice {
                Some(s) => z_of(s),
                None => fm.stop_embedding.data(),
            };
            let mut ls = 0.0;
            for i in 0..EMBED_DIM {
                let d = zs[i] - ts[i];
                ls += d * d;
                dout[row * 2 * EMBED_DIM + EMBED_DIM + i] = cfg.lambda2 * 2.0 * d * norm;
                match step.slice {
                    Some(s) if fine_tune => {
                        let crow = row_of_crop[&s];
                        dz_crops[crow * EMBED_DIM + i] -= cfg.lambda2 * 2.0 * d * norm;
                    }
                    None => stop_grad[i] -= cfg.lambda2 * 2.0 * d * norm,
                    _ => {}
                }
            }
            sum_s += ls * norm;
        }
        tapes.push(tape);
        douts.push(Tensor::new(vec![b, 2 * EMBED_DIM], dout)?);
        z_cur = Tensor::new(vec![b, EMBED_DIM], next_z)?;
    }

    // Backward through the unroll, carrying the gradient that flows from
    // step k+1's input back into step k's predicted object embedding.
    let mut grads = ParamMap::new();
    let mut carry = vec![0.0; b * EMBED_DIM];
    for k in (0..len).rev() {
        let mut g = douts[k].clone();
        for row in 0..b {
            for i in 0..EMBED_DIM {
                g.data_mut()[row * 2 * EMBED_DIM + i] += carry[row * EMBED_DIM + i];
            }
        }
        let bk = fm.net.backward(&tapes[k], &g)?;
        for (name, grad) in bk.params {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, gv) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += gv;
                    }
                }
                None => {
                    grads.insert(name, grad);
                }
            }
        }
        for row in 0..b {
            for i in 0..EMBED_DIM {
                carry[row * EMBED_DIM + i] = bk.input.data()[row * (EMBED_DIM + 1) + i];
            }
        }
    }
    let mut named = ParamMap::new();
    for (name, grad) in grads {
        named.insert(format!("{NET}.{name}"), grad);
    }
    named.insert(STOP_KEY.to_string(), Tensor::from_vec(stop_grad));

    if fine_tune {
        // Input-side gradient: the window's starting embedding.
        for (row, &(ep, t, _)) in batch.iter().enumerate() {
            let crow = row_of_crop[&table.episodes[ep][t].before];
            for i in 0..EMBED_DIM {
                dz_crops[crow * EMBED_DIM + i] += carry[row * EMBED_DIM + i];
            }
        }
        let dz = Tensor::new(vec![crop_rows.len(), EMBED_DIM], dz_crops)?;
        let trunk_grads = embed.trunk.backward(trunk_tape.as_ref().unwrap(), &dz)?;
        for (name, grad) in trunk_grads.params {
            named.insert(format!("{PSI}.{name}"), grad);
        }
    }

    opt.step(params, &named)?;
    fm.net.params = model_io::strip_prefix(NET, params);
    fm.stop_embedding = params[STOP_KEY].clone();
    if fine_tune {
        embed.trunk.params = model_io::strip_prefix(PSI, params);
    }
    Ok((sum_o, sum_s, len))
}

/// Calibrate the STOP threshold as the midpoint between the mean predicted
/// stop distance of stop transitions and of slice transitions.
pub fn calibrate_stop_threshold(
    fm: &mut ForwardModel,
    table: &LatentEpisodes,
) -> Result<f64> {
    let mut stop_d = Vec::new();
    let mut other_d = Vec::new();
    for steps in &table.episodes {
        for step in steps {
            let z = Tensor::new(vec![1, EMBED_DIM], table.z[step.before].clone())?;
            let (_, zs) = fm.predict_batch(&z, &[step.a_norm])?;
            let dist = fm.stop_distance(zs.data());
            if step.stop {
                stop_d.push(dist);
            } else {
                other_d.push(dist);
            }
        }
    }
    if stop_d.is_empty() || other_d.is_empty() {
        return Err(Error::EmptyInput("calibration needs both stop and non-stop transitions"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ms, mo) = (mean(&stop_d), mean(&other_d));
    if ms == mo {
        return Err(Error::DegenerateCalibration { stop_mean: ms, other_mean: mo });
    }
    let tau = 0.5 * (ms + mo);
    fm.stop_threshold = Some(tau);
    Ok(tau)
}

/// One-step fidelity and STOP detection quality on a prepared table.
#[derive(Clone, Debug)]
pub struct OneStepEval {
    /// Fraction of steps whose predicted object embedding classifies to the
    /// true remaining class.
    pub remaining_acc: f64,
    /// Fraction of slice steps whose predicted slice embedding classifies
    /// to the true slice class.
    pub slice_acc: f64,
    /// F1 of STOP detection with stop as the positive class.
    pub stop_f1: f64,
    pub stop_true: usize,
    pub stop_total: usize,
}

pub fn eval_one_step(
    fm: &ForwardModel,
    embed: &EmbeddingModel,
    table: &LatentEpisodes,
) -> Result<OneStepEval> {
    use crate::sim::veg::ObsRole;
    let mut rem_hit = 0usize;
    let mut rem_n = 0usize;
    let mut sl_hit = 0usize;
    let mut sl_n = 0usize;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    let mut stop_total = 0usize;
    for steps in &table.episodes {
        for step in steps {
            let z = Tensor::new(vec![1, EMBED_DIM], table.z[step.before].clone())?;
            let (zo, zs) = fm.predict_batch(&z, &[step.a_norm])?;
            let pred_rem = embed.classify(zo.data(), ObsRole::WholeVegetable)?;
            rem_hit += usize::from(pred_rem == step.remaining_class);
            rem_n += 1;
            let detected = fm.detect_stop(zs.data())?;
            if step.stop {
                stop_total += 1;
                if detected {
                    tp += 1;
                } else {
                    fne += 1;
                }
            } else {
                if detected {
                    fp += 1;
                }
                if let Some(true_class) = step.slice_class {
                    let pred = embed.classify(zs.data(), ObsRole::Slice)?;
                    sl_hit += usize::from(pred == true_class);
                    sl_n += 1;
                }
            }
        }
    }
    let f1 = if 2 * tp + fp + fne == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    };
    Ok(OneStepEval {
        remaining_acc: rem_hit as f64 / rem_n.max(1) as f64,
        slice_acc: sl_hit as f64 / sl_n.max(1) as f64,
        stop_f1: f1,
        stop_true: tp,
        stop_total,
    })
}

/// Fraction of `h`-step autoregressive rollouts whose final predicted
/// object embedding classifies to the ground-truth remaining class.
pub fn eval_multi_step(
    fm: &ForwardModel,
    embed: &EmbeddingModel,
    table: &LatentEpisodes,
    h: usize,
) -> Result<(f64, usize)> {
    use crate::sim::veg::ObsRole;
    let mut hit = 0usize;
    let mut n = 0usize;
    for steps in &table.episodes {
        // Only windows of h slice steps (no stop inside).
        if steps.len() < h || steps[..h].iter().any(|s| s.stop) {
            continue;
        }
        let mut z = table.z[steps[0].before].clone();
        for step in &steps[..h] {
            let zt = Tensor::new(vec![1, EMBED_DIM], z)?;
            let (zo, _) = fm.predict_batch(&zt, &[step.a_norm])?;
            z = zo.into_data();
        }
        let pred = embed.classify(&z, ObsRole::WholeVegetable)?;
        hit += usize::from(pred == steps[h - 1].remaining_class);
        n += 1;
    }
    Ok((hit as f64 / n.max(1) as f64, n))
}
