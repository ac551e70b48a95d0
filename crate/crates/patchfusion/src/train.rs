//! Adam optimization, the two-stage training procedure, and checkpoint
//! I/O. Stage 1 trains the patch network under weak (image-level) labels
//! on overlapping patches; stage 2 freezes it and trains the spatial
//! fusion MLP on non-overlapping probability maps.

use crate::error::{Error, Result};
use crate::fusion::{assemble_probability_map, build_fusion, FusionNet, FusionSpec, ProbabilityMap};
use crate::init::derive_seed;
use crate::patchnet::{build_patchnet, ModelSpec, PatchNet};
use crate::tensor::{cross_entropy, BnStats, Mode, Tape, Tensor};
use crate::tiling::{
    augment, extract_patches, load_image, AugmentPolicy, DatasetManifest, ManifestEntry,
};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Adam hyperparameters (reference defaults).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the step count.
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)], hyper: AdamHyper) -> AdamState {
        AdamState {
            hyper,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Consumes (and clears) the gradients
/// currently attached to `params`.
pub fn adam_step(params: &[(String, Tensor)], state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let h = &state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for (idx, (name, param)) in params.iter().enumerate() {
        let grad = param
            .grad()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` has no gradient")))?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut data = param.data_mut();
        for i in 0..grad.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        drop(data);
        param.zero_grad();
    }
    Ok(())
}

/// Stage-level hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl StageHyper {
    pub fn patch_defaults() -> StageHyper {
        StageHyper {
            lr: 1e-3,
            batch_size: 32,
            epochs: 50,
        }
    }

    pub fn fusion_defaults() -> StageHyper {
        StageHyper {
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
        }
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            ..AdamHyper::default()
        }
    }
}

/// Per-channel input standardization, computed on the training split and
/// stored in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Standardization {
    /// Mean/std of [0,1]-scaled pixels over a patch collection.
    pub fn compute(patches: &[(RgbImage, usize)]) -> Standardization {
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        let mut n = 0.0;
        for (patch, _) in patches {
            for p in patch.pixels() {
                for ch in 0..3 {
                    let v = p.0[ch] as f64 / 255.0;
                    sum[ch] += v;
                    sum_sq[ch] += v * v;
                }
            }
            n += (patch.width() * patch.height()) as f64;
        }
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for ch in 0..3 {
            mean[ch] = sum[ch] / n;
            let var = (sum_sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
            std[ch] = var.sqrt().max(1e-6);
        }
        Standardization { mean, std }
    }
}

/// Pack patches into a standardized (N, 3, S, S) batch tensor.
pub fn patches_to_tensor(patches: &[&RgbImage], stdz: &Standardization) -> Result<Tensor> {
    let n = patches.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (w, h) = (patches[0].width() as usize, patches[0].height() as usize);
    let mut data = vec![0.0; n * 3 * h * w];
    for (ni, patch) in patches.iter().enumerate() {
        if patch.width() as usize != w || patch.height() as usize != h {
            return Err(Error::Shape("ragged patch batch".into()));
        }
        for (y, x, p) in patch.enumerate_pixels().map(|(x, y, p)| (y, x, p)) {
            for ch in 0..3 {
                let v = (p.0[ch] as f64 / 255.0 - stdz.mean[ch]) / stdz.std[ch];
                data[((ni * 3 + ch) * h + y as usize) * w + x as usize] = v;
            }
        }
    }
    Tensor::new(&[n, 3, h, w], data)
}

/// One loss-log row (`epoch,split,loss,acc`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
}

pub fn save_loss_log(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,split,loss,acc\n");
    for l in logs {
        out.push_str(&format!("{},{},{:.17e},{:.17e}\n", l.epoch, l.split, l.loss, l.acc));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PFNCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CheckpointModel {
    #[serde(rename = "patchnet")]
    Patch {
        spec: ModelSpec,
        standardize: Standardization,
        bn_stats: Vec<BnStats>,
    },
    #[serde(rename = "fusion")]
    Fusion { spec: FusionSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: CheckpointModel,
    meta: TrainMeta,
}

/// Serialized model: a JSON header (geometry, stats, metadata) plus a flat
/// little-endian 32-bit weight blob in parameter declaration order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    pub meta: TrainMeta,
    pub weights: Vec<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            model: self.model.clone(),
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut write = |bytes: &[u8]| -> Result<()> {
            f.write_all(bytes)
                .map_err(|e| Error::io(path.display().to_string(), e))
        };
        write(CHECKPOINT_MAGIC)?;
        write(&(header.len() as u32).to_le_bytes())?;
        write(&header)?;
        let mut blob = Vec::with_capacity(self.weights.len() * 4);
        for w in &self.weights {
            blob.extend_from_slice(&w.to_le_bytes());
        }
        write(&blob)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let err = |message: String| Error::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic (not a checkpoint file)".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(err("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| err(format!("malformed header: {e}")))?;
        let blob = &bytes[12 + header_len..];
        if blob.len() % 4 != 0 {
            return Err(err("weight blob length not a multiple of 4".into()));
        }
        let weights = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Checkpoint {
            model: header.model,
            meta: header.meta,
            weights,
        })
    }
}

fn flatten_weights(params: &[(String, Tensor)]) -> Vec<f32> {
    params
        .iter()
        .flat_map(|(_, t)| t.to_vec().into_iter().map(|v| v as f32))
        .collect()
}

fn restore_weights(params: &[(String, Tensor)], weights: &[f32]) -> Result<()> {
    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    if total != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "weight blob has {} values but the model needs {total}",
            weights.len()
        )));
    }
    let mut offset = 0;
    for (_, t) in params {
        let n = t.numel();
        let mut data = t.data_mut();
        for (d, w) in data.iter_mut().zip(&weights[offset..offset + n]) {
            *d = *w as f64;
        }
        offset += n;
    }
    Ok(())
}

pub fn patchnet_to_checkpoint(
    net: &PatchNet,
    standardize: &Standardization,
    meta: TrainMeta,
) -> Checkpoint {
    Checkpoint {
        model: CheckpointModel::Patch {
            spec: net.spec.clone(),
            standardize: standardize.clone(),
            bn_stats: net.bn_stats(),
        },
        meta,
        weights: flatten_weights(&net.params()),
    }
}

pub fn patchnet_from_checkpoint(ckpt: &Checkpoint) -> Result<(PatchNet, Standardization)> {
    let (spec, standardize, bn_stats) = match &ckpt.model {
        CheckpointModel::Patch {
            spec,
            standardize,
            bn_stats,
        } => (spec, standardize, bn_stats),
        CheckpointModel::Fusion { .. } => {
            return Err(Error::InvalidArgument(
                "expected a patch-network checkpoint, found a fusion checkpoint".into(),
            ))
        }
    };
    let mut net = build_patchnet(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore_weights(&net.params(), &ckpt.weights)?;
    net.set_bn_stats(bn_stats)?;
    Ok((net, standardize.clone()))
}

pub fn fusion_to_checkpoint(net: &FusionNet, meta: TrainMeta) -> Checkpoint {
    Checkpoint {
        model: CheckpointModel::Fusion {
            spec: net.spec.clone(),
        },
        meta,
        weights: flatten_weights(&net.params()),
    }
}

pub fn fusion_from_checkpoint(ckpt: &Checkpoint) -> Result<FusionNet> {
    let spec = match &ckpt.model {
        CheckpointModel::Fusion { spec } => spec,
        CheckpointModel::Patch { .. } => {
            return Err(Error::InvalidArgument(
                "expected a fusion checkpoint, found a patch-network checkpoint".into(),
            ))
        }
    };
    let net = build_fusion(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore_weights(&net.params(), &ckpt.weights)?;
    Ok(net)
}

fn collect_weak_patches(
    entries: &[&ManifestEntry],
    patch_size: u32,
    stride: u32,
) -> Result<Vec<(RgbImage, usize)>> {
    let mut out = Vec::new();
    for e in entries {
        let img = load_image(&e.path)?;
        let grid = extract_patches(&img, patch_size, stride)?;
        for patch in grid.patches {
            out.push((patch, e.label));
        }
    }
    if out.is_empty() {
        return Err(Error::Manifest("no training patches".into()));
    }
    Ok(out)
}

/// Stage 1: train the patch network on overlapping patches that inherit
/// their parent image's label. Returns the checkpoint, the per-epoch loss
/// log, and soft-check warnings (loss increase over a 5-epoch window).
pub fn train_patch_stage(
    manifest: &DatasetManifest,
    split: &str,
    spec: &ModelSpec,
    hyper: &StageHyper,
    seed: u64,
) -> Result<(Checkpoint, Vec<EpochLog>, Vec<String>)> {
    spec.validate()?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::Manifest(format!("no entries with split `{split}`")));
    }
    let patch_size = spec.input_size as u32;
    let stride = (patch_size / 2).max(1);
    let dataset = collect_weak_patches(&entries, patch_size, stride)?;
    let stdz = Standardization::compute(&dataset);
    let mut net = build_patchnet(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0)))?;
    let params = net.params();
    let mut adam = AdamState::new(&params, StageHyper::adam(hyper));
    let policy = AugmentPolicy::default();

    let mut logs = Vec::new();
    let mut warnings = Vec::new();
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let mut patches = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    3 + epoch as u64,
                    i as u64,
                ));
                patches.push(augment(&dataset[i].0, &mut rng, &policy)?);
                labels.push(dataset[i].1);
            }
            let refs: Vec<&RgbImage> = patches.iter().collect();
            let batch = patches_to_tensor(&refs, &stdz)?;
            let mut tape = Tape::new();
            let (_, logits) = net.forward(&mut tape, &batch, Mode::Train)?;
            let loss = cross_entropy(&mut tape, &logits, &labels)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            tape.backward(&loss)?;
            adam_step(&params, &mut adam)?;
            epoch_loss += loss_val * chunk.len() as f64;
            let ld = logits.to_vec();
            let k = spec.num_classes;
            for (row, &label) in labels.iter().enumerate() {
                let pred = crate::fusion::predict_image(&ld[row * k..(row + 1) * k])?;
                if pred == label {
                    correct += 1;
                }
            }
        }
        let loss = epoch_loss / dataset.len() as f64;
        let acc = correct as f64 / dataset.len() as f64;
        logs.push(EpochLog {
            epoch,
            split: split.to_string(),
            loss,
            acc,
        });
        if epoch >= 4 {
            let window_start = logs[epoch - 4].loss;
            if loss > window_start {
                warnings.push(format!(
                    "loss increased over epochs {}..{}: {window_start:.6} -> {loss:.6}",
                    epoch - 4,
                    epoch
                ));
            }
        }
    }

    let meta = TrainMeta {
        seed,
        epochs: hyper.epochs,
        loss_history: logs.iter().map(|l| l.loss).collect(),
    };
    Ok((patchnet_to_checkpoint(&net, &stdz, meta), logs, warnings))
}

/// Non-overlapping tiling + frozen eval-mode inference: the probability
/// map of one image.
pub fn infer_probability_map(
    net: &mut PatchNet,
    stdz: &Standardization,
    image: &RgbImage,
) -> Result<ProbabilityMap> {
    let patch_size = net.spec.input_size as u32;
    let grid = extract_patches(image, patch_size, patch_size)?;
    let mut fibers = Vec::with_capacity(grid.patches.len());
    for patch in &grid.patches {
        let input = patches_to_tensor(&[patch], stdz)?;
        let out = net.forward_patch(&input, Mode::Eval)?;
        fibers.push(out.probs.to_vec());
    }
    assemble_probability_map(&fibers, grid.rows, grid.cols)
}

/// Maps for every entry of a split, in manifest order.
pub fn infer_probability_maps(
    patch_ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: &str,
) -> Result<Vec<(PathBuf, usize, ProbabilityMap)>> {
    let (mut net, stdz) = patchnet_from_checkpoint(patch_ckpt)?;
    let mut out = Vec::new();
    for e in manifest.split(split) {
        let img = load_image(&e.path)?;
        let map = infer_probability_map(&mut net, &stdz, &img)?;
        out.push((e.path.clone(), e.label, map));
    }
    Ok(out)
}

/// Train the fusion MLP on precomputed (map, label) pairs.
pub fn train_fusion_on_maps(
    maps: &[(ProbabilityMap, usize)],
    fusion_spec: &FusionSpec,
    hyper: &StageHyper,
    seed: u64,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    fusion_spec.validate()?;
    if maps.is_empty() {
        return Err(Error::Manifest("no fusion training maps".into()));
    }
    for (map, _) in maps {
        if map.rows != fusion_spec.rows
            || map.cols != fusion_spec.cols
            || map.classes != fusion_spec.classes
        {
            return Err(Error::Shape(format!(
                "map {}x{}x{} inconsistent with fusion spec {}x{}x{}",
                map.rows, map.cols, map.classes,
                fusion_spec.rows, fusion_spec.cols, fusion_spec.classes
            )));
        }
    }
    let net = build_fusion(fusion_spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 10, 0)))?;
    let params = net.params();
    let mut adam = AdamState::new(&params, StageHyper::adam(hyper));
    let dim = fusion_spec.input_dim();
    let k = fusion_spec.classes;

    let mut logs = Vec::new();
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..maps.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 11, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let mut data = Vec::with_capacity(chunk.len() * dim);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(maps[i].0.flatten());
                labels.push(maps[i].1);
            }
            let input = Tensor::new(&[chunk.len(), dim], data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                12 + epoch as u64,
                batch_idx as u64,
            ));
            let mut tape = Tape::new();
            let logits = net.forward_logits(&mut tape, &input, Mode::Train, &mut rng)?;
            let loss = cross_entropy(&mut tape, &logits, &labels)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            tape.backward(&loss)?;
            adam_step(&params, &mut adam)?;
            epoch_loss += loss_val * chunk.len() as f64;
            let ld = logits.to_vec();
            for (row, &label) in labels.iter().enumerate() {
                if crate::fusion::predict_image(&ld[row * k..(row + 1) * k])? == label {
                    correct += 1;
                }
            }
        }
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: epoch_loss / maps.len() as f64,
            acc: correct as f64 / maps.len() as f64,
        });
    }
    let meta = TrainMeta {
        seed,
        epochs: hyper.epochs,
        loss_history: logs.iter().map(|l| l.loss).collect(),
    };
    Ok((fusion_to_checkpoint(&net, meta), logs))
}

/// Stage 2: frozen patch-network inference over non-overlapping tilings,
/// then fusion-MLP training against image-wise labels. The patch weights
/// are bitwise-verified unchanged.
pub fn train_fusion_stage(
    patch_ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: &str,
    fusion_spec: &FusionSpec,
    hyper: &StageHyper,
    seed: u64,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let frozen_before = patch_ckpt.weights.clone();
    let maps: Vec<(ProbabilityMap, usize)> = infer_probability_maps(patch_ckpt, manifest, split)?
        .into_iter()
        .map(|(_, label, map)| (map, label))
        .collect();
    let result = train_fusion_on_maps(&maps, fusion_spec, hyper, seed)?;
    let unchanged = frozen_before
        .iter()
        .zip(&patch_ckpt.weights)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !unchanged {
        return Err(Error::InvalidArgument(
            "stage-1 weights mutated during fusion training".into(),
        ));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{synth_dataset, SynthSpec};

    fn scalar_param(value: f64) -> Vec<(String, Tensor)> {
        vec![("theta".into(), Tensor::scalar(value).with_grad())]
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let params = scalar_param(1.5);
        let mut state = AdamState::new(&params, AdamHyper::default());
        params[0].1.accumulate_grad(&[0.0]);
        adam_step(&params, &mut state).unwrap();
        assert_eq!(params[0].1.item(), 1.5);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let params = scalar_param(0.0);
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(&params, hyper.clone());
        params[0].1.accumulate_grad(&[3.7]);
        adam_step(&params, &mut state).unwrap();
        // first bias-corrected step: m_hat = g, v_hat = g^2, so the
        // update is -lr * g / (|g| + eps)
        let expected = -hyper.lr * 3.7 / (3.7 + hyper.eps);
        assert!((params[0].1.item() - expected).abs() < 1e-12);
        assert!((params[0].1.item() + hyper.lr).abs() < 1e-6);
    }

    #[test]
    fn adam_trajectory_matches_independent_oracle() {
        // minimize f(theta) = theta^2 from theta0 = 1, lr = 0.1
        let hyper = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        let params = scalar_param(1.0);
        let mut state = AdamState::new(&params, hyper.clone());

        // hand-rolled reference
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=50u32 {
            let g = 2.0 * params[0].1.item();
            params[0].1.accumulate_grad(&[g]);
            adam_step(&params, &mut state).unwrap();

            let g_ref = 2.0 * theta;
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g_ref;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g_ref * g_ref;
            let m_hat = m / (1.0 - hyper.beta1.powi(t as i32));
            let v_hat = v / (1.0 - hyper.beta2.powi(t as i32));
            theta -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);

            assert!(
                (params[0].1.item() - theta).abs() < 1e-12,
                "diverged at step {t}"
            );
        }
        assert!(params[0].1.item().abs() < 0.1);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let params = scalar_param(0.7);
        let mut state = AdamState::new(
            &params,
            AdamHyper {
                lr: 0.0,
                ..AdamHyper::default()
            },
        );
        for _ in 0..5 {
            params[0].1.accumulate_grad(&[1.23]);
            adam_step(&params, &mut state).unwrap();
        }
        assert_eq!(params[0].1.item(), 0.7);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let params = scalar_param(0.0);
        let mut state = AdamState::new(&params, AdamHyper::default());
        params[0].1.accumulate_grad(&[f64::NAN]);
        let err = adam_step(&params, &mut state).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
    }

    fn tiny_manifest(dir: &Path, seed: u64) -> DatasetManifest {
        synth_dataset(
            &SynthSpec {
                classes: 2,
                per_class: 2,
                test_per_class: 0,
                width: 64,
                height: 64,
                patch_size: 64,
                seed,
            },
            dir,
        )
        .unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec::with_channels(64, &[4, 8, 8, 8], 2)
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path(), 5);
        let hyper = StageHyper {
            epochs: 0,
            ..StageHyper::patch_defaults()
        };
        let (ckpt, logs, _) =
            train_patch_stage(&manifest, "train", &tiny_spec(), &hyper, 42).unwrap();
        assert!(logs.is_empty());
        let init = build_patchnet(
            &tiny_spec(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(42, 1, 0)),
        )
        .unwrap();
        let expected = flatten_weights(&init.params());
        assert_eq!(ckpt.weights.len(), expected.len());
        assert!(ckpt
            .weights
            .iter()
            .zip(&expected)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path(), 5);
        let hyper = StageHyper {
            epochs: 2,
            ..StageHyper::patch_defaults()
        };
        let (c1, l1, _) = train_patch_stage(&manifest, "train", &tiny_spec(), &hyper, 7).unwrap();
        let (c2, l2, _) = train_patch_stage(&manifest, "train", &tiny_spec(), &hyper, 7).unwrap();
        assert_eq!(l1, l2);
        assert!(c1
            .weights
            .iter()
            .zip(&c2.weights)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path(), 5);
        let hyper = StageHyper {
            epochs: 1,
            ..StageHyper::patch_defaults()
        };
        let (ckpt, _, _) = train_patch_stage(&manifest, "train", &tiny_spec(), &hyper, 9).unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        let (mut net_a, stdz_a) = patchnet_from_checkpoint(&ckpt).unwrap();
        let (mut net_b, stdz_b) = patchnet_from_checkpoint(&loaded).unwrap();
        assert_eq!(stdz_a, stdz_b);
        let img = load_image(&manifest.entries[0].path).unwrap();
        let a = infer_probability_map(&mut net_a, &stdz_a, &img).unwrap();
        let b = infer_probability_map(&mut net_b, &stdz_b, &img).unwrap();
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }

    #[test]
    fn fusion_stage_freezes_patch_weights_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path(), 5);
        let hyper = StageHyper {
            epochs: 1,
            ..StageHyper::patch_defaults()
        };
        let (patch_ckpt, _, _) =
            train_patch_stage(&manifest, "train", &tiny_spec(), &hyper, 9).unwrap();
        let before = patch_ckpt.weights.clone();
        let fusion_spec = FusionSpec::new(1, 1, 2);
        let fh = StageHyper {
            epochs: 3,
            ..StageHyper::fusion_defaults()
        };
        let (f1, l1) =
            train_fusion_stage(&patch_ckpt, &manifest, "train", &fusion_spec, &fh, 3).unwrap();
        assert!(before
            .iter()
            .zip(&patch_ckpt.weights)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let (f2, l2) =
            train_fusion_stage(&patch_ckpt, &manifest, "train", &fusion_spec, &fh, 3).unwrap();
        assert_eq!(l1, l2);
        assert!(f1
            .weights
            .iter()
            .zip(&f2.weights)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
