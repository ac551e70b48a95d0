//! Metrics and the stratified k-fold cross-validation harness: confusion
//! matrix, the 4-to-2 class grouping (normal/benign vs the carcinoma
//! pair), ROC/AUC, and the per-fold retraining loop.

use crate::error::{Error, Result};
use crate::fusion::{fuse_mlp, predict_image, FusionSpec};
use crate::init::derive_seed;
use crate::patchnet::ModelSpec;
use crate::tensor::Mode;
use crate::tiling::{load_image, DatasetManifest};
use crate::train::{
    fusion_from_checkpoint, infer_probability_map, patchnet_from_checkpoint, train_fusion_stage,
    train_patch_stage, StageHyper,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// K x K integer counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for t in 0..self.classes {
            for p in 0..self.classes {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    /// CSV with a `true\pred` corner cell and class-index headers.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("true\\pred");
        for p in 0..self.classes {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&t.to_string());
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.counts[t][p]));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

pub fn confusion_and_accuracy(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<(ConfusionMatrix, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= classes {
            return Err(Error::LabelOutOfRange { label: p, classes });
        }
        if t >= classes {
            return Err(Error::LabelOutOfRange { label: t, classes });
        }
        cm.record(t, p);
    }
    let acc = cm.accuracy();
    Ok((cm, acc))
}

/// Group a 4-class probability vector (normal, benign, in situ, invasive)
/// into (p_noncarcinoma, p_carcinoma).
pub fn two_class_map(probs: &[f64]) -> Result<(f64, f64)> {
    if probs.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected a 4-class probability vector, got length {}",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    Ok((probs[0] + probs[1], probs[2] + probs[3]))
}

/// One ROC point; the threshold is the lowest score still classified
/// positive at this point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The (0,0) anchor carries an infinite threshold, which JSON cannot
    /// represent as a number; it round-trips as the string "inf".
    #[serde(with = "json_float")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

mod json_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad float `{other}`"))),
            },
        }
    }
}

/// ROC sweep over distinct scores plus trapezoidal AUC. Tied scores move
/// as one group, so the trapezoid equals the Mann-Whitney statistic
/// (#concordant + 0.5 #tied) / (#pos #neg).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<RocPoint>)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "roc_auc requires both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == score {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let prev = *points.last().unwrap();
        let point = RocPoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        };
        auc += 0.5 * (point.tpr + prev.tpr) * (point.fpr - prev.fpr);
        points.push(point);
        i = j;
    }
    Ok((auc, points))
}

pub fn save_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", p.threshold, p.fpr, p.tpr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Stratified fold assignment: `assignments[i]` is the fold of manifest
/// entry `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Per-class seeded shuffle, then round-robin assignment, so every fold's
/// class proportions stay within one sample of the global proportions.
pub fn stratified_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let classes = manifest.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class[e.label].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} entries, fewer than k = {k}",
                members.len()
            )));
        }
    }
    let mut assignments = vec![0usize; manifest.entries.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 20, c as u64)));
        for (pos, &entry_idx) in members.iter().enumerate() {
            assignments[entry_idx] = pos % k;
        }
    }
    Ok(FoldPlan { k, seed, assignments })
}

/// Mean and sample (n-1) standard deviation; std is 0 for n < 2.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub test_images: usize,
    pub acc4: f64,
    /// Binary accuracy under the carcinoma grouping; only for 4 classes.
    pub acc2: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldMetrics>,
    pub mean_acc4: f64,
    pub std_acc4: f64,
    pub mean_acc2: Option<f64>,
    pub std_acc2: Option<f64>,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
    pub pooled_confusion: ConfusionMatrix,
    /// Pooled 2-class ROC over all folds' carcinoma scores.
    pub pooled_roc: Vec<RocPoint>,
    pub pooled_auc: Option<f64>,
}

fn subset_manifest(
    manifest: &DatasetManifest,
    indices: &[usize],
    split: &str,
) -> Result<DatasetManifest> {
    let entries = indices
        .iter()
        .map(|&i| {
            let mut e = manifest.entries[i].clone();
            e.split = split.to_string();
            e
        })
        .collect();
    DatasetManifest::new(entries, manifest.class_names.clone())
}

fn in_fold<T>(fold: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Fold {
        fold,
        source: Box::new(e),
    })
}

/// Full k-fold cross-validation: both stages are retrained from scratch
/// on each fold's training portion.
pub fn run_cv(
    manifest: &DatasetManifest,
    k: usize,
    model_spec: &ModelSpec,
    patch_hyper: &StageHyper,
    fusion_hyper: &StageHyper,
    seed: u64,
) -> Result<CvReport> {
    let classes = manifest.num_classes();
    if model_spec.num_classes != classes {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, manifest has {classes}",
            model_spec.num_classes
        )));
    }
    let plan = stratified_kfold(manifest, k, seed)?;
    let binary = classes == 4;

    let mut folds = Vec::new();
    let mut pooled_confusion = ConfusionMatrix::new(classes);
    let mut pooled_scores = Vec::new();
    let mut pooled_binary_labels = Vec::new();

    for fold in 0..k {
        let fold_seed = derive_seed(seed, 30, fold as u64);
        let train = subset_manifest(manifest, &plan.train_indices(fold), "train")?;
        let test = subset_manifest(manifest, &plan.fold_indices(fold), "test")?;

        let (patch_ckpt, _, _) = in_fold(
            fold,
            train_patch_stage(&train, "train", model_spec, patch_hyper, fold_seed),
        )?;
        let (mut patch_net, stdz) = in_fold(fold, patchnet_from_checkpoint(&patch_ckpt))?;

        // fusion geometry from the first training image
        let first = in_fold(fold, load_image(&train.entries[0].path))?;
        let probe = in_fold(fold, infer_probability_map(&mut patch_net, &stdz, &first))?;
        let fusion_spec = FusionSpec::new(probe.rows, probe.cols, classes);

        let (fusion_ckpt, _) = in_fold(
            fold,
            train_fusion_stage(&patch_ckpt, &train, "train", &fusion_spec, fusion_hyper, fold_seed),
        )?;
        let fusion_net = in_fold(fold, fusion_from_checkpoint(&fusion_ckpt))?;

        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for e in &test.entries {
            let img = in_fold(fold, load_image(&e.path))?;
            let map = in_fold(fold, infer_probability_map(&mut patch_net, &stdz, &img))?;
            let probs = in_fold(fold, fuse_mlp(&fusion_net, &map, Mode::Eval, &mut rng))?;
            preds.push(in_fold(fold, predict_image(&probs))?);
            labels.push(e.label);
            if binary {
                let (_, p_car) = in_fold(fold, two_class_map(&probs))?;
                pooled_scores.push(p_car);
                pooled_binary_labels.push(e.label >= 2);
            }
        }
        let (cm, acc4) = confusion_and_accuracy(&preds, &labels, classes)?;
        pooled_confusion.merge(&cm);

        let (acc2, auc) = if binary {
            let n = preds.len();
            let start = pooled_scores.len() - n;
            let fold_scores = &pooled_scores[start..];
            let fold_bin = &pooled_binary_labels[start..];
            let correct2 = preds
                .iter()
                .zip(&labels)
                .filter(|&(&p, &t)| (p >= 2) == (t >= 2))
                .count();
            let acc2 = correct2 as f64 / n as f64;
            // single-class folds (possible for tiny fold sizes) skip AUC
            let auc = if fold_bin.iter().any(|&b| b) && fold_bin.iter().any(|&b| !b) {
                Some(in_fold(fold, roc_auc(fold_scores, fold_bin))?.0)
            } else {
                None
            };
            (Some(acc2), auc)
        } else {
            (None, None)
        };
        folds.push(FoldMetrics {
            fold,
            test_images: test.entries.len(),
            acc4,
            acc2,
            auc,
        });
    }

    let (mean_acc4, std_acc4) = mean_std(&folds.iter().map(|f| f.acc4).collect::<Vec<_>>());
    let acc2s: Vec<f64> = folds.iter().filter_map(|f| f.acc2).collect();
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
    let (mean_acc2, std_acc2) = if acc2s.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&acc2s);
        (Some(m), Some(s))
    };
    let (mean_auc, std_auc) = if aucs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&aucs);
        (Some(m), Some(s))
    };
    let (pooled_auc, pooled_roc) = if binary && !pooled_scores.is_empty() {
        let (a, r) = roc_auc(&pooled_scores, &pooled_binary_labels)?;
        (Some(a), r)
    } else {
        (None, Vec::new())
    };

    Ok(CvReport {
        folds,
        mean_acc4,
        std_acc4,
        mean_acc2,
        std_acc2,
        mean_auc,
        std_auc,
        pooled_confusion,
        pooled_roc,
        pooled_auc,
    })
}
