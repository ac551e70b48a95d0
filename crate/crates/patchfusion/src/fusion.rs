//! Spatial fusion: probability-map assembly, the deep spatial fusion MLP,
//! MAP image prediction and vote-based baseline fusers.

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{dropout, linear, relu, softmax, Mode, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const FIBER_TOLERANCE: f64 = 1e-6;

/// The M x N x K array of per-patch class probabilities in spatial order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    /// Probability fiber at grid position (i, j).
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let k = self.classes;
        let base = (i * self.cols + j) * k;
        &self.values[base..base + k]
    }

    /// Row-major flatten; the exact inverse of assembly.
    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Serialize as CSV with header `i,j,p_0,...,p_{K-1}`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("i,j");
        for k in 0..self.classes {
            out.push_str(&format!(",p_{k}"));
        }
        out.push('\n');
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push_str(&format!("{i},{j}"));
                for p in self.fiber(i, j) {
                    out.push_str(&format!(",{p:.17e}"));
                }
                out.push('\n');
            }
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<ProbabilityMap> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Csv(format!("{}: empty file", path.display())))?;
        let classes = header.split(',').count().saturating_sub(2);
        if classes == 0 {
            return Err(Error::Csv(format!("{}: malformed header", path.display())));
        }
        let mut cells: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        let (mut rows, mut cols) = (0usize, 0usize);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != classes + 2 {
                return Err(Error::Csv(format!("{}: bad row `{line}`", path.display())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Csv(format!("bad number `{s}`")))
            };
            let i = fields[0]
                .parse::<usize>()
                .map_err(|_| Error::Csv(format!("bad index `{}`", fields[0])))?;
            let j = fields[1]
                .parse::<usize>()
                .map_err(|_| Error::Csv(format!("bad index `{}`", fields[1])))?;
            let fiber = fields[2..]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<Vec<f64>>>()?;
            rows = rows.max(i + 1);
            cols = cols.max(j + 1);
            cells.push((i, j, fiber));
        }
        let mut patch_probs = vec![None; rows * cols];
        for (i, j, fiber) in cells {
            patch_probs[i * cols + j] = Some(fiber);
        }
        let patch_probs: Vec<Vec<f64>> = patch_probs
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Csv(format!("{}: missing grid cells", path.display())))?;
        assemble_probability_map(&patch_probs, rows, cols)
    }
}

/// Arrange per-patch probability vectors in row-major spatial order:
/// `values[i][j] = patch_probs[i*N + j]`. Pure reshaping; fibers must
/// already be valid probability vectors.
pub fn assemble_probability_map(
    patch_probs: &[Vec<f64>],
    rows: usize,
    cols: usize,
) -> Result<ProbabilityMap> {
    if patch_probs.len() != rows * cols {
        return Err(Error::Shape(format!(
            "expected {rows}x{cols} = {} patch vectors, got {}",
            rows * cols,
            patch_probs.len()
        )));
    }
    let classes = patch_probs.first().map_or(0, |p| p.len());
    let mut values = Vec::with_capacity(rows * cols * classes);
    for (idx, fiber) in patch_probs.iter().enumerate() {
        if fiber.len() != classes {
            return Err(Error::Shape(format!(
                "patch {idx}: fiber length {} != {classes}",
                fiber.len()
            )));
        }
        let sum: f64 = fiber.iter().sum();
        if fiber.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > FIBER_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "patch {idx}: not a probability vector (sum {sum})"
            )));
        }
        values.extend_from_slice(fiber);
    }
    Ok(ProbabilityMap {
        rows,
        cols,
        classes,
        values,
    })
}

/// Geometry of the 4-layer fusion MLP (3 hidden layers + output, dropout
/// before every hidden layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    pub hidden_sizes: [usize; 3],
    pub dropout_p: f64,
}

impl FusionSpec {
    pub fn new(rows: usize, cols: usize, classes: usize) -> FusionSpec {
        FusionSpec {
            rows,
            cols,
            classes,
            hidden_sizes: [128, 64, 32],
            dropout_p: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.rows * self.cols * self.classes == 0 {
            return Err(Error::InvalidArgument("empty fusion geometry".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.rows * self.cols * self.classes
    }
}

pub struct FusionNet {
    pub spec: FusionSpec,
    layers: Vec<(Tensor, Tensor)>,
}

pub fn build_fusion(spec: &FusionSpec, rng: &mut impl Rng) -> Result<FusionNet> {
    spec.validate()?;
    let dims = [
        spec.input_dim(),
        spec.hidden_sizes[0],
        spec.hidden_sizes[1],
        spec.hidden_sizes[2],
        spec.classes,
    ];
    let layers = dims
        .windows(2)
        .map(|w| {
            (
                init::he_linear(w[0], w[1], rng).with_grad(),
                Tensor::zeros(&[w[1]]).with_grad(),
            )
        })
        .collect();
    Ok(FusionNet {
        spec: spec.clone(),
        layers,
    })
}

impl FusionNet {
    /// Flattened maps (B, M*N*K) -> logits (B, K). Dropout precedes each
    /// hidden layer, including the first; none before the output layer.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let s = input.shape();
        if s.len() != 2 || s[1] != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "expected (B, {}) fusion input, got {s:?}",
                self.spec.input_dim()
            )));
        }
        let mut x = input.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i < self.layers.len() - 1 {
                x = dropout(tape, &x, self.spec.dropout_p, mode, rng)?;
                x = linear(tape, &x, w, b)?;
                x = relu(tape, &x);
            } else {
                x = linear(tape, &x, w, b)?;
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [
                    (format!("fc{}.weight", i + 1), w.clone()),
                    (format!("fc{}.bias", i + 1), b.clone()),
                ]
            })
            .collect()
    }
}

/// Fuse one probability map into a global class-probability vector.
pub fn fuse_mlp(
    net: &FusionNet,
    map: &ProbabilityMap,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if map.rows != net.spec.rows || map.cols != net.spec.cols || map.classes != net.spec.classes {
        return Err(Error::Shape(format!(
            "map {}x{}x{} does not match fusion spec {}x{}x{}",
            map.rows, map.cols, map.classes, net.spec.rows, net.spec.cols, net.spec.classes
        )));
    }
    let mut tape = Tape::no_grad();
    let input = Tensor::new(&[1, net.spec.input_dim()], map.flatten().to_vec())?;
    let logits = net.forward_logits(&mut tape, &input, mode, rng)?;
    Ok(softmax(&mut tape, &logits)?.to_vec())
}

/// MAP prediction: argmax with ties broken by lowest index.
pub fn predict_image(class_probs: &[f64]) -> Result<usize> {
    if class_probs.is_empty() {
        return Err(Error::InvalidArgument("empty probability vector".into()));
    }
    let mut best = 0;
    for (i, p) in class_probs.iter().enumerate() {
        if *p > class_probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Vote-based baseline fusers over a probability map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteStrategy {
    /// Mode of per-patch argmaxes; ties go to the lowest class index.
    Majority,
    /// Class of the single highest fiber entry anywhere in the map.
    MaxProb,
    /// Argmax of the fiber-wise sum.
    SumProb,
}

impl std::str::FromStr for VoteStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<VoteStrategy> {
        match s {
            "majority" => Ok(VoteStrategy::Majority),
            "max" | "max_prob" => Ok(VoteStrategy::MaxProb),
            "sum" | "sum_prob" => Ok(VoteStrategy::SumProb),
            other => Err(Error::InvalidArgument(format!(
                "unknown vote strategy `{other}` (expected majority|max|sum)"
            ))),
        }
    }
}

pub fn fuse_vote(map: &ProbabilityMap, strategy: VoteStrategy) -> usize {
    let k = map.classes;
    match strategy {
        VoteStrategy::Majority => {
            let mut counts = vec![0usize; k];
            for i in 0..map.rows {
                for j in 0..map.cols {
                    counts[predict_image(map.fiber(i, j)).expect("non-empty fiber")] += 1;
                }
            }
            let mut best = 0;
            for (c, n) in counts.iter().enumerate() {
                if *n > counts[best] {
                    best = c;
                }
            }
            best
        }
        VoteStrategy::MaxProb => {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (idx, p) in map.flatten().iter().enumerate() {
                if *p > best.1 {
                    best = (idx % k, *p);
                }
            }
            best.0
        }
        VoteStrategy::SumProb => {
            let mut sums = vec![0.0; k];
            for (idx, p) in map.flatten().iter().enumerate() {
                sums[idx % k] += p;
            }
            predict_image(&sums).expect("non-empty sums")
        }
    }
}
