//! The adapted 18-layer residual network for patch classification: a 7x7
//! stem, four groups of two basic blocks (identity shortcuts, 1x1
//! projection where dimensions change), global average pooling and a
//! linear head.

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{
    add, batchnorm2d, conv2d, global_avg_pool, linear, maxpool2d_padded, relu, softmax, BnStats,
    Mode, Tape, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub blocks: usize,
    pub channels: usize,
    pub first_stride: usize,
}

/// Declarative network geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_size: usize,
    pub stem: StemSpec,
    pub groups: Vec<GroupSpec>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Full-size geometry: 512-pixel patches, channels 64/128/256/512.
    pub fn full(num_classes: usize) -> ModelSpec {
        ModelSpec::with_channels(512, &[64, 128, 256, 512], num_classes)
    }

    /// Small geometry for fast tests and experiments: 64-pixel patches, channels 8/16/32/64.
    pub fn small(num_classes: usize) -> ModelSpec {
        ModelSpec::with_channels(64, &[8, 16, 32, 64], num_classes)
    }

    pub fn with_channels(input_size: usize, channels: &[usize; 4], num_classes: usize) -> ModelSpec {
        ModelSpec {
            input_size,
            stem: StemSpec {
                kernel: 7,
                channels: channels[0],
                stride: 2,
                pool_kernel: 3,
                pool_stride: 2,
            },
            groups: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| GroupSpec {
                    blocks: 2,
                    channels: c,
                    first_stride: if i == 0 { 1 } else { 2 },
                })
                .collect(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "expected exactly 4 block groups, got {}",
                self.groups.len()
            )));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.blocks != 2 {
                return Err(Error::InvalidArgument(format!(
                    "group {i} must have 2 basic blocks, got {}",
                    g.blocks
                )));
            }
            let want = if i == 0 { 1 } else { 2 };
            if g.first_stride != want {
                return Err(Error::InvalidArgument(format!(
                    "group {i} first_stride must be {want}, got {}",
                    g.first_stride
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.input_size == 0 {
            return Err(Error::InvalidArgument("input_size must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of the final feature maps, by the conv/pool extent
    /// arithmetic (stem pad k/2, pool pad 1, block convs pad 1).
    pub fn feature_geometry(&self) -> (usize, usize) {
        let ext = |s: usize, k: usize, stride: usize, pad: usize| (s + 2 * pad - k) / stride + 1;
        let mut s = ext(self.input_size, self.stem.kernel, self.stem.stride, self.stem.kernel / 2);
        s = ext(s, self.stem.pool_kernel, self.stem.pool_stride, 1);
        for g in &self.groups {
            s = ext(s, 3, g.first_stride, 1);
        }
        (s, s)
    }
}

/// Per-group receptive-field range in input pixels: RF after the first
/// conv of the group (min) and after its last conv (max), by the
/// recurrence `rf' = rf + (k-1)*jump; jump' = jump*stride`.
pub fn receptive_fields(spec: &ModelSpec) -> Vec<(usize, usize)> {
    let mut rf = 1usize;
    let mut jump = 1usize;
    let step = |k: usize, stride: usize, rf: &mut usize, jump: &mut usize| {
        *rf += (k - 1) * *jump;
        *jump *= stride;
    };
    step(spec.stem.kernel, spec.stem.stride, &mut rf, &mut jump);
    step(spec.stem.pool_kernel, spec.stem.pool_stride, &mut rf, &mut jump);
    let mut out = Vec::with_capacity(spec.groups.len());
    for g in &spec.groups {
        let convs = g.blocks * 2;
        let mut min_rf = 0;
        for i in 0..convs {
            let stride = if i == 0 { g.first_stride } else { 1 };
            step(3, stride, &mut rf, &mut jump);
            if i == 0 {
                min_rf = rf;
            }
        }
        out.push((min_rf, rf));
    }
    out
}

struct ConvBn {
    weight: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BnStats,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    fn new(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> ConvBn {
        ConvBn {
            weight: init::he_conv(out_ch, in_ch, kernel, kernel, rng).with_grad(),
            gamma: Tensor::full(&[out_ch], 1.0).with_grad(),
            beta: Tensor::zeros(&[out_ch]).with_grad(),
            stats: BnStats::new(out_ch),
            stride,
            padding,
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = conv2d(tape, x, &self.weight, None, self.stride, self.padding)?;
        batchnorm2d(
            tape,
            &y,
            &self.gamma,
            &self.beta,
            &mut self.stats,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    projection: Option<ConvBn>,
}

impl BasicBlock {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> BasicBlock {
        let projection = if stride != 1 || in_ch != out_ch {
            Some(ConvBn::new(out_ch, in_ch, 1, stride, 0, rng))
        } else {
            None
        };
        BasicBlock {
            conv1: ConvBn::new(out_ch, in_ch, 3, stride, 1, rng),
            conv2: ConvBn::new(out_ch, out_ch, 3, 1, 1, rng),
            projection,
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv1.forward(tape, x, mode)?;
        let y = relu(tape, &y);
        let y = self.conv2.forward(tape, &y, mode)?;
        let shortcut = match &mut self.projection {
            Some(p) => p.forward(tape, x, mode)?,
            None => x.clone(),
        };
        let y = add(tape, &y, &shortcut)?;
        Ok(relu(tape, &y))
    }
}

/// Final pre-pool feature maps plus the class probability vector.
pub struct PatchOutput {
    pub features: Tensor,
    pub probs: Tensor,
}

pub struct PatchNet {
    pub spec: ModelSpec,
    stem: ConvBn,
    groups: Vec<Vec<BasicBlock>>,
    fc_weight: Tensor,
    fc_bias: Tensor,
}

/// Construct the network with He fan-in initialization from the supplied
/// seeded stream (batch-norm gamma 1, beta 0).
pub fn build_patchnet(spec: &ModelSpec, rng: &mut impl Rng) -> Result<PatchNet> {
    spec.validate()?;
    let stem = ConvBn::new(
        spec.stem.channels,
        3,
        spec.stem.kernel,
        spec.stem.stride,
        spec.stem.kernel / 2,
        rng,
    );
    let mut groups = Vec::new();
    let mut in_ch = spec.stem.channels;
    for g in &spec.groups {
        let mut blocks = Vec::new();
        for b in 0..g.blocks {
            let stride = if b == 0 { g.first_stride } else { 1 };
            blocks.push(BasicBlock::new(in_ch, g.channels, stride, rng));
            in_ch = g.channels;
        }
        groups.push(blocks);
    }
    let fc_weight = init::he_linear(in_ch, spec.num_classes, rng).with_grad();
    let fc_bias = Tensor::zeros(&[spec.num_classes]).with_grad();
    Ok(PatchNet {
        spec: spec.clone(),
        stem,
        groups,
        fc_weight,
        fc_bias,
    })
}

impl PatchNet {
    /// Forward a batch of standardized patches; returns the final feature
    /// maps (pre-pool) and class logits.
    pub fn forward(&mut self, tape: &mut Tape, input: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let s = input.shape();
        let size = self.spec.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Shape(format!(
                "expected (N, 3, {size}, {size}) input, got {s:?}"
            )));
        }
        let x = self.stem.forward(tape, input, mode)?;
        let x = relu(tape, &x);
        let mut x = maxpool2d_padded(tape, &x, self.spec.stem.pool_kernel, self.spec.stem.pool_stride, 1)?;
        for group in &mut self.groups {
            for block in group.iter_mut() {
                x = block.forward(tape, &x, mode)?;
            }
        }
        let pooled = global_avg_pool(tape, &x)?;
        let logits = linear(tape, &pooled, &self.fc_weight, &self.fc_bias)?;
        Ok((x, logits))
    }

    /// Inference on a single patch: features plus softmax probabilities.
    pub fn forward_patch(&mut self, patch: &Tensor, mode: Mode) -> Result<PatchOutput> {
        let mut tape = Tape::no_grad();
        let (features, logits) = self.forward(&mut tape, patch, mode)?;
        let probs = softmax(&mut tape, &logits)?;
        Ok(PatchOutput { features, probs })
    }

    /// All trainable parameters, named, in declaration order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let push_convbn = |name: String, cb: &ConvBn, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{name}.weight"), cb.weight.clone()));
            out.push((format!("{name}.gamma"), cb.gamma.clone()));
            out.push((format!("{name}.beta"), cb.beta.clone()));
        };
        push_convbn("stem".into(), &self.stem, &mut out);
        for (gi, group) in self.groups.iter().enumerate() {
            for (bi, block) in group.iter().enumerate() {
                let base = format!("group{}.block{}", gi + 1, bi + 1);
                push_convbn(format!("{base}.conv1"), &block.conv1, &mut out);
                push_convbn(format!("{base}.conv2"), &block.conv2, &mut out);
                if let Some(p) = &block.projection {
                    push_convbn(format!("{base}.proj"), p, &mut out);
                }
            }
        }
        out.push(("fc.weight".into(), self.fc_weight.clone()));
        out.push(("fc.bias".into(), self.fc_bias.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Batch-norm running stats in the same order as [`PatchNet::params`]
    /// visits ConvBn layers.
    pub fn bn_stats(&self) -> Vec<BnStats> {
        let mut out = vec![self.stem.stats.clone()];
        for group in &self.groups {
            for block in group {
                out.push(block.conv1.stats.clone());
                out.push(block.conv2.stats.clone());
                if let Some(p) = &block.projection {
                    out.push(p.stats.clone());
                }
            }
        }
        out
    }

    pub fn set_bn_stats(&mut self, stats: &[BnStats]) -> Result<()> {
        let mut layers: Vec<&mut ConvBn> = vec![&mut self.stem];
        for group in &mut self.groups {
            for block in group.iter_mut() {
                layers.push(&mut block.conv1);
                layers.push(&mut block.conv2);
                if let Some(p) = &mut block.projection {
                    layers.push(p);
                }
            }
        }
        if layers.len() != stats.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} batch-norm stat sets, got {}",
                layers.len(),
                stats.len()
            )));
        }
        for (layer, s) in layers.into_iter().zip(stats) {
            if layer.stats.running_mean.len() != s.running_mean.len() {
                return Err(Error::InvalidArgument(
                    "batch-norm stat width mismatch".into(),
                ));
            }
            layer.stats = s.clone();
        }
        Ok(())
    }

    /// Zero the residual-branch weights of one block (test hook for the
    /// identity-map property).
    #[doc(hidden)]
    pub fn zero_residual_branch(&mut self, group: usize, block: usize) {
        let b = &mut self.groups[group][block];
        for t in [&b.conv1.weight, &b.conv2.weight] {
            for v in t.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
    }
}
