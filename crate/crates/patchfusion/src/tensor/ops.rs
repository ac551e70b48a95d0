//! Differentiable tensor primitives.
//!
//! Every op validates shapes up front, computes the forward value, and, if
//! the tape is recording and any input requires a gradient, pushes a
//! backward closure that accumulates into the inputs.

use super::{Mode, Tape, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

fn track(tape: &Tape, inputs: &[&Tensor]) -> bool {
    tape.enabled() && inputs.iter().any(|t| t.requires_grad())
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("{what} must be 4-d (NCHW), got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "window {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Elementwise addition of two same-shape tensors.
pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let out = Tensor::new(&a.shape(), data)?;
    if track(tape, &[a, b]) {
        out.set_requires_grad(true);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.push(Box::new(move || {
            if let Some(g) = o.grad_vec() {
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&g);
                }
            }
        }));
    }
    Ok(out)
}

/// Elementwise product of two same-shape tensors.
pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let out = Tensor::new(&a.shape(), data)?;
    if track(tape, &[a, b]) {
        out.set_requires_grad(true);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.push(Box::new(move || {
            if let Some(g) = o.grad_vec() {
                if a.requires_grad() {
                    let bd = b.to_vec();
                    let da: Vec<f64> = g.iter().zip(&bd).map(|(g, b)| g * b).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.to_vec();
                    let db: Vec<f64> = g.iter().zip(&ad).map(|(g, a)| g * a).collect();
                    b.accumulate_grad(&db);
                }
            }
        }));
    }
    Ok(out)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(tape: &mut Tape, x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    let out = Tensor::scalar(s);
    if track(tape, &[x]) {
        out.set_requires_grad(true);
        let (x, o) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            if let Some(g) = o.grad_vec() {
                x.accumulate_grad(&vec![g[0]; x.numel()]);
            }
        }));
    }
    out
}

/// Reshape without reordering; the element count must match.
pub fn reshape(tape: &mut Tape, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let numel: usize = new_shape.iter().product();
    if numel != x.numel() {
        return Err(Error::Shape(format!(
            "reshape: {:?} ({} elements) to {:?} ({} elements)",
            x.shape(),
            x.numel(),
            new_shape,
            numel
        )));
    }
    let out = Tensor::new(new_shape, x.to_vec())?;
    if track(tape, &[x]) {
        out.set_requires_grad(true);
        let (x, o) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            if let Some(g) = o.grad_vec() {
                x.accumulate_grad(&g);
            }
        }));
    }
    Ok(out)
}

pub fn relu(tape: &mut Tape, x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    let out = Tensor::new(&x.shape(), data).expect("relu preserves shape");
    if track(tape, &[x]) {
        out.set_requires_grad(true);
        let (x, o) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            if let Some(g) = o.grad_vec() {
                let xd = x.to_vec();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&xd)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                x.accumulate_grad(&dx);
            }
        }));
    }
    out
}

/// 2-d convolution over NCHW input with an OCkk weight and optional
/// per-output-channel bias.
pub fn conv2d(
    tape: &mut Tape,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if stride < 1 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let (n, c, h, w) = dims4(input, "conv2d input")?;
    let (oc, wc, kh, kw) = dims4(weight, "conv2d weight")?;
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels (shape {:?}) but weight expects {wc} (shape {:?})",
            input.shape(),
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {oc} output channels",
                b.shape()
            )));
        }
    }
    let oh = out_extent(h, kh, stride, padding)?;
    let ow = out_extent(w, kw, stride, padding)?;

    let xd = input.to_vec();
    let wd = weight.to_vec();
    let bd = bias.map(|b| b.to_vec());
    let mut out = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            let base_b = bd.as_ref().map_or(0.0, |b| b[o]);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = base_b;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = ((ni * c + ci) * h + iy as usize) * w;
                            let wrow = ((o * c + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[row + ix as usize] * wd[wrow + kx];
                            }
                        }
                    }
                    out[((ni * oc + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    let output = Tensor::new(&[n, oc, oh, ow], out)?;

    let mut inputs = vec![input, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    if track(tape, &inputs) {
        output.set_requires_grad(true);
        let (xi, wi, oi) = (input.clone(), weight.clone(), output.clone());
        let bi = bias.cloned();
        tape.push(Box::new(move || {
            let g = match oi.grad_vec() {
                Some(g) => g,
                None => return,
            };
            let xd = xi.to_vec();
            let wd = wi.to_vec();
            let mut dx = vec![0.0; xd.len()];
            let mut dw = vec![0.0; wd.len()];
            let mut db = vec![0.0; oc];
            for ni in 0..n {
                for o in 0..oc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let go = g[((ni * oc + o) * oh + y) * ow + x];
                            if go == 0.0 {
                                continue;
                            }
                            db[o] += go;
                            for ci in 0..c {
                                for ky in 0..kh {
                                    let iy = (y * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = ((ni * c + ci) * h + iy as usize) * w;
                                    let wrow = ((o * c + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = (x * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dx[row + ix as usize] += go * wd[wrow + kx];
                                        dw[wrow + kx] += go * xd[row + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if xi.requires_grad() {
                xi.accumulate_grad(&dx);
            }
            if wi.requires_grad() {
                wi.accumulate_grad(&dw);
            }
            if let Some(b) = &bi {
                if b.requires_grad() {
                    b.accumulate_grad(&db);
                }
            }
        }));
    }
    Ok(output)
}

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> BnStats {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Batch normalization over N, H, W per channel.
///
/// Train mode normalizes by batch statistics and folds them into the
/// running stats with the given momentum; eval mode normalizes by the
/// running stats. Differentiable w.r.t. input, gamma and beta.
pub fn batchnorm2d(
    tape: &mut Tape,
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("batchnorm2d: eps must be > 0".into()));
    }
    let (n, c, h, w) = dims4(input, "batchnorm2d input")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm2d: gamma {:?} / beta {:?} must both have length {c}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if stats.running_mean.len() != c || stats.running_var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm2d: running stats sized {} for {c} channels",
            stats.running_mean.len()
        )));
    }
    let m = n * h * w;
    if mode == Mode::Train && m == 0 {
        return Err(Error::InvalidArgument(
            "batchnorm2d: zero-size batch in train mode".into(),
        ));
    }

    let xd = input.to_vec();
    let gd = gamma.to_vec();
    let bd = beta.to_vec();
    let plane = h * w;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        s += xd[base + i];
                    }
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        let d = xd[base + i] - mu;
                        v += d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = v / m as f64;
            }
            for ci in 0..c {
                stats.running_mean[ci] = (1.0 - momentum) * stats.running_mean[ci] + momentum * mean[ci];
                stats.running_var[ci] = (1.0 - momentum) * stats.running_var[ci] + momentum * var[ci];
            }
            (mean, var)
        }
        Mode::Eval => (stats.running_mean.clone(), stats.running_var.clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let xh = (xd[base + i] - mean[ci]) * inv_std[ci];
                xhat[base + i] = xh;
                out[base + i] = gd[ci] * xh + bd[ci];
            }
        }
    }
    let output = Tensor::new(&input.shape(), out)?;

    if track(tape, &[input, gamma, beta]) {
        output.set_requires_grad(true);
        let (xi, gi, bi, oi) = (input.clone(), gamma.clone(), beta.clone(), output.clone());
        tape.push(Box::new(move || {
            let g = match oi.grad_vec() {
                Some(g) => g,
                None => return,
            };
            let gd = gi.to_vec();
            let mf = m as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        dgamma[ci] += g[base + i] * xhat[base + i];
                        dbeta[ci] += g[base + i];
                    }
                }
            }
            if xi.requires_grad() {
                let mut dx = vec![0.0; xd.len()];
                match mode {
                    Mode::Train => {
                        // dx = gamma*inv_std * (g - mean(g) - xhat * mean(g*xhat))
                        for ci in 0..c {
                            let mean_g = dbeta[ci] / mf;
                            let mean_gx = dgamma[ci] / mf;
                            let scale = gd[ci] * inv_std[ci];
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for i in 0..plane {
                                    dx[base + i] =
                                        scale * (g[base + i] - mean_g - xhat[base + i] * mean_gx);
                                }
                            }
                        }
                    }
                    Mode::Eval => {
                        for ci in 0..c {
                            let scale = gd[ci] * inv_std[ci];
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for i in 0..plane {
                                    dx[base + i] = scale * g[base + i];
                                }
                            }
                        }
                    }
                }
                xi.accumulate_grad(&dx);
            }
            if gi.requires_grad() {
                gi.accumulate_grad(&dgamma);
            }
            if bi.requires_grad() {
                bi.accumulate_grad(&dbeta);
            }
        }));
    }
    Ok(output)
}

/// Max pooling; the gradient routes to the argmax position, first
/// row-major index on ties.
pub fn maxpool2d(tape: &mut Tape, input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    maxpool2d_padded(tape, input, k, stride, 0)
}

/// Max pooling with zero padding (padded positions are treated as absent,
/// never selected as the max unless the window is entirely padding).
pub fn maxpool2d_padded(
    tape: &mut Tape,
    input: &Tensor,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "maxpool2d input")?;
    let oh = out_extent(h, k, stride, padding)?;
    let ow = out_extent(w, k, stride, padding)?;
    let xd = input.to_vec();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (y * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (x * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((ni * c + ci) * oh + y) * ow + x;
                    out[o] = if best_idx == usize::MAX { 0.0 } else { best };
                    argmax[o] = best_idx;
                }
            }
        }
    }
    let output = Tensor::new(&[n, c, oh, ow], out)?;
    if track(tape, &[input]) {
        output.set_requires_grad(true);
        let (xi, oi) = (input.clone(), output.clone());
        tape.push(Box::new(move || {
            if let Some(g) = oi.grad_vec() {
                let mut dx = vec![0.0; xi.numel()];
                for (o, &idx) in argmax.iter().enumerate() {
                    if idx != usize::MAX {
                        dx[idx] += g[o];
                    }
                }
                xi.accumulate_grad(&dx);
            }
        }));
    }
    Ok(output)
}

/// Average pooling over k-by-k windows.
pub fn avgpool2d(tape: &mut Tape, input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "avgpool2d input")?;
    let oh = out_extent(h, k, stride, 0)?;
    let ow = out_extent(w, k, stride, 0)?;
    let xd = input.to_vec();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let row = base + (y * stride + ky) * w + x * stride;
                        for kx in 0..k {
                            acc += xd[row + kx];
                        }
                    }
                    out[((ni * c + ci) * oh + y) * ow + x] = acc * inv;
                }
            }
        }
    }
    let output = Tensor::new(&[n, c, oh, ow], out)?;
    if track(tape, &[input]) {
        output.set_requires_grad(true);
        let (xi, oi) = (input.clone(), output.clone());
        tape.push(Box::new(move || {
            if let Some(g) = oi.grad_vec() {
                let mut dx = vec![0.0; xi.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for y in 0..oh {
                            for x in 0..ow {
                                let go = g[((ni * c + ci) * oh + y) * ow + x] * inv;
                                for ky in 0..k {
                                    let row = base + (y * stride + ky) * w + x * stride;
                                    for kx in 0..k {
                                        dx[row + kx] += go;
                                    }
                                }
                            }
                        }
                    }
                }
                xi.accumulate_grad(&dx);
            }
        }));
    }
    Ok(output)
}

/// Mean over the full spatial extent: NCHW -> NC.
pub fn global_avg_pool(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "global_avg_pool input")?;
    let plane = h * w;
    let inv = 1.0 / plane as f64;
    let xd = input.to_vec();
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            out[ni * c + ci] = xd[base..base + plane].iter().sum::<f64>() * inv;
        }
    }
    let output = Tensor::new(&[n, c], out)?;
    if track(tape, &[input]) {
        output.set_requires_grad(true);
        let (xi, oi) = (input.clone(), output.clone());
        tape.push(Box::new(move || {
            if let Some(g) = oi.grad_vec() {
                let mut dx = vec![0.0; xi.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let go = g[ni * c + ci] * inv;
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            dx[base + i] = go;
                        }
                    }
                }
                xi.accumulate_grad(&dx);
            }
        }));
    }
    Ok(output)
}

/// Fully connected layer: `x (N,D) @ w (D,E) + b (E)`.
pub fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::Shape(format!(
            "linear: input {:?} vs weight {:?}",
            xs, ws
        )));
    }
    let (n, d, e) = (xs[0], xs[1], ws[1]);
    if b.shape() != [e] {
        return Err(Error::Shape(format!(
            "linear: bias {:?} does not match {e} outputs",
            b.shape()
        )));
    }
    let xd = x.to_vec();
    let wd = w.to_vec();
    let bd = b.to_vec();
    let mut out = vec![0.0; n * e];
    for i in 0..n {
        for j in 0..e {
            let mut acc = bd[j];
            for p in 0..d {
                acc += xd[i * d + p] * wd[p * e + j];
            }
            out[i * e + j] = acc;
        }
    }
    let output = Tensor::new(&[n, e], out)?;
    if track(tape, &[x, w, b]) {
        output.set_requires_grad(true);
        let (xi, wi, bi, oi) = (x.clone(), w.clone(), b.clone(), output.clone());
        tape.push(Box::new(move || {
            let g = match oi.grad_vec() {
                Some(g) => g,
                None => return,
            };
            let xd = xi.to_vec();
            let wd = wi.to_vec();
            if xi.requires_grad() {
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for p in 0..d {
                        let mut acc = 0.0;
                        for j in 0..e {
                            acc += g[i * e + j] * wd[p * e + j];
                        }
                        dx[i * d + p] = acc;
                    }
                }
                xi.accumulate_grad(&dx);
            }
            if wi.requires_grad() {
                let mut dw = vec![0.0; d * e];
                for p in 0..d {
                    for j in 0..e {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += xd[i * d + p] * g[i * e + j];
                        }
                        dw[p * e + j] = acc;
                    }
                }
                wi.accumulate_grad(&dw);
            }
            if bi.requires_grad() {
                let mut db = vec![0.0; e];
                for i in 0..n {
                    for j in 0..e {
                        db[j] += g[i * e + j];
                    }
                }
                bi.accumulate_grad(&db);
            }
        }));
    }
    Ok(output)
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax(tape: &mut Tape, logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Shape(format!(
            "softmax: expected (N, K) with K >= 2, got {s:?}"
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let (n, k) = (s[0], s[1]);
    let xd = logits.to_vec();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &xd[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            out[i * k + j] = e;
            z += e;
        }
        for j in 0..k {
            out[i * k + j] /= z;
        }
    }
    let output = Tensor::new(&[n, k], out)?;
    if track(tape, &[logits]) {
        output.set_requires_grad(true);
        let (xi, oi) = (logits.clone(), output.clone());
        tape.push(Box::new(move || {
            if let Some(g) = oi.grad_vec() {
                let p = oi.to_vec();
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..k {
                        dot += g[i * k + j] * p[i * k + j];
                    }
                    for j in 0..k {
                        dx[i * k + j] = p[i * k + j] * (g[i * k + j] - dot);
                    }
                }
                xi.accumulate_grad(&dx);
            }
        }));
    }
    Ok(output)
}

/// Mean negative log-likelihood of the true class under the softmax of
/// the logits. Gradient w.r.t. logits is `(softmax - onehot) / N`.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy: expected (N, K) logits, got {s:?}"
        )));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "cross_entropy: {n} logit rows but {} labels",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let xd = logits.to_vec();
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &xd[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            probs[i * k + j] = e;
            z += e;
        }
        for j in 0..k {
            probs[i * k + j] /= z;
        }
        // log p = (x - max) - ln z, computed without re-exponentiating
        loss -= row[labels[i]] - max - z.ln();
    }
    loss /= n as f64;
    let output = Tensor::scalar(loss);
    if track(tape, &[logits]) {
        output.set_requires_grad(true);
        let (xi, oi) = (logits.clone(), output.clone());
        let labels = labels.to_vec();
        tape.push(Box::new(move || {
            if let Some(g) = oi.grad_vec() {
                let scale = g[0] / n as f64;
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dx[i * k + j] = (probs[i * k + j] - onehot) * scale;
                    }
                }
                xi.accumulate_grad(&dx);
            }
        }));
    }
    Ok(output)
}

/// Inverted dropout: train mode zeroes elements with probability `p` and
/// scales survivors by `1/(1-p)`; eval mode is the identity.
pub fn dropout(
    tape: &mut Tape,
    x: &Tensor,
    p: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout: p must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        let out = Tensor::new(&x.shape(), x.to_vec())?;
        if track(tape, &[x]) {
            out.set_requires_grad(true);
            let (xi, oi) = (x.clone(), out.clone());
            tape.push(Box::new(move || {
                if let Some(g) = oi.grad_vec() {
                    xi.accumulate_grad(&g);
                }
            }));
        }
        return Ok(out);
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    let data: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let out = Tensor::new(&x.shape(), data)?;
    if track(tape, &[x]) {
        out.set_requires_grad(true);
        let (xi, oi) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            if let Some(g) = oi.grad_vec() {
                let dx: Vec<f64> = g.iter().zip(&mask).map(|(g, m)| g * m).collect();
                xi.accumulate_grad(&dx);
            }
        }));
    }
    Ok(out)
}
