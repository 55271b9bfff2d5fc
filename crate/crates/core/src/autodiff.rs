//! Forward and reverse passes over a [`Model`].
//!
//! Convolutions are lowered to GEMM via per-sample im2col: the patch matrix
//! is built patch-major (`col[p][k]`), the forward product is `W x col^T`,
//! and the two backward products reuse the same buffer with transposed
//! strides. All accumulation is f64.
//!
//! The loss is mean softmax cross-entropy over the batch, so every gradient
//! here is already scaled by 1/N.
//!
//! ReLU propagates gradient only where the input was strictly positive; max
//! pooling routes gradient to the first maximal element of each window in
//! row-major order (ties included).

use crate::error::{Error, Result};
use crate::gemm::dgemm;
use crate::model::{Layer, Model, Shape};
use crate::tensor::Tensor;

/// Gradients produced by one backward pass.
pub struct Gradients {
    /// Per layer, `(d_weight, d_bias)` for conv/dense layers when parameter
    /// gradients were requested; `None` for parameterless layers.
    pub layers: Vec<Option<(Tensor, Tensor)>>,
    /// Gradient of the loss w.r.t. the input batch, when requested.
    pub input: Option<Tensor>,
}

#[derive(Clone, Copy)]
pub(crate) struct GradRequest {
    pub params: bool,
    pub input: bool,
}

/// Runs the batch through the network; returns `[N, classes]` logits.
pub fn forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let trace = forward_trace(model, batch)?;
    let nb = batch.shape()[0];
    Tensor::new(
        &[nb, model.classes()],
        trace.acts.last().expect("nonempty").data().to_vec(),
    )
}

/// Mean softmax cross-entropy plus parameter gradients.
pub fn loss_and_grads(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    let (loss, _, grads) = run(model, batch, labels, GradRequest { params: true, input: false })?;
    Ok((loss, grads))
}

/// Mean softmax cross-entropy plus the gradient w.r.t. the input batch —
/// the quantity PGD ascends.
pub fn input_gradient(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (loss, _, grads) = run(model, batch, labels, GradRequest { params: false, input: true })?;
    Ok((loss, grads.input.expect("input gradient requested")))
}

/// Loss without any gradients.
pub(crate) fn batch_loss(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let (loss, _, _) = run(model, batch, labels, GradRequest { params: false, input: false })?;
    Ok(loss)
}

/// Loss plus a digest of the activation pattern: the strict-positivity mask
/// of every ReLU input and the argmax choice of every pooling window. Two
/// evaluations with equal digests lie in the same linear region of every
/// nonsmooth layer, so the loss restricted to the segment between them is
/// smooth. [`crate::gradcheck`] uses this to recognize finite-difference
/// probes that straddle a kink, where a central difference estimates a
/// secant across the fold rather than the derivative.
pub(crate) fn loss_and_pattern(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, u64)> {
    use std::hash::Hasher;

    let trace = forward_trace(model, batch)?;
    let nb = batch.shape()[0];
    let k = model.classes();
    if labels.len() != nb {
        return Err(Error::shape(
            "labels",
            format!("{nb} labels"),
            format!("{}", labels.len()),
        ));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let (loss, _) = softmax_ce(trace.acts.last().expect("nonempty").data(), nb, k, labels);

    let mut digest = std::collections::hash_map::DefaultHasher::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Relu => {
                for &v in trace.acts[i].data() {
                    digest.write_u8((v > 0.0) as u8);
                }
            }
            Layer::MaxPool { .. } => {
                for &ix in &trace.pool_idx[i] {
                    digest.write_usize(ix);
                }
            }
            _ => {}
        }
    }
    Ok((loss, digest.finish()))
}

/// Full engine: loss, `[N, classes]` logits, and whichever gradients were
/// requested. The trainer uses this to get batch accuracy for free.
pub(crate) fn run(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    req: GradRequest,
) -> Result<(f64, Tensor, Gradients)> {
    let trace = forward_trace(model, batch)?;
    let nb = batch.shape()[0];
    let k = model.classes();
    if labels.len() != nb {
        return Err(Error::shape(
            "labels",
            format!("{nb} labels"),
            format!("{}", labels.len()),
        ));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let logits_data = trace.acts.last().expect("nonempty").data();
    let logits = Tensor::new(&[nb, k], logits_data.to_vec())?;
    let (loss, dlogits) = softmax_ce(logits_data, nb, k, labels);

    let mut grads = Gradients {
        layers: vec![None; model.layers().len()],
        input: None,
    };
    if req.params || req.input {
        backward(model, &trace, dlogits, req, &mut grads)?;
    }
    Ok((loss, logits, grads))
}

struct Trace {
    /// `acts[0]` is the batch; `acts[i + 1]` is the output of layer `i`.
    acts: Vec<Tensor>,
    /// For pool layers: per output element, the flat index (into the whole
    /// batch activation) of the window's first maximal input.
    pool_idx: Vec<Vec<usize>>,
}

fn forward_trace(model: &Model, batch: &Tensor) -> Result<Trace> {
    let [c0, h0, w0] = model.input_shape();
    let bs = batch.shape();
    if bs.len() != 4 || bs[1] != c0 || bs[2] != h0 || bs[3] != w0 {
        return Err(Error::shape(
            "forward",
            format!("[N, {c0}, {h0}, {w0}]"),
            format!("{bs:?}"),
        ));
    }
    let nb = bs[0];
    let shapes = model.shapes();
    let mut acts = Vec::with_capacity(model.layers().len() + 1);
    acts.push(batch.clone());
    let mut pool_idx = vec![Vec::new(); model.layers().len()];

    let mut cur = Shape::Chw(c0, h0, w0);
    for (i, layer) in model.layers().iter().enumerate() {
        let x = acts.last().expect("nonempty");
        let out = shapes[i];
        let y = match layer {
            Layer::Conv2d {
                kh,
                kw,
                in_ch,
                out_ch,
                stride,
                pad,
                weight,
                bias,
            } => {
                let Shape::Chw(_, hin, win) = cur else { unreachable!("validated chain") };
                let Shape::Chw(_, oh, ow) = out else { unreachable!() };
                conv_forward(
                    x.data(),
                    nb,
                    ConvDims { cin: *in_ch, hin, win, cout: *out_ch, kh: *kh, kw: *kw, stride: *stride, pad: *pad, oh, ow },
                    weight.data(),
                    bias.data(),
                )
            }
            Layer::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool { window, stride } => {
                let Shape::Chw(c, hin, win) = cur else { unreachable!() };
                let Shape::Chw(_, oh, ow) = out else { unreachable!() };
                let (y, idx) = pool_forward(x.data(), nb, c, hin, win, *window, *stride, oh, ow);
                pool_idx[i] = idx;
                y
            }
            Layer::Dense { input, output, weight, bias } => {
                dense_forward(x.data(), nb, *input, *output, weight.data(), bias.data())
            }
        };
        let shape = match out {
            Shape::Chw(c, h, w) => vec![nb, c, h, w],
            Shape::Flat(f) => vec![nb, f],
        };
        acts.push(Tensor::new(&shape, y)?);
        cur = out;
    }
    Ok(Trace { acts, pool_idx })
}

fn backward(
    model: &Model,
    trace: &Trace,
    dlogits: Vec<f64>,
    req: GradRequest,
    grads: &mut Gradients,
) -> Result<()> {
    let layers = model.layers();
    let shapes = model.shapes();
    let [c0, h0, w0] = model.input_shape();
    let nb = trace.acts[0].shape()[0];

    let mut dy = dlogits;
    for i in (0..layers.len()).rev() {
        let x = &trace.acts[i];
        let in_shape = if i == 0 { Shape::Chw(c0, h0, w0) } else { shapes[i - 1] };
        let want_dx = i > 0 || req.input;
        let dx = match &layers[i] {
            Layer::Conv2d {
                kh,
                kw,
                in_ch,
                out_ch,
                stride,
                pad,
                weight,
                ..
            } => {
                let Shape::Chw(_, hin, win) = in_shape else { unreachable!() };
                let Shape::Chw(_, oh, ow) = shapes[i] else { unreachable!() };
                let dims = ConvDims { cin: *in_ch, hin, win, cout: *out_ch, kh: *kh, kw: *kw, stride: *stride, pad: *pad, oh, ow };
                let (dx, dw, db) = conv_backward(x.data(), &dy, nb, dims, weight.data(), req.params, want_dx);
                if req.params {
                    grads.layers[i] = Some((
                        Tensor::new(&[*out_ch, *in_ch, *kh, *kw], dw)?,
                        Tensor::new(&[*out_ch], db)?,
                    ));
                }
                dx
            }
            Layer::Relu => {
                if want_dx {
                    Some(x.data().iter().zip(&dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect())
                } else {
                    None
                }
            }
            Layer::MaxPool { .. } => {
                if want_dx {
                    let mut dx = vec![0.0; x.len()];
                    for (&src, &g) in trace.pool_idx[i].iter().zip(&dy) {
                        dx[src] += g;
                    }
                    Some(dx)
                } else {
                    None
                }
            }
            Layer::Dense { input, output, weight, .. } => {
                let (dx, dw, db) =
                    dense_backward(x.data(), &dy, nb, *input, *output, weight.data(), req.params, want_dx);
                if req.params {
                    grads.layers[i] = Some((
                        Tensor::new(&[*output, *input], dw)?,
                        Tensor::new(&[*output], db)?,
                    ));
                }
                dx
            }
        };
        match dx {
            Some(v) if i == 0 => {
                grads.input = Some(Tensor::new(&[nb, c0, h0, w0], v)?);
                dy = Vec::new();
            }
            Some(v) => dy = v,
            None => dy = Vec::new(),
        }
    }
    Ok(())
}

/// Stable mean softmax cross-entropy and its gradient w.r.t. the logits,
/// `(softmax - onehot) / N`.
fn softmax_ce(logits: &[f64], nb: usize, k: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let mut dl = vec![0.0; nb * k];
    let mut total = 0.0;
    for s in 0..nb {
        let row = &logits[s * k..(s + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        total += m + z.ln() - row[labels[s]];
        for j in 0..k {
            dl[s * k + j] = (row[j] - m).exp() / z / nb as f64;
        }
        dl[s * k + labels[s]] -= 1.0 / nb as f64;
    }
    (total / nb as f64, dl)
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    hin: usize,
    win: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn patches(&self) -> usize {
        self.oh * self.ow
    }
    fn padded_hw(&self) -> (usize, usize) {
        (self.hin + 2 * self.pad, self.win + 2 * self.pad)
    }
}

/// Copies one sample into the zero-padded buffer.
fn fill_padded(xs: &[f64], d: ConvDims, padded: &mut [f64]) {
    let (hp, wp) = d.padded_hw();
    if d.pad > 0 {
        padded.fill(0.0);
    }
    for ci in 0..d.cin {
        for row in 0..d.hin {
            let src = ci * d.hin * d.win + row * d.win;
            let dst = ci * hp * wp + (row + d.pad) * wp + d.pad;
            padded[dst..dst + d.win].copy_from_slice(&xs[src..src + d.win]);
        }
    }
}

/// Gathers the patch matrix, patch-major: `col[p * K + k]`.
fn fill_col(padded: &[f64], d: ConvDims, col: &mut [f64]) {
    let (hp, wp) = d.padded_hw();
    let kk = d.patch_len();
    for p in 0..d.patches() {
        let oy = (p / d.ow) * d.stride;
        let ox = (p % d.ow) * d.stride;
        let mut k = p * kk;
        for ci in 0..d.cin {
            let base = ci * hp * wp;
            for dy in 0..d.kh {
                let row = base + (oy + dy) * wp + ox;
                col[k..k + d.kw].copy_from_slice(&padded[row..row + d.kw]);
                k += d.kw;
            }
        }
    }
}

fn conv_forward(x: &[f64], nb: usize, d: ConvDims, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (hp, wp) = d.padded_hw();
    let kk = d.patch_len();
    let pp = d.patches();
    let mut padded = vec![0.0; d.cin * hp * wp];
    let mut col = vec![0.0; pp * kk];
    let mut y = vec![0.0; nb * d.cout * pp];
    let sample = d.cin * d.hin * d.win;
    for s in 0..nb {
        fill_padded(&x[s * sample..][..sample], d, &mut padded);
        fill_col(&padded, d, &mut col);
        let ys = &mut y[s * d.cout * pp..][..d.cout * pp];
        // Y[c][p] = sum_k W[c][k] col[p][k]
        dgemm(d.cout, kk, pp, 1.0, weight, kk, 1, &col, 1, kk, 0.0, ys, pp, 1);
        for co in 0..d.cout {
            let b = bias[co];
            for v in &mut ys[co * pp..(co + 1) * pp] {
                *v += b;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    dy: &[f64],
    nb: usize,
    d: ConvDims,
    weight: &[f64],
    want_params: bool,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (hp, wp) = d.padded_hw();
    let kk = d.patch_len();
    let pp = d.patches();
    let sample = d.cin * d.hin * d.win;
    let mut padded = vec![0.0; d.cin * hp * wp];
    let mut col = vec![0.0; pp * kk];
    let mut dcol = vec![0.0; pp * kk];
    let mut dw = vec![0.0; if want_params { d.cout * kk } else { 0 }];
    let mut db = vec![0.0; if want_params { d.cout } else { 0 }];
    let mut dx = if want_dx { Some(vec![0.0; nb * sample]) } else { None };

    for s in 0..nb {
        let dys = &dy[s * d.cout * pp..][..d.cout * pp];
        if want_params || want_dx {
            fill_padded(&x[s * sample..][..sample], d, &mut padded);
            fill_col(&padded, d, &mut col);
        }
        if want_params {
            // dW[c][k] += sum_p dY[c][p] col[p][k]
            dgemm(d.cout, pp, kk, 1.0, dys, pp, 1, &col, kk, 1, 1.0, &mut dw, kk, 1);
            for co in 0..d.cout {
                db[co] += dys[co * pp..(co + 1) * pp].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[p][k] = sum_c dY[c][p] W[c][k]
            dgemm(pp, d.cout, kk, 1.0, dys, 1, pp, weight, kk, 1, 0.0, &mut dcol, kk, 1);
            padded.fill(0.0);
            for p in 0..pp {
                let oy = (p / d.ow) * d.stride;
                let ox = (p % d.ow) * d.stride;
                let mut k = p * kk;
                for ci in 0..d.cin {
                    let base = ci * hp * wp;
                    for dyk in 0..d.kh {
                        let row = base + (oy + dyk) * wp + ox;
                        for dxk in 0..d.kw {
                            padded[row + dxk] += dcol[k];
                            k += 1;
                        }
                    }
                }
            }
            let out = &mut dx[s * sample..][..sample];
            for ci in 0..d.cin {
                for row in 0..d.hin {
                    let src = ci * hp * wp + (row + d.pad) * wp + d.pad;
                    let dst = ci * d.hin * d.win + row * d.win;
                    out[dst..dst + d.win].copy_from_slice(&padded[src..src + d.win]);
                }
            }
        }
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn pool_forward(
    x: &[f64],
    nb: usize,
    c: usize,
    hin: usize,
    win: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut y = Vec::with_capacity(nb * c * oh * ow);
    let mut idx = Vec::with_capacity(nb * c * oh * ow);
    for plane in 0..nb * c {
        let base = plane * hin * win;
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * stride;
                let x0 = ox * stride;
                let mut best_idx = base + y0 * win + x0;
                let mut best = x[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let at = base + (y0 + dy) * win + (x0 + dx);
                        if x[at] > best {
                            best = x[at];
                            best_idx = at;
                        }
                    }
                }
                y.push(best);
                idx.push(best_idx);
            }
        }
    }
    (y, idx)
}

fn dense_forward(x: &[f64], nb: usize, input: usize, output: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; nb * output];
    // Y[n][o] = sum_i X[n][i] W[o][i]
    dgemm(nb, input, output, 1.0, x, input, 1, weight, 1, input, 0.0, &mut y, output, 1);
    for row in y.chunks_exact_mut(output) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    dy: &[f64],
    nb: usize,
    input: usize,
    output: usize,
    weight: &[f64],
    want_params: bool,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; if want_params { output * input } else { 0 }];
    let mut db = vec![0.0; if want_params { output } else { 0 }];
    if want_params {
        // dW[o][i] = sum_n dY[n][o] X[n][i]
        dgemm(output, nb, input, 1.0, dy, 1, output, x, input, 1, 0.0, &mut dw, input, 1);
        for row in dy.chunks_exact(output) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; nb * input];
        // dX[n][i] = sum_o dY[n][o] W[o][i]
        dgemm(nb, output, input, 1.0, dy, output, 1, weight, input, 1, 0.0, &mut dx, input, 1);
        dx
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-0.6..0.6)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn dense(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Layer {
        Layer::Dense {
            input,
            output,
            weight: rand_tensor(&[output, input], rng),
            bias: rand_tensor(&[output], rng),
        }
    }

    fn conv(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Layer {
        Layer::Conv2d {
            kh,
            kw,
            in_ch: cin,
            out_ch: cout,
            stride,
            pad,
            weight: rand_tensor(&[cout, cin, kh, kw], rng),
            bias: rand_tensor(&[cout], rng),
        }
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let layers = vec![Layer::Dense {
            input: 2,
            output: 2,
            weight: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]).unwrap(),
        }];
        let m = Model::new(layers, [1, 1, 2], 2).unwrap();
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 2]);
        assert_eq!(y.data(), [0.3, 0.7]);
    }

    #[test]
    fn one_by_one_conv_identity() {
        let layers = vec![Layer::Conv2d {
            kh: 1,
            kw: 1,
            in_ch: 1,
            out_ch: 1,
            stride: 1,
            pad: 0,
            weight: Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(&[1]).unwrap(),
        }];
        let m = Model::new(layers, [1, 1, 2], 2).unwrap();
        let x = Tensor::new(&[2, 1, 1, 2], vec![0.1, 0.9, -0.4, 0.2]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), [0.1, 0.9, -0.4, 0.2]);
    }

    #[test]
    fn conv_shapes_follow_the_floor_rule() {
        // 5x5 input, 3x3 kernel, stride 2, no padding: floor((5-3)/2)+1 = 2.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![conv(3, 3, 1, 2, 2, 0, &mut rng), dense(8, 2, &mut rng)];
        let m = Model::new(layers, [1, 5, 5], 2).unwrap();
        let x = rand_tensor(&[3, 1, 5, 5], &mut rng);
        assert_eq!(m.forward(&x).unwrap().shape(), [3, 2]);
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let layers = vec![Layer::Dense {
            input: 4,
            output: 3,
            weight: Tensor::zeros(&[3, 4]).unwrap(),
            bias: Tensor::zeros(&[3]).unwrap(),
        }];
        let m = Model::new(layers, [1, 2, 2], 3).unwrap();
        let x = Tensor::new(&[2, 1, 2, 2], vec![0.5; 8]).unwrap();
        let loss = batch_loss(&m, &x, &[0, 2]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_closed_form_gradient() {
        // Identity dense, one sample [a, b], label 0:
        // loss = ln(1 + e^(b-a)), d/da = -e^(b-a)/(1+e^(b-a)), d/db = +same.
        let layers = vec![Layer::Dense {
            input: 2,
            output: 2,
            weight: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]).unwrap(),
        }];
        let m = Model::new(layers, [1, 1, 2], 2).unwrap();
        let (a, b) = (0.4f64, -0.3f64);
        let x = Tensor::new(&[1, 1, 1, 2], vec![a, b]).unwrap();
        let (loss, g) = input_gradient(&m, &x, &[0]).unwrap();
        let s = (b - a).exp() / (1.0 + (b - a).exp());
        assert!((loss - (1.0 + (b - a).exp()).ln()).abs() < 1e-12);
        assert!((g.data()[0] - (-s)).abs() < 1e-12);
        assert!((g.data()[1] - s).abs() < 1e-12);
    }

    #[test]
    fn pool_ties_route_gradient_to_the_first_maximum() {
        let layers = vec![
            Layer::MaxPool { window: 2, stride: 2 },
            Layer::Dense {
                input: 1,
                output: 2,
                weight: Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap(),
                bias: Tensor::zeros(&[2]).unwrap(),
            },
        ];
        let m = Model::new(layers, [1, 2, 2], 2).unwrap();
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let (_, g) = input_gradient(&m, &x, &[0]).unwrap();
        assert_ne!(g.data()[0], 0.0);
        assert_eq!(&g.data()[1..], [0.0, 0.0, 0.0]);
    }

    /// Central-difference oracle over every parameter and input coordinate.
    fn assert_matches_fd(mut model: Model, batch: &Tensor, labels: &[usize]) {
        let (_, grads) = loss_and_grads(&model, batch, labels).unwrap();
        let (_, ginput) = input_gradient(&model, batch, labels).unwrap();
        let h = 1e-4;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-6,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };

        for li in 0..model.layers().len() {
            let Some((dw, db)) = &grads.layers[li] else { continue };
            let (dw, db) = (dw.clone(), db.clone());
            for (which, expected) in [(0, dw), (1, db)] {
                for j in 0..expected.len() {
                    let read = |m: &mut Model, delta: f64| -> f64 {
                        {
                            let layer = &mut m.layers_mut()[li];
                            let t = match (layer, which) {
                                (Layer::Conv2d { weight, .. }, 0) => weight,
                                (Layer::Conv2d { bias, .. }, 1) => bias,
                                (Layer::Dense { weight, .. }, 0) => weight,
                                (Layer::Dense { bias, .. }, 1) => bias,
                                _ => unreachable!(),
                            };
                            t.data_mut()[j] += delta;
                        }
                        batch_loss(m, batch, labels).unwrap()
                    };
                    let plus = read(&mut model, h);
                    let minus = read(&mut model, -2.0 * h);
                    read(&mut model, h); // restore
                    check(expected.data()[j], plus, minus, &format!("layer {li} t{which} [{j}]"));
                }
            }
        }

        let mut x = batch.clone();
        for j in 0..x.len() {
            x.data_mut()[j] += h;
            let plus = batch_loss(&model, &x, labels).unwrap();
            x.data_mut()[j] -= 2.0 * h;
            let minus = batch_loss(&model, &x, labels).unwrap();
            x.data_mut()[j] += h;
            check(ginput.data()[j], plus, minus, &format!("input [{j}]"));
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_a_mixed_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layers = vec![
            conv(3, 3, 2, 3, 1, 1, &mut rng),
            Layer::Relu,
            Layer::MaxPool { window: 2, stride: 2 },
            conv(2, 2, 3, 4, 1, 0, &mut rng),
            Layer::Relu,
            dense(16, 5, &mut rng),
            Layer::Relu,
            dense(5, 3, &mut rng),
        ];
        let m = Model::new(layers, [2, 6, 6], 3).unwrap();
        let batch = rand_tensor(&[2, 2, 6, 6], &mut rng);
        assert_matches_fd(m, &batch, &[0, 2]);
    }

    #[test]
    fn gradients_match_finite_differences_with_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layers = vec![
            conv(3, 3, 1, 2, 2, 1, &mut rng),
            Layer::Relu,
            dense(18, 2, &mut rng),
        ];
        let m = Model::new(layers, [1, 5, 5], 2).unwrap();
        let batch = rand_tensor(&[3, 1, 5, 5], &mut rng);
        assert_matches_fd(m, &batch, &[1, 0, 1]);
    }

    #[test]
    fn gradients_match_finite_differences_with_overlapping_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let layers = vec![
            Layer::MaxPool { window: 2, stride: 1 },
            dense(9, 2, &mut rng),
        ];
        let m = Model::new(layers, [1, 4, 4], 2).unwrap();
        let batch = rand_tensor(&[2, 1, 4, 4], &mut rng);
        assert_matches_fd(m, &batch, &[0, 1]);
    }

    #[test]
    fn batch_loss_is_the_mean_of_per_sample_losses() {
        let m = Model::small_vgg([3, 8, 8], 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = rand_tensor(&[2, 3, 8, 8], &mut rng);
        let labels = [0usize, 1];

        let both = batch_loss(&m, &batch, &labels).unwrap();
        let one = |s: usize| {
            let xs = Tensor::new(&[1, 3, 8, 8], batch.data()[s * 192..(s + 1) * 192].to_vec()).unwrap();
            batch_loss(&m, &xs, &labels[s..s + 1]).unwrap()
        };
        assert!((both - (one(0) + one(1)) / 2.0).abs() < 1e-12);

        // Parameter gradients likewise average over the batch.
        let (_, g2) = loss_and_grads(&m, &batch, &labels).unwrap();
        let x0 = Tensor::new(&[1, 3, 8, 8], batch.data()[..192].to_vec()).unwrap();
        let x1 = Tensor::new(&[1, 3, 8, 8], batch.data()[192..].to_vec()).unwrap();
        let (_, ga) = loss_and_grads(&m, &x0, &labels[..1]).unwrap();
        let (_, gb) = loss_and_grads(&m, &x1, &labels[1..]).unwrap();
        for i in 0..g2.layers.len() {
            let (Some((w2, _)), Some((wa, _)), Some((wb, _))) =
                (&g2.layers[i], &ga.layers[i], &gb.layers[i])
            else {
                continue;
            };
            for j in 0..w2.len() {
                let mean = (wa.data()[j] + wb.data()[j]) / 2.0;
                assert!((w2.data()[j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_validation() {
        let m = Model::small_vgg([3, 8, 8], 2, 0).unwrap();
        let x = Tensor::zeros(&[2, 3, 8, 8]).unwrap();
        assert!(matches!(
            batch_loss(&m, &x, &[0, 2]).unwrap_err(),
            Error::LabelOutOfRange { label: 2, classes: 2 }
        ));
        assert!(batch_loss(&m, &x, &[0]).is_err());
        let bad = Tensor::zeros(&[2, 3, 9, 8]).unwrap();
        assert!(batch_loss(&m, &bad, &[0, 1]).is_err());
    }
}
