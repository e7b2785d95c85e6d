//! Batched forward and backward passes. Activations are `[batch, c, h, w]`
//! row-major `f32` buffers; FC layers read each sample's `c*h*w` values.

use rand::Rng;

use super::spec::{LayerSpec, NetworkSpec, Shape};
use super::tensor::Tensor;
use super::weights::{LayerParams, WeightStore, BN_EPSILON};
use super::NnError;

const BN_MOMENTUM: f32 = 0.99;

/// `c = alpha * a * b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: usize, csa: usize, b: &[f32], rsb: usize, csb: usize, beta: f32, c: &mut [f32], rsc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn im2col(input: &[f32], shape: Shape, kernel: usize, cols: &mut [f32]) {
    let [c_in, h, w] = shape;
    let r = (kernel / 2) as isize;
    let hw = h * w;
    for u in 0..kernel {
        for v in 0..kernel {
            for c in 0..c_in {
                let row = &mut cols[((u * kernel + v) * c_in + c) * hw..][..hw];
                let plane = &input[c * hw..(c + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + u as isize - r;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + v as isize - r;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], shape: Shape, kernel: usize, out: &mut [f32]) {
    let [c_in, h, w] = shape;
    let r = (kernel / 2) as isize;
    let hw = h * w;
    for u in 0..kernel {
        for v in 0..kernel {
            for c in 0..c_in {
                let row = &cols[((u * kernel + v) * c_in + c) * hw..][..hw];
                let plane = &mut out[c * hw..(c + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + u as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + v as isize - r;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

enum Cache {
    None,
    Conv { cols: Vec<f32> },
    Fc { input: Vec<f32> },
    Relu { output: Vec<f32> },
    MaxPool { argmax: Vec<u32>, in_len: usize },
    BatchNorm { xhat: Vec<f32>, inv_std: Vec<f32> },
    Dropout { mask: Vec<f32> },
}

/// Per-layer parameter gradients, aligned with the weight store.
#[derive(Clone, Debug)]
pub enum ParamGrad {
    None,
    Linear { weight: Vec<f32>, bias: Vec<f32> },
    BatchNorm { gamma: Vec<f32>, beta: Vec<f32> },
}

pub(crate) struct Pass {
    caches: Vec<Cache>,
    shapes: Vec<Shape>,
    batch: usize,
}

/// Runs every layer except the final softmax. With `train` set, batch
/// statistics are used and cached for backpropagation, running statistics are
/// updated and dropout is active.
pub(crate) fn forward_layers<R: Rng>(
    spec: &NetworkSpec,
    weights: &mut WeightStore,
    input: &[f32],
    batch: usize,
    train: Option<&mut R>,
) -> Result<(Vec<f32>, Pass), NnError> {
    let shapes = spec.shapes()?;
    let mut rng = train;
    let training = rng.is_some();
    let mut x = input.to_vec();
    let mut shape = spec.input_shape;
    let mut caches = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        if matches!(layer, LayerSpec::Softmax) {
            caches.push(Cache::None);
            continue;
        }
        let out_shape = shapes[i];
        let in_len: usize = shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let (y, cache) = match (*layer, &mut weights.layers[i]) {
            (LayerSpec::Conv { kernel, out_channels, .. }, LayerParams::Linear { weight, bias }) => {
                let hw = shape[1] * shape[2];
                let kdim = kernel * kernel * shape[0];
                let mut cols = vec![0.0; if training { batch * kdim * hw } else { kdim * hw }];
                let mut y = vec![0.0; batch * out_len];
                for b in 0..batch {
                    let col = if training { &mut cols[b * kdim * hw..(b + 1) * kdim * hw] } else { &mut cols[..] };
                    im2col(&x[b * in_len..(b + 1) * in_len], shape, kernel, col);
                    let out = &mut y[b * out_len..(b + 1) * out_len];
                    for (o, chunk) in out.chunks_mut(hw).enumerate() {
                        chunk.fill(bias.data()[o]);
                    }
                    gemm(out_channels, kdim, hw, weight.data(), 1, out_channels, col, hw, 1, 1.0, out, hw);
                }
                (y, if training { Cache::Conv { cols } } else { Cache::None })
            }
            (LayerSpec::Fc { inputs, outputs }, LayerParams::Linear { weight, bias }) => {
                let mut y = vec![0.0; batch * outputs];
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(bias.data());
                }
                gemm(batch, inputs, outputs, &x, inputs, 1, weight.data(), outputs, 1, 1.0, &mut y, outputs);
                (y, if training { Cache::Fc { input: std::mem::take(&mut x) } } else { Cache::None })
            }
            (LayerSpec::Relu, _) => {
                let y: Vec<f32> = x.iter().map(|&v| v.max(0.0)).collect();
                let cache = if training { Cache::Relu { output: y.clone() } } else { Cache::None };
                (y, cache)
            }
            (LayerSpec::MaxPool, _) => {
                let [c, h, w] = shape;
                let [_, oh, ow] = out_shape;
                let mut y = vec![0.0; batch * out_len];
                let mut argmax = vec![0u32; if training { batch * out_len } else { 0 }];
                for b in 0..batch {
                    let src = &x[b * in_len..(b + 1) * in_len];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f32::NEG_INFINITY;
                                let mut at = 0usize;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                                    if src[idx] > best {
                                        best = src[idx];
                                        at = idx;
                                    }
                                }
                                let o = b * out_len + (ch * oh + oy) * ow + ox;
                                y[o] = best;
                                if training {
                                    argmax[o] = at as u32;
                                }
                            }
                        }
                    }
                }
                (y, if training { Cache::MaxPool { argmax, in_len } } else { Cache::None })
            }
            (LayerSpec::BatchNorm { channels }, LayerParams::BatchNorm(bn)) => {
                let hw = shape[1] * shape[2];
                let mut y = vec![0.0; x.len()];
                if training {
                    let m = (batch * hw) as f32;
                    let mut xhat = vec![0.0; x.len()];
                    let mut inv_std = vec![0.0; channels];
                    for c in 0..channels {
                        let samples = || (0..batch).flat_map(move |b| (b * in_len + c * hw)..(b * in_len + (c + 1) * hw));
                        let mean = samples().map(|i| x[i] as f64).sum::<f64>() / m as f64;
                        let var = samples().map(|i| (x[i] as f64 - mean).powi(2)).sum::<f64>() / m as f64;
                        let inv = 1.0 / (var as f32 + BN_EPSILON).sqrt();
                        inv_std[c] = inv;
                        let (g, beta) = (bn.gamma.data()[c], bn.beta.data()[c]);
                        for i in samples() {
                            let h = (x[i] - mean as f32) * inv;
                            xhat[i] = h;
                            y[i] = g * h + beta;
                        }
                        let rm = &mut bn.running_mean.data_mut()[c];
                        *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean as f32;
                        let rv = &mut bn.running_var.data_mut()[c];
                        *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var as f32;
                    }
                    (y, Cache::BatchNorm { xhat, inv_std })
                } else {
                    for c in 0..channels {
                        let inv = 1.0 / (bn.running_var.data()[c] + BN_EPSILON).sqrt();
                        let scale = bn.gamma.data()[c] * inv;
                        let shift = bn.beta.data()[c] - bn.running_mean.data()[c] * scale;
                        for b in 0..batch {
                            for i in (b * in_len + c * hw)..(b * in_len + (c + 1) * hw) {
                                y[i] = x[i] * scale + shift;
                            }
                        }
                    }
                    (y, Cache::None)
                }
            }
            (LayerSpec::Dropout { rate }, _) => match rng.as_deref_mut() {
                Some(r) => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f32> = (0..x.len()).map(|_| if r.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
                    let y = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
                    (y, Cache::Dropout { mask })
                }
                None => (std::mem::take(&mut x), Cache::None),
            },
            _ => {
                return Err(NnError::ShapeMismatch {
                    context: format!("layer {i}"),
                    expected: format!("{} parameters", layer.kind_name()),
                    found: "other parameters".into(),
                })
            }
        };
        debug_assert_eq!(y.len(), batch * out_len);
        x = y;
        shape = out_shape;
        caches.push(cache);
    }
    Ok((x, Pass { caches, shapes, batch }))
}

/// Backpropagates `dlogits` (gradient w.r.t. the pre-softmax output).
pub(crate) fn backward(spec: &NetworkSpec, weights: &WeightStore, pass: Pass, dlogits: Vec<f32>) -> Vec<ParamGrad> {
    let batch = pass.batch;
    let mut grads: Vec<ParamGrad> = weights.layers.iter().map(|_| ParamGrad::None).collect();
    let mut dy = dlogits;
    let first_param = spec.layers.iter().position(|l| l.is_linear()).unwrap_or(0);
    for (i, (layer, cache)) in spec.layers.iter().zip(pass.caches).enumerate().rev() {
        let in_shape = if i == 0 { spec.input_shape } else { pass.shapes[i - 1] };
        let in_len: usize = in_shape.iter().product();
        let need_input_grad = i > first_param;
        dy = match (*layer, cache, &weights.layers[i]) {
            (LayerSpec::Softmax, _, _) => dy,
            (LayerSpec::Conv { kernel, out_channels, .. }, Cache::Conv { cols }, LayerParams::Linear { weight, .. }) => {
                let hw = in_shape[1] * in_shape[2];
                let kdim = kernel * kernel * in_shape[0];
                let out_len = out_channels * hw;
                let mut dw = vec![0.0; kdim * out_channels];
                let mut db = vec![0.0; out_channels];
                let mut dx = vec![0.0; if need_input_grad { batch * in_len } else { 0 }];
                let mut dcol = vec![0.0; kdim * hw];
                for b in 0..batch {
                    let g = &dy[b * out_len..(b + 1) * out_len];
                    let col = &cols[b * kdim * hw..(b + 1) * kdim * hw];
                    gemm(kdim, hw, out_channels, col, hw, 1, g, 1, hw, 1.0, &mut dw, out_channels);
                    for (o, chunk) in g.chunks(hw).enumerate() {
                        db[o] += chunk.iter().sum::<f32>();
                    }
                    if need_input_grad {
                        gemm(kdim, out_channels, hw, weight.data(), out_channels, 1, g, hw, 1, 0.0, &mut dcol, hw);
                        col2im(&dcol, in_shape, kernel, &mut dx[b * in_len..(b + 1) * in_len]);
                    }
                }
                grads[i] = ParamGrad::Linear { weight: dw, bias: db };
                dx
            }
            (LayerSpec::Fc { inputs, outputs }, Cache::Fc { input }, LayerParams::Linear { weight, .. }) => {
                let mut dw = vec![0.0; inputs * outputs];
                gemm(inputs, batch, outputs, &input, 1, inputs, &dy, outputs, 1, 0.0, &mut dw, outputs);
                let mut db = vec![0.0; outputs];
                for row in dy.chunks(outputs) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                let mut dx = vec![0.0; if need_input_grad { batch * inputs } else { 0 }];
                if need_input_grad {
                    gemm(batch, outputs, inputs, &dy, outputs, 1, weight.data(), 1, outputs, 0.0, &mut dx, inputs);
                }
                grads[i] = ParamGrad::Linear { weight: dw, bias: db };
                dx
            }
            (LayerSpec::Relu, Cache::Relu { output }, _) => dy.iter().zip(&output).map(|(g, &o)| if o > 0.0 { *g } else { 0.0 }).collect(),
            (LayerSpec::MaxPool, Cache::MaxPool { argmax, in_len }, _) => {
                let out_len = dy.len() / batch;
                let mut dx = vec![0.0; batch * in_len];
                for b in 0..batch {
                    for j in 0..out_len {
                        dx[b * in_len + argmax[b * out_len + j] as usize] += dy[b * out_len + j];
                    }
                }
                dx
            }
            (LayerSpec::BatchNorm { channels }, Cache::BatchNorm { xhat, inv_std }, LayerParams::BatchNorm(bn)) => {
                let hw = in_shape[1] * in_shape[2];
                let m = (batch * hw) as f32;
                let mut dx = vec![0.0; dy.len()];
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for c in 0..channels {
                    let idx = || (0..batch).flat_map(move |b| (b * in_len + c * hw)..(b * in_len + (c + 1) * hw));
                    let g = bn.gamma.data()[c];
                    let (mut sum_d, mut sum_dx) = (0.0f32, 0.0f32);
                    for i in idx() {
                        dgamma[c] += dy[i] * xhat[i];
                        dbeta[c] += dy[i];
                        sum_d += dy[i] * g;
                        sum_dx += dy[i] * g * xhat[i];
                    }
                    for i in idx() {
                        dx[i] = inv_std[c] / m * (m * dy[i] * g - sum_d - xhat[i] * sum_dx);
                    }
                }
                grads[i] = ParamGrad::BatchNorm { gamma: dgamma, beta: dbeta };
                dx
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }, _) => dy.iter().zip(&mask).map(|(g, m)| g * m).collect(),
            _ => unreachable!("backward requires a training pass"),
        };
    }
    grads
}

/// Row-wise softmax, in place.
pub(crate) fn softmax_rows(x: &mut [f32], classes: usize) {
    for row in x.chunks_mut(classes) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn check_input(spec: &NetworkSpec, input: &Tensor) -> Result<usize, NnError> {
    let s = input.shape();
    let ishape = spec.input_shape;
    let batch = match s.len() {
        3 if s == ishape => 1,
        4 if s[1..] == ishape => s[0],
        _ => {
            return Err(NnError::ShapeMismatch {
                context: "layer 0".into(),
                expected: format!("input {ishape:?}"),
                found: format!("{s:?}"),
            })
        }
    };
    Ok(batch)
}

/// Pre-softmax outputs `[batch, classes]` in inference mode.
pub fn logits(spec: &NetworkSpec, weights: &WeightStore, input: &Tensor) -> Result<Tensor, NnError> {
    spec.validate()?;
    weights.validate(spec)?;
    let batch = check_input(spec, input)?;
    // inference never writes to the parameters; the clone keeps the signature immutable
    let mut w = weights.clone();
    let (out, _) = forward_layers::<rand_chacha::ChaCha8Rng>(spec, &mut w, input.data(), batch, None)?;
    let classes = out.len() / batch;
    Tensor::new(vec![batch, classes], out)
}

/// Class probabilities `[batch, classes]` (a single `[c, h, w]` input gives batch 1).
pub fn forward(spec: &NetworkSpec, weights: &WeightStore, input: &Tensor) -> Result<Tensor, NnError> {
    let l = logits(spec, weights, input)?;
    let classes = l.shape()[1];
    let mut data = l.into_data();
    softmax_rows(&mut data, classes);
    let batch = data.len() / classes;
    Tensor::new(vec![batch, classes], data)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
