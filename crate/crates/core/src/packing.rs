//! Slot layouts for fully connected and convolutional layers, packing of
//! weight groups as plaintexts (revealed) or ciphertexts (hidden), homomorphic
//! evaluation, and closed-form operation counts.
//!
//! Weight conventions: FC weights are `M x N` row-major with `z = W^T v + b`;
//! conv weights are `[k, k, M, N]` (HWIO), stride 1, same padding.

use serde::{Deserialize, Serialize};

use crate::he::{HeBackend, HeError, OpLedger};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PackingError {
    #[error("layout needs {needed} slots but only {slots} are available")]
    SlotOverflow { needed: usize, slots: usize },
    #[error("{what}: expected {expected} values, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("group {index} does not exist (layer has {groups} groups)")]
    GroupOutOfRange { index: usize, groups: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    He(#[from] HeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FcPackingKind {
    Naive,
    Diagonal,
    Hybrid,
}

/// Leakage granularity for convolutions: whole filters or single `k x k` kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvGrouping {
    PerFilter,
    PerKernel,
}

/// Whether multiplications are followed by a rescale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Relinearize after each ciphertext product, never rescale.
    RelinOnly,
    /// Rescale after every product (and relinearize after ciphertext products).
    RescaleAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Fc {
        kind: FcPackingKind,
        inputs: usize,
        outputs: usize,
    },
    Conv {
        grouping: ConvGrouping,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        width: usize,
        height: usize,
    },
}

/// Number of hidden groups for a hidden fraction `p`: `floor(p * G)`.
///
/// The epsilon absorbs representation error of grid values such as `0.3`.
pub fn hidden_quota(p: f64, groups: usize) -> usize {
    ((p * groups as f64 + 1e-9).floor() as usize).min(groups)
}

fn log2_exact(x: usize) -> usize {
    debug_assert!(x.is_power_of_two());
    x.trailing_zeros() as usize
}

impl Layout {
    pub fn fc(kind: FcPackingKind, inputs: usize, outputs: usize) -> Self {
        Layout::Fc { kind, inputs, outputs }
    }

    /// Square-kernel convolution over a `width x height x in_channels` input.
    pub fn conv(grouping: ConvGrouping, kernel: usize, in_channels: usize, out_channels: usize, width: usize, height: usize) -> Self {
        Layout::Conv {
            grouping,
            kernel,
            in_channels,
            out_channels,
            width,
            height,
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            Layout::Fc { inputs, outputs, .. } => inputs * outputs,
            Layout::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => kernel * kernel * in_channels * out_channels,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            Layout::Fc { outputs, .. } => outputs,
            Layout::Conv { out_channels, .. } => out_channels,
        }
    }

    pub fn input_len(&self) -> usize {
        match *self {
            Layout::Fc { inputs, .. } => inputs,
            Layout::Conv {
                in_channels, width, height, ..
            } => in_channels * width * height,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            Layout::Fc { outputs, .. } => outputs,
            Layout::Conv {
                out_channels, width, height, ..
            } => out_channels * width * height,
        }
    }

    pub fn group_count(&self) -> usize {
        match *self {
            Layout::Fc {
                kind: FcPackingKind::Diagonal,
                inputs,
                ..
            } => inputs,
            Layout::Fc { outputs, .. } => outputs,
            Layout::Conv {
                grouping: ConvGrouping::PerFilter,
                out_channels,
                ..
            } => out_channels,
            Layout::Conv {
                grouping: ConvGrouping::PerKernel,
                in_channels,
                out_channels,
                ..
            } => in_channels * out_channels,
        }
    }

    /// Multiplications contributed by each group.
    pub fn mults_per_group(&self) -> usize {
        match *self {
            Layout::Fc { .. } => 1,
            Layout::Conv { kernel, .. } => kernel * kernel,
        }
    }

    /// Padded width of the hybrid layout.
    fn hybrid_width(inputs: usize, outputs: usize) -> usize {
        outputs * inputs.div_ceil(outputs).next_power_of_two()
    }

    /// Baby-step count of the diagonal layout.
    fn baby_steps(inputs: usize) -> usize {
        ((inputs as f64).sqrt().ceil() as usize).max(1)
    }

    fn conv_shifts(&self) -> Vec<i64> {
        match *self {
            Layout::Conv { kernel, width, .. } => {
                let r = (kernel / 2) as i64;
                let mut out = Vec::with_capacity(kernel * kernel);
                for u in 0..kernel as i64 {
                    for v in 0..kernel as i64 {
                        out.push((u - r) * width as i64 + (v - r));
                    }
                }
                out
            }
            Layout::Fc { .. } => Vec::new(),
        }
    }

    /// Slots occupied by the packed input.
    pub fn slots_needed(&self) -> usize {
        match *self {
            Layout::Fc {
                kind: FcPackingKind::Naive,
                inputs,
                ..
            } => inputs.next_power_of_two(),
            Layout::Fc {
                kind: FcPackingKind::Diagonal,
                inputs,
                outputs,
            } => inputs + outputs,
            Layout::Fc {
                kind: FcPackingKind::Hybrid,
                inputs,
                outputs,
            } => Self::hybrid_width(inputs, outputs) + outputs,
            Layout::Conv {
                in_channels, width, height, ..
            } => in_channels.next_power_of_two() * width * height,
        }
    }

    pub fn validate(&self, slots: usize) -> Result<(), PackingError> {
        match *self {
            Layout::Fc { inputs, outputs, .. } if inputs == 0 || outputs == 0 => {
                return Err(PackingError::InvalidLayout("empty FC layer".into()));
            }
            Layout::Conv {
                kernel,
                in_channels,
                out_channels,
                width,
                height,
                ..
            } => {
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(PackingError::InvalidLayout(format!("kernel size {kernel} must be odd")));
                }
                if in_channels == 0 || out_channels == 0 || width == 0 || height == 0 {
                    return Err(PackingError::InvalidLayout("empty conv layer".into()));
                }
                if kernel / 2 >= width {
                    return Err(PackingError::InvalidLayout("kernel wider than the image".into()));
                }
            }
            _ => {}
        }
        let needed = self.slots_needed();
        if needed > slots {
            return Err(PackingError::SlotOverflow { needed, slots });
        }
        Ok(())
    }

    /// Rotation amounts the evaluation uses; rotation keys must cover them.
    pub fn rotation_steps(&self) -> Vec<i64> {
        let mut steps: Vec<i64> = match *self {
            Layout::Fc {
                kind: FcPackingKind::Naive,
                inputs,
                ..
            } => (0..log2_exact(inputs.next_power_of_two())).map(|k| 1i64 << k).collect(),
            Layout::Fc {
                kind: FcPackingKind::Diagonal,
                inputs,
                ..
            } => {
                let b = Self::baby_steps(inputs);
                let g = inputs.div_ceil(b);
                (1..b.min(inputs)).chain((1..g).map(|g| g * b)).map(|s| s as i64).collect()
            }
            Layout::Fc {
                kind: FcPackingKind::Hybrid,
                inputs,
                outputs,
            } => {
                let width = Self::hybrid_width(inputs, outputs);
                (1..outputs)
                    .chain((0..log2_exact(width / outputs)).map(|k| outputs << k))
                    .map(|s| s as i64)
                    .collect()
            }
            Layout::Conv {
                in_channels, width, height, ..
            } => {
                let p = width * height;
                let mut s: Vec<i64> = self.conv_shifts().into_iter().filter(|&s| s != 0).collect();
                s.extend((0..log2_exact(in_channels.next_power_of_two())).map(|k| (p << k) as i64));
                s
            }
        };
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    /// Flat weight indices belonging to each group, in group order.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        match *self {
            Layout::Fc {
                kind: FcPackingKind::Naive,
                inputs,
                outputs,
            } => (0..outputs).map(|j| (0..inputs).map(|i| i * outputs + j).collect()).collect(),
            Layout::Fc {
                kind: FcPackingKind::Diagonal,
                inputs,
                outputs,
            } => (0..inputs)
                .map(|d| (0..outputs).map(|j| ((j + d) % inputs) * outputs + j).collect())
                .collect(),
            Layout::Fc {
                kind: FcPackingKind::Hybrid,
                inputs,
                outputs,
            } => {
                let width = Self::hybrid_width(inputs, outputs);
                (0..outputs)
                    .map(|d| {
                        (0..width)
                            .filter_map(|t| {
                                let c = (t + d) % width;
                                (c < inputs).then_some(c * outputs + t % outputs)
                            })
                            .collect()
                    })
                    .collect()
            }
            Layout::Conv {
                grouping,
                kernel,
                in_channels,
                out_channels,
                ..
            } => {
                let idx = |u: usize, v: usize, c: usize, o: usize| ((u * kernel + v) * in_channels + c) * out_channels + o;
                let mut groups = Vec::with_capacity(self.group_count());
                for o in 0..out_channels {
                    match grouping {
                        ConvGrouping::PerFilter => {
                            let mut g = Vec::with_capacity(kernel * kernel * in_channels);
                            for u in 0..kernel {
                                for v in 0..kernel {
                                    for c in 0..in_channels {
                                        g.push(idx(u, v, c, o));
                                    }
                                }
                            }
                            groups.push(g);
                        }
                        ConvGrouping::PerKernel => {
                            for c in 0..in_channels {
                                let mut g = Vec::with_capacity(kernel * kernel);
                                for u in 0..kernel {
                                    for v in 0..kernel {
                                        g.push(idx(u, v, c, o));
                                    }
                                }
                                groups.push(g);
                            }
                        }
                    }
                }
                groups
            }
        }
    }

    /// Slot vector carrying `input` in this layout.
    pub fn pack_input(&self, input: &[f64]) -> Result<Vec<f64>, PackingError> {
        check_len("input", self.input_len(), input.len())?;
        Ok(match *self {
            Layout::Fc {
                kind: FcPackingKind::Naive,
                ..
            } => input.to_vec(),
            Layout::Fc {
                kind: FcPackingKind::Diagonal,
                inputs,
                outputs,
            } => (0..inputs + outputs).map(|t| input[t % inputs]).collect(),
            Layout::Fc {
                kind: FcPackingKind::Hybrid,
                inputs,
                outputs,
            } => {
                let width = Self::hybrid_width(inputs, outputs);
                (0..width + outputs)
                    .map(|t| {
                        let c = t % width;
                        if c < inputs {
                            input[c]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            // channel-major input already matches the segment layout
            Layout::Conv { .. } => input.to_vec(),
        })
    }

    /// Reassembles the layer output from the decrypted output slot vectors.
    pub fn unpack_output(&self, decrypted: &[Vec<f64>]) -> Vec<f64> {
        match *self {
            Layout::Fc {
                kind: FcPackingKind::Naive,
                ..
            } => decrypted.iter().map(|d| d[0]).collect(),
            Layout::Fc { outputs, .. } => decrypted[0][..outputs].to_vec(),
            Layout::Conv { width, height, .. } => decrypted.iter().flat_map(|d| d[..width * height].iter().copied()).collect(),
        }
    }

    /// Closed-form operation counts for `hidden` hidden groups.
    pub fn predicted_ops_for(&self, hidden: usize, bias_hidden: bool, mode: Mode) -> OpLedger {
        let g = self.group_count() as u64;
        let h = (hidden as u64).min(g);
        let m = self.mults_per_group() as u64;
        let mut l = OpLedger {
            plain_mults: m * (g - h),
            ciph_mults: m * h,
            relins: m * h,
            ..OpLedger::default()
        };
        if mode == Mode::RescaleAll {
            l.rescales = m * g;
        }
        let (rotations, adds, biases) = match *self {
            Layout::Fc {
                kind: FcPackingKind::Naive,
                inputs,
                outputs,
            } => {
                let steps = log2_exact(inputs.next_power_of_two()) as u64;
                (outputs as u64 * steps, outputs as u64 * steps, outputs as u64)
            }
            Layout::Fc {
                kind: FcPackingKind::Diagonal,
                inputs,
                ..
            } => {
                let b = Self::baby_steps(inputs);
                let giant = inputs.div_ceil(b);
                ((b.min(inputs) - 1 + giant - 1) as u64, inputs as u64 - 1, 1)
            }
            Layout::Fc {
                kind: FcPackingKind::Hybrid,
                inputs,
                outputs,
            } => {
                let sum_steps = log2_exact(Self::hybrid_width(inputs, outputs) / outputs) as u64;
                (outputs as u64 - 1 + sum_steps, outputs as u64 - 1 + sum_steps, 1)
            }
            Layout::Conv {
                grouping,
                kernel,
                in_channels,
                out_channels,
                ..
            } => {
                let shifts = self.conv_shifts().into_iter().filter(|&s| s != 0).count() as u64;
                let sum_steps = log2_exact(in_channels.next_power_of_two()) as u64;
                let per_filter = match grouping {
                    ConvGrouping::PerFilter => kernel * kernel,
                    ConvGrouping::PerKernel => kernel * kernel * in_channels,
                } as u64;
                let n = out_channels as u64;
                (shifts + n * sum_steps, n * (per_filter - 1) + n * sum_steps, n)
            }
        };
        l.rotations = rotations;
        l.ct_adds = adds;
        if bias_hidden {
            l.ct_adds += biases;
        } else {
            l.pt_adds = biases;
        }
        l
    }
}

/// Predicted ledger at hidden fraction `p` (quota `floor(p * G)`).
pub fn predicted_ops(layout: &Layout, p: f64, bias_hidden: bool, mode: Mode) -> OpLedger {
    layout.predicted_ops_for(hidden_quota(p, layout.group_count()), bias_hidden, mode)
}

/// Multiplication-class cost of a ledger under a cost table.
pub fn ledger_cost(ledger: &OpLedger, table: &crate::costbench::CostTable) -> f64 {
    ledger.plain_mults as f64 * table.plain_mult
        + ledger.ciph_mults as f64 * table.ciph_mult
        + ledger.relins as f64 * table.relinearization
        + ledger.rescales as f64 * table.rescale
}

/// Weight partition per layout; `weights` is the flat layer tensor.
pub fn group_weights(layout: &Layout, weights: &[f64]) -> Result<Vec<Vec<f64>>, PackingError> {
    check_len("weights", layout.weight_len(), weights.len())?;
    Ok(layout
        .group_indices()
        .into_iter()
        .map(|g| g.into_iter().map(|i| weights[i]).collect())
        .collect())
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), PackingError> {
    if expected != found {
        return Err(PackingError::DimensionMismatch { what, expected, found });
    }
    Ok(())
}

pub enum Payload<B: HeBackend> {
    Revealed(B::Plaintext),
    Hidden(B::Ciphertext),
}

impl<B: HeBackend> Clone for Payload<B> {
    fn clone(&self) -> Self {
        match self {
            Payload::Revealed(p) => Payload::Revealed(p.clone()),
            Payload::Hidden(c) => Payload::Hidden(c.clone()),
        }
    }
}

impl<B: HeBackend> Payload<B> {
    pub fn is_hidden(&self) -> bool {
        matches!(self, Payload::Hidden(_))
    }
}

/// A linear layer whose weight groups are encoded (revealed) or encrypted (hidden).
pub struct PackedLayer<B: HeBackend> {
    pub layout: Layout,
    pub mode: Mode,
    /// Multiplication operands of each group, in evaluation order.
    pub groups: Vec<Vec<Payload<B>>>,
    pub hidden: Vec<bool>,
    pub bias: Vec<Payload<B>>,
    pub bias_hidden: bool,
}

impl<B: HeBackend> PackedLayer<B> {
    pub fn hidden_count(&self) -> usize {
        self.hidden.iter().filter(|&&h| h).count()
    }
}

fn make_payload<B: HeBackend>(backend: &B, values: &[f64], level: usize, scale: f64, hidden: bool) -> Result<Payload<B>, HeError> {
    let pt = backend.encode(values, level, scale)?;
    Ok(if hidden {
        Payload::Hidden(backend.encrypt(&pt)?)
    } else {
        Payload::Revealed(pt)
    })
}

/// Encodes revealed groups and encrypts hidden ones. Operands are placed at
/// the top level with the default scale, matching a freshly encrypted input.
pub fn pack_layer<B: HeBackend>(
    backend: &B,
    layout: &Layout,
    weights: &[f64],
    bias: &[f64],
    hidden_groups: &[usize],
    bias_hidden: bool,
    mode: Mode,
) -> Result<PackedLayer<B>, PackingError> {
    let slots = backend.slot_count();
    layout.validate(slots)?;
    check_len("weights", layout.weight_len(), weights.len())?;
    check_len("bias", layout.bias_len(), bias.len())?;
    let group_count = layout.group_count();
    let mut hidden = vec![false; group_count];
    for &g in hidden_groups {
        if g >= group_count {
            return Err(PackingError::GroupOutOfRange { index: g, groups: group_count });
        }
        hidden[g] = true;
    }

    let level = backend.max_level();
    let scale = backend.scale();
    let (bias_level, bias_scale) = match mode {
        Mode::RelinOnly => (level, scale * scale),
        Mode::RescaleAll => {
            if level == 0 {
                return Err(HeError::DepthExhausted.into());
            }
            (level - 1, backend.rescaled_scale(scale * scale, level))
        }
    };

    let operands = group_operands(layout, weights);
    let groups = operands
        .into_iter()
        .zip(&hidden)
        .map(|(vectors, &h)| {
            vectors
                .iter()
                .map(|v| make_payload(backend, v, level, scale, h))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let bias = bias_vectors(layout, bias)
        .iter()
        .map(|v| make_payload(backend, v, bias_level, bias_scale, bias_hidden))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(PackedLayer {
        layout: *layout,
        mode,
        groups,
        hidden,
        bias,
        bias_hidden,
    })
}

/// Slot vectors multiplied into the (rotated) input, per group.
fn group_operands(layout: &Layout, w: &[f64]) -> Vec<Vec<Vec<f64>>> {
    match *layout {
        Layout::Fc {
            kind: FcPackingKind::Naive,
            inputs,
            outputs,
        } => (0..outputs)
            .map(|j| vec![(0..inputs).map(|i| w[i * outputs + j]).collect()])
            .collect(),
        Layout::Fc {
            kind: FcPackingKind::Diagonal,
            inputs,
            outputs,
        } => {
            let b = Layout::baby_steps(inputs);
            (0..inputs)
                .map(|d| {
                    // pre-rotated by the giant step so it lines up with rot_b(v)
                    let offset = (d / b) * b;
                    let mut v = vec![0.0; offset + outputs];
                    for j in 0..outputs {
                        v[offset + j] = w[((j + d) % inputs) * outputs + j];
                    }
                    vec![v]
                })
                .collect()
        }
        Layout::Fc {
            kind: FcPackingKind::Hybrid,
            inputs,
            outputs,
        } => {
            let width = Layout::hybrid_width(inputs, outputs);
            (0..outputs)
                .map(|d| {
                    vec![(0..width)
                        .map(|t| {
                            let c = (t + d) % width;
                            if c < inputs {
                                w[c * outputs + t % outputs]
                            } else {
                                0.0
                            }
                        })
                        .collect()]
                })
                .collect()
        }
        Layout::Conv {
            grouping,
            kernel,
            in_channels,
            out_channels,
            width,
            height,
        } => {
            let r = (kernel / 2) as i64;
            let plane = width * height;
            let idx = |u: usize, v: usize, c: usize, o: usize| ((u * kernel + v) * in_channels + c) * out_channels + o;
            let fill = |dst: &mut [f64], u: usize, v: usize, value: f64| {
                for y in 0..height {
                    let sy = y as i64 + u as i64 - r;
                    if sy < 0 || sy >= height as i64 {
                        continue;
                    }
                    for x in 0..width {
                        let sx = x as i64 + v as i64 - r;
                        if sx >= 0 && sx < width as i64 {
                            dst[y * width + x] = value;
                        }
                    }
                }
            };
            let mut groups = Vec::with_capacity(layout.group_count());
            for o in 0..out_channels {
                match grouping {
                    ConvGrouping::PerFilter => {
                        let mut vectors = Vec::with_capacity(kernel * kernel);
                        for u in 0..kernel {
                            for v in 0..kernel {
                                let mut vec = vec![0.0; in_channels * plane];
                                for c in 0..in_channels {
                                    fill(&mut vec[c * plane..(c + 1) * plane], u, v, w[idx(u, v, c, o)]);
                                }
                                vectors.push(vec);
                            }
                        }
                        groups.push(vectors);
                    }
                    ConvGrouping::PerKernel => {
                        for c in 0..in_channels {
                            let mut vectors = Vec::with_capacity(kernel * kernel);
                            for u in 0..kernel {
                                for v in 0..kernel {
                                    let mut vec = vec![0.0; (c + 1) * plane];
                                    fill(&mut vec[c * plane..], u, v, w[idx(u, v, c, o)]);
                                    vectors.push(vec);
                                }
                            }
                            groups.push(vectors);
                        }
                    }
                }
            }
            groups
        }
    }
}

fn bias_vectors(layout: &Layout, b: &[f64]) -> Vec<Vec<f64>> {
    match *layout {
        Layout::Fc {
            kind: FcPackingKind::Naive,
            ..
        } => b.iter().map(|&x| vec![x]).collect(),
        Layout::Fc { .. } => vec![b.to_vec()],
        Layout::Conv { width, height, .. } => b.iter().map(|&x| vec![x; width * height]).collect(),
    }
}

fn multiply<B: HeBackend>(backend: &B, x: &B::Ciphertext, payload: &Payload<B>, mode: Mode, ledger: &mut OpLedger) -> Result<B::Ciphertext, HeError> {
    let prod = match payload {
        Payload::Revealed(pt) => backend.mul_pt(x, pt, ledger)?,
        Payload::Hidden(ct) => {
            let wide = backend.mul_ct(x, ct, ledger)?;
            backend.relinearize(&wide, ledger)?
        }
    };
    match mode {
        Mode::RelinOnly => Ok(prod),
        Mode::RescaleAll => backend.rescale(&prod, ledger),
    }
}

fn add_bias<B: HeBackend>(backend: &B, acc: &B::Ciphertext, bias: &Payload<B>, ledger: &mut OpLedger) -> Result<B::Ciphertext, HeError> {
    match bias {
        Payload::Revealed(pt) => backend.add_pt(acc, pt, ledger),
        Payload::Hidden(ct) => backend.add_ct(acc, ct, ledger),
    }
}

/// `x + rot(x, s) + ...` over the given steps, summing `2^len` shifted copies.
fn rotate_and_sum<B: HeBackend>(backend: &B, mut x: B::Ciphertext, steps: impl Iterator<Item = i64>, ledger: &mut OpLedger) -> Result<B::Ciphertext, HeError> {
    for s in steps {
        let r = backend.rotate(&x, s, ledger)?;
        x = backend.add_ct(&x, &r, ledger)?;
    }
    Ok(x)
}

fn sum_all<B: HeBackend>(backend: &B, items: Vec<B::Ciphertext>, ledger: &mut OpLedger) -> Result<B::Ciphertext, HeError> {
    let mut iter = items.into_iter();
    let mut acc = iter.next().expect("at least one term");
    for t in iter {
        acc = backend.add_ct(&acc, &t, ledger)?;
    }
    Ok(acc)
}

/// Evaluates a packed FC layer on an input encrypted in the layout's
/// [`Layout::pack_input`] format. Naive packing yields one ciphertext per
/// output (value in slot 0); the other layouts yield one ciphertext with the
/// outputs in slots `0..N`.
pub fn eval_fc_he<B: HeBackend>(backend: &B, packed: &PackedLayer<B>, input: &B::Ciphertext) -> Result<(Vec<B::Ciphertext>, OpLedger), PackingError> {
    let mut ledger = OpLedger::new();
    let mode = packed.mode;
    let out = match packed.layout {
        Layout::Fc {
            kind: FcPackingKind::Naive,
            inputs,
            ..
        } => {
            let steps = log2_exact(inputs.next_power_of_two());
            let mut outs = Vec::with_capacity(packed.groups.len());
            for (group, bias) in packed.groups.iter().zip(&packed.bias) {
                let prod = multiply(backend, input, &group[0], mode, &mut ledger)?;
                let sum = rotate_and_sum(backend, prod, (0..steps).rev().map(|k| 1i64 << k), &mut ledger)?;
                outs.push(add_bias(backend, &sum, bias, &mut ledger)?);
            }
            outs
        }
        Layout::Fc {
            kind: FcPackingKind::Diagonal,
            inputs,
            ..
        } => {
            let b = Layout::baby_steps(inputs);
            let mut baby = vec![input.clone()];
            for s in 1..b.min(inputs) {
                baby.push(backend.rotate(input, s as i64, &mut ledger)?);
            }
            let mut giants = Vec::new();
            for (g, chunk) in packed.groups.chunks(b).enumerate() {
                let terms = chunk
                    .iter()
                    .enumerate()
                    .map(|(bi, group)| multiply(backend, &baby[bi], &group[0], mode, &mut ledger))
                    .collect::<Result<Vec<_>, _>>()?;
                let inner = sum_all(backend, terms, &mut ledger)?;
                giants.push(backend.rotate(&inner, (g * b) as i64, &mut ledger)?);
            }
            let total = sum_all(backend, giants, &mut ledger)?;
            vec![add_bias(backend, &total, &packed.bias[0], &mut ledger)?]
        }
        Layout::Fc {
            kind: FcPackingKind::Hybrid,
            inputs,
            outputs,
        } => {
            let width = Layout::hybrid_width(inputs, outputs);
            let mut terms = Vec::with_capacity(outputs);
            for (d, group) in packed.groups.iter().enumerate() {
                let rotated = if d == 0 {
                    input.clone()
                } else {
                    backend.rotate(input, d as i64, &mut ledger)?
                };
                terms.push(multiply(backend, &rotated, &group[0], mode, &mut ledger)?);
            }
            let y = sum_all(backend, terms, &mut ledger)?;
            let steps = log2_exact(width / outputs);
            let z = rotate_and_sum(backend, y, (0..steps).rev().map(|k| (outputs << k) as i64), &mut ledger)?;
            vec![add_bias(backend, &z, &packed.bias[0], &mut ledger)?]
        }
        Layout::Conv { .. } => return Err(PackingError::InvalidLayout("conv layout passed to the FC evaluator".into())),
    };
    Ok((out, ledger))
}

/// Evaluates a packed convolution on a channel-major encrypted input
/// (channel `c` in slots `c*w*h..(c+1)*w*h`); returns one ciphertext per
/// filter with its feature map in the first `w*h` slots.
pub fn eval_conv_he<B: HeBackend>(backend: &B, packed: &PackedLayer<B>, input: &B::Ciphertext) -> Result<(Vec<B::Ciphertext>, OpLedger), PackingError> {
    let Layout::Conv {
        grouping,
        kernel,
        in_channels,
        width,
        height,
        ..
    } = packed.layout
    else {
        return Err(PackingError::InvalidLayout("FC layout passed to the conv evaluator".into()));
    };
    let mut ledger = OpLedger::new();
    let mode = packed.mode;
    let plane = width * height;
    let shifted = packed
        .layout
        .conv_shifts()
        .into_iter()
        .map(|s| backend.rotate(input, s, &mut ledger))
        .collect::<Result<Vec<_>, _>>()?;
    let sum_steps = log2_exact(in_channels.next_power_of_two());
    let per_filter_groups = match grouping {
        ConvGrouping::PerFilter => 1,
        ConvGrouping::PerKernel => in_channels,
    };
    let mut outs = Vec::with_capacity(packed.bias.len());
    for (filter, bias) in packed.groups.chunks(per_filter_groups).zip(&packed.bias) {
        let mut terms = Vec::with_capacity(kernel * kernel * per_filter_groups);
        for group in filter {
            for (operand, x) in group.iter().zip(&shifted) {
                terms.push(multiply(backend, x, operand, mode, &mut ledger)?);
            }
        }
        let acc = sum_all(backend, terms, &mut ledger)?;
        let acc = rotate_and_sum(backend, acc, (0..sum_steps).rev().map(|k| (plane << k) as i64), &mut ledger)?;
        outs.push(add_bias(backend, &acc, bias, &mut ledger)?);
    }
    Ok((outs, ledger))
}

/// Dispatches on the layout kind.
pub fn eval_layer_he<B: HeBackend>(backend: &B, packed: &PackedLayer<B>, input: &B::Ciphertext) -> Result<(Vec<B::Ciphertext>, OpLedger), PackingError> {
    match packed.layout {
        Layout::Fc { .. } => eval_fc_he(backend, packed, input),
        Layout::Conv { .. } => eval_conv_he(backend, packed, input),
    }
}

/// Plaintext reference: `W^T v + b` or the same-padded convolution.
pub fn plain_linear(layout: &Layout, weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    match *layout {
        Layout::Fc { inputs, outputs, .. } => (0..outputs)
            .map(|j| bias[j] + (0..inputs).map(|i| weights[i * outputs + j] * input[i]).sum::<f64>())
            .collect(),
        Layout::Conv {
            kernel,
            in_channels,
            out_channels,
            width,
            height,
            ..
        } => {
            let r = (kernel / 2) as i64;
            let mut out = vec![0.0; out_channels * width * height];
            for o in 0..out_channels {
                for y in 0..height {
                    for x in 0..width {
                        let mut acc = bias[o];
                        for u in 0..kernel {
                            for v in 0..kernel {
                                let sy = y as i64 + u as i64 - r;
                                let sx = x as i64 + v as i64 - r;
                                if sy < 0 || sx < 0 || sy >= height as i64 || sx >= width as i64 {
                                    continue;
                                }
                                for c in 0..in_channels {
                                    acc += weights[((u * kernel + v) * in_channels + c) * out_channels + o]
                                        * input[(c * height + sy as usize) * width + sx as usize];
                                }
                            }
                        }
                        out[(o * height + y) * width + x] = acc;
                    }
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::costbench::CostTable;
    use crate::he::{CostBackend, ExactBackend, Preset};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_layouts() -> Vec<Layout> {
        vec![
            Layout::fc(FcPackingKind::Naive, 20, 6),
            Layout::fc(FcPackingKind::Diagonal, 20, 6),
            Layout::fc(FcPackingKind::Hybrid, 20, 6),
            Layout::fc(FcPackingKind::Hybrid, 5, 7),
            Layout::conv(ConvGrouping::PerFilter, 3, 3, 2, 6, 5),
            Layout::conv(ConvGrouping::PerKernel, 3, 3, 2, 6, 5),
        ]
    }

    fn exact() -> &'static ExactBackend {
        static B: OnceLock<ExactBackend> = OnceLock::new();
        B.get_or_init(|| {
            let steps: Vec<i64> = small_layouts().iter().flat_map(|l| l.rotation_steps()).collect();
            ExactBackend::with_rotations(&Preset::Ring13Depth2.params(), 21, steps).unwrap()
        })
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
    }

    #[test]
    fn group_partition_examples() {
        let naive = Layout::fc(FcPackingKind::Naive, 128, 10).group_indices();
        assert_eq!(naive.len(), 10);
        assert!(naive.iter().all(|g| g.len() == 128));
        assert_eq!(Layout::fc(FcPackingKind::Diagonal, 2048, 128).group_count(), 2048);
        let conv = Layout::conv(ConvGrouping::PerFilter, 3, 3, 32, 32, 32).group_indices();
        assert_eq!(conv.len(), 32);
        assert!(conv.iter().all(|g| g.len() == 27));
        let kernels = Layout::conv(ConvGrouping::PerKernel, 3, 3, 32, 32, 32).group_indices();
        assert_eq!(kernels.len(), 96);
        assert!(kernels.iter().all(|g| g.len() == 9));
    }

    #[test]
    fn quota_floor() {
        assert_eq!(hidden_quota(0.3, 10), 3);
        assert_eq!(hidden_quota(0.7, 10), 7);
        assert_eq!(hidden_quota(0.5, 3), 1);
        for i in 0..=10 {
            assert_eq!(hidden_quota(i as f64 / 10.0, 10), i);
        }
    }

    #[test]
    fn predicted_examples() {
        let naive = predicted_ops(&Layout::fc(FcPackingKind::Naive, 128, 10), 0.2, false, Mode::RelinOnly);
        assert_eq!((naive.plain_mults, naive.ciph_mults, naive.relins), (8, 2, 2));
        let diag = predicted_ops(&Layout::fc(FcPackingKind::Diagonal, 128, 10), 0.0, false, Mode::RelinOnly);
        assert_eq!((diag.plain_mults, diag.ciph_mults), (128, 0));
        let half = predicted_ops(&Layout::fc(FcPackingKind::Diagonal, 2048, 128), 0.5, false, Mode::RelinOnly);
        assert_eq!((half.plain_mults, half.ciph_mults), (1024, 1024));
        for i in 0..=10 {
            let p = i as f64 / 10.0;
            let h = predicted_ops(&Layout::fc(FcPackingKind::Hybrid, 2048, 128), p, true, Mode::RelinOnly);
            let n = predicted_ops(&Layout::fc(FcPackingKind::Naive, 2048, 128), p, true, Mode::RelinOnly);
            assert_eq!((h.plain_mults, h.ciph_mults), (n.plain_mults, n.ciph_mults));
        }
        let conv = predicted_ops(&Layout::conv(ConvGrouping::PerFilter, 3, 3, 2, 32, 32), 0.5, false, Mode::RelinOnly);
        assert_eq!((conv.plain_mults, conv.ciph_mults), (9, 9));
    }

    #[test]
    fn slot_overflow_is_reported() {
        let err = Layout::conv(ConvGrouping::PerFilter, 3, 5, 1, 32, 32).validate(4096);
        assert_eq!(err, Err(PackingError::SlotOverflow { needed: 8192, slots: 4096 }));
    }

    #[test]
    fn unknown_group_is_rejected() {
        let layout = Layout::fc(FcPackingKind::Naive, 4, 2);
        let backend = CostBackend::new(CostTable::paper_default(8192).unwrap(), &Preset::Ring13Depth2.params());
        let r = pack_layer(&backend, &layout, &[0.0; 8], &[0.0; 2], &[2], false, Mode::RelinOnly);
        assert!(matches!(r, Err(PackingError::GroupOutOfRange { index: 2, groups: 2 })));
    }

    #[test]
    fn exact_evaluation_matches_plain_layer_and_prediction() {
        let backend = exact();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for layout in small_layouts() {
            for mode in [Mode::RelinOnly, Mode::RescaleAll] {
                let w = random_vec(&mut rng, layout.weight_len());
                let b = random_vec(&mut rng, layout.bias_len());
                let x = random_vec(&mut rng, layout.input_len());
                let g = layout.group_count();
                let hidden: Vec<usize> = (0..g).filter(|i| i % 2 == 0).collect();
                let packed = pack_layer(backend, &layout, &w, &b, &hidden, true, mode).unwrap();
                let input = backend.encrypt_values(&layout.pack_input(&x).unwrap()).unwrap();
                let (outs, ledger) = eval_layer_he(backend, &packed, &input).unwrap();
                let dec: Vec<Vec<f64>> = outs.iter().map(|c| backend.decrypt_values(c)).collect();
                let got = layout.unpack_output(&dec);
                let want = plain_linear(&layout, &w, &b, &x);
                let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-2, "{layout:?} {mode:?}: {err}");
                assert!(ledger.same_counts(&layout.predicted_ops_for(hidden.len(), true, mode)), "{layout:?} {mode:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn groups_partition_weights(m in 1usize..40, n in 1usize..20, k in prop::sample::select(vec![1usize, 3, 5]), c in 1usize..4, o in 1usize..4) {
            let layouts = [
                Layout::fc(FcPackingKind::Naive, m, n),
                Layout::fc(FcPackingKind::Diagonal, m, n),
                Layout::fc(FcPackingKind::Hybrid, m, n),
                Layout::conv(ConvGrouping::PerFilter, k, c, o, 6, 6),
                Layout::conv(ConvGrouping::PerKernel, k, c, o, 6, 6),
            ];
            for layout in layouts {
                let mut all: Vec<usize> = layout.group_indices().concat();
                prop_assert_eq!(layout.group_indices().len(), layout.group_count());
                all.sort_unstable();
                prop_assert_eq!(all, (0..layout.weight_len()).collect::<Vec<_>>());
            }
        }

        #[test]
        fn cost_backend_ledger_matches_prediction(m in 1usize..70, n in 1usize..12, p in 0u32..=10, bias_hidden: bool, rescale: bool) {
            let backend = CostBackend::new(CostTable::paper_default(8192).unwrap(), &Preset::Ring13Depth2.params());
            let mode = if rescale { Mode::RescaleAll } else { Mode::RelinOnly };
            let p = p as f64 / 10.0;
            for layout in [
                Layout::fc(FcPackingKind::Naive, m, n),
                Layout::fc(FcPackingKind::Diagonal, m, n),
                Layout::fc(FcPackingKind::Hybrid, m, n),
                Layout::conv(ConvGrouping::PerFilter, 3, 1 + m % 3, n, 8, 8),
                Layout::conv(ConvGrouping::PerKernel, 3, 1 + m % 3, n, 8, 8),
            ] {
                let hidden: Vec<usize> = (0..hidden_quota(p, layout.group_count())).collect();
                let packed = pack_layer(&backend, &layout, &vec![0.5; layout.weight_len()], &vec![0.0; layout.bias_len()], &hidden, bias_hidden, mode).unwrap();
                let input = backend.encrypt(&backend.encode(&[], backend.max_level(), backend.scale()).unwrap()).unwrap();
                let (_, ledger) = eval_layer_he(&backend, &packed, &input).unwrap();
                let predicted = predicted_ops(&layout, p, bias_hidden, mode);
                prop_assert!(ledger.same_counts(&predicted));
                prop_assert_eq!(ledger.plain_mults + ledger.ciph_mults, (layout.group_count() * layout.mults_per_group()) as u64);
                let structure = predicted_ops(&layout, 0.0, bias_hidden, mode);
                prop_assert_eq!((ledger.rotations, ledger.ct_adds, ledger.pt_adds), (structure.rotations, structure.ct_adds, structure.pt_adds));
            }
        }
    }
}
