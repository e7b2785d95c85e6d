use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::spec::{LayerSpec, NetworkSpec};
use super::tensor::Tensor;
use super::NnError;

const MAGIC: &[u8; 4] = b"POW1";
const VERSION: u32 = 1;
pub const BN_EPSILON: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    /// FC weight `[M, N]` or conv weight `[k, k, M, N]`, bias `[N]`.
    Linear { weight: Tensor, bias: Tensor },
    BatchNorm(BatchNormParams),
}

/// Parameters aligned one-to-one with the layers of a [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub layers: Vec<LayerParams>,
}

fn expected_params(layer: &LayerSpec) -> Option<(Vec<usize>, usize)> {
    match *layer {
        LayerSpec::Conv {
            kernel,
            in_channels,
            out_channels,
        } => Some((vec![kernel, kernel, in_channels, out_channels], out_channels)),
        LayerSpec::Fc { inputs, outputs } => Some((vec![inputs, outputs], outputs)),
        _ => None,
    }
}

impl WeightStore {
    /// Uniform fan-in initialization (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`),
    /// zero biases, identity batch normalization.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self, NnError> {
        spec.shapes()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm(BatchNormParams::identity(channels)),
                _ => match expected_params(layer) {
                    Some((shape, n)) => {
                        let fan_in: usize = shape[..shape.len() - 1].iter().product();
                        let limit = (6.0 / fan_in as f64).sqrt() as f32;
                        let len: usize = shape.iter().product();
                        let data = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
                        LayerParams::Linear {
                            weight: Tensor::new(shape, data).expect("shape matches"),
                            bias: Tensor::zeros(vec![n]),
                        }
                    }
                    None => LayerParams::None,
                },
            })
            .collect();
        Ok(Self { layers })
    }

    /// All weights and biases zero; batch normalization left at identity.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self, NnError> {
        let mut store = Self::init(spec, 0)?;
        for layer in &mut store.layers {
            if let LayerParams::Linear { weight, bias } = layer {
                weight.data_mut().fill(0.0);
                bias.data_mut().fill(0.0);
            }
        }
        Ok(store)
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<(), NnError> {
        if self.layers.len() != spec.layers.len() {
            return Err(NnError::ShapeMismatch {
                context: "weight store".into(),
                expected: format!("{} layers", spec.layers.len()),
                found: format!("{} layers", self.layers.len()),
            });
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let bad = |expected: String, found: String| NnError::ShapeMismatch {
                context: format!("layer {i}"),
                expected,
                found,
            };
            match (layer, params) {
                (LayerSpec::BatchNorm { channels }, LayerParams::BatchNorm(bn)) => {
                    for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                        if t.shape() != [*channels] {
                            return Err(bad(format!("[{channels}]"), format!("{:?}", t.shape())));
                        }
                    }
                }
                (_, LayerParams::Linear { weight, bias }) if layer.is_linear() => {
                    let (shape, n) = expected_params(layer).expect("linear layer");
                    if weight.shape() != shape.as_slice() || bias.shape() != [n] {
                        return Err(bad(
                            format!("weight {shape:?}, bias [{n}]"),
                            format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
                        ));
                    }
                }
                (_, LayerParams::None) if !layer.is_linear() && !matches!(layer, LayerSpec::BatchNorm { .. }) => {}
                _ => return Err(bad(format!("{} parameters", layer.kind_name()), "other parameters".into())),
            }
        }
        Ok(())
    }

    pub fn linear(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        match self.layers.get(layer) {
            Some(LayerParams::Linear { weight, bias }) => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self, layer: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        match self.layers.get_mut(layer) {
            Some(LayerParams::Linear { weight, bias }) => Some((weight, bias)),
            _ => None,
        }
    }

    /// Named tensors in file order: `"{layer}.{kind}.{field}"`.
    pub fn named_tensors(&self, spec: &NetworkSpec) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (layer, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let kind = layer.kind_name();
            match params {
                LayerParams::Linear { weight, bias } => {
                    out.push((format!("{i}.{kind}.weight"), weight));
                    out.push((format!("{i}.{kind}.bias"), bias));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((format!("{i}.{kind}.gamma"), &bn.gamma));
                    out.push((format!("{i}.{kind}.beta"), &bn.beta));
                    out.push((format!("{i}.{kind}.mean"), &bn.running_mean));
                    out.push((format!("{i}.{kind}.var"), &bn.running_var));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, spec: &NetworkSpec, mut w: W) -> Result<(), NnError> {
        let tensors = self.named_tensors(spec);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(spec: &NetworkSpec, mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::BadMagic {
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(magic),
            });
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported weight file version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| NnError::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.insert(name, Tensor::new(shape, data)?);
        }
        let mut take = |name: String| entries.remove(&name).ok_or(NnError::MissingTensor(name));
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let kind = layer.kind_name();
            layers.push(match layer {
                LayerSpec::Conv { .. } | LayerSpec::Fc { .. } => LayerParams::Linear {
                    weight: take(format!("{i}.{kind}.weight"))?,
                    bias: take(format!("{i}.{kind}.bias"))?,
                },
                LayerSpec::BatchNorm { .. } => LayerParams::BatchNorm(BatchNormParams {
                    gamma: take(format!("{i}.{kind}.gamma"))?,
                    beta: take(format!("{i}.{kind}.beta"))?,
                    running_mean: take(format!("{i}.{kind}.mean"))?,
                    running_var: take(format!("{i}.{kind}.var"))?,
                }),
                _ => LayerParams::None,
            });
        }
        let store = Self { layers };
        store.validate(spec)?;
        Ok(store)
    }

    pub fn save(&self, spec: &NetworkSpec, path: &Path) -> Result<(), NnError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(spec, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(spec: &NetworkSpec, path: &Path) -> Result<Self, NnError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(spec, std::io::BufReader::new(file))
    }
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], 1.0),
        }
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), NnError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NnError::Truncated,
        _ => NnError::Io(e.to_string()),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
