use super::spec::NetworkSpec;
use super::weights::{LayerParams, WeightStore, BN_EPSILON};
use super::NnError;

/// Merges every BatchNorm layer (inference statistics) into the Conv or FC
/// layer directly before it, returning a network without BatchNorm.
pub fn fold_batchnorm(spec: &NetworkSpec, weights: &WeightStore) -> Result<(NetworkSpec, WeightStore), NnError> {
    spec.shapes()?;
    weights.validate(spec)?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut params: Vec<LayerParams> = Vec::with_capacity(spec.layers.len());
    for (i, (layer, p)) in spec.layers.iter().zip(&weights.layers).enumerate() {
        let LayerParams::BatchNorm(bn) = p else {
            layers.push(*layer);
            params.push(p.clone());
            continue;
        };
        let prev_linear = layers.last().is_some_and(|l: &super::spec::LayerSpec| l.is_linear());
        let Some(LayerParams::Linear { weight, bias }) = params.last_mut().filter(|_| prev_linear) else {
            return Err(NnError::InvalidSpec(format!("layer {i}: batch norm must directly follow a conv or fc layer")));
        };
        let n = bias.len();
        let scale: Vec<f64> = (0..n)
            .map(|c| bn.gamma.data()[c] as f64 / (bn.running_var.data()[c] as f64 + BN_EPSILON as f64).sqrt())
            .collect();
        for (j, w) in weight.data_mut().iter_mut().enumerate() {
            *w = (*w as f64 * scale[j % n]) as f32;
        }
        for (c, b) in bias.data_mut().iter_mut().enumerate() {
            *b = ((*b as f64 - bn.running_mean.data()[c] as f64) * scale[c] + bn.beta.data()[c] as f64) as f32;
        }
    }
    Ok((
        NetworkSpec {
            input_shape: spec.input_shape,
            layers,
        },
        WeightStore { layers: params },
    ))
}
