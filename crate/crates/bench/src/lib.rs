//! Fixtures shared by the criterion benches.

use poinf_core::he::{Ciphertext, ExactBackend, HeBackend, Preset};
use poinf_core::packing::{hidden_quota, pack_layer, Layout, Mode, PackedLayer};

/// Deterministic values in `[-1, 1)`.
pub fn ramp(len: usize, salt: u64) -> Vec<f64> {
    (0..len as u64)
        .map(|i| ((i.wrapping_mul(2654435761).wrapping_add(salt) % 2000) as f64) / 1000.0 - 1.0)
        .collect()
}

pub fn backend(preset: Preset) -> ExactBackend {
    ExactBackend::new(&preset.params(), 1).expect("preset parameters are valid")
}

/// A layer with the first `p` fraction of its groups hidden, plus an encrypted input.
pub fn packed(backend: &ExactBackend, layout: &Layout, p: f64) -> (PackedLayer<ExactBackend>, Ciphertext) {
    let hidden: Vec<usize> = (0..hidden_quota(p, layout.group_count())).collect();
    let layer = pack_layer(
        backend,
        layout,
        &ramp(layout.weight_len(), 1),
        &ramp(layout.bias_len(), 2),
        &hidden,
        false,
        Mode::RelinOnly,
    )
    .expect("layout fits the preset");
    let input = layout.pack_input(&ramp(layout.input_len(), 3)).expect("input length matches");
    let pt = backend.encode(&input, backend.max_level(), backend.scale()).expect("encodable");
    (layer, backend.encrypt(&pt).expect("encryptable"))
}
