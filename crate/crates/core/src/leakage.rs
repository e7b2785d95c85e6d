//! Choosing which packing groups of each linear layer stay encrypted.

use std::collections::HashSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{LayerSpec, NetworkSpec, NnError, WeightStore};
use crate::packing::{hidden_quota, ConvGrouping, FcPackingKind, Layout};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LeakageError {
    #[error("layer {layer}: {reason}")]
    InvalidScheme { layer: usize, reason: String },
    #[error("hidden fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("expected {expected} schemes (one per linear layer), got {found}")]
    SchemeCount { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Grouping used for one linear layer; it must match the layer kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupScheme {
    Fc(FcPackingKind),
    Conv(ConvGrouping),
}

impl fmt::Display for GroupScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupScheme::Fc(k) => write!(f, "fc-{}", format!("{k:?}").to_lowercase()),
            GroupScheme::Conv(ConvGrouping::PerFilter) => f.write_str("conv-per-filter"),
            GroupScheme::Conv(ConvGrouping::PerKernel) => f.write_str("conv-per-kernel"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random(u64),
    MaxWeight,
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Random(_) => "random",
            SelectionStrategy::MaxWeight => "max-weight",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Index into the network's layer list.
    pub layer: usize,
    pub scheme: GroupScheme,
    pub groups: usize,
    pub p: f64,
    /// Encrypted groups, ascending.
    pub hidden: Vec<usize>,
    pub bias_hidden: bool,
}

impl LayerPlan {
    /// Complement of `hidden`: the groups sent in the clear.
    pub fn revealed(&self) -> Vec<usize> {
        let hidden: HashSet<_> = self.hidden.iter().collect();
        (0..self.groups).filter(|g| !hidden.contains(g)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakagePlan {
    pub strategy: SelectionStrategy,
    pub layers: Vec<LayerPlan>,
}

impl LeakagePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LeakageError> {
        serde_json::from_str(text).map_err(|e| LeakageError::Nn(NnError::Format(e.to_string())))
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Packing layout of linear layer `layer` under `scheme`.
pub fn layout_for(spec: &NetworkSpec, layer: usize, scheme: GroupScheme) -> Result<Layout, LeakageError> {
    let shapes = spec.shapes()?;
    let input = if layer == 0 { spec.input_shape } else { shapes[layer - 1] };
    let bad = |reason: &str| LeakageError::InvalidScheme {
        layer,
        reason: reason.into(),
    };
    match (spec.layers.get(layer), scheme) {
        (Some(&LayerSpec::Fc { inputs, outputs }), GroupScheme::Fc(kind)) => {
            if kind == FcPackingKind::Diagonal && inputs < outputs {
                return Err(bad("diagonal packing needs at least as many inputs as outputs"));
            }
            Ok(Layout::fc(kind, inputs, outputs))
        }
        (
            Some(&LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
            }),
            GroupScheme::Conv(grouping),
        ) => Ok(Layout::conv(grouping, kernel, in_channels, out_channels, input[2], input[1])),
        (Some(l), _) if l.is_linear() => Err(bad(&format!("scheme {scheme} does not fit a {} layer", l.kind_name()))),
        _ => Err(bad("not a conv or fc layer")),
    }
}

/// One scheme per linear layer, in layer order.
pub fn uniform_schemes(spec: &NetworkSpec, fc: FcPackingKind, conv: ConvGrouping) -> Vec<GroupScheme> {
    spec.linear_layers()
        .into_iter()
        .map(|i| match spec.layers[i] {
            LayerSpec::Conv { .. } => GroupScheme::Conv(conv),
            _ => GroupScheme::Fc(fc),
        })
        .collect()
}

/// Mean absolute value of `values`, times `normalizer`. Only the ranking
/// matters, so any positive normalizer selects the same groups.
pub fn group_score(values: &[f64], normalizer: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    normalizer * values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
}

/// Indices of the `k` highest scores; ties go to the lower index. Ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k.min(order.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

fn select(strategy: SelectionStrategy, layout: &Layout, weights: &[f32], quota: usize, layer: usize) -> Vec<usize> {
    let groups = layout.group_count();
    match strategy {
        SelectionStrategy::Random(seed) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(layer as u64);
            let mut chosen = rand::seq::index::sample(&mut rng, groups, quota).into_vec();
            chosen.sort_unstable();
            chosen
        }
        SelectionStrategy::MaxWeight => {
            let scores: Vec<f64> = layout
                .group_indices()
                .iter()
                .map(|g| group_score(&g.iter().map(|&i| weights[i] as f64).collect::<Vec<_>>(), 1.0))
                .collect();
            top_k(&scores, quota)
        }
    }
}

/// Hides `floor(p * G)` groups in every linear layer.
pub fn plan_leakage(
    spec: &NetworkSpec,
    weights: &WeightStore,
    schemes: &[GroupScheme],
    p: f64,
    strategy: SelectionStrategy,
    hide_biases: bool,
) -> Result<LeakagePlan, LeakageError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(LeakageError::InvalidFraction(p));
    }
    weights.validate(spec)?;
    let linear = spec.linear_layers();
    if linear.len() != schemes.len() {
        return Err(LeakageError::SchemeCount {
            expected: linear.len(),
            found: schemes.len(),
        });
    }
    let mut layers = Vec::with_capacity(linear.len());
    for (&layer, &scheme) in linear.iter().zip(schemes) {
        let layout = layout_for(spec, layer, scheme)?;
        let groups = layout.group_count();
        let quota = hidden_quota(p, groups);
        let (w, _) = weights.linear(layer).expect("validated linear layer");
        layers.push(LayerPlan {
            layer,
            scheme,
            groups,
            p,
            hidden: select(strategy, &layout, w.data(), quota, layer),
            bias_hidden: hide_biases,
        });
    }
    Ok(LeakagePlan { strategy, layers })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks quotas, bounds, uniqueness, coverage and group atomicity; collects
/// every violation instead of stopping at the first.
pub fn validate_plan(spec: &NetworkSpec, plan: &LeakagePlan) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |layer: Option<usize>, message: String| out.push(Violation { layer, message });
    let mut seen_layers = HashSet::new();
    for lp in &plan.layers {
        let at = Some(lp.layer);
        if !seen_layers.insert(lp.layer) {
            push(at, "planned more than once".into());
        }
        if !(0.0..=1.0).contains(&lp.p) {
            push(at, format!("hidden fraction {} outside [0, 1]", lp.p));
        }
        let layout = match layout_for(spec, lp.layer, lp.scheme) {
            Ok(l) => l,
            Err(e) => {
                push(at, e.to_string());
                continue;
            }
        };
        let groups = layout.group_count();
        if lp.groups != groups {
            push(at, format!("declares {} groups, layout has {groups}", lp.groups));
        }
        let quota = hidden_quota(lp.p.clamp(0.0, 1.0), groups);
        if lp.hidden.len() != quota {
            push(at, format!("hides {} groups, quota is {quota}", lp.hidden.len()));
        }
        let mut seen = HashSet::new();
        for &g in &lp.hidden {
            if g >= groups {
                push(at, format!("hidden group {g} out of range (groups: {groups})"));
            }
            if !seen.insert(g) {
                push(at, format!("hidden group {g} listed twice"));
            }
        }
        let mut owner = vec![0u32; layout.weight_len()];
        for g in layout.group_indices() {
            for i in g {
                owner[i] += 1;
            }
        }
        if let Some(i) = owner.iter().position(|&c| c != 1) {
            push(at, format!("weight {i} belongs to {} groups, so groups are not atomic", owner[i]));
        }
    }
    for layer in spec.linear_layers() {
        if !seen_layers.contains(&layer) {
            push(Some(layer), "linear layer missing from plan".into());
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Per-weight hidden flags for one planned layer.
pub fn hidden_weight_mask(layout: &Layout, lp: &LayerPlan) -> Vec<bool> {
    let mut mask = vec![false; layout.weight_len()];
    let groups = layout.group_indices();
    for &g in &lp.hidden {
        for &i in &groups[g] {
            mask[i] = true;
        }
    }
    mask
}
