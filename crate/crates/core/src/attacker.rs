//! Model-stealing simulation: fill in encrypted weights and measure how much
//! accuracy the revealed part buys the attacker.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::leakage::{hidden_weight_mask, layout_for, plan_leakage, GroupScheme, LeakageError, LeakagePlan, SelectionStrategy};
use crate::nn::{evaluate_accuracy, Dataset, LayerParams, NetworkSpec, NnError, WeightStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Leakage(#[from] LeakageError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("reports do not share the same p grid")]
    MismatchedGrid,
}

/// How the attacker guesses an encrypted weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPolicy {
    Const(f64),
    /// Mean of the layer's revealed weights.
    Mean,
    StdNormal,
    /// Normal with the revealed weights' mean and unbiased standard deviation.
    FittedNormal,
}

impl fmt::Display for AttackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackPolicy::Const(c) => write!(f, "const({c})"),
            AttackPolicy::Mean => f.write_str("mean"),
            AttackPolicy::StdNormal => f.write_str("std-normal"),
            AttackPolicy::FittedNormal => f.write_str("fitted-normal"),
        }
    }
}

impl std::str::FromStr for AttackPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(AttackPolicy::Mean),
            "std-normal" => Ok(AttackPolicy::StdNormal),
            "fitted-normal" => Ok(AttackPolicy::FittedNormal),
            "const" => Ok(AttackPolicy::Const(0.0)),
            _ => s
                .strip_prefix("const(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|c| c.parse().ok())
                .map(AttackPolicy::Const)
                .ok_or_else(|| format!("unknown policy {s:?}")),
        }
    }
}

/// Value used when a layer offers nothing to fit.
const FALLBACK: f64 = 0.0;

enum Filler {
    Const(f64),
    Normal(Normal<f64>),
    StdNormal,
}

impl Filler {
    fn sample(&self, rng: &mut ChaCha20Rng) -> f32 {
        match self {
            Filler::Const(c) => *c as f32,
            Filler::Normal(n) => n.sample(rng) as f32,
            Filler::StdNormal => {
                let v: f64 = StandardNormal.sample(rng);
                v as f32
            }
        }
    }
}

fn filler(policy: AttackPolicy, revealed: &[f64], layer: usize) -> Filler {
    let n = revealed.len();
    let mean = || revealed.iter().sum::<f64>() / n as f64;
    match policy {
        AttackPolicy::Const(c) => Filler::Const(c),
        AttackPolicy::StdNormal => Filler::StdNormal,
        AttackPolicy::Mean if n >= 1 => Filler::Const(mean()),
        AttackPolicy::FittedNormal if n >= 2 => {
            let mu = mean();
            let var = revealed.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
            match Normal::new(mu, var.sqrt()) {
                Ok(d) => Filler::Normal(d),
                Err(_) => Filler::Const(mu),
            }
        }
        _ => {
            log::info!("layer {layer}: {n} revealed weights, {policy} falls back to const({FALLBACK})");
            Filler::Const(FALLBACK)
        }
    }
}

/// Attacker's model: revealed entries copied bit for bit, hidden entries
/// (and hidden biases) drawn from `policy`. Statistics use the revealed
/// weights of the same layer, never its biases.
pub fn reconstruct(spec: &NetworkSpec, weights: &WeightStore, plan: &LeakagePlan, policy: AttackPolicy, seed: u64) -> Result<WeightStore, AttackError> {
    weights.validate(spec)?;
    let mut out = weights.clone();
    for lp in &plan.layers {
        let layout = layout_for(spec, lp.layer, lp.scheme)?;
        let mask = hidden_weight_mask(&layout, lp);
        let Some(LayerParams::Linear { weight, bias }) = out.layers.get_mut(lp.layer) else {
            return Err(LeakageError::InvalidScheme {
                layer: lp.layer,
                reason: "not a conv or fc layer".into(),
            }
            .into());
        };
        let revealed: Vec<f64> = weight.data().iter().zip(&mask).filter(|(_, &h)| !h).map(|(&w, _)| w as f64).collect();
        let fill = filler(policy, &revealed, lp.layer);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(lp.layer as u64);
        for (w, &h) in weight.data_mut().iter_mut().zip(&mask) {
            if h {
                *w = fill.sample(&mut rng);
            }
        }
        if lp.bias_hidden {
            bias.data_mut().iter_mut().for_each(|b| *b = fill.sample(&mut rng));
        }
    }
    Ok(out)
}

/// Everything that defines a leakage plan except the random seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFamily {
    pub schemes: Vec<GroupScheme>,
    pub p: f64,
    /// Selection strategy; a `Random` seed here is ignored in favor of per-run seeds.
    pub strategy: SelectionStrategy,
    pub hide_biases: bool,
}

impl PlanFamily {
    pub fn instantiate(&self, spec: &NetworkSpec, weights: &WeightStore, run_seed: u64) -> Result<LeakagePlan, AttackError> {
        let strategy = match self.strategy {
            SelectionStrategy::Random(_) => SelectionStrategy::Random(run_seed),
            s => s,
        };
        Ok(plan_leakage(spec, weights, &self.schemes, self.p, strategy, self.hide_biases)?)
    }
}

/// Seeds for runs `0..runs`, derived from one master seed.
pub fn run_seeds(seed: u64, runs: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..runs).map(|_| rng.random()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdvantageReport {
    pub p: f64,
    pub strategy: String,
    pub policy: AttackPolicy,
    pub biases_hidden: bool,
    /// Accuracy of the true model.
    pub acc_full: f64,
    /// Mean accuracy of the all-hidden reconstructions.
    pub acc_baseline: f64,
    pub acc_attacked: Vec<f64>,
    /// `acc_attacked[r] - acc_baseline`.
    pub adv_runs: Vec<f64>,
    pub adv_mean: f64,
    /// Population standard deviation of `adv_runs`.
    pub adv_std: f64,
    pub runs: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AdvantageReport {
    /// Builds the statistics from raw accuracies.
    pub fn from_runs(p: f64, strategy: &str, policy: AttackPolicy, biases_hidden: bool, acc_full: f64, baseline_runs: &[f64], acc_attacked: Vec<f64>) -> Self {
        let (acc_baseline, _) = mean_std(baseline_runs);
        let (att_mean, _) = mean_std(&acc_attacked);
        let adv_runs: Vec<f64> = acc_attacked.iter().map(|a| a - acc_baseline).collect();
        let (_, adv_std) = mean_std(&adv_runs);
        Self {
            p,
            strategy: strategy.to_string(),
            policy,
            biases_hidden,
            acc_full,
            acc_baseline,
            runs: acc_attacked.len(),
            adv_mean: att_mean - acc_baseline,
            adv_runs,
            adv_std,
            acc_attacked,
        }
    }
}

/// Runs `runs` attacks against plans drawn from `family`. The baseline
/// reconstructs the same family at `p = 1` with the same policy and run seeds,
/// so at `p = 1` the advantage is exactly zero.
pub fn attacker_advantage(
    spec: &NetworkSpec,
    weights: &WeightStore,
    family: &PlanFamily,
    policy: AttackPolicy,
    test: &Dataset,
    runs: usize,
    seed: u64,
) -> Result<AdvantageReport, AttackError> {
    if runs == 0 {
        return Err(AttackError::NoRuns);
    }
    let acc_full = evaluate_accuracy(spec, weights, test)?;
    let all_hidden = PlanFamily { p: 1.0, ..family.clone() };
    let mut baseline = Vec::with_capacity(runs);
    let mut attacked = Vec::with_capacity(runs);
    for run_seed in run_seeds(seed, runs) {
        let fill_seed = run_seed ^ 0x5eed_f111;
        let plan = family.instantiate(spec, weights, run_seed)?;
        let model = reconstruct(spec, weights, &plan, policy, fill_seed)?;
        attacked.push(evaluate_accuracy(spec, &model, test)?);
        let base_plan = all_hidden.instantiate(spec, weights, run_seed)?;
        let base_model = reconstruct(spec, weights, &base_plan, policy, fill_seed)?;
        baseline.push(evaluate_accuracy(spec, &base_model, test)?);
    }
    Ok(AdvantageReport::from_runs(family.p, family.strategy.name(), policy, family.hide_biases, acc_full, &baseline, attacked))
}

/// Closed bound: `adv_mean <= lambda`.
pub fn is_lambda_secure(report: &AdvantageReport, lambda: f64) -> bool {
    report.adv_mean <= lambda
}

/// Largest per-run advantage at each p, over all given report sets. Every
/// set must cover the same p values.
pub fn worst_case_advantage(sets: &[Vec<AdvantageReport>]) -> Result<Vec<(f64, f64)>, AttackError> {
    let grid = |set: &Vec<AdvantageReport>| {
        let mut ps: Vec<u64> = set.iter().map(|r| r.p.to_bits()).collect();
        ps.sort_unstable();
        ps.dedup();
        ps
    };
    let Some(first) = sets.first() else {
        return Ok(Vec::new());
    };
    let reference = grid(first);
    if sets.iter().any(|s| grid(s) != reference) {
        return Err(AttackError::MismatchedGrid);
    }
    let mut worst: BTreeMap<u64, f64> = BTreeMap::new();
    for r in sets.iter().flatten() {
        let m = r.adv_runs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = worst.entry(r.p.to_bits()).or_insert(f64::NEG_INFINITY);
        *e = e.max(m);
    }
    let mut out: Vec<(f64, f64)> = worst.into_iter().map(|(p, m)| (f64::from_bits(p), m)).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Split, Tensor};
    use crate::packing::{ConvGrouping, FcPackingKind};
    use proptest::prelude::*;

    fn net() -> NetworkSpec {
        NetworkSpec {
            input_shape: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 1,
                    out_channels: 4,
                },
                LayerSpec::Relu,
                LayerSpec::Fc { inputs: 64, outputs: 10 },
                LayerSpec::Softmax,
            ],
        }
    }

    fn schemes() -> Vec<GroupScheme> {
        vec![GroupScheme::Conv(ConvGrouping::PerFilter), GroupScheme::Fc(FcPackingKind::Naive)]
    }

    fn weights(seed: u64) -> WeightStore {
        let spec = net();
        let mut w = WeightStore::init(&spec, seed).unwrap();
        for l in spec.linear_layers() {
            let (_, b) = w.linear_mut(l).unwrap();
            b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * (i as f32 + 1.0));
        }
        w
    }

    fn balanced(n: usize) -> Dataset {
        let images: Vec<f32> = (0..n * 16).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect();
        Dataset::new(Tensor::new(vec![n, 1, 4, 4], images).unwrap(), (0..n).map(|i| i % 10).collect(), 10, Split::Test).unwrap()
    }

    fn family(p: f64, hide_biases: bool) -> PlanFamily {
        PlanFamily {
            schemes: schemes(),
            p,
            strategy: SelectionStrategy::Random(0),
            hide_biases,
        }
    }

    #[test]
    fn zero_fraction_const_only_zeroes_biases() {
        let spec = net();
        let w = weights(1);
        let plan = family(0.0, true).instantiate(&spec, &w, 3).unwrap();
        let r = reconstruct(&spec, &w, &plan, AttackPolicy::Const(0.0), 1).unwrap();
        for l in spec.linear_layers() {
            let (a, _) = w.linear(l).unwrap();
            let (b, bias) = r.linear(l).unwrap();
            assert_eq!(a, b);
            assert!(bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fully_hidden_layer_falls_back_to_const() {
        let spec = net();
        let w = weights(1);
        let plan = family(1.0, true).instantiate(&spec, &w, 3).unwrap();
        for policy in [AttackPolicy::FittedNormal, AttackPolicy::Mean] {
            let r = reconstruct(&spec, &w, &plan, policy, 1).unwrap();
            for l in spec.linear_layers() {
                let (wt, b) = r.linear(l).unwrap();
                assert!(wt.data().iter().chain(b.data()).all(|&v| v == FALLBACK as f32));
            }
        }
    }

    #[test]
    fn fitted_normal_uses_unbiased_std() {
        let Filler::Normal(d) = filler(AttackPolicy::FittedNormal, &[1.0, 3.0], 0) else { panic!("expected a normal") };
        assert_eq!(d.mean(), 2.0);
        assert!((d.std_dev() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(filler(AttackPolicy::FittedNormal, &[1.0], 0), Filler::Const(c) if c == FALLBACK));
        assert!(matches!(filler(AttackPolicy::Mean, &[1.0, 2.0, 6.0], 0), Filler::Const(c) if c == 3.0));
    }

    #[test]
    fn baseline_and_determinism() {
        let spec = net();
        let w = weights(2);
        let test = balanced(50);
        for policy in [AttackPolicy::Const(0.0), AttackPolicy::Mean, AttackPolicy::StdNormal, AttackPolicy::FittedNormal] {
            let full = attacker_advantage(&spec, &w, &family(1.0, true), policy, &test, 3, 11).unwrap();
            assert_eq!(full.adv_mean, 0.0, "{policy}");
            assert_eq!(full.runs, 3);
            let half = attacker_advantage(&spec, &w, &family(0.5, true), policy, &test, 3, 11).unwrap();
            assert_eq!(half, attacker_advantage(&spec, &w, &family(0.5, true), policy, &test, 3, 11).unwrap());
            let mean_att = half.acc_attacked.iter().sum::<f64>() / 3.0;
            assert!((half.adv_mean - (mean_att - half.acc_baseline)).abs() < 1e-15);
        }
        let zero = attacker_advantage(&spec, &w, &family(1.0, true), AttackPolicy::Const(0.0), &test, 2, 0).unwrap();
        assert_eq!(zero.acc_baseline, 0.1);
    }

    #[test]
    fn lambda_bound_is_closed() {
        let r = |adv: f64| AdvantageReport::from_runs(0.0, "random", AttackPolicy::Mean, true, 1.0, &[0.0], vec![adv]);
        assert!(is_lambda_secure(&r(0.0), 0.01));
        assert!(!is_lambda_secure(&r(0.479), 0.05));
        assert!(is_lambda_secure(&r(0.25), 0.25));
    }

    #[test]
    fn worst_case_is_elementwise_max() {
        let rep = |p: f64, runs: Vec<f64>| AdvantageReport::from_runs(p, "random", AttackPolicy::Mean, true, 1.0, &[0.1], runs);
        let a = vec![rep(0.0, vec![0.5, 0.7]), rep(0.5, vec![0.2, 0.1])];
        let b = vec![rep(0.0, vec![0.6, 0.3]), rep(0.5, vec![0.35, 0.3])];
        assert_eq!(worst_case_advantage(std::slice::from_ref(&a)).unwrap(), vec![(0.0, 0.7 - 0.1), (0.5, 0.2 - 0.1)]);
        let both = worst_case_advantage(&[a.clone(), b]).unwrap();
        assert!((both[0].1 - 0.6).abs() < 1e-12 && (both[1].1 - 0.25).abs() < 1e-12);
        let c = vec![rep(0.1, vec![0.0])];
        assert_eq!(worst_case_advantage(&[a, c]).unwrap_err(), AttackError::MismatchedGrid);
    }

    #[test]
    fn population_std() {
        let r = AdvantageReport::from_runs(0.0, "random", AttackPolicy::Mean, true, 1.0, &[0.0], vec![0.2, 0.4]);
        assert!((r.adv_std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn policy_parse_roundtrip() {
        for p in [AttackPolicy::Const(0.0), AttackPolicy::Const(-1.5), AttackPolicy::Mean, AttackPolicy::StdNormal, AttackPolicy::FittedNormal] {
            assert_eq!(p.to_string().parse::<AttackPolicy>().unwrap(), p);
        }
        assert!("median".parse::<AttackPolicy>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn revealed_entries_are_bit_exact(seed in any::<u64>(), p in 0.0f64..=1.0, hide in any::<bool>(), pol in 0usize..4) {
            let spec = net();
            let w = weights(seed);
            let policy = [AttackPolicy::Const(0.5), AttackPolicy::Mean, AttackPolicy::StdNormal, AttackPolicy::FittedNormal][pol];
            let plan = family(p, hide).instantiate(&spec, &w, seed).unwrap();
            let r = reconstruct(&spec, &w, &plan, policy, seed).unwrap();
            for lp in &plan.layers {
                let mask = hidden_weight_mask(&layout_for(&spec, lp.layer, lp.scheme).unwrap(), lp);
                let (a, ab) = w.linear(lp.layer).unwrap();
                let (b, bb) = r.linear(lp.layer).unwrap();
                for ((x, y), h) in a.data().iter().zip(b.data()).zip(&mask) {
                    if !h {
                        prop_assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
                if !hide {
                    prop_assert_eq!(ab, bb);
                }
            }
        }
    }
}
