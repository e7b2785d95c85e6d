use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::he::{CkksParams, CostBackend, ExactBackend, HeBackend, HeError, OpLedger, Preset};
use crate::packing::{eval_layer_he, hidden_quota, ledger_cost, pack_layer, predicted_ops, Layout, Mode, PackingError};

pub const MIN_REPETITIONS: usize = 30;
const WARMUP: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("at least {MIN_REPETITIONS} repetitions required, got {0}")]
    TooFewRepetitions(usize),
    #[error("timer too coarse to measure {0}")]
    CoarseTimer(&'static str),
    #[error("p grid value {0} outside [0, 1]")]
    InvalidGrid(f64),
    #[error("p = {0} is not on the report grid")]
    NotOnGrid(f64),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Packing(#[from] PackingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    PaperDefault { ring_degree: usize, depth: usize },
    Measured { host: String, timestamp: u64 },
}

/// Unit costs relative to one plaintext-ciphertext multiplication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub plain_mult: f64,
    pub ciph_mult: f64,
    pub rescale: f64,
    pub relinearization: f64,
    pub provenance: Provenance,
}

impl CostTable {
    /// Published relative costs at 128-bit security, each column divided by
    /// its plaintext-multiplication entry.
    pub fn paper_default(ring_degree: usize) -> Option<Self> {
        let (depth, plain, ciph, rescale, relin) = match ring_degree {
            4096 => (2, 1.0, 2.7, 7.6, 16.1),
            8192 => (4, 4.0, 12.3, 38.5, 80.0),
            16384 => (8, 16.0, 60.0, 175.7, 477.0),
            _ => return None,
        };
        Some(Self {
            plain_mult: 1.0,
            ciph_mult: ciph / plain,
            rescale: rescale / plain,
            relinearization: relin / plain,
            provenance: Provenance::PaperDefault { ring_degree, depth },
        })
    }
}

impl CostTable {
    /// Table for the preset with the published costs, if there is one.
    pub fn paper_default_for(params: &CkksParams) -> Option<Self> {
        Self::paper_default(params.ring_degree())
    }

    pub fn validate(&self) -> bool {
        self.plain_mult == 1.0 && [self.ciph_mult, self.rescale, self.relinearization].iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn host_id() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok().map(|s| s.trim().to_string()))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Smallest preset (by ring degree, then depth) whose slot count holds `layout`.
pub fn smallest_fitting_preset(layout: &Layout) -> Option<Preset> {
    Preset::ALL.into_iter().find(|p| layout.slots_needed() <= p.params().slot_count())
}

/// Raw medians per operation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timings {
    pub plain_mult: Duration,
    pub ciph_mult: Duration,
    pub rescale: Duration,
    pub relinearization: Duration,
}

/// Median wall-clock time of each multiplication-class operation at the top
/// level, after discarding a few warm-up runs.
pub fn measure(backend: &ExactBackend, repetitions: usize) -> Result<Timings, CostError> {
    if repetitions < MIN_REPETITIONS {
        return Err(CostError::TooFewRepetitions(repetitions));
    }
    let slots = backend.slot_count();
    let level = backend.max_level();
    let values: Vec<f64> = (0..slots).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect();
    let pt = backend.encode(&values, level, backend.scale())?;
    let a = backend.encrypt(&pt)?;
    let b = backend.encrypt(&pt)?;
    let mut scratch = OpLedger::new();
    let tensor = backend.mul_ct(&a, &b, &mut scratch)?;
    let relined = backend.relinearize(&tensor, &mut scratch)?;

    let time = |name: &'static str, f: &mut dyn FnMut() -> Result<(), HeError>| -> Result<Duration, CostError> {
        for _ in 0..WARMUP {
            f()?;
        }
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            f()?;
            samples.push(t.elapsed());
        }
        let m = median(samples);
        if m.is_zero() {
            return Err(CostError::CoarseTimer(name));
        }
        Ok(m)
    };
    let mut l = OpLedger::new();
    let plain_mult = time("plain_mult", &mut || backend.mul_pt(&a, &pt, &mut l).map(drop))?;
    let ciph_mult = time("ciph_mult", &mut || backend.mul_ct(&a, &b, &mut l).map(drop))?;
    let relinearization = time("relinearization", &mut || backend.relinearize(&tensor, &mut l).map(drop))?;
    let rescale = time("rescale", &mut || backend.rescale(&relined, &mut l).map(drop))?;
    Ok(Timings {
        plain_mult,
        ciph_mult,
        rescale,
        relinearization,
    })
}

/// Measured cost table normalized so `plain_mult == 1`.
pub fn calibrate(backend: &ExactBackend, repetitions: usize) -> Result<CostTable, CostError> {
    let t = measure(backend, repetitions)?;
    let base = t.plain_mult.as_secs_f64();
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(CostTable {
        plain_mult: 1.0,
        ciph_mult: t.ciph_mult.as_secs_f64() / base,
        rescale: t.rescale.as_secs_f64() / base,
        relinearization: t.relinearization.as_secs_f64() / base,
        provenance: Provenance::Measured { host: host_id(), timestamp },
    })
}

/// Overhead of hiding a fraction `p` of a layer's groups, relative to `p = 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadReport {
    pub layout: Layout,
    pub mode: Mode,
    pub bias_hidden: bool,
    /// `(p, factor)` in grid order.
    pub grid: Vec<(f64, f64)>,
}

impl OverheadReport {
    pub fn factor_at(&self, p: f64) -> Option<f64> {
        self.grid.iter().find(|(q, _)| (q - p).abs() < 1e-9).map(|&(_, f)| f)
    }
}

/// The grid `0.0, 0.1, ..., 1.0`.
pub fn decile_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<(), CostError> {
    match grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(&p) => Err(CostError::InvalidGrid(p)),
        None => Ok(()),
    }
}

/// `cost(predicted_ops(p)) / cost(predicted_ops(0))` for every grid point.
pub fn overhead_factor(layout: &Layout, grid: &[f64], table: &CostTable, mode: Mode, bias_hidden: bool) -> Result<OverheadReport, CostError> {
    check_grid(grid)?;
    let base = ledger_cost(&predicted_ops(layout, 0.0, bias_hidden, mode), table);
    Ok(OverheadReport {
        layout: *layout,
        mode,
        bias_hidden,
        grid: grid
            .iter()
            .map(|&p| (p, ledger_cost(&predicted_ops(layout, p, bias_hidden, mode), table) / base))
            .collect(),
    })
}

/// Same ratio from wall-clock time of real homomorphic evaluations: the
/// multiplication-class time recorded in each evaluation's ledger.
pub fn measured_overhead(backend: &ExactBackend, layout: &Layout, grid: &[f64], mode: Mode, repetitions: usize, seed: u64) -> Result<OverheadReport, CostError> {
    use rand::{Rng, SeedableRng};
    check_grid(grid)?;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..layout.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..layout.bias_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input: Vec<f64> = (0..layout.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ct = backend.encrypt(&backend.encode(&layout.pack_input(&input)?, backend.max_level(), backend.scale())?)?;
    let time_at = |p: f64| -> Result<f64, CostError> {
        let hidden: Vec<usize> = (0..hidden_quota(p, layout.group_count())).collect();
        let packed = pack_layer(backend, layout, &weights, &bias, &hidden, false, mode)?;
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions.max(1) {
            let (_, ledger) = eval_layer_he(backend, &packed, &ct)?;
            samples.push(Duration::from_secs_f64(ledger.estimated_time));
        }
        Ok(median(samples).as_secs_f64())
    };
    let base = time_at(0.0)?;
    let grid = grid.iter().map(|&p| Ok((p, time_at(p)? / base))).collect::<Result<_, CostError>>()?;
    Ok(OverheadReport {
        layout: *layout,
        mode,
        bias_hidden: false,
        grid,
    })
}

/// `factor(p_high) / factor(p_low)`.
pub fn speedup_summary(report: &OverheadReport, p_low: f64, p_high: f64) -> Result<f64, CostError> {
    let lo = report.factor_at(p_low).ok_or(CostError::NotOnGrid(p_low))?;
    let hi = report.factor_at(p_high).ok_or(CostError::NotOnGrid(p_high))?;
    Ok(hi / lo)
}

/// Operands of `f(x, y, z, w) = x*y + z*w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operand {
    X,
    Y,
    Z,
    W,
}

/// Operation counts for `x*y + z*w` when the `leaked` operands are known in
/// the clear and the rest are encrypted. A product of two known operands is
/// computed in the clear; only the multiplications and the final addition are
/// counted.
pub fn count_bilinear(leaked: &[Operand]) -> OpLedger {
    let table = CostTable::paper_default(4096).expect("table for 2^12");
    let backend = CostBackend::new(table, &Preset::Ring12Depth2.params());
    let level = backend.max_level();
    let scale = backend.scale();
    let known = |o: Operand| leaked.contains(&o);
    let mut ledger = OpLedger::new();
    let pt = backend.encode(&[], level, scale).expect("encode");
    let ct = backend.encrypt(&pt).expect("encrypt");
    let mut product = |a: Operand, b: Operand| match (known(a), known(b)) {
        (true, true) => None,
        (false, false) => Some(backend.mul_ct(&ct, &ct, &mut ledger).expect("mul_ct")),
        _ => Some(backend.mul_pt(&ct, &pt, &mut ledger).expect("mul_pt")),
    };
    let (xy, zw) = (product(Operand::X, Operand::Y), product(Operand::Z, Operand::W));
    let pt_sq = backend.encode(&[], level, scale * scale).expect("encode");
    match (xy, zw) {
        (Some(a), Some(b)) => {
            backend.add_ct(&a, &b, &mut ledger).expect("add_ct");
        }
        (Some(c), None) | (None, Some(c)) => {
            backend.add_pt(&c, &pt_sq, &mut ledger).expect("add_pt");
        }
        (None, None) => {}
    }
    ledger.estimated_time = 0.0;
    ledger
}
