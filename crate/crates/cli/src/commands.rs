use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use poinf_core::attacker::{attacker_advantage, run_seeds, AdvantageReport, PlanFamily};
use poinf_core::costbench::{calibrate, overhead_factor, smallest_fitting_preset, speedup_summary, CostTable, Provenance};
use poinf_core::he::{ExactBackend, Preset};
use poinf_core::leakage::{plan_leakage, validate_plan, SelectionStrategy};
use poinf_core::nn::{self, NetworkSpec, Split, WeightStore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BackendChoice, Loaded};
use crate::output::{read_csv, write_csv};
use crate::Common;

fn load(c: &Common) -> Result<Loaded> {
    let l = Loaded::from_path(c.config.as_deref(), c.seed)?;
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(l)
}

fn strategy(name: &str) -> Result<SelectionStrategy> {
    match name {
        "random" => Ok(SelectionStrategy::Random(0)),
        "max-weight" => Ok(SelectionStrategy::MaxWeight),
        _ => bail!("unknown strategy {name:?}"),
    }
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    validation_loss: Option<f64>,
}

fn train_model(l: &Loaded, spec: &NetworkSpec, seed: u64) -> Result<(WeightStore, nn::TrainReport)> {
    let data = l.dataset(Split::Train)?;
    let cfg = nn::TrainConfig { seed, ..l.config.train.clone() };
    Ok(nn::train_with_report(spec, &data, &cfg)?)
}

pub fn train(c: &Common) -> Result<()> {
    let l = load(c)?;
    let spec = l.network()?;
    let (weights, report) = train_model(&l, &spec, l.config.seed)?;
    let path = c.out.join("weights.pow");
    weights.save(&spec, &path)?;
    let acc = nn::evaluate_accuracy(&spec, &weights, &l.dataset(Split::Test)?)?;
    let rows: Vec<EpochRow> = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| EpochRow {
            epoch: i + 1,
            loss,
            validation_loss: report.validation_losses.get(i).copied(),
        })
        .collect();
    write_csv(&c.out.join("train_log.csv"), "train", &l.config.hash(), l.config.seed, &rows)?;
    println!("wrote {} (test accuracy {acc:.4})", path.display());
    Ok(())
}

/// Weights with batch norm folded in, as the leakage planner sees them.
fn folded(spec: &NetworkSpec, w: &WeightStore) -> Result<(NetworkSpec, WeightStore)> {
    Ok(nn::fold_batchnorm(spec, w)?)
}

pub fn plan(c: &Common, weights: &Path, p: f64, strategy_name: &str) -> Result<()> {
    let l = load(c)?;
    let spec = l.network()?;
    let w = WeightStore::load(&spec, weights)?;
    let (spec, w) = folded(&spec, &w)?;
    let strategy = match strategy(strategy_name)? {
        SelectionStrategy::Random(_) => SelectionStrategy::Random(l.config.seed),
        s => s,
    };
    let plan = plan_leakage(&spec, &w, &l.schemes(&spec), p, strategy, l.config.attack.hide_biases)?;
    if let Err(v) = validate_plan(&spec, &plan) {
        bail!("generated plan is invalid: {}", v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "));
    }
    let path = c.out.join("plan.json");
    std::fs::write(&path, plan.to_json() + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct RunRow {
    pub dataset: String,
    pub p: f64,
    pub strategy: String,
    pub policy: String,
    pub biases_hidden: bool,
    pub run: usize,
    pub acc_attacked: f64,
    pub acc_baseline: f64,
    pub adv: f64,
}

#[derive(Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub p: f64,
    pub strategy: String,
    pub policy: String,
    pub biases_hidden: bool,
    pub runs: usize,
    pub acc_full: f64,
    pub acc_baseline: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
}

pub fn attack(c: &Common, weights: Option<&Path>) -> Result<()> {
    let l = load(c)?;
    let cfg = &l.config;
    let spec = l.network()?;
    let test = l.dataset(Split::Test)?;
    let seeds = run_seeds(cfg.seed, cfg.attack.runs);

    // one model for every run, or a freshly trained one per run
    let models: Vec<(NetworkSpec, WeightStore)> = if cfg.attack.retrain {
        seeds
            .par_iter()
            .map(|&s| train_model(&l, &spec, s).and_then(|(w, _)| folded(&spec, &w)))
            .collect::<Result<_>>()?
    } else {
        let w = match weights {
            Some(p) => WeightStore::load(&spec, p)?,
            None => train_model(&l, &spec, cfg.seed)?.0,
        };
        vec![folded(&spec, &w)?]
    };
    let schemes = l.schemes(&models[0].0);

    let mut cells = Vec::new();
    for &p in &cfg.attack.grid {
        for s in &cfg.attack.strategies {
            for policy in cfg.policies() {
                cells.push((p, strategy(s)?, policy));
            }
        }
    }
    let reports: Vec<AdvantageReport> = cells
        .par_iter()
        .map(|&(p, strategy, policy)| -> Result<AdvantageReport> {
            let family = PlanFamily {
                schemes: schemes.clone(),
                p,
                strategy,
                hide_biases: cfg.attack.hide_biases,
            };
            if models.len() == 1 {
                let (s, w) = &models[0];
                return Ok(attacker_advantage(s, w, &family, policy, &test, cfg.attack.runs, cfg.seed)?);
            }
            let (mut full, mut base, mut attacked) = (0.0, Vec::new(), Vec::new());
            for ((s, w), &seed) in models.iter().zip(&seeds) {
                let r = attacker_advantage(s, w, &family, policy, &test, 1, seed)?;
                full += r.acc_full / models.len() as f64;
                base.push(r.acc_baseline);
                attacked.extend(r.acc_attacked);
            }
            Ok(AdvantageReport::from_runs(p, strategy.name(), policy, cfg.attack.hide_biases, full, &base, attacked))
        })
        .collect::<Result<_>>()?;

    let dataset = &cfg.data.name;
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for r in &reports {
        for (i, (&acc, &adv)) in r.acc_attacked.iter().zip(&r.adv_runs).enumerate() {
            runs.push(RunRow {
                dataset: dataset.clone(),
                p: r.p,
                strategy: r.strategy.clone(),
                policy: r.policy.to_string(),
                biases_hidden: r.biases_hidden,
                run: i,
                acc_attacked: acc,
                acc_baseline: r.acc_baseline,
                adv,
            });
        }
        summary.push(SummaryRow {
            dataset: dataset.clone(),
            p: r.p,
            strategy: r.strategy.clone(),
            policy: r.policy.to_string(),
            biases_hidden: r.biases_hidden,
            runs: r.runs,
            acc_full: r.acc_full,
            acc_baseline: r.acc_baseline,
            adv_mean: r.adv_mean,
            adv_std: r.adv_std,
        });
    }
    let hash = cfg.hash();
    write_csv(&c.out.join("attack_runs.csv"), "attack", &hash, cfg.seed, &runs)?;
    write_csv(&c.out.join("attack_summary.csv"), "attack", &hash, cfg.seed, &summary)?;
    println!("wrote {} runs and {} cells to {}", runs.len(), summary.len(), c.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct TableRow {
    pub preset: String,
    pub plain_mult: f64,
    pub ciph_mult: f64,
    pub rescale: f64,
    pub relinearization: f64,
    pub provenance: String,
}

impl TableRow {
    fn new(preset: Preset, t: &CostTable) -> Self {
        let provenance = match &t.provenance {
            Provenance::PaperDefault { ring_degree, depth } => format!("paper-default(n={ring_degree};depth={depth})"),
            Provenance::Measured { host, .. } => format!("measured({host})"),
        };
        Self {
            preset: preset.name().into(),
            plain_mult: t.plain_mult,
            ciph_mult: t.ciph_mult,
            rescale: t.rescale,
            relinearization: t.relinearization,
            provenance,
        }
    }

    fn table(&self) -> CostTable {
        CostTable {
            plain_mult: self.plain_mult,
            ciph_mult: self.ciph_mult,
            rescale: self.rescale,
            relinearization: self.relinearization,
            provenance: Provenance::Measured {
                host: self.provenance.clone(),
                timestamp: 0,
            },
        }
    }
}

fn table_for(l: &Loaded, preset: Preset) -> Result<CostTable> {
    let params = preset.params();
    match l.config.he.backend {
        BackendChoice::CostModel => {
            CostTable::paper_default(params.ring_degree()).with_context(|| format!("no published cost table for {preset}"))
        }
        BackendChoice::Exact => {
            let backend = ExactBackend::new(&params, l.config.seed)?;
            Ok(calibrate(&backend, l.config.he.repetitions)?)
        }
    }
}

pub fn bench(c: &Common) -> Result<()> {
    let l = load(c)?;
    let presets = match l.config.preset() {
        Some(p) => vec![p],
        None => Preset::ALL.to_vec(),
    };
    // sequential on purpose: concurrent timing would skew the ratios
    let mut rows = Vec::new();
    for p in presets {
        match table_for(&l, p) {
            Ok(t) => rows.push(TableRow::new(p, &t)),
            Err(e) if l.config.he.backend == BackendChoice::CostModel => log::info!("{e}"),
            Err(e) => return Err(e),
        }
    }
    write_csv(&c.out.join("cost_table.csv"), "bench", &l.config.hash(), l.config.seed, &rows)?;
    println!("wrote {} cost tables to {}", rows.len(), c.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct OverheadRow {
    pub layer: String,
    pub preset: String,
    pub mode: String,
    pub p: f64,
    pub factor: f64,
}

pub fn cost(c: &Common, table: Option<&Path>) -> Result<()> {
    let l = load(c)?;
    let cfg = &l.config;
    let external = match table {
        Some(p) => {
            let f = read_csv(p)?;
            let row = f.records.first().with_context(|| format!("{} has no rows", p.display()))?;
            Some(TableRow {
                preset: f.get(row, "preset")?,
                plain_mult: f.number(row, "plain_mult")?,
                ciph_mult: f.number(row, "ciph_mult")?,
                rescale: f.number(row, "rescale")?,
                relinearization: f.number(row, "relinearization")?,
                provenance: f.get(row, "provenance")?,
            })
        }
        None => None,
    };
    let mut cache: HashMap<Preset, CostTable> = HashMap::new();
    let mut rows = Vec::new();
    for layer in &cfg.cost.layers {
        let layout = layer.layout();
        let (preset, t) = match &external {
            Some(r) => (r.preset.clone(), r.table()),
            None => {
                let preset = match cfg.preset() {
                    Some(p) => p,
                    None => smallest_fitting_preset(&layout).with_context(|| format!("{} fits no preset", layer.label()))?,
                };
                layout.validate(preset.params().slot_count())?;
                if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(preset) {
                    e.insert(table_for(&l, preset)?);
                }
                (preset.name().to_string(), cache[&preset].clone())
            }
        };
        let report = overhead_factor(&layout, &cfg.cost.grid, &t, cfg.he.mode, cfg.cost.bias_hidden)?;
        if let Ok(s) = speedup_summary(&report, 0.2, 1.0) {
            println!("{}: speedup from p=1.0 to p=0.2 is {s:.2}", layer.label());
        }
        for (p, factor) in report.grid {
            rows.push(OverheadRow {
                layer: layer.label(),
                preset: preset.clone(),
                mode: format!("{:?}", cfg.he.mode).to_lowercase(),
                p,
                factor,
            });
        }
    }
    write_csv(&c.out.join("overhead.csv"), "cost", &cfg.hash(), cfg.seed, &rows)?;
    println!("wrote {} overhead rows to {}", rows.len(), c.out.display());
    Ok(())
}
