//! Synthetic attention, the end-to-end step simulation, and the recovery
//! benchmark.
//!
//! The simulation stands in for a denoiser: for every step and attention
//! block it draws attention heads, forms the block output `Y = mean(A) X` from
//! random inputs `X`, and pushes `Y` through score, mask, prune and recover.
//! The recovery error is measured against the unpruned `Y` at the pruned
//! positions only. Attention blocks run on a small proxy grid; the FLOPs
//! columns come from the cost model at the configured resolution.

pub mod bench;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnmap::{average_heads, map_variance, squared_error_at, AttentionMap, FeatureMap, HeadStack};
use crate::costmodel::{schedule_average_flops, solve_ratio, step_flops, CostOptions, UNetTopology};
use crate::dsap::{build_schedule, ScheduleOptions, StepConfig};
use crate::error::{Error, Result};
use crate::gwpr::{score_heads, GwprOptions, MapperKind};
use crate::pruner::{apply_mask, build_mask};
use crate::recovery::{recover, RecoveryInputs, RecoveryMethod};
use crate::rng::{self, Rng};

pub use bench::{recovery_benchmark, write_metrics_csv, BenchConfig, BenchRow, Fixture};

/// `heads` maps of `rows x cols` whose rows are `softmax(concentration * g)`,
/// `g` standard normal.
pub fn synth_stack(rng: &mut Rng, rows: usize, cols: usize, heads: usize, concentration: f64) -> Result<HeadStack> {
    if rows == 0 || cols == 0 || heads == 0 {
        return Err(Error::ConfigInvalid(format!(
            "cannot synthesize {heads} heads of {rows}x{cols}"
        )));
    }
    if !(concentration >= 0.0 && concentration.is_finite()) {
        return Err(Error::ConfigInvalid(format!(
            "concentration {concentration} must be >= 0"
        )));
    }
    let mut maps = Vec::with_capacity(heads);
    for _ in 0..heads {
        let mut data = Vec::with_capacity(rows * cols);
        let mut logits = vec![0.0f64; cols];
        for _ in 0..rows {
            for l in logits.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *l = concentration * g;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        maps.push(AttentionMap::new(rows, cols, data)?);
    }
    HeadStack::new(maps)
}

/// Self-attention heads over `n` tokens.
pub fn synth_attention(n: usize, heads: usize, concentration: f64, seed: u64) -> Result<HeadStack> {
    synth_stack(&mut rng::seeded(seed), n, n, heads, concentration)
}

/// Cross-attention heads from `queries` image tokens to `keys` prompt tokens.
pub fn synth_cross_attention(
    queries: usize,
    keys: usize,
    heads: usize,
    concentration: f64,
    seed: u64,
) -> Result<HeadStack> {
    synth_stack(&mut rng::seeded(seed), queries, keys, heads, concentration)
}

/// `rows x channels` standard-normal feature map on a `side x side` grid.
pub(crate) fn random_features(rng: &mut Rng, side: usize, channels: usize) -> Result<FeatureMap> {
    let values = (0..side * side * channels)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    FeatureMap::complete(side, side, channels, values)
}

/// `A X` for a complete map `X`.
pub(crate) fn attend(a: &AttentionMap, x: &FeatureMap) -> Result<FeatureMap> {
    let (n, c) = (x.grid_len(), x.channels());
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &mut out[i * c..(i + 1) * c];
        for (j, &w) in a.row(i).iter().enumerate() {
            if w != 0.0 {
                row.iter_mut().zip(x.row(j)).for_each(|(o, v)| *o += w * v);
            }
        }
    }
    FeatureMap::complete(x.height(), x.width(), c, out)
}

/// Attention sharpness per step: a constant, or a linear ramp from the first
/// to the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Concentration {
    Constant(f64),
    Ramp { start: f64, end: f64 },
}

impl Concentration {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            Concentration::Constant(c) => c,
            Concentration::Ramp { start, end } => {
                if total_steps <= 1 {
                    start
                } else {
                    start + (end - start) * step as f64 / (total_steps - 1) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Proxy grid side of the shallowest attention level; deeper levels shrink
    /// with their spatial divisor.
    pub grid: usize,
    pub heads: usize,
    pub concentration: Concentration,
    pub channels: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            heads: 4,
            concentration: Concentration::Constant(4.0),
            channels: 8,
        }
    }
}

fn default_mapper() -> MapperKind {
    MapperKind::SelfIdentity
}

fn default_recovery() -> RecoveryMethod {
    RecoveryMethod::SimCopy
}

fn default_parallel() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Topology file; the bundled SD-XL-class backbone when absent.
    #[serde(default)]
    pub topology: Option<PathBuf>,
    /// Image side in pixels; the topology's native resolution when absent.
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default)]
    pub schedule: ScheduleOptions,
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default)]
    pub target_flops: Option<f64>,
    #[serde(default = "default_mapper")]
    pub mapper: MapperKind,
    #[serde(default)]
    pub gwpr: GwprOptions,
    #[serde(default = "default_recovery")]
    pub recovery: RecoveryMethod,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    pub seed: u64,
    #[serde(default)]
    pub prune_before_ff: bool,
    /// Put the elapsed time into the report (which then differs run to run).
    #[serde(default)]
    pub record_wall_time: bool,
    /// Simulate steps on the rayon pool; results do not depend on it.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

impl SimulationConfig {
    /// Minimal configuration: default schedule, the given ratio and seed.
    pub fn with_ratio(ratio: f64, seed: u64) -> Self {
        Self {
            topology: None,
            resolution: None,
            schedule: ScheduleOptions::default(),
            ratio: Some(ratio),
            target_flops: None,
            mapper: default_mapper(),
            gwpr: GwprOptions::default(),
            recovery: default_recovery(),
            synthesis: SynthesisConfig::default(),
            seed,
            prune_before_ff: false,
            record_wall_time: false,
            parallel: true,
        }
    }

    pub fn with_target(target_flops: f64, seed: u64) -> Self {
        Self {
            ratio: None,
            target_flops: Some(target_flops),
            ..Self::with_ratio(0.0, seed)
        }
    }

    /// Parse a JSON file; a relative topology path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let (Some(topo), Some(dir)) = (&cfg.topology, path.parent()) {
            if topo.is_relative() {
                cfg.topology = Some(dir.join(topo));
            }
        }
        Ok(cfg)
    }

    pub fn load_topology(&self) -> Result<UNetTopology> {
        match &self.topology {
            Some(p) => UNetTopology::load(p),
            None => Ok(UNetTopology::sdxl_base()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.ratio, self.target_flops) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::ConfigInvalid(
                    "set exactly one of `ratio` and `target_flops`".into(),
                ))
            }
            (Some(r), None) if !(0.0..1.0).contains(&r) => return Err(Error::RatioOutOfRange(r)),
            _ => {}
        }
        let s = &self.synthesis;
        if s.grid == 0 || s.heads == 0 || s.channels == 0 {
            return Err(Error::ConfigInvalid(
                "synthesis grid, heads and channels must be >= 1".into(),
            ));
        }
        self.mapper.validate()?;
        self.gwpr.validate()
    }
}

/// One denoising step of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub exempt: Vec<String>,
    /// Tokens each attention block keeps at the configured resolution.
    pub retained: BTreeMap<String, u64>,
    pub flops: u64,
    /// Mean over attention blocks of the head-averaged map variance.
    pub variance: f64,
    /// L2 distance to the unpruned block outputs over all pruned proxy tokens.
    pub recovery_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub topology: String,
    pub resolution: usize,
    pub ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_flops: Option<f64>,
    pub full_flops: f64,
    pub average_flops: f64,
    /// `1 - average_flops / full_flops`.
    pub saving: f64,
    pub steps: Vec<StepRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl SimulationReport {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn variances(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.variance).collect()
    }
}

struct ProxyBlock {
    id: String,
    side: usize,
}

fn proxy_blocks(topology: &UNetTopology, grid: usize) -> Result<Vec<ProxyBlock>> {
    let with_attention = || {
        topology
            .stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.attention_layers_per_block > 0 && s.attention_blocks > 0)
    };
    let Some(finest) = with_attention().map(|(_, s)| s.spatial_divisor).min() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (s, stage) in with_attention() {
        let shrink = stage.spatial_divisor / finest;
        if !grid.is_multiple_of(shrink) {
            return Err(Error::ConfigInvalid(format!(
                "proxy grid {grid} does not divide by {shrink} for stage {}",
                topology.stage_label(s)
            )));
        }
        for b in 0..stage.attention_blocks {
            out.push(ProxyBlock {
                id: topology.attention_block_id(s, b),
                side: grid / shrink,
            });
        }
    }
    Ok(out)
}

struct StepOutcome {
    variance: f64,
    squared_error: f64,
}

fn simulate_step(
    cfg: &SimulationConfig,
    blocks: &[ProxyBlock],
    step: &StepConfig,
    total_steps: usize,
) -> Result<StepOutcome> {
    let syn = &cfg.synthesis;
    let concentration = syn.concentration.at(step.step, total_steps);
    let mut variance = 0.0;
    let mut squared_error = 0.0;
    for (b, block) in blocks.iter().enumerate() {
        let mut rng = rng::stream(cfg.seed, &[step.step as u64, b as u64]);
        let n = block.side * block.side;
        let stack = synth_stack(&mut rng, n, n, syn.heads, concentration)?;
        let avg = average_heads(&stack);
        variance += map_variance(&avg);
        if step.ratio == 0.0 || step.exempt.contains(&block.id) {
            continue;
        }
        let x = random_features(&mut rng, block.side, syn.channels)?;
        let y = attend(&avg, &x)?;
        let scores = score_heads(&stack, cfg.mapper, &cfg.gwpr)?;
        let mask = build_mask(scores.values(), step.ratio)?;
        let pruned = apply_mask(&y, &mask)?;
        let inputs = RecoveryInputs {
            attention: Some(&avg),
            cached: Some(&x),
        };
        let full = recover(cfg.recovery, &pruned, &mask, inputs)?;
        squared_error += squared_error_at(&full, &y, &mask.pruned());
    }
    if !blocks.is_empty() {
        variance /= blocks.len() as f64;
    }
    Ok(StepOutcome {
        variance,
        squared_error,
    })
}

/// Run every step of the configured schedule.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationReport> {
    let started = Instant::now();
    cfg.validate()?;
    let topology = cfg.load_topology()?;
    let resolution = cfg.resolution.unwrap_or_else(|| topology.default_resolution());
    let cost = CostOptions {
        resolution,
        prune_before_ff: cfg.prune_before_ff,
    };
    let ratio = match (cfg.ratio, cfg.target_flops) {
        (Some(r), _) => r,
        (None, Some(t)) => solve_ratio(&topology, &cfg.schedule, t, &cost)?.ratio,
        (None, None) => unreachable!("validated"),
    };
    let schedule = build_schedule(&cfg.schedule, &topology, ratio)?;
    let full = build_schedule(&ScheduleOptions::without_dsap(cfg.schedule.total_steps), &topology, 0.0)?;
    let full_flops = schedule_average_flops(&topology, &full, &cost)?;

    let blocks = proxy_blocks(&topology, cfg.synthesis.grid)?;
    if cfg.recovery == RecoveryMethod::Bicubic {
        if let Some(b) = blocks.iter().find(|b| b.side < 4 || b.side % 2 != 0) {
            return Err(Error::ConfigInvalid(format!(
                "bicubic recovery needs even proxy grids >= 4, block {} has {}",
                b.id, b.side
            )));
        }
    }

    let mut ledgers = HashMap::new();
    for cfg_step in &schedule.per_step {
        if !ledgers.contains_key(&cfg_step.exempt) {
            ledgers.insert(cfg_step.exempt.clone(), step_flops(&topology, cfg_step, &cost)?);
        }
    }

    let run = |s: &StepConfig| simulate_step(cfg, &blocks, s, schedule.total_steps);
    let outcomes: Vec<StepOutcome> = if cfg.parallel {
        schedule.per_step.par_iter().map(run).collect::<Result<_>>()?
    } else {
        schedule.per_step.iter().map(run).collect::<Result<_>>()?
    };

    let steps: Vec<StepRecord> = schedule
        .per_step
        .iter()
        .zip(outcomes)
        .map(|(s, o)| {
            let ledger = &ledgers[&s.exempt];
            StepRecord {
                step: s.step,
                exempt: s.exempt.clone(),
                retained: ledger.retained_tokens.clone(),
                flops: ledger.total(),
                variance: o.variance,
                recovery_error: o.squared_error.sqrt(),
            }
        })
        .collect();
    let sum: u128 = steps.iter().map(|s| s.flops as u128).sum();
    let average_flops = sum as f64 / steps.len() as f64;

    Ok(SimulationReport {
        topology: topology.name.clone(),
        resolution,
        ratio,
        target_flops: cfg.target_flops,
        full_flops,
        average_flops,
        saving: 1.0 - average_flops / full_flops,
        steps,
        wall_time_s: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_concentration_is_uniform() {
        let s = synth_attention(7, 3, 0.0, 1).unwrap();
        for h in s.heads() {
            assert!(h.as_slice().iter().all(|&v| v == 1.0 / 7.0));
            assert_eq!(map_variance(h), 0.0);
        }
    }

    #[test]
    fn synthesis_is_seeded() {
        assert_eq!(
            synth_attention(16, 2, 3.0, 9).unwrap(),
            synth_attention(16, 2, 3.0, 9).unwrap()
        );
        assert_ne!(
            synth_attention(16, 2, 3.0, 9).unwrap(),
            synth_attention(16, 2, 3.0, 10).unwrap()
        );
        let cross = synth_cross_attention(16, 77, 2, 1.0, 3).unwrap();
        assert_eq!((cross.rows(), cross.cols()), (16, 77));
    }

    #[test]
    fn ramp() {
        let r = Concentration::Ramp { start: 0.0, end: 10.0 };
        assert_eq!(r.at(0, 11), 0.0);
        assert_eq!(r.at(10, 11), 10.0);
        assert_eq!(r.at(5, 11), 5.0);
        let c: Concentration = serde_json::from_str("2.5").unwrap();
        assert_eq!(c, Concentration::Constant(2.5));
        let c: Concentration = serde_json::from_str(r#"{"start":1,"end":2}"#).unwrap();
        assert_eq!(c, Concentration::Ramp { start: 1.0, end: 2.0 });
    }

    #[test]
    fn exactly_one_budget() {
        let mut cfg = SimulationConfig::with_ratio(0.5, 1);
        cfg.target_flops = Some(4e12);
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
        cfg.ratio = None;
        cfg.target_flops = None;
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
        assert!(serde_json::from_str::<SimulationConfig>(r#"{"ratio":0.5}"#).is_err());
    }

    #[test]
    fn attend_is_matrix_product() {
        let a = AttentionMap::new(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let x = FeatureMap::complete(1, 2, 1, vec![2.0, 4.0]).unwrap();
        assert_eq!(attend(&a, &x).unwrap().values(), &[3.0, 2.0]);
    }

    #[test]
    fn proxy_grid_follows_levels() {
        let topo = UNetTopology::sdxl_base();
        let blocks = proxy_blocks(&topo, 8).unwrap();
        assert_eq!(blocks.len(), 11);
        assert_eq!(blocks[0].side, 8);
        assert_eq!(blocks.iter().find(|b| b.id == "mid.attn0").unwrap().side, 4);
        assert!(proxy_blocks(&topo, 5).is_err());
    }
}
