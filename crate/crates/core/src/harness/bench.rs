//! Side-by-side error of the four recovery methods on fixed fixtures.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{attend, random_features, synth_stack};
use crate::attnmap::{average_heads, squared_error_at, validate_attention, AttentionMap, FeatureMap};
use crate::error::{Error, Result};
use crate::gwpr::{score_heads, GwprOptions, MapperKind};
use crate::pruner::{apply_mask, build_mask, random_mask, PruneMask};
use crate::recovery::{recover, RecoveryInputs, RecoveryMethod};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Grid side; a multiple of 8 so the isolated region stays cell-aligned.
    pub grid: usize,
    pub channels: usize,
    /// Pruning ratio of the duplicate and synthetic fixtures.
    pub ratio: f64,
    pub heads: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            channels: 8,
            ratio: 0.5,
            heads: 4,
            concentration: 4.0,
            seed: 0,
        }
    }
}

/// A complete ground truth plus everything the methods may consult.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub truth: FeatureMap,
    /// Values before the block, for direct copy.
    pub cached: FeatureMap,
    pub attention: AttentionMap,
    pub mask: PruneMask,
}

impl Fixture {
    /// L2 error of `method` over the pruned positions.
    pub fn error(&self, method: RecoveryMethod) -> Result<f64> {
        let pruned = apply_mask(&self.truth, &self.mask)?;
        let inputs = RecoveryInputs {
            attention: Some(&self.attention),
            cached: Some(&self.cached),
        };
        let full = recover(method, &pruned, &self.mask, inputs)?;
        Ok(squared_error_at(&full, &self.truth, &self.mask.pruned()).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub fixture: String,
    pub method: RecoveryMethod,
    pub l2_error: f64,
}

fn perturbed(rng: &mut rng::Rng, base: &FeatureMap, scale: f64) -> Result<FeatureMap> {
    let values = base
        .values()
        .iter()
        .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    FeatureMap::complete(base.height(), base.width(), base.channels(), values)
}

/// Every pruned token is a copy of a retained twin, and the averaged attention
/// of each pruned column peaks at that twin.
pub fn duplicate_fixture(cfg: &BenchConfig) -> Result<Fixture> {
    let mut rng = rng::stream(cfg.seed, &[1]);
    let (g, c) = (cfg.grid, cfg.channels);
    let n = g * g;
    let mask = random_mask(n, cfg.ratio, rng.random())?;
    let retained = mask.retained();
    let mut values: Vec<f64> = (0..n * c).map(|_| rng.sample(StandardNormal)).collect();
    let mut attn: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() * 1e-3 / n as f64).collect();
    for b in mask.pruned() {
        let twin = retained[rng.random_range(0..retained.len())];
        values.copy_within(twin * c..(twin + 1) * c, b * c);
        attn[twin * n + b] += 1.0;
    }
    for i in 0..n {
        attn[i * n + i] += 0.5;
    }
    for row in attn.chunks_exact_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let truth = FeatureMap::complete(g, g, c, values)?;
    let cached = perturbed(&mut rng, &truth, 0.5)?;
    Ok(Fixture {
        name: "duplicate",
        cached,
        attention: validate_attention(n, n, attn)?,
        truth,
        mask,
    })
}

/// Random content with nothing pruned.
pub fn nothing_pruned_fixture(cfg: &BenchConfig) -> Result<Fixture> {
    let mut rng = rng::stream(cfg.seed, &[2]);
    let n = cfg.grid * cfg.grid;
    let attention = average_heads(&synth_stack(&mut rng, n, n, cfg.heads, cfg.concentration)?);
    let cached = random_features(&mut rng, cfg.grid, cfg.channels)?;
    Ok(Fixture {
        name: "nothing_pruned",
        truth: attend(&attention, &cached)?,
        cached,
        attention,
        mask: PruneMask::keep_all(n),
    })
}

/// A salient central square, half the grid on a side, is pruned as a whole
/// while its faint surroundings are kept.
pub fn isolated_region_fixture(cfg: &BenchConfig) -> Result<Fixture> {
    let g = cfg.grid;
    if g < 8 || !g.is_multiple_of(8) {
        return Err(Error::ConfigInvalid(format!(
            "isolated-region fixture needs a grid side divisible by 8, got {g}"
        )));
    }
    let mut rng = rng::stream(cfg.seed, &[3]);
    let n = g * g;
    let inside = |p: usize| {
        let (r, c) = (p / g, p % g);
        (g / 4..3 * g / 4).contains(&r) && (g / 4..3 * g / 4).contains(&c)
    };
    let values = (0..n)
        .flat_map(|p| std::iter::repeat_n(if inside(p) { 1.0 } else { 0.02 }, cfg.channels))
        .map(|scale| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let truth = FeatureMap::complete(g, g, cfg.channels, values)?;
    let retained = (0..n).filter(|&p| !inside(p)).collect();
    let mask = PruneMask::from_parts(n, 0.25, retained)?;
    let attention = average_heads(&synth_stack(&mut rng, n, n, cfg.heads, cfg.concentration)?);
    let cached = perturbed(&mut rng, &truth, 0.5)?;
    Ok(Fixture {
        name: "isolated_region",
        truth,
        cached,
        attention,
        mask,
    })
}

/// Synthetic block output `A X`, pruned by G-WPR scores.
pub fn synthetic_fixture(cfg: &BenchConfig) -> Result<Fixture> {
    let mut rng = rng::stream(cfg.seed, &[4]);
    let n = cfg.grid * cfg.grid;
    let stack = synth_stack(&mut rng, n, n, cfg.heads, cfg.concentration)?;
    let attention = average_heads(&stack);
    let cached = random_features(&mut rng, cfg.grid, cfg.channels)?;
    let scores = score_heads(&stack, MapperKind::SelfIdentity, &GwprOptions::default())?;
    Ok(Fixture {
        name: "synthetic",
        truth: attend(&attention, &cached)?,
        cached,
        mask: build_mask(scores.values(), cfg.ratio)?,
        attention,
    })
}

/// Error of every method on every fixture. Fails when similarity copy loses to
/// zero padding on the duplicate fixture or any method errs with nothing pruned.
pub fn recovery_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.channels == 0 || cfg.heads == 0 {
        return Err(Error::ConfigInvalid("channels and heads must be >= 1".into()));
    }
    let fixtures = [
        duplicate_fixture(cfg)?,
        nothing_pruned_fixture(cfg)?,
        isolated_region_fixture(cfg)?,
        synthetic_fixture(cfg)?,
    ];
    let mut rows = Vec::new();
    for f in &fixtures {
        for method in RecoveryMethod::ALL {
            rows.push(BenchRow {
                fixture: f.name.to_owned(),
                method,
                l2_error: f.error(method)?,
            });
        }
    }
    let err = |fixture: &str, method| {
        rows.iter()
            .find(|r| r.fixture == fixture && r.method == method)
            .map(|r| r.l2_error)
            .unwrap_or(f64::NAN)
    };
    let (sim, zero) = (
        err("duplicate", RecoveryMethod::SimCopy),
        err("duplicate", RecoveryMethod::ZeroPad),
    );
    if !(sim <= zero) {
        return Err(Error::BenchmarkCheck(format!(
            "similarity copy error {sim} exceeds zero padding {zero} on the duplicate fixture"
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.fixture == "nothing_pruned" && r.l2_error != 0.0) {
        return Err(Error::BenchmarkCheck(format!(
            "{} has error {} with nothing pruned",
            r.method.name(),
            r.l2_error
        )));
    }
    Ok(rows)
}

/// `fixture,method,l2_error` with a header line.
pub fn write_metrics_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_table() {
        let cfg = BenchConfig {
            grid: 8,
            seed: 3,
            ..Default::default()
        };
        let rows = recovery_benchmark(&cfg).unwrap();
        assert_eq!(rows.len(), 16);
        let get = |f: &str, m| rows.iter().find(|r| r.fixture == f && r.method == m).unwrap().l2_error;
        assert_eq!(get("duplicate", RecoveryMethod::SimCopy), 0.0);
        assert!(get("duplicate", RecoveryMethod::ZeroPad) > 0.0);
        let (bi, zp) = (
            get("isolated_region", RecoveryMethod::Bicubic),
            get("isolated_region", RecoveryMethod::ZeroPad),
        );
        assert!((bi - zp).abs() < 0.1 * zp, "{bi} vs {zp}");

        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("fixture,method,l2_error\nduplicate,simcopy,0.0\n"),
            "{text}"
        );
    }

    #[test]
    fn grid_must_fit_region() {
        let cfg = BenchConfig {
            grid: 12,
            ..Default::default()
        };
        assert!(matches!(recovery_benchmark(&cfg), Err(Error::ConfigInvalid(_))));
    }
}
