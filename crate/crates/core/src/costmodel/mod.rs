//! Analytic FLOPs ledger for a U-Net backbone under a pruning schedule.
//!
//! Per-term formulas count two operations per multiply-accumulate with an
//! explicit batch `B`. The topology's [`CountUnit`] decides whether ledger
//! entries keep that convention or report multiply-accumulates.
//!
//! Within a pruned attention block the first attention layer runs on every
//! token and the remaining layers on the retained ones. ResNet and sampler
//! blocks always see the full grid because tokens are recovered before them.

mod solve;
mod topology;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dsap::StepConfig;
use crate::error::{Error, Result};
use crate::pruner::retained_count;

pub use solve::{schedule_average_flops, solve_ratio, BudgetSolution, SOLVER_REL_TOLERANCE};
pub use topology::{
    Block, BlockKind, ContextSpec, CountUnit, LatentSpec, StageKind, StageSpec, UNetTopology, SDXL_BASE_JSON,
};

/// Self-attention score and value products of one attention block:
/// `4 * B * N_a * (HW)^2 * C`.
pub fn calibration_flops(batch: u64, layers: u64, tokens: u64, channels: u64) -> u64 {
    4 * batch * layers * tokens * tokens * channels
}

/// Shape of one attention layer (self-attention, cross-attention, feed-forward).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub channels: u64,
    /// Tokens entering the layer.
    pub tokens: u64,
    /// Tokens reaching the feed-forward sublayer; smaller than `tokens` only on
    /// the pruning layer when pruning is placed before the feed-forward.
    pub ff_tokens: u64,
    pub text_tokens: u64,
    pub context_width: u64,
    pub batch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerFlops {
    pub self_attention: u64,
    pub cross_attention: u64,
    pub feed_forward: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.self_attention + self.cross_attention + self.feed_forward
    }
}

/// FLOPs of one attention layer.
///
/// * self-attention: `8 B N C^2` for the Q/K/V/output projections plus
///   `4 B N^2 C` for the two token-by-token products;
/// * cross-attention: `4 B N C^2` (query and output projections),
///   `4 B T D C` (key/value projections of `T` context tokens of width `D`),
///   `4 B N T C` (the two products);
/// * feed-forward, gated with expansion 4: `24 B N_f C^2`.
pub fn attention_layer_flops(shape: &LayerShape) -> LayerFlops {
    let LayerShape {
        channels: c,
        tokens: n,
        ff_tokens: nf,
        text_tokens: t,
        context_width: d,
        batch: b,
    } = *shape;
    LayerFlops {
        self_attention: 8 * b * n * c * c + 4 * b * n * n * c,
        cross_attention: 4 * b * n * c * c + 4 * b * t * d * c + 4 * b * n * t * c,
        feed_forward: 24 * b * nf * c * c,
    }
}

/// `3x3` convolution over `tokens` output positions.
fn conv3x3(cin: u64, cout: u64, tokens: u64, batch: u64) -> u64 {
    2 * 9 * cin * cout * tokens * batch
}

/// Two `3x3` convolutions plus a `1x1` shortcut when the width changes.
fn resnet_flops(cin: u64, cout: u64, tokens: u64, batch: u64) -> u64 {
    let shortcut = if cin != cout {
        2 * cin * cout * tokens * batch
    } else {
        0
    };
    conv3x3(cin, cout, tokens, batch) + conv3x3(cout, cout, tokens, batch) + shortcut
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SelfAttention,
    CrossAttention,
    FeedForward,
    Projections,
    Resnet,
    Sampler,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::SelfAttention => "self_attention",
            Category::CrossAttention => "cross_attention",
            Category::FeedForward => "feed_forward",
            Category::Projections => "projections",
            Category::Resnet => "resnet",
            Category::Sampler => "sampler",
        }
    }

    /// Everything inside an attention block.
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            Category::SelfAttention | Category::CrossAttention | Category::FeedForward | Category::Projections
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub block_id: String,
    pub category: Category,
    pub flops: u64,
}

/// Per-block costs of one denoising step, in walk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub unit: CountUnit,
    pub entries: Vec<LedgerEntry>,
    /// Tokens each attention block processes after its pruning layer.
    pub retained_tokens: BTreeMap<String, u64>,
}

impl FlopsLedger {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn by_category(&self) -> BTreeMap<Category, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.category).or_insert(0) += e.flops;
        }
        out
    }

    pub fn category_total(&self, category: Category) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.category == category)
            .map(|e| e.flops)
            .sum()
    }

    /// Self-attention, cross-attention, feed-forward and projections.
    pub fn attention_total(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.category.is_attention())
            .map(|e| e.flops)
            .sum()
    }

    pub fn resnet_total(&self) -> u64 {
        self.category_total(Category::Resnet)
    }

    /// `block_id,category,flops` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block_id", "category", "flops"])?;
        for e in &self.entries {
            w.write_record([e.block_id.as_str(), e.category.name(), &e.flops.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<ledger csv>", e))
    }

    /// JSON export: entries plus category and grand totals.
    pub fn to_json(&self) -> serde_json::Value {
        let totals: BTreeMap<&str, u64> = self.by_category().into_iter().map(|(c, v)| (c.name(), v)).collect();
        serde_json::json!({
            "unit": self.unit,
            "total": self.total(),
            "by_category": totals,
            "retained_tokens": self.retained_tokens,
            "entries": self.entries,
        })
    }
}

/// Settings that apply to every step of a costing run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostOptions {
    /// Output image side in pixels.
    pub resolution: usize,
    /// Prune before the feed-forward sublayer of the pruning layer instead of after it.
    #[serde(default)]
    pub prune_before_ff: bool,
}

impl CostOptions {
    pub fn at(resolution: usize) -> Self {
        Self {
            resolution,
            prune_before_ff: false,
        }
    }
}

/// Cost of one denoising step under `step` (ratio plus exempt attention blocks).
pub fn step_flops(topology: &UNetTopology, step: &StepConfig, opts: &CostOptions) -> Result<FlopsLedger> {
    let blocks = topology.walk(opts.resolution)?;
    let known = topology.attention_block_ids();
    if let Some(unknown) = step.exempt.iter().find(|id| !known.contains(id)) {
        return Err(Error::UnknownBlock(unknown.clone()));
    }
    if !(0.0..1.0).contains(&step.ratio) {
        return Err(Error::RatioOutOfRange(step.ratio));
    }
    let b = topology.batch as u64;
    let unit = topology.count_unit;
    let scale = unit.divisor();
    let mut entries = Vec::with_capacity(blocks.len() * 4);
    let mut retained_tokens = BTreeMap::new();
    let mut push = |id: &str, category, flops: u64| {
        debug_assert_eq!(flops % scale, 0);
        entries.push(LedgerEntry {
            block_id: id.to_owned(),
            category,
            flops: flops / scale,
        });
    };

    for block in &blocks {
        let n = block.tokens as u64;
        match block.kind {
            BlockKind::ConvIn { out_channels } => push(
                &block.id,
                Category::Sampler,
                conv3x3(topology.latent.in_channels as u64, out_channels as u64, n, b),
            ),
            BlockKind::ConvOut { in_channels } => push(
                &block.id,
                Category::Sampler,
                conv3x3(in_channels as u64, topology.latent.in_channels as u64, n, b),
            ),
            BlockKind::Downsample { channels } | BlockKind::Upsample { channels } => {
                let c = channels as u64;
                push(&block.id, Category::Sampler, conv3x3(c, c, n, b))
            }
            BlockKind::Resnet {
                in_channels,
                out_channels,
            } => push(
                &block.id,
                Category::Resnet,
                resnet_flops(in_channels as u64, out_channels as u64, n, b),
            ),
            BlockKind::Attention { channels, layers } => {
                let c = channels as u64;
                let exempt = step.exempt.contains(&block.id);
                let k = if exempt {
                    n
                } else {
                    retained_count(block.tokens, step.ratio) as u64
                };
                retained_tokens.insert(block.id.clone(), k);
                let shape = |tokens, ff_tokens| LayerShape {
                    channels: c,
                    tokens,
                    ff_tokens,
                    text_tokens: topology.context.text_tokens as u64,
                    context_width: topology.context.context_width as u64,
                    batch: b,
                };
                let mut sum = LayerFlops::default();
                for layer in 0..layers {
                    let f = if layer == 0 {
                        attention_layer_flops(&shape(n, if opts.prune_before_ff { k } else { n }))
                    } else {
                        attention_layer_flops(&shape(k, k))
                    };
                    sum.self_attention += f.self_attention;
                    sum.cross_attention += f.cross_attention;
                    sum.feed_forward += f.feed_forward;
                }
                push(&block.id, Category::SelfAttention, sum.self_attention);
                push(&block.id, Category::CrossAttention, sum.cross_attention);
                push(&block.id, Category::FeedForward, sum.feed_forward);
                // Input projection on the full grid, output projection on what survives.
                push(&block.id, Category::Projections, 2 * b * n * c * c + 2 * b * k * c * c);
            }
        }
    }
    Ok(FlopsLedger {
        unit,
        entries,
        retained_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_shape(tokens: u64) -> LayerShape {
        LayerShape {
            channels: 1,
            tokens,
            ff_tokens: tokens,
            text_tokens: 1,
            context_width: 1,
            batch: 1,
        }
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibration_flops(0, 10, 1024, 1280), 0);
        assert_eq!(calibration_flops(2, 10, 1024, 1280), 107_374_182_400);
        for (b, l, n, c) in [(1, 1, 3, 5), (2, 10, 64, 7), (3, 2, 1000, 1)] {
            assert_eq!(calibration_flops(b, l, 2 * n, c), 4 * calibration_flops(b, l, n, c));
        }
    }

    #[test]
    fn unit_layer() {
        assert_eq!(attention_layer_flops(&unit_shape(1)).self_attention, 12);
    }

    #[test]
    fn self_attention_products_match_calibration() {
        for (n, c, b) in [(1u64, 1u64, 1u64), (4096, 640, 2), (77, 3, 5)] {
            let shape = LayerShape {
                channels: c,
                tokens: n,
                ff_tokens: n,
                text_tokens: 77,
                context_width: 2048,
                batch: b,
            };
            let f = attention_layer_flops(&shape);
            assert_eq!(f.self_attention - 8 * b * n * c * c, calibration_flops(b, 1, n, c));
        }
    }

    #[test]
    fn halving_tokens_scales_terms() {
        let full = LayerShape {
            channels: 640,
            tokens: 4096,
            ff_tokens: 4096,
            text_tokens: 77,
            context_width: 2048,
            batch: 2,
        };
        let half = LayerShape {
            tokens: 2048,
            ff_tokens: 2048,
            ..full
        };
        let (a, h) = (attention_layer_flops(&full), attention_layer_flops(&half));
        let quad = |s: &LayerShape| 4 * s.batch * s.tokens * s.tokens * s.channels;
        assert_eq!(quad(&full), 4 * quad(&half));
        assert_eq!(a.self_attention - quad(&full), 2 * (h.self_attention - quad(&half)));
        assert_eq!(a.feed_forward, 2 * h.feed_forward);
    }

    #[test]
    fn unknown_exempt_block() {
        let topo = UNetTopology::sdxl_base();
        let step = StepConfig {
            step: 0,
            exempt: vec!["down1.attn0".into()],
            ratio: 0.5,
        };
        assert!(matches!(
            step_flops(&topo, &step, &CostOptions::at(1024)),
            Err(Error::UnknownBlock(_))
        ));
    }

    #[test]
    fn ledger_exports() {
        let topo = UNetTopology::sdxl_base();
        let ledger = step_flops(&topo, &StepConfig::uniform(0, 0.0), &CostOptions::at(512)).unwrap();
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("block_id,category,flops\nconv_in,sampler,"));
        assert_eq!(text.lines().count(), ledger.entries.len() + 1);
        let json = ledger.to_json();
        assert_eq!(json["total"].as_u64().unwrap(), ledger.total());
        assert_eq!(json["unit"], "macs");
    }

    #[test]
    fn flops_unit_doubles_macs() {
        let mut topo = UNetTopology::sdxl_base();
        let step = StepConfig::uniform(0, 0.3);
        let macs = step_flops(&topo, &step, &CostOptions::at(1024)).unwrap().total();
        topo.count_unit = CountUnit::Flops;
        let flops = step_flops(&topo, &step, &CostOptions::at(1024)).unwrap().total();
        assert_eq!(flops, 2 * macs);
    }
}
