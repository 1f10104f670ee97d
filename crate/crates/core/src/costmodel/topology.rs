//! U-Net topology description and the block walk shared by the FLOPs ledger
//! and the step schedules.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Built-in SD-XL-class backbone (`topologies/sdxl_base.json`).
pub const SDXL_BASE_JSON: &str = include_str!("../../topologies/sdxl_base.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub channels: usize,
    /// Spatial reduction relative to the latent grid (1, 2, 4, ...).
    pub spatial_divisor: usize,
    pub resnet_blocks: usize,
    pub attention_blocks: usize,
    /// Attention layers per attention block; 0 means the stage has no attention.
    pub attention_layers_per_block: usize,
    /// Down-stages end with a stride-2 convolution, up-stages with a 2x upsample
    /// followed by a convolution.
    pub has_sampler: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub text_tokens: usize,
    pub context_width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    /// Latent grid at the topology's native resolution.
    pub base_height: usize,
    pub base_width: usize,
    pub in_channels: usize,
    /// Pixels per latent cell along each side.
    #[serde(default = "default_downscale")]
    pub downscale: usize,
}

fn default_downscale() -> usize {
    8
}

/// Unit the ledger reports in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountUnit {
    /// Two operations per multiply-accumulate.
    #[default]
    Flops,
    /// One per multiply-accumulate, the convention of module-hook profilers.
    Macs,
}

impl CountUnit {
    pub(crate) fn divisor(self) -> u64 {
        match self {
            CountUnit::Flops => 1,
            CountUnit::Macs => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetTopology {
    #[serde(default)]
    pub name: String,
    /// Effective batch per generated image (2 with classifier-free guidance).
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub count_unit: CountUnit,
    pub latent: LatentSpec,
    pub context: ContextSpec,
    pub head_dim: usize,
    pub stages: Vec<StageSpec>,
}

fn default_batch() -> usize {
    2
}

/// What a walked block is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    /// Input convolution, latent channels to the first stage width.
    ConvIn {
        out_channels: usize,
    },
    ConvOut {
        in_channels: usize,
    },
    Resnet {
        in_channels: usize,
        out_channels: usize,
    },
    Attention {
        channels: usize,
        layers: usize,
    },
    /// Stride-2 convolution; `tokens` counts output tokens.
    Downsample {
        channels: usize,
    },
    /// Nearest 2x upsample plus convolution; `tokens` counts output tokens.
    Upsample {
        channels: usize,
    },
}

/// One block of the walk, with its token count at the chosen resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: String,
    /// Index into `stages`, `None` for the input and output convolutions.
    pub stage: Option<usize>,
    pub kind: BlockKind,
    pub tokens: usize,
}

impl UNetTopology {
    pub fn sdxl_base() -> Self {
        let topo: Self = serde_json::from_str(SDXL_BASE_JSON).expect("bundled topology parses");
        topo.validate().expect("bundled topology is valid");
        topo
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let topo: Self = serde_json::from_str(text)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTopology(msg));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        if self.batch == 0 || self.head_dim == 0 {
            return bad("batch and head_dim must be positive".into());
        }
        let l = &self.latent;
        if l.base_height == 0 || l.base_width == 0 || l.in_channels == 0 || l.downscale == 0 {
            return bad("latent dimensions must be positive".into());
        }
        if self.context.text_tokens == 0 || self.context.context_width == 0 {
            return bad("context dimensions must be positive".into());
        }
        // Stages run down*, mid?, up*.
        let mut phase = StageKind::Down;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 {
                return bad(format!("stage {i} has zero channels"));
            }
            if !s.spatial_divisor.is_power_of_two() {
                return bad(format!("stage {i} divisor {} is not a power of two", s.spatial_divisor));
            }
            if s.attention_blocks > 0 && s.attention_layers_per_block == 0 {
                return bad(format!("stage {i} has attention blocks without layers"));
            }
            if s.kind == StageKind::Mid && s.has_sampler {
                return bad("mid stage cannot resample".into());
            }
            let order = |k: StageKind| match k {
                StageKind::Down => 0,
                StageKind::Mid => 1,
                StageKind::Up => 2,
            };
            if order(s.kind) < order(phase) || (s.kind == StageKind::Mid && phase == StageKind::Mid) {
                return bad(format!("stage {i} is out of order (expected down*, mid?, up*)"));
            }
            phase = s.kind;
        }
        let downs = self.stages.iter().filter(|s| s.kind == StageKind::Down).count();
        let ups = self.stages.iter().filter(|s| s.kind == StageKind::Up).count();
        if downs != ups {
            return bad(format!("{downs} down-stages but {ups} up-stages"));
        }
        Ok(())
    }

    /// Stage label used in block identifiers: `down1`, `mid`, `up2`, ...
    pub fn stage_label(&self, index: usize) -> String {
        let kind = self.stages[index].kind;
        let ordinal = self.stages[..=index].iter().filter(|s| s.kind == kind).count();
        match kind {
            StageKind::Down => format!("down{ordinal}"),
            StageKind::Mid => "mid".to_owned(),
            StageKind::Up => format!("up{ordinal}"),
        }
    }

    /// Identifier of attention block `block` of stage `stage`.
    pub fn attention_block_id(&self, stage: usize, block: usize) -> String {
        format!("{}.attn{block}", self.stage_label(stage))
    }

    /// All attention-block identifiers in walk order.
    pub fn attention_block_ids(&self) -> Vec<String> {
        (0..self.stages.len())
            .flat_map(|s| {
                let st = &self.stages[s];
                let n = if st.attention_layers_per_block > 0 {
                    st.attention_blocks
                } else {
                    0
                };
                (0..n).map(move |b| (s, b))
            })
            .map(|(s, b)| self.attention_block_id(s, b))
            .collect()
    }

    /// Attention blocks whose stage sits at `spatial_divisor`.
    pub fn attention_blocks_at_divisor(&self, spatial_divisor: usize) -> Vec<String> {
        self.attention_block_ids()
            .into_iter()
            .filter(|id| {
                (0..self.stages.len()).any(|s| {
                    self.stages[s].spatial_divisor == spatial_divisor
                        && id.starts_with(&format!("{}.", self.stage_label(s)))
                })
            })
            .collect()
    }

    pub fn default_resolution(&self) -> usize {
        self.latent.base_height * self.latent.downscale
    }

    /// Smallest pixel step every resolution must be a multiple of.
    pub fn resolution_step(&self) -> usize {
        let deepest = self
            .stages
            .iter()
            .map(|s| match (s.kind, s.has_sampler) {
                (StageKind::Down, true) => s.spatial_divisor * 2,
                _ => s.spatial_divisor,
            })
            .max()
            .unwrap_or(1);
        deepest * self.latent.downscale
    }

    /// Walk every block at a square `resolution` (pixels per side).
    pub fn walk(&self, resolution: usize) -> Result<Vec<Block>> {
        let step = self.resolution_step();
        if resolution == 0 || !resolution.is_multiple_of(step) {
            return Err(Error::ResolutionIncompatible {
                resolution,
                required: step,
            });
        }
        let side = resolution / self.latent.downscale;
        let tokens_at = |divisor: usize| (side / divisor) * (side / divisor);

        let mut blocks = Vec::new();
        let first = &self.stages[0];
        let mut current = first.channels;
        blocks.push(Block {
            id: "conv_in".into(),
            stage: None,
            kind: BlockKind::ConvIn { out_channels: current },
            tokens: tokens_at(first.spatial_divisor),
        });
        let mut skips = vec![current];

        for (s, stage) in self.stages.iter().enumerate() {
            let label = self.stage_label(s);
            let tokens = tokens_at(stage.spatial_divisor);
            let attn = if stage.attention_layers_per_block > 0 {
                stage.attention_blocks
            } else {
                0
            };
            for i in 0..stage.resnet_blocks.max(attn) {
                if i < stage.resnet_blocks {
                    let skip = if stage.kind == StageKind::Up {
                        skips.pop().unwrap_or(0)
                    } else {
                        0
                    };
                    blocks.push(Block {
                        id: format!("{label}.res{i}"),
                        stage: Some(s),
                        kind: BlockKind::Resnet {
                            in_channels: current + skip,
                            out_channels: stage.channels,
                        },
                        tokens,
                    });
                    current = stage.channels;
                    if stage.kind == StageKind::Down {
                        skips.push(current);
                    }
                }
                if i < attn {
                    blocks.push(Block {
                        id: format!("{label}.attn{i}"),
                        stage: Some(s),
                        kind: BlockKind::Attention {
                            channels: current,
                            layers: stage.attention_layers_per_block,
                        },
                        tokens,
                    });
                }
            }
            if stage.has_sampler {
                match stage.kind {
                    StageKind::Down => {
                        blocks.push(Block {
                            id: format!("{label}.downsample"),
                            stage: Some(s),
                            kind: BlockKind::Downsample { channels: current },
                            tokens: tokens_at(stage.spatial_divisor * 2),
                        });
                        skips.push(current);
                    }
                    StageKind::Up => blocks.push(Block {
                        id: format!("{label}.upsample"),
                        stage: Some(s),
                        kind: BlockKind::Upsample { channels: current },
                        tokens: tokens_at((stage.spatial_divisor / 2).max(1)),
                    }),
                    StageKind::Mid => unreachable!("validated"),
                }
            }
        }
        let last = self.stages.last().expect("validated non-empty");
        blocks.push(Block {
            id: "conv_out".into(),
            stage: None,
            kind: BlockKind::ConvOut { in_channels: current },
            tokens: tokens_at(last.spatial_divisor),
        });
        Ok(blocks)
    }
}
