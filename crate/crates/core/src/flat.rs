//! Flat-buffer entry points for foreign hosts.
//!
//! Inputs are contiguous `f32` buffers plus an explicit shape, copied into
//! native containers on entry; outputs are freshly allocated. Errors carry a
//! stable name through [`Error::code`].

use serde::{Deserialize, Serialize};

use crate::attnmap::{average_heads, AttentionMap, FeatureMap, HeadStack};
use crate::error::{Error, Result};
use crate::gwpr::{score_heads, GwprOptions, MapperKind};
use crate::pruner::{apply_mask, build_mask, PruneMask};
use crate::recovery::{recover, RecoveryInputs, RecoveryMethod};

/// Bumped whenever a signature or buffer layout below changes.
pub const ABI_VERSION: u32 = 1;

/// `heads` row-major `rows x cols` maps, back to back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapShape {
    pub rows: usize,
    pub cols: usize,
    pub heads: usize,
}

/// Row-major token grid with `channels` values per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn check_len(found: usize, shape: impl std::fmt::Debug, expected: Option<usize>) -> Result<usize> {
    match expected {
        Some(e) if e == found && e > 0 => Ok(e),
        _ => Err(Error::DimensionMismatch(format!(
            "buffer of {found} values does not match shape {shape:?}"
        ))),
    }
}

/// Decode a head stack from `buffer`.
pub fn head_stack(buffer: &[f32], shape: MapShape) -> Result<HeadStack> {
    let per_head = shape.rows.checked_mul(shape.cols);
    check_len(buffer.len(), shape, per_head.and_then(|p| p.checked_mul(shape.heads)))?;
    let per_head = per_head.unwrap_or(0);
    let heads = buffer
        .chunks_exact(per_head)
        .map(|h| AttentionMap::new(shape.rows, shape.cols, h.iter().map(|&v| v as f64).collect()))
        .collect::<Result<Vec<_>>>()?;
    HeadStack::new(heads)
}

/// Decode a complete feature map from `buffer`.
pub fn feature_map(buffer: &[f32], shape: GridShape) -> Result<FeatureMap> {
    let len = shape
        .height
        .checked_mul(shape.width)
        .and_then(|n| n.checked_mul(shape.channels));
    check_len(buffer.len(), shape, len)?;
    FeatureMap::complete(
        shape.height,
        shape.width,
        shape.channels,
        buffer.iter().map(|&v| v as f64).collect(),
    )
}

/// G-WPR scores of the Query tokens, RMS-aggregated over heads.
pub fn score(buffer: &[f32], shape: MapShape, mapper: MapperKind, opts: &GwprOptions) -> Result<Vec<f64>> {
    mapper.validate()?;
    let stack = head_stack(buffer, shape)?;
    Ok(score_heads(&stack, mapper, opts)?.into_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRecoverOutput {
    /// Complete grid after recovery, same layout as the input tokens.
    pub tokens: Vec<f32>,
    pub mask: PruneMask,
}

/// Mask `tokens` by `scores` at `ratio`, prune, and recover with `method`.
///
/// `attention` (head-averaged when it has several heads) is required by
/// similarity copy; `cached` defaults to `tokens` for direct copy.
pub fn prune_recover(
    tokens: &[f32],
    grid: GridShape,
    scores: &[f64],
    ratio: f64,
    attention: Option<(&[f32], MapShape)>,
    cached: Option<&[f32]>,
    method: RecoveryMethod,
) -> Result<PruneRecoverOutput> {
    let map = feature_map(tokens, grid)?;
    if scores.len() != map.grid_len() {
        return Err(Error::LengthMismatch {
            expected: map.grid_len(),
            found: scores.len(),
        });
    }
    let mask = build_mask(scores, ratio)?;
    let avg = attention
        .map(|(buf, shape)| head_stack(buf, shape).map(|s| average_heads(&s)))
        .transpose()?;
    let cached = match cached {
        Some(buf) => feature_map(buf, grid)?,
        None => map.clone(),
    };
    let pruned = apply_mask(&map, &mask)?;
    let inputs = RecoveryInputs {
        attention: avg.as_ref(),
        cached: Some(&cached),
    };
    let full = recover(method, &pruned, &mask, inputs)?;
    Ok(PruneRecoverOutput {
        tokens: full.values().iter().map(|&v| v as f32).collect(),
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_match_known_fixed_point() {
        let shape = MapShape {
            rows: 2,
            cols: 2,
            heads: 1,
        };
        let s = score(
            &[0.8, 0.2, 0.6, 0.4],
            shape,
            MapperKind::SelfIdentity,
            &GwprOptions::default(),
        )
        .unwrap();
        assert!((s[0] - 0.75).abs() < 1e-4 && (s[1] - 0.25).abs() < 1e-4);
        let u = score(
            &[0.25; 16],
            MapShape {
                rows: 4,
                cols: 4,
                heads: 1,
            },
            MapperKind::SelfIdentity,
            &GwprOptions::default(),
        )
        .unwrap();
        assert_eq!(u, vec![0.25; 4]);
    }

    #[test]
    fn malformed_shapes_are_errors() {
        let bad = [
            MapShape {
                rows: 2,
                cols: 2,
                heads: 2,
            },
            MapShape {
                rows: 0,
                cols: 4,
                heads: 1,
            },
            MapShape {
                rows: usize::MAX,
                cols: 2,
                heads: 1,
            },
        ];
        for shape in bad {
            let err = score(&[0.25; 4], shape, MapperKind::SelfIdentity, &GwprOptions::default()).unwrap_err();
            assert_eq!(err.code(), "dimension_mismatch");
        }
    }

    #[test]
    fn zero_ratio_returns_input() {
        let grid = GridShape {
            height: 2,
            width: 2,
            channels: 2,
        };
        let tokens = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let out = prune_recover(
            &tokens,
            grid,
            &[0.1, 0.2, 0.3, 0.4],
            0.0,
            None,
            None,
            RecoveryMethod::ZeroPad,
        )
        .unwrap();
        assert_eq!(out.tokens, tokens);
        let err = prune_recover(
            &tokens,
            grid,
            &[0.1, 0.2, 0.3, 0.4],
            1.0,
            None,
            None,
            RecoveryMethod::ZeroPad,
        )
        .unwrap_err();
        assert_eq!(err.code(), "ratio_out_of_range");
    }
}
