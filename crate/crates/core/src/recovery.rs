//! Rebuild a complete token grid from a pruned one before it reaches a
//! convolution.
//!
//! All four methods pass retained rows through untouched and differ only in
//! what they write at pruned positions:
//!
//! * similarity copy ([`recover_similarity_copy`]): the retained token that
//!   sends the pruned token the most (head-averaged) attention donates its
//!   current value;
//! * zero padding ([`recover_zero_pad`]);
//! * bicubic ([`recover_bicubic`]): zero-fill, 2x area downsample, Catmull-Rom
//!   upsample;
//! * direct copy ([`recover_direct_copy`]): values cached before pruning.

use serde::{Deserialize, Serialize};

use crate::attnmap::{AttentionMap, FeatureMap};
use crate::error::{Error, Result};
use crate::pruner::PruneMask;

/// Recovery strategy, named as on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMethod {
    SimCopy,
    ZeroPad,
    Bicubic,
    DirectCopy,
}

impl RecoveryMethod {
    pub const ALL: [RecoveryMethod; 4] = [
        RecoveryMethod::SimCopy,
        RecoveryMethod::ZeroPad,
        RecoveryMethod::Bicubic,
        RecoveryMethod::DirectCopy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecoveryMethod::SimCopy => "simcopy",
            RecoveryMethod::ZeroPad => "zeropad",
            RecoveryMethod::Bicubic => "bicubic",
            RecoveryMethod::DirectCopy => "directcopy",
        }
    }
}

impl std::str::FromStr for RecoveryMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecoveryMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown recovery method `{s}`")))
    }
}

/// Everything a recovery method might need besides the pruned map.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecoveryInputs<'a> {
    /// Head-averaged self-attention of the scoring layer, before pruning.
    pub attention: Option<&'a AttentionMap>,
    /// The complete map as it was before pruning.
    pub cached: Option<&'a FeatureMap>,
}

/// Dispatch on `method`.
pub fn recover(
    method: RecoveryMethod,
    pruned: &FeatureMap,
    mask: &PruneMask,
    inputs: RecoveryInputs<'_>,
) -> Result<FeatureMap> {
    match method {
        RecoveryMethod::SimCopy => {
            let attn = inputs
                .attention
                .ok_or_else(|| Error::ConfigInvalid("similarity copy needs the averaged attention map".into()))?;
            recover_similarity_copy(pruned, mask, attn)
        }
        RecoveryMethod::ZeroPad => recover_zero_pad(pruned, mask),
        RecoveryMethod::Bicubic => recover_bicubic(pruned, mask),
        RecoveryMethod::DirectCopy => {
            let cached = inputs
                .cached
                .ok_or_else(|| Error::ConfigInvalid("direct copy needs the cached pre-pruning map".into()))?;
            recover_direct_copy(pruned, mask, cached)
        }
    }
}

fn check_pruned(pruned: &FeatureMap, mask: &PruneMask) -> Result<()> {
    let index_map = pruned
        .index_map()
        .ok_or_else(|| Error::DimensionMismatch("recovery expects a pruned feature map".into()))?;
    if pruned.grid_len() != mask.total() {
        return Err(Error::DimensionMismatch(format!(
            "mask over {} tokens, grid has {}",
            mask.total(),
            pruned.grid_len()
        )));
    }
    if index_map != mask.retained() {
        return Err(Error::DimensionMismatch(
            "feature map index map differs from the mask".into(),
        ));
    }
    Ok(())
}

/// Complete grid with retained rows in place and `fill(position)` elsewhere.
fn scatter(pruned: &FeatureMap, mut fill: impl FnMut(usize, &mut [f64])) -> Result<FeatureMap> {
    let c = pruned.channels();
    let mut out = vec![0.0; pruned.grid_len() * c];
    let mut next = pruned.index_map().unwrap_or(&[]).iter().enumerate().peekable();
    for (pos, dst) in out.chunks_exact_mut(c).enumerate() {
        match next.peek() {
            Some(&(row, &p)) if p == pos => {
                dst.copy_from_slice(pruned.row(row));
                next.next();
            }
            _ => fill(pos, dst),
        }
    }
    FeatureMap::complete(pruned.height(), pruned.width(), c, out)
}

pub fn recover_zero_pad(pruned: &FeatureMap, mask: &PruneMask) -> Result<FeatureMap> {
    check_pruned(pruned, mask)?;
    scatter(pruned, |_, _| {})
}

/// Copy, for every pruned token `b`, the retained token `i` with the largest
/// `attention[i][b]`; ties go to the lower grid index. Pruned tokens are never
/// candidates.
pub fn recover_similarity_copy(pruned: &FeatureMap, mask: &PruneMask, attention: &AttentionMap) -> Result<FeatureMap> {
    check_pruned(pruned, mask)?;
    let n = mask.total();
    if attention.rows() != n || attention.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "similarity copy needs a {n}x{n} self-attention map, got {}x{}",
            attention.rows(),
            attention.cols()
        )));
    }
    let retained = mask.retained();
    assert!(!retained.is_empty(), "mask invariant: at least one token is retained");
    scatter(pruned, |b, dst| {
        let mut best_row = 0;
        let mut best = f64::NEG_INFINITY;
        for (row, &i) in retained.iter().enumerate() {
            let a = attention.get(i, b);
            if a > best {
                best = a;
                best_row = row;
            }
        }
        dst.copy_from_slice(pruned.row(best_row));
    })
}

pub fn recover_direct_copy(pruned: &FeatureMap, mask: &PruneMask, cached: &FeatureMap) -> Result<FeatureMap> {
    check_pruned(pruned, mask)?;
    if !cached.is_complete()
        || cached.height() != pruned.height()
        || cached.width() != pruned.width()
        || cached.channels() != pruned.channels()
    {
        return Err(Error::DimensionMismatch(
            "cached map must be complete with the same grid and channels".into(),
        ));
    }
    scatter(pruned, |pos, dst| dst.copy_from_slice(cached.row(pos)))
}

/// Zero-fill, area-average down by 2, Catmull-Rom (`a = -0.5`) up by 2 with
/// half-pixel sample centers and clamped edges, then keep interpolated values
/// only at pruned positions. Channels are processed independently.
pub fn recover_bicubic(pruned: &FeatureMap, mask: &PruneMask) -> Result<FeatureMap> {
    check_pruned(pruned, mask)?;
    let (h, w, c) = (pruned.height(), pruned.width(), pruned.channels());
    if h < 4 || w < 4 {
        return Err(Error::GridTooSmall { height: h, width: w });
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimensions { height: h, width: w });
    }
    let filled = recover_zero_pad(pruned, mask)?;
    let mut smooth = vec![0.0; h * w * c];
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for (p, v) in plane.iter_mut().enumerate() {
            *v = filled.values()[p * c + ch];
        }
        let coarse = area_downsample2(&plane, h, w);
        let up = cubic_upsample2(&coarse, h / 2, w / 2);
        for (p, v) in up.into_iter().enumerate() {
            smooth[p * c + ch] = v;
        }
    }
    scatter(pruned, |pos, dst| dst.copy_from_slice(&smooth[pos * c..(pos + 1) * c]))
}

fn area_downsample2(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![0.0; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
            let sum = plane[r0 + 2 * x] + plane[r0 + 2 * x + 1] + plane[r1 + 2 * x] + plane[r1 + 2 * x + 1];
            out[y * cw + x] = sum / 4.0;
        }
    }
    out
}

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for output index `dst` when doubling a length-`len` axis.
fn taps(dst: usize, len: usize) -> [(usize, f64); 4] {
    let src = (dst as f64 + 0.5) / 2.0 - 0.5;
    let base = src.floor();
    let t = src - base;
    let clamp = |i: f64| i.clamp(0.0, (len - 1) as f64) as usize;
    [
        (clamp(base - 1.0), catmull_rom(1.0 + t)),
        (clamp(base), catmull_rom(t)),
        (clamp(base + 1.0), catmull_rom(1.0 - t)),
        (clamp(base + 2.0), catmull_rom(2.0 - t)),
    ]
}

fn cubic_upsample2(coarse: &[f64], ch: usize, cw: usize) -> Vec<f64> {
    let (h, w) = (2 * ch, 2 * cw);
    // Horizontal pass: ch x w.
    let mut rows = vec![0.0; ch * w];
    for y in 0..ch {
        for x in 0..w {
            rows[y * w + x] = taps(x, cw)
                .iter()
                .map(|&(sx, k)| k * coarse[y * cw + sx])
                .fold(0.0, |acc, v| acc + v);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let ty = taps(y, ch);
        for x in 0..w {
            out[y * w + x] = ty.iter().fold(0.0, |acc, &(sy, k)| acc + k * rows[sy * w + x]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::apply_mask;

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> FeatureMap {
        FeatureMap::complete(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn nothing_pruned_is_identity_for_every_method() {
        let full = grid(4, 4, 3, |i| i as f64 * 0.5 - 3.0);
        let mask = PruneMask::keep_all(16);
        let pruned = apply_mask(&full, &mask).unwrap();
        let attn = AttentionMap::new(16, 16, vec![1.0 / 16.0; 256]).unwrap();
        let inputs = RecoveryInputs {
            attention: Some(&attn),
            cached: Some(&full),
        };
        for m in RecoveryMethod::ALL {
            assert_eq!(recover(m, &pruned, &mask, inputs).unwrap(), full, "{}", m.name());
        }
    }

    #[test]
    fn similarity_copy_picks_the_strongest_sender() {
        // 2x2 grid, retained 0..3, pruned 3.
        let pruned = FeatureMap::pruned(2, 2, 2, vec![10.0, 10.0, 20.0, 20.0, 30.0, 30.0], vec![0, 1, 2]).unwrap();
        let mask = PruneMask::from_parts(4, 0.25, vec![0, 1, 2]).unwrap();
        let attn = AttentionMap::from_rows(&[
            vec![0.6, 0.2, 0.1, 0.1],
            vec![0.2, 0.2, 0.1, 0.5],
            vec![0.3, 0.3, 0.2, 0.2],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let out = recover_similarity_copy(&pruned, &mask, &attn).unwrap();
        assert_eq!(out.row(3), &[20.0, 20.0]);
    }

    #[test]
    fn similarity_copy_ties_go_to_lower_index() {
        let pruned = FeatureMap::pruned(2, 2, 1, vec![1.0, 2.0], vec![1, 3]).unwrap();
        let mask = PruneMask::from_parts(4, 0.5, vec![1, 3]).unwrap();
        let attn = AttentionMap::new(4, 4, vec![0.25; 16]).unwrap();
        let out = recover_similarity_copy(&pruned, &mask, &attn).unwrap();
        assert_eq!(out.values(), &[1.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_pad_and_direct_copy() {
        let pruned = FeatureMap::pruned(2, 2, 1, vec![7.0], vec![0]).unwrap();
        let mask = PruneMask::from_parts(4, 0.75, vec![0]).unwrap();
        assert_eq!(
            recover_zero_pad(&pruned, &mask).unwrap().values(),
            &[7.0, 0.0, 0.0, 0.0]
        );

        let pruned = FeatureMap::pruned(1, 2, 1, vec![5.0], vec![0]).unwrap();
        let mask = PruneMask::from_parts(2, 0.5, vec![0]).unwrap();
        let cached = FeatureMap::complete(1, 2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(
            recover_direct_copy(&pruned, &mask, &cached).unwrap().values(),
            &[5.0, 2.0]
        );
        let wrong = FeatureMap::complete(2, 1, 1, vec![1.0, 2.0]).unwrap();
        assert!(recover_direct_copy(&pruned, &mask, &wrong).is_err());
    }

    #[test]
    fn bicubic_grid_checks() {
        let small = FeatureMap::pruned(2, 2, 1, vec![1.0; 2], vec![0, 1]).unwrap();
        let mask = PruneMask::from_parts(4, 0.5, vec![0, 1]).unwrap();
        assert!(matches!(
            recover_bicubic(&small, &mask),
            Err(Error::GridTooSmall { .. })
        ));
        let odd = FeatureMap::pruned(5, 4, 1, vec![1.0; 10], (0..10).collect()).unwrap();
        let mask = PruneMask::from_parts(20, 0.5, (0..10).collect()).unwrap();
        assert!(matches!(recover_bicubic(&odd, &mask), Err(Error::OddDimensions { .. })));
    }

    #[test]
    fn bicubic_isolated_pruned_token_is_zero() {
        // 12x12 grid, only the left two columns survive.
        let full = grid(12, 12, 1, |_| 3.0);
        let retained: Vec<usize> = (0..144).filter(|p| p % 12 < 2).collect();
        let mask = PruneMask::from_parts(144, 1.0 - 24.0 / 144.0, retained).unwrap();
        let pruned = apply_mask(&full, &mask).unwrap();
        let out = recover_bicubic(&pruned, &mask).unwrap();
        // Column 10 is farther than the kernel reach from any retained token.
        for y in 0..12 {
            assert_eq!(out.row(y * 12 + 10)[0], 0.0);
        }
        assert!(out.row(2)[0] > 0.0);
    }

    #[test]
    fn kernel_partition_of_unity() {
        for t in [0.0, 0.25, 0.5, 0.75] {
            let s = catmull_rom(1.0 + t) + catmull_rom(t) + catmull_rom(1.0 - t) + catmull_rom(2.0 - t);
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(catmull_rom(0.0), 1.0);
        assert_eq!(catmull_rom(1.0), 0.0);
        assert_eq!(catmull_rom(2.5), 0.0);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let pruned = FeatureMap::pruned(2, 2, 1, vec![1.0, 2.0], vec![0, 1]).unwrap();
        let other = PruneMask::from_parts(4, 0.5, vec![0, 2]).unwrap();
        assert!(recover_zero_pad(&pruned, &other).is_err());
        let complete = FeatureMap::complete(2, 2, 1, vec![0.0; 4]).unwrap();
        assert!(recover_zero_pad(&complete, &PruneMask::keep_all(4)).is_err());
        let mask = PruneMask::from_parts(4, 0.5, vec![0, 1]).unwrap();
        let attn = AttentionMap::new(2, 2, vec![0.5; 4]).unwrap();
        assert!(recover_similarity_copy(&pruned, &mask, &attn).is_err());
    }
}
