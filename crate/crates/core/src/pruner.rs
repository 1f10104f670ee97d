//! Top-k pruning masks, mask application, and the random-drop baseline.

use serde::{Deserialize, Serialize};

use crate::attnmap::FeatureMap;
use crate::error::{Error, Result};
use crate::rng;

/// Retained token indices over a grid of `total` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct PruneMask {
    total: usize,
    ratio: f64,
    retained: Vec<usize>,
}

#[derive(Deserialize)]
struct RawMask {
    total: usize,
    ratio: f64,
    retained: Vec<usize>,
}

impl TryFrom<RawMask> for PruneMask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        PruneMask::from_parts(raw.total, raw.ratio, raw.retained)
    }
}

impl PruneMask {
    /// Rebuild a mask, checking every invariant including the retained count.
    pub fn from_parts(total: usize, ratio: f64, retained: Vec<usize>) -> Result<Self> {
        check_ratio(ratio)?;
        if total == 0 {
            return Err(Error::EmptyRetainedSet);
        }
        let k = retained_count(total, ratio);
        if retained.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} retained indices, ratio {ratio} over {total} tokens implies {k}",
                retained.len()
            )));
        }
        if retained.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DimensionMismatch(
                "retained indices are not strictly increasing".into(),
            ));
        }
        if retained.last().is_some_and(|&i| i >= total) {
            return Err(Error::DimensionMismatch(format!(
                "retained index outside {total} tokens"
            )));
        }
        Ok(Self { total, ratio, retained })
    }

    /// Keep every token.
    pub fn keep_all(total: usize) -> Self {
        Self {
            total,
            ratio: 0.0,
            retained: (0..total).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// Pruned positions in ascending order.
    pub fn pruned(&self) -> Vec<usize> {
        let mut keep = self.retained.iter().peekable();
        (0..self.total)
            .filter(|i| {
                if keep.peek() == Some(&i) {
                    keep.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    /// `retained_flags()[p]` is true when grid position `p` survives.
    pub fn retained_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.total];
        self.retained.iter().for_each(|&i| flags[i] = true);
        flags
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::RatioOutOfRange(ratio))
    }
}

/// Tokens kept at pruning ratio `ratio`: `max(1, ceil((1 - ratio) * total))`.
///
/// Products within `1e-9` of an integer snap to it, so `0.3 * 10` keeps 3
/// tokens rather than 4 despite `1 - 0.7` rounding up.
pub fn retained_count(total: usize, ratio: f64) -> usize {
    let exact = (1.0 - ratio) * total as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    (k as usize).clamp(1, total.max(1))
}

/// Keep the `retained_count` highest scores; ties go to the lower index.
pub fn build_mask(scores: &[f64], ratio: f64) -> Result<PruneMask> {
    check_ratio(ratio)?;
    if scores.is_empty() {
        return Err(Error::EmptyRetainedSet);
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NegativeScore {
            index: i,
            value: scores[i],
        });
    }
    let k = retained_count(scores.len(), ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < order.len() {
        order.select_nth_unstable_by(k, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    Ok(PruneMask {
        total: scores.len(),
        ratio,
        retained: order,
    })
}

/// Uniformly random `retained_count`-subset drawn from [`rng::seeded`].
pub fn random_mask(total: usize, ratio: f64, seed: u64) -> Result<PruneMask> {
    check_ratio(ratio)?;
    if total == 0 {
        return Err(Error::EmptyRetainedSet);
    }
    let k = retained_count(total, ratio);
    let mut retained = if k == total {
        (0..total).collect()
    } else {
        let mut rng = rng::seeded(seed);
        rand::seq::index::sample(&mut rng, total, k).into_vec()
    };
    retained.sort_unstable();
    Ok(PruneMask { total, ratio, retained })
}

/// Keep only the retained rows, in grid order.
pub fn apply_mask(map: &FeatureMap, mask: &PruneMask) -> Result<FeatureMap> {
    if !map.is_complete() {
        return Err(Error::DimensionMismatch(
            "mask can only be applied to a complete feature map".into(),
        ));
    }
    if mask.total != map.grid_len() {
        return Err(Error::DimensionMismatch(format!(
            "mask over {} tokens, feature map has {}",
            mask.total,
            map.grid_len()
        )));
    }
    let values = mask.retained.iter().flat_map(|&i| map.row(i).iter().copied()).collect();
    FeatureMap::pruned(map.height(), map.width(), map.channels(), values, mask.retained.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(build_mask(&[0.4, 0.3, 0.2, 0.1], 0.5).unwrap().retained(), &[0, 1]);
        assert_eq!(build_mask(&[0.9, 0.5, 0.5, 0.1], 0.5).unwrap().retained(), &[0, 1]);
        assert_eq!(build_mask(&[0.1, 0.5, 0.9, 0.5], 0.5).unwrap().retained(), &[1, 2]);
        assert_eq!(retained_count(4096, 0.63), 1516);
        assert_eq!(retained_count(10, 0.7), 3);
        assert_eq!(retained_count(5, 0.99), 1);
        assert_eq!(retained_count(7, 0.0), 7);
    }

    #[test]
    fn ratio_range() {
        for bad in [-0.1, 1.0, f64::NAN] {
            assert!(matches!(build_mask(&[1.0], bad), Err(Error::RatioOutOfRange(_))));
            assert!(matches!(random_mask(4, bad, 0), Err(Error::RatioOutOfRange(_))));
        }
    }

    #[test]
    fn apply_selects_rows() {
        let map = FeatureMap::complete(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = PruneMask::from_parts(4, 0.5, vec![0, 2]).unwrap();
        let out = apply_mask(&map, &mask).unwrap();
        assert_eq!(out.values(), &[1.0, 3.0]);
        assert_eq!(out.index_map(), Some(&[0usize, 2][..]));

        let all = apply_mask(&map, &PruneMask::keep_all(4)).unwrap();
        assert_eq!(all.values(), map.values());
        assert_eq!(all.index_map(), Some(&[0usize, 1, 2, 3][..]));

        assert!(apply_mask(&map, &PruneMask::keep_all(5)).is_err());
        assert!(apply_mask(&out, &mask).is_err());
    }

    #[test]
    fn random_masks() {
        assert_eq!(random_mask(9, 0.0, 123).unwrap().retained(), (0..9).collect::<Vec<_>>());
        let a = random_mask(100, 0.63, 5).unwrap();
        assert_eq!(a, random_mask(100, 0.63, 5).unwrap());
        assert_eq!(a.retained().len(), 37);
        assert!(a.retained().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mask_json_is_validated() {
        let m = build_mask(&[0.4, 0.3, 0.2, 0.1], 0.5).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"total":4,"ratio":0.5,"retained":[0,1]}"#);
        assert_eq!(serde_json::from_str::<PruneMask>(&json).unwrap(), m);
        assert!(serde_json::from_str::<PruneMask>(r#"{"total":4,"ratio":0.5,"retained":[1,0]}"#).is_err());
        assert!(serde_json::from_str::<PruneMask>(r#"{"total":4,"ratio":0.5,"retained":[0]}"#).is_err());
    }

    #[test]
    fn pruned_complements_retained() {
        let m = PruneMask::from_parts(6, 0.5, vec![1, 4, 5]).unwrap();
        assert_eq!(m.pruned(), vec![0, 2, 3]);
    }
}
