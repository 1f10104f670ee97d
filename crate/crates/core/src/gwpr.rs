//! Generalized weighted PageRank over attention maps.
//!
//! The attention map is read as the adjacency matrix of a directed graph
//! from Query tokens to Key tokens. Each iteration lets every Query vote
//! for Keys in proportion to its current importance (`s_K = A^T s_Q`), maps
//! Key importance back onto Queries with a [`MapperKind`], and
//! L1-normalizes. For self-attention the mapper is the identity and the
//! procedure reduces to power iteration on `A^T`.

use serde::{Deserialize, Serialize};

use crate::attnmap::{exact_sum_of, AttentionMap, HeadStack, Transposed};
use crate::error::{Error, Result};

/// Which normalization, if any, produced a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    Unnormalized,
}

/// Non-negative per-token importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    values: Vec<f64>,
    norm_kind: NormKind,
}

impl ImportanceScores {
    /// Raw scores; every value must be finite and non-negative.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_scores(&values)?;
        Ok(Self {
            values,
            norm_kind: NormKind::Unnormalized,
        })
    }

    /// Scores scaled to unit L1 mass.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        check_scores(&values)?;
        let values = l1_normalize(values)?;
        Ok(Self {
            values,
            norm_kind: NormKind::L1,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm_kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

fn check_scores(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(index) => Err(Error::NegativeScore {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn l1_normalize(mut values: Vec<f64>) -> Result<Vec<f64>> {
    let mass = exact_sum_of(values.iter().copied());
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::AllZeroScores);
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(values)
}

pub const DEFAULT_CLIP_THRESHOLD: f64 = 0.2;
pub const DEFAULT_POWER_ALPHA: f64 = 5.0;

/// Key-to-Query importance mapping `f(A, s_K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapperKind {
    /// Self-attention: Query and Key tokens coincide, `f(A, s_K) = s_K`.
    #[serde(alias = "self")]
    SelfIdentity,
    /// Dot product with the attention row divided by the row's entropy.
    Entropy,
    /// Sum of Key scores whose attention weight reaches `eta`.
    #[serde(alias = "hardclip")]
    HardClip { eta: f64 },
    /// Sigmoid-weighted sum, `sigmoid(A_ij - eta)`.
    #[serde(alias = "softclip")]
    SoftClip { eta: f64 },
    /// `sum_j (beta * s_K(j))^(alpha * A_ij)`; `beta` defaults to half the Key count.
    Power { alpha: f64, beta: Option<f64> },
}

impl MapperKind {
    pub fn hard_clip() -> Self {
        MapperKind::HardClip {
            eta: DEFAULT_CLIP_THRESHOLD,
        }
    }

    pub fn soft_clip() -> Self {
        MapperKind::SoftClip {
            eta: DEFAULT_CLIP_THRESHOLD,
        }
    }

    pub fn power() -> Self {
        MapperKind::Power {
            alpha: DEFAULT_POWER_ALPHA,
            beta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MapperKind::HardClip { eta } | MapperKind::SoftClip { eta } => {
                if !(eta > 0.0 && eta < 1.0) {
                    return Err(Error::InvalidMapper(format!("eta {eta} outside (0, 1)")));
                }
            }
            MapperKind::Power { alpha, beta } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidMapper(format!("alpha {alpha} must be > 0")));
                }
                if let Some(b) = beta {
                    if !(b > 0.0 && b.is_finite()) {
                        return Err(Error::InvalidMapper(format!("beta {b} must be > 0")));
                    }
                }
            }
            MapperKind::SelfIdentity | MapperKind::Entropy => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwprOptions {
    /// Stop once successive Query scores differ by at most this much (L1).
    pub epsilon: f64,
    pub max_iters: usize,
    /// Lower clamp on the entropy denominator.
    pub entropy_floor: f64,
}

impl Default for GwprOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_iters: 50,
            entropy_floor: 1e-12,
        }
    }
}

impl GwprOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidOptions(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidOptions("max_iters must be >= 1".into()));
        }
        if !(self.entropy_floor > 0.0) {
            return Err(Error::InvalidOptions(format!(
                "entropy_floor {} must be > 0",
                self.entropy_floor
            )));
        }
        Ok(())
    }
}

/// Mapper with everything that depends only on `A` computed once.
enum Prepared {
    Identity,
    /// Per-row reciprocal of the clamped entropy.
    Entropy(Vec<f64>),
    /// Dense `rows x cols` weights applied as a matrix-vector product.
    Weighted(Vec<f64>),
    Power {
        alpha: f64,
        beta: f64,
    },
}

impl Prepared {
    fn new(map: &AttentionMap, kind: MapperKind, opts: &GwprOptions) -> Result<Self> {
        kind.validate()?;
        Ok(match kind {
            MapperKind::SelfIdentity => {
                if !map.is_square() {
                    return Err(Error::DimensionMismatch(format!(
                        "self-attention mapper needs a square map, got {}x{}",
                        map.rows(),
                        map.cols()
                    )));
                }
                Prepared::Identity
            }
            MapperKind::Entropy => Prepared::Entropy(
                (0..map.rows())
                    .map(|i| 1.0 / row_entropy(map.row(i)).max(opts.entropy_floor))
                    .collect(),
            ),
            MapperKind::HardClip { eta } => Prepared::Weighted(
                map.as_slice()
                    .iter()
                    .map(|&a| if a - eta >= 0.0 { 1.0 } else { 0.0 })
                    .collect(),
            ),
            MapperKind::SoftClip { eta } => {
                Prepared::Weighted(map.as_slice().iter().map(|&a| sigmoid(a - eta)).collect())
            }
            MapperKind::Power { alpha, beta } => Prepared::Power {
                alpha,
                beta: beta.unwrap_or(map.cols() as f64 / 2.0),
            },
        })
    }

    fn apply(&self, map: &AttentionMap, key_scores: &[f64]) -> Result<Vec<f64>> {
        let n = map.cols();
        Ok(match self {
            Prepared::Identity => key_scores.to_vec(),
            Prepared::Entropy(inv_entropy) => (0..map.rows())
                .map(|i| dot(map.row(i), key_scores) * inv_entropy[i])
                .collect(),
            Prepared::Weighted(weights) => weights.chunks_exact(n).map(|row| dot(row, key_scores)).collect(),
            Prepared::Power { alpha, beta } => {
                let logs = key_scores
                    .iter()
                    .enumerate()
                    .map(|(index, &s)| {
                        if s < 0.0 {
                            Err(Error::NonPositiveScoreForPower { index, value: s })
                        } else if s == 0.0 {
                            Ok(None)
                        } else {
                            Ok(Some((beta * s).ln()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                (0..map.rows())
                    .map(|i| {
                        exact_sum_of(
                            map.row(i)
                                .iter()
                                .zip(&logs)
                                .map(|(&a, log)| log.map_or(0.0, |l| (alpha * a * l).exp())),
                        )
                    })
                    .collect()
            }
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    exact_sum_of(a.iter().zip(b).map(|(x, y)| x * y))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Shannon entropy (natural log) of one attention row, `0 ln 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    exact_sum_of(row.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()))
}

/// Evaluate `f(A, s_K)` for every Query row. The result is not normalized.
pub fn map_key_to_query(
    map: &AttentionMap,
    key_scores: &[f64],
    kind: MapperKind,
    opts: &GwprOptions,
) -> Result<ImportanceScores> {
    if key_scores.len() != map.cols() {
        return Err(Error::DimensionMismatch(format!(
            "{} key scores for a map with {} keys",
            key_scores.len(),
            map.cols()
        )));
    }
    if let MapperKind::Power { .. } = kind {
        if let Some(index) = key_scores.iter().position(|&s| s < 0.0) {
            return Err(Error::NonPositiveScoreForPower {
                index,
                value: key_scores[index],
            });
        }
    }
    check_scores(key_scores)?;
    let values = Prepared::new(map, kind, opts)?.apply(map, key_scores)?;
    ImportanceScores::new(values)
}

/// Result of one G-WPR run.
#[derive(Debug, Clone, PartialEq)]
pub struct GwprOutcome {
    pub scores: ImportanceScores,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `| |A^T s_Q|_1 - |s_Q|_1 |` seen over all iterations.
    pub max_mass_drift: f64,
}

/// Score Query tokens starting from the uniform distribution.
pub fn gwpr_score(map: &AttentionMap, kind: MapperKind, opts: &GwprOptions) -> Result<GwprOutcome> {
    let m = map.rows();
    gwpr_score_from(map, kind, opts, &vec![1.0 / m as f64; m])
}

/// Score Query tokens starting from `init`, which is L1-normalized first.
pub fn gwpr_score_from(map: &AttentionMap, kind: MapperKind, opts: &GwprOptions, init: &[f64]) -> Result<GwprOutcome> {
    opts.validate()?;
    if init.len() != map.rows() {
        return Err(Error::DimensionMismatch(format!(
            "initial vector of length {} for {} queries",
            init.len(),
            map.rows()
        )));
    }
    check_scores(init)?;
    let mapper = Prepared::new(map, kind, opts)?;
    let transposed = Transposed::new(map);
    // A constant start is exactly uniform whatever its scale.
    let mut query = match init.first() {
        Some(&c) if c > 0.0 && init.iter().all(|&v| v == c) => vec![1.0 / init.len() as f64; init.len()],
        _ => l1_normalize(init.to_vec())?,
    };
    let mut iterations = 0;
    let mut max_mass_drift: f64 = 0.0;
    loop {
        let key = transposed.mul(&query);
        let mass_in = exact_sum_of(query.iter().copied());
        let mass_out = exact_sum_of(key.iter().copied());
        max_mass_drift = max_mass_drift.max((mass_out - mass_in).abs());

        let next = l1_normalize(mapper.apply(map, &key)?)?;
        let distance = exact_sum_of(next.iter().zip(&query).map(|(a, b)| (a - b).abs()));
        query = next;
        iterations += 1;
        let converged = distance <= opts.epsilon;
        if converged || iterations >= opts.max_iters {
            return Ok(GwprOutcome {
                scores: ImportanceScores {
                    values: query,
                    norm_kind: NormKind::L1,
                },
                iterations,
                converged,
                max_mass_drift,
            });
        }
    }
}

/// Elementwise root mean square across heads, before normalization.
pub fn rms_across_heads(per_head: &[ImportanceScores]) -> Result<Vec<f64>> {
    let first = per_head.first().ok_or(Error::EmptyInput)?;
    let len = first.len();
    if let Some(bad) = per_head.iter().find(|s| s.len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            found: bad.len(),
        });
    }
    let heads = per_head.len() as f64;
    Ok((0..len)
        .map(|i| {
            let sq = exact_sum_of(per_head.iter().map(|s| s.values[i] * s.values[i]));
            (sq / heads).sqrt()
        })
        .collect())
}

/// Combine per-head scores by RMS, then L1-normalize.
pub fn aggregate_heads_rms(per_head: &[ImportanceScores]) -> Result<ImportanceScores> {
    ImportanceScores::normalized(rms_across_heads(per_head)?)
}

/// Run G-WPR on every head and aggregate with RMS. A single head is returned
/// as scored.
pub fn score_heads(stack: &HeadStack, kind: MapperKind, opts: &GwprOptions) -> Result<ImportanceScores> {
    if let [only] = stack.heads() {
        return gwpr_score(only, kind, opts).map(|o| o.scores);
    }
    let per_head = stack
        .heads()
        .iter()
        .map(|a| gwpr_score(a, kind, opts).map(|o| o.scores))
        .collect::<Result<Vec<_>>>()?;
    aggregate_heads_rms(&per_head)
}
