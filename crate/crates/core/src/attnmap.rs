//! Attention-map and feature-map containers.
//!
//! An [`AttentionMap`] is a row-stochastic `m x n` matrix: row `i` holds the
//! softmax weights Query token `i` spreads over the `n` Key tokens. Token
//! grids are stored row-major from the top-left corner.

use crate::error::{Error, Result};

/// Maximum deviation of a row sum from 1 accepted by [`validate_attention`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Row-stochastic attention weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    /// Same as [`validate_attention`].
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        validate_attention(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has {} entries, expected {n}",
                r.len()
            )));
        }
        validate_attention(m, n, rows.concat())
    }

    /// Caller guarantees the stochastic-row contract.
    pub(crate) fn from_parts_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self^T * v`, each entry an order-independent sum of its products.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        Transposed::new(self).mul(v)
    }
}

/// Column-major copy of a map for repeated `A^T v` products.
pub(crate) struct Transposed {
    rows: usize,
    data: Vec<f64>,
    /// Every entry lies in the fixed-point range.
    bounded: bool,
}

impl Transposed {
    pub(crate) fn new(map: &AttentionMap) -> Self {
        let mut data = vec![0.0; map.data.len()];
        for (i, row) in map.data.chunks_exact(map.cols).enumerate() {
            for (j, &a) in row.iter().enumerate() {
                data[j * map.rows + i] = a;
            }
        }
        let bounded = map.rows <= FIXED_MAX_TERMS && data.iter().all(|&a| in_fixed_range(a));
        Self {
            rows: map.rows,
            data,
            bounded,
        }
    }

    pub(crate) fn mul(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let columns = self.data.chunks_exact(self.rows);
        // Products of entries below 2 with weights in [0, 1] stay below 2.
        if self.bounded && v.iter().all(|x| (0.0..=1.0).contains(x)) {
            return columns
                .map(|col| from_fixed(col.iter().zip(v).map(|(a, x)| to_fixed(a * x)).sum()))
                .collect();
        }
        let mut terms = vec![0.0; self.rows];
        columns
            .map(|col| {
                terms.iter_mut().zip(col).zip(v).for_each(|((t, a), x)| *t = a * x);
                exact_sum(&mut terms)
            })
            .collect()
    }
}

/// Fixed-point scale of [`exact_sum`]'s fast path: terms in `[0, 2)` are
/// truncated to multiples of `2^-113`, leaving 14 bits of headroom in a `u128`.
const FIXED_BITS: i32 = 113;
const FIXED_MAX_TERMS: usize = 1 << 14;

fn in_fixed_range(t: f64) -> bool {
    (0.0..2.0).contains(&t)
}

/// `floor(t * 2^FIXED_BITS)` for `t` in `[0, 2)`, without a float-to-u128 cast.
#[inline]
fn to_fixed(t: f64) -> u128 {
    let bits = t.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1 << 52) - 1);
    let (mant, exp) = if exp == 0 { (frac, 1) } else { (frac | 1 << 52, exp) };
    let shift = exp - 1075 + FIXED_BITS;
    if shift >= 0 {
        (mant as u128) << shift
    } else if shift > -64 {
        (mant >> -shift) as u128
    } else {
        0
    }
}

fn from_fixed(acc: u128) -> f64 {
    acc as f64 / 2f64.powi(FIXED_BITS)
}

/// Order-independent sum of `terms`, which may be overwritten.
///
/// Up to `2^14` values in `[0, 2)` (attention products, probabilities) are
/// summed exactly in fixed point after truncating each term to `2^-113`;
/// anything else gets the correctly rounded sum.
pub fn exact_sum(terms: &mut [f64]) -> f64 {
    if terms.len() <= FIXED_MAX_TERMS && terms.iter().all(|&t| in_fixed_range(t)) {
        return from_fixed(terms.iter().map(|&t| to_fixed(t)).sum());
    }
    // +0.0 keeps an all-zero sum from coming out as -0.0.
    accurate::sum::i_fast_sum_in_place(terms) + 0.0
}

/// [`exact_sum`] over an iterator.
pub fn exact_sum_of(terms: impl IntoIterator<Item = f64>) -> f64 {
    exact_sum(&mut terms.into_iter().collect::<Vec<_>>())
}

/// Check the softmax-row contract and renormalize each row.
///
/// Rows whose sum is already 1 to within accumulated rounding are left
/// untouched, which makes validation idempotent.
pub fn validate_attention(rows: usize, cols: usize, mut data: Vec<f64>) -> Result<AttentionMap> {
    if rows == 0 || cols == 0 {
        return Err(Error::DimensionMismatch(format!(
            "attention map must be at least 1x1, got {rows}x{cols}"
        )));
    }
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} entries for a {rows}x{cols} map",
            data.len()
        )));
    }
    for (idx, &v) in data.iter().enumerate() {
        let (row, col) = (idx / cols, idx % cols);
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        if v < 0.0 {
            return Err(Error::NegativeEntry { row, col });
        }
    }
    let rounding = 2.0 * cols as f64 * f64::EPSILON;
    for (row, chunk) in data.chunks_exact_mut(cols).enumerate() {
        let sum: f64 = chunk.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE + rounding {
            return Err(Error::RowSumOutOfTolerance { row, sum });
        }
        if (sum - 1.0).abs() > rounding {
            chunk.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(AttentionMap { rows, cols, data })
}

/// Attention maps of every head of one layer, all with the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStack {
    heads: Vec<AttentionMap>,
}

impl HeadStack {
    pub fn new(heads: Vec<AttentionMap>) -> Result<Self> {
        let first = heads.first().ok_or(Error::EmptyStack)?;
        let (m, n) = (first.rows, first.cols);
        if let Some((h, bad)) = heads.iter().enumerate().find(|(_, a)| a.rows != m || a.cols != n) {
            return Err(Error::DimensionMismatch(format!(
                "head {h} is {}x{}, head 0 is {m}x{n}",
                bad.rows, bad.cols
            )));
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[AttentionMap] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn rows(&self) -> usize {
        self.heads[0].rows
    }

    pub fn cols(&self) -> usize {
        self.heads[0].cols
    }

    pub fn into_heads(self) -> Vec<AttentionMap> {
        self.heads
    }
}

/// Elementwise arithmetic mean across heads.
///
/// Each element is summed in ascending value order so the result does not
/// depend on head order.
pub fn average_heads(stack: &HeadStack) -> AttentionMap {
    let h = stack.head_count();
    let (m, n) = (stack.rows(), stack.cols());
    if h == 1 {
        return stack.heads[0].clone();
    }
    let mut buf = Vec::with_capacity(h);
    let data = (0..m * n)
        .map(|idx| {
            buf.clear();
            buf.extend(stack.heads.iter().map(|a| a.data[idx]));
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / h as f64
        })
        .collect();
    AttentionMap::from_parts_unchecked(m, n, data)
}

/// Population variance over all `m * n` entries (two-pass).
///
/// Deviations are taken around the smallest entry before the mean pass, so a
/// constant map gives exactly 0, and both passes use order-independent sums,
/// so permuting rows or columns leaves the result unchanged.
pub fn map_variance(map: &AttentionMap) -> f64 {
    let count = map.data.len() as f64;
    let pivot = map.data.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = exact_sum_of(map.data.iter().map(|v| v - pivot)) / count;
    exact_sum_of(map.data.iter().map(|v| {
        let d = (v - pivot) - shift;
        d * d
    })) / count
}

/// Whether a feature map holds the full grid or only retained tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layout {
    Complete,
    /// Retained rows with their original grid positions, strictly increasing.
    Pruned {
        index_map: Vec<usize>,
    },
}

/// `height x width` token grid of `channels`-wide vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
    layout: Layout,
}

impl FeatureMap {
    pub fn complete(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidFeatureMap(format!(
                "empty grid {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::InvalidFeatureMap(format!(
                "{} values for a complete {height}x{width}x{channels} grid",
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self {
            height,
            width,
            channels,
            values,
            layout: Layout::Complete,
        })
    }

    pub fn pruned(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
        index_map: Vec<usize>,
    ) -> Result<Self> {
        let total = height * width;
        if total == 0 || channels == 0 {
            return Err(Error::InvalidFeatureMap(format!(
                "empty grid {height}x{width}x{channels}"
            )));
        }
        if index_map.len() > total {
            return Err(Error::InvalidFeatureMap(format!(
                "{} retained rows exceed grid size {total}",
                index_map.len()
            )));
        }
        if index_map.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidFeatureMap("index map is not strictly increasing".into()));
        }
        if index_map.last().is_some_and(|&i| i >= total) {
            return Err(Error::InvalidFeatureMap(format!(
                "index map entry outside grid of {total} tokens"
            )));
        }
        if values.len() != index_map.len() * channels {
            return Err(Error::InvalidFeatureMap(format!(
                "{} values for {} retained rows of width {channels}",
                values.len(),
                index_map.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self {
            height,
            width,
            channels,
            values,
            layout: Layout::Pruned { index_map },
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Token count of the full grid.
    pub fn grid_len(&self) -> usize {
        self.height * self.width
    }

    /// Number of stored rows.
    pub fn row_count(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.layout, Layout::Complete)
    }

    /// Grid positions of the stored rows (`None` when complete).
    pub fn index_map(&self) -> Option<&[usize]> {
        match &self.layout {
            Layout::Complete => None,
            Layout::Pruned { index_map } => Some(index_map),
        }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidFeatureMap(format!("non-finite value at flat index {i}"))),
        None => Ok(()),
    }
}

/// Squared L2 distance between rows `positions` of two complete maps.
pub fn squared_error_at(a: &FeatureMap, b: &FeatureMap, positions: &[usize]) -> f64 {
    positions
        .iter()
        .map(|&p| {
            a.row(p)
                .iter()
                .zip(b.row(p))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .fold(0.0, |acc, e| acc + e)
}
