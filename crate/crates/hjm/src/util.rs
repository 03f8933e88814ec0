//! Small numeric utilities shared across the crate.
//!
//! Everything here is deliberately boring: stable scalar transforms
//! (`expit`, `log1p_exp`), deterministic reductions, a tiny row-major matrix,
//! quantiles with the common linear-interpolation convention, and seeded RNG
//! streams. Model-specific math lives in the model modules.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Logistic function `1 / (1 + exp(-x))`, stable for large `|x|`.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` (softplus) without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 33.0 {
        // exp(-x) underflows the addition below machine precision
        x
    } else if x < -33.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(expit(x))`, i.e. `-log(1 + exp(-x))`.
#[inline]
pub fn log_expit(x: f64) -> f64 {
    -log1p_exp(-x)
}

/// Logit function, inverse of [`expit`].
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `log(sum(exp(x)))` over a slice, guarding against overflow.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// `log(exp(a) + exp(b))` for two scalars.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Natural log of the gamma function.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Digamma function (derivative of [`ln_gamma`]).
#[inline]
pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// Natural log of the Beta function `B(a, b)`.
#[inline]
pub fn ln_beta(a: f64, b: f64) -> f64 {
    statrs::function::beta::ln_beta(a, b)
}

/// Sums a buffer with a fixed pairwise combination tree and leaves the total
/// in `xs[0]` (the rest of the buffer is clobbered). At each level, element
/// `i` absorbs element `i + gap` for `i` a multiple of `2 * gap`. The order
/// of operations depends only on the length, never on how the values were
/// produced, so parallel producers still yield bit-identical totals.
pub fn tree_sum_in_place(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let mut gap = 1;
    while gap < n {
        let mut i = 0;
        while i + gap < n {
            xs[i] += xs[i + gap];
            i += 2 * gap;
        }
        gap *= 2;
    }
    xs[0]
}

/// Non-destructive [`tree_sum_in_place`].
pub fn tree_sum(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    tree_sum_in_place(&mut v)
}

/// Column-wise pairwise tree reduction over the first `n_rows` rows of a
/// row-major buffer; totals land in row 0. Uses the same combination tree as
/// [`tree_sum_in_place`], applied independently to every column.
pub fn tree_reduce_rows(buf: &mut [f64], n_rows: usize, width: usize) {
    if n_rows == 0 || width == 0 {
        return;
    }
    let mut gap = 1;
    while gap < n_rows {
        let mut i = 0;
        while i + gap < n_rows {
            let (head, tail) = buf.split_at_mut((i + gap) * width);
            let dst = &mut head[i * width..i * width + width];
            for k in 0..width {
                dst[k] += tail[k];
            }
            i += 2 * gap;
        }
        gap *= 2;
    }
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::ContinuousCDF;
    let n = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    n.inverse_cdf(p)
}

/// Sample mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" convention). `p` must lie in `[0, 1]` and `xs` must
/// be non-empty; the input need not be sorted.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level outside [0,1]");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN quantile input"));
    quantile_sorted(&v, p)
}

/// [`quantile`] on an already-sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = h - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Dense row-major matrix of `f64`, just enough for draw storage and
/// small covariance work.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    /// Zero-filled matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Immutable view of one row.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Mutable view of one row.
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Copy of column `c`.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Deterministic RNG stream: every consumer derives its generator from the
/// run seed plus a purpose/index pair, so results do not depend on thread
/// scheduling or on how many draws other components consume.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable stream identifiers for [`stream_rng`]. Grouping them here keeps
/// collisions impossible by construction.
pub mod streams {
    /// Sampler chain `c` uses stream `CHAIN_BASE + c`.
    pub const CHAIN_BASE: u64 = 0x10_000;
    /// Simulated subject `i` uses stream `SIM_SUBJECT_BASE + i`.
    pub const SIM_SUBJECT_BASE: u64 = 0x20_0000;
    /// Conditional random-effects sampler: subject `i`, parameter draw `j`
    /// uses stream `PREDICT_SUBJECT_BASE + (i << 16) + j`, with `j = 0xFFFF`
    /// reserved for the plug-in (conditional-mean) path.
    pub const PREDICT_SUBJECT_BASE: u64 = 0x40_0000;
    /// Variational fits draw their Monte Carlo noise from this stream.
    pub const ADVI: u64 = 0x3;
    /// Bootstrap resampling for metric uncertainty.
    pub const BOOTSTRAP: u64 = 0x4;
    /// Posterior draws sampled from a fitted variational approximation.
    pub const ADVI_DRAWS: u64 = 0x5;
}
