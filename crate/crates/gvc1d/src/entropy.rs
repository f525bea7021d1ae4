//! Quantization, symbol distributions, and integer frequency tables.
//!
//! The continuous entropy models (autoregressive transformer and the
//! factorized baseline, in `entropy_model`) emit per-symbol Gaussians
//! (mu, sigma); this module turns them into exact-total integer tables
//! for the range coder and provides the rate arithmetic shared by
//! training and evaluation.

use crate::detmath;
use crate::error::{GvcError, Result};
use crate::tensor::round_half_away;

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

/// Default symbol bound B: alphabet is the integers in [-B, B].
pub const SYMBOL_BOUND: i32 = 15;
pub const SIGMA_MIN: f64 = 0.05;
pub const SIGMA_MAX: f64 = 20.0;

/// Integer pmf over a bounded alphabet; counts are all >= 1 and sum to
/// exactly 2^16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u32>,
    cum: Vec<u32>,
}

impl FrequencyTable {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(GvcError::config("empty frequency table"));
        }
        let mut cum = Vec::with_capacity(counts.len() + 1);
        let mut acc: u64 = 0;
        cum.push(0);
        for &c in &counts {
            if c == 0 {
                return Err(GvcError::config("frequency table count of zero"));
            }
            acc += u64::from(c);
            cum.push(acc as u32);
        }
        if acc != u64::from(FREQ_TOTAL) {
            return Err(GvcError::config(format!(
                "frequency table total {} != 2^{}",
                acc, FREQ_BITS
            )));
        }
        Ok(FrequencyTable { counts, cum })
    }

    pub fn alphabet_size(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, symbol: usize) -> u32 {
        self.counts[symbol]
    }

    /// Cumulative count of all symbols below `symbol`.
    pub fn cum(&self, symbol: usize) -> u32 {
        self.cum[symbol]
    }

    pub fn total(&self) -> u32 {
        FREQ_TOTAL
    }

    /// Largest symbol s with cum(s) <= value.
    pub fn find(&self, value: u32) -> usize {
        // alphabet is tiny (31 by default); linear scan
        let mut s = 0;
        while s + 1 < self.counts.len() && self.cum[s + 1] <= value {
            s += 1;
        }
        s
    }

    /// Information content of `symbol` in bits.
    pub fn self_information(&self, symbol: usize) -> f64 {
        -detmath::log2(f64::from(self.counts[symbol]) / f64::from(FREQ_TOTAL))
    }
}

/// Scalar quantizer with unit step and a clamped integer alphabet.
#[derive(Clone, Copy, Debug)]
pub struct Quantizer {
    pub bound: i32,
}

impl Default for Quantizer {
    fn default() -> Self {
        Quantizer {
            bound: SYMBOL_BOUND,
        }
    }
}

impl Quantizer {
    pub fn new(bound: i32) -> Self {
        Quantizer { bound }
    }

    pub fn alphabet_size(&self) -> usize {
        (2 * self.bound + 1) as usize
    }

    /// Round half away from zero, clamp to [-B, B].
    pub fn quantize_one(&self, y: f64) -> Result<i32> {
        if !y.is_finite() {
            return Err(GvcError::Numeric(format!("non-finite latent value {y}")));
        }
        let q = round_half_away(y) as i32;
        Ok(q.clamp(-self.bound, self.bound))
    }

    pub fn quantize(&self, values: &[f64]) -> Result<Vec<i32>> {
        values.iter().map(|&y| self.quantize_one(y)).collect()
    }

    pub fn dequantize(&self, symbols: &[i32]) -> Vec<f64> {
        symbols.iter().map(|&q| f64::from(q)).collect()
    }

    /// Map a signed symbol to its alphabet index.
    pub fn symbol_index(&self, q: i32) -> usize {
        (q + self.bound) as usize
    }

    pub fn index_symbol(&self, index: usize) -> i32 {
        index as i32 - self.bound
    }
}

/// Continuous per-symbol model: a Gaussian with clamped scale.
#[derive(Clone, Copy, Debug)]
pub struct SymbolDistribution {
    pub mean: f64,
    pub scale: f64,
}

impl SymbolDistribution {
    pub fn new(mean: f64, scale: f64) -> Self {
        SymbolDistribution {
            mean,
            scale: scale.clamp(SIGMA_MIN, SIGMA_MAX),
        }
    }

    /// Probability mass of integer symbol q under CDF differences with
    /// the tails folded into the endpoint symbols.
    pub fn pmf(&self, q: i32, bound: i32) -> f64 {
        let hi = if q == bound {
            1.0
        } else {
            detmath::norm_cdf((f64::from(q) + 0.5 - self.mean) / self.scale)
        };
        let lo = if q == -bound {
            0.0
        } else {
            detmath::norm_cdf((f64::from(q) - 0.5 - self.mean) / self.scale)
        };
        hi - lo
    }
}

/// Discretize a symbol distribution to an exact-total integer table:
/// floor scaling, largest-remainder completion, and a minimum count of 1
/// per symbol.
pub fn discretize(dist: &SymbolDistribution, bound: i32) -> FrequencyTable {
    let n = (2 * bound + 1) as usize;
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let q = i as i32 - bound;
        raw.push(dist.pmf(q, bound).max(0.0) * f64::from(FREQ_TOTAL));
    }
    let mut counts: Vec<u32> = raw.iter().map(|&r| (r.floor() as u32).max(1)).collect();
    let mut sum: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if sum < u64::from(FREQ_TOTAL) {
        // hand out the remainder by largest fractional part, lowest
        // index winning ties
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        let mut left = (u64::from(FREQ_TOTAL) - sum) as u32;
        let mut k = 0usize;
        while left > 0 {
            counts[order[k % n]] += 1;
            left -= 1;
            k += 1;
        }
    } else if sum > u64::from(FREQ_TOTAL) {
        // the >=1 floors overshot; take back from the largest counts
        let mut excess = (sum - u64::from(FREQ_TOTAL)) as u32;
        while excess > 0 {
            let mut best = 0usize;
            for i in 1..n {
                if counts[i] > counts[best] {
                    best = i;
                }
            }
            // some count exceeds 1 whenever the floors overshot
            let take = excess.min(counts[best] - 1);
            counts[best] -= take;
            excess -= take;
        }
    }
    sum = counts.iter().map(|&c| u64::from(c)).sum();
    debug_assert_eq!(sum, u64::from(FREQ_TOTAL));
    FrequencyTable::new(counts).expect("normalization produced a valid table")
}

/// Total coded-size lower bound in bits for symbols under their tables.
pub fn self_information_bits(symbols: &[i32], tables: &[FrequencyTable], bound: i32) -> f64 {
    symbols
        .iter()
        .zip(tables)
        .map(|(&q, t)| t.self_information((q + bound) as usize))
        .sum()
}
