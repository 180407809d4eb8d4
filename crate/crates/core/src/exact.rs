//! Exact sums of squared f32 values.
//!
//! The square of an f32 is `m^2 * 2^(2e)` with `m < 2^24`, so every square in
//! a set is an integer multiple of the smallest power of two among them. Sums
//! over subsets are then exact integers, which lets brute-force searches
//! compare candidates without rounding.

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

/// Largest set [`ExactSquares::min_sums_by_size`] will enumerate.
pub const MAX_ENUMERATION: usize = 24;

/// Squares of a fixed set of f32 values on a common power-of-two scale.
#[derive(Debug, Clone)]
pub struct ExactSquares {
    /// Every term is `value^2 / 2^exp2`.
    exp2: i32,
    terms: Vec<BigUint>,
    /// The same terms when the whole set fits in 128 bits.
    narrow: Option<Vec<u128>>,
}

/// `(m, e)` with `|w| = m * 2^e`.
fn decompose(w: f32) -> (u64, i32) {
    let bits = w.to_bits();
    let biased = ((bits >> 23) & 0xff) as i32;
    let frac = (bits & 0x7f_ffff) as u64;
    if biased == 0 {
        (frac, -149)
    } else {
        (frac | 0x80_0000, biased - 150)
    }
}

impl ExactSquares {
    pub fn new(values: &[f32]) -> Self {
        assert!(values.iter().all(|v| v.is_finite()), "finite values only");
        let parts: Vec<(u64, i32)> = values.iter().map(|&w| decompose(w)).collect();
        let exp2 = parts
            .iter()
            .filter(|(m, _)| *m != 0)
            .map(|&(_, e)| 2 * e)
            .min()
            .unwrap_or(0);
        let terms: Vec<BigUint> = parts
            .iter()
            .map(|&(m, e)| {
                if m == 0 {
                    BigUint::zero()
                } else {
                    BigUint::from(m * m) << ((2 * e - exp2) as usize)
                }
            })
            .collect();
        let total: BigUint = terms.iter().sum();
        let narrow = (total.bits() <= 127).then(|| {
            terms
                .iter()
                .map(|t| t.to_u128().expect("fits"))
                .collect()
        });
        ExactSquares {
            exp2,
            terms,
            narrow,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Exact sum of the squares at `indices`, in units of `2^exp2`.
    pub fn subset_sum(&self, indices: impl IntoIterator<Item = usize>) -> BigUint {
        indices.into_iter().map(|i| &self.terms[i]).sum()
    }

    /// Converts a sum returned by this set back to a real number.
    pub fn to_f64(&self, sum: &BigUint) -> f64 {
        // Split the scaling so neither factor leaves the f64 range.
        let half = self.exp2 / 2;
        sum.to_f64().unwrap_or(f64::INFINITY) * 2f64.powi(half) * 2f64.powi(self.exp2 - half)
    }

    /// `result[k]` is the smallest exact sum over all `k`-element subsets,
    /// found by visiting every subset in Gray-code order.
    pub fn min_sums_by_size(&self) -> Vec<BigUint> {
        let n = self.len();
        assert!(n <= MAX_ENUMERATION, "{n} values is too many to enumerate");
        match &self.narrow {
            Some(terms) => gray_min(terms, 0u128)
                .into_iter()
                .map(BigUint::from)
                .collect(),
            None => gray_min(&self.terms, BigUint::zero()),
        }
    }
}

trait Accumulate: Clone + Ord {
    fn add(&mut self, t: &Self);
    fn sub(&mut self, t: &Self);
}

impl Accumulate for u128 {
    fn add(&mut self, t: &Self) {
        *self += *t;
    }
    fn sub(&mut self, t: &Self) {
        *self -= *t;
    }
}

impl Accumulate for BigUint {
    fn add(&mut self, t: &Self) {
        *self += t;
    }
    fn sub(&mut self, t: &Self) {
        *self -= t;
    }
}

fn gray_min<T: Accumulate>(terms: &[T], zero: T) -> Vec<T> {
    let n = terms.len();
    let mut best: Vec<Option<T>> = vec![None; n + 1];
    best[0] = Some(zero.clone());
    let mut inside = vec![false; n];
    let mut size = 0usize;
    let mut sum = zero;
    for step in 1u64..(1u64 << n) {
        let j = step.trailing_zeros() as usize;
        if inside[j] {
            sum.sub(&terms[j]);
            size -= 1;
        } else {
            sum.add(&terms[j]);
            size += 1;
        }
        inside[j] = !inside[j];
        match &mut best[size] {
            Some(b) if *b <= sum => {}
            slot => *slot = Some(sum.clone()),
        }
    }
    best.into_iter().map(|b| b.expect("every size visited")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_are_exact_across_scales() {
        // 1 + 2^-60 is not representable in f64 but is here.
        let tiny = 2f32.powi(-30);
        let sq = ExactSquares::new(&[1.0, tiny]);
        let both = sq.subset_sum([0, 1]);
        assert!(both > sq.subset_sum([0]));
        assert_eq!(sq.to_f64(&sq.subset_sum([1])), 2f64.powi(-60));
    }

    #[test]
    fn subnormals_and_zeros() {
        let sub = f32::from_bits(1);
        let sq = ExactSquares::new(&[0.0, sub, -sub]);
        assert!(sq.subset_sum([0]).is_zero());
        assert_eq!(sq.subset_sum([1]), sq.subset_sum([2]));
        assert_eq!(sq.to_f64(&sq.subset_sum([1, 2])), 2.0 * 2f64.powi(-298));
    }

    #[test]
    fn min_sums_match_sorted_prefixes() {
        let w = [3.0f32, -1.0, 2.0, 0.5, -4.0];
        let sq = ExactSquares::new(&w);
        let mins = sq.min_sums_by_size();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
        for k in 0..=w.len() {
            assert_eq!(mins[k], sq.subset_sum(order[..k].iter().copied()));
        }
    }

    #[test]
    fn wide_range_falls_back_to_bigint() {
        let w = [f32::MAX, f32::from_bits(1), 1.0];
        let sq = ExactSquares::new(&w);
        assert!(sq.narrow.is_none());
        let mins = sq.min_sums_by_size();
        assert_eq!(mins[1], sq.subset_sum([1]));
        assert_eq!(mins[2], sq.subset_sum([1, 2]));
    }
}
