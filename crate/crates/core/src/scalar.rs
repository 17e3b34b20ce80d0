//! Numeric abstraction for similarity scores and thresholds.
//!
//! Scores are ratios of branch counts, so any ordered field works. `f64` is
//! the default used throughout the CLI; `Ratio<u64>` gives exact arithmetic,
//! which the monotonicity and "exactly 1" checks rely on.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Num, ToPrimitive};

/// A score value: f32, f64 or an exact rational.
pub trait Scalar: Num + PartialOrd + Copy + Debug + Send + Sync + 'static {
    /// Build `num / den`. `den` must be non-zero.
    fn ratio(num: u64, den: u64) -> Self;

    /// Lossy conversion for reporting.
    fn to_f64(self) -> f64;

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn ratio(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        num as f64 / den as f64
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn ratio(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        (num as f64 / den as f64) as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for Ratio<u64> {
    fn ratio(num: u64, den: u64) -> Self {
        Ratio::new(num, den)
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for Ratio<i64> {
    fn ratio(num: u64, den: u64) -> Self {
        Ratio::new(num as i64, den as i64)
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// Parse a decimal literal such as `0.75` into any scalar exactly.
pub fn parse_decimal<T: Scalar>(text: &str) -> Option<T> {
    let text = text.trim();
    let (int_part, frac_part) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if frac_part.len() > 18 {
        return None;
    }
    let den = 10u64.checked_pow(frac_part.len() as u32)?;
    let int: u64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let frac: u64 = if frac_part.is_empty() { 0 } else { frac_part.parse().ok()? };
    let num = int.checked_mul(den)?.checked_add(frac)?;
    Some(T::ratio(num, den))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_parsing_is_exact_for_rationals() {
        let v: Ratio<u64> = parse_decimal("0.75").unwrap();
        assert_eq!(v, Ratio::new(3, 4));
        let v: Ratio<u64> = parse_decimal("0.60").unwrap();
        assert_eq!(v, Ratio::new(3, 5));
        let v: f64 = parse_decimal("1").unwrap();
        assert_eq!(v, 1.0);
        assert!(parse_decimal::<f64>("abc").is_none());
        assert!(parse_decimal::<f64>("-0.5").is_none());
        assert!(parse_decimal::<f64>(".").is_none());
    }

    #[test]
    fn ratio_agrees_across_types() {
        assert_eq!(<f64 as Scalar>::ratio(6, 8), 0.75);
        assert_eq!(<f32 as Scalar>::ratio(1, 2), 0.5);
        assert_eq!(<Ratio<u64> as Scalar>::ratio(6, 8), Ratio::new(3, 4));
        assert_eq!(<Ratio<i64> as Scalar>::ratio(6, 8).to_f64(), 0.75);
    }
}
