//! Q16.16 fixed-point scalars.
//!
//! Values are stored as `i64` raw integers scaled by 2^16 but are kept inside
//! the signed 32-bit range, the extremes of a Q16.16 word. Every operation that
//! would leave that range saturates and reports the overflow so the VM can set
//! its sticky flag. Multiplication truncates toward negative infinity; no other
//! rounding exists.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub const FRAC_BITS: u32 = 16;
pub const ONE_RAW: i64 = 1 << FRAC_BITS;
pub const RAW_MAX: i64 = i32::MAX as i64;
pub const RAW_MIN: i64 = i32::MIN as i64;

/// Entries in the sigmoid table, covering [-8, 8) in steps of 1/256.
pub const SIGMOID_TABLE_LEN: usize = 4096;
const SIGMOID_SHIFT: u32 = 8;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedPoint(i64);

/// Clamp a wide intermediate into range, flagging overflow.
#[inline]
pub fn saturate(wide: i128) -> (FixedPoint, bool) {
    if wide > RAW_MAX as i128 {
        (FixedPoint(RAW_MAX), true)
    } else if wide < RAW_MIN as i128 {
        (FixedPoint(RAW_MIN), true)
    } else {
        (FixedPoint(wide as i64), false)
    }
}

impl FixedPoint {
    pub const ZERO: FixedPoint = FixedPoint(0);
    pub const ONE: FixedPoint = FixedPoint(ONE_RAW);
    pub const MAX: FixedPoint = FixedPoint(RAW_MAX);
    pub const MIN: FixedPoint = FixedPoint(RAW_MIN);

    /// Builds from a raw value, saturating anything outside the Q16.16 range.
    pub fn from_raw(raw: i64) -> Self {
        saturate(raw as i128).0
    }

    pub const fn raw(self) -> i64 {
        self.0
    }

    pub fn from_int(v: i32) -> Self {
        saturate((v as i128) << FRAC_BITS).0
    }

    /// `num / 2^shift`, exact when representable. Handy for dyadic constants.
    pub fn dyadic(num: i64, shift: u32) -> Self {
        assert!(shift <= FRAC_BITS);
        Self::from_raw(num << (FRAC_BITS - shift))
    }

    /// Nearest representable value. Only for reporting and test fixtures;
    /// committed computation never goes through floating point.
    pub fn from_f64(v: f64) -> Self {
        saturate((v * ONE_RAW as f64).round() as i128).0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / ONE_RAW as f64
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Self) -> (Self, bool) {
        saturate(self.0 as i128 + rhs.0 as i128)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Self) -> (Self, bool) {
        saturate(self.0 as i128 - rhs.0 as i128)
    }

    /// Full-width product, arithmetic shift right by 16.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Self) -> (Self, bool) {
        saturate((self.0 as i128 * rhs.0 as i128) >> FRAC_BITS)
    }

    pub fn relu(self) -> Self {
        if self.0 > 0 {
            self
        } else {
            Self::ZERO
        }
    }

    pub fn sigmoid(self) -> Self {
        let table = sigmoid_table();
        let offset = (self.0 + (8 * ONE_RAW)) >> SIGMOID_SHIFT;
        let idx = offset.clamp(0, SIGMOID_TABLE_LEN as i64 - 1) as usize;
        table[idx]
    }
}

/// Dot product with a single truncation: the exact sum of full-width
/// products is shifted right by 16 once, then saturated.
pub fn dot(pairs: impl Iterator<Item = (FixedPoint, FixedPoint)>) -> (FixedPoint, bool) {
    let sum: i128 = pairs.map(|(a, b)| a.0 as i128 * b.0 as i128).sum();
    saturate(sum >> FRAC_BITS)
}

impl fmt::Debug for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}q", self.to_f64())
    }
}

impl fmt::Display for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

// exp via argument halving and a Taylor series. Only IEEE-754 add, mul and div
// are used, which are correctly rounded, so the table is identical everywhere.
fn portable_exp(x: f64) -> f64 {
    let r = x / 16.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for n in 1..=24 {
        term = term * r / n as f64;
        sum += term;
    }
    for _ in 0..4 {
        sum *= sum;
    }
    sum
}

/// The frozen 4096-entry sigmoid table; entry i is sigmoid(-8 + i/256) rounded
/// to the nearest Q16.16 value.
pub fn sigmoid_table() -> &'static [FixedPoint; SIGMOID_TABLE_LEN] {
    static TABLE: OnceLock<[FixedPoint; SIGMOID_TABLE_LEN]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [FixedPoint::ZERO; SIGMOID_TABLE_LEN];
        for (i, slot) in t.iter_mut().enumerate() {
            let x = -8.0 + i as f64 / 256.0;
            let s = 1.0 / (1.0 + portable_exp(-x));
            *slot = FixedPoint(((s * ONE_RAW as f64) + 0.5).floor() as i64);
        }
        t
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplication_truncates_toward_negative_infinity() {
        let tiny = FixedPoint::from_raw(1);
        let half = FixedPoint::dyadic(1, 1);
        assert_eq!(tiny.mul(half).0.raw(), 0);
        let neg = FixedPoint::from_raw(-1);
        assert_eq!(neg.mul(half).0.raw(), -1);
    }

    #[test]
    fn saturation_sets_overflow() {
        let big = FixedPoint::from_int(30000);
        let (sum, ov) = big.add(big);
        assert!(ov);
        assert_eq!(sum, FixedPoint::MAX);
        let (prod, ov) = big.mul(FixedPoint::from_int(-2));
        assert!(ov);
        assert_eq!(prod, FixedPoint::MIN);
        let (_, ov) = FixedPoint::from_int(3).add(FixedPoint::from_int(4));
        assert!(!ov);
    }

    #[test]
    fn dot_of_small_vectors_is_exact() {
        let a = [FixedPoint::from_int(1), FixedPoint::from_int(2)];
        let b = [FixedPoint::from_int(3), FixedPoint::from_int(4)];
        let (d, ov) = dot(a.iter().copied().zip(b.iter().copied()));
        assert!(!ov);
        assert_eq!(d, FixedPoint::from_int(11));
    }

    #[test]
    fn sigmoid_midpoint_and_clamping() {
        assert_eq!(FixedPoint::ZERO.sigmoid().raw(), ONE_RAW / 2);
        let t = sigmoid_table();
        assert_eq!(FixedPoint::from_int(-100).sigmoid(), t[0]);
        assert_eq!(
            FixedPoint::from_int(100).sigmoid(),
            t[SIGMOID_TABLE_LEN - 1]
        );
        // Symmetry around the midpoint: s(x) + s(-x) = 1 up to rounding.
        for i in 1..2048 {
            let s = t[2048 + i].raw() + t[2048 - i].raw();
            assert!((s - ONE_RAW).abs() <= 1, "entry {i}: {s}");
        }
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sigmoid_table_is_close_to_libm() {
        for (i, v) in sigmoid_table().iter().enumerate() {
            let x = -8.0 + i as f64 / 256.0;
            let s = 1.0 / (1.0 + (-x).exp());
            assert!((v.to_f64() - s).abs() < 2.0 / ONE_RAW as f64);
        }
    }
}
