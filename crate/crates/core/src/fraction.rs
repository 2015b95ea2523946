use std::fmt;

use serde::{Deserialize, Serialize};

/// Exact non-negative ratio. Threshold comparisons cross-multiply so that
/// `1/5 > 0.2` is decided without floating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0).then_some(Self { num, den })
    }

    pub const fn zero() -> Self {
        Self { num: 0, den: 1 }
    }

    pub const fn one() -> Self {
        Self { num: 1, den: 1 }
    }

    /// Converts a decimal config value (as written, e.g. `0.2`) into an exact
    /// fraction. Uses the shortest round-trip decimal representation, so
    /// `0.2` becomes `2/10`, not the nearest binary value.
    pub fn from_decimal(value: f64) -> Option<Self> {
        if !value.is_finite() || value < 0.0 {
            return None;
        }
        let text = format!("{value}");
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f.trim_end_matches('0')),
            None => (text.as_str(), ""),
        };
        if frac_part.len() > 18 {
            return None;
        }
        let den = 10u64.checked_pow(frac_part.len() as u32)?;
        let int: u64 = int_part.parse().ok()?;
        let frac: u64 = if frac_part.is_empty() { 0 } else { frac_part.parse().ok()? };
        let num = int.checked_mul(den)?.checked_add(frac)?;
        Some(Self { num, den }.reduced())
    }

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn reduced(self) -> Self {
        let g = gcd(self.num, self.den).max(1);
        Self { num: self.num / g, den: self.den / g }
    }

    fn cross(&self, other: &Self) -> (u128, u128) {
        (self.num as u128 * other.den as u128, other.num as u128 * self.den as u128)
    }

    pub fn gt(&self, other: &Self) -> bool {
        let (a, b) = self.cross(other);
        a > b
    }

    pub fn ge(&self, other: &Self) -> bool {
        let (a, b) = self.cross(other);
        a >= b
    }

    pub fn same_value(&self, other: &Self) -> bool {
        let (a, b) = self.cross(other);
        a == b
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}
