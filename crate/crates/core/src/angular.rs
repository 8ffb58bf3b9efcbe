//! Angular-momentum bookkeeping: half-integer quantum numbers and
//! Wigner 3-j / Clebsch-Gordan coefficients.

use serde::{Deserialize, Serialize};
use std::fmt;

/// A quantum number that is an integer or a half-integer, stored as twice
/// its value so that arithmetic stays exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HalfInt(pub i32);

impl HalfInt {
    pub const fn from_twice(twice: i32) -> Self {
        HalfInt(twice)
    }

    pub const fn from_int(value: i32) -> Self {
        HalfInt(2 * value)
    }

    /// Converts a float that must be a multiple of 1/2.
    pub fn from_f64(value: f64) -> Option<Self> {
        let twice = (2.0 * value).round();
        if (2.0 * value - twice).abs() > 1e-9 {
            return None;
        }
        Some(HalfInt(twice as i32))
    }

    pub const fn twice(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 2.0
    }

    pub const fn is_integer(self) -> bool {
        self.0 % 2 == 0
    }

    /// Projections -j, -j+1, ..., j.
    pub fn projections(self) -> impl Iterator<Item = HalfInt> {
        let j = self.0;
        (-j..=j).step_by(2).map(HalfInt)
    }

    /// Multiplicity 2j + 1.
    pub const fn multiplicity(self) -> usize {
        (self.0 + 1) as usize
    }
}

impl std::ops::Add for HalfInt {
    type Output = HalfInt;
    fn add(self, rhs: HalfInt) -> HalfInt {
        HalfInt(self.0 + rhs.0)
    }
}

impl std::ops::Sub for HalfInt {
    type Output = HalfInt;
    fn sub(self, rhs: HalfInt) -> HalfInt {
        HalfInt(self.0 - rhs.0)
    }
}

impl std::ops::Neg for HalfInt {
    type Output = HalfInt;
    fn neg(self) -> HalfInt {
        HalfInt(-self.0)
    }
}

impl fmt::Display for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

fn factorial(n: i32) -> f64 {
    debug_assert!(n >= 0);
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Wigner 3-j symbol with all arguments given as twice their value.
///
/// Racah's closed form; exact enough in f64 for the j <= ~20 that atomic
/// structure needs.
pub fn wigner_3j(j1: i32, j2: i32, j3: i32, m1: i32, m2: i32, m3: i32) -> f64 {
    if m1 + m2 + m3 != 0 {
        return 0.0;
    }
    if m1.abs() > j1 || m2.abs() > j2 || m3.abs() > j3 {
        return 0.0;
    }
    if (j1 + m1) % 2 != 0 || (j2 + m2) % 2 != 0 || (j3 + m3) % 2 != 0 {
        return 0.0;
    }
    if j3 < (j1 - j2).abs() || j3 > j1 + j2 || (j1 + j2 + j3) % 2 != 0 {
        return 0.0;
    }

    // Convert to plain integers (all combinations below are even).
    let a = (j1 + j2 - j3) / 2;
    let b = (j1 - j2 + j3) / 2;
    let c = (-j1 + j2 + j3) / 2;
    let d = (j1 + j2 + j3) / 2 + 1;
    let triangle = factorial(a) * factorial(b) * factorial(c) / factorial(d);

    let prefactor = triangle
        * factorial((j1 + m1) / 2)
        * factorial((j1 - m1) / 2)
        * factorial((j2 + m2) / 2)
        * factorial((j2 - m2) / 2)
        * factorial((j3 + m3) / 2)
        * factorial((j3 - m3) / 2);

    let k_min = 0.max((j2 - j3 - m1) / 2).max((j1 - j3 + m2) / 2);
    let k_max = a.min((j1 - m1) / 2).min((j2 + m2) / 2);

    let mut sum = 0.0;
    for k in k_min..=k_max {
        let denom = factorial(k)
            * factorial(a - k)
            * factorial((j1 - m1) / 2 - k)
            * factorial((j2 + m2) / 2 - k)
            * factorial((j3 - j2 + m1) / 2 + k)
            * factorial((j3 - j1 - m2) / 2 + k);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / denom;
    }

    let phase_exp = (j1 - j2 - m3) / 2;
    let phase = if phase_exp.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    phase * prefactor.sqrt() * sum
}

/// Clebsch-Gordan coefficient <j1 m1; j2 m2 | J M>.
pub fn clebsch_gordan(j1: HalfInt, m1: HalfInt, j2: HalfInt, m2: HalfInt, j: HalfInt, m: HalfInt) -> f64 {
    let w = wigner_3j(j1.0, j2.0, j.0, m1.0, m2.0, -m.0);
    if w == 0.0 {
        return 0.0;
    }
    let phase_exp = (j1.0 - j2.0 + m.0) / 2;
    let phase = if phase_exp.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    phase * ((j.0 + 1) as f64).sqrt() * w
}
