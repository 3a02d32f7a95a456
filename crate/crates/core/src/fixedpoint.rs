//! Exact fixed-point primitives.
//!
//! A [`QFormat`] `Qm.n` has `m` integer bits and `n` fraction bits; signed
//! formats carry one extra sign bit, so `sQ5.11` occupies 17 bits and spans
//! `[-32, 32 - 2^-11]`. Raw values always live in an `i64` carrier. Products
//! are checked against a 48-bit working budget ([`CARRIER_BITS`]).
//!
//! Rounding is round-to-nearest with ties away from zero unless a caller
//! explicitly asks for [`Rounding::Floor`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working budget for any intermediate raw value, sign included.
pub const CARRIER_BITS: u32 = 48;

/// Upper bound on the fraction bits of an exact product.
pub const MAX_PRODUCT_FRAC: u32 = 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rounding {
    /// Round to nearest, ties away from zero (odd-symmetric).
    #[default]
    NearestTiesAway,
    /// Round toward negative infinity (plain arithmetic shift).
    Floor,
}

/// Signed or unsigned fixed-point format descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QFormat {
    signed: bool,
    int_bits: u32,
    frac_bits: u32,
}

impl QFormat {
    /// Compile-time constructor for a signed `Qm.n`. Panics on an invalid
    /// width, which turns into a build error in `const` position.
    pub const fn sq(int_bits: u32, frac_bits: u32) -> Self {
        assert!(int_bits + frac_bits < CARRIER_BITS);
        QFormat {
            signed: true,
            int_bits,
            frac_bits,
        }
    }

    /// Compile-time constructor for an unsigned `Qm.n`.
    pub const fn uq(int_bits: u32, frac_bits: u32) -> Self {
        assert!(int_bits + frac_bits <= CARRIER_BITS);
        QFormat {
            signed: false,
            int_bits,
            frac_bits,
        }
    }

    pub fn new(signed: bool, int_bits: u32, frac_bits: u32) -> Result<Self> {
        let width = int_bits as u64 + frac_bits as u64 + signed as u64;
        if width == 0 || width > CARRIER_BITS as u64 {
            return Err(Error::InvalidFormat(format!(
                "{}Q{int_bits}.{frac_bits} has width {width}, allowed 1..={CARRIER_BITS}",
                if signed { "s" } else { "u" }
            )));
        }
        Ok(QFormat {
            signed,
            int_bits,
            frac_bits,
        })
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Stored width in bits, sign bit included.
    pub fn width(&self) -> u32 {
        self.int_bits + self.frac_bits + self.signed as u32
    }

    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.int_bits + self.frac_bits)) - 1
    }

    pub fn min_raw(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.int_bits + self.frac_bits))
        } else {
            0
        }
    }

    /// Weight of one LSB, `2^-frac_bits`.
    pub fn lsb(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Representable real interval `[min, max]`.
    pub fn range(&self) -> (f64, f64) {
        (
            self.min_raw() as f64 * self.lsb(),
            self.max_raw() as f64 * self.lsb(),
        )
    }

    pub fn contains_raw(&self, raw: i64) -> bool {
        (self.min_raw()..=self.max_raw()).contains(&raw)
    }

    pub fn saturate(&self, raw: i64) -> i64 {
        raw.clamp(self.min_raw(), self.max_raw())
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.signed { 's' } else { 'u' };
        write!(f, "{prefix}Q{}.{}", self.int_bits, self.frac_bits)
    }
}

impl FromStr for QFormat {
    type Err = Error;

    /// Parses `sQm.n` or `uQm.n`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFormat(format!("cannot parse {s:?}, expected sQm.n or uQm.n"));
        let (signed, rest) = if let Some(rest) = s.strip_prefix("sQ") {
            (true, rest)
        } else if let Some(rest) = s.strip_prefix("uQ") {
            (false, rest)
        } else {
            return Err(bad());
        };
        let (m, n) = rest.split_once('.').ok_or_else(bad)?;
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
        if !digits(m) || !digits(n) {
            return Err(bad());
        }
        let m: u32 = m.parse().map_err(|_| bad())?;
        let n: u32 = n.parse().map_err(|_| bad())?;
        QFormat::new(signed, m, n)
    }
}

/// A raw integer tagged with its format. Real value is `raw / 2^frac_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FxValue {
    pub raw: i64,
    pub fmt: QFormat,
}

impl FxValue {
    pub fn new(raw: i64, fmt: QFormat) -> Result<Self> {
        if !fmt.contains_raw(raw) {
            return Err(Error::InvalidFormat(format!(
                "raw {raw} does not fit {fmt}"
            )));
        }
        Ok(FxValue { raw, fmt })
    }

    pub fn frac_bits(&self) -> u32 {
        self.fmt.frac_bits
    }
}

/// Converts a real number, rounding and saturating to `fmt`.
pub fn to_fixed(x: f64, fmt: QFormat, rounding: Rounding) -> Result<FxValue> {
    if x.is_nan() {
        return Err(Error::NotANumber);
    }
    // scaling by a power of two is exact in binary floating point
    let scaled = x * (fmt.frac_bits as f64).exp2();
    let rounded = match rounding {
        Rounding::NearestTiesAway => scaled.round(),
        Rounding::Floor => scaled.floor(),
    };
    let raw = if rounded >= fmt.max_raw() as f64 {
        fmt.max_raw()
    } else if rounded <= fmt.min_raw() as f64 {
        fmt.min_raw()
    } else {
        rounded as i64
    };
    Ok(FxValue { raw, fmt })
}

/// Exact real value of `v`.
pub fn from_fixed(v: FxValue) -> f64 {
    v.raw as f64 * v.fmt.lsb()
}

/// Exact product within the 48-bit carrier.
pub fn fx_mul(a: FxValue, b: FxValue) -> Result<FxValue> {
    fx_mul_within(a, b, CARRIER_BITS)
}

/// Exact product checked against a `budget`-bit signed carrier.
///
/// The result format is the carrier itself: signed, `a.frac + b.frac`
/// fraction bits and whatever integer bits remain in the budget.
pub fn fx_mul_within(a: FxValue, b: FxValue, budget: u32) -> Result<FxValue> {
    let frac = a.fmt.frac_bits + b.fmt.frac_bits;
    if frac > MAX_PRODUCT_FRAC {
        return Err(Error::FractionBudget(frac));
    }
    let budget = budget.min(CARRIER_BITS);
    let product = a.raw as i128 * b.raw as i128;
    let limit = 1i128 << (budget - 1);
    if product < -limit || product >= limit {
        return Err(Error::CarrierOverflow {
            value: a.raw,
            other: b.raw,
            budget,
        });
    }
    Ok(FxValue {
        raw: product as i64,
        fmt: QFormat {
            signed: true,
            int_bits: (budget - 1).saturating_sub(frac),
            frac_bits: frac,
        },
    })
}

/// Shifts `raw` right by `shift` bits with the requested rounding.
pub fn round_shift(raw: i128, shift: u32, rounding: Rounding) -> i128 {
    if shift == 0 {
        return raw;
    }
    match rounding {
        Rounding::Floor => raw >> shift,
        Rounding::NearestTiesAway => {
            let half = 1i128 << (shift - 1);
            if raw >= 0 {
                (raw + half) >> shift
            } else {
                -((-raw + half) >> shift)
            }
        }
    }
}

/// Re-expresses `v` with `target.frac_bits` fraction bits and saturates to
/// `target`. Right shifts round; left shifts are exact.
pub fn fx_rescale(v: FxValue, target: QFormat, rounding: Rounding) -> FxValue {
    let from = v.fmt.frac_bits;
    let to = target.frac_bits;
    let raw = if to <= from {
        round_shift(v.raw as i128, from - to, rounding)
    } else {
        (v.raw as i128) << (to - from)
    };
    let raw = raw.clamp(target.min_raw() as i128, target.max_raw() as i128) as i64;
    FxValue { raw, fmt: target }
}
