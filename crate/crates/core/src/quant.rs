//! Weight binarization, 8-bit activation quantization and the conversion of
//! per-channel scales to fixed point.

use crate::error::{Error, Result};
use crate::fixedpoint::{fx_mul, fx_rescale, to_fixed, FxValue, QFormat, Rounding};
use crate::model::{ACT_FMT, HEAD_OUT_FMT};

/// Sign tensor in `[out][in][ky][kx]` order; `true` is +1, `false` is −1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryWeight {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    signs: Vec<bool>,
}

impl BinaryWeight {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        signs: Vec<bool>,
    ) -> Result<Self> {
        let n = out_channels * in_channels * kernel * kernel;
        if signs.len() != n {
            return Err(Error::Shape(format!(
                "binary weight needs {n} signs, got {}",
                signs.len()
            )));
        }
        Ok(BinaryWeight {
            out_channels,
            in_channels,
            kernel,
            signs,
        })
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn is_positive(&self, o: usize, i: usize, ky: usize, kx: usize) -> bool {
        self.signs[self.index(o, i, ky, kx)]
    }

    /// The weight as ±1.
    pub fn value(&self, o: usize, i: usize, ky: usize, kx: usize) -> i64 {
        if self.is_positive(o, i, ky, kx) {
            1
        } else {
            -1
        }
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    /// Signs of one output channel, `[in][ky][kx]`.
    pub fn row(&self, o: usize) -> &[bool] {
        let n = self.in_channels * self.kernel * self.kernel;
        &self.signs[o * n..(o + 1) * n]
    }

    pub fn expand(&self) -> Vec<i8> {
        self.signs.iter().map(|&s| if s { 1 } else { -1 }).collect()
    }

    /// Bits in canonical order, LSB-first within each byte, last byte
    /// zero-padded.
    pub fn pack_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.signs.len().div_ceil(8)];
        for (n, _) in self.signs.iter().enumerate().filter(|(_, s)| **s) {
            out[n / 8] |= 1 << (n % 8);
        }
        out
    }

    pub fn from_packed_bytes(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        bytes: &[u8],
    ) -> Result<Self> {
        let n = out_channels * in_channels * kernel * kernel;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Shape(format!(
                "{n} packed signs need {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let signs = (0..n).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect();
        BinaryWeight::new(out_channels, in_channels, kernel, signs)
    }
}

/// Element-wise sign with `sign(0) = +1`. Input is `[out][in][ky][kx]`.
pub fn binarize(
    weights: &[f64],
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
) -> Result<BinaryWeight> {
    if weights.iter().any(|w| w.is_nan()) {
        return Err(Error::NotANumber);
    }
    // -0.0 >= 0.0 holds, so negative zero also maps to +1
    let signs = weights.iter().map(|&w| w >= 0.0).collect();
    BinaryWeight::new(out_channels, in_channels, kernel, signs)
}

/// Sign-controlled accumulation: adds `values[i]` where the sign is +1 and
/// subtracts it where the sign is −1. No multiplications.
pub fn sign_accumulate(signs: &[bool], values: &[i64]) -> i64 {
    debug_assert_eq!(signs.len(), values.len());
    signs
        .iter()
        .zip(values)
        .fold(0i64, |acc, (&s, &v)| if s { acc + v } else { acc - v })
}

/// Step size of an 8-bit unsigned activation quantizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActQuantParams {
    step: f64,
}

impl ActQuantParams {
    pub fn new(step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidFormat(format!(
                "activation step must be positive and finite, got {step}"
            )));
        }
        Ok(ActQuantParams { step })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// The step size at `fmt`, as the hardware would hold it.
    pub fn fixed_step(&self, fmt: QFormat) -> Result<FxValue> {
        to_fixed(self.step, fmt, Rounding::NearestTiesAway)
    }

    /// The reciprocal step at `fmt`.
    pub fn fixed_inverse(&self, fmt: QFormat) -> Result<FxValue> {
        to_fixed(1.0 / self.step, fmt, Rounding::NearestTiesAway)
    }
}

/// `clip(round(x / s_a), 0, 255)` with ties away from zero.
pub fn quantize_act(x: f64, p: &ActQuantParams) -> u8 {
    let q = (x / p.step).round();
    if q.is_nan() {
        0
    } else {
        q.clamp(0.0, 255.0) as u8
    }
}

pub fn dequantize_act(q: u8, p: &ActQuantParams) -> f64 {
    q as f64 * p.step
}

/// Per-channel scales as the PE and post-process consume them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelScales {
    /// One per input channel; empty for layers without input compensation.
    pub mul_prev: Vec<FxValue>,
    /// One per output channel.
    pub div_current: Vec<FxValue>,
}

/// Converts real scales to `fmt`. Scales must be positive and must not
/// saturate; a clipped scale silently corrupts a whole channel.
pub fn scale_vector_to_fixed(values: &[f64], fmt: QFormat) -> Result<Vec<FxValue>> {
    let (_, hi) = fmt.range();
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            let out_of_range = || Error::ScaleOutOfRange {
                index,
                value,
                format: fmt.to_string(),
            };
            // anything at or past half an LSB above the top would saturate
            if !(value.is_finite() && value > 0.0) || value >= hi + fmt.lsb() / 2.0 {
                return Err(out_of_range());
            }
            to_fixed(value, fmt, Rounding::NearestTiesAway)
        })
        .collect()
}

pub fn scales_to_fixed(
    mul_prev: &[f64],
    div_current: &[f64],
    fmt_mul: QFormat,
    fmt_div: QFormat,
) -> Result<ChannelScales> {
    Ok(ChannelScales {
        mul_prev: scale_vector_to_fixed(mul_prev, fmt_mul)?,
        div_current: scale_vector_to_fixed(div_current, fmt_div)?,
    })
}

/// Integer-only activation quantizer: exact product with `Div_current`,
/// rounded to the integer grid and clipped to `[0, 255]`.
pub fn requantize(acc: FxValue, div: FxValue) -> Result<u8> {
    let scaled = fx_mul(acc, div)?;
    Ok(fx_rescale(scaled, ACT_FMT, Rounding::NearestTiesAway).raw as u8)
}

/// Head output: exact product with `Div_current`, rounded to 15 fraction
/// bits and saturated to 32 bits.
pub fn head_output(acc: FxValue, div: FxValue) -> Result<i32> {
    let scaled = fx_mul(acc, div)?;
    Ok(fx_rescale(scaled, HEAD_OUT_FMT, Rounding::NearestTiesAway).raw as i32)
}
