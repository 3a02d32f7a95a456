//! Parameters converted to the integer form both fixed-point engines consume.

use crate::error::{Error, Result};
use crate::fixedpoint::{FxValue, QFormat, CARRIER_BITS};
use crate::model::{LayerShapes, LayerSpec, ModelSpec, ParamManifest, Weights};
use crate::quant::{head_output, requantize, scale_vector_to_fixed, sign_accumulate, BinaryWeight};

/// Convolution kernel in engine form.
#[derive(Clone, Debug)]
pub enum Kernel {
    /// Sign bits plus the per-input-channel `Mul_prev` raws.
    Binary { signs: BinaryWeight, mul: Vec<i64> },
    /// Raw weights, `[out][in][ky][kx]`.
    Fixed { weights: Vec<i64> },
}

#[derive(Clone, Debug)]
pub struct CompiledLayer {
    pub spec: LayerSpec,
    pub shapes: LayerShapes,
    pub kernel: Kernel,
    /// Signed 48-bit accumulator view; fraction = weight (or `Mul_prev`) + activation bits.
    pub acc_fmt: QFormat,
    /// Bias already shifted to the accumulator fraction.
    pub bias: Vec<i64>,
    pub div: Vec<FxValue>,
}

impl CompiledLayer {
    pub fn acc_value(&self, raw: i64) -> FxValue {
        FxValue {
            raw,
            fmt: self.acc_fmt,
        }
    }

    /// One PE firing: the accumulator of every output channel for a window
    /// given as `k*k` taps of `in_channels` activations, raster order.
    /// Binary layers fold `Mul_prev` into the activations first, then
    /// accumulate under the sign bits. `products` is scratch space.
    pub fn accumulate<A: AsRef<[u8]>>(&self, taps: &[A], products: &mut Vec<i64>) -> Vec<i64> {
        let cin = self.spec.in_channels;
        // canonical [in][ky][kx] order, matching one sign-bit row
        products.clear();
        match &self.kernel {
            Kernel::Binary { mul, .. } => {
                for (i, &m) in mul.iter().enumerate() {
                    products.extend(taps.iter().map(|a| m * a.as_ref()[i] as i64));
                }
            }
            Kernel::Fixed { .. } => {
                for i in 0..cin {
                    products.extend(taps.iter().map(|a| a.as_ref()[i] as i64));
                }
            }
        }
        let row = products.len();
        (0..self.spec.out_channels)
            .map(|o| match &self.kernel {
                Kernel::Binary { signs, .. } => sign_accumulate(signs.row(o), products),
                Kernel::Fixed { weights } => weights[o * row..(o + 1) * row]
                    .iter()
                    .zip(products.iter())
                    .map(|(w, a)| w * a)
                    .sum(),
            })
            .collect()
    }

    /// `acc + bias`, the value the raw checkpoints observe.
    pub fn biased(&self, o: usize, acc: i64) -> i64 {
        acc + self.bias[o]
    }

    /// Post-processes output channel `o`: clipped 8-bit activation for body
    /// layers, 32-bit Q15 for the head.
    pub fn post(&self, o: usize, acc: i64) -> Result<i64> {
        let v = self.acc_value(self.biased(o, acc));
        if self.spec.is_head() {
            head_output(v, self.div[o]).map(i64::from)
        } else {
            requantize(v, self.div[o]).map(i64::from)
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompiledModel {
    pub model: ModelSpec,
    pub layers: Vec<CompiledLayer>,
}

/// Converts a manifest into engine form. The manifest is validated first,
/// so the accumulator budgets hold for every input.
pub fn compile(manifest: &ParamManifest) -> Result<CompiledModel> {
    manifest.validate()?;
    let model = manifest.model.clone();
    let shapes = model.layer_shapes();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (idx, ((spec, p), shapes)) in model
        .layers
        .iter()
        .zip(&manifest.layers)
        .zip(shapes)
        .enumerate()
    {
        let act_frac = model.input_frac(idx);
        let (kernel, w_frac) = match &p.weights {
            Weights::Binary(signs) => {
                let mul = p
                    .mul_prev
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("{}: missing Mul_prev", spec.name)))?;
                let raws = scale_vector_to_fixed(&mul.values, mul.fmt)?
                    .iter()
                    .map(|v| v.raw)
                    .collect();
                (
                    Kernel::Binary {
                        signs: signs.clone(),
                        mul: raws,
                    },
                    mul.fmt.frac_bits(),
                )
            }
            Weights::Fixed(t) => (
                Kernel::Fixed {
                    weights: t.raw().to_vec(),
                },
                t.fmt().frac_bits(),
            ),
        };
        let acc_frac = w_frac + act_frac;
        let acc_fmt = QFormat::new(true, CARRIER_BITS - 1 - acc_frac, acc_frac)?;
        let shift = acc_frac - p.bias.fmt().frac_bits();
        let bias = p.bias.raw().iter().map(|b| b << shift).collect();
        let div = scale_vector_to_fixed(&p.div_current.values, p.div_current.fmt)?;
        layers.push(CompiledLayer {
            spec: spec.clone(),
            shapes,
            kernel,
            acc_fmt,
            bias,
            div,
        });
    }
    Ok(CompiledModel { model, layers })
}
