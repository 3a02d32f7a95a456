use super::maxpool2x2;
use crate::datapath::{compile, CompiledModel, Kernel};
use crate::error::{Error, Result};
use crate::fixedpoint::{fx_mul, fx_rescale, FxValue, Rounding};
use crate::model::{ParamManifest, ACT_FMT, HEAD_OUT_FMT};
use crate::tensor::{ActTensor, FxTensor};

/// Per-layer integer outputs of the direct pass.
#[derive(Clone, Debug)]
pub struct FixedLayer {
    pub name: String,
    /// `acc + bias` at the accumulator format, CHW, before pooling.
    pub raw: FxTensor,
    /// Body layers: clipped activations before pooling.
    pub post: Option<ActTensor>,
    /// Body layers: what the next layer receives.
    pub output: Option<ActTensor>,
}

#[derive(Clone, Debug)]
pub struct DirectOutput {
    pub layers: Vec<FixedLayer>,
    /// Raw head in CHW order, signed Q15.
    pub head: Vec<i32>,
}

/// Compiles `manifest` and runs the direct pass. Image bytes are Q0.8.
pub fn forward_fixed_direct(manifest: &ParamManifest, image: &ActTensor) -> Result<DirectOutput> {
    forward_compiled(&compile(manifest)?, image)
}

/// Straight loop-nest evaluation: no windows, no queues. Each output is an
/// explicit sum over input channels and kernel taps with zero padding.
pub fn forward_compiled(cm: &CompiledModel, image: &ActTensor) -> Result<DirectOutput> {
    if image.shape != cm.model.input {
        return Err(Error::Shape(format!(
            "image {} does not match model input {}",
            image.shape, cm.model.input
        )));
    }
    let mut input = image.clone();
    let mut layers = Vec::with_capacity(cm.layers.len());
    let mut head = Vec::new();
    for layer in &cm.layers {
        let spec = &layer.spec;
        let ishape = input.shape;
        let oshape = layer.shapes.conv;
        let (k, pad, cin) = (spec.kernel, spec.padding, spec.in_channels);
        let mut raw = vec![0i64; oshape.len()];
        for o in 0..oshape.c {
            for y in 0..oshape.h {
                for x in 0..oshape.w {
                    let mut acc: i64 = 0;
                    for i in 0..cin {
                        for ky in 0..k {
                            let iy = (y + ky).wrapping_sub(pad);
                            if iy >= ishape.h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (x + kx).wrapping_sub(pad);
                                if ix >= ishape.w {
                                    continue;
                                }
                                let a = input.get(i, iy, ix) as i64;
                                let widx = ((o * cin + i) * k + ky) * k + kx;
                                acc += match &layer.kernel {
                                    Kernel::Binary { signs, mul } => {
                                        if signs.signs()[widx] {
                                            mul[i] * a
                                        } else {
                                            -(mul[i] * a)
                                        }
                                    }
                                    Kernel::Fixed { weights } => weights[widx] * a,
                                };
                            }
                        }
                    }
                    raw[oshape.index(o, y, x)] = acc + layer.bias[o];
                }
            }
        }

        let plane = oshape.h * oshape.w;
        let scaled = |idx: usize, r: i64| {
            fx_mul(
                FxValue {
                    raw: r,
                    fmt: layer.acc_fmt,
                },
                layer.div[idx / plane],
            )
        };
        let raw_t = FxTensor::new(vec![oshape.c, oshape.h, oshape.w], layer.acc_fmt, raw)?;
        if spec.is_head() {
            head = raw_t
                .data
                .iter()
                .enumerate()
                .map(|(idx, &r)| {
                    Ok(
                        fx_rescale(scaled(idx, r)?, HEAD_OUT_FMT, Rounding::NearestTiesAway).raw
                            as i32,
                    )
                })
                .collect::<Result<_>>()?;
            layers.push(FixedLayer {
                name: spec.name.clone(),
                raw: raw_t,
                post: None,
                output: None,
            });
            break;
        }
        let post: Vec<u8> = raw_t
            .data
            .iter()
            .enumerate()
            .map(|(idx, &r)| {
                Ok(fx_rescale(scaled(idx, r)?, ACT_FMT, Rounding::NearestTiesAway).raw as u8)
            })
            .collect::<Result<_>>()?;
        let post = ActTensor::new(oshape, post)?;
        let output = if spec.has_maxpool {
            let (s, d) = maxpool2x2(post.shape, &post.data)?;
            ActTensor::new(s, d)?
        } else {
            post.clone()
        };
        input = output.clone();
        layers.push(FixedLayer {
            name: spec.name.clone(),
            raw: raw_t,
            post: Some(post),
            output: Some(output),
        });
    }
    Ok(DirectOutput { layers, head })
}
