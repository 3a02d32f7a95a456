use super::{conv2d_float, maxpool2x2, FloatTensor};
use crate::error::{Error, Result};
use crate::fixedpoint::{from_fixed, FxValue, QFormat};
use crate::model::{LayerParams, LayerSpec, ParamManifest, Weights};
use crate::quant::{quantize_act, ActQuantParams};
use crate::tensor::ActTensor;

/// Per-layer outputs of the floating-point pass.
#[derive(Clone, Debug)]
pub struct FloatLayer {
    pub name: String,
    /// Convolution plus bias, before `Div_current`.
    pub pre: FloatTensor,
    /// Body layers: dequantized activations `q · s_a` before pooling.
    /// Head: `pre · Div_current`.
    pub out: FloatTensor,
    /// Body layers: the 8-bit grid before pooling.
    pub q: Option<ActTensor>,
}

/// Software-side image normalization: `p / 255`.
pub fn image_to_float(image: &ActTensor) -> FloatTensor {
    FloatTensor {
        shape: image.shape,
        data: image.data.iter().map(|&p| p as f64 / 255.0).collect(),
    }
}

fn fixed_values(raws: &[i64], fmt: QFormat) -> Vec<f64> {
    raws.iter()
        .map(|&raw| from_fixed(FxValue { raw, fmt }))
        .collect()
}

/// Real-valued kernel: dequantized fixed weights, or `sign · Mul_prev` for
/// binary layers. Layout `[out][in][ky][kx]`.
pub fn effective_weights(spec: &LayerSpec, p: &LayerParams) -> Vec<f64> {
    match &p.weights {
        Weights::Binary(signs) => {
            let mul = &p.mul_prev.as_ref().expect("validated W1A8 layer").values;
            let taps = spec.kernel * spec.kernel;
            signs
                .expand()
                .iter()
                .enumerate()
                .map(|(idx, &s)| s as f64 * mul[(idx / taps) % spec.in_channels])
                .collect()
        }
        Weights::Fixed(t) => fixed_values(t.raw(), t.fmt()),
    }
}

/// Floating-point forward pass with real scales and fake-quantized 8-bit
/// activations between layers. `image` holds values in `[0, 1]`.
pub fn forward_float(manifest: &ParamManifest, image: &FloatTensor) -> Result<Vec<FloatLayer>> {
    manifest.validate()?;
    let model = &manifest.model;
    if image.shape != model.input {
        return Err(Error::Shape(format!(
            "image {} does not match model input {}",
            image.shape, model.input
        )));
    }
    let mut input = image.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (spec, p) in model.layers.iter().zip(&manifest.layers) {
        let weights = effective_weights(spec, p);
        let bias = fixed_values(p.bias.raw(), p.bias.fmt());
        let pre = conv2d_float(&input, &weights, &bias, spec.kernel, spec.padding)?;
        let div = &p.div_current.values;
        let plane = pre.shape.h * pre.shape.w;

        if spec.is_head() {
            let data = pre
                .data
                .iter()
                .enumerate()
                .map(|(idx, v)| v * div[idx / plane])
                .collect();
            let out = FloatTensor::new(pre.shape, data)?;
            layers.push(FloatLayer {
                name: spec.name.clone(),
                pre,
                out,
                q: None,
            });
            break;
        }

        let act = ActQuantParams::new(p.act_step.expect("validated 8-bit layer"))?;
        let q: Vec<u8> = pre
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| quantize_act(v * div[idx / plane] * act.step(), &act))
            .collect();
        let out = FloatTensor::new(
            pre.shape,
            q.iter().map(|&v| v as f64 * act.step()).collect(),
        )?;
        let q = ActTensor::new(pre.shape, q)?;
        let next = if spec.has_maxpool {
            let (shape, data) = maxpool2x2(q.shape, &q.data)?;
            ActTensor::new(shape, data)?
        } else {
            q.clone()
        };
        input = FloatTensor {
            shape: next.shape,
            data: next.data.iter().map(|&v| v as f64).collect(),
        };
        layers.push(FloatLayer {
            name: spec.name.clone(),
            pre,
            out,
            q: Some(q),
        });
    }
    Ok(layers)
}
