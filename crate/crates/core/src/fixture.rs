//! Seeded synthetic models, manifests and images.
//!
//! Parameters are drawn at random and then calibrated layer by layer on a
//! synthetic image: biases shift each channel so most units are active,
//! and `Div_current` maps the upper tail of the biased response onto the
//! 8-bit grid, so activations neither vanish nor saturate down the chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{HeadLayout, VOC_CLASSES};
use crate::error::Result;
use crate::fixedpoint::{from_fixed, to_fixed, FxValue, QFormat, Rounding};
use crate::model::{
    build_default_model, ConvKind, LayerParams, LayerSpec, ModelSpec, ParamManifest, ScaleVector,
    StoredTensor, Weights, CONV1_BIAS_FMT, CONV1_WEIGHT_FMT, DEFAULT_MUL_FMT, HEAD_BIAS_FMT,
    HEAD_PE_NUM, HEAD_WEIGHT_FMT, MANIFEST_VERSION,
};
use crate::quant::BinaryWeight;
use crate::reference::{conv2d_float, maxpool2x2, FloatTensor};
use crate::tensor::{ActTensor, FxTensor, Shape3};

/// Seed of the frozen default fixture.
pub const FIXTURE_SEED: u64 = 0x57a8_2024;

/// Width of the unsigned `Div_current` formats chosen during calibration.
const DIV_BITS: u32 = 16;
/// Target activation at the calibration percentile.
const BODY_TARGET: f64 = 255.0;
const BODY_PERCENTILE: f64 = 0.999;
const HEAD_TARGET: f64 = 4.0;

/// Smooth colour gradients and blobs plus a little noise; close enough to a
/// natural image for calibration and comparison statistics.
pub fn synthetic_image(shape: Shape3, seed: u64) -> ActTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..shape.c * 3)
        .map(|_| {
            [
                rng.gen_range(20.0..70.0),
                rng.gen_range(0.5..4.0) / shape.w.max(1) as f64,
                rng.gen_range(0.5..4.0) / shape.h.max(1) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(shape.len());
    for c in 0..shape.c {
        let base = rng.gen_range(60.0..190.0);
        for y in 0..shape.h {
            for x in 0..shape.w {
                let mut v = base;
                for [amp, fx, fy, phase, tilt] in &waves[c * 3..c * 3 + 3] {
                    let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64 * tilt) + phase;
                    v += amp * t.sin();
                }
                v += rng.gen_range(-12.0..12.0);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ActTensor { shape, data }
}

/// Uniform random bytes.
pub fn noise_image(shape: Shape3, seed: u64) -> ActTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ActTensor {
        shape,
        data: (0..shape.len()).map(|_| rng.gen()).collect(),
    }
}

/// Three anchors over twenty classes, sized for a 10×10 grid.
pub fn example_layout() -> HeadLayout {
    HeadLayout {
        anchors: vec![[0.08, 0.12], [0.25, 0.3], [0.6, 0.65]],
        classes: VOC_CLASSES,
    }
}

/// The default detector with calibrated random parameters.
pub fn default_fixture(seed: u64) -> Result<ParamManifest> {
    random_manifest(&build_default_model(), seed)
}

/// A 3×20×20 detector with the full 75×10×10 head layout, small enough to
/// check into the repository.
pub fn tiny_fixture_model() -> ModelSpec {
    ModelSpec {
        input: Shape3::new(3, 20, 20),
        layers: vec![
            LayerSpec::standard("conv1", 3, 8, 3, CONV1_WEIGHT_FMT, CONV1_BIAS_FMT).with_maxpool(),
            LayerSpec::w1a8("conv2", 8, 16, 3),
            LayerSpec::w1a8("conv3", 16, 16, 1),
            LayerSpec::standard("conv4", 16, 75, 1, HEAD_WEIGHT_FMT, HEAD_BIAS_FMT).as_head(),
        ],
        head_pe_num: HEAD_PE_NUM,
    }
}

/// A random 3–4 layer chain on an 8×8 input mixing standard, W1A8, 1×1,
/// 3×3 and pooled layers.
pub fn random_tiny_model(seed: u64) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Shape3::new(rng.gen_range(1..=4), 8, 8);
    let depth = rng.gen_range(3..=4);
    let mut layers = Vec::with_capacity(depth);
    let (mut cin, mut h) = (input.c, input.h);
    for idx in 0..depth {
        let name = format!("conv{}", idx + 1);
        let k = if rng.gen_bool(0.7) { 3 } else { 1 };
        let layer = if idx == depth - 1 {
            let cout = rng.gen_range(1..=12);
            LayerSpec::standard(&name, cin, cout, k, HEAD_WEIGHT_FMT, HEAD_BIAS_FMT).as_head()
        } else {
            let cout = rng.gen_range(1..=8);
            let mut l = if idx == 0 && rng.gen_bool(0.5) {
                LayerSpec::standard(&name, cin, cout, k, CONV1_WEIGHT_FMT, CONV1_BIAS_FMT)
            } else if idx > 0 && rng.gen_bool(0.2) {
                LayerSpec::standard(&name, cin, cout, k, HEAD_WEIGHT_FMT, HEAD_BIAS_FMT)
            } else {
                LayerSpec::w1a8(&name, cin, cout, k)
            };
            if h % 2 == 0 && h >= 2 && rng.gen_bool(0.5) {
                l = l.with_maxpool();
                h /= 2;
            }
            cin = cout;
            l
        };
        layers.push(layer);
    }
    ModelSpec {
        input,
        layers,
        head_pe_num: rng.gen_range(1..=HEAD_PE_NUM),
    }
}

/// Random parameters for `model`, calibrated on `synthetic_image(seed + 1)`.
pub fn random_manifest(model: &ModelSpec, seed: u64) -> Result<ParamManifest> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = synthetic_image(model.input, seed.wrapping_add(1));
    let mut input = FloatTensor {
        shape: image.shape,
        data: image.data.iter().map(|&p| p as f64 / 256.0).collect(),
    };
    let mut layers = Vec::with_capacity(model.layers.len());
    for (idx, spec) in model.layers.iter().enumerate() {
        let act_frac = model.input_frac(idx);
        let (weights, mul_prev, eff, acc_frac, bound_raw) =
            draw_weights(&mut rng, spec, idx, act_frac)?;
        let pre = conv2d_float(
            &input,
            &eff,
            &vec![0.0; spec.out_channels],
            spec.kernel,
            spec.padding,
        )?;
        let plane = pre.shape.h * pre.shape.w;

        let bias_bits = if spec.conv_kind == ConvKind::W1a8 {
            32
        } else {
            16
        };
        let mut bias_raw = Vec::with_capacity(spec.out_channels);
        let mut divs = Vec::with_capacity(spec.out_channels);
        let mut biased = vec![0.0; pre.data.len()];
        for o in 0..spec.out_channels {
            let vals = &pre.data[o * plane..(o + 1) * plane];
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let b_real = if spec.is_head() {
                sd * rng.gen_range(-0.5..0.5)
            } else {
                -mean + sd * rng.gen_range(0.0..1.0)
            };
            let b = stored_raw(b_real, spec.bias_fmt, bias_bits);
            let b_eff = from_fixed(FxValue {
                raw: b,
                fmt: spec.bias_fmt,
            });
            bias_raw.push(b);
            let shifted: Vec<f64> = vals.iter().map(|v| v + b_eff).collect();
            biased[o * plane..(o + 1) * plane].copy_from_slice(&shifted);

            let bias_bound =
                (b.unsigned_abs() as f64) * ((acc_frac - spec.bias_fmt.frac_bits()) as f64).exp2();
            let div = if spec.is_head() {
                let abs: Vec<f64> = shifted.iter().map(|v| v.abs()).collect();
                HEAD_TARGET / percentile(&abs, 0.99).max(1e-3)
            } else {
                BODY_TARGET
                    / percentile(&shifted, BODY_PERCENTILE)
                        .max(sd * 0.1)
                        .max(1e-3)
            };
            divs.push((div, bound_raw + bias_bound));
        }
        let (div_fmt, divs) = fit_divs(&divs);

        let act_step = (!spec.is_head()).then(|| rng.gen_range(0.02..0.2));
        let bias = StoredTensor::new(
            FxTensor::new(vec![spec.out_channels], spec.bias_fmt, bias_raw)?,
            bias_bits,
        )?;
        layers.push(LayerParams {
            name: spec.name.clone(),
            weights,
            bias,
            mul_prev,
            div_current: ScaleVector {
                values: divs.clone(),
                fmt: div_fmt,
            },
            act_step,
        });

        if !spec.is_head() {
            let q: Vec<f64> = biased
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let d = to_fixed(divs[i / plane], div_fmt, Rounding::NearestTiesAway)
                        .map(from_fixed);
                    (v * d.unwrap_or(0.0)).round().clamp(0.0, 255.0)
                })
                .collect();
            let (shape, data) = if spec.has_maxpool {
                maxpool2x2(pre.shape, &q)?
            } else {
                (pre.shape, q)
            };
            input = FloatTensor { shape, data };
        }
    }
    let manifest = ParamManifest {
        version: MANIFEST_VERSION,
        model: model.clone(),
        layers,
    };
    manifest.validate()?;
    Ok(manifest)
}

type Drawn = (Weights, Option<ScaleVector>, Vec<f64>, u32, f64);

/// Draws a layer's weights. Returns the stored weights, `Mul_prev`, the
/// real-valued kernel, the accumulator fraction and the accumulator bound
/// in raw units.
fn draw_weights(
    rng: &mut ChaCha8Rng,
    spec: &LayerSpec,
    idx: usize,
    act_frac: u32,
) -> Result<Drawn> {
    let taps = spec.kernel * spec.kernel;
    let fan_in = spec.in_channels * taps;
    match spec.conv_kind {
        ConvKind::W1a8 => {
            let signs: Vec<bool> = (0..spec.weight_count()).map(|_| rng.gen()).collect();
            let signs = BinaryWeight::new(spec.out_channels, spec.in_channels, spec.kernel, signs)?;
            let mul: Vec<f64> = (0..spec.in_channels)
                .map(|_| rng.gen_range(0.25..1.75))
                .collect();
            let mul_raw: Vec<i64> = mul
                .iter()
                .map(|&m| to_fixed(m, DEFAULT_MUL_FMT, Rounding::NearestTiesAway).map(|v| v.raw))
                .collect::<Result<_>>()?;
            let eff = signs
                .expand()
                .iter()
                .enumerate()
                .map(|(i, &s)| s as f64 * mul[(i / taps) % spec.in_channels])
                .collect();
            let bound = mul_raw.iter().sum::<i64>() as f64 * 255.0 * taps as f64;
            let acc_frac = DEFAULT_MUL_FMT.frac_bits() + act_frac;
            let mul_prev = ScaleVector {
                values: mul,
                fmt: DEFAULT_MUL_FMT,
            };
            Ok((Weights::Binary(signs), Some(mul_prev), eff, acc_frac, bound))
        }
        ConvKind::Standard => {
            let fmt = match spec.weight_fmt {
                crate::model::WeightFormat::Fixed(f) => f,
                crate::model::WeightFormat::Binary => unreachable!("validated standard layer"),
            };
            // the image enters in [0, 1); later wires carry integers up to 255
            let gain = if idx == 0 { 1.0 } else { 1.0 / 16.0 };
            let a = gain * (3.0 / fan_in as f64).sqrt();
            let mut real: Vec<f64> = (0..spec.weight_count())
                .map(|_| rng.gen_range(-a..a))
                .collect();
            if idx == 0 && taps > 1 {
                // first-layer filters respond to edges rather than brightness
                for k in real.chunks_mut(taps) {
                    let mean = k.iter().sum::<f64>() / taps as f64;
                    k.iter_mut().for_each(|w| *w -= mean);
                }
            }
            let raw: Vec<i64> = real.iter().map(|&w| stored_raw(w, fmt, 16)).collect();
            let eff = raw
                .iter()
                .map(|&r| from_fixed(FxValue { raw: r, fmt }))
                .collect();
            let bound = raw
                .chunks(fan_in)
                .map(|row| row.iter().map(|r| r.unsigned_abs() as f64).sum::<f64>() * 255.0)
                .fold(0.0, f64::max);
            let w = StoredTensor::new(
                FxTensor::new(
                    vec![
                        spec.out_channels,
                        spec.in_channels,
                        spec.kernel,
                        spec.kernel,
                    ],
                    fmt,
                    raw,
                )?,
                16,
            )?;
            Ok((
                Weights::Fixed(w),
                None,
                eff,
                fmt.frac_bits() + act_frac,
                bound,
            ))
        }
    }
}

/// Rounds to `fmt` and clamps to what `bits` of storage can hold.
fn stored_raw(x: f64, fmt: QFormat, bits: u32) -> i64 {
    let raw = to_fixed(x, fmt, Rounding::NearestTiesAway)
        .map(|v| v.raw)
        .unwrap_or(0);
    let lim = 1i64 << (bits - 1);
    raw.clamp(-lim, lim - 1)
}

/// Picks the smallest `uQk.(16-k)` holding every divisor, after capping
/// each so that `(acc + bias) · div` stays inside 47 magnitude bits.
/// `wanted` pairs the calibrated divisor with the channel's raw bound.
fn fit_divs(wanted: &[(f64, f64)]) -> (QFormat, Vec<f64>) {
    for k in 0..=DIV_BITS {
        let fmt = QFormat::uq(k, DIV_BITS - k);
        let divs: Vec<f64> = wanted
            .iter()
            .map(|&(d, bound)| {
                let cap = (47.0 - fmt.frac_bits() as f64).exp2() / (bound.max(1.0) * 1.01);
                d.min(cap).max(fmt.lsb())
            })
            .collect();
        if divs.iter().all(|&d| d < fmt.range().1 + fmt.lsb() / 2.0) {
            return (fmt, divs);
        }
    }
    let fmt = QFormat::uq(DIV_BITS, 0);
    (
        fmt,
        wanted
            .iter()
            .map(|&(d, _)| d.clamp(1.0, fmt.range().1))
            .collect(),
    )
}

fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * p).round() as usize]
}
