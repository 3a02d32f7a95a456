//! Layer chain description, parameter manifests and storage estimates.

mod manifest;
mod storage;

pub use manifest::{
    load_manifest, save_manifest, LayerParams, ParamManifest, ScaleVector, StoredTensor, Weights,
    MANIFEST_VERSION,
};
pub use storage::{estimate_storage, StorageReport, StorageRow, StorageRowKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::QFormat;
use crate::tensor::Shape3;

pub const INPUT_FMT: QFormat = QFormat::uq(0, 8);
pub const CONV1_WEIGHT_FMT: QFormat = QFormat::sq(5, 11);
pub const CONV1_BIAS_FMT: QFormat = QFormat::sq(2, 14);
pub const HEAD_WEIGHT_FMT: QFormat = QFormat::sq(1, 15);
pub const HEAD_BIAS_FMT: QFormat = QFormat::sq(4, 12);
/// Bias correction for W1A8 layers is expressed directly in accumulator
/// units (fraction of the default `Mul_prev` format).
pub const W1A8_BIAS_FMT: QFormat = QFormat::sq(17, 14);
/// Raw head output: 32-bit signed, 15 fraction bits.
pub const HEAD_OUT_FMT: QFormat = QFormat::sq(16, 15);
/// Clipped 8-bit activation grid.
pub const ACT_FMT: QFormat = QFormat::uq(8, 0);
pub const DEFAULT_MUL_FMT: QFormat = QFormat::sq(2, 14);
pub const DEFAULT_DIV_FMT: QFormat = QFormat::uq(0, 16);

/// Output channels the head PE computes per pass.
pub const HEAD_PE_NUM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Standard,
    W1a8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActOut {
    /// Post-processed and clipped to `[0, 255]`.
    U8,
    /// Signed 32-bit raw value with 15 fraction bits, no clip.
    RawQ15,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightFormat {
    /// One sign bit per weight.
    Binary,
    Fixed(QFormat),
}

impl std::fmt::Display for WeightFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightFormat::Binary => f.write_str("b1"),
            WeightFormat::Fixed(q) => q.fmt(f),
        }
    }
}

impl std::str::FromStr for WeightFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "b1" {
            Ok(WeightFormat::Binary)
        } else {
            s.parse().map(WeightFormat::Fixed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub conv_kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel size, 1 or 3.
    pub kernel: usize,
    pub padding: usize,
    pub has_post: bool,
    pub has_maxpool: bool,
    pub weight_fmt: WeightFormat,
    pub bias_fmt: QFormat,
    pub activation_out: ActOut,
}

impl LayerSpec {
    pub fn standard(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        w: QFormat,
        b: QFormat,
    ) -> Self {
        LayerSpec {
            name: name.to_string(),
            conv_kind: ConvKind::Standard,
            in_channels: cin,
            out_channels: cout,
            kernel,
            padding: kernel / 2,
            has_post: true,
            has_maxpool: false,
            weight_fmt: WeightFormat::Fixed(w),
            bias_fmt: b,
            activation_out: ActOut::U8,
        }
    }

    pub fn w1a8(name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            conv_kind: ConvKind::W1a8,
            in_channels: cin,
            out_channels: cout,
            kernel,
            padding: kernel / 2,
            has_post: true,
            has_maxpool: false,
            weight_fmt: WeightFormat::Binary,
            bias_fmt: W1A8_BIAS_FMT,
            activation_out: ActOut::U8,
        }
    }

    pub fn with_maxpool(mut self) -> Self {
        self.has_maxpool = true;
        self
    }

    /// Turns the layer into a raw detection head (no clip, no pooling).
    pub fn as_head(mut self) -> Self {
        self.has_post = false;
        self.has_maxpool = false;
        self.activation_out = ActOut::RawQ15;
        self
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn is_head(&self) -> bool {
        self.activation_out == ActOut::RawQ15
    }
}

/// Spatial shapes seen by one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: Shape3,
    /// Output of the convolution (and post-process), before pooling.
    pub conv: Shape3,
    /// What the next layer receives.
    pub output: Shape3,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
    /// Channels per pass of the head PE; sets the serialization grouping.
    pub head_pe_num: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |layer: &str, msg: String| Err(Error::Shape(format!("{layer}: {msg}")));
        if self.layers.is_empty() {
            return fail("model", "no layers".into());
        }
        if self.head_pe_num == 0 {
            return fail("model", "head_pe_num must be positive".into());
        }
        let mut shape = self.input;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != shape.c {
                return fail(
                    &l.name,
                    format!(
                        "expects {} input channels, receives {}",
                        l.in_channels, shape.c
                    ),
                );
            }
            if l.out_channels == 0 {
                return fail(&l.name, "zero output channels".into());
            }
            if !matches!(l.kernel, 1 | 3) || l.padding != l.kernel / 2 {
                return fail(
                    &l.name,
                    format!(
                        "kernel {} with padding {} is not supported",
                        l.kernel, l.padding
                    ),
                );
            }
            match (l.conv_kind, l.weight_fmt) {
                (ConvKind::W1a8, WeightFormat::Binary)
                | (ConvKind::Standard, WeightFormat::Fixed(_)) => {}
                _ => {
                    return fail(
                        &l.name,
                        format!(
                            "{:?} layer cannot use {} weights",
                            l.conv_kind, l.weight_fmt
                        ),
                    )
                }
            }
            if l.has_post != (l.activation_out == ActOut::U8) {
                return fail(
                    &l.name,
                    "post-process flag disagrees with the output kind".into(),
                );
            }
            if l.is_head() != (i == last) {
                return fail(
                    &l.name,
                    "exactly the final layer must produce the raw head".into(),
                );
            }
            if l.has_maxpool {
                if l.is_head() {
                    return fail(&l.name, "head cannot be pooled".into());
                }
                if !shape.h.is_multiple_of(2) || !shape.w.is_multiple_of(2) {
                    return fail(
                        &l.name,
                        format!("maxpool needs even dimensions, got {}x{}", shape.h, shape.w),
                    );
                }
            }
            shape = Shape3::new(l.out_channels, shape.h, shape.w);
            if l.has_maxpool {
                shape = Shape3::new(shape.c, shape.h / 2, shape.w / 2);
            }
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShapes> {
        let mut shape = self.input;
        self.layers
            .iter()
            .map(|l| {
                let input = shape;
                let conv = Shape3::new(l.out_channels, input.h, input.w);
                let output = if l.has_maxpool {
                    Shape3::new(conv.c, conv.h / 2, conv.w / 2)
                } else {
                    conv
                };
                shape = output;
                LayerShapes {
                    input,
                    conv,
                    output,
                }
            })
            .collect()
    }

    pub fn output_shape(&self) -> Shape3 {
        self.layer_shapes()
            .last()
            .map(|s| s.output)
            .unwrap_or(self.input)
    }

    /// Fraction bits of the activations a layer consumes: the image enters
    /// as Q0.8, every later wire is an integer 8-bit grid.
    pub fn input_frac(&self, layer: usize) -> u32 {
        if layer == 0 {
            INPUT_FMT.frac_bits()
        } else {
            0
        }
    }

    /// Length of the serialized head.
    pub fn head_words(&self) -> usize {
        self.output_shape().len()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Total weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight_count() + l.out_channels)
            .sum()
    }
}

/// The 11-convolution, 5-maxpool detector: 3x320x320 in, 75x10x10 out.
pub fn build_default_model() -> ModelSpec {
    let layers = vec![
        LayerSpec::standard("conv1", 3, 16, 3, CONV1_WEIGHT_FMT, CONV1_BIAS_FMT).with_maxpool(),
        LayerSpec::w1a8("conv2", 16, 32, 3).with_maxpool(),
        LayerSpec::w1a8("conv3", 32, 64, 3).with_maxpool(),
        LayerSpec::w1a8("conv4", 64, 128, 3).with_maxpool(),
        LayerSpec::w1a8("conv5", 128, 128, 3),
        LayerSpec::w1a8("conv6", 128, 128, 3),
        LayerSpec::w1a8("conv7", 128, 128, 3).with_maxpool(),
        LayerSpec::w1a8("conv8", 128, 128, 3),
        LayerSpec::w1a8("conv9", 128, 64, 1),
        LayerSpec::w1a8("conv10", 64, 64, 3),
        LayerSpec::standard("conv11", 64, 75, 1, HEAD_WEIGHT_FMT, HEAD_BIAS_FMT).as_head(),
    ];
    ModelSpec {
        input: Shape3::new(3, 320, 320),
        layers,
        head_pe_num: HEAD_PE_NUM,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_matches_layer_table() {
        let m = build_default_model();
        m.validate().unwrap();
        assert_eq!(m.layers.len(), 11);
        let outs: Vec<_> = m.layers.iter().map(|l| l.out_channels).collect();
        assert_eq!(outs, [16, 32, 64, 128, 128, 128, 128, 128, 64, 64, 75]);

        let conv2 = &m.layers[1];
        assert_eq!(conv2.conv_kind, ConvKind::W1a8);
        assert_eq!(
            (conv2.in_channels, conv2.out_channels, conv2.kernel),
            (16, 32, 3)
        );
        assert!(conv2.has_post && conv2.has_maxpool);

        let conv9 = &m.layers[8];
        assert_eq!(
            (
                conv9.kernel,
                conv9.in_channels,
                conv9.out_channels,
                conv9.padding
            ),
            (1, 128, 64, 0)
        );

        let pooled: Vec<_> = m
            .layers
            .iter()
            .filter(|l| l.has_maxpool)
            .map(|l| l.name.as_str())
            .collect();
        assert_eq!(pooled, ["conv1", "conv2", "conv3", "conv4", "conv7"]);
        let standard: Vec<_> = m
            .layers
            .iter()
            .filter(|l| l.conv_kind == ConvKind::Standard)
            .map(|l| l.name.as_str())
            .collect();
        assert_eq!(standard, ["conv1", "conv11"]);

        assert_eq!(
            m.layers[0].weight_fmt,
            WeightFormat::Fixed(QFormat::sq(5, 11))
        );
        assert_eq!(m.layers[0].bias_fmt, QFormat::sq(2, 14));
        assert_eq!(
            m.layers[10].weight_fmt,
            WeightFormat::Fixed(QFormat::sq(1, 15))
        );
        assert_eq!(m.layers[10].bias_fmt, QFormat::sq(4, 12));

        assert_eq!(m.output_shape(), Shape3::new(75, 10, 10));
        assert_eq!(m.head_words(), 7500);
    }

    #[test]
    fn spatial_size_halves_at_each_pool() {
        let m = build_default_model();
        let mut sizes: Vec<usize> = vec![m.input.w];
        for s in m.layer_shapes() {
            if s.output.w != *sizes.last().unwrap() {
                sizes.push(s.output.w);
            }
        }
        assert_eq!(sizes, [320, 160, 80, 40, 20, 10]);
    }

    #[test]
    fn parameter_count_close_to_published_total() {
        let m = build_default_model();
        let bits: usize = m
            .layers
            .iter()
            .filter(|l| l.conv_kind == ConvKind::W1a8)
            .map(|l| l.weight_count())
            .sum();
        assert_eq!(bits, 4608 + 18432 + 73728 + 4 * 147456 + 8192 + 36864);
        let total = m.parameter_count() as f64;
        assert!((total / 0.74e6 - 1.0).abs() < 0.05, "{total}");
    }

    #[test]
    fn validation_rejects_broken_chains() {
        let mut m = build_default_model();
        m.layers[3].in_channels = 63;
        assert!(m.validate().is_err());

        let mut m = build_default_model();
        m.layers[10].has_maxpool = true;
        assert!(m.validate().is_err());

        let mut m = build_default_model();
        m.layers[2].weight_fmt = WeightFormat::Fixed(QFormat::sq(1, 15));
        assert!(m.validate().is_err());

        let mut m = build_default_model();
        m.input = Shape3::new(3, 318, 318);
        // 318 -> 159 is odd at the second pool
        assert!(m.validate().is_err());
    }

    #[test]
    fn weight_format_strings() {
        assert_eq!("b1".parse::<WeightFormat>().unwrap(), WeightFormat::Binary);
        assert_eq!(
            "sQ5.11".parse::<WeightFormat>().unwrap(),
            WeightFormat::Fixed(CONV1_WEIGHT_FMT)
        );
        assert!("b2".parse::<WeightFormat>().is_err());
    }
}
