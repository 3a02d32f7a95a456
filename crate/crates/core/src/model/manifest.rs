//! On-disk parameter bundle: `manifest.json` plus little-endian blobs.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<layer>_w.bin    weights, [out][in][ky][kx]; i16/i32 LE or packed sign bits
//! <dir>/<layer>_b.bin    biases, i16/i32 LE
//! <dir>/<layer>_mul.bin  Mul_prev, f64 LE, one per input channel (W1A8 layers only)
//! <dir>/<layer>_div.bin  Div_current, f64 LE, one per output channel
//! ```
//!
//! Sign bits are packed LSB-first within each byte, `+1 ↦ 1`. Scales stay
//! real-valued on disk and carry the fixed-point format they are converted
//! to when the datapath is built.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActOut, ConvKind, LayerSpec, ModelSpec, WeightFormat};
use crate::error::{Error, ManifestError, Result};
use crate::fixedpoint::{QFormat, CARRIER_BITS};
use crate::quant::{scale_vector_to_fixed, BinaryWeight};
use crate::tensor::{FxTensor, Shape3};

pub const MANIFEST_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "manifest.json";
const WEIGHT_ORDERING: &str = "oc,ic,ky,kx";

/// Accumulator budgets, sign bit included.
pub const W1A8_ACC_BITS: u32 = 48;
pub const STANDARD_ACC_BITS: u32 = 40;

/// Fixed-point tensor with its declared storage width (16 or 32 bits).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredTensor {
    pub tensor: FxTensor,
    pub stored_bits: u32,
}

impl StoredTensor {
    pub fn new(tensor: FxTensor, stored_bits: u32) -> Result<Self> {
        if !matches!(stored_bits, 16 | 32) {
            return Err(Error::InvalidFormat(format!(
                "stored width {stored_bits} is not 16 or 32"
            )));
        }
        let lim = 1i64 << (stored_bits - 1);
        if let Some(bad) = tensor.data.iter().find(|&&r| r < -lim || r >= lim) {
            return Err(Error::InvalidFormat(format!(
                "raw {bad} does not fit {stored_bits} stored bits"
            )));
        }
        Ok(StoredTensor {
            tensor,
            stored_bits,
        })
    }

    pub fn fmt(&self) -> QFormat {
        self.tensor.fmt
    }

    pub fn raw(&self) -> &[i64] {
        &self.tensor.data
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Weights {
    Binary(BinaryWeight),
    Fixed(StoredTensor),
}

/// Real-valued per-channel scales with their target fixed-point format.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector {
    pub values: Vec<f64>,
    pub fmt: QFormat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weights: Weights,
    pub bias: StoredTensor,
    /// Input-channel compensation, present on W1A8 layers only.
    pub mul_prev: Option<ScaleVector>,
    pub div_current: ScaleVector,
    /// Activation step size `s_a` of the layer's 8-bit output.
    pub act_step: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamManifest {
    pub version: u32,
    pub model: ModelSpec,
    pub layers: Vec<LayerParams>,
}

impl ParamManifest {
    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Checks every blob against the model and proves the accumulators and
    /// post-process products stay inside their carrier budgets.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(ManifestError::VersionMismatch {
                found: self.version,
                expected: MANIFEST_VERSION,
            }
            .into());
        }
        self.model.validate()?;
        if self.layers.len() != self.model.layers.len() {
            return Err(ManifestError::invalid(
                "model",
                "layers",
                format!(
                    "{} parameter entries for {} layers",
                    self.layers.len(),
                    self.model.layers.len()
                ),
            )
            .into());
        }
        for (idx, (spec, p)) in self.model.layers.iter().zip(&self.layers).enumerate() {
            validate_layer(&self.model, idx, spec, p)?;
        }
        Ok(())
    }
}

fn validate_layer(model: &ModelSpec, idx: usize, spec: &LayerSpec, p: &LayerParams) -> Result<()> {
    let layer = spec.name.as_str();
    let invalid = |field: &str, reason: String| -> Error {
        ManifestError::invalid(layer, field, reason).into()
    };
    if p.name != spec.name {
        return Err(invalid("name", format!("parameters are for {:?}", p.name)));
    }
    let act_frac = model.input_frac(idx);

    let acc_frac;
    // per output channel
    let acc_bound: Vec<i128>;
    match (&p.weights, spec.weight_fmt) {
        (Weights::Binary(b), WeightFormat::Binary) => {
            if (b.out_channels, b.in_channels, b.kernel)
                != (spec.out_channels, spec.in_channels, spec.kernel)
            {
                return Err(invalid(
                    "weights",
                    "sign tensor dimensions disagree with the layer".into(),
                ));
            }
            let mul = p
                .mul_prev
                .as_ref()
                .ok_or_else(|| invalid("mul_prev", "W1A8 layers need Mul_prev".into()))?;
            if mul.values.len() != spec.in_channels {
                return Err(invalid(
                    "mul_prev",
                    format!(
                        "{} scales for {} input channels",
                        mul.values.len(),
                        spec.in_channels
                    ),
                ));
            }
            let fixed = scale_vector_to_fixed(&mul.values, mul.fmt)
                .map_err(|e| invalid("mul_prev", e.to_string()))?;
            acc_frac = mul.fmt.frac_bits() + act_frac;
            let taps = (spec.kernel * spec.kernel) as i128;
            let bound: i128 = fixed.iter().map(|m| m.raw as i128 * 255 * taps).sum();
            check_budget(layer, bound, W1A8_ACC_BITS)?;
            acc_bound = vec![bound; spec.out_channels];
        }
        (Weights::Fixed(w), WeightFormat::Fixed(fmt)) => {
            if w.fmt() != fmt {
                return Err(invalid(
                    "weights",
                    format!("declared {} but the layer uses {fmt}", w.fmt()),
                ));
            }
            let want = vec![
                spec.out_channels,
                spec.in_channels,
                spec.kernel,
                spec.kernel,
            ];
            if w.tensor.shape != want {
                return Err(invalid(
                    "weights",
                    format!("shape {:?}, expected {want:?}", w.tensor.shape),
                ));
            }
            if p.mul_prev.is_some() {
                return Err(invalid(
                    "mul_prev",
                    "standard layers take no Mul_prev".into(),
                ));
            }
            acc_frac = fmt.frac_bits() + act_frac;
            let per_out = spec.in_channels * spec.kernel * spec.kernel;
            acc_bound = w
                .raw()
                .chunks(per_out)
                .map(|row| {
                    row.iter()
                        .map(|r| r.unsigned_abs() as i128 * 255)
                        .sum::<i128>()
                })
                .collect();
            check_budget(
                layer,
                acc_bound.iter().copied().max().unwrap_or(0),
                STANDARD_ACC_BITS,
            )?;
        }
        _ => {
            return Err(invalid(
                "weights",
                format!("layer expects {} weights", spec.weight_fmt),
            ))
        }
    }

    if p.bias.fmt() != spec.bias_fmt {
        return Err(invalid(
            "bias",
            format!(
                "declared {} but the layer uses {}",
                p.bias.fmt(),
                spec.bias_fmt
            ),
        ));
    }
    if p.bias.tensor.shape != [spec.out_channels] {
        return Err(invalid(
            "bias",
            format!(
                "shape {:?}, expected [{}]",
                p.bias.tensor.shape, spec.out_channels
            ),
        ));
    }
    let bias_frac = p.bias.fmt().frac_bits();
    if bias_frac > acc_frac {
        return Err(invalid(
            "bias",
            format!(
                "{bias_frac} fraction bits cannot be aligned to the {acc_frac}-bit accumulator"
            ),
        ));
    }

    let div = &p.div_current;
    if div.values.len() != spec.out_channels {
        return Err(invalid(
            "div_current",
            format!(
                "{} scales for {} output channels",
                div.values.len(),
                spec.out_channels
            ),
        ));
    }
    let div_fixed = scale_vector_to_fixed(&div.values, div.fmt)
        .map_err(|e| invalid("div_current", e.to_string()))?;
    let product_frac = acc_frac + div.fmt.frac_bits();
    let out_frac = if spec.is_head() {
        super::HEAD_OUT_FMT.frac_bits()
    } else {
        0
    };
    if product_frac > crate::fixedpoint::MAX_PRODUCT_FRAC || product_frac < out_frac {
        return Err(invalid(
            "div_current",
            format!("post-process product has {product_frac} fraction bits, needs {out_frac}..=40"),
        ));
    }
    let product_bound = acc_bound
        .iter()
        .zip(p.bias.raw())
        .zip(&div_fixed)
        .map(|((acc, b), d)| {
            (acc + ((b.unsigned_abs() as i128) << (acc_frac - bias_frac))) * d.raw as i128
        })
        .max()
        .unwrap_or(0);
    check_budget(layer, product_bound, CARRIER_BITS)?;

    match (spec.activation_out, p.act_step) {
        (ActOut::U8, Some(s)) if s.is_finite() && s > 0.0 => {}
        (ActOut::U8, _) => {
            return Err(invalid(
                "act_step",
                "8-bit layers need a positive step size".into(),
            ))
        }
        (ActOut::RawQ15, None) => {}
        (ActOut::RawQ15, Some(_)) => {
            return Err(invalid("act_step", "the raw head has no step size".into()))
        }
    }
    Ok(())
}

fn check_budget(layer: &str, bound: i128, budget: u32) -> Result<()> {
    // magnitude bits plus sign
    let needed = 129 - bound.leading_zeros();
    if needed > budget {
        return Err(Error::AccumulatorBudget {
            layer: layer.to_string(),
            needed,
            budget,
        });
    }
    Ok(())
}

// ---- on-disk header -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    endianness: String,
    model: ModelHeader,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    input: [usize; 3],
    head_pe_num: usize,
    layers: Vec<LayerSpecHeader>,
}

#[derive(Serialize, Deserialize)]
struct LayerSpecHeader {
    name: String,
    conv_kind: ConvKind,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    padding: usize,
    has_post: bool,
    has_maxpool: bool,
    weight_format: String,
    bias_format: String,
    activation_out: ActOut,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    weights: BlobEntry,
    bias: BlobEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mul_prev: Option<BlobEntry>,
    div_current: BlobEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_step: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    file: String,
    format: String,
    encoding: Encoding,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ordering: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Encoding {
    I16le,
    I32le,
    BitsLsb,
    F64le,
}

impl Encoding {
    fn for_bits(bits: u32) -> Self {
        if bits == 16 {
            Encoding::I16le
        } else {
            Encoding::I32le
        }
    }

    fn byte_len(self, count: usize) -> usize {
        match self {
            Encoding::I16le => 2 * count,
            Encoding::I32le => 4 * count,
            Encoding::BitsLsb => count.div_ceil(8),
            Encoding::F64le => 8 * count,
        }
    }
}

fn parse_format(layer: &str, field: &str, value: &str) -> Result<QFormat> {
    value.parse().map_err(|_| {
        ManifestError::UnknownFormat {
            layer: layer.to_string(),
            field: field.to_string(),
            value: value.to_string(),
        }
        .into()
    })
}

fn model_from_header(h: &ModelHeader) -> Result<ModelSpec> {
    let layers = h
        .layers
        .iter()
        .map(|l| {
            let weight_fmt: WeightFormat =
                l.weight_format
                    .parse()
                    .map_err(|_| ManifestError::UnknownFormat {
                        layer: l.name.clone(),
                        field: "weight_format".into(),
                        value: l.weight_format.clone(),
                    })?;
            Ok(LayerSpec {
                name: l.name.clone(),
                conv_kind: l.conv_kind,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                padding: l.padding,
                has_post: l.has_post,
                has_maxpool: l.has_maxpool,
                weight_fmt,
                bias_fmt: parse_format(&l.name, "bias_format", &l.bias_format)?,
                activation_out: l.activation_out,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSpec {
        input: Shape3::new(h.input[0], h.input[1], h.input[2]),
        layers,
        head_pe_num: h.head_pe_num,
    })
}

fn model_header(m: &ModelSpec) -> ModelHeader {
    ModelHeader {
        input: m.input.dims(),
        head_pe_num: m.head_pe_num,
        layers: m
            .layers
            .iter()
            .map(|l| LayerSpecHeader {
                name: l.name.clone(),
                conv_kind: l.conv_kind,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                padding: l.padding,
                has_post: l.has_post,
                has_maxpool: l.has_maxpool,
                weight_format: l.weight_fmt.to_string(),
                bias_format: l.bias_fmt.to_string(),
                activation_out: l.activation_out,
            })
            .collect(),
    }
}

struct BlobReader<'a> {
    dir: &'a Path,
    layer: &'a str,
}

impl BlobReader<'_> {
    fn read(&self, field: &str, entry: &BlobEntry, expected_count: usize) -> Result<Vec<u8>> {
        let path = self.dir.join(&entry.file);
        if !path.is_file() {
            return Err(ManifestError::MissingBlob {
                layer: self.layer.to_string(),
                field: field.to_string(),
                path,
            }
            .into());
        }
        let count: usize = entry.shape.iter().product();
        if count != expected_count {
            return Err(ManifestError::invalid(
                self.layer,
                field,
                format!(
                    "declared shape {:?} holds {count} values, layer needs {expected_count}",
                    entry.shape
                ),
            )
            .into());
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let expected = entry.encoding.byte_len(count);
        if bytes.len() != expected {
            return Err(ManifestError::LengthMismatch {
                layer: self.layer.to_string(),
                field: field.to_string(),
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        Ok(bytes)
    }

    fn stored(
        &self,
        field: &str,
        entry: &BlobEntry,
        expected_count: usize,
    ) -> Result<StoredTensor> {
        let fmt = parse_format(self.layer, field, &entry.format)?;
        let bytes = self.read(field, entry, expected_count)?;
        let (data, bits): (Vec<i64>, u32) = match entry.encoding {
            Encoding::I16le => (
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as i64)
                    .collect(),
                16,
            ),
            Encoding::I32le => (
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
                    .collect(),
                32,
            ),
            other => {
                return Err(ManifestError::invalid(
                    self.layer,
                    field,
                    format!("{other:?} is not a fixed-point encoding"),
                )
                .into())
            }
        };
        let wrap =
            |e: Error| -> Error { ManifestError::invalid(self.layer, field, e.to_string()).into() };
        let tensor = FxTensor::new(entry.shape.clone(), fmt, data).map_err(wrap)?;
        StoredTensor::new(tensor, bits).map_err(wrap)
    }

    fn scales(&self, field: &str, entry: &BlobEntry, expected_count: usize) -> Result<ScaleVector> {
        let fmt = parse_format(self.layer, field, &entry.format)?;
        if entry.encoding != Encoding::F64le {
            return Err(ManifestError::invalid(
                self.layer,
                field,
                "scales must be f64le".to_string(),
            )
            .into());
        }
        let bytes = self.read(field, entry, expected_count)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(ScaleVector { values, fmt })
    }
}

/// Reads and fully validates a manifest directory.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<ParamManifest> {
    let dir = dir.as_ref();
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path)
        .map_err(|e| Error::io(header_path.display().to_string(), e))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.version != MANIFEST_VERSION {
        return Err(ManifestError::VersionMismatch {
            found: header.version,
            expected: MANIFEST_VERSION,
        }
        .into());
    }
    if header.endianness != "little" {
        return Err(ManifestError::invalid(
            "model",
            "endianness",
            format!("{:?} is not supported", header.endianness),
        )
        .into());
    }
    let model = model_from_header(&header.model)?;
    model.validate()?;
    if header.layers.len() != model.layers.len() {
        return Err(ManifestError::invalid(
            "model",
            "layers",
            format!(
                "{} parameter entries for {} layers",
                header.layers.len(),
                model.layers.len()
            ),
        )
        .into());
    }

    let mut layers = Vec::with_capacity(model.layers.len());
    for (spec, lh) in model.layers.iter().zip(&header.layers) {
        if lh.name != spec.name {
            return Err(ManifestError::invalid(
                &spec.name,
                "name",
                format!("parameter entry is named {:?}", lh.name),
            )
            .into());
        }
        let rd = BlobReader {
            dir,
            layer: &spec.name,
        };
        if let Some(ord) = &lh.weights.ordering {
            if ord != WEIGHT_ORDERING {
                return Err(ManifestError::invalid(
                    &spec.name,
                    "weights",
                    format!("ordering {ord:?} is not {WEIGHT_ORDERING}"),
                )
                .into());
            }
        }
        let weights = match spec.weight_fmt {
            WeightFormat::Binary => {
                if lh.weights.format != "b1" || lh.weights.encoding != Encoding::BitsLsb {
                    return Err(ManifestError::UnknownFormat {
                        layer: spec.name.clone(),
                        field: "weights".into(),
                        value: format!("{} / {:?}", lh.weights.format, lh.weights.encoding),
                    }
                    .into());
                }
                let bytes = rd.read("weights", &lh.weights, spec.weight_count())?;
                Weights::Binary(BinaryWeight::from_packed_bytes(
                    spec.out_channels,
                    spec.in_channels,
                    spec.kernel,
                    &bytes,
                )?)
            }
            WeightFormat::Fixed(_) => {
                Weights::Fixed(rd.stored("weights", &lh.weights, spec.weight_count())?)
            }
        };
        let bias = rd.stored("bias", &lh.bias, spec.out_channels)?;
        let mul_prev = lh
            .mul_prev
            .as_ref()
            .map(|e| rd.scales("mul_prev", e, spec.in_channels))
            .transpose()?;
        let div_current = rd.scales("div_current", &lh.div_current, spec.out_channels)?;
        layers.push(LayerParams {
            name: spec.name.clone(),
            weights,
            bias,
            mul_prev,
            div_current,
            act_step: lh.act_step,
        });
    }
    let manifest = ParamManifest {
        version: header.version,
        model,
        layers,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn encode_stored(t: &StoredTensor) -> Vec<u8> {
    match t.stored_bits {
        16 => t
            .raw()
            .iter()
            .flat_map(|&r| (r as i16).to_le_bytes())
            .collect(),
        _ => t
            .raw()
            .iter()
            .flat_map(|&r| (r as i32).to_le_bytes())
            .collect(),
    }
}

fn stored_entry(file: String, t: &StoredTensor, ordering: Option<&str>) -> BlobEntry {
    BlobEntry {
        file,
        format: t.fmt().to_string(),
        encoding: Encoding::for_bits(t.stored_bits),
        shape: t.tensor.shape.clone(),
        ordering: ordering.map(str::to_string),
    }
}

fn scale_entry(file: String, s: &ScaleVector) -> BlobEntry {
    BlobEntry {
        file,
        format: s.fmt.to_string(),
        encoding: Encoding::F64le,
        shape: vec![s.values.len()],
        ordering: None,
    }
}

/// Writes a manifest directory. Output bytes depend only on `m`.
pub fn save_manifest(m: &ParamManifest, dir: impl AsRef<Path>) -> Result<()> {
    m.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    };

    let mut layer_headers = Vec::with_capacity(m.layers.len());
    for p in &m.layers {
        let wfile = format!("{}_w.bin", p.name);
        let weights = match &p.weights {
            Weights::Binary(b) => {
                write(&wfile, &b.pack_bytes())?;
                BlobEntry {
                    file: wfile,
                    format: "b1".into(),
                    encoding: Encoding::BitsLsb,
                    shape: vec![b.out_channels, b.in_channels, b.kernel, b.kernel],
                    ordering: Some(WEIGHT_ORDERING.into()),
                }
            }
            Weights::Fixed(t) => {
                write(&wfile, &encode_stored(t))?;
                stored_entry(wfile, t, Some(WEIGHT_ORDERING))
            }
        };
        let bfile = format!("{}_b.bin", p.name);
        write(&bfile, &encode_stored(&p.bias))?;
        let mul_prev = match &p.mul_prev {
            Some(s) => {
                let f = format!("{}_mul.bin", p.name);
                write(&f, &f64_bytes(&s.values))?;
                Some(scale_entry(f, s))
            }
            None => None,
        };
        let dfile = format!("{}_div.bin", p.name);
        write(&dfile, &f64_bytes(&p.div_current.values))?;
        layer_headers.push(LayerHeader {
            name: p.name.clone(),
            weights,
            bias: stored_entry(bfile, &p.bias, None),
            mul_prev,
            div_current: scale_entry(dfile, &p.div_current),
            act_step: p.act_step,
        });
    }
    let header = Header {
        version: m.version,
        endianness: "little".into(),
        model: model_header(&m.model),
        layers: layer_headers,
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    write(HEADER_FILE, text.as_bytes())
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}
