//! Bit-exact W1A8 inference toolkit: fixed-point primitives, a streaming
//! dataflow model of the accelerator datapath, reference engines, ROM
//! packing and layer-wise verification.

pub mod coe;
pub mod datapath;
pub mod detect;
pub mod error;
pub mod fixedpoint;
pub mod fixture;
pub mod image;
pub mod model;
pub mod quant;
pub mod reference;
pub mod stream;
pub mod tensor;
pub mod verify;

pub use error::{CoeError, Error, ManifestError, Result};
pub use fixedpoint::{from_fixed, fx_mul, fx_rescale, to_fixed, FxValue, QFormat, Rounding};
pub use model::{
    build_default_model, load_manifest, save_manifest, LayerSpec, ModelSpec, ParamManifest,
};
pub use tensor::{ActTensor, FxTensor, Shape3};
