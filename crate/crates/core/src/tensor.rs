//! Plain CHW tensors shared by the engines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::QFormat;

/// Channel, height and width of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{},{}]", self.c, self.h, self.w)
    }
}

/// 8-bit unsigned activations in CHW order; the wire format between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActTensor {
    pub shape: Shape3,
    pub data: Vec<u8>,
}

impl ActTensor {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "activation tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(ActTensor { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        ActTensor {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(c, y, x)]
    }

    /// The channel vector at `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<u8> {
        (0..self.shape.c).map(|c| self.get(c, y, x)).collect()
    }
}

/// Wide integers tagged with a Q format; shape is row-major, outermost first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FxTensor {
    pub shape: Vec<usize>,
    pub fmt: QFormat,
    pub data: Vec<i64>,
}

impl FxTensor {
    pub fn new(shape: Vec<usize>, fmt: QFormat, data: Vec<i64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|r| !fmt.contains_raw(**r)) {
            return Err(Error::InvalidFormat(format!(
                "raw {bad} does not fit {fmt}"
            )));
        }
        Ok(FxTensor { shape, fmt, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let lsb = self.fmt.lsb();
        self.data.iter().map(|&r| r as f64 * lsb).collect()
    }
}
