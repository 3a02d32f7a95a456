//! Tensor dumps: a flat little-endian blob plus a JSON sidecar.
//!
//! `<name>.bin` holds the values; `<name>.json` holds
//! `{"name", "dtype", "shape", "format"}` where `format` is the Q format of
//! fixed-point data and absent otherwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::QFormat;

#[derive(Clone, Debug, PartialEq)]
pub enum DumpData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F64(Vec<f64>),
}

impl DumpData {
    fn dtype(&self) -> &'static str {
        match self {
            DumpData::U8(_) => "u8",
            DumpData::I32(_) => "i32le",
            DumpData::I64(_) => "i64le",
            DumpData::F64(_) => "f64le",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DumpData::U8(v) => v.len(),
            DumpData::I32(v) => v.len(),
            DumpData::I64(v) => v.len(),
            DumpData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            DumpData::U8(v) => v.clone(),
            DumpData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            DumpData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            DumpData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: &str, b: &[u8]) -> Result<Self> {
        let chunks = |n: usize| -> Result<std::slice::ChunksExact<'_, u8>> {
            if !b.len().is_multiple_of(n) {
                return Err(Error::Shape(format!(
                    "{} bytes is not a whole number of {dtype} values",
                    b.len()
                )));
            }
            Ok(b.chunks_exact(n))
        };
        Ok(match dtype {
            "u8" => DumpData::U8(b.to_vec()),
            "i32le" => DumpData::I32(
                chunks(4)?
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "i64le" => DumpData::I64(
                chunks(8)?
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "f64le" => DumpData::F64(
                chunks(8)?
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(Error::Shape(format!("unknown dump dtype {other:?}"))),
        })
    }

    /// Values as doubles, scaled by the format when one is given.
    pub fn to_f64(&self, fmt: Option<QFormat>) -> Vec<f64> {
        let lsb = fmt.map_or(1.0, |f| f.lsb());
        match self {
            DumpData::U8(v) => v.iter().map(|&x| x as f64 * lsb).collect(),
            DumpData::I32(v) => v.iter().map(|&x| x as f64 * lsb).collect(),
            DumpData::I64(v) => v.iter().map(|&x| x as f64 * lsb).collect(),
            DumpData::F64(v) => v.iter().map(|&x| x * lsb).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorDump {
    pub name: String,
    pub shape: Vec<usize>,
    pub format: Option<QFormat>,
    pub data: DumpData,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
}

pub fn write_dump(dir: impl AsRef<Path>, dump: &TensorDump) -> Result<()> {
    let dir = dir.as_ref();
    let n: usize = dump.shape.iter().product();
    if n != dump.data.len() {
        return Err(Error::Shape(format!(
            "{}: shape {:?} for {} values",
            dump.name,
            dump.shape,
            dump.data.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let bin = dir.join(format!("{}.bin", dump.name));
    fs::write(&bin, dump.data.to_bytes()).map_err(|e| Error::io(bin.display().to_string(), e))?;
    let side = Sidecar {
        name: dump.name.clone(),
        dtype: dump.data.dtype().into(),
        shape: dump.shape.clone(),
        format: dump.format.map(|f| f.to_string()),
    };
    let json = dir.join(format!("{}.json", dump.name));
    let mut text = serde_json::to_string_pretty(&side)?;
    text.push('\n');
    fs::write(&json, text).map_err(|e| Error::io(json.display().to_string(), e))
}

pub fn read_dump(dir: impl AsRef<Path>, name: &str) -> Result<TensorDump> {
    let dir = dir.as_ref();
    let json = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(json.display().to_string(), e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let bin = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(bin.display().to_string(), e))?;
    let data = DumpData::from_bytes(&side.dtype, &bytes)?;
    let n: usize = side.shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "{name}: shape {:?} for {} values",
            side.shape,
            data.len()
        )));
    }
    Ok(TensorDump {
        name: side.name,
        shape: side.shape,
        format: side.format.map(|f| f.parse()).transpose()?,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dumps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for data in [
            DumpData::U8(vec![1, 2, 255, 0]),
            DumpData::I32(vec![-1, i32::MAX, 0, 7]),
            DumpData::I64(vec![-(1 << 40), 3, 0, 1]),
            DumpData::F64(vec![0.5, -1e-9, 3.25, 0.0]),
        ] {
            let d = TensorDump {
                name: format!("t_{}", data.dtype()),
                shape: vec![1, 2, 2],
                format: Some(QFormat::sq(16, 15)),
                data,
            };
            write_dump(dir.path(), &d).unwrap();
            assert_eq!(read_dump(dir.path(), &d.name).unwrap(), d);
        }
        let bad = TensorDump {
            name: "bad".into(),
            shape: vec![3],
            format: None,
            data: DumpData::U8(vec![1]),
        };
        assert!(write_dump(dir.path(), &bad).is_err());
    }
}
