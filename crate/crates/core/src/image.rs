//! Binary PPM (P6) images, 8 bits per sample.

use std::path::Path;

use crate::detect::DetectionBox;
use crate::error::{Error, Result};
use crate::tensor::{ActTensor, Shape3};

/// Parses a P6 image into a 3-channel CHW tensor. Comments in the header
/// are skipped.
pub fn parse_ppm(bytes: &[u8]) -> Result<ActTensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Image(format!("magic {:?} is not P6", fields[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("bad {what} {s:?}")))
    };
    let (w, h, maxval) = (
        num(&fields[1], "width")?,
        num(&fields[2], "height")?,
        num(&fields[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(Error::Image(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image("empty image".into()));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != 3 * w * h {
        return Err(Error::Image(format!(
            "{} sample bytes for {w}x{h}, expected {}",
            data.len(),
            3 * w * h
        )));
    }
    let shape = Shape3::new(3, h, w);
    let mut chw = vec![0u8; shape.len()];
    for (n, px) in data.chunks(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            chw[c * h * w + n] = v;
        }
    }
    ActTensor::new(shape, chw)
}

pub fn encode_ppm(img: &ActTensor) -> Result<Vec<u8>> {
    let s = img.shape;
    if s.c != 3 {
        return Err(Error::Image(format!(
            "PPM needs 3 channels, tensor has {}",
            s.c
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            out.extend(img.pixel(y, x));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ActTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_ppm(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ActTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path.display().to_string(), e))
}

const PALETTE: [[u8; 3]; 6] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
];

/// Draws one-pixel box outlines, coloured by class.
pub fn draw_boxes(img: &mut ActTensor, boxes: &[DetectionBox]) {
    let s = img.shape;
    if s.c != 3 || s.is_empty() {
        return;
    }
    let clamp = |v: f64, n: usize| (v * n as f64).floor().clamp(0.0, (n - 1) as f64) as usize;
    for b in boxes {
        let colour = PALETTE[b.class_id % PALETTE.len()];
        let (x0, x1) = (clamp(b.cx - b.w / 2.0, s.w), clamp(b.cx + b.w / 2.0, s.w));
        let (y0, y1) = (clamp(b.cy - b.h / 2.0, s.h), clamp(b.cy + b.h / 2.0, s.h));
        let mut put = |y: usize, x: usize| {
            for (c, &v) in colour.iter().enumerate() {
                img.data[s.index(c, y, x)] = v;
            }
        };
        for x in x0..=x1 {
            put(y0, x);
            put(y1, x);
        }
        for y in y0..=y1 {
            put(y, x0);
            put(y, x1);
        }
    }
}
