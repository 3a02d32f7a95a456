//! Detection-head decoding and non-maximum suppression.
//!
//! Each grid cell carries `anchors × (5 + classes)` channels, anchor-major:
//! `[tx, ty, tw, th, objectness, class scores...]` per anchor. Box
//! coordinates are normalized to the image.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{from_fixed, FxValue};
use crate::model::HEAD_OUT_FMT;
use crate::tensor::Shape3;

pub const VOC_CLASSES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    /// `(width, height)` per anchor, normalized.
    pub anchors: Vec<[f64; 2]>,
    pub classes: usize,
}

impl HeadLayout {
    pub fn new(anchors: Vec<[f64; 2]>, classes: usize) -> Result<Self> {
        let layout = HeadLayout { anchors, classes };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() || self.classes == 0 {
            return Err(Error::InvalidArgument(
                "layout needs at least one anchor and one class".into(),
            ));
        }
        if let Some(a) = self
            .anchors
            .iter()
            .find(|a| !(a[0] > 0.0 && a[1] > 0.0 && a[0].is_finite() && a[1].is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "anchor {a:?} must have positive finite size"
            )));
        }
        Ok(())
    }

    pub fn record_len(&self) -> usize {
        5 + self.classes
    }

    pub fn channels(&self) -> usize {
        self.anchors.len() * self.record_len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let layout: HeadLayout = serde_json::from_str(&text)?;
        layout.validate()?;
        Ok(layout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class_id: usize,
    pub confidence: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Grid cell, `y * grid_w + x`.
    pub cell: usize,
    pub anchor: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes a head in y/x/channel word order. Boxes with confidence below
/// `conf_threshold` are dropped.
pub fn decode(
    words: &[i32],
    grid: Shape3,
    layout: &HeadLayout,
    conf_threshold: f64,
) -> Result<Vec<DetectionBox>> {
    layout.validate()?;
    if grid.c != layout.channels() {
        return Err(Error::Shape(format!(
            "head has {} channels, layout needs {}",
            grid.c,
            layout.channels()
        )));
    }
    if words.len() != grid.len() {
        return Err(Error::HeadLength {
            found: words.len(),
            expected: grid.len(),
        });
    }
    let real = |w: i32| {
        from_fixed(FxValue {
            raw: w as i64,
            fmt: HEAD_OUT_FMT,
        })
    };
    let mut boxes = Vec::new();
    for (cell, cell_words) in words.chunks(grid.c).enumerate() {
        let (y, x) = (cell / grid.w, cell % grid.w);
        for (anchor, rec) in cell_words.chunks(layout.record_len()).enumerate() {
            let (class_id, best) = rec[5..].iter().map(|&w| sigmoid(real(w))).enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (c, p)| if p > acc.1 { (c, p) } else { acc },
            );
            let confidence = sigmoid(real(rec[4])) * best;
            if confidence < conf_threshold {
                continue;
            }
            let [aw, ah] = layout.anchors[anchor];
            boxes.push(DetectionBox {
                class_id,
                confidence,
                cx: (x as f64 + sigmoid(real(rec[0]))) / grid.w as f64,
                cy: (y as f64 + sigmoid(real(rec[1]))) / grid.h as f64,
                w: aw * real(rec[2]).exp(),
                h: ah * real(rec[3]).exp(),
                cell,
                anchor,
            });
        }
    }
    Ok(boxes)
}

pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let span = |c: f64, s: f64| (c - s / 2.0, c + s / 2.0);
    let (ax0, ax1) = span(a.cx, a.w);
    let (ay0, ay1) = span(a.cy, a.h);
    let (bx0, bx1) = span(b.cx, b.w);
    let (by0, by1) = span(b.cy, b.h);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Confidence descending, then class id, cell and anchor ascending.
pub fn priority(a: &DetectionBox, b: &DetectionBox) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.cell.cmp(&b.cell))
        .then(a.anchor.cmp(&b.anchor))
}

/// Per-class greedy suppression. Survivors come back in priority order.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Result<Vec<DetectionBox>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let mut sorted = boxes.to_vec();
    sorted.sort_by(priority);
    let mut kept: Vec<DetectionBox> = Vec::new();
    for b in sorted {
        if kept
            .iter()
            .filter(|k| k.class_id == b.class_id)
            .all(|k| iou(k, &b) < iou_threshold)
        {
            kept.push(b);
        }
    }
    Ok(kept)
}

/// Decode followed by NMS.
pub fn detect(
    words: &[i32],
    grid: Shape3,
    layout: &HeadLayout,
    conf: f64,
    iou_threshold: f64,
) -> Result<Vec<DetectionBox>> {
    nms(&decode(words, grid, layout, conf)?, iou_threshold)
}
