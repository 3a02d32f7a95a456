use std::fmt::Write as _;

use serde::Serialize;

use super::{ConvKind, ModelSpec, WeightFormat};
use crate::tensor::Shape3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageRowKind {
    StandardConv,
    W1a8Conv,
    MaxPool,
}

/// One row of the deployment storage table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StorageRow {
    pub label: String,
    pub layer: String,
    pub kind: StorageRowKind,
    pub input: Shape3,
    pub output: Shape3,
    pub kernel: usize,
    /// Rows held by the buffer: 2 for convolutions, 3 for pooling.
    pub buffer_rows: usize,
    pub buffer_width: usize,
    pub buffer_channels: usize,
    pub line_buffer_bytes: usize,
    /// Raw packed parameter bytes, before any ROM alignment.
    pub weight_bytes: usize,
}

impl StorageRow {
    /// `2×320×16 = 10.0KB` style expression.
    pub fn expression(&self) -> String {
        format!(
            "{}×{}×{} = {}",
            self.buffer_rows,
            self.buffer_width,
            self.buffer_channels,
            format_bytes(self.line_buffer_bytes)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StorageReport {
    pub rows: Vec<StorageRow>,
}

impl StorageReport {
    pub fn total_line_buffer_bytes(&self) -> usize {
        self.rows.iter().map(|r| r.line_buffer_bytes).sum()
    }

    pub fn total_weight_bytes(&self) -> usize {
        self.rows.iter().map(|r| r.weight_bytes).sum()
    }

    pub fn row(&self, label: &str) -> Option<&StorageRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<5} {:<8} {:<14} {:<32} {:<6} {:<9} {:<22} {:>12}",
            "Layer", "Source", "Type", "Input→Output", "Kernel", "H×W", "Line buffer", "Weights"
        );
        for r in &self.rows {
            let kind = match r.kind {
                StorageRowKind::StandardConv => "Standard conv",
                StorageRowKind::W1a8Conv => "W1A8 conv",
                StorageRowKind::MaxPool => "MaxPool",
            };
            let shape_hw = if r.kind == StorageRowKind::MaxPool {
                r.output
            } else {
                r.input
            };
            let _ = writeln!(
                out,
                "{:<5} {:<8} {:<14} {:<32} {:<6} {:<9} {:<22} {:>12}",
                r.label,
                r.layer,
                kind,
                format!("{} → {}", r.input, r.output),
                format!("{0}×{0}", r.kernel),
                format!("{}×{}", shape_hw.h, shape_hw.w),
                r.expression(),
                format_bytes(r.weight_bytes),
            );
        }
        let _ = writeln!(
            out,
            "total line buffer {}, total packed parameters {}",
            format_bytes(self.total_line_buffer_bytes()),
            format_bytes(self.total_weight_bytes())
        );
        out
    }
}

/// `10240` → `10.0KB`; values under 1 KiB stay in bytes.
pub fn format_bytes(bytes: usize) -> String {
    if bytes >= 1024 {
        format!("{:.1}KB", bytes as f64 / 1024.0)
    } else {
        format!("{bytes}B")
    }
}

/// Line-buffer and packed-weight estimate per convolution and pooling row.
///
/// Convolutions buffer `2 × width × out_channels` bytes, pooling rows
/// `3 × output_width × channels`. Weight bytes are the raw packed size: one
/// bit per binary weight, two bytes per 16-bit weight plus two per bias.
pub fn estimate_storage(model: &ModelSpec) -> StorageReport {
    let mut rows = Vec::new();
    for (layer, shapes) in model.layers.iter().zip(model.layer_shapes()) {
        let (kind, weight_bytes) = match (layer.conv_kind, layer.weight_fmt) {
            (ConvKind::W1a8, _) | (_, WeightFormat::Binary) => {
                (StorageRowKind::W1a8Conv, layer.weight_count().div_ceil(8))
            }
            (ConvKind::Standard, WeightFormat::Fixed(_)) => (
                StorageRowKind::StandardConv,
                2 * layer.weight_count() + 2 * layer.out_channels,
            ),
        };
        rows.push(StorageRow {
            label: format!("L{}", rows.len()),
            layer: layer.name.clone(),
            kind,
            input: shapes.input,
            output: shapes.conv,
            kernel: layer.kernel,
            buffer_rows: 2,
            buffer_width: shapes.conv.w,
            buffer_channels: layer.out_channels,
            line_buffer_bytes: 2 * shapes.conv.w * layer.out_channels,
            weight_bytes,
        });
        if layer.has_maxpool {
            rows.push(StorageRow {
                label: format!("L{}", rows.len()),
                layer: layer.name.clone(),
                kind: StorageRowKind::MaxPool,
                input: shapes.conv,
                output: shapes.output,
                kernel: 2,
                buffer_rows: 3,
                buffer_width: shapes.output.w,
                buffer_channels: shapes.output.c,
                line_buffer_bytes: 3 * shapes.output.w * shapes.output.c,
                weight_bytes: 0,
            });
        }
    }
    StorageReport { rows }
}
