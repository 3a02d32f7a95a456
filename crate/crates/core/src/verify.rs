//! Layer-wise numerical comparison between engines.
//!
//! Fixed-point values are converted to reals through their Q formats before
//! they are compared with the float reference. Post-quantization
//! checkpoints are compared on the 8-bit grid, where "within 1 LSB" means
//! a difference of at most one activation step.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixedpoint::{from_fixed, FxValue};
use crate::model::{ParamManifest, HEAD_OUT_FMT};
use crate::reference::{forward_compiled, forward_float, image_to_float, DirectOutput, FloatLayer};
use crate::stream::{run_compiled, StreamConfig, StreamOutput};
use crate::tensor::{ActTensor, FxTensor};

pub const HEAD_LABEL: &str = "final raw conv";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub count: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Pearson correlation; `None` when either side has zero variance.
    pub corr: Option<f64>,
    /// Percent of positions with `|a - b| <= 1`, for values in LSB units.
    pub within_1lsb_percent: Option<f64>,
}

/// Population Pearson correlation, `None` for a constant input.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Error statistics of `b` against `a`. Both sequences must have the same
/// length, at least two.
pub fn metrics(a: &[f64], b: &[f64]) -> Result<Metrics> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "cannot compare sequences of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    let within = diffs.iter().filter(|&&d| d <= 1.0).count();
    Ok(Metrics {
        count: a.len(),
        max_abs: diffs.iter().copied().fold(0.0, f64::max),
        mean_abs: diffs.iter().sum::<f64>() / a.len() as f64,
        corr: pearson(a, b),
        within_1lsb_percent: Some(100.0 * within as f64 / a.len() as f64),
    })
}

/// Metrics for real-valued checkpoints, where a 1-LSB count has no meaning.
fn real_metrics(a: &[f64], b: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        within_1lsb_percent: None,
        ..metrics(a, b)?
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    FloatVsFixed,
    StreamVsDirect,
}

impl Comparison {
    fn title(self) -> &'static str {
        match self {
            Comparison::FloatVsFixed => "float reference vs fixed-point direct",
            Comparison::StreamVsDirect => "fixed-point direct vs streaming engine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub label: String,
    pub layer: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub comparison: Comparison,
    pub checkpoints: Vec<Checkpoint>,
}

impl ComparisonReport {
    pub fn checkpoint(&self, label: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.label == label)
    }

    pub fn bit_exact(&self) -> bool {
        self.checkpoints.iter().all(|c| c.metrics.max_abs == 0.0)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{}\n", self.comparison.title());
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>14} {:>14} {:>18} {:>12}",
            "checkpoint", "count", "max_abs", "mean_abs", "corr", "within_1lsb"
        );
        for c in &self.checkpoints {
            let m = &c.metrics;
            let corr = m
                .corr
                .map_or("corr=undefined".to_string(), |r| format!("corr={r:.6}"));
            let within = m
                .within_1lsb_percent
                .map_or("-".to_string(), |p| format!("{p:.4}%"));
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>14.6} {:>14.6} {:>18} {:>12}",
                c.label, m.count, m.max_abs, m.mean_abs, corr, within
            );
        }
        s
    }
}

/// Which checkpoints a report covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Checkpoints {
    /// Conv1 raw, Conv1 post, Conv2 post and the final raw head.
    #[default]
    Standard,
    /// Raw and post for every layer.
    AllLayers,
}

fn title_case(name: &str) -> String {
    let mut c = name.chars();
    c.next()
        .map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}

/// `(layer index, label, is_post)` for every selected body checkpoint.
fn selected(layers: usize, which: Checkpoints, names: &[String]) -> Vec<(usize, String, bool)> {
    let body = layers.saturating_sub(1);
    let mut out = Vec::new();
    for (idx, name) in names.iter().enumerate().take(body) {
        let n = title_case(name);
        let raw = which == Checkpoints::AllLayers || idx == 0;
        let post = which == Checkpoints::AllLayers || idx < 2;
        if raw {
            out.push((idx, format!("{n} raw"), false));
        }
        if post {
            out.push((idx, format!("{n} post"), true));
        }
    }
    out
}

fn raw_reals(t: &FxTensor) -> Vec<f64> {
    t.to_f64()
}

fn act_values(t: &ActTensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn head_reals(head: &[i32]) -> Vec<f64> {
    head.iter()
        .map(|&w| {
            from_fixed(FxValue {
                raw: w as i64,
                fmt: HEAD_OUT_FMT,
            })
        })
        .collect()
}

/// Float reference against the direct fixed-point pass.
pub fn compare_float_fixed(
    float: &[FloatLayer],
    direct: &DirectOutput,
    which: Checkpoints,
) -> Result<ComparisonReport> {
    if float.len() != direct.layers.len() {
        return Err(Error::Shape(format!(
            "{} float layers vs {} fixed layers",
            float.len(),
            direct.layers.len()
        )));
    }
    let names: Vec<String> = direct.layers.iter().map(|l| l.name.clone()).collect();
    let mut checkpoints = Vec::new();
    for (idx, label, post) in selected(names.len(), which, &names) {
        let (f, d) = (&float[idx], &direct.layers[idx]);
        let metrics = if post {
            let q = f
                .q
                .as_ref()
                .ok_or_else(|| Error::Shape(format!("{}: float pass has no 8-bit grid", f.name)))?;
            let p = d.post.as_ref().ok_or_else(|| {
                Error::Shape(format!("{}: fixed pass has no post values", d.name))
            })?;
            metrics(&act_values(q), &act_values(p))?
        } else {
            real_metrics(&f.pre.data, &raw_reals(&d.raw))?
        };
        checkpoints.push(Checkpoint {
            label,
            layer: names[idx].clone(),
            metrics,
        });
    }
    let last = float
        .last()
        .ok_or_else(|| Error::Shape("empty model".into()))?;
    checkpoints.push(Checkpoint {
        label: HEAD_LABEL.into(),
        layer: last.name.clone(),
        metrics: real_metrics(&last.out.data, &head_reals(&direct.head))?,
    });
    Ok(ComparisonReport {
        comparison: Comparison::FloatVsFixed,
        checkpoints,
    })
}

/// Integer checkpoints of the direct pass against the stream taps. Raw
/// values are compared in accumulator LSBs.
pub fn compare_stream_direct(
    stream: &StreamOutput,
    direct: &DirectOutput,
    which: Checkpoints,
) -> Result<ComparisonReport> {
    let names: Vec<String> = direct.layers.iter().map(|l| l.name.clone()).collect();
    let mut checkpoints = Vec::new();
    for (idx, label, post) in selected(names.len(), which, &names) {
        let d = &direct.layers[idx];
        let tap = stream.tap(&d.name).ok_or_else(|| {
            Error::Shape(format!("{}: stream run recorded no checkpoint", d.name))
        })?;
        let metrics = if post {
            let (a, b) = (d.post.as_ref(), tap.post.as_ref());
            let (a, b) = a
                .zip(b)
                .ok_or_else(|| Error::Shape(format!("{}: missing post values", d.name)))?;
            metrics(&act_values(a), &act_values(b))?
        } else {
            if tap.raw.fmt != d.raw.fmt || tap.raw.shape != d.raw.shape {
                return Err(Error::Shape(format!(
                    "{}: raw checkpoints disagree on shape or format",
                    d.name
                )));
            }
            let ints = |t: &FxTensor| t.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
            metrics(&ints(&d.raw), &ints(&tap.raw))?
        };
        checkpoints.push(Checkpoint {
            label,
            layer: names[idx].clone(),
            metrics,
        });
    }
    let ints = |h: &[i32]| h.iter().map(|&v| v as f64).collect::<Vec<_>>();
    checkpoints.push(Checkpoint {
        label: HEAD_LABEL.into(),
        layer: names.last().cloned().unwrap_or_default(),
        metrics: metrics(&ints(&direct.head), &ints(&stream.head_chw()?))?,
    });
    Ok(ComparisonReport {
        comparison: Comparison::StreamVsDirect,
        checkpoints,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub float_vs_fixed: ComparisonReport,
    pub stream_vs_direct: ComparisonReport,
    pub cycles: u64,
}

impl VerifyReport {
    pub fn to_table(&self) -> String {
        format!(
            "{}\n{}\nmodeled cycles per frame: {}\n",
            self.float_vs_fixed.to_table(),
            self.stream_vs_direct.to_table(),
            self.cycles
        )
    }
}

/// Runs all three engines on `image` and compares them checkpoint by checkpoint.
pub fn layerwise_compare(
    manifest: &ParamManifest,
    image: &ActTensor,
    which: Checkpoints,
) -> Result<VerifyReport> {
    let cm = crate::datapath::compile(manifest)?;
    let float = forward_float(manifest, &image_to_float(image))?;
    let direct = forward_compiled(&cm, image)?;
    let config = StreamConfig {
        record_taps: true,
        ..StreamConfig::default()
    };
    let stream = run_compiled(&cm, image, &config)?;
    Ok(VerifyReport {
        float_vs_fixed: compare_float_fixed(&float, &direct, which)?,
        stream_vs_direct: compare_stream_direct(&stream, &direct, which)?,
        cycles: stream.cycles,
    })
}
