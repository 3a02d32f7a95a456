use std::collections::VecDeque;
use std::sync::Arc;

use serde::Serialize;

use super::queue::BoundedQueue;
use super::token::{AccGroup, HeadGroup, PixelVector, Token, WindowToken};
use crate::coe::ReadSchedule;
use crate::datapath::CompiledLayer;
use crate::error::{Error, Result};
use crate::fixedpoint::FxValue;
use crate::quant::{head_output, requantize};
use crate::tensor::{ActTensor, FxTensor, Shape3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    Source,
    Pad,
    LineBuffer,
    Pe,
    Post,
    MaxPool,
    Serializer,
}

/// Per-stage counters under the one-token-per-cycle model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageStats {
    pub name: String,
    pub layer: String,
    pub role: StageRole,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Cycles with a result ready but the downstream queue full.
    pub stall_cycles: u64,
    /// Cycles spent waiting for ROM data.
    pub rom_wait_cycles: u64,
    /// Peak occupancy of the stage's output queue.
    pub queue_high_water: usize,
    /// Peak bytes held in row storage (line buffers and pooling rows).
    pub buffer_peak_bytes: usize,
    /// Storage estimate for the stage, where one applies.
    pub buffer_budget_bytes: Option<usize>,
    pub first_cycle: Option<u64>,
    pub last_cycle: u64,
}

impl StageStats {
    pub(crate) fn new(name: String, layer: &str, role: StageRole) -> Self {
        StageStats {
            name,
            layer: layer.to_string(),
            role,
            tokens_in: 0,
            tokens_out: 0,
            stall_cycles: 0,
            rom_wait_cycles: 0,
            queue_high_water: 0,
            buffer_peak_bytes: 0,
            buffer_budget_bytes: None,
            first_cycle: None,
            last_cycle: 0,
        }
    }
}

/// Checkpoint values captured by a post-process stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTap {
    pub name: String,
    /// `acc + bias`, CHW, at the accumulator format.
    pub raw: FxTensor,
    /// Body layers: clipped activations before pooling.
    pub post: Option<ActTensor>,
    /// Head: Q15 values, CHW.
    pub head: Option<Vec<i32>>,
}

/// A pure state machine: consumes one token, appends its results.
pub(crate) trait Stage {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()>;

    /// Bytes currently held in row storage.
    fn buffered_bytes(&self) -> usize {
        0
    }

    fn describe(&self) -> String {
        String::new()
    }

    fn take_tap(&mut self) -> Option<LayerTap> {
        None
    }
}

pub(crate) struct StepOutcome {
    pub progress: bool,
    /// Blocked on ROM latency; time alone will unblock it.
    pub waiting: bool,
}

/// A stage plus its output register and optional ROM gate.
pub(crate) struct Node {
    pub stage: Box<dyn Stage>,
    pub pending: VecDeque<Token>,
    pub stats: StageStats,
    rom: Option<ReadSchedule>,
    rom_ready: Option<u64>,
}

impl Node {
    pub fn new(stage: Box<dyn Stage>, stats: StageStats, rom: Option<ReadSchedule>) -> Self {
        Node {
            stage,
            pending: VecDeque::new(),
            stats,
            rom,
            rom_ready: None,
        }
    }

    /// One modeled cycle: emit at most one token, accept at most one.
    pub fn step(
        &mut self,
        input: &mut BoundedQueue,
        output: &mut BoundedQueue,
        cycle: u64,
    ) -> Result<StepOutcome> {
        let mut progress = false;
        let mut waiting = false;
        if let Some(t) = self.pending.pop_front() {
            match output.push(t) {
                Ok(()) => {
                    self.stats.tokens_out += 1;
                    progress = true;
                }
                Err(t) => {
                    self.pending.push_front(t);
                    self.stats.stall_cycles += 1;
                }
            }
        }
        if self.pending.is_empty() && !input.is_empty() {
            let ready = match (self.rom, self.rom_ready) {
                (None, _) => true,
                (Some(s), None) => {
                    // first parameter fetch issued now
                    self.rom_ready = Some(s.usable_at(cycle));
                    false
                }
                (Some(_), Some(at)) => cycle >= at,
            };
            if ready {
                let t = input.pop().expect("checked non-empty");
                self.stats.tokens_in += 1;
                self.stage.accept(t, &mut self.pending)?;
                self.stats.buffer_peak_bytes = self
                    .stats
                    .buffer_peak_bytes
                    .max(self.stage.buffered_bytes());
                progress = true;
            } else {
                self.stats.rom_wait_cycles += 1;
                waiting = true;
            }
        }
        if progress {
            self.stats.first_cycle.get_or_insert(cycle);
            self.stats.last_cycle = cycle;
        }
        Ok(StepOutcome { progress, waiting })
    }

    pub fn idle(&self) -> bool {
        self.pending.is_empty()
    }
}

fn stream_error(stage: &str, reason: impl Into<String>) -> Error {
    Error::Stream {
        stage: stage.to_string(),
        reason: reason.into(),
    }
}

fn unexpected(stage: &str, t: &Token) -> Error {
    stream_error(stage, format!("unexpected {} token", t.kind()))
}

/// Forwards tokens unchanged; models the input interface.
pub(crate) struct Passthrough;

impl Stage for Passthrough {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()> {
        out.push_back(t);
        Ok(())
    }
}

/// Wraps an H×W raster in a one-pixel zero border.
pub(crate) struct PadAdapter {
    name: String,
    h: usize,
    w: usize,
    zero: Arc<[u8]>,
    /// Next padded position to emit, row-major over (h+2)×(w+2).
    cursor: usize,
    received: usize,
}

impl PadAdapter {
    pub fn new(name: String, shape: Shape3) -> Self {
        PadAdapter {
            name,
            h: shape.h,
            w: shape.w,
            zero: vec![0u8; shape.c].into(),
            cursor: 0,
            received: 0,
        }
    }

    fn emit_border_until(&mut self, stop: usize, out: &mut VecDeque<Token>) {
        let wp = self.w + 2;
        while self.cursor < stop {
            out.push_back(Token::Pixel(PixelVector {
                y: self.cursor / wp,
                x: self.cursor % wp,
                channels: self.zero.clone(),
                padding: true,
            }));
            self.cursor += 1;
        }
    }
}

impl Stage for PadAdapter {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()> {
        let Token::Pixel(p) = t else {
            return Err(unexpected(&self.name, &t));
        };
        let expect = (self.received / self.w, self.received % self.w);
        if self.received >= self.h * self.w || (p.y, p.x) != expect {
            return Err(stream_error(
                &self.name,
                format!(
                    "pixel ({}, {}) out of order; stream length does not match {}x{}",
                    p.y, p.x, self.h, self.w
                ),
            ));
        }
        if p.channels.len() != self.zero.len() {
            return Err(stream_error(
                &self.name,
                format!(
                    "{} channels, expected {}",
                    p.channels.len(),
                    self.zero.len()
                ),
            ));
        }
        let wp = self.w + 2;
        let at = (p.y + 1) * wp + p.x + 1;
        self.emit_border_until(at, out);
        out.push_back(Token::Pixel(PixelVector {
            y: p.y + 1,
            x: p.x + 1,
            channels: p.channels,
            padding: false,
        }));
        self.cursor += 1;
        self.received += 1;
        if self.received == self.h * self.w {
            self.emit_border_until((self.h + 2) * wp, out);
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!("received {}/{}", self.received, self.h * self.w)
    }
}

/// Two-row line buffer producing 3×3 windows from a padded raster.
///
/// Each column slot keeps the two most recent rows; a 3×3 register array
/// shifts one column per pixel. A window is complete once the third row
/// and third column of its neighbourhood have arrived.
pub(crate) struct LineBuffer {
    name: String,
    wp: usize,
    hp: usize,
    channels: usize,
    slots: Vec<[(Arc<[u8]>, bool); 2]>,
    /// `cols[kx][ky]`, oldest column first.
    cols: [[Arc<[u8]>; 3]; 3],
    live: usize,
    received: usize,
}

impl LineBuffer {
    pub fn new(name: String, shape: Shape3) -> Self {
        let zero: Arc<[u8]> = vec![0u8; shape.c].into();
        let z = || (zero.clone(), false);
        LineBuffer {
            name,
            wp: shape.w + 2,
            hp: shape.h + 2,
            channels: shape.c,
            slots: (0..shape.w + 2).map(|_| [z(), z()]).collect(),
            cols: std::array::from_fn(|_| std::array::from_fn(|_| zero.clone())),
            live: 0,
            received: 0,
        }
    }
}

impl Stage for LineBuffer {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()> {
        let Token::Pixel(p) = t else {
            return Err(unexpected(&self.name, &t));
        };
        let (r, c) = (self.received / self.wp, self.received % self.wp);
        if self.received >= self.wp * self.hp || (p.y, p.x) != (r, c) {
            return Err(stream_error(
                &self.name,
                format!("padded pixel ({}, {}) out of order", p.y, p.x),
            ));
        }
        self.received += 1;
        let [older, newer] = self.slots[c].clone();
        if older.1 {
            self.live -= 1;
        }
        self.slots[c] = [newer.clone(), (p.channels.clone(), !p.padding)];
        if !p.padding {
            self.live += 1;
        }
        self.cols.rotate_left(1);
        self.cols[2] = [older.0, newer.0, p.channels];
        if r >= 2 && c >= 2 {
            let mut taps = Vec::with_capacity(9);
            for ky in 0..3 {
                for kx in 0..3 {
                    taps.push(self.cols[kx][ky].clone());
                }
            }
            out.push_back(Token::Window(WindowToken {
                y: r - 2,
                x: c - 2,
                taps,
            }));
        }
        Ok(())
    }

    fn buffered_bytes(&self) -> usize {
        self.live * self.channels
    }

    fn describe(&self) -> String {
        format!("received {}/{}", self.received, self.wp * self.hp)
    }
}

/// Convolution PE. W1A8 layers form `Mul_prev · a` once per input value and
/// then add or subtract it under each sign bit; standard layers multiply.
pub(crate) struct Pe {
    name: String,
    layer: Arc<CompiledLayer>,
    /// Output channels per emitted group.
    group: usize,
    products: Vec<i64>,
}

impl Pe {
    pub fn new(name: String, layer: Arc<CompiledLayer>, group: usize) -> Self {
        Pe {
            name,
            layer,
            group: group.max(1),
            products: Vec::new(),
        }
    }
}

impl Stage for Pe {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()> {
        let (y, x, taps): (usize, usize, Vec<Arc<[u8]>>) = match t {
            Token::Window(w) => (w.y, w.x, w.taps),
            Token::Pixel(p) => (p.y, p.x, vec![p.channels]),
            other => return Err(unexpected(&self.name, &other)),
        };
        let spec = &self.layer.spec;
        let k2 = spec.kernel * spec.kernel;
        if taps.len() != k2 || taps.iter().any(|a| a.len() != spec.in_channels) {
            return Err(stream_error(&self.name, "window does not match the kernel"));
        }
        let acc = self.layer.accumulate(&taps, &mut self.products);
        for (g, chunk) in acc.chunks(self.group).enumerate() {
            out.push_back(Token::Acc(AccGroup {
                y,
                x,
                offset: g * self.group,
                values: chunk.to_vec(),
            }));
        }
        Ok(())
    }
}

/// Bias, `Div_current`, rounding and clipping; optional checkpoint capture.
pub(crate) struct Post {
    name: String,
    layer: Arc<CompiledLayer>,
    raw: Option<Vec<i64>>,
    post: Option<Vec<u8>>,
    head: Option<Vec<i32>>,
}

impl Post {
    pub fn new(name: String, layer: Arc<CompiledLayer>, record: bool) -> Self {
        let n = layer.shapes.conv.len();
        let head = layer.spec.is_head();
        Post {
            name,
            raw: record.then(|| vec![0; n]),
            post: (record && !head).then(|| vec![0; n]),
            head: (record && head).then(|| vec![0; n]),
            layer,
        }
    }
}

impl Stage for Post {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()> {
        let Token::Acc(g) = t else {
            return Err(unexpected(&self.name, &t));
        };
        let l = &*self.layer;
        let shape = l.shapes.conv;
        if g.offset + g.values.len() > shape.c {
            return Err(stream_error(
                &self.name,
                "accumulator group exceeds the channel count",
            ));
        }
        let biased: Vec<i64> = g
            .values
            .iter()
            .enumerate()
            .map(|(j, &a)| l.biased(g.offset + j, a))
            .collect();
        if let Some(raw) = &mut self.raw {
            for (j, &b) in biased.iter().enumerate() {
                raw[shape.index(g.offset + j, g.y, g.x)] = b;
            }
        }
        let value = |j: usize, b: i64| {
            (
                FxValue {
                    raw: b,
                    fmt: l.acc_fmt,
                },
                l.div[g.offset + j],
            )
        };
        if l.spec.is_head() {
            let values: Vec<i32> = biased
                .iter()
                .enumerate()
                .map(|(j, &b)| {
                    let (v, d) = value(j, b);
                    head_output(v, d)
                })
                .collect::<Result<_>>()?;
            if let Some(h) = &mut self.head {
                for (j, &v) in values.iter().enumerate() {
                    h[shape.index(g.offset + j, g.y, g.x)] = v;
                }
            }
            out.push_back(Token::Head(HeadGroup {
                y: g.y,
                x: g.x,
                offset: g.offset,
                values,
            }));
        } else {
            if g.offset != 0 || g.values.len() != shape.c {
                return Err(stream_error(&self.name, "8-bit layers expect whole pixels"));
            }
            let q: Vec<u8> = biased
                .iter()
                .enumerate()
                .map(|(j, &b)| {
                    let (v, d) = value(j, b);
                    requantize(v, d)
                })
                .collect::<Result<_>>()?;
            if let Some(p) = &mut self.post {
                for (j, &v) in q.iter().enumerate() {
                    p[shape.index(j, g.y, g.x)] = v;
                }
            }
            out.push_back(Token::Pixel(PixelVector {
                y: g.y,
                x: g.x,
                channels: q.into(),
                padding: false,
            }));
        }
        Ok(())
    }

    fn take_tap(&mut self) -> Option<LayerTap> {
        let l = &self.layer;
        let shape = l.shapes.conv;
        let raw = self.raw.take()?;
        Some(LayerTap {
            name: l.spec.name.clone(),
            raw: FxTensor {
                shape: vec![shape.c, shape.h, shape.w],
                fmt: l.acc_fmt,
                data: raw,
            },
            post: self.post.take().map(|d| ActTensor { shape, data: d }),
            head: self.head.take(),
        })
    }
}

/// Streaming 2×2 max-pool holding one row of partial maxima.
pub(crate) struct MaxPool {
    name: String,
    h: usize,
    w: usize,
    channels: usize,
    partial: Vec<Option<Vec<u8>>>,
    live: usize,
    received: usize,
}

impl MaxPool {
    pub fn new(name: String, shape: Shape3) -> Self {
        MaxPool {
            name,
            h: shape.h,
            w: shape.w,
            channels: shape.c,
            partial: vec![None; shape.w / 2],
            live: 0,
            received: 0,
        }
    }
}

impl Stage for MaxPool {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()> {
        let Token::Pixel(p) = t else {
            return Err(unexpected(&self.name, &t));
        };
        if self.received >= self.h * self.w
            || (p.y, p.x) != (self.received / self.w, self.received % self.w)
        {
            return Err(stream_error(
                &self.name,
                format!("pixel ({}, {}) out of order", p.y, p.x),
            ));
        }
        self.received += 1;
        let slot = &mut self.partial[p.x / 2];
        match slot {
            None => {
                *slot = Some(p.channels.to_vec());
                self.live += 1;
            }
            Some(m) => m
                .iter_mut()
                .zip(p.channels.iter())
                .for_each(|(a, &b)| *a = (*a).max(b)),
        }
        if p.y % 2 == 1 && p.x % 2 == 1 {
            let m = slot.take().expect("block started on the even row");
            self.live -= 1;
            out.push_back(Token::Pixel(PixelVector {
                y: p.y / 2,
                x: p.x / 2,
                channels: m.into(),
                padding: false,
            }));
        }
        Ok(())
    }

    fn buffered_bytes(&self) -> usize {
        self.live * self.channels
    }

    fn describe(&self) -> String {
        format!("received {}/{}", self.received, self.h * self.w)
    }
}

/// Turns head groups into 32-bit words in y/x/channel order.
pub(crate) struct HeadSerializer {
    name: String,
    shape: Shape3,
    /// Next expected `(y, x, channel)` as a flat word index.
    next: usize,
}

impl HeadSerializer {
    pub fn new(name: String, shape: Shape3) -> Self {
        HeadSerializer {
            name,
            shape,
            next: 0,
        }
    }
}

impl Stage for HeadSerializer {
    fn accept(&mut self, t: Token, out: &mut VecDeque<Token>) -> Result<()> {
        let Token::Head(g) = t else {
            return Err(unexpected(&self.name, &t));
        };
        let at = (g.y * self.shape.w + g.x) * self.shape.c + g.offset;
        if at != self.next {
            return Err(stream_error(
                &self.name,
                format!(
                    "group ({}, {}, {}) arrived out of y/x/channel order",
                    g.y, g.x, g.offset
                ),
            ));
        }
        self.next += g.values.len();
        out.extend(g.values.into_iter().map(Token::Word));
        Ok(())
    }

    fn describe(&self) -> String {
        format!("serialized {}/{}", self.next, self.shape.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapath::Kernel;
    use crate::fixedpoint::{fx_mul, fx_rescale, QFormat, Rounding, CARRIER_BITS};
    use crate::model::{LayerShapes, LayerSpec, ACT_FMT, CONV1_BIAS_FMT, CONV1_WEIGHT_FMT};
    use crate::quant::BinaryWeight;
    use crate::reference::maxpool2x2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feed(stage: &mut dyn Stage, tokens: impl IntoIterator<Item = Token>) -> Vec<Token> {
        let mut out = VecDeque::new();
        for t in tokens {
            stage.accept(t, &mut out).unwrap();
        }
        out.into()
    }

    fn pixels(img: &ActTensor) -> Vec<Token> {
        let s = img.shape;
        (0..s.h * s.w)
            .map(|n| {
                Token::Pixel(PixelVector {
                    y: n / s.w,
                    x: n % s.w,
                    channels: img.pixel(n / s.w, n % s.w).into(),
                    padding: false,
                })
            })
            .collect()
    }

    fn random_act(shape: Shape3, seed: u64) -> ActTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActTensor::new(shape, (0..shape.len()).map(|_| rng.gen()).collect()).unwrap()
    }

    fn zero_pad(img: &ActTensor) -> ActTensor {
        let s = img.shape;
        let p = Shape3::new(s.c, s.h + 2, s.w + 2);
        let mut out = ActTensor::zeros(p);
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    out.data[p.index(c, y + 1, x + 1)] = img.get(c, y, x);
                }
            }
        }
        out
    }

    fn layer(
        spec: LayerSpec,
        kernel: Kernel,
        bias: Vec<i64>,
        div: Vec<FxValue>,
        act_frac: u32,
        w_frac: u32,
        hw: usize,
    ) -> Arc<CompiledLayer> {
        let acc_frac = w_frac + act_frac;
        let input = Shape3::new(spec.in_channels, hw, hw);
        let conv = Shape3::new(spec.out_channels, hw, hw);
        Arc::new(CompiledLayer {
            shapes: LayerShapes {
                input,
                conv,
                output: conv,
            },
            kernel,
            acc_fmt: QFormat::new(true, CARRIER_BITS - 1 - acc_frac, acc_frac).unwrap(),
            bias,
            div,
            spec,
        })
    }

    fn unit_div(n: usize) -> Vec<FxValue> {
        vec![
            FxValue {
                raw: 1 << 16,
                fmt: QFormat::uq(1, 16)
            };
            n
        ]
    }

    #[test]
    fn pad_single_pixel() {
        let img = ActTensor::new(Shape3::new(1, 1, 1), vec![7]).unwrap();
        let out = feed(&mut PadAdapter::new("p".into(), img.shape), pixels(&img));
        let vals: Vec<u8> = out
            .iter()
            .map(|t| match t {
                Token::Pixel(p) => p.channels[0],
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(vals, [0, 0, 0, 0, 7, 0, 0, 0, 0]);
    }

    #[test]
    fn pad_matches_array_oracle() {
        let img = random_act(Shape3::new(2, 4, 4), 1);
        let padded = zero_pad(&img);
        let out = feed(&mut PadAdapter::new("p".into(), img.shape), pixels(&img));
        assert_eq!(out.len(), 36);
        for (n, t) in out.iter().enumerate() {
            let Token::Pixel(p) = t else { unreachable!() };
            assert_eq!((p.y, p.x), (n / 6, n % 6));
            assert_eq!(&*p.channels, padded.pixel(p.y, p.x).as_slice());
            let border = p.y == 0 || p.x == 0 || p.y == 5 || p.x == 5;
            assert_eq!(p.padding, border);
        }
    }

    #[test]
    fn pad_rejects_excess_pixels() {
        let img = random_act(Shape3::new(1, 2, 2), 2);
        let mut pad = PadAdapter::new("p".into(), img.shape);
        let mut out = VecDeque::new();
        for t in pixels(&img) {
            pad.accept(t, &mut out).unwrap();
        }
        let extra = pixels(&img).remove(0);
        assert!(pad.accept(extra, &mut out).is_err());
    }

    fn windows(img: &ActTensor) -> Vec<WindowToken> {
        let padded = feed(&mut PadAdapter::new("p".into(), img.shape), pixels(img));
        let mut lb = LineBuffer::new("lb".into(), img.shape);
        feed(&mut lb, padded)
            .into_iter()
            .map(|t| match t {
                Token::Window(w) => w,
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn line_buffer_window_counts() {
        assert_eq!(windows(&random_act(Shape3::new(1, 1, 1), 3)).len(), 1);
        assert_eq!(windows(&random_act(Shape3::new(3, 5, 7), 3)).len(), 35);
    }

    #[test]
    fn line_buffer_matches_sliding_window_oracle() {
        let img = random_act(Shape3::new(3, 6, 6), 4);
        let padded = zero_pad(&img);
        let ws = windows(&img);
        assert_eq!(ws.len(), 36);
        for (n, w) in ws.iter().enumerate() {
            assert_eq!((w.y, w.x), (n / 6, n % 6));
            for ky in 0..3 {
                for kx in 0..3 {
                    assert_eq!(
                        &*w.taps[ky * 3 + kx],
                        padded.pixel(w.y + ky, w.x + kx).as_slice()
                    );
                }
            }
        }
    }

    #[test]
    fn line_buffer_holds_at_most_two_rows_and_three_pixels() {
        let img = random_act(Shape3::new(4, 6, 9), 5);
        let padded = feed(&mut PadAdapter::new("p".into(), img.shape), pixels(&img));
        let mut lb = LineBuffer::new("lb".into(), img.shape);
        let mut out = VecDeque::new();
        let mut peak = 0;
        for t in padded {
            lb.accept(t, &mut out).unwrap();
            peak = peak.max(lb.buffered_bytes());
        }
        assert!(peak <= (2 * 9 + 3) * 4);
        assert!(peak >= 2 * 9 * 4 - 4);
    }

    fn acc_values(out: &[Token]) -> Vec<i64> {
        out.iter()
            .flat_map(|t| match t {
                Token::Acc(g) => g.values.clone(),
                _ => unreachable!(),
            })
            .collect()
    }

    fn constant_window(cin: usize, a: u8) -> Token {
        Token::Window(WindowToken {
            y: 0,
            x: 0,
            taps: vec![vec![a; cin].into(); 9],
        })
    }

    #[test]
    fn w1a8_pe_closed_forms() {
        let (cin, cout) = (4, 3);
        let spec = LayerSpec::w1a8("b", cin, cout, 3);
        let signs = BinaryWeight::new(cout, cin, 3, vec![true; cout * cin * 9]).unwrap();
        let l = layer(
            spec.clone(),
            Kernel::Binary {
                signs,
                mul: vec![16384; cin],
            },
            vec![0; cout],
            unit_div(cout),
            0,
            14,
            4,
        );
        let out = feed(
            &mut Pe::new("pe".into(), l, cout),
            [constant_window(cin, 37)],
        );
        assert_eq!(acc_values(&out), vec![9 * cin as i64 * 16384 * 37; cout]);

        // alternating signs on equal inputs cancel
        let signs = BinaryWeight::new(1, 2, 3, (0..18).map(|n| n < 9).collect()).unwrap();
        let l = layer(
            LayerSpec::w1a8("b", 2, 1, 3),
            Kernel::Binary {
                signs,
                mul: vec![9000; 2],
            },
            vec![0],
            unit_div(1),
            0,
            14,
            4,
        );
        assert_eq!(
            acc_values(&feed(
                &mut Pe::new("pe".into(), l, 1),
                [constant_window(2, 200)]
            )),
            [0]
        );
    }

    #[test]
    fn standard_pe_closed_forms() {
        let spec = LayerSpec::standard("c", 2, 2, 3, CONV1_WEIGHT_FMT, CONV1_BIAS_FMT);
        let mut weights = vec![0i64; 36];
        weights[4] = 1 << 11; // out 0, in 0, centre
        let l = layer(
            spec,
            Kernel::Fixed { weights },
            vec![0; 2],
            unit_div(2),
            8,
            11,
            4,
        );
        let mut taps: Vec<Arc<[u8]>> = vec![vec![1, 2].into(); 9];
        taps[4] = vec![99, 5].into();
        let w = Token::Window(WindowToken { y: 0, x: 0, taps });
        assert_eq!(
            acc_values(&feed(&mut Pe::new("pe".into(), l, 2), [w])),
            [99 << 11, 0]
        );
    }

    #[test]
    fn pe_groups_follow_channel_order() {
        let (cin, cout) = (3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let weights: Vec<i64> = (0..cin * cout)
            .map(|_| rng.gen_range(-3000..3000))
            .collect();
        let spec = LayerSpec::standard("h", cin, cout, 1, CONV1_WEIGHT_FMT, CONV1_BIAS_FMT);
        let l = layer(
            spec,
            Kernel::Fixed {
                weights: weights.clone(),
            },
            vec![0; cout],
            unit_div(cout),
            0,
            11,
            1,
        );
        let px = Token::Pixel(PixelVector {
            y: 0,
            x: 0,
            channels: vec![3, 4, 5].into(),
            padding: false,
        });
        let out = feed(&mut Pe::new("pe".into(), l, 3), [px]);
        let offsets: Vec<usize> = out
            .iter()
            .map(|t| if let Token::Acc(g) = t { g.offset } else { 0 })
            .collect();
        assert_eq!(offsets, [0, 3, 6]);
        let want: Vec<i64> = (0..cout)
            .map(|o| {
                (0..cin)
                    .map(|i| weights[o * cin + i] * (3 + i as i64))
                    .sum()
            })
            .collect();
        assert_eq!(acc_values(&out), want);
    }

    proptest! {
        #[test]
        fn w1a8_pe_matches_dot_product_oracle(seed in any::<u64>(), cin in 1usize..6, cout in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let signs = BinaryWeight::new(cout, cin, 3, (0..cout * cin * 9).map(|_| rng.gen()).collect()).unwrap();
            let mul: Vec<i64> = (0..cin).map(|_| rng.gen_range(1..65536)).collect();
            let taps: Vec<Arc<[u8]>> = (0..9).map(|_| (0..cin).map(|_| rng.gen()).collect::<Vec<u8>>().into()).collect();
            let l = layer(LayerSpec::w1a8("b", cin, cout, 3), Kernel::Binary { signs: signs.clone(), mul: mul.clone() }, vec![0; cout], unit_div(cout), 0, 14, 4);
            let out = feed(&mut Pe::new("pe".into(), l, cout), [Token::Window(WindowToken { y: 0, x: 0, taps: taps.clone() })]);
            let want: Vec<i64> = (0..cout)
                .map(|o| {
                    let mut acc = 0i128;
                    for i in 0..cin {
                        for t in 0..9 {
                            acc += signs.value(o, i, t / 3, t % 3) as i128 * (mul[i] as i128 * taps[t][i] as i128);
                        }
                    }
                    acc as i64
                })
                .collect();
            prop_assert_eq!(acc_values(&out), want);
        }

        #[test]
        fn post_matches_scalar_oracle(acc in -(1i64 << 30)..(1i64 << 30), bias in -(1i64 << 20)..(1i64 << 20), div in 1i64..65536) {
            let spec = LayerSpec::w1a8("b", 1, 1, 1);
            let d = FxValue { raw: div, fmt: QFormat::uq(0, 16) };
            let l = layer(spec, Kernel::Fixed { weights: vec![0] }, vec![bias], vec![d], 0, 14, 1);
            let out = feed(&mut Post::new("post".into(), l.clone(), false), [Token::Acc(AccGroup { y: 0, x: 0, offset: 0, values: vec![acc] })]);
            let prod = fx_mul(FxValue { raw: acc + bias, fmt: l.acc_fmt }, d).unwrap();
            let want = fx_rescale(prod, ACT_FMT, Rounding::NearestTiesAway).raw;
            let Token::Pixel(p) = &out[0] else { unreachable!() };
            prop_assert_eq!(p.channels[0] as i64, want);
        }

        #[test]
        fn pool_matches_array_maxpool(seed in any::<u64>(), c in 1usize..4, h2 in 1usize..5, w2 in 1usize..5) {
            let img = random_act(Shape3::new(c, 2 * h2, 2 * w2), seed);
            let out = feed(&mut MaxPool::new("pool".into(), img.shape), pixels(&img));
            let (shape, want) = maxpool2x2(img.shape, &img.data).unwrap();
            prop_assert_eq!(out.len(), h2 * w2);
            for t in out {
                let Token::Pixel(p) = t else { unreachable!() };
                for ch in 0..c {
                    prop_assert_eq!(p.channels[ch], want[shape.index(ch, p.y, p.x)]);
                }
            }
        }
    }

    #[test]
    fn post_clips_and_zeroes() {
        let spec = LayerSpec::w1a8("b", 1, 2, 1);
        let l = layer(
            spec,
            Kernel::Fixed {
                weights: vec![0; 2],
            },
            vec![0; 2],
            unit_div(2),
            0,
            14,
            1,
        );
        let out = feed(
            &mut Post::new("post".into(), l, false),
            [Token::Acc(AccGroup {
                y: 0,
                x: 0,
                offset: 0,
                values: vec![0, 1 << 30],
            })],
        );
        let Token::Pixel(p) = &out[0] else {
            unreachable!()
        };
        assert_eq!(&*p.channels, &[0, 255]);
    }

    #[test]
    fn pool_examples() {
        let img = ActTensor::new(Shape3::new(1, 2, 2), vec![1, 2, 3, 4]).unwrap();
        let out = feed(&mut MaxPool::new("pool".into(), img.shape), pixels(&img));
        assert!(matches!(&out[..], [Token::Pixel(p)] if p.channels[0] == 4));
        let flat = ActTensor::new(Shape3::new(2, 4, 4), vec![9; 32]).unwrap();
        let out = feed(&mut MaxPool::new("pool".into(), flat.shape), pixels(&flat));
        assert_eq!(out.len(), 4);
        assert!(out
            .iter()
            .all(|t| matches!(t, Token::Pixel(p) if *p.channels == [9, 9])));
    }

    #[test]
    fn serializer_enforces_word_order() {
        let shape = Shape3::new(4, 1, 2);
        let group = |x, offset, v: i32| {
            Token::Head(HeadGroup {
                y: 0,
                x,
                offset,
                values: vec![v, v + 1],
            })
        };
        let mut ser = HeadSerializer::new("s".into(), shape);
        let out = feed(
            &mut ser,
            [group(0, 0, 10), group(0, 2, 12), group(1, 0, 20)],
        );
        let words: Vec<i32> = out
            .iter()
            .map(|t| if let Token::Word(w) = t { *w } else { 0 })
            .collect();
        assert_eq!(words, [10, 11, 12, 13, 20, 21]);
        let mut out = VecDeque::new();
        assert!(ser.accept(group(1, 0, 0), &mut out).is_err());
    }
}
