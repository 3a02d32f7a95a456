//! Streaming model of the accelerator datapath.
//!
//! Stages are state machines joined by bounded FIFOs. Each modeled cycle a
//! stage may emit one token downstream and accept one from upstream; a full
//! queue stalls the producer. Any schedule yields the same outputs.
//!
//! Chain per layer: 3×3 layers run pad → line buffer → PE → post-process,
//! 1×1 layers feed the PE directly. Pooling follows where enabled and the
//! head ends in the word serializer.

mod queue;
mod stages;
mod token;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use queue::BoundedQueue;
pub use stages::{LayerTap, StageRole, StageStats};
pub use token::{AccGroup, HeadGroup, PixelVector, Token, WindowToken};

use crate::coe::{rom_latency_model, ReadSchedule};
use crate::datapath::{compile, CompiledModel};
use crate::error::{Error, Result};
use crate::model::ParamManifest;
use crate::tensor::{ActTensor, Shape3};
use stages::{HeadSerializer, LineBuffer, MaxPool, Node, PadAdapter, Passthrough, Pe, Post, Stage};

pub const DEFAULT_QUEUE_CAPACITY: usize = 2;

/// Order in which stages are offered a step within a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Downstream first, every stage every cycle.
    Sequential,
    /// Shuffled order, each stage skipped with the given probability.
    Randomized { seed: u64, skip_probability: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamConfig {
    pub rom_latency: u32,
    pub queue_capacity: usize,
    pub schedule: Schedule,
    /// Capture per-layer raw and post-process checkpoints.
    pub record_taps: bool,
    pub max_cycles: Option<u64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            rom_latency: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            schedule: Schedule::Sequential,
            record_taps: false,
            max_cycles: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    /// Head words in y/x/channel order.
    pub words: Vec<i32>,
    pub head_shape: Shape3,
    pub stats: Vec<StageStats>,
    /// Modeled cycles from the first input token to the last head word.
    pub cycles: u64,
    pub taps: Vec<LayerTap>,
}

impl StreamOutput {
    /// Head values in CHW order.
    pub fn head_chw(&self) -> Result<Vec<i32>> {
        deserialize_head(&self.words, self.head_shape)
    }

    pub fn tap(&self, layer: &str) -> Option<&LayerTap> {
        self.taps.iter().find(|t| t.name == layer)
    }
}

/// CHW head values to y/x/channel word order.
pub fn serialize_head(chw: &[i32], shape: Shape3) -> Result<Vec<i32>> {
    if chw.len() != shape.len() {
        return Err(Error::HeadLength {
            found: chw.len(),
            expected: shape.len(),
        });
    }
    let mut words = Vec::with_capacity(chw.len());
    for y in 0..shape.h {
        for x in 0..shape.w {
            words.extend((0..shape.c).map(|c| chw[shape.index(c, y, x)]));
        }
    }
    Ok(words)
}

/// Inverse of [`serialize_head`].
pub fn deserialize_head(words: &[i32], shape: Shape3) -> Result<Vec<i32>> {
    if words.len() != shape.len() {
        return Err(Error::HeadLength {
            found: words.len(),
            expected: shape.len(),
        });
    }
    let mut chw = vec![0; words.len()];
    for (n, &w) in words.iter().enumerate() {
        let (pos, c) = (n / shape.c, n % shape.c);
        chw[shape.index(c, pos / shape.w, pos % shape.w)] = w;
    }
    Ok(chw)
}

/// Raw head file bytes: little-endian signed 32-bit words.
pub fn encode_head_words(words: &[i32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn decode_head_words(bytes: &[u8]) -> Result<Vec<i32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "{} bytes is not a whole number of 32-bit words",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn run_stream(
    manifest: &ParamManifest,
    image: &ActTensor,
    config: &StreamConfig,
) -> Result<StreamOutput> {
    run_compiled(&compile(manifest)?, image, config)
}

pub fn run_compiled(
    cm: &CompiledModel,
    image: &ActTensor,
    config: &StreamConfig,
) -> Result<StreamOutput> {
    let input = cm.model.input;
    if image.shape != input {
        return Err(Error::Shape(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.shape.c, image.shape.h, image.shape.w, input.c, input.h, input.w
        )));
    }
    run_pixels(cm, raster(image), config)
}

/// Row-major pixel tokens of a CHW tensor.
pub fn raster(image: &ActTensor) -> Vec<PixelVector> {
    let s = image.shape;
    (0..s.h * s.w)
        .map(|n| PixelVector {
            y: n / s.w,
            x: n % s.w,
            channels: image.pixel(n / s.w, n % s.w).into(),
            padding: false,
        })
        .collect()
}

/// Runs the pipeline on an explicit input token stream.
pub fn run_pixels(
    cm: &CompiledModel,
    pixels: Vec<PixelVector>,
    config: &StreamConfig,
) -> Result<StreamOutput> {
    if config.queue_capacity == 0 {
        return Err(Error::Stream {
            stage: "config".into(),
            reason: "queue capacity must be at least 1".into(),
        });
    }
    if let Schedule::Randomized {
        skip_probability: p,
        ..
    } = config.schedule
    {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Stream {
                stage: "config".into(),
                reason: format!("skip probability {p} outside [0, 1)"),
            });
        }
    }
    let rom = rom_latency_model(config.rom_latency)?;
    let head_shape = cm.model.output_shape();
    let mut nodes = build_nodes(cm, rom, config)?;
    let mut queues = Vec::with_capacity(nodes.len() + 1);
    queues.push(BoundedQueue::new(pixels.len().max(1)));
    for q in pixels {
        queues[0].push(Token::Pixel(q)).expect("sized to the input");
    }
    for _ in 1..nodes.len() {
        queues.push(BoundedQueue::new(config.queue_capacity));
    }
    queues.push(BoundedQueue::new(head_shape.len().max(1)));

    let cycles = schedule(&mut nodes, &mut queues, head_shape.len(), config)?;

    let words = queues
        .last_mut()
        .expect("collector queue")
        .drain()
        .map(|t| match t {
            Token::Word(w) => Ok(w),
            other => Err(Error::Stream {
                stage: "collector".into(),
                reason: format!("unexpected {} token", other.kind()),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = Vec::with_capacity(nodes.len());
    let mut taps = Vec::new();
    for (k, node) in nodes.iter_mut().enumerate() {
        node.stats.queue_high_water = queues[k + 1].high_water();
        stats.push(node.stats.clone());
        taps.extend(node.stage.take_tap());
    }
    Ok(StreamOutput {
        words,
        head_shape,
        stats,
        cycles,
        taps,
    })
}

fn build_nodes(cm: &CompiledModel, rom: ReadSchedule, config: &StreamConfig) -> Result<Vec<Node>> {
    let mut nodes = vec![Node::new(
        Box::new(Passthrough),
        StageStats::new("input".into(), "", StageRole::Source),
        None,
    )];
    for layer in &cm.layers {
        let layer = Arc::new(layer.clone());
        let name = layer.spec.name.as_str();
        let shapes = layer.shapes;
        let mut add = |suffix: &str,
                       role: StageRole,
                       stage: Box<dyn Stage>,
                       gated: bool,
                       budget: Option<usize>| {
            let mut stats = StageStats::new(format!("{name}.{suffix}"), name, role);
            stats.buffer_budget_bytes = budget;
            nodes.push(Node::new(stage, stats, gated.then_some(rom)));
        };
        match layer.spec.kernel {
            1 => {}
            3 => {
                add(
                    "pad",
                    StageRole::Pad,
                    Box::new(PadAdapter::new(format!("{name}.pad"), shapes.input)),
                    false,
                    None,
                );
                add(
                    "line_buffer",
                    StageRole::LineBuffer,
                    Box::new(LineBuffer::new(format!("{name}.line_buffer"), shapes.input)),
                    false,
                    Some(2 * shapes.conv.w * layer.spec.out_channels),
                );
            }
            k => {
                return Err(Error::Shape(format!(
                    "{name}: kernel {k} is not supported by the stream engine"
                )))
            }
        }
        let group = if layer.spec.is_head() {
            cm.model.head_pe_num
        } else {
            layer.spec.out_channels
        };
        add(
            "pe",
            StageRole::Pe,
            Box::new(Pe::new(format!("{name}.pe"), layer.clone(), group)),
            true,
            None,
        );
        add(
            "post",
            StageRole::Post,
            Box::new(Post::new(
                format!("{name}.post"),
                layer.clone(),
                config.record_taps,
            )),
            true,
            None,
        );
        if layer.spec.has_maxpool {
            if shapes.conv.h % 2 != 0 || shapes.conv.w % 2 != 0 {
                return Err(Error::Shape(format!(
                    "{name}: pooling needs even dimensions, got {}x{}",
                    shapes.conv.h, shapes.conv.w
                )));
            }
            add(
                "pool",
                StageRole::MaxPool,
                Box::new(MaxPool::new(format!("{name}.pool"), shapes.conv)),
                false,
                Some(3 * shapes.output.w * shapes.output.c),
            );
        }
        if layer.spec.is_head() {
            add(
                "serializer",
                StageRole::Serializer,
                Box::new(HeadSerializer::new(
                    format!("{name}.serializer"),
                    shapes.output,
                )),
                false,
                None,
            );
        }
    }
    Ok(nodes)
}

/// Steps every stage once per cycle until the stream drains. Returns the
/// number of modeled cycles.
fn schedule(
    nodes: &mut [Node],
    queues: &mut [BoundedQueue],
    expected: usize,
    config: &StreamConfig,
) -> Result<u64> {
    let mut order: Vec<usize> = (0..nodes.len()).rev().collect();
    let mut rng = match config.schedule {
        Schedule::Randomized { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Schedule::Sequential => None,
    };
    let skip = match config.schedule {
        Schedule::Randomized {
            skip_probability, ..
        } => skip_probability,
        Schedule::Sequential => 0.0,
    };
    let mut cycle = 0u64;
    let mut last_progress = 0u64;
    loop {
        let drained = nodes.iter().all(Node::idle)
            && queues[..queues.len() - 1]
                .iter()
                .all(BoundedQueue::is_empty);
        if drained {
            let produced = queues.last().map_or(0, BoundedQueue::len);
            if produced != expected {
                return Err(Error::Deadlock {
                    cycle,
                    dump: format!(
                        "stream drained after {produced} of {expected} head words\n{}",
                        dump(nodes, queues)
                    ),
                });
            }
            return Ok(last_progress + 1);
        }
        if config.max_cycles.is_some_and(|m| cycle >= m) {
            return Err(Error::Deadlock {
                cycle,
                dump: format!("cycle limit reached\n{}", dump(nodes, queues)),
            });
        }
        if let Some(rng) = &mut rng {
            order.shuffle(rng);
        }
        let mut progress = false;
        let mut waiting = false;
        let mut skipped = false;
        for &k in &order {
            if let Some(rng) = &mut rng {
                if skip > 0.0 && rng.gen_bool(skip) {
                    skipped = true;
                    continue;
                }
            }
            let (before, after) = queues.split_at_mut(k + 1);
            let out = nodes[k].step(&mut before[k], &mut after[0], cycle)?;
            progress |= out.progress;
            waiting |= out.waiting;
        }
        if progress {
            last_progress = cycle;
        } else if !waiting && !skipped {
            return Err(Error::Deadlock {
                cycle,
                dump: dump(nodes, queues),
            });
        }
        cycle += 1;
    }
}

fn dump(nodes: &[Node], queues: &[BoundedQueue]) -> String {
    let mut s = String::new();
    for (k, n) in nodes.iter().enumerate() {
        let _ = writeln!(
            s,
            "  {:<24} in={:<8} out={:<8} pending={:<4} queue={}/{} {}",
            n.stats.name,
            n.stats.tokens_in,
            n.stats.tokens_out,
            n.pending.len(),
            queues[k + 1].len(),
            queues[k + 1].capacity(),
            n.stage.describe()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{noise_image, random_manifest, random_tiny_model, tiny_fixture_model};
    use crate::reference::forward_compiled;

    fn tiny(seed: u64) -> (CompiledModel, ActTensor) {
        let model = random_tiny_model(seed);
        let m = random_manifest(&model, seed).unwrap();
        (compile(&m).unwrap(), noise_image(model.input, seed ^ 0x55))
    }

    #[test]
    fn head_serialization_order() {
        let shape = Shape3::new(3, 2, 2);
        let chw: Vec<i32> = (0..12).collect();
        let words = serialize_head(&chw, shape).unwrap();
        // position (0,0) channels first, then (0,1)
        assert_eq!(&words[..6], &[0, 4, 8, 1, 5, 9]);
        assert_eq!(deserialize_head(&words, shape).unwrap(), chw);
        assert_eq!(
            decode_head_words(&encode_head_words(&words)).unwrap(),
            words
        );
        assert!(decode_head_words(&[0; 5]).is_err());
        assert!(matches!(
            deserialize_head(&words[1..], shape),
            Err(Error::HeadLength {
                found: 11,
                expected: 12
            })
        ));
    }

    #[test]
    fn matches_direct_on_random_models() {
        for seed in 0..24 {
            let (cm, img) = tiny(seed);
            let direct = forward_compiled(&cm, &img).unwrap();
            let out = run_compiled(&cm, &img, &StreamConfig::default()).unwrap();
            assert_eq!(out.head_chw().unwrap(), direct.head, "seed {seed}");
        }
    }

    #[test]
    fn taps_match_direct_checkpoints() {
        let model = tiny_fixture_model();
        let m = random_manifest(&model, 3).unwrap();
        let cm = compile(&m).unwrap();
        let img = noise_image(model.input, 4);
        let direct = forward_compiled(&cm, &img).unwrap();
        let cfg = StreamConfig {
            record_taps: true,
            ..StreamConfig::default()
        };
        let out = run_compiled(&cm, &img, &cfg).unwrap();
        assert_eq!(out.taps.len(), direct.layers.len());
        for (tap, layer) in out.taps.iter().zip(&direct.layers) {
            assert_eq!(tap.name, layer.name);
            assert_eq!(tap.raw, layer.raw);
            assert_eq!(tap.post, layer.post);
        }
        assert_eq!(
            out.taps.last().unwrap().head.as_ref().unwrap(),
            &direct.head
        );
    }

    #[test]
    fn schedule_independence() {
        let (cm, img) = tiny(7);
        let base = run_compiled(&cm, &img, &StreamConfig::default()).unwrap();
        for cap in [1, 2, 8] {
            for (seed, p) in [(1u64, 0.0), (2, 0.3), (3, 0.7)] {
                let cfg = StreamConfig {
                    queue_capacity: cap,
                    schedule: Schedule::Randomized {
                        seed,
                        skip_probability: p,
                    },
                    ..StreamConfig::default()
                };
                assert_eq!(
                    run_compiled(&cm, &img, &cfg).unwrap().words,
                    base.words,
                    "cap {cap} seed {seed}"
                );
            }
            let cfg = StreamConfig {
                queue_capacity: cap,
                rom_latency: 4,
                ..StreamConfig::default()
            };
            assert_eq!(run_compiled(&cm, &img, &cfg).unwrap().words, base.words);
        }
    }

    #[test]
    fn token_conservation_and_buffer_bounds() {
        let model = tiny_fixture_model();
        let m = random_manifest(&model, 5).unwrap();
        let cm = compile(&m).unwrap();
        let out =
            run_compiled(&cm, &noise_image(model.input, 6), &StreamConfig::default()).unwrap();
        for (layer, shapes) in model.layers.iter().zip(model.layer_shapes()) {
            let stat = |role| {
                out.stats
                    .iter()
                    .find(|s| s.layer == layer.name && s.role == role)
            };
            let conv = shapes.conv.h * shapes.conv.w;
            let pe = stat(StageRole::Pe).unwrap();
            assert_eq!(pe.tokens_in as usize, conv);
            assert_eq!(stat(StageRole::Post).unwrap().tokens_in, pe.tokens_out);
            if let Some(lb) = stat(StageRole::LineBuffer) {
                assert_eq!(lb.tokens_out as usize, conv);
                assert!(lb.buffer_peak_bytes <= lb.buffer_budget_bytes.unwrap());
                assert!(lb.buffer_peak_bytes > 0);
            }
            if let Some(pool) = stat(StageRole::MaxPool) {
                assert_eq!(pool.tokens_out as usize, conv / 4);
                assert!(pool.buffer_peak_bytes <= pool.buffer_budget_bytes.unwrap());
            }
        }
        let ser = out
            .stats
            .iter()
            .find(|s| s.role == StageRole::Serializer)
            .unwrap();
        assert_eq!(ser.tokens_out as usize, model.head_words());
        assert!(out
            .stats
            .iter()
            .all(|s| s.queue_high_water <= 2 || s.role == StageRole::Serializer));
    }

    #[test]
    fn cycle_model_is_deterministic_and_counts_rom_latency() {
        let (cm, img) = tiny(11);
        let run = |lat| {
            let cfg = StreamConfig {
                rom_latency: lat,
                ..StreamConfig::default()
            };
            run_compiled(&cm, &img, &cfg).unwrap()
        };
        let a = run(1);
        assert_eq!(a.cycles, run(1).cycles);
        let b = run(3);
        assert!(b.cycles > a.cycles);
        let waits: u64 = b.stats.iter().map(|s| s.rom_wait_cycles).sum();
        assert!(waits >= 2 * cm.layers.len() as u64);
        // at least one cycle per token through the busiest stage
        let busiest = a.stats.iter().map(|s| s.tokens_out).max().unwrap();
        assert!(a.cycles >= busiest);
    }

    #[test]
    fn zero_image_and_bias_give_zero_head() {
        let model = tiny_fixture_model();
        let mut m = random_manifest(&model, 9).unwrap();
        for l in &mut m.layers {
            l.bias.tensor.data.iter_mut().for_each(|b| *b = 0);
        }
        let out = run_stream(&m, &ActTensor::zeros(model.input), &StreamConfig::default()).unwrap();
        assert!(out.words.iter().all(|&w| w == 0));
        assert_eq!(out.words.len(), model.head_words());
    }

    #[test]
    fn truncated_input_reports_a_pipeline_dump() {
        let (cm, img) = tiny(2);
        let mut pixels = raster(&img);
        pixels.truncate(pixels.len() - 3);
        match run_pixels(&cm, pixels, &StreamConfig::default()) {
            Err(Error::Deadlock { dump, .. }) => {
                assert!(dump.contains("drained after"));
                assert!(dump.contains(".pe"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_order_input_is_rejected() {
        let (cm, img) = tiny(2);
        let mut pixels = raster(&img);
        pixels.swap(0, 1);
        assert!(matches!(
            run_pixels(&cm, pixels, &StreamConfig::default()),
            Err(Error::Stream { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let (cm, img) = tiny(1);
        let bad = [
            StreamConfig {
                queue_capacity: 0,
                ..StreamConfig::default()
            },
            StreamConfig {
                rom_latency: 0,
                ..StreamConfig::default()
            },
            StreamConfig {
                schedule: Schedule::Randomized {
                    seed: 0,
                    skip_probability: 1.0,
                },
                ..StreamConfig::default()
            },
        ];
        for cfg in bad {
            assert!(run_compiled(&cm, &img, &cfg).is_err());
        }
        let wrong = ActTensor::zeros(Shape3::new(3, 4, 4));
        assert!(matches!(
            run_compiled(&cm, &wrong, &StreamConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
