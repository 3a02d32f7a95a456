use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use w1a8::coe::{build_roms, emit_coe, Radix, DEFAULT_WORD_WIDTH};
use w1a8::detect::{detect, HeadLayout};
use w1a8::fixture::{
    default_fixture, example_layout, random_manifest, synthetic_image, tiny_fixture_model,
    FIXTURE_SEED,
};
use w1a8::image::{draw_boxes, read_ppm, write_ppm};
use w1a8::model::estimate_storage;
use w1a8::reference::{
    forward_fixed_direct, forward_float, image_to_float, write_dump, DumpData, TensorDump,
};
use w1a8::stream::{
    decode_head_words, encode_head_words, run_stream, serialize_head, StreamConfig,
};
use w1a8::verify::{layerwise_compare, Checkpoints};
use w1a8::{build_default_model, load_manifest, save_manifest, ActTensor, ParamManifest, Shape3};

/// Toolchain for the W1A8 detector datapath.
#[derive(Parser)]
#[command(name = "w1a8", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack every parameter ROM into a COE file.
    Coegen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WORD_WIDTH)]
        word_width: u32,
        #[arg(long, value_enum, default_value_t = RadixArg::Hex)]
        radix: RadixArg,
    },
    /// Run one engine on a P6 image and dump every layer.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Engine::Stream)]
        engine: Engine,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 1)]
        rom_latency: u32,
    },
    /// Layer-wise comparison of the float, direct and streaming engines.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Compare every layer, not just the standard checkpoints.
        #[arg(long)]
        all_layers: bool,
    },
    /// Line-buffer and weight storage table.
    Estimate {
        /// Defaults to the built-in model.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Decode a raw head file into boxes.
    Detect {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
        /// Grid height and width of the head.
        #[arg(long, default_value_t = 10)]
        grid: usize,
        /// Write the box list here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Image to draw the boxes on; requires --render.
        #[arg(long, requires = "render")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        render: Option<PathBuf>,
    },
    /// Write a seeded random manifest, image and anchor file.
    #[command(hide = true)]
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "W1A8_SEED", default_value_t = FIXTURE_SEED)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FixtureModel::Default)]
        model: FixtureModel,
        #[arg(long)]
        zero_bias: bool,
        #[arg(long)]
        zero_image: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RadixArg {
    Hex,
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Stream,
    Direct,
    Float,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureModel {
    Default,
    Tiny,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Coegen {
            manifest,
            out,
            word_width,
            radix,
        } => coegen(&manifest, &out, word_width, radix).map(|()| true),
        Command::Infer {
            manifest,
            image,
            engine,
            dump,
            rom_latency,
        } => infer(&manifest, &image, engine, &dump, rom_latency).map(|()| true),
        Command::Verify {
            manifest,
            image,
            json,
            all_layers,
        } => verify(&manifest, &image, json.as_deref(), all_layers),
        Command::Estimate { manifest, json } => estimate(manifest.as_deref(), json).map(|()| true),
        Command::Detect {
            head,
            anchors,
            conf,
            iou,
            grid,
            out,
            image,
            render,
        } => detect_cmd(
            &head,
            &anchors,
            conf,
            iou,
            grid,
            out.as_deref(),
            image.as_deref().zip(render.as_deref()),
        )
        .map(|()| true),
        Command::GenFixture {
            out,
            seed,
            model,
            zero_bias,
            zero_image,
        } => gen_fixture(&out, seed, model, zero_bias, zero_image).map(|()| true),
    }
}

fn load(dir: &Path) -> Result<ParamManifest> {
    load_manifest(dir).with_context(|| format!("loading manifest {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn json_text(v: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn coegen(manifest: &Path, out: &Path, word_width: u32, radix: RadixArg) -> Result<()> {
    let m = load(manifest)?;
    let radix = match radix {
        RadixArg::Hex => Radix::Hex,
        RadixArg::Bin => Radix::Bin,
    };
    let roms = build_roms(&m, word_width, radix)?;
    create_dir(out)?;
    let mut index = Vec::with_capacity(roms.len());
    for (entry, img) in &roms {
        let file = format!("{}.coe", entry.name);
        write(&out.join(&file), emit_coe(img))?;
        let mut v = serde_json::to_value(entry)?;
        v["file"] = json!(file);
        index.push(v);
    }
    write(
        &out.join("index.json"),
        json_text(&json!({ "roms": index }))?,
    )?;
    println!("wrote {} ROMs to {}", roms.len(), out.display());
    Ok(())
}

fn read_image(path: &Path, m: &ParamManifest) -> Result<ActTensor> {
    let img = read_ppm(path)?;
    if img.shape != m.model.input {
        bail!(
            "{}: image is {}, the model expects {}",
            path.display(),
            img.shape,
            m.model.input
        );
    }
    Ok(img)
}

fn dump(
    dir: &Path,
    name: &str,
    shape: Shape3,
    format: Option<w1a8::QFormat>,
    data: DumpData,
) -> Result<()> {
    let d = TensorDump {
        name: name.to_string(),
        shape: shape.dims().to_vec(),
        format,
        data,
    };
    write_dump(dir, &d).with_context(|| format!("dumping {name}"))
}

fn infer(
    manifest: &Path,
    image: &Path,
    engine: Engine,
    out: &Path,
    rom_latency: u32,
) -> Result<()> {
    let m = load(manifest)?;
    let img = read_image(image, &m)?;
    create_dir(out)?;
    let head_shape = m.model.output_shape();
    match engine {
        Engine::Float => {
            for l in forward_float(&m, &image_to_float(&img))? {
                dump(
                    out,
                    &format!("{}_pre", l.name),
                    l.pre.shape,
                    None,
                    DumpData::F64(l.pre.data),
                )?;
                dump(
                    out,
                    &format!("{}_out", l.name),
                    l.out.shape,
                    None,
                    DumpData::F64(l.out.data),
                )?;
                if let Some(q) = l.q {
                    dump(
                        out,
                        &format!("{}_q", l.name),
                        q.shape,
                        None,
                        DumpData::U8(q.data),
                    )?;
                }
            }
        }
        Engine::Direct => {
            let d = forward_fixed_direct(&m, &img)?;
            for l in &d.layers {
                let shape = Shape3::new(l.raw.shape[0], l.raw.shape[1], l.raw.shape[2]);
                dump(
                    out,
                    &format!("{}_raw", l.name),
                    shape,
                    Some(l.raw.fmt),
                    DumpData::I64(l.raw.data.clone()),
                )?;
                if let Some(p) = &l.post {
                    dump(
                        out,
                        &format!("{}_post", l.name),
                        p.shape,
                        None,
                        DumpData::U8(p.data.clone()),
                    )?;
                }
            }
            write(
                &out.join("head.bin"),
                encode_head_words(&serialize_head(&d.head, head_shape)?),
            )?;
        }
        Engine::Stream => {
            let config = StreamConfig {
                rom_latency,
                record_taps: true,
                ..StreamConfig::default()
            };
            let s = run_stream(&m, &img, &config)?;
            for t in &s.taps {
                let shape = Shape3::new(t.raw.shape[0], t.raw.shape[1], t.raw.shape[2]);
                dump(
                    out,
                    &format!("{}_raw", t.name),
                    shape,
                    Some(t.raw.fmt),
                    DumpData::I64(t.raw.data.clone()),
                )?;
                if let Some(p) = &t.post {
                    dump(
                        out,
                        &format!("{}_post", t.name),
                        p.shape,
                        None,
                        DumpData::U8(p.data.clone()),
                    )?;
                }
            }
            write(&out.join("head.bin"), encode_head_words(&s.words))?;
            let stats = json!({
                "rom_latency": rom_latency,
                "queue_capacity": config.queue_capacity,
                "cycles_per_frame": s.cycles,
                "stages": s.stats,
            });
            write(&out.join("stats.json"), json_text(&stats)?)?;
            println!("cycles per frame: {}", s.cycles);
        }
    }
    println!("wrote dumps to {}", out.display());
    Ok(())
}

/// `Ok(false)` when the streaming engine is not bit-exact.
fn verify(
    manifest: &Path,
    image: &Path,
    json_out: Option<&Path>,
    all_layers: bool,
) -> Result<bool> {
    let m = load(manifest)?;
    let img = read_image(image, &m)?;
    let which = if all_layers {
        Checkpoints::AllLayers
    } else {
        Checkpoints::Standard
    };
    let report = layerwise_compare(&m, &img, which)?;
    print!("{}", report.to_table());
    if let Some(p) = json_out {
        write(p, json_text(&report)?)?;
    }
    let exact = report.stream_vs_direct.bit_exact();
    if !exact {
        eprintln!("streaming engine diverges from the direct engine");
    }
    Ok(exact)
}

fn estimate(manifest: Option<&Path>, as_json: bool) -> Result<()> {
    let model = match manifest {
        Some(dir) => load(dir)?.model,
        None => build_default_model(),
    };
    let report = estimate_storage(&model);
    if as_json {
        print!("{}", json_text(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn detect_cmd(
    head: &Path,
    anchors: &Path,
    conf: f64,
    iou: f64,
    grid: usize,
    out: Option<&Path>,
    render: Option<(&Path, &Path)>,
) -> Result<()> {
    let layout = HeadLayout::load(anchors)
        .with_context(|| format!("loading anchors {}", anchors.display()))?;
    let bytes = fs::read(head).with_context(|| format!("reading {}", head.display()))?;
    let words = decode_head_words(&bytes).with_context(|| format!("{}", head.display()))?;
    let shape = Shape3::new(layout.channels(), grid, grid);
    let boxes =
        detect(&words, shape, &layout, conf, iou).with_context(|| format!("{}", head.display()))?;
    let text = json_text(&json!({ "boxes": boxes }))?;
    match out {
        Some(p) => write(p, text)?,
        None => print!("{text}"),
    }
    if let Some((src, dst)) = render {
        let mut img = read_ppm(src)?;
        draw_boxes(&mut img, &boxes);
        write_ppm(dst, &img)?;
    }
    Ok(())
}

fn gen_fixture(
    out: &Path,
    seed: u64,
    model: FixtureModel,
    zero_bias: bool,
    zero_image: bool,
) -> Result<()> {
    let mut m = match model {
        FixtureModel::Default => default_fixture(seed)?,
        FixtureModel::Tiny => random_manifest(&tiny_fixture_model(), seed)?,
    };
    if zero_bias {
        for l in &mut m.layers {
            l.bias.tensor.data.iter_mut().for_each(|b| *b = 0);
        }
    }
    let manifest_dir = out.join("manifest");
    save_manifest(&m, &manifest_dir)?;
    let img = if zero_image {
        ActTensor::zeros(m.model.input)
    } else {
        synthetic_image(m.model.input, seed.wrapping_add(1))
    };
    write_ppm(out.join("image.ppm"), &img)?;
    write(&out.join("anchors.json"), json_text(&example_layout())?)?;
    println!("wrote fixture (seed {seed}) to {}", out.display());
    Ok(())
}
