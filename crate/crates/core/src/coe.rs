//! ROM packing and COE memory-initialization files.
//!
//! ROM address order is `[out][in][ky][kx]`. Sign bits pack LSB-first
//! within each word (`+1 ↦ 1`), the last word zero-padded. Fixed-point
//! entries occupy `ceil(bits / word_width)` consecutive words, low word
//! first, two's complement across the combined width.

use serde::Serialize;

use crate::error::{CoeError, Error, Result};
use crate::model::{LayerSpec, ParamManifest, Weights};
use crate::quant::{scale_vector_to_fixed, BinaryWeight};

pub const DEFAULT_WORD_WIDTH: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "u32")]
pub enum Radix {
    Bin,
    Hex,
}

impl Radix {
    pub fn value(self) -> u32 {
        match self {
            Radix::Bin => 2,
            Radix::Hex => 16,
        }
    }

    pub fn from_value(v: u32) -> Option<Self> {
        match v {
            2 => Some(Radix::Bin),
            16 => Some(Radix::Hex),
            _ => None,
        }
    }

    fn digits(self, word_width: u32) -> usize {
        match self {
            Radix::Bin => word_width as usize,
            Radix::Hex => word_width.div_ceil(4) as usize,
        }
    }
}

impl From<Radix> for u32 {
    fn from(r: Radix) -> u32 {
        r.value()
    }
}

/// Contents of one ROM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RomImage {
    pub word_width: u32,
    pub radix: Radix,
    pub words: Vec<u64>,
}

impl RomImage {
    pub fn new(word_width: u32, radix: Radix, words: Vec<u64>) -> Result<Self> {
        check_width(word_width)?;
        if let Some(&w) = words.iter().find(|&&w| w > word_mask(word_width)) {
            return Err(Error::Shape(format!(
                "word {w:#x} exceeds {word_width} bits"
            )));
        }
        Ok(RomImage {
            word_width,
            radix,
            words,
        })
    }

    pub fn depth(&self) -> usize {
        self.words.len()
    }
}

fn check_width(word_width: u32) -> Result<(), CoeError> {
    if matches!(word_width, 8 | 16 | 32) {
        Ok(())
    } else {
        Err(CoeError::WordWidth(word_width))
    }
}

fn word_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Where each parameter of a layer lives in its ROM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AddressMap {
    pub layer: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// Bits per entry: 1 for sign bits, the stored width otherwise.
    pub entry_bits: u32,
    pub word_width: u32,
}

impl AddressMap {
    pub fn for_layer(layer: &LayerSpec, entry_bits: u32, word_width: u32) -> Self {
        AddressMap {
            layer: layer.name.clone(),
            out_channels: layer.out_channels,
            in_channels: layer.in_channels,
            kernel: layer.kernel,
            entry_bits,
            word_width,
        }
    }

    pub fn entries(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn entry_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn words_per_entry(&self) -> usize {
        self.entry_bits.div_ceil(self.word_width) as usize
    }

    /// `(word address, bit within word)` of the entry's least significant bit.
    pub fn locate(&self, o: usize, i: usize, ky: usize, kx: usize) -> (usize, u32) {
        let e = self.entry_index(o, i, ky, kx);
        if self.entry_bits == 1 {
            (
                e / self.word_width as usize,
                (e % self.word_width as usize) as u32,
            )
        } else {
            (e * self.words_per_entry(), 0)
        }
    }

    pub fn depth(&self) -> usize {
        if self.entry_bits == 1 {
            self.entries().div_ceil(self.word_width as usize)
        } else {
            self.entries() * self.words_per_entry()
        }
    }
}

/// Sign bits in ROM order, LSB-first within each word.
pub fn pack_signs(signs: &BinaryWeight, word_width: u32) -> Result<RomImage> {
    check_width(word_width)?;
    let ww = word_width as usize;
    let mut words = vec![0u64; signs.len().div_ceil(ww)];
    for (idx, _) in signs.signs().iter().enumerate().filter(|(_, &s)| s) {
        words[idx / ww] |= 1 << (idx % ww);
    }
    RomImage::new(word_width, Radix::Hex, words)
}

pub fn unpack_signs(
    img: &RomImage,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
) -> Result<BinaryWeight> {
    let n = out_channels * in_channels * kernel * kernel;
    let ww = img.word_width as usize;
    if img.depth() != n.div_ceil(ww) {
        return Err(Error::Shape(format!(
            "{} words cannot hold exactly {n} sign bits",
            img.depth()
        )));
    }
    let signs = (0..n)
        .map(|idx| img.words[idx / ww] >> (idx % ww) & 1 == 1)
        .collect();
    BinaryWeight::new(out_channels, in_channels, kernel, signs)
}

/// Fixed-point raws, `ceil(entry_bits / word_width)` words each, low word first.
pub fn pack_fixed(raws: &[i64], entry_bits: u32, word_width: u32) -> Result<RomImage> {
    check_width(word_width)?;
    if entry_bits == 0 || entry_bits > 48 {
        return Err(Error::InvalidFormat(format!("entry width {entry_bits}")));
    }
    let per = entry_bits.div_ceil(word_width);
    let lo = -(1i64 << (entry_bits - 1));
    let hi_unsigned = (1i64 << entry_bits) - 1;
    let mut words = Vec::with_capacity(raws.len() * per as usize);
    for &r in raws {
        if r < lo || r > hi_unsigned {
            return Err(Error::InvalidFormat(format!(
                "raw {r} does not fit {entry_bits} bits"
            )));
        }
        let bits = r as u64 & word_mask(per * word_width);
        for j in 0..per {
            words.push(bits >> (j * word_width) & word_mask(word_width));
        }
    }
    RomImage::new(word_width, Radix::Hex, words)
}

/// Inverse of [`pack_fixed`]; `signed` selects sign extension from `entry_bits`.
pub fn unpack_fixed(img: &RomImage, entry_bits: u32, signed: bool) -> Result<Vec<i64>> {
    let per = entry_bits.div_ceil(img.word_width) as usize;
    if per == 0 || !img.depth().is_multiple_of(per) {
        return Err(Error::Shape(format!(
            "{} words are not whole {entry_bits}-bit entries",
            img.depth()
        )));
    }
    Ok(img
        .words
        .chunks(per)
        .map(|c| {
            let bits = c
                .iter()
                .enumerate()
                .fold(0u64, |acc, (j, &w)| acc | w << (j as u32 * img.word_width))
                & word_mask(entry_bits);
            if signed && entry_bits < 64 && bits >> (entry_bits - 1) & 1 == 1 {
                (bits | !word_mask(entry_bits)) as i64
            } else {
                bits as i64
            }
        })
        .collect())
}

/// Packs a layer's weights: sign bits for W1A8 layers, stored raws otherwise.
pub fn pack_weights(layer: &LayerSpec, weights: &Weights, word_width: u32) -> Result<RomImage> {
    match weights {
        Weights::Binary(b) => {
            if (b.out_channels, b.in_channels, b.kernel)
                != (layer.out_channels, layer.in_channels, layer.kernel)
            {
                return Err(Error::Shape(format!(
                    "{}: sign tensor does not match the layer",
                    layer.name
                )));
            }
            pack_signs(b, word_width)
        }
        Weights::Fixed(t) => {
            if t.raw().len() != layer.weight_count() {
                return Err(Error::Shape(format!(
                    "{}: {} weights for {} slots",
                    layer.name,
                    t.raw().len(),
                    layer.weight_count()
                )));
            }
            pack_fixed(t.raw(), t.stored_bits, word_width)
        }
    }
}

/// Deterministic COE text: lowercase, zero-padded words, `\n` line ends.
pub fn emit_coe(img: &RomImage) -> String {
    let digits = img.radix.digits(img.word_width);
    let mut out = format!(
        "memory_initialization_radix={};\nmemory_initialization_vector=\n",
        img.radix.value()
    );
    let words: Vec<String> = img
        .words
        .iter()
        .map(|&w| match img.radix {
            Radix::Hex => format!("{w:0digits$x}"),
            Radix::Bin => format!("{w:0digits$b}"),
        })
        .collect();
    out.push_str(&words.join(",\n"));
    out.push_str(";\n");
    out
}

struct Scanner<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str) -> Self {
        Scanner {
            chars: text.chars().peekable(),
            line: 1,
            col: 1,
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn pos(&self) -> (usize, usize) {
        (self.line, self.col)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek().filter(|&c| f(c)) {
            s.push(c);
            self.bump();
        }
        s
    }

    fn expect(&mut self, want: char, what: &str) -> Result<(), CoeError> {
        self.skip_ws();
        let (line, col) = self.pos();
        if self.peek() == Some(want) {
            self.bump();
            Ok(())
        } else {
            Err(CoeError::Syntax {
                line,
                col,
                expected: what.to_string(),
            })
        }
    }
}

/// Parses COE text. Whitespace is free-form and lines starting with `;`
/// outside the vector are comments.
pub fn parse_coe(text: &str, word_width: u32) -> Result<RomImage, CoeError> {
    check_width(word_width)?;
    let mut sc = Scanner::new(text);
    let mut radix: Option<Radix> = None;
    let mut words: Option<Vec<u64>> = None;
    loop {
        sc.skip_ws();
        let Some(c) = sc.peek() else { break };
        if c == ';' {
            sc.take_while(|c| c != '\n');
            continue;
        }
        let (line, col) = sc.pos();
        let key = sc
            .take_while(|c| c.is_ascii_alphanumeric() || c == '_')
            .to_ascii_lowercase();
        match key.as_str() {
            "memory_initialization_radix" => {
                sc.expect('=', "'=' after memory_initialization_radix")?;
                sc.skip_ws();
                let (line, col) = sc.pos();
                let value = sc.take_while(|c| c != ';' && !c.is_whitespace());
                radix = Some(
                    value
                        .parse()
                        .ok()
                        .and_then(Radix::from_value)
                        .ok_or(CoeError::Radix { line, col, value })?,
                );
                sc.expect(';', "';' after the radix")?;
            }
            "memory_initialization_vector" => {
                let r = radix.ok_or(CoeError::Syntax {
                    line,
                    col,
                    expected: "memory_initialization_radix before the vector".into(),
                })?;
                sc.expect('=', "'=' after memory_initialization_vector")?;
                words = Some(parse_vector(&mut sc, r, word_width)?);
            }
            _ => {
                return Err(CoeError::Syntax {
                    line,
                    col,
                    expected: "memory_initialization_radix or memory_initialization_vector".into(),
                })
            }
        }
    }
    let (line, col) = sc.pos();
    let words = words.ok_or(CoeError::Syntax {
        line,
        col,
        expected: "memory_initialization_vector".into(),
    })?;
    Ok(RomImage {
        word_width,
        radix: radix.expect("vector requires a radix"),
        words,
    })
}

fn parse_vector(sc: &mut Scanner<'_>, radix: Radix, word_width: u32) -> Result<Vec<u64>, CoeError> {
    let mut words = Vec::new();
    loop {
        sc.skip_ws();
        let (line, col) = sc.pos();
        match sc.peek() {
            None => return Err(CoeError::MissingTerminator { line, col }),
            Some(';') => {
                sc.bump();
                return Ok(words);
            }
            Some(',') if !words.is_empty() => {
                sc.bump();
                continue;
            }
            _ => {}
        }
        let word = sc.take_while(|c| !(c.is_whitespace() || c == ',' || c == ';'));
        if word.is_empty() {
            return Err(CoeError::Syntax {
                line,
                col,
                expected: "a word".into(),
            });
        }
        if !word.chars().all(|c| c.is_digit(radix.value())) {
            return Err(CoeError::Digit { line, col, word });
        }
        match u64::from_str_radix(&word, radix.value()) {
            Ok(v) if v <= word_mask(word_width) => words.push(v),
            _ => {
                return Err(CoeError::WordOverflow {
                    line,
                    col,
                    word,
                    width: word_width,
                })
            }
        }
    }
}

/// Read timing of a pipelined ROM: an address issued at cycle `t` yields
/// data usable at `t + latency`; back-to-back reads return one per cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ReadSchedule {
    pub latency: u32,
}

impl ReadSchedule {
    pub fn usable_at(&self, issued: u64) -> u64 {
        issued + self.latency as u64
    }

    /// Cycle at which the `n`-th of a burst of reads starting at `issued` is usable.
    pub fn burst_usable_at(&self, issued: u64, n: u64) -> u64 {
        self.usable_at(issued) + n
    }
}

pub fn rom_latency_model(read_latency: u32) -> Result<ReadSchedule> {
    if read_latency == 0 {
        return Err(Error::InvalidFormat(
            "ROM read latency must be at least one cycle".into(),
        ));
    }
    Ok(ReadSchedule {
        latency: read_latency,
    })
}

/// One generated ROM and where its contents came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RomEntry {
    pub name: String,
    pub layer: String,
    pub field: String,
    pub entry_bits: u32,
    pub entries: usize,
    pub word_width: u32,
    pub depth: usize,
    pub radix: Radix,
}

/// Every parameter ROM of a manifest, in layer order: weights, bias,
/// `Mul_prev` (W1A8 only) and `Div_current`.
///
/// Scales are positive, so their entries store `int + frac` bits without
/// the sign bit.
pub fn build_roms(
    m: &ParamManifest,
    word_width: u32,
    radix: Radix,
) -> Result<Vec<(RomEntry, RomImage)>> {
    m.validate()?;
    let mut roms = Vec::new();
    for (spec, p) in m.model.layers.iter().zip(&m.layers) {
        let mut push = |field: &str, entry_bits: u32, entries: usize, mut img: RomImage| {
            img.radix = radix;
            roms.push((
                RomEntry {
                    name: format!("{}_{field}", spec.name),
                    layer: spec.name.clone(),
                    field: field.to_string(),
                    entry_bits,
                    entries,
                    word_width,
                    depth: img.depth(),
                    radix,
                },
                img,
            ));
        };
        let w_bits = match &p.weights {
            Weights::Binary(_) => 1,
            Weights::Fixed(t) => t.stored_bits,
        };
        push(
            "w",
            w_bits,
            spec.weight_count(),
            pack_weights(spec, &p.weights, word_width)?,
        );
        push(
            "b",
            p.bias.stored_bits,
            spec.out_channels,
            pack_fixed(p.bias.raw(), p.bias.stored_bits, word_width)?,
        );
        let scales = p
            .mul_prev
            .iter()
            .map(|s| ("mul", s))
            .chain([("div", &p.div_current)]);
        for (field, s) in scales {
            let raws: Vec<i64> = scale_vector_to_fixed(&s.values, s.fmt)?
                .iter()
                .map(|v| v.raw)
                .collect();
            let bits = s.fmt.int_bits() + s.fmt.frac_bits();
            push(
                field,
                bits,
                raws.len(),
                pack_fixed(&raws, bits, word_width)?,
            );
        }
    }
    Ok(roms)
}
