use std::sync::Arc;

/// One pixel's channel vector on an 8-bit wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelVector {
    pub y: usize,
    pub x: usize,
    pub channels: Arc<[u8]>,
    /// Synthesized zero border, not image data.
    pub padding: bool,
}

/// A K×K neighbourhood, taps in `[ky][kx]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowToken {
    pub y: usize,
    pub x: usize,
    pub taps: Vec<Arc<[u8]>>,
}

/// Accumulators for output channels `offset..offset + values.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccGroup {
    pub y: usize,
    pub x: usize,
    pub offset: usize,
    pub values: Vec<i64>,
}

/// Post-processed head outputs for one channel group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadGroup {
    pub y: usize,
    pub x: usize,
    pub offset: usize,
    pub values: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Pixel(PixelVector),
    Window(WindowToken),
    Acc(AccGroup),
    Head(HeadGroup),
    Word(i32),
}

impl Token {
    pub fn kind(&self) -> &'static str {
        match self {
            Token::Pixel(_) => "pixel",
            Token::Window(_) => "window",
            Token::Acc(_) => "acc",
            Token::Head(_) => "head",
            Token::Word(_) => "word",
        }
    }
}
