use std::collections::VecDeque;

use super::token::Token;

/// Bounded FIFO between two stages. A full queue is the backpressure signal.
#[derive(Debug)]
pub struct BoundedQueue {
    buf: VecDeque<Token>,
    capacity: usize,
    high_water: usize,
    pushed: u64,
}

impl BoundedQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be at least 1");
        BoundedQueue {
            buf: VecDeque::with_capacity(capacity.min(1024)),
            capacity,
            high_water: 0,
            pushed: 0,
        }
    }

    pub fn has_space(&self) -> bool {
        self.buf.len() < self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Hands `t` back when the queue is full.
    pub fn push(&mut self, t: Token) -> Result<(), Token> {
        if !self.has_space() {
            return Err(t);
        }
        self.buf.push_back(t);
        self.pushed += 1;
        self.high_water = self.high_water.max(self.buf.len());
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Token> {
        self.buf.pop_front()
    }

    pub fn peek(&self) -> Option<&Token> {
        self.buf.front()
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn drain(&mut self) -> impl Iterator<Item = Token> + '_ {
        self.buf.drain(..)
    }
}
