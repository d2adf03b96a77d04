//! Shared test doubles.

use std::sync::atomic::{AtomicBool, Ordering};

use jaccard_core::data::FrameSource;

/// Frame source that records every frame index read. `visible` is what the
/// consumer is told the length is; `frames` may hold more (e.g. the gap and
/// future clip behind an observed clip).
pub struct CountingSource<'a> {
    frames: &'a [f64],
    dim: usize,
    visible: usize,
    touched: Vec<AtomicBool>,
}

impl<'a> CountingSource<'a> {
    pub fn new(frames: &'a [f64], dim: usize, visible: usize) -> Self {
        let total = frames.len() / dim;
        Self { frames, dim, visible, touched: (0..total).map(|_| AtomicBool::new(false)).collect() }
    }

    /// Indices read so far, ascending.
    pub fn touched(&self) -> Vec<usize> {
        (0..self.touched.len()).filter(|&t| self.touched[t].load(Ordering::Relaxed)).collect()
    }
}

impl FrameSource for CountingSource<'_> {
    fn frame_count(&self) -> usize {
        self.visible
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn frame(&self, t: usize) -> &[f64] {
        self.touched[t].store(true, Ordering::Relaxed);
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }
}
