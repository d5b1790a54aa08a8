//! Explicit memory (a sliding window over the most recent frames) and the
//! implicit-memory initialization policy.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{ModelState, ParamBlocks};
use crate::rng::{self, tag};
use crate::streamgen::LabeledFrame;

/// The last `capacity` frames in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBuffer {
    capacity: usize,
    frames: VecDeque<LabeledFrame>,
}

impl WindowBuffer {
    pub fn new(capacity: usize) -> Result<WindowBuffer> {
        if capacity == 0 {
            return Err(Error::InvalidSpec("window size must be at least 1".into()));
        }
        Ok(WindowBuffer { capacity, frames: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &LabeledFrame> {
        self.frames.iter()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.frames.iter().map(LabeledFrame::index).collect()
    }

    pub fn get(&self, pos: usize) -> Option<&LabeledFrame> {
        self.frames.get(pos)
    }

    /// Appends the next frame, evicting the oldest when full. After the first
    /// frame, indices must increase by exactly one.
    pub fn push(&mut self, frame: LabeledFrame) -> Result<()> {
        if let Some(last) = self.frames.back() {
            let expected = last.index() + 1;
            if frame.index() != expected {
                return Err(Error::OutOfOrder { expected, found: frame.index() });
            }
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    /// `batch_size` uniform draws with replacement.
    pub fn sample_batch(&self, batch_size: usize, seed: u64) -> Result<Vec<&LabeledFrame>> {
        Ok(self.sample_positions(batch_size, seed)?.into_iter().map(|p| &self.frames[p]).collect())
    }

    pub fn sample_positions(&self, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
        if self.frames.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut rng = rng::rng_from(seed, &[tag::BATCH]);
        let n = self.frames.len();
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum InitPolicy {
    /// Start frame `t` from the parameters left by frame `t − 1`.
    #[default]
    CarryOver,
    /// Start every frame from the jointly trained `f₀, g₀`.
    Reset,
}

/// Starting parameters for the next frame. `h` is always the frozen `h₀`.
pub fn select_init(policy: InitPolicy, previous: &ParamBlocks, frozen: &ParamBlocks) -> ParamBlocks {
    match policy {
        InitPolicy::CarryOver => ParamBlocks { f: previous.f.clone(), g: previous.g.clone(), h: frozen.h.clone() },
        InitPolicy::Reset => frozen.clone(),
    }
}

/// [`select_init`] on full model states.
pub fn select_init_state(policy: InitPolicy, previous: &ModelState) -> Result<ModelState> {
    let frozen = previous.frozen_init()?;
    Ok(ModelState { params: select_init(policy, &previous.params, frozen), frozen_init: Some(frozen.clone()) })
}
