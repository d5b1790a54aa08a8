use alloc::vec::Vec;

use crate::rng::{self, tag};

/// A frame split into visible and masked positions, plus the encoder input:
/// masked values zeroed, followed by a binary mask channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub masked_values: Vec<f64>,
    pub input_with_mask: Vec<f64>,
}

impl MaskedView {
    pub fn len(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `1.0` at masked positions.
    pub fn mask_channel(&self) -> &[f64] {
        &self.input_with_mask[self.len()..]
    }

    /// Recovers the original frame values.
    pub fn original(&self) -> Vec<f64> {
        let mut out = self.input_with_mask[..self.len()].to_vec();
        for (&i, &v) in self.masked_idx.iter().zip(&self.masked_values) {
            out[i] = v;
        }
        out
    }
}

/// Masks exactly `round(ratio·N)` positions, drawn uniformly without replacement.
/// `ratio` is clamped to `[0, 1]`.
pub fn mask_frame(values: &[f64], ratio: f64, seed: u64) -> MaskedView {
    let n = values.len();
    let count = (libm::round(ratio.clamp(0.0, 1.0) * n as f64) as usize).min(n);
    let mut rng = rng::rng_from(seed, &[tag::MASK]);
    let mut masked_idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
    masked_idx.sort_unstable();

    let mut mask = alloc::vec![0.0; n];
    for &i in &masked_idx {
        mask[i] = 1.0;
    }
    let visible_idx = (0..n).filter(|&i| mask[i] == 0.0).collect();
    let masked_values = masked_idx.iter().map(|&i| values[i]).collect();
    let mut input_with_mask: Vec<f64> = values.iter().zip(&mask).map(|(&v, &m)| if m == 1.0 { 0.0 } else { v }).collect();
    input_with_mask.extend_from_slice(&mask);
    MaskedView { visible_idx, masked_idx, masked_values, input_with_mask }
}
