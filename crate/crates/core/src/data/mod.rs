//! Labeled frame datasets: the deterministic synthetic generator, the
//! stratified split, 8x block-mean downsampling and the `UGD1` file format.

mod format;
mod generate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::GestureLabel;
use crate::rng::SeededRng;
use crate::tensor::{round_half_away_f64, Tensor};

pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_HEADER_BYTES};
pub use generate::{class_means, generate, generate_downsampled, render_frame, GenConfig};

/// Per-axis reduction applied between capture and transmission.
pub const DOWNSAMPLE_FACTOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Test = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pixels: Vec<u8>,
    labels: Vec<GestureLabel>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        Dataset {
            height,
            width,
            seed,
            pixels: Vec::new(),
            labels: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn push(&mut self, frame: &[u8], label: GestureLabel, split: Split) -> Result<()> {
        if frame.len() != self.frame_len() {
            return Err(Error::shape(format!(
                "frame has {} pixels, dataset frames are {}x{}",
                frame.len(),
                self.height,
                self.width
            )));
        }
        self.pixels.extend_from_slice(frame);
        self.labels.push(label);
        self.splits.push(split);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Frame `i` as an `[H, W, 1]` tensor.
    pub fn frame_tensor(&self, i: usize) -> Tensor<u8> {
        Tensor::new(vec![self.height, self.width, 1], self.frame(i).to_vec())
            .expect("frame length matches dataset geometry")
    }

    pub fn label(&self, i: usize) -> GestureLabel {
        self.labels[i]
    }

    pub fn labels(&self) -> &[GestureLabel] {
        &self.labels
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Block-mean downsampled copy (labels and split assignments kept).
    pub fn downsampled(&self) -> Result<Dataset> {
        let mut out = Dataset::new(
            self.height / DOWNSAMPLE_FACTOR,
            self.width / DOWNSAMPLE_FACTOR,
            self.seed,
        );
        for i in 0..self.len() {
            let small = downsample(self.frame(i), self.height, self.width)?;
            out.push(&small, self.labels[i], self.splits[i])?;
        }
        Ok(out)
    }
}

/// Averages each 8x8 block; the mean is rounded half away from zero.
pub fn downsample(frame: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    let f = DOWNSAMPLE_FACTOR;
    if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "frame {height}x{width} is not divisible into {f}x{f} blocks"
        )));
    }
    if frame.len() != height * width {
        return Err(Error::shape(format!(
            "frame has {} pixels, expected {height}x{width}",
            frame.len()
        )));
    }
    let (oh, ow) = (height / f, width / f);
    let mut sums = vec![0u32; oh * ow];
    for (y, row) in frame.chunks_exact(width).enumerate() {
        let out_row = &mut sums[(y / f) * ow..][..ow];
        for (o, block) in out_row.iter_mut().zip(row.chunks_exact(f)) {
            *o += block.iter().map(|&v| v as u32).sum::<u32>();
        }
    }
    let n = (f * f) as u32;
    // non-negative sums: half away from zero is (sum + n/2) / n
    Ok(sums.into_iter().map(|s| ((s + n / 2) / n) as u8).collect())
}

/// Stratified, seeded train/test assignment.
///
/// The total test count is `round(N * fraction)`. Each class first receives
/// `floor(n_c * fraction)` test frames; the remaining slots go to the classes
/// with the largest fractional parts, ties broken in seeded random order.
/// Within a class the test frames are the first ones of a seeded shuffle.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); GestureLabel::ALL.len()];
    for (i, l) in dataset.labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let total_test = round_half_away_f64(dataset.len() as f64 * test_fraction) as usize;
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|c| (c.len() as f64 * test_fraction).floor() as usize)
        .collect();
    let mut remaining = total_test.saturating_sub(quota.iter().sum());

    let mut order: Vec<usize> = (0..by_class.len()).collect();
    let mut rng = SeededRng::stream(seed, u64::MAX);
    rng.shuffle(&mut order);
    let frac = |c: usize| {
        let exact = by_class[c].len() as f64 * test_fraction;
        exact - exact.floor()
    };
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)));
    for &c in order.iter().filter(|&&c| !by_class[c].is_empty()) {
        if remaining == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }

    let mut out = dataset.clone();
    out.splits.iter_mut().for_each(|s| *s = Split::Train);
    for (c, members) in by_class.iter_mut().enumerate() {
        SeededRng::stream(seed, c as u64).shuffle(members);
        for &i in &members[..quota[c]] {
            out.splits[i] = Split::Test;
        }
    }
    Ok(out)
}
