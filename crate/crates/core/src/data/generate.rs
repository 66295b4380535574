//! Synthetic B-mode-like forearm frames.
//!
//! Each frame is a depth-attenuated tissue background, a bright horizontal
//! bone band, and three soft elliptical muscle cross-sections, all under
//! multiplicative Rayleigh speckle. A gesture contracts one muscle: it moves
//! up and brightens while the other two dim by half that amount, so the
//! summed blob intensity (and thus the class mean) is the same for every
//! class. Class 0 (open hand) leaves all three at rest. The contraction
//! strength is drawn per frame, which makes weak gestures hard to tell from
//! the open hand.

use super::{downsample, Dataset, Split, DOWNSAMPLE_FACTOR};
use crate::error::{Error, Result};
use crate::net::GestureLabel;
use crate::rng::SeededRng;
use crate::tensor::round_half_away;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub frames_per_class: usize,
    /// Native frame side in pixels.
    pub size: usize,
    pub seed: u64,
    /// Speckle contrast: 0 is noise free, 1 is fully developed speckle.
    pub noise_amplitude: f32,
    /// Upward displacement of a fully contracted muscle, as a fraction of
    /// the frame side.
    pub contraction_shift: f32,
    /// Brightness gain of a fully contracted muscle (grey levels).
    pub contraction_gain: f32,
    /// Lower bound of the per-frame contraction strength in [0, 1].
    pub min_strength: f32,
    /// Per-muscle position jitter, as a fraction of the frame side.
    pub jitter: f32,
    /// Whole-image probe slip, as a fraction of the frame side.
    pub probe_slip: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames_per_class: 600,
            size: 640,
            seed: 42,
            noise_amplitude: 0.6,
            contraction_shift: 0.06,
            contraction_gain: 30.0,
            min_strength: 0.0,
            jitter: 0.025,
            probe_slip: 0.04,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_class < 4 {
            return Err(Error::invalid("frames_per_class must be at least 4"));
        }
        if self.size < 80 || self.size % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "native size {} must be >= 80 and a multiple of {DOWNSAMPLE_FACTOR}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.min_strength) || !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(Error::invalid("min_strength and noise_amplitude must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.frames_per_class * GestureLabel::ALL.len()
    }
}

const TISSUE_LEVEL: f32 = 46.0;
const DEPTH_ATTENUATION: f32 = 0.35;
const MUSCLE_LEVEL: f32 = 52.0;
const BONE_LEVEL: f32 = 110.0;

/// Label of frame `index`; classes are interleaved.
pub fn frame_label(index: usize) -> GestureLabel {
    GestureLabel::ALL[index % GestureLabel::ALL.len()]
}

/// Renders native frame `index` of the dataset described by `config`.
pub fn render_frame(config: &GenConfig, index: usize) -> (Vec<u8>, GestureLabel) {
    let label = frame_label(index);
    let s = config.size as f32;
    let mut rng = SeededRng::stream(config.seed, index as u64);
    let mut sym = |amp: f32| (rng.uniform() as f32 * 2.0 - 1.0) * amp;

    let slip_y = sym(config.probe_slip * s);
    let slip_x = sym(config.probe_slip * s);
    let gain = 1.0 + sym(0.08);
    let strength = config.min_strength + (1.0 - config.min_strength) * (sym(0.5) + 0.5);
    let muscles: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                sym(config.jitter * s),
                sym(config.jitter * s),
                1.0 + sym(0.08),
                1.0 + sym(0.08),
            )
        })
        .collect();
    let bone_dy = sym(0.01 * s);

    let n = config.size;
    let mut echo = vec![0f32; n * n];
    let bone_y = 0.78 * s + slip_y + bone_dy;
    let bone_sigma = 0.014 * s;
    for (y, row) in echo.chunks_exact_mut(n).enumerate() {
        let yf = y as f32;
        let mut level = TISSUE_LEVEL * (1.0 - DEPTH_ATTENUATION * yf / s);
        if yf > bone_y {
            // acoustic shadow under the bone
            level *= 0.45;
        }
        let db = (yf - bone_y) / bone_sigma;
        level += BONE_LEVEL * (-db * db).exp();
        row.fill(level);
    }

    let active = label.index().checked_sub(1);
    for (k, &(dx, dy, ra, rb)) in muscles.iter().enumerate() {
        let (lift, delta) = match active {
            Some(a) if a == k => (config.contraction_shift * s * strength, config.contraction_gain * strength),
            Some(_) => (0.0, -0.5 * config.contraction_gain * strength),
            None => (0.0, 0.0),
        };
        let cx = s * (0.22 + 0.28 * k as f32) + slip_x + dx;
        let cy = s * 0.42 + slip_y + dy - lift;
        let (a, b) = (0.10 * s * ra, 0.065 * s * rb);
        let intensity = MUSCLE_LEVEL + delta;
        let y0 = (cy - b).floor().max(0.0) as usize;
        let y1 = ((cy + b).ceil().max(0.0) as usize).min(n);
        let x0 = (cx - a).floor().max(0.0) as usize;
        let x1 = ((cx + a).ceil().max(0.0) as usize).min(n);
        for y in y0..y1 {
            let ty = (y as f32 - cy) / b;
            let row = &mut echo[y * n..(y + 1) * n];
            for (x, v) in row.iter_mut().enumerate().take(x1).skip(x0) {
                let tx = (x as f32 - cx) / a;
                let d2 = tx * tx + ty * ty;
                if d2 < 1.0 {
                    *v += intensity * (1.0 - d2);
                }
            }
        }
    }

    // unit-mean Rayleigh speckle
    let norm = (std::f32::consts::PI / 2.0).sqrt().recip();
    let amp = config.noise_amplitude;
    let pixels = echo
        .into_iter()
        .map(|v| {
            let u = 1.0 - rng.uniform() as f32;
            let r = (-2.0 * u.ln()).sqrt() * norm;
            let speckle = 1.0 + amp * (r - 1.0);
            round_half_away(v * gain * speckle).clamp(0.0, 255.0) as u8
        })
        .collect();
    (pixels, label)
}

/// Native-resolution dataset; every frame is assigned to the train split.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut d = Dataset::new(config.size, config.size, config.seed);
    for i in 0..config.total_frames() {
        let (frame, label) = render_frame(config, i);
        d.push(&frame, label, Split::Train)?;
    }
    Ok(d)
}

/// Same frames as [`generate`] followed by downsampling, without holding
/// the native-resolution frames in memory.
pub fn generate_downsampled(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let side = config.size / DOWNSAMPLE_FACTOR;
    let mut d = Dataset::new(side, side, config.seed);
    for i in 0..config.total_frames() {
        let (frame, label) = render_frame(config, i);
        d.push(&downsample(&frame, config.size, config.size)?, label, Split::Train)?;
    }
    Ok(d)
}

/// Mean pixel value of each class.
pub fn class_means(d: &Dataset) -> [f64; 4] {
    let mut sums = [0f64; 4];
    let mut counts = [0usize; 4];
    for i in 0..d.len() {
        let c = d.label(i).index();
        sums[c] += d.frame(i).iter().map(|&v| v as f64).sum::<f64>();
        counts[c] += d.frame_len();
    }
    let mut means = [0f64; 4];
    for c in 0..4 {
        if counts[c] > 0 {
            means[c] = sums[c] / counts[c] as f64;
        }
    }
    means
}
