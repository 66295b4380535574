//! Confusion matrices, per-split evaluation and the bench report.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{GestureLabel, QuantMode, NUM_CLASSES};
use crate::quant::Engine;
use crate::stream::ClientReport;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut m = ConfusionMatrix::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            m.add(l, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= NUM_CLASSES || predicted >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class out of range: true {truth}, predicted {predicted}"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|r| r.iter().sum())
    }

    /// Trace over sum; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        LatencyStats {
            mean_s: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_s: crate::stream::percentile(&sorted, 50.0),
            p95_s: crate::stream::percentile(&sorted, 95.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    /// Wall time of the numeric path per frame.
    pub latency: LatencyStats,
    pub predictions: Vec<usize>,
}

/// Runs `engine` over frames `indices` of `dataset` one at a time.
pub fn evaluate(engine: &Engine, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::default();
    let mut times = Vec::with_capacity(indices.len());
    let mut predictions = Vec::with_capacity(indices.len());
    for &i in indices {
        let inf = engine.run_pixels(dataset.frame(i))?;
        times.push(inf.elapsed.as_secs_f64());
        let p = inf.predicted();
        confusion.add(dataset.label(i).index(), p)?;
        predictions.push(p);
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
        latency: LatencyStats::from_samples(&times),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeReport {
    pub scheme: QuantMode,
    pub model_file_bytes: usize,
    pub payload_bytes: usize,
    pub train: Evaluation,
    pub test: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub machine: String,
    /// Echo of the inputs, in output order.
    pub config: Vec<(String, String)>,
    pub schemes: Vec<SchemeReport>,
    /// End-to-end streaming measurement, when one was run.
    pub stream: Option<ClientReport>,
}

/// Marker appended to every line whose value varies between runs.
pub const NONDETERMINISTIC: &str = "  # nondeterministic";

fn confusion_line(m: &ConfusionMatrix) -> String {
    m.counts
        .iter()
        .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

/// `key=value` lines for one evaluation; latency lines only when asked.
pub fn evaluation_lines(prefix: &str, e: &Evaluation, with_latency: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{prefix}.frames={}", e.confusion.total());
    let _ = writeln!(s, "{prefix}.correct={}", e.confusion.correct());
    let _ = writeln!(s, "{prefix}.accuracy={:.6}", e.accuracy);
    let _ = writeln!(s, "{prefix}.confusion={}", confusion_line(&e.confusion));
    if with_latency {
        let l = &e.latency;
        let _ = writeln!(s, "{prefix}.latency_mean_s={:.9}{NONDETERMINISTIC}", l.mean_s);
        let _ = writeln!(s, "{prefix}.latency_p50_s={:.9}{NONDETERMINISTIC}", l.p50_s);
        let _ = writeln!(s, "{prefix}.latency_p95_s={:.9}{NONDETERMINISTIC}", l.p95_s);
    }
    s
}

impl BenchReport {
    /// Line-oriented `key=value` text in a fixed order. Lines that vary
    /// between runs end with [`NONDETERMINISTIC`].
    pub fn to_text(&self) -> String {
        let mut s = String::from("# usgrip bench report\n");
        let _ = writeln!(s, "machine={}{NONDETERMINISTIC}", self.machine);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for r in &self.schemes {
            let p = format!("scheme.{}", r.scheme.name());
            let _ = writeln!(s, "{p}.model_file_bytes={}", r.model_file_bytes);
            let _ = writeln!(s, "{p}.payload_bytes={}", r.payload_bytes);
            s.push_str(&evaluation_lines(&format!("{p}.train"), &r.train, true));
            s.push_str(&evaluation_lines(&format!("{p}.test"), &r.test, true));
        }
        if let Some(c) = &self.stream {
            let _ = writeln!(s, "stream.frames={}", c.frames);
            let _ = writeln!(s, "stream.lost={}", c.lost);
            let _ = writeln!(s, "stream.accuracy={:.6}", c.accuracy);
            let _ = writeln!(s, "stream.inter_frame_delay_s={}", c.inter_frame_delay_s);
            let _ = writeln!(s, "stream.latency_mean_s={:.6}{NONDETERMINISTIC}", c.latency_mean_s);
            let _ = writeln!(s, "stream.latency_p95_s={:.6}{NONDETERMINISTIC}", c.latency_p95_s);
        }
        s.push_str("\n# table\n");
        s.push_str(&self.table());
        s
    }

    /// Human-readable table: one column per scheme, one row per metric.
    pub fn table(&self) -> String {
        let header = |m: QuantMode| match m {
            QuantMode::F32 => "No Quantization",
            QuantMode::F16 => "Float16",
            QuantMode::DynamicI8 => "Dynamic Range",
            QuantMode::Uint8Affine => "UInt8",
        };
        let rows: Vec<(&str, Vec<String>)> = vec![
            ("Size of Model (bytes)", self.schemes.iter().map(|r| r.model_file_bytes.to_string()).collect()),
            (
                "Train Accuracy",
                self.schemes.iter().map(|r| format!("{:.1}%", 100.0 * r.train.accuracy)).collect(),
            ),
            (
                "Test Accuracy",
                self.schemes.iter().map(|r| format!("{:.1}%", 100.0 * r.test.accuracy)).collect(),
            ),
            (
                "Test Data Time (sample, inference)",
                self.schemes
                    .iter()
                    .map(|r| format!("{:.3} ms", 1e3 * r.test.latency.mean_s))
                    .collect(),
            ),
        ];
        let first = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let widths: Vec<usize> = self
            .schemes
            .iter()
            .enumerate()
            .map(|(k, r)| rows.iter().map(|row| row.1[k].len()).max().unwrap_or(0).max(header(r.scheme).len()))
            .collect();
        let mut s = format!("{:first$}", "");
        for (r, w) in self.schemes.iter().zip(&widths) {
            let _ = write!(s, " | {:>w$}", header(r.scheme));
        }
        s.push('\n');
        for (name, cells) in &rows {
            let _ = write!(s, "{name:first$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(s, " | {c:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Text rendering of a confusion matrix with class names.
pub fn format_confusion(m: &ConfusionMatrix) -> String {
    let names: Vec<&str> = GestureLabel::ALL.iter().map(|l| l.name()).collect();
    let w = names.iter().map(|n| n.len()).max().unwrap_or(0);
    let mut s = format!("{:w$}", "true\\pred");
    for n in &names {
        let _ = write!(s, " {n:>w$}");
    }
    s.push('\n');
    for (i, row) in m.counts.iter().enumerate() {
        let _ = write!(s, "{:w$}", names[i]);
        for c in row {
            let _ = write!(s, " {c:>w$}");
        }
        s.push('\n');
    }
    s
}
