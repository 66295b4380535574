//! Single-threaded replaying client: send a frame, wait for its reply.

use std::net::{ToSocketAddrs, UdpSocket};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{chunk_frame, PredictionMsg};
use crate::data::{downsample, Dataset, DOWNSAMPLE_FACTOR};
use crate::error::{Error, Result};
use crate::net::{FRAME_SIDE, NUM_CLASSES};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Upper bound on frames per second.
    pub rate_hz: f32,
    /// Pause after each reply (or timeout) before the next frame.
    pub inter_frame_delay: Duration,
    pub reply_timeout: Duration,
    /// Consecutive timeouts tolerated before giving up.
    pub max_timeout_streak: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            rate_hz: 10.0,
            inter_frame_delay: Duration::from_millis(100),
            reply_timeout: Duration::from_secs(1),
            max_timeout_streak: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClientReport {
    pub frames: usize,
    pub replies: usize,
    /// Frames with no reply inside the timeout.
    pub lost: usize,
    /// Replies flagged as server-side errors.
    pub errors: usize,
    pub correct: usize,
    /// `correct / replies`; 0 when nothing was answered.
    pub accuracy: f64,
    /// Send of the first chunk to receipt of the reply.
    pub latency_mean_s: f64,
    pub latency_p50_s: f64,
    pub latency_p95_s: f64,
    /// Server-reported inference time.
    pub server_inference_mean_s: f64,
    /// Mean start-to-start time between frames.
    pub frame_period_s: f64,
    pub rate_hz: f32,
    pub inter_frame_delay_s: f64,
    pub elapsed_s: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

/// Nearest-rank percentile of sorted values.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Streams frames `indices` of `dataset` to `target`, one at a time.
/// Native-resolution frames are downsampled 8x per axis before sending.
/// Frame ids are the positions within `indices`.
pub fn stream_client(
    target: impl ToSocketAddrs,
    dataset: &Dataset,
    indices: &[usize],
    config: &ClientConfig,
) -> Result<ClientReport> {
    if !(config.rate_hz > 0.0) {
        return Err(Error::InvalidArgument(format!("rate {} Hz", config.rate_hz)));
    }
    let native = (dataset.height, dataset.width) == (FRAME_SIDE * DOWNSAMPLE_FACTOR, FRAME_SIDE * DOWNSAMPLE_FACTOR);
    if !native && (dataset.height, dataset.width) != (FRAME_SIDE, FRAME_SIDE) {
        return Err(Error::Shape(format!(
            "client sends {FRAME_SIDE}x{FRAME_SIDE} frames, dataset is {}x{}",
            dataset.height, dataset.width
        )));
    }
    let mut report = ClientReport {
        rate_hz: config.rate_hz,
        inter_frame_delay_s: config.inter_frame_delay.as_secs_f64(),
        ..ClientReport::default()
    };
    if indices.is_empty() {
        return Ok(report);
    }

    let target = target
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| Error::Network("target resolves to no address".into()))?;
    let bind = if target.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
    let socket = UdpSocket::bind(bind).map_err(|e| Error::Network(format!("bind: {e}")))?;

    let period = Duration::from_secs_f64(1.0 / config.rate_hz as f64);
    let start = Instant::now();
    let mut next_slot = start;
    let mut latencies = Vec::with_capacity(indices.len());
    let mut server_times = Vec::with_capacity(indices.len());
    let mut streak = 0;
    let mut buf = [0u8; 64];
    let mut last_start = start;

    for (n, &i) in indices.iter().enumerate() {
        let now = Instant::now();
        if next_slot > now {
            thread::sleep(next_slot - now);
        }
        let frame = if native {
            downsample(dataset.frame(i), dataset.height, dataset.width)?
        } else {
            dataset.frame(i).to_vec()
        };
        let frame_id = n as u32;
        let chunks = chunk_frame(&frame, frame_id)?;
        let sent_at = Instant::now();
        last_start = sent_at;
        next_slot = sent_at + period;
        for c in &chunks {
            socket
                .send_to(&c.encode(), target)
                .map_err(|e| Error::Network(format!("send: {e}")))?;
        }
        report.frames += 1;

        let deadline = sent_at + config.reply_timeout;
        let reply = loop {
            let now = Instant::now();
            if now >= deadline {
                break None;
            }
            socket.set_read_timeout(Some(deadline - now))?;
            match socket.recv_from(&mut buf) {
                Ok((len, _)) => match PredictionMsg::decode(&buf[..len]) {
                    Ok(msg) if msg.frame_id == frame_id => break Some((msg, sent_at.elapsed())),
                    // stale reply to an earlier frame, or noise
                    _ => continue,
                },
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                    break None
                }
                Err(e) => return Err(Error::Network(format!("receive: {e}"))),
            }
        };

        match reply {
            None => {
                report.lost += 1;
                streak += 1;
                if streak > config.max_timeout_streak {
                    return Err(Error::Network(format!(
                        "no reply from {target} for {streak} consecutive frames"
                    )));
                }
            }
            Some((msg, latency)) => {
                streak = 0;
                report.replies += 1;
                latencies.push(latency.as_secs_f64());
                if msg.is_error() {
                    report.errors += 1;
                    continue;
                }
                server_times.push(msg.inference_micros as f64 * 1e-6);
                let truth = dataset.label(i).index();
                let predicted = (msg.predicted_class as usize).min(NUM_CLASSES - 1);
                report.confusion[truth][predicted] += 1;
                if truth == predicted {
                    report.correct += 1;
                }
            }
        }
        thread::sleep(config.inter_frame_delay);
    }

    report.elapsed_s = start.elapsed().as_secs_f64();
    if report.frames > 1 {
        report.frame_period_s = (last_start - start).as_secs_f64() / (report.frames - 1) as f64;
    }
    if report.replies > 0 {
        report.accuracy = report.correct as f64 / report.replies as f64;
    }
    report.latency_mean_s = mean(&latencies);
    latencies.sort_by(f64::total_cmp);
    report.latency_p50_s = percentile(&latencies, 50.0);
    report.latency_p95_s = percentile(&latencies, 95.0);
    report.server_inference_mean_s = mean(&server_times);
    Ok(report)
}
