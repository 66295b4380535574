//! Receive loop plus one inference worker, joined by a bounded channel.

use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::Serialize;

use super::reassembly::{Insert, ReassemblyBuffer, EXPIRY, MAX_IN_FLIGHT};
use super::{FrameChunk, PredictionMsg, FLAG_COMPLETE, FLAG_ERROR};
use crate::error::{Error, Result};
use crate::net::{ModelGraph, INPUT_SHAPE, NUM_CLASSES};
use crate::quant::Engine;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Every completed frame is inferred (channel capacity 64).
    Queue,
    /// A frame completed while another waits replaces it (capacity 1).
    LatestWins,
}

impl Policy {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "queue" => Some(Policy::Queue),
            "latest_wins" => Some(Policy::LatestWins),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Queue => "queue",
            Policy::LatestWins => "latest_wins",
        }
    }

    fn capacity(self) -> usize {
        match self {
            Policy::Queue => 64,
            Policy::LatestWins => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub policy: Policy,
    pub expiry: Duration,
    pub max_in_flight: usize,
    /// How long a blocking receive waits before checking the stop flag.
    pub poll: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            policy: Policy::LatestWins,
            expiry: EXPIRY,
            max_in_flight: MAX_IN_FLIGHT,
            poll: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    datagrams: AtomicU64,
    malformed: AtomicU64,
    duplicates: AtomicU64,
    completed: AtomicU64,
    lost: AtomicU64,
    superseded: AtomicU64,
    inferences: AtomicU64,
    errors: AtomicU64,
}

/// Snapshot of the server counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServerStats {
    pub datagrams: u64,
    /// Undecodable or inconsistent datagrams.
    pub malformed: u64,
    pub duplicates: u64,
    pub completed: u64,
    /// Incomplete frames expired or evicted.
    pub lost: u64,
    /// Completed frames replaced before inference (latest-wins only).
    pub superseded: u64,
    pub inferences: u64,
    /// Frames answered with an error reply.
    pub errors: u64,
}

impl Counters {
    fn snapshot(&self) -> ServerStats {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ServerStats {
            datagrams: g(&self.datagrams),
            malformed: g(&self.malformed),
            duplicates: g(&self.duplicates),
            completed: g(&self.completed),
            lost: g(&self.lost),
            superseded: g(&self.superseded),
            inferences: g(&self.inferences),
            errors: g(&self.errors),
        }
    }
}

fn bump(a: &AtomicU64) {
    a.fetch_add(1, Ordering::Relaxed);
}

struct Job {
    frame_id: u32,
    peer: SocketAddr,
    frame: Vec<u8>,
}

/// A running server; dropping it stops the threads.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    counters: Arc<Counters>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        self.counters.snapshot()
    }

    /// Flag shared with the threads; storing `true` stops them.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn stop(mut self) -> ServerStats {
        self.shutdown();
        self.counters.snapshot()
    }

    /// Blocks until the stop flag is set by another holder.
    pub fn wait(mut self) -> ServerStats {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.counters.snapshot()
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `bind_addr` and starts serving `model`. Replies go to the address
/// that sent the completing chunk.
pub fn serve(bind_addr: impl ToSocketAddrs, model: &ModelGraph, config: ServerConfig) -> Result<ServerHandle> {
    if model.input_shape != INPUT_SHAPE {
        return Err(Error::Shape(format!(
            "server frames are {INPUT_SHAPE:?}, model expects {:?}",
            model.input_shape
        )));
    }
    let engine = Engine::prepare(model)?;
    let socket = UdpSocket::bind(bind_addr).map_err(|e| Error::Network(format!("bind: {e}")))?;
    socket.set_read_timeout(Some(config.poll))?;
    let addr = socket.local_addr()?;
    let reply_socket = socket.try_clone()?;

    let stop = Arc::new(AtomicBool::new(false));
    let counters = Arc::new(Counters::default());
    let (tx, rx) = bounded::<Job>(config.policy.capacity());

    let worker = {
        let (stop, counters, rx) = (stop.clone(), counters.clone(), rx.clone());
        let poll = config.poll;
        thread::Builder::new()
            .name("usgrip-infer".into())
            .spawn(move || infer_loop(engine, reply_socket, rx, stop, counters, poll))?
    };
    let receiver = {
        let (stop, counters) = (stop.clone(), counters.clone());
        thread::Builder::new()
            .name("usgrip-recv".into())
            .spawn(move || receive_loop(socket, tx, rx, config, stop, counters))?
    };
    Ok(ServerHandle {
        addr,
        stop,
        counters,
        threads: vec![receiver, worker],
    })
}

fn receive_loop(
    socket: UdpSocket,
    tx: Sender<Job>,
    rx: Receiver<Job>,
    config: ServerConfig,
    stop: Arc<AtomicBool>,
    counters: Arc<Counters>,
) {
    let mut buffer = ReassemblyBuffer::new(config.expiry, config.max_in_flight);
    let mut datagram = [0u8; 2048];
    let mut lost_seen = 0;
    while !stop.load(Ordering::SeqCst) {
        let received = socket.recv_from(&mut datagram);
        let now = Instant::now();
        buffer.expire(now);
        if let Ok((n, peer)) = received {
            bump(&counters.datagrams);
            match FrameChunk::decode(&datagram[..n]) {
                Err(_) => bump(&counters.malformed),
                Ok(chunk) => match buffer.insert(chunk, now) {
                    Insert::Pending => {}
                    Insert::Duplicate => bump(&counters.duplicates),
                    Insert::Inconsistent => bump(&counters.malformed),
                    Insert::Complete { frame_id, frame } => {
                        bump(&counters.completed);
                        dispatch(&tx, &rx, Job { frame_id, peer, frame }, config.policy, &counters);
                    }
                },
            }
        }
        let lost = buffer.lost();
        counters.lost.fetch_add(lost - lost_seen, Ordering::Relaxed);
        lost_seen = lost;
    }
}

fn dispatch(tx: &Sender<Job>, rx: &Receiver<Job>, mut job: Job, policy: Policy, counters: &Counters) {
    loop {
        match tx.try_send(job) {
            Ok(()) => return,
            Err(TrySendError::Disconnected(_)) => return,
            Err(TrySendError::Full(back)) => {
                job = back;
                match policy {
                    Policy::LatestWins => {
                        if rx.try_recv().is_ok() {
                            bump(&counters.superseded);
                        }
                    }
                    Policy::Queue => {
                        // wait for the worker; only a stalled worker drops frames
                        if tx.send_timeout(job, Duration::from_secs(1)).is_err() {
                            bump(&counters.superseded);
                        }
                        return;
                    }
                }
            }
        }
    }
}

fn infer_loop(
    engine: Engine,
    socket: UdpSocket,
    rx: Receiver<Job>,
    stop: Arc<AtomicBool>,
    counters: Arc<Counters>,
    poll: Duration,
) {
    while !stop.load(Ordering::SeqCst) {
        let Ok(job) = rx.recv_timeout(poll) else {
            continue;
        };
        let msg = match engine.run_pixels(&job.frame) {
            Ok(inf) => {
                bump(&counters.inferences);
                let mut probabilities = [0f32; NUM_CLASSES];
                probabilities.copy_from_slice(inf.probs.data());
                PredictionMsg {
                    frame_id: job.frame_id,
                    predicted_class: inf.predicted() as u8,
                    flags: FLAG_COMPLETE,
                    probabilities,
                    inference_micros: inf.elapsed.as_micros().min(u32::MAX as u128) as u32,
                }
            }
            Err(_) => {
                bump(&counters.errors);
                PredictionMsg {
                    frame_id: job.frame_id,
                    predicted_class: 0,
                    flags: FLAG_COMPLETE | FLAG_ERROR,
                    probabilities: [1.0 / NUM_CLASSES as f32; NUM_CLASSES],
                    inference_micros: 0,
                }
            }
        };
        let _ = socket.send_to(&msg.encode(), job.peer);
    }
}
