//! Live operation: devices stream binary frames over TCP, one reader thread
//! per connection, and the aggregator ticks on the wall clock.

use std::io::{self, BufReader};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;

use crate::association::SyncQueue;
use crate::harness::codec::read_frame;

use super::{FusedFrame, Pipeline, RunReport};

/// Control shared between the aggregator loop and its owner.
#[derive(Debug, Clone, Default)]
pub struct LiveHandle {
    stop: Arc<AtomicBool>,
    active: Arc<AtomicUsize>,
    seen: Arc<AtomicUsize>,
}

impl LiveHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Connections currently open.
    pub fn active_connections(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    fn all_disconnected(&self) -> bool {
        self.seen.load(Ordering::SeqCst) > 0 && self.active.load(Ordering::SeqCst) == 0
    }
}

fn wall_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn read_connection(stream: TcpStream, queue: Arc<Mutex<SyncQueue>>, handle: LiveHandle) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "?".into());
    let mut reader = BufReader::new(stream);
    loop {
        match read_frame(&mut reader) {
            Ok(Some(msg)) => queue.lock().push(msg.into_batch()),
            Ok(None) => {
                log::info!("{peer} disconnected");
                break;
            }
            Err(e) => {
                log::warn!("{peer}: dropping connection: {e}");
                break;
            }
        }
        if handle.is_stopped() {
            break;
        }
    }
    handle.active.fetch_sub(1, Ordering::SeqCst);
}

/// Accept device connections on `listener` and tick at the configured rate
/// until `handle` is stopped or, with `exit_on_disconnect`, until every
/// device that connected has gone away. The queue is drained by one last
/// tick before returning.
pub fn serve(
    mut pipeline: Pipeline,
    listener: TcpListener,
    handle: LiveHandle,
    exit_on_disconnect: bool,
    mut sink: impl FnMut(&FusedFrame),
) -> io::Result<RunReport> {
    listener.set_nonblocking(true)?;
    let queue = pipeline.queue();
    let accept_handle = handle.clone();
    let acceptor = thread::spawn(move || {
        while !accept_handle.is_stopped() {
            match listener.accept() {
                Ok((stream, addr)) => {
                    log::info!("device connected from {addr}");
                    if let Err(e) = stream.set_nonblocking(false) {
                        log::warn!("{addr}: {e}");
                        continue;
                    }
                    accept_handle.active.fetch_add(1, Ordering::SeqCst);
                    accept_handle.seen.fetch_add(1, Ordering::SeqCst);
                    let q = Arc::clone(&queue);
                    let h = accept_handle.clone();
                    thread::spawn(move || read_connection(stream, q, h));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(e) => {
                    log::error!("accept failed: {e}");
                    break;
                }
            }
        }
    });

    let mut report = RunReport::new(pipeline.config().latency_budget_ms);
    let period = Duration::from_secs_f64(pipeline.config().tick_period());
    let started = Instant::now();
    let mut deadline = Instant::now() + period;
    loop {
        let finishing = handle.is_stopped() || (exit_on_disconnect && handle.all_disconnected());
        let frame = pipeline.tick(wall_seconds());
        report.record(&frame);
        sink(&frame);
        if finishing {
            break;
        }
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
            deadline += period;
        } else {
            // Overran the budget: skip missed ticks rather than bursting.
            deadline = now + period;
        }
    }
    handle.stop();
    let _ = acceptor.join();
    report.finish(started.elapsed().as_secs_f64(), pipeline.tracks().next_id());
    Ok(report)
}
