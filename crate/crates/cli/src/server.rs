//! Clean-room serving loop.
//!
//! One session per connection: `Hello` in, `HelloAck` out, then strictly
//! sequential batch round trips until `EndSession`. A batch the session
//! rejects (unknown id, shape mismatch) gets an `Error` frame and is
//! dropped; the session itself stays up. A message the protocol state
//! cannot accept tears the connection down.

use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context, Result};
use splitcvr_core::cleanroom::CleanRoom;
use splitcvr_core::wire::{error_code, WireMessage};
use splitcvr_core::Error as CoreError;

use crate::transport::{message_name, Loopback, TcpTransport, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionStats {
    pub accepted: bool,
    pub batches: u64,
}

fn batch_error_code(e: &CoreError) -> u32 {
    match e {
        CoreError::UnknownSampleId(_) => error_code::UNKNOWN_SAMPLE,
        CoreError::DimensionMismatch { .. }
        | CoreError::LengthMismatch { .. }
        | CoreError::CodecMismatch { .. }
        | CoreError::NonFinite(_)
        | CoreError::MalformedPayload(_)
        | CoreError::Truncated { .. } => error_code::BAD_BATCH,
        _ => error_code::INTERNAL,
    }
}

/// Serve exactly one session over an established transport.
pub fn serve_connection<T: Transport>(t: &mut T, room: &CleanRoom) -> Result<SessionStats> {
    let (first, _) = t.recv().context("waiting for Hello")?;
    let cfg = match first {
        WireMessage::Hello(cfg) => cfg,
        other => {
            let name = message_name(&other);
            t.send(&WireMessage::Error {
                code: error_code::UNEXPECTED_MESSAGE,
                text: format!("expected Hello, got {name}"),
            })?;
            bail!("peer opened with {name} instead of Hello");
        }
    };
    let mut session = match room.open_session(cfg) {
        Ok(s) => {
            t.send(&WireMessage::HelloAck {
                accept: true,
                reason: String::new(),
            })?;
            s
        }
        Err(reason) => {
            log::warn!("session rejected: {reason}");
            t.send(&WireMessage::HelloAck {
                accept: false,
                reason,
            })?;
            return Ok(SessionStats {
                accepted: false,
                batches: 0,
            });
        }
    };
    log::info!("session accepted: b={} params={}", session.config().batch_size, session.config().param_count);
    loop {
        let (msg, _) = t.recv().context("waiting for batch")?;
        match msg {
            WireMessage::ForwardBatch(fb) => match session.process_batch(&fb) {
                Ok(agg) => {
                    t.send(&WireMessage::AggGrad(agg))?;
                }
                Err(e) => {
                    log::warn!("batch {} aborted: {e}", fb.batch_id);
                    t.send(&WireMessage::Error {
                        code: batch_error_code(&e),
                        text: e.to_string(),
                    })?;
                }
            },
            WireMessage::EndSession => break,
            other => {
                let name = message_name(&other);
                t.send(&WireMessage::Error {
                    code: error_code::UNEXPECTED_MESSAGE,
                    text: format!("unexpected {name} mid-session"),
                })?;
                bail!("protocol violation: {name} mid-session");
            }
        }
    }
    let stats = SessionStats {
        accepted: true,
        batches: session.batches_processed(),
    };
    log::info!("session closed after {} batches", stats.batches);
    Ok(stats)
}

/// Host the clean room on one end of an in-process channel; the returned
/// end is the client's. The room serves a single session.
pub fn spawn_inprocess(room: CleanRoom) -> (Loopback, thread::JoinHandle<Result<SessionStats>>) {
    let (client_end, mut server_end) = crate::transport::loopback_pair();
    let handle = thread::spawn(move || serve_connection(&mut server_end, &room));
    (client_end, handle)
}

/// Accept loop: one thread per connection, independent sessions. With
/// `max_sessions` = 0 the loop runs until the process dies; otherwise it
/// stops accepting after that many connections and waits for them to end.
pub fn serve(listener: TcpListener, room: CleanRoom, max_sessions: u64) -> Result<()> {
    let room = Arc::new(room);
    let mut handles = Vec::new();
    let mut served = 0u64;
    for stream in listener.incoming() {
        let stream = stream.context("accept connection")?;
        let room = Arc::clone(&room);
        handles.push(thread::spawn(move || {
            if let Err(e) = serve_one(stream, &room) {
                log::warn!("connection ended with error: {e:#}");
            }
        }));
        served += 1;
        if max_sessions != 0 && served >= max_sessions {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

fn serve_one(stream: TcpStream, room: &CleanRoom) -> Result<()> {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    log::debug!("connection from {peer}");
    let mut t = TcpTransport::new(stream)?;
    serve_connection(&mut t, room)?;
    Ok(())
}
