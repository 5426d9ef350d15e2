//! Byte transports for protocol sessions.
//!
//! A transport moves whole frames and nothing else. Both implementations
//! run every message through `encode_message`/`decode_message`, so the
//! numeric stream a session sees is identical whether it crosses a TCP
//! socket or an in-process channel; transport-equivalence tests rely on
//! that.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};

use anyhow::{anyhow, Context, Result};
use splitcvr_core::wire::{self, WireMessage, HEADER_LEN};

pub trait Transport {
    /// Encode and send one message; returns the frame size in bytes.
    fn send(&mut self, m: &WireMessage) -> Result<usize>;
    /// Receive and decode one message, with its frame size.
    fn recv(&mut self) -> Result<(WireMessage, usize)>;
}

pub fn message_name(m: &WireMessage) -> &'static str {
    match m {
        WireMessage::Hello(_) => "Hello",
        WireMessage::HelloAck { .. } => "HelloAck",
        WireMessage::ForwardBatch(_) => "ForwardBatch",
        WireMessage::AggGrad(_) => "AggGrad",
        WireMessage::EndSession => "EndSession",
        WireMessage::Error { .. } => "Error",
    }
}

pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self> {
        // One small frame per round trip; Nagle only adds latency here.
        stream.set_nodelay(true).ok();
        let reader = BufReader::new(stream.try_clone().context("clone tcp stream")?);
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
        })
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).with_context(|| format!("connect to {addr}"))?;
        Self::new(stream)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, m: &WireMessage) -> Result<usize> {
        let frame = wire::encode_message(m);
        self.writer.write_all(&frame).context("send frame")?;
        self.writer.flush().context("flush frame")?;
        Ok(frame.len())
    }

    fn recv(&mut self) -> Result<(WireMessage, usize)> {
        let mut frame = vec![0u8; HEADER_LEN];
        self.reader
            .read_exact(&mut frame)
            .context("read frame header")?;
        let (_, len) = wire::parse_header(&frame)?;
        frame.resize(HEADER_LEN + len, 0);
        self.reader
            .read_exact(&mut frame[HEADER_LEN..])
            .context("read frame payload")?;
        Ok((wire::decode_message(&frame)?, frame.len()))
    }
}

/// One end of an in-process frame channel.
pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected loopback ends; what one sends the other receives.
pub fn loopback_pair() -> (Loopback, Loopback) {
    let (tx_ab, rx_ab) = channel();
    let (tx_ba, rx_ba) = channel();
    (
        Loopback { tx: tx_ab, rx: rx_ba },
        Loopback { tx: tx_ba, rx: rx_ab },
    )
}

impl Transport for Loopback {
    fn send(&mut self, m: &WireMessage) -> Result<usize> {
        let frame = wire::encode_message(m);
        let n = frame.len();
        self.tx
            .send(frame)
            .map_err(|_| anyhow!("loopback peer hung up"))?;
        Ok(n)
    }

    fn recv(&mut self) -> Result<(WireMessage, usize)> {
        let frame = self
            .rx
            .recv()
            .map_err(|_| anyhow!("loopback peer hung up"))?;
        Ok((wire::decode_message(&frame)?, frame.len()))
    }
}
