//! Blocking raw-TCP client for headless tools and tests.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use crate::codec::{self, DecodeError, Message, Payload};

pub struct RawClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_seq: u64,
    line: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("connection closed")]
    Closed,
}

impl RawClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self { reader: BufReader::new(stream), writer, next_seq: 0, line: Vec::new() })
    }

    /// Sends `payload` with the next seq and returns that seq.
    pub fn send(&mut self, stamp: f64, payload: Payload) -> io::Result<u64> {
        self.next_seq += 1;
        let seq = self.next_seq;
        self.send_message(&Message::new(seq, stamp, payload))?;
        Ok(seq)
    }

    /// Sends a message verbatim; the caller owns its seq.
    pub fn send_message(&mut self, m: &Message) -> io::Result<()> {
        self.send_raw(&codec::encode(m))
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.writer.write_all(bytes)
    }

    /// Next inbound message, or `None` after `timeout`.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<Message>, ClientError> {
        self.reader.get_ref().set_read_timeout(Some(timeout.max(Duration::from_micros(1))))?;
        match self.reader.read_until(b'\n', &mut self.line) {
            Ok(0) => Err(ClientError::Closed),
            Ok(_) if self.line.last() == Some(&b'\n') => {
                let m = codec::decode(&self.line);
                self.line.clear();
                Ok(Some(m?))
            }
            Ok(_) => Err(ClientError::Closed),
            // Partial lines stay buffered in `line` for the next call.
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Reads until `pred` matches, returning the match and everything skipped.
    pub fn recv_until(
        &mut self,
        timeout: Duration,
        mut pred: impl FnMut(&Message) -> bool,
    ) -> Result<(Option<Message>, Vec<Message>), ClientError> {
        let end = Instant::now() + timeout;
        let mut skipped = Vec::new();
        loop {
            let now = Instant::now();
            if now >= end {
                return Ok((None, skipped));
            }
            if let Some(m) = self.recv(end - now)? {
                if pred(&m) {
                    return Ok((Some(m), skipped));
                }
                skipped.push(m);
            }
        }
    }

    /// Everything that arrives within `window`.
    pub fn collect_for(&mut self, window: Duration) -> Result<Vec<Message>, ClientError> {
        Ok(self.recv_until(window, |_| false)?.1)
    }

    pub fn close(self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}
