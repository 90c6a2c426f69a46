//! Text framing for batches of records.
//!
//! A frame is a nonempty list of records joined by `;`, each record being
//! `timestamp|status|value`, terminated by a single `\n`:
//!
//! ```text
//! 2024-01-02 03:04:05.000000|ok|1.5;2024-01-02 03:04:05.000000|ok|-0.25\n
//! ```
//!
//! Values are written as the shortest decimal text that parses back to the
//! identical `f64`. There is no length prefix; the receiver splits on `\n`,
//! so partial and coalesced reads are handled by [`FrameReader`].

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::time::Duration;

use thiserror::Error;

use crate::record::{Record, StatusCode, RESERVED_CHARS};
use crate::time::Timestamp;

/// Largest accepted frame, terminator included.
pub const MAX_FRAME_LEN: usize = 64 * 1024;

const FIELD_SEP: char = '|';
const RECORD_SEP: char = ';';
const TERMINATOR: u8 = b'\n';

/// A record as carried on the wire.
pub type WireRecord = Record<f64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("frame is not terminated by a single trailing newline")]
    Termination,
    #[error("frame holds no records")]
    Empty,
    #[error("expected 3 fields, found {0}")]
    FieldCount(usize),
    #[error("bad timestamp: {0}")]
    Timestamp(String),
    #[error("bad status: {0}")]
    Status(String),
    #[error("bad value {0:?}")]
    Value(String),
}

/// Decode failure, naming the 1-based record it occurred in (0 when the
/// frame as a whole is malformed).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at record {record}: {kind}")]
pub struct ParseError {
    pub record: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("peer disconnected")]
    Disconnected,
    #[error("frame exceeds {MAX_FRAME_LEN} bytes")]
    Oversize,
    #[error("frame is not valid UTF-8")]
    NotUtf8,
    #[error("cannot pack an empty record list")]
    EmptyFrame,
    #[error("record {record}: field contains a delimiter")]
    Delimiter { record: usize },
    #[error("record {record}: value {value} is not finite")]
    NonFinite { record: usize, value: f64 },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ProtocolError {
    /// True for the peer-went-away family, as opposed to garbage on the wire.
    pub fn is_disconnect(&self) -> bool {
        match self {
            ProtocolError::Disconnected => true,
            ProtocolError::Io(e) => matches!(
                e.kind(),
                io::ErrorKind::BrokenPipe
                    | io::ErrorKind::ConnectionReset
                    | io::ErrorKind::ConnectionAborted
                    | io::ErrorKind::NotConnected
                    | io::ErrorKind::UnexpectedEof
            ),
            _ => false,
        }
    }
}

/// Shortest round-tripping decimal text for a finite float.
pub fn render_value(value: f64) -> String {
    // Debug formatting is shortest-round-trip and switches to exponent
    // notation for very large/small magnitudes.
    format!("{value:?}")
}

pub fn parse_value(text: &str) -> Option<f64> {
    // Rust also accepts "inf"/"nan" spellings; those are not valid values.
    let v: f64 = text.parse().ok()?;
    v.is_finite().then_some(v)
}

/// A decoded batch of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub records: Vec<WireRecord>,
}

impl Frame {
    pub fn new(records: Vec<WireRecord>) -> Self {
        Frame { records }
    }

    pub fn encode(&self) -> Result<String, ProtocolError> {
        pack_multi(&self.records)
    }

    pub fn decode(text: &str) -> Result<Self, ParseError> {
        unpack_multi(text).map(Frame::new)
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }
}

/// Pack records into one newline-terminated frame.
pub fn pack_multi(records: &[WireRecord]) -> Result<String, ProtocolError> {
    if records.is_empty() {
        return Err(ProtocolError::EmptyFrame);
    }
    let mut out = String::with_capacity(records.len() * 48);
    for (i, r) in records.iter().enumerate() {
        if !r.value.is_finite() {
            return Err(ProtocolError::NonFinite { record: i + 1, value: r.value });
        }
        // StatusCode is validated on construction; this guards hand-built
        // deserialized values too.
        if r.status.as_str().contains(RESERVED_CHARS) {
            return Err(ProtocolError::Delimiter { record: i + 1 });
        }
        if i > 0 {
            out.push(RECORD_SEP);
        }
        out.push_str(&r.ts.to_string());
        out.push(FIELD_SEP);
        out.push_str(r.status.as_str());
        out.push(FIELD_SEP);
        out.push_str(&render_value(r.value));
    }
    out.push(TERMINATOR as char);
    if out.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize);
    }
    Ok(out)
}

/// Inverse of [`pack_multi`].
pub fn unpack_multi(text: &str) -> Result<Vec<WireRecord>, ParseError> {
    let body = text
        .strip_suffix(TERMINATOR as char)
        .filter(|b| !b.contains(['\n', '\r']))
        .ok_or(ParseError { record: 0, kind: ParseErrorKind::Termination })?;
    if body.is_empty() {
        return Err(ParseError { record: 0, kind: ParseErrorKind::Empty });
    }
    body.split(RECORD_SEP)
        .enumerate()
        .map(|(i, rec)| decode_record(rec).map_err(|kind| ParseError { record: i + 1, kind }))
        .collect()
}

/// Decode one `timestamp|status|value` record (no terminator).
pub fn decode_record(text: &str) -> Result<WireRecord, ParseErrorKind> {
    let fields: Vec<&str> = text.split(FIELD_SEP).collect();
    let [ts, status, value] = fields[..] else {
        return Err(ParseErrorKind::FieldCount(fields.len()));
    };
    let ts = Timestamp::parse(ts).map_err(|e| ParseErrorKind::Timestamp(e.to_string()))?;
    let status = StatusCode::new(status).map_err(|e| ParseErrorKind::Status(e.to_string()))?;
    let value = parse_value(value).ok_or_else(|| ParseErrorKind::Value(value.to_owned()))?;
    Ok(Record { ts, status, value })
}

/// Encode one record without terminator. Used by the store journal.
pub fn encode_record(record: &WireRecord) -> String {
    format!("{}{FIELD_SEP}{}{FIELD_SEP}{}", record.ts, record.status, render_value(record.value))
}

/// Reassembles newline-terminated frames from an arbitrary byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
    // Bytes of `buf` already known to hold no terminator.
    scanned: usize,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, buf: Vec::with_capacity(4096), scanned: 0 }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    /// Next raw frame text, terminator included.
    pub fn recv_text(&mut self) -> Result<String, ProtocolError> {
        loop {
            if let Some(pos) = self.buf[self.scanned..].iter().position(|&b| b == TERMINATOR) {
                let end = self.scanned + pos + 1;
                if end > MAX_FRAME_LEN {
                    return Err(ProtocolError::Oversize);
                }
                let line: Vec<u8> = self.buf.drain(..end).collect();
                self.scanned = 0;
                return String::from_utf8(line).map_err(|_| ProtocolError::NotUtf8);
            }
            self.scanned = self.buf.len();
            if self.buf.len() >= MAX_FRAME_LEN {
                return Err(ProtocolError::Oversize);
            }
            let mut chunk = [0u8; 4096];
            let n = match self.inner.read(&mut chunk) {
                Ok(0) => return Err(ProtocolError::Disconnected),
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    pub fn recv_frame(&mut self) -> Result<Frame, ProtocolError> {
        let text = self.recv_text()?;
        Ok(Frame::decode(&text)?)
    }
}

pub fn send_frame<W: Write>(writer: &mut W, frame: &Frame) -> Result<(), ProtocolError> {
    let text = frame.encode()?;
    writer.write_all(text.as_bytes())?;
    writer.flush()?;
    Ok(())
}

/// A TCP connection speaking the frame protocol in both directions.
pub struct Connection {
    reader: FrameReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Connection { reader: FrameReader::new(stream), writer })
    }

    pub fn connect(addr: SocketAddr, timeout: Duration) -> io::Result<Self> {
        Connection::new(TcpStream::connect_timeout(&addr, timeout)?)
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), ProtocolError> {
        send_frame(&mut self.writer, frame)
    }

    pub fn recv(&mut self) -> Result<Frame, ProtocolError> {
        self.reader.recv_frame()
    }

    pub fn recv_text(&mut self) -> Result<String, ProtocolError> {
        self.reader.recv_text()
    }

    /// Request/reply round trip.
    pub fn exchange(&mut self, frame: &Frame) -> Result<Frame, ProtocolError> {
        self.send(frame)?;
        self.recv()
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.writer.set_read_timeout(timeout)
    }

    pub fn peer_addr(&self) -> io::Result<SocketAddr> {
        self.writer.peer_addr()
    }

    /// A handle that can sever this connection from another thread.
    pub fn killer(&self) -> io::Result<TcpStream> {
        self.writer.try_clone()
    }

    pub fn shutdown(&self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ts() -> Timestamp {
        Timestamp::parse("2024-01-02 03:04:05.000000").unwrap()
    }

    /// Yields the underlying bytes in fixed-size chunks.
    struct Chunked {
        data: Vec<u8>,
        pos: usize,
        chunk: usize,
    }

    impl Read for Chunked {
        fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
            let n = self.chunk.min(out.len()).min(self.data.len() - self.pos);
            out[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
            self.pos += n;
            Ok(n)
        }
    }

    #[test]
    fn pack_single_record() {
        let text = pack_multi(&[Record::ok(ts(), 1.5)]).unwrap();
        assert_eq!(text, "2024-01-02 03:04:05.000000|ok|1.5\n");
    }

    #[test]
    fn pack_two_records() {
        let text = pack_multi(&[Record::ok(ts(), 1.5), Record::ok(ts(), 2.0)]).unwrap();
        assert_eq!(text.matches(';').count(), 1);
        assert_eq!(text.matches('\n').count(), 1);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn pack_rejects_bad_input() {
        assert!(matches!(pack_multi(&[]), Err(ProtocolError::EmptyFrame)));
        assert!(matches!(
            pack_multi(&[Record::ok(ts(), f64::NAN)]),
            Err(ProtocolError::NonFinite { record: 1, .. })
        ));
        // A status with a delimiter cannot be constructed at all.
        assert!(StatusCode::new("b|ad").is_err());
        assert!(serde_json::from_str::<StatusCode>("\"b|ad\"").is_err());
    }

    #[test]
    fn unpack_errors_name_the_record() {
        let err = unpack_multi("a|b\n").unwrap_err();
        assert_eq!(err.record, 1);
        assert_eq!(err.kind, ParseErrorKind::FieldCount(2));

        let err = unpack_multi("2024-01-02 03:04:05.000000|ok|1.5x\n").unwrap_err();
        assert_eq!(err.record, 1);
        assert!(matches!(err.kind, ParseErrorKind::Value(_)));

        let err = unpack_multi("2024-01-02 03:04:05.000000|ok|1;2024-01-02 03:04:05.000000|ok|nan\n").unwrap_err();
        assert_eq!(err.record, 2);

        assert_eq!(unpack_multi("\n").unwrap_err().kind, ParseErrorKind::Empty);
        assert_eq!(unpack_multi("2024-01-02 03:04:05.000000|ok|1").unwrap_err().kind, ParseErrorKind::Termination);
        assert_eq!(
            unpack_multi("2024-01-02 03:04:05.000000|ok|1\n\n").unwrap_err().kind,
            ParseErrorKind::Termination
        );
    }

    #[test]
    fn extreme_values_render_compactly() {
        assert_eq!(render_value(1e-300), "1e-300");
        assert_eq!(render_value(-0.0), "-0.0");
        assert_eq!(render_value(f64::MAX), "1.7976931348623157e308");
        for v in [1e-300, -0.0, f64::MAX, f64::MIN_POSITIVE, 5e-324, 0.1 + 0.2] {
            assert_eq!(parse_value(&render_value(v)).unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(parse_value("inf"), None);
        assert_eq!(parse_value("NaN"), None);
    }

    #[test]
    fn byte_at_a_time_reassembly() {
        let frame = Frame::new(vec![Record::ok(ts(), 1.5), Record::ok(ts(), -2.0)]);
        let text = frame.encode().unwrap();
        let mut reader = FrameReader::new(Chunked { data: text.into_bytes(), pos: 0, chunk: 1 });
        assert_eq!(reader.recv_frame().unwrap(), frame);
        assert!(matches!(reader.recv_frame(), Err(ProtocolError::Disconnected)));
    }

    #[test]
    fn coalesced_frames_split_in_order() {
        let a = Frame::new(vec![Record::ok(ts(), 1.0)]);
        let b = Frame::new(vec![Record::ok(ts(), 2.0)]);
        let bytes = format!("{}{}", a.encode().unwrap(), b.encode().unwrap());
        let mut reader = FrameReader::new(Cursor::new(bytes.into_bytes()));
        assert_eq!(reader.recv_frame().unwrap(), a);
        assert_eq!(reader.recv_frame().unwrap(), b);
    }

    #[test]
    fn close_mid_frame_is_disconnect() {
        let mut reader = FrameReader::new(Cursor::new(b"2024-01-02 03:04".to_vec()));
        let err = reader.recv_frame().unwrap_err();
        assert!(err.is_disconnect());
    }

    #[test]
    fn oversize_frame_rejected() {
        let mut reader = FrameReader::new(Cursor::new(vec![b'x'; MAX_FRAME_LEN + 10]));
        assert!(matches!(reader.recv_text(), Err(ProtocolError::Oversize)));

        let mut exact = vec![b'x'; MAX_FRAME_LEN - 1];
        exact.push(b'\n');
        let mut reader = FrameReader::new(Cursor::new(exact));
        assert_eq!(reader.recv_text().unwrap().len(), MAX_FRAME_LEN);
    }

    #[test]
    fn parse_error_is_not_disconnect() {
        let mut reader = FrameReader::new(Cursor::new(b"garbage\n".to_vec()));
        let err = reader.recv_frame().unwrap_err();
        assert!(matches!(err, ProtocolError::Parse(_)));
        assert!(!err.is_disconnect());
    }
}
