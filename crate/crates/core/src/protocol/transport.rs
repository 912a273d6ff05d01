use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use super::message::Message;
use super::wire::{FrameHeader, WireMessage, HEADER_LEN};
use super::{ProtocolError, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

pub trait FrameSender: Send {
    /// Writes raw bytes; well-formed callers pass one encoded frame.
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()>;

    fn send_frame(&mut self, frame: &WireMessage) -> Result<()> {
        self.send_bytes(&frame.encode())
    }
}

pub trait FrameReceiver: Send {
    fn recv_frame(&mut self) -> Result<WireMessage>;
}

/// One duplex link, either end.
pub struct Connection {
    pub tx: Box<dyn FrameSender>,
    pub rx: Box<dyn FrameReceiver>,
}

impl Connection {
    /// Returns the frame length put on the wire.
    pub fn send(&mut self, msg: &Message) -> Result<u64> {
        let w = msg.to_wire()?;
        self.tx.send_frame(&w)?;
        Ok(w.encoded_len() as u64)
    }

    pub fn recv(&mut self) -> Result<(Message, u64)> {
        let w = self.rx.recv_frame()?;
        Ok((Message::from_wire(&w)?, w.encoded_len() as u64))
    }
}

struct MemorySender(Sender<Vec<u8>>);

struct MemoryReceiver {
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl FrameSender for MemorySender {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.0.send(bytes.to_vec()).map_err(|_| ProtocolError::Disconnected)
    }
}

impl FrameReceiver for MemoryReceiver {
    fn recv_frame(&mut self) -> Result<WireMessage> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(bytes) => Ok(WireMessage::decode(&bytes)?),
            Err(RecvTimeoutError::Timeout) => Err(ProtocolError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Disconnected),
        }
    }
}

/// In-process link. Each send carries exactly one frame through the same
/// encoder and decoder as the socket transport.
pub fn memory_pair(timeout: Duration) -> (Connection, Connection) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    let end = |tx, rx| Connection {
        tx: Box::new(MemorySender(tx)),
        rx: Box::new(MemoryReceiver { rx, timeout }),
    };
    (end(a_tx, a_rx), end(b_tx, b_rx))
}

struct TcpSender(TcpStream);

struct TcpReceiver(TcpStream);

fn map_io(e: io::Error) -> ProtocolError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ProtocolError::Timeout,
        io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe => {
            ProtocolError::Disconnected
        }
        _ => ProtocolError::Io(e),
    }
}

impl FrameSender for TcpSender {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.0.write_all(bytes).and_then(|_| self.0.flush()).map_err(map_io)
    }
}

impl FrameReceiver for TcpReceiver {
    fn recv_frame(&mut self) -> Result<WireMessage> {
        let mut head = [0u8; HEADER_LEN];
        self.0.read_exact(&mut head).map_err(map_io)?;
        let h = FrameHeader::decode(&head)?;
        // grows with what actually arrives instead of trusting the length
        let mut payload = Vec::new();
        (&mut self.0)
            .take(h.payload_len)
            .read_to_end(&mut payload)
            .map_err(map_io)?;
        if (payload.len() as u64) < h.payload_len {
            return Err(ProtocolError::Disconnected);
        }
        Ok(WireMessage::new(h.kind, h.round, payload))
    }
}

/// Wraps a connected stream; `timeout` bounds every read and write.
pub fn tcp_connection(stream: TcpStream, timeout: Duration) -> Result<Connection> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let reader = stream.try_clone()?;
    Ok(Connection {
        tx: Box::new(TcpSender(stream)),
        rx: Box::new(TcpReceiver(reader)),
    })
}

/// Connects, retrying refused attempts until `timeout` elapses.
pub fn tcp_connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Connection> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(&addr) {
            Ok(s) => return tcp_connection(s, timeout),
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused && start.elapsed() < timeout => {
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(map_io(e)),
        }
    }
}

/// Accepts exactly `n` connections.
pub fn tcp_accept(listener: &TcpListener, n: usize, timeout: Duration) -> Result<Vec<Connection>> {
    (0..n)
        .map(|_| {
            let (s, _) = listener.accept()?;
            tcp_connection(s, timeout)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::wire::WireError;
    use super::*;

    #[test]
    fn memory_round_trip_and_errors() {
        let (mut a, mut b) = memory_pair(Duration::from_millis(50));
        let n = a.send(&Message::RoundDone { round: 4 }).unwrap();
        assert_eq!(n, 18);
        assert_eq!(b.recv().unwrap(), (Message::RoundDone { round: 4 }, 18));
        assert!(matches!(b.recv(), Err(ProtocolError::Timeout)));
        a.tx.send_bytes(b"garbage").unwrap();
        assert!(matches!(b.recv(), Err(ProtocolError::Wire(_))));
        drop(a);
        assert!(matches!(b.recv(), Err(ProtocolError::Disconnected)));
    }

    #[test]
    fn tcp_round_trip_and_garbage() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let mut c = tcp_connect(addr, Duration::from_secs(5)).unwrap();
            c.send(&Message::Hello {
                node: 2,
                config_hash: [1; 32],
            })
            .unwrap();
            c.tx.send_bytes(b"NOPE\x01\x07\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        });
        let mut conns = tcp_accept(&listener, 1, Duration::from_secs(5)).unwrap();
        let (m, n) = conns[0].recv().unwrap();
        assert_eq!(n, 18 + 36);
        assert!(matches!(m, Message::Hello { node: 2, .. }));
        assert!(matches!(conns[0].recv(), Err(ProtocolError::Wire(WireError::BadMagic(_)))));
        t.join().unwrap();
        assert!(matches!(conns[0].recv(), Err(ProtocolError::Disconnected)));
    }
}
