//! Line transports between the coordinator and its clients.
//!
//! Both transports carry the same serialized envelope lines: an in-process
//! channel of strings, or one TCP loopback connection per client. Every
//! inbox is an mpsc receiver; for TCP a reader thread per socket forwards
//! lines into it.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::MessageEnvelope;
use super::{FedError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inproc" => Ok(Self::Inproc),
            "tcp" => Ok(Self::Tcp),
            other => Err(format!("unknown transport {other:?} (expected inproc or tcp)")),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Inproc => "inproc",
            Self::Tcp => "tcp",
        })
    }
}

enum LineSink {
    Channel(Sender<String>),
    Socket(TcpStream),
}

impl LineSink {
    fn send_line(&mut self, line: String) -> std::io::Result<()> {
        match self {
            LineSink::Channel(tx) => {
                tx.send(line).map_err(|_| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "peer hung up"))
            }
            LineSink::Socket(stream) => {
                stream.write_all(line.as_bytes())?;
                stream.write_all(b"\n")?;
                stream.flush()
            }
        }
    }
}

impl Drop for LineSink {
    fn drop(&mut self) {
        if let LineSink::Socket(stream) = self {
            // wakes the reader threads on both ends
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}

fn forward_lines(stream: TcpStream, tx: Sender<String>) {
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
}

/// Coordinator side: one shared inbox, one outbox per client.
pub struct CoordinatorEndpoint {
    inbox: Receiver<String>,
    outboxes: BTreeMap<u32, LineSink>,
}

impl CoordinatorEndpoint {
    pub fn send(&mut self, client: u32, env: &MessageEnvelope) -> Result<()> {
        let sink =
            self.outboxes.get_mut(&client).ok_or_else(|| FedError::Transport(format!("no link to client {client}")))?;
        sink.send_line(env.to_line()).map_err(|e| FedError::Transport(format!("send to client {client}: {e}")))
    }

    /// Next envelope, or `None` if nothing arrived within `timeout`.
    /// Errors once every client has hung up.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<MessageEnvelope>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(line) => MessageEnvelope::from_line(&line).map(Some),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(FedError::Transport("every client link is closed".into())),
        }
    }
}

/// Client side of one link.
pub struct ClientEndpoint {
    pub client_id: u32,
    inbox: Receiver<String>,
    outbox: LineSink,
}

impl ClientEndpoint {
    pub fn send(&mut self, env: &MessageEnvelope) -> Result<()> {
        self.outbox.send_line(env.to_line()).map_err(|e| FedError::Transport(format!("client {}: {e}", self.client_id)))
    }

    /// Blocks for the next envelope; `None` once the coordinator is gone.
    pub fn recv(&self) -> Option<Result<MessageEnvelope>> {
        self.inbox.recv().ok().map(|line| MessageEnvelope::from_line(&line))
    }
}

/// Wires a coordinator to `clients`. For TCP, `port` 0 picks a free port.
pub fn connect(kind: TransportKind, clients: &[u32], port: u16) -> Result<(CoordinatorEndpoint, Vec<ClientEndpoint>)> {
    let (coord_tx, inbox) = mpsc::channel();
    let mut outboxes = BTreeMap::new();
    let mut ends = Vec::with_capacity(clients.len());
    match kind {
        TransportKind::Inproc => {
            for &id in clients {
                let (tx, rx) = mpsc::channel();
                outboxes.insert(id, LineSink::Channel(tx));
                ends.push(ClientEndpoint { client_id: id, inbox: rx, outbox: LineSink::Channel(coord_tx.clone()) });
            }
        }
        TransportKind::Tcp => {
            let transport_err = |e: std::io::Error| FedError::Transport(e.to_string());
            let listener = TcpListener::bind(("127.0.0.1", port)).map_err(transport_err)?;
            let addr = listener.local_addr().map_err(transport_err)?;
            for &id in clients {
                let client_side = TcpStream::connect(addr).map_err(transport_err)?;
                let (server_side, peer) = listener.accept().map_err(transport_err)?;
                if peer != client_side.local_addr().map_err(transport_err)? {
                    return Err(FedError::Transport(format!("unexpected connection from {peer}")));
                }
                for s in [&client_side, &server_side] {
                    s.set_nodelay(true).map_err(transport_err)?;
                }
                forward_lines(server_side.try_clone().map_err(transport_err)?, coord_tx.clone());
                let (tx, rx) = mpsc::channel();
                forward_lines(client_side.try_clone().map_err(transport_err)?, tx);
                outboxes.insert(id, LineSink::Socket(server_side));
                ends.push(ClientEndpoint { client_id: id, inbox: rx, outbox: LineSink::Socket(client_side) });
            }
        }
    }
    Ok((CoordinatorEndpoint { inbox, outboxes }, ends))
}
