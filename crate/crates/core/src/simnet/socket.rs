//! Loopback TCP transport using TLFR frames, one connection and one worker thread
//! per node.

use std::collections::{BTreeMap, VecDeque};
use std::io::ErrorKind;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::thread::JoinHandle;

use super::message::{Message, ORCHESTRATOR_ID};
use super::transport::{serve, transport_error, Transport};
use crate::error::{Error, Result};
use crate::node::NodeState;

pub struct SocketTransport {
    streams: BTreeMap<u32, TcpStream>,
    /// Nodes owing a reply, in send order.
    outstanding: VecDeque<u32>,
    workers: Vec<JoinHandle<()>>,
}

impl SocketTransport {
    /// Starts one listener and worker thread per node on 127.0.0.1.
    pub fn spawn_loopback(nodes: Vec<NodeState>) -> Result<Self> {
        let mut streams = BTreeMap::new();
        let mut workers = Vec::new();
        for mut state in nodes {
            let id = state.node_id;
            if id == ORCHESTRATOR_ID || streams.contains_key(&id) {
                return Err(Error::Config(format!("duplicate or reserved node id {id}")));
            }
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            workers.push(std::thread::spawn(move || {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                // Any failure closes the connection; the orchestrator sees EOF.
                while let Ok(msg) = Message::read_from(&mut stream) {
                    match serve(&mut state, &msg) {
                        Ok(reply) => {
                            if reply.write_to(&mut stream).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            log::error!("node {id}: {e}");
                            break;
                        }
                    }
                }
            }));
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            streams.insert(id, stream);
        }
        Ok(Self {
            streams,
            outstanding: VecDeque::new(),
            workers,
        })
    }
}

impl Transport for SocketTransport {
    fn node_ids(&self) -> Vec<u32> {
        self.streams.keys().copied().collect()
    }

    fn send(&mut self, msg: Message) -> Result<()> {
        let dest = msg.destination;
        let stream = self
            .streams
            .get_mut(&dest)
            .ok_or_else(|| transport_error(dest, "no such node"))?;
        msg.write_to(stream).map_err(|e| transport_error(dest, e))?;
        self.outstanding.push_back(dest);
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        let node = self.outstanding.pop_front().ok_or_else(|| Error::Transport {
            node: ORCHESTRATOR_ID,
            batch: None,
            message: "recv with no message in flight".into(),
        })?;
        let stream = self.streams.get_mut(&node).expect("outstanding node has a stream");
        Message::read_from(stream).map_err(|e| match e {
            Error::Io(io) if io.kind() == ErrorKind::UnexpectedEof => {
                transport_error(node, "connection closed by node")
            }
            other => transport_error(node, other),
        })
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for s in self.streams.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
