//! Real datagram sockets, one per link.
//!
//! Each link gets its own socket bound to that interface's local address, so
//! the source address (and therefore the route) is fixed per link.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

use crate::config::Link;
use crate::wire::Packet;

struct LinkSocket {
    link: Link,
    socket: UdpSocket,
    peer: SocketAddr,
}

pub struct UdpTransport {
    sockets: Vec<LinkSocket>,
    buf: Vec<u8>,
}

impl UdpTransport {
    /// Binds one socket per `(link, local, peer)` entry.
    pub fn bind(routes: &[(Link, SocketAddr, SocketAddr)]) -> io::Result<Self> {
        let mut sockets = Vec::with_capacity(routes.len());
        for &(link, local, peer) in routes {
            let socket = UdpSocket::bind(local)?;
            socket.set_nonblocking(true)?;
            sockets.push(LinkSocket { link, socket, peer });
        }
        Ok(UdpTransport {
            sockets,
            buf: vec![0; 65_536],
        })
    }

    pub fn local_addr(&self, link: Link) -> Option<SocketAddr> {
        self.sockets
            .iter()
            .find(|s| s.link == link)
            .and_then(|s| s.socket.local_addr().ok())
    }

    pub fn send(&self, link: Link, packet: &Packet) -> io::Result<()> {
        let raw = packet
            .encode()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let s = self
            .sockets
            .iter()
            .find(|s| s.link == link)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no socket for link {link}")))?;
        s.socket.send_to(&raw, s.peer)?;
        Ok(())
    }

    /// Waits up to `timeout` for a datagram on any link.
    pub fn recv(&mut self, timeout: Duration) -> io::Result<Option<(Link, Vec<u8>)>> {
        let deadline = Instant::now() + timeout;
        loop {
            for s in &self.sockets {
                match s.socket.recv_from(&mut self.buf) {
                    Ok((n, _)) => return Ok(Some((s.link, self.buf[..n].to_vec()))),
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                    Err(e) => return Err(e),
                }
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_topic_table;
    use crate::transport::{Receiver, Sender};
    use std::sync::Arc;

    #[test]
    fn loopback_redundant_delivery() {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let mut rx_side = UdpTransport::bind(&[(Link::Link5GHz, any, any), (Link::Link2GHz4, any, any)]).unwrap();
        let peer5 = rx_side.local_addr(Link::Link5GHz).unwrap();
        let peer2 = rx_side.local_addr(Link::Link2GHz4).unwrap();
        let tx_side = UdpTransport::bind(&[(Link::Link5GHz, any, peer5), (Link::Link2GHz4, any, peer2)]).unwrap();

        let table = Arc::new(
            parse_topic_table("topic 1 cmd dir=up mbits=4.9 group=arm links=5g,2g4 mode=latest rate=1000").unwrap(),
        );
        let mut tx = Sender::new(Arc::clone(&table));
        let mut rx = Receiver::new(table);
        for (link, p) in tx.send(1, b"pose".to_vec(), 0).unwrap() {
            tx_side.send(link, &p).unwrap();
        }
        let mut delivered = Vec::new();
        let mut links = Vec::new();
        while let Some((link, raw)) = rx_side.recv(Duration::from_millis(500)).unwrap() {
            links.push(link);
            delivered.extend(rx.receive(link, &raw, 0));
            if links.len() == 2 {
                break;
            }
        }
        links.sort();
        assert_eq!(links, vec![Link::Link5GHz, Link::Link2GHz4]);
        assert_eq!(delivered.len(), 1);
        assert_eq!(delivered[0].payload, b"pose");
    }
}
