//! Emitters: where emissions go once the engine has built them.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{Ipv4Addr, SocketAddrV4, UdpSocket};
use std::path::Path;

use socket2::{Domain, Protocol, SockAddr, Socket, Type};
use thiserror::Error;

use super::Emission;
use crate::wire::{encapsulate, encode, TransportKind, ValidationError};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Encode(#[from] ValidationError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub trait Emitter {
    fn emit(&mut self, emission: &Emission) -> Result<(), EmitError>;

    fn flush(&mut self) -> Result<(), EmitError> {
        Ok(())
    }
}

/// Collects emissions in memory.
#[derive(Debug, Default)]
pub struct MemoryEmitter {
    pub emissions: Vec<Emission>,
}

impl Emitter for MemoryEmitter {
    fn emit(&mut self, emission: &Emission) -> Result<(), EmitError> {
        self.emissions.push(emission.clone());
        Ok(())
    }
}

/// Writes one JSON `Emission` per line.
pub struct FileEmitter<W: Write = BufWriter<File>> {
    out: W,
}

impl FileEmitter {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(FileEmitter { out: BufWriter::new(File::create(path)?) })
    }
}

impl<W: Write> FileEmitter<W> {
    pub fn from_writer(out: W) -> Self {
        FileEmitter { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> Emitter for FileEmitter<W> {
    fn emit(&mut self, emission: &Emission) -> Result<(), EmitError> {
        serde_json::to_writer(&mut self.out, emission)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), EmitError> {
        self.out.flush()?;
        Ok(())
    }
}

/// UDP heartbeats through ordinary sockets, one bound socket per source address.
#[derive(Debug, Default)]
pub struct UdpEmitter {
    sockets: HashMap<Ipv4Addr, UdpSocket>,
}

impl Emitter for UdpEmitter {
    fn emit(&mut self, e: &Emission) -> Result<(), EmitError> {
        let TransportKind::Udp { port } = e.transport else {
            return Err(io::Error::new(io::ErrorKind::Unsupported, "UdpEmitter given an ICMP emission").into());
        };
        let sock = match self.sockets.entry(e.src_addr) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => v.insert(UdpSocket::bind((e.src_addr, 0))?),
        };
        sock.set_ttl(u32::from(e.ttl))?;
        sock.send_to(&encode(&e.heartbeat)?, SocketAddrV4::new(e.dst_addr, port))?;
        Ok(())
    }
}

/// ICMP type-253 heartbeats through a raw socket. Needs CAP_NET_RAW.
#[derive(Debug, Default)]
pub struct IcmpEmitter {
    sockets: HashMap<Ipv4Addr, Socket>,
}

impl Emitter for IcmpEmitter {
    fn emit(&mut self, e: &Emission) -> Result<(), EmitError> {
        if e.transport != TransportKind::Icmp {
            return Err(io::Error::new(io::ErrorKind::Unsupported, "IcmpEmitter given a UDP emission").into());
        }
        let sock = match self.sockets.entry(e.src_addr) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                let s = Socket::new(Domain::IPV4, Type::RAW, Some(Protocol::ICMPV4))?;
                s.bind(&SockAddr::from(SocketAddrV4::new(e.src_addr, 0)))?;
                v.insert(s)
            }
        };
        sock.set_ttl(u32::from(e.ttl))?;
        let packet = encapsulate(TransportKind::Icmp, &encode(&e.heartbeat)?);
        sock.send_to(&packet, &SockAddr::from(SocketAddrV4::new(e.dst_addr, 0)))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode, Heartbeat, HostId};

    fn emission(transport: TransportKind) -> Emission {
        Emission {
            send_time_ns: 5,
            src_addr: Ipv4Addr::LOCALHOST,
            dst_addr: Ipv4Addr::LOCALHOST,
            ttl: 64,
            transport,
            heartbeat: Heartbeat::new(HostId(3), 1_000_000, 64, 5, 9),
        }
    }

    #[test]
    fn file_emitter_writes_jsonl() {
        let mut em = FileEmitter::from_writer(Vec::new());
        em.emit(&emission(TransportKind::Icmp)).unwrap();
        em.emit(&emission(TransportKind::Icmp)).unwrap();
        let text = String::from_utf8(em.into_inner()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: Emission = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, emission(TransportKind::Icmp));
    }

    #[test]
    fn udp_emitter_over_loopback() {
        let rx = UdpSocket::bind("127.0.0.1:0").unwrap();
        rx.set_read_timeout(Some(std::time::Duration::from_secs(2))).unwrap();
        let port = rx.local_addr().unwrap().port();
        let e = emission(TransportKind::Udp { port });
        UdpEmitter::default().emit(&e).unwrap();
        let mut buf = [0u8; 128];
        let n = rx.recv(&mut buf).unwrap();
        assert_eq!(decode(&buf[..n]).unwrap(), e.heartbeat);
    }

    #[test]
    fn icmp_emitter_needs_privilege_or_works() {
        match IcmpEmitter::default().emit(&emission(TransportKind::Icmp)) {
            Ok(()) => {}
            Err(EmitError::Io(err)) => assert_eq!(err.kind(), io::ErrorKind::PermissionDenied),
            Err(other) => panic!("{other}"),
        }
    }

    #[test]
    fn transport_mismatch_is_an_error() {
        assert!(UdpEmitter::default().emit(&emission(TransportKind::Icmp)).is_err());
        assert!(IcmpEmitter::default().emit(&emission(TransportKind::Udp { port: 1 })).is_err());
    }
}
