//! Live capture through raw IPv4 sockets (needs CAP_NET_RAW).
//!
//! Linux raw sockets hand back whole IPv4 datagrams, header included, so the
//! TTL at arrival is available without a packet filter library.

use std::io::{self, Read};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use socket2::{Domain, Protocol, Socket, Type};

pub struct LiveCapture {
    rx: Receiver<(u64, Vec<u8>)>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl LiveCapture {
    /// Opens one raw socket per requested protocol.
    pub fn open(icmp: bool, udp: bool) -> io::Result<Self> {
        let mut sockets = Vec::new();
        if icmp {
            sockets.push(Socket::new(Domain::IPV4, Type::RAW, Some(Protocol::ICMPV4))?);
        }
        if udp {
            sockets.push(Socket::new(Domain::IPV4, Type::RAW, Some(Protocol::UDP))?);
        }
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let threads = sockets
            .into_iter()
            .map(|mut sock| {
                sock.set_read_timeout(Some(Duration::from_millis(100)))?;
                let tx = tx.clone();
                let stop = Arc::clone(&stop);
                Ok(std::thread::spawn(move || {
                    let mut buf = vec![0u8; 65536];
                    while !stop.load(Ordering::Relaxed) {
                        match sock.read(&mut buf) {
                            Ok(n) => {
                                let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
                                if tx.send((now, buf[..n].to_vec())).is_err() {
                                    break;
                                }
                            }
                            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {}
                            Err(e) => {
                                log::error!("capture socket failed: {e}");
                                break;
                            }
                        }
                    }
                }))
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(LiveCapture { rx, stop, threads })
    }

    /// Next captured datagram with its receive time, or None after `timeout`.
    pub fn next_packet(&self, timeout: Duration) -> Option<(u64, Vec<u8>)> {
        match self.rx.recv_timeout(timeout) {
            Ok(p) => Some(p),
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
        }
    }
}

impl Drop for LiveCapture {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::{observe_ipv4, PacketOutcome};
    use crate::wire::{encode, Heartbeat, HostId};
    use std::net::UdpSocket;

    #[test]
    fn captures_loopback_udp_heartbeat() {
        let cap = match LiveCapture::open(false, true) {
            Ok(c) => c,
            Err(e) if e.kind() == io::ErrorKind::PermissionDenied => {
                eprintln!("skipping live capture test: {e}");
                return;
            }
            Err(e) => panic!("{e}"),
        };
        let rx = UdpSocket::bind("127.0.0.1:0").unwrap();
        let port = rx.local_addr().unwrap().port();
        let hb = Heartbeat::new(HostId(77), 1_000_000, 64, 1, 2);
        let tx = UdpSocket::bind("127.0.0.1:0").unwrap();
        tx.set_ttl(64).unwrap();
        tx.send_to(&encode(&hb).unwrap(), ("127.0.0.1", port)).unwrap();
        let lens = "127.0.0.0/8".parse().unwrap();
        let deadline = std::time::Instant::now() + Duration::from_secs(3);
        while std::time::Instant::now() < deadline {
            let Some((t, bytes)) = cap.next_packet(Duration::from_millis(200)) else { continue };
            if let PacketOutcome::Heartbeat(obs) = observe_ipv4(&bytes, t, &lens, port) {
                assert_eq!(obs.body, hb);
                assert_eq!(obs.arrival_ttl, 64);
                return;
            }
        }
        panic!("heartbeat not captured");
    }
}
