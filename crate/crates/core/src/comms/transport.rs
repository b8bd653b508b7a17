//! Broadcast transports and the per-robot view of neighbour predictions.

use std::collections::BTreeMap;
use std::net::{SocketAddr, UdpSocket};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::dynamics::DiscreteDynamics;
use crate::error::{Error, Result};
use crate::game::{shift_prediction, PredictedTrajectory};

/// Consecutive missed predictions from one neighbour before a safety stop.
pub const DEFAULT_MAX_STALE: usize = 3;

/// One robot's connection to all other robots.
pub trait Endpoint: Send {
    fn id(&self) -> usize;

    /// Sends one frame to every other endpoint.
    fn broadcast(&mut self, frame: &[u8]) -> Result<()>;

    /// Next pending frame, waiting at most `timeout`; `None` when nothing arrived.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>>;
}

/// Lossless, ordered channel endpoint.
pub struct InProcessEndpoint {
    id: usize,
    peers: Vec<Sender<Vec<u8>>>,
    inbox: Receiver<Vec<u8>>,
}

pub fn in_process_network(count: usize) -> Vec<InProcessEndpoint> {
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..count).map(|_| mpsc::channel()).unzip();
    receivers
        .into_iter()
        .enumerate()
        .map(|(id, inbox)| InProcessEndpoint {
            id,
            peers: senders.iter().enumerate().filter(|(j, _)| *j != id).map(|(_, s)| s.clone()).collect(),
            inbox,
        })
        .collect()
}

impl Endpoint for InProcessEndpoint {
    fn id(&self) -> usize {
        self.id
    }

    fn broadcast(&mut self, frame: &[u8]) -> Result<()> {
        for p in &self.peers {
            p.send(frame.to_vec()).map_err(|_| Error::Transport {
                addr: format!("in-process endpoint {}", self.id),
                source: std::io::Error::new(std::io::ErrorKind::BrokenPipe, "peer dropped"),
            })?;
        }
        Ok(())
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => Ok(None),
        }
    }
}

/// One datagram per frame over UDP.
pub struct UdpEndpoint {
    id: usize,
    socket: UdpSocket,
    local: SocketAddr,
    peers: Vec<SocketAddr>,
    buf: Vec<u8>,
}

impl UdpEndpoint {
    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }
}

/// Binds `count` sockets on `ip` (ephemeral ports) and connects them all-to-all.
pub fn udp_network(count: usize, ip: &str) -> Result<Vec<UdpEndpoint>> {
    let mut sockets = Vec::with_capacity(count);
    for _ in 0..count {
        let addr = format!("{ip}:0");
        let socket = UdpSocket::bind(&addr).map_err(|source| Error::Transport { addr: addr.clone(), source })?;
        let local = socket.local_addr().map_err(|source| Error::Transport { addr, source })?;
        sockets.push((socket, local));
    }
    let addrs: Vec<SocketAddr> = sockets.iter().map(|s| s.1).collect();
    Ok(sockets
        .into_iter()
        .enumerate()
        .map(|(id, (socket, local))| UdpEndpoint {
            id,
            socket,
            local,
            peers: addrs.iter().enumerate().filter(|(j, _)| *j != id).map(|(_, a)| *a).collect(),
            buf: vec![0; 65_536],
        })
        .collect())
}

impl Endpoint for UdpEndpoint {
    fn id(&self) -> usize {
        self.id
    }

    fn broadcast(&mut self, frame: &[u8]) -> Result<()> {
        for p in &self.peers {
            self.socket
                .send_to(frame, p)
                .map_err(|source| Error::Transport { addr: format!("{} -> {p}", self.local), source })?;
        }
        Ok(())
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        let t = if timeout.is_zero() { Duration::from_micros(1) } else { timeout };
        self.socket
            .set_read_timeout(Some(t))
            .map_err(|source| Error::Transport { addr: self.local.to_string(), source })?;
        match self.socket.recv_from(&mut self.buf) {
            Ok((len, _)) => Ok(Some(self.buf[..len].to_vec())),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => Ok(None),
            Err(source) => Err(Error::Transport { addr: self.local.to_string(), source }),
        }
    }
}

type DropRule = Box<dyn FnMut(&[u8]) -> bool + Send>;

/// Wraps an endpoint and silently discards outgoing frames the rule selects.
pub struct LossyEndpoint<E> {
    inner: E,
    rule: DropRule,
    pub dropped: usize,
}

impl<E: Endpoint> LossyEndpoint<E> {
    pub fn new(inner: E, rule: impl FnMut(&[u8]) -> bool + Send + 'static) -> Self {
        Self { inner, rule: Box::new(rule), dropped: 0 }
    }
}

impl<E: Endpoint> Endpoint for LossyEndpoint<E> {
    fn id(&self) -> usize {
        self.inner.id()
    }

    fn broadcast(&mut self, frame: &[u8]) -> Result<()> {
        if (self.rule)(frame) {
            self.dropped += 1;
            return Ok(());
        }
        self.inner.broadcast(frame)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        self.inner.recv_timeout(timeout)
    }
}

/// What one robot knows about its neighbours' predictions.
#[derive(Debug, Clone, Default)]
pub struct NeighborView {
    latest: BTreeMap<usize, PredictedTrajectory>,
    consecutive_misses: BTreeMap<usize, usize>,
    /// Total number of missed predictions.
    pub staleness_events: usize,
    pub max_stale: usize,
}

impl NeighborView {
    pub fn new(max_stale: usize) -> Self {
        Self { max_stale, ..Default::default() }
    }

    /// Stores a prediction unless the one held is newer.
    pub fn receive(&mut self, pred: PredictedTrajectory) {
        match self.latest.get(&pred.robot_id) {
            Some(p) if p.step_index > pred.step_index => {}
            _ => {
                self.latest.insert(pred.robot_id, pred);
            }
        }
    }

    /// Neighbour predictions shifted to `step`. A neighbour whose newest
    /// prediction is older than `step − 1` is extrapolated further and
    /// counted as a miss.
    pub fn current<'a>(
        &mut self,
        step: u64,
        dynamics: impl Fn(usize) -> &'a DiscreteDynamics,
    ) -> BTreeMap<usize, PredictedTrajectory> {
        let mut out = BTreeMap::new();
        for (&robot, p) in &self.latest {
            let mut cur = p.clone();
            let misses = self.consecutive_misses.entry(robot).or_insert(0);
            if cur.step_index + 1 < step {
                *misses += 1;
                self.staleness_events += 1;
                log::warn!("prediction of robot {robot} is {} steps old at step {step}", step - cur.step_index);
            } else {
                *misses = 0;
            }
            while cur.step_index < step {
                cur = shift_prediction(&cur, dynamics(robot));
            }
            out.insert(robot, cur);
        }
        out
    }

    /// Whether some neighbour has been missing for `max_stale` consecutive steps.
    pub fn safety_stop(&self) -> bool {
        self.consecutive_misses.values().any(|&m| m >= self.max_stale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::{decode, encode, Message, TrajectoryMessage};
    use crate::dynamics::{discretize, JointState};

    fn frame(robot: u16, step: u64) -> Vec<u8> {
        encode(&Message::Trajectory(TrajectoryMessage { robot_id: robot, step_index: step, n: 1, np: 2, states: vec![0.5; 6] }))
            .unwrap()
    }

    #[test]
    fn in_process_delivers_to_all_others() {
        let mut net = in_process_network(3);
        net[0].broadcast(&frame(0, 1)).unwrap();
        assert!(net[0].recv_timeout(Duration::ZERO).unwrap().is_none());
        for e in &mut net[1..] {
            let got = e.recv_timeout(Duration::ZERO).unwrap().unwrap();
            assert_eq!(got, frame(0, 1));
        }
    }

    #[test]
    fn udp_loopback_delivers() {
        let mut net = udp_network(2, "127.0.0.1").unwrap();
        net[1].broadcast(&frame(1, 7)).unwrap();
        let got = net[0].recv_timeout(Duration::from_millis(500)).unwrap().unwrap();
        assert!(matches!(decode(&got).unwrap(), Message::Trajectory(t) if t.step_index == 7));
    }

    #[test]
    fn bind_failure_names_address() {
        let err = udp_network(1, "203.0.113.1").err().map(|e| e.to_string()).unwrap_or_default();
        assert!(err.contains("203.0.113.1"), "{err}");
    }

    #[test]
    fn staleness_and_safety_stop() {
        let d = discretize(1, 0.2);
        let mut view = NeighborView::new(DEFAULT_MAX_STALE);
        let x = JointState::from_stacked(&[0.0, 1.0]).unwrap();
        view.receive(PredictedTrajectory::coasting(1, 0, &x, &d, 4));
        let cur = view.current(1, |_| &d);
        assert_eq!(cur[&1].step_index, 1);
        assert_eq!(view.staleness_events, 0);
        // One dropped prediction: extrapolated, counted, run continues.
        let cur = view.current(2, |_| &d);
        assert_eq!(cur[&1].step_index, 2);
        assert_eq!(view.staleness_events, 1);
        assert!(!view.safety_stop());
        view.current(3, |_| &d);
        assert!(!view.safety_stop());
        view.current(4, |_| &d);
        assert!(view.safety_stop());
        view.receive(PredictedTrajectory::coasting(1, 4, &x, &d, 4));
        view.current(5, |_| &d);
        assert!(!view.safety_stop());
    }

    #[test]
    fn lossy_wrapper_drops_selected_frames() {
        let net = in_process_network(2);
        let mut it = net.into_iter();
        let mut a = LossyEndpoint::new(it.next().unwrap(), |f: &[u8]| f[8] == 3);
        let mut b = it.next().unwrap();
        a.broadcast(&frame(0, 3)).unwrap();
        a.broadcast(&frame(0, 4)).unwrap();
        assert_eq!(a.dropped, 1);
        let got = b.recv_timeout(Duration::ZERO).unwrap().unwrap();
        assert_eq!(got, frame(0, 4));
    }
}
