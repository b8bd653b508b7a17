//! Binary wire format.
//!
//! Every frame starts with the magic bytes `44 4D 50 43`, a version byte and
//! a type byte (1 trajectory, 2 deadlock report, 3 coordinator command),
//! followed by the message fields in declaration order. Integers and reals
//! are little-endian; reals are IEEE-754 binary64; booleans are one byte
//! (0 or 1). Vectors of a robot's state are preceded by the joint count `N`
//! as one byte.

use thiserror::Error;

use crate::dynamics::JointState;
use crate::game::PredictedTrajectory;

pub const MAGIC: [u8; 4] = [0x44, 0x4D, 0x50, 0x43];
pub const VERSION: u8 = 1;

const TYPE_TRAJECTORY: u8 = 1;
const TYPE_REPORT: u8 = 2;
const TYPE_COMMAND: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("truncated frame: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("invalid boolean byte {0}")]
    BadFlag(u8),
    #[error("payload length mismatch: {0}")]
    LengthMismatch(String),
}

/// A robot's predicted trajectory: `(np + 1)` stacked states of `2n` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMessage {
    pub robot_id: u16,
    pub step_index: u64,
    pub n: u8,
    pub np: u16,
    pub states: Vec<f64>,
}

impl TrajectoryMessage {
    pub fn from_prediction(p: &PredictedTrajectory) -> Result<Self, CodecError> {
        let n = p.states.first().map_or(0, JointState::dof);
        let robot_id = u16::try_from(p.robot_id).map_err(|_| CodecError::LengthMismatch("robot id exceeds u16".into()))?;
        let n8 = u8::try_from(n).map_err(|_| CodecError::LengthMismatch("joint count exceeds u8".into()))?;
        let np = u16::try_from(p.states.len().saturating_sub(1))
            .map_err(|_| CodecError::LengthMismatch("horizon exceeds u16".into()))?;
        let mut states = Vec::with_capacity(p.states.len() * 2 * n);
        for x in &p.states {
            if x.dof() != n {
                return Err(CodecError::LengthMismatch("states of different dimension".into()));
            }
            states.extend(x.q.iter().chain(x.qd.iter()));
        }
        Ok(Self { robot_id, step_index: p.step_index, n: n8, np, states })
    }

    pub fn to_prediction(&self) -> PredictedTrajectory {
        let n2 = 2 * self.n as usize;
        let states = self
            .states
            .chunks(n2.max(1))
            .map(|c| JointState::from_stacked(c).expect("even chunk"))
            .collect();
        PredictedTrajectory { robot_id: self.robot_id as usize, step_index: self.step_index, states }
    }
}

/// Per-step status an agent sends to the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadlockReport {
    pub robot_id: u16,
    pub step_index: u64,
    pub gamma_d: bool,
    pub n: u8,
    pub x_s: Vec<f64>,
    pub x_f: Vec<f64>,
}

/// Activation decision the coordinator sends to an agent.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorCommand {
    pub robot_id: u16,
    pub step_index: u64,
    pub gamma_r: bool,
    /// Stacked override target, present only when the robot is redirected.
    pub override_target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Trajectory(TrajectoryMessage),
    Report(DeadlockReport),
    Command(CoordinatorCommand),
}

fn put_reals(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    match msg {
        Message::Trajectory(t) => {
            let expected = (t.np as usize + 1) * 2 * t.n as usize;
            if t.states.len() != expected {
                return Err(CodecError::LengthMismatch(format!("{} reals, expected {expected}", t.states.len())));
            }
            out.push(TYPE_TRAJECTORY);
            out.extend_from_slice(&t.robot_id.to_le_bytes());
            out.extend_from_slice(&t.step_index.to_le_bytes());
            out.push(t.n);
            out.extend_from_slice(&t.np.to_le_bytes());
            put_reals(&mut out, &t.states);
        }
        Message::Report(r) => {
            let len = 2 * r.n as usize;
            if r.x_s.len() != len || r.x_f.len() != len {
                return Err(CodecError::LengthMismatch(format!("report vectors must have {len} reals")));
            }
            out.push(TYPE_REPORT);
            out.extend_from_slice(&r.robot_id.to_le_bytes());
            out.extend_from_slice(&r.step_index.to_le_bytes());
            out.push(r.gamma_d as u8);
            out.push(r.n);
            put_reals(&mut out, &r.x_s);
            put_reals(&mut out, &r.x_f);
        }
        Message::Command(c) => {
            out.push(TYPE_COMMAND);
            out.extend_from_slice(&c.robot_id.to_le_bytes());
            out.extend_from_slice(&c.step_index.to_le_bytes());
            out.push(c.gamma_r as u8);
            out.push(c.override_target.is_some() as u8);
            if let Some(t) = &c.override_target {
                if t.len() % 2 != 0 || t.len() / 2 > u8::MAX as usize {
                    return Err(CodecError::LengthMismatch(format!("override target of {} reals", t.len())));
                }
                out.push((t.len() / 2) as u8);
                put_reals(&mut out, t);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < self.pos + n {
            return Err(CodecError::Truncated { needed: self.pos + n, got: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CodecError::BadFlag(b)),
        }
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        let bytes = self.take(8 * n)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message, CodecError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let msg = match r.u8()? {
        TYPE_TRAJECTORY => {
            let robot_id = r.u16()?;
            let step_index = r.u64()?;
            let n = r.u8()?;
            let np = r.u16()?;
            let states = r.reals((np as usize + 1) * 2 * n as usize)?;
            Message::Trajectory(TrajectoryMessage { robot_id, step_index, n, np, states })
        }
        TYPE_REPORT => {
            let robot_id = r.u16()?;
            let step_index = r.u64()?;
            let gamma_d = r.flag()?;
            let n = r.u8()?;
            let x_s = r.reals(2 * n as usize)?;
            let x_f = r.reals(2 * n as usize)?;
            Message::Report(DeadlockReport { robot_id, step_index, gamma_d, n, x_s, x_f })
        }
        TYPE_COMMAND => {
            let robot_id = r.u16()?;
            let step_index = r.u64()?;
            let gamma_r = r.flag()?;
            let override_target = if r.flag()? {
                let n = r.u8()?;
                Some(r.reals(2 * n as usize)?)
            } else {
                None
            };
            Message::Command(CoordinatorCommand { robot_id, step_index, gamma_r, override_target })
        }
        t => return Err(CodecError::BadType(t)),
    };
    if r.pos != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn golden_trajectory() -> Message {
        Message::Trajectory(TrajectoryMessage { robot_id: 0, step_index: 0, n: 1, np: 2, states: vec![0.0; 6] })
    }

    #[test]
    fn golden_length() {
        let bytes = encode(&golden_trajectory()).unwrap();
        assert_eq!(bytes.len(), 67);
        assert_eq!(&bytes[..6], &[0x44, 0x4D, 0x50, 0x43, 1, 1]);
        assert_eq!(decode(&bytes).unwrap(), golden_trajectory());
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&golden_trajectory()).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(decode(&bad), Err(CodecError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(CodecError::BadVersion(2))));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(decode(&bad), Err(CodecError::BadType(9))));
        assert!(matches!(decode(&bytes[..40]), Err(CodecError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CodecError::TrailingBytes(1))));
        let bad = Message::Trajectory(TrajectoryMessage { robot_id: 0, step_index: 0, n: 1, np: 2, states: vec![0.0; 5] });
        assert!(matches!(encode(&bad), Err(CodecError::LengthMismatch(_))));
    }

    fn reals(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(any::<f64>().prop_filter("not nan", |v| !v.is_nan()), len)
    }

    fn message() -> impl Strategy<Value = Message> {
        let traj = (any::<u16>(), any::<u64>(), 1u8..7, 1u16..6)
            .prop_flat_map(|(id, k, n, np)| {
                reals((np as usize + 1) * 2 * n as usize)
                    .prop_map(move |states| Message::Trajectory(TrajectoryMessage { robot_id: id, step_index: k, n, np, states }))
            });
        let report = (any::<u16>(), any::<u64>(), any::<bool>(), 1u8..7).prop_flat_map(|(id, k, g, n)| {
            (reals(2 * n as usize), reals(2 * n as usize)).prop_map(move |(x_s, x_f)| {
                Message::Report(DeadlockReport { robot_id: id, step_index: k, gamma_d: g, n, x_s, x_f })
            })
        });
        let command = (any::<u16>(), any::<u64>(), any::<bool>(), proptest::option::of(1usize..7)).prop_flat_map(
            |(id, k, g, n)| {
                proptest::option::of(reals(2 * n.unwrap_or(1))).prop_map(move |t| {
                    Message::Command(CoordinatorCommand {
                        robot_id: id,
                        step_index: k,
                        gamma_r: g,
                        override_target: if n.is_some() { t } else { None },
                    })
                })
            },
        );
        prop_oneof![traj, report, command]
    }

    proptest! {
        #[test]
        fn round_trip(msg in message()) {
            let bytes = encode(&msg).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), msg);
        }

        #[test]
        fn truncation_always_detected(msg in message(), cut in 0usize..1000) {
            let bytes = encode(&msg).unwrap();
            let cut = cut % bytes.len();
            prop_assert!(decode(&bytes[..cut]).is_err());
        }
    }
}
