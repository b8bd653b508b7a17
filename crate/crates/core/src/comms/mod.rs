//! Messages exchanged between agents and the coordinator, their byte
//! encoding, and the transports that carry them.

mod codec;
mod transport;

pub use codec::{decode, encode, CodecError, CoordinatorCommand, DeadlockReport, Message, TrajectoryMessage, MAGIC, VERSION};
pub use transport::{
    in_process_network, udp_network, Endpoint, InProcessEndpoint, LossyEndpoint, NeighborView, UdpEndpoint, DEFAULT_MAX_STALE,
};
