//! Network factory: residual networks and MLPs described by an [`ArchSpec`].

mod arch;
mod network;

pub use arch::{ArchSpec, Family, Penultimate};
pub use network::{BnRunning, Mode, Network, NetworkOutput, Param, BN_EPS, BN_MOMENTUM};

/// Wide-and-shallow residual learner: width 64, one block per stage,
/// 2x2 penultimate pooling.
pub fn build_sta_net(num_classes: usize) -> crate::Result<Network> {
    Network::build(&ArchSpec::sta_net(num_classes), 0)
}

/// Deep-and-thin residual learner: depth 18, width 42, global pooling.
pub fn build_pla_net(num_classes: usize) -> crate::Result<Network> {
    Network::build(&ArchSpec::pla_net(num_classes), 0)
}
