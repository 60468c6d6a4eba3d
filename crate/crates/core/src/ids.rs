use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of a peer within one simulation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId(pub u32);

/// Index of an ISP (or AS) within one scenario layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IspId(pub u32);

impl IspId {
    /// Pseudo-ISP hosting the initial seed; never subject to the outgoing cap.
    pub const SEED: IspId = IspId(u32::MAX);

    pub fn is_seed_pseudo(self) -> bool {
        self == Self::SEED
    }
}

impl PeerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl IspId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for IspId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_seed_pseudo() {
            f.write_str("seed")
        } else {
            write!(f, "{}", self.0)
        }
    }
}
