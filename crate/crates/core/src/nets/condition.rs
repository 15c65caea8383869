use serde::{Deserialize, Serialize};

use super::NetError;

/// Conditioning input of the denoiser: a class or the learned null condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    /// Row of the class-embedding table; the null condition is row `num_classes`.
    pub fn row(self, num_classes: usize) -> Result<usize, NetError> {
        match self {
            Condition::Class(c) if c < num_classes => Ok(c),
            Condition::Class(c) => Err(NetError::ClassOutOfRange { class: c, num_classes }),
            Condition::Null => Ok(num_classes),
        }
    }
}
