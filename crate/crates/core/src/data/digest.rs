use sha2::{Digest, Sha256};

use crate::nets::Params;
use crate::scalar::Scalar;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a model's parameters as they are stored in a checkpoint
/// (names, shapes and 32-bit values).
pub fn params_digest<T: Scalar>(params: &Params<T>) -> String {
    sha256_hex(&super::checkpoint::encode_params(params))
}
