//! Serializable position of a ChaCha stream, so interrupted runs can resume
//! with the exact same random draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub key: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let key = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            key,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |why: &str| Error::Incompatible(format!("rng state: {why}"));
        if self.key.len() != 64 {
            return Err(bad("key must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.key[2 * i..2 * i + 2], 16).map_err(|_| bad("non-hex key"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Independent generator for a named purpose derived from one run seed.
pub fn derive(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn capture_restore_continues_stream() {
        let mut a = derive(17, 3);
        for _ in 0..37 {
            a.random::<u32>();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        let xs: Vec<u64> = (0..10).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..10).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }
}
