//! Deterministic random streams.
//!
//! Every purpose draws from its own PCG64 stream derived from the run seed,
//! so e.g. changing how many evaluation episodes run never shifts the
//! training samples.

use rand_pcg::Pcg64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    ValueSampling = 2,
    PolicySampling = 3,
    Eval = 4,
    Data = 5,
    Decoder = 6,
}

const STATE_MIX: u128 = 0xcafe_f00d_d15e_a5e5_a02b_dbf7_bb3c_0a7a;

pub fn stream(seed: u64, purpose: Stream) -> Pcg64 {
    Pcg64::new(((seed as u128) << 64) ^ STATE_MIX, purpose as u128)
}

/// Sub-stream of `purpose` for an indexed worker (e.g. one trajectory).
pub fn substream(seed: u64, purpose: Stream, index: u64) -> Pcg64 {
    let state = ((seed as u128) << 64 | index as u128) ^ STATE_MIX;
    Pcg64::new(state, ((purpose as u128) << 32) | 0x9e37)
}
